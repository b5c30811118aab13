//! Core domain types: terms, ids, statements, and the partition hash.
//!
//! A [`Term`] is the full lexical form of an RDF term as tokenized by the
//! parser: IRIs without their enclosing angle brackets, literals verbatim
//! including quotes, language tag and datatype suffix, blank nodes as the
//! `_:label` token. Equality is exact byte equality; no IRI normalization.
//!
//! Ids follow a residue-class scheme: place `p` of `P` only ever assigns ids
//! congruent to `p` modulo `P`, so the owning dictionary of any id is
//! recoverable as `id % P`. Ids below `P` are reserved and never assigned;
//! 0 doubles as the nil sentinel.
//!
//! The partition hash is FNV-1a 64 over the raw UTF-8 bytes of the term.
//! This is part of the on-disk/wire contract: dictionaries are only portable
//! between implementations that agree on it.

use crate::error::{Error, Result};
use std::fmt;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit digest of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// A complete lexical RDF term, treated as an opaque UTF-8 byte string key.
/// The partition hash is computed once at construction; term-keyed maps use
/// it directly (see [`TermMap`]), so a term's bytes are hashed exactly once
/// no matter how many lookups it goes through.
#[derive(Clone)]
pub struct Term {
    text: std::sync::Arc<str>,
    hash: u64,
}

impl Term {
    /// Terms must be non-empty and free of raw TAB/CR/LF, which the
    /// dictionary file format and the parser both exclude.
    pub fn new(lexical: impl Into<String>) -> Result<Term> {
        let s = lexical.into();
        if s.is_empty() {
            return Err(Error::Config("empty term".into()));
        }
        if s.bytes().any(|b| b == b'\t' || b == b'\n' || b == b'\r') {
            return Err(Error::Config(format!(
                "term contains TAB/CR/LF: {s:?}"
            )));
        }
        Ok(Term { hash: fnv1a64(s.as_bytes()), text: s.into() })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.text.as_bytes()
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn into_string(self) -> String {
        self.text.as_ref().to_owned()
    }

    /// Partition hash of this term (FNV-1a 64 over raw bytes).
    pub fn partition_hash(&self) -> u64 {
        self.hash
    }
}

impl PartialEq for Term {
    fn eq(&self, other: &Term) -> bool {
        self.hash == other.hash
            && (std::sync::Arc::ptr_eq(&self.text, &other.text) || self.text == other.text)
    }
}

impl Eq for Term {}

impl std::hash::Hash for Term {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        state.write_u64(self.hash);
    }
}

impl PartialOrd for Term {
    fn partial_cmp(&self, other: &Term) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Term {
    fn cmp(&self, other: &Term) -> std::cmp::Ordering {
        self.text.cmp(&other.text)
    }
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Term({:?})", self.text)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Hasher that passes a precomputed `u64` straight through; pair it only
/// with keys whose `Hash` impl writes a single well-mixed `u64`.
#[derive(Clone, Copy, Default)]
pub struct PrehashedHasher(u64);

impl std::hash::Hasher for PrehashedHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v;
    }

    fn write(&mut self, bytes: &[u8]) {
        // Fallback for keys that hash raw bytes; not used by Term.
        self.0 = fnv1a64(bytes);
    }
}

pub type TermHashBuilder = std::hash::BuildHasherDefault<PrehashedHasher>;
/// Map keyed by [`Term`]s using their cached partition hash.
pub type TermMap<V> = std::collections::HashMap<Term, V, TermHashBuilder>;
pub type TermSet = std::collections::HashSet<Term, TermHashBuilder>;

/// Index of the place whose dictionary owns `term`.
pub fn destination(term: &Term, place_count: usize) -> Result<usize> {
    if place_count == 0 {
        return Err(Error::Config("place count must be >= 1".into()));
    }
    Ok((term.partition_hash() % place_count as u64) as usize)
}

/// Unsigned 64-bit term identifier. `value % P` is the owning place index.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermId(pub u64);

impl TermId {
    /// The nil sentinel; never assigned to a term.
    pub const NIL: TermId = TermId(0);

    pub fn value(self) -> u64 {
        self.0
    }

    /// Owning place under a given place count.
    pub fn owner(self, place_count: usize) -> usize {
        (self.0 % place_count as u64) as usize
    }
}

impl fmt::Debug for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TermId({})", self.0)
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An ordered tuple of 3 (triple) or 4 (quad) terms.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Statement {
    terms: Vec<Term>,
}

impl Statement {
    pub fn new(terms: Vec<Term>) -> Result<Statement> {
        if terms.len() != 3 && terms.len() != 4 {
            return Err(Error::Config(format!(
                "statement arity must be 3 or 4, got {}",
                terms.len()
            )));
        }
        Ok(Statement { terms })
    }

    pub fn arity(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn into_terms(self) -> Vec<Term> {
        self.terms
    }

    /// Canonical N-Triples/N-Quads line for this statement.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.terms {
            serialize_term(t, &mut out);
            out.push(' ');
        }
        out.push('.');
        out
    }
}

/// Re-serialize one term: literals and blank nodes are stored verbatim,
/// anything else is an IRI and gets its angle brackets back.
pub fn serialize_term(term: &Term, out: &mut String) {
    let s = term.as_str();
    if s.starts_with('"') || s.starts_with("_:") {
        out.push_str(s);
    } else {
        out.push('<');
        out.push_str(s);
        out.push('>');
    }
}

/// The id tuple produced by compressing a [`Statement`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EncodedStatement {
    pub ids: Vec<TermId>,
}

impl EncodedStatement {
    pub fn arity(&self) -> usize {
        self.ids.len()
    }
}
