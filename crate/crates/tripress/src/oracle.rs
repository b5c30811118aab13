//! Independent verification tools: a sequential single-dictionary encoder,
//! a decoder that inverts a finished run, and a global consistency checker.
//!
//! These deliberately share no code with the distributed pipeline so they
//! can serve as oracles for it. The sequential encoder assigns ids 1,2,3,…
//! in first-occurrence order; the distributed id space differs by
//! construction, so equivalence is judged on equality-class structure
//! (positions i and j carry equal ids iff they carry equal terms), which is
//! schedule-independent.

use crate::error::{Error, Result};
use crate::storage::{self, HEADER_LEN};
use crate::term::{self, Statement, Term, TermId, TermMap};
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

/// Result of the conventional one-dictionary baseline encoder.
pub struct SequentialEncoding {
    /// term -> id, ids dense from 1 in first-occurrence order.
    pub dictionary: TermMap<u64>,
    /// One id tuple per statement, statement order preserved.
    pub ids: Vec<Vec<u64>>,
}

pub fn sequential_encode(statements: &[Statement]) -> SequentialEncoding {
    let mut dictionary: TermMap<u64> = TermMap::default();
    let mut ids = Vec::with_capacity(statements.len());
    for stmt in statements {
        let tuple = stmt
            .terms()
            .iter()
            .map(|t| {
                let next = dictionary.len() as u64 + 1;
                *dictionary.entry(t.clone()).or_insert(next)
            })
            .collect();
        ids.push(tuple);
    }
    SequentialEncoding { dictionary, ids }
}

/// True iff the two id streams induce the same partition of positions into
/// equality classes. Tuples are compared position-by-position after
/// flattening.
pub fn same_equality_classes(a: &[Vec<u64>], b: &[Vec<u64>]) -> bool {
    let flat_a: Vec<u64> = a.iter().flatten().copied().collect();
    let flat_b: Vec<u64> = b.iter().flatten().copied().collect();
    if flat_a.len() != flat_b.len() {
        return false;
    }
    let mut fwd: HashMap<u64, u64> = HashMap::new();
    let mut rev: HashMap<u64, u64> = HashMap::new();
    for (&x, &y) in flat_a.iter().zip(&flat_b) {
        if *fwd.entry(x).or_insert(y) != y || *rev.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Decode a finished run back into statements, one vector per place, each in
/// its file's order.
pub fn decode_run(dir: &Path) -> Result<Vec<Vec<Statement>>> {
    let (places, _) = storage::read_manifest(dir)?;
    let mut pooled: HashMap<TermId, Term> = HashMap::new();
    for place in 0..places {
        let path = dir.join(storage::dict_file_name(place));
        let (map, _) = storage::load_dictionary(&path, place, places)?;
        for (term, id) in map {
            pooled.insert(id, term);
        }
    }

    let mut out = Vec::with_capacity(places);
    for place in 0..places {
        let (_, encoded) = storage::read_encoded_file(dir, place)?;
        let mut stmts = Vec::with_capacity(encoded.len());
        let mut offset = HEADER_LEN;
        for enc in encoded {
            let mut terms = Vec::with_capacity(enc.ids.len());
            for id in enc.ids {
                match pooled.get(&id) {
                    Some(t) => terms.push(t.clone()),
                    None => {
                        return Err(Error::Corrupt {
                            path: dir
                                .join(storage::data_file_name(place))
                                .display()
                                .to_string(),
                            msg: format!(
                                "id {} at byte offset {offset} not in any dictionary",
                                id.value()
                            ),
                        })
                    }
                }
                offset += 8;
            }
            stmts.push(Statement::new(terms)?);
        }
        out.push(stmts);
    }
    Ok(out)
}

/// All decoded statements of a run, places concatenated in order.
pub fn decode_pooled(dir: &Path) -> Result<Vec<Statement>> {
    Ok(decode_run(dir)?.into_iter().flatten().collect())
}

#[derive(Debug, Default)]
pub struct ConsistencyReport {
    pub places: usize,
    pub dictionary_entries: u64,
    pub encoded_statements: u64,
    pub violations: Vec<String>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scan a run's dictionaries and encoded files, listing every violation of
/// the global invariants: term -> id functionality, id -> term injectivity,
/// the residue law (id mod P = owning place = hash(term) mod P), journal
/// order, and id resolvability of the encoded streams.
///
/// Unlike [`storage::load_dictionary`] this keeps going after a violation so
/// a report can name all of them. Memory is O(total dictionary entries).
pub fn check_consistency(dir: &Path) -> Result<ConsistencyReport> {
    let (places, _) = storage::read_manifest(dir)?;
    let mut report = ConsistencyReport { places, ..Default::default() };
    let mut by_id: HashMap<u64, (Term, usize)> = HashMap::new();
    let mut by_term: TermMap<u64> = TermMap::default();

    for place in 0..places {
        let path = dir.join(storage::dict_file_name(place));
        let display = path.display().to_string();
        let file = std::fs::File::open(&path)
            .map_err(|e| Error::io(display.clone(), e))?;
        let mut prev_id: Option<u64> = None;
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(display.clone(), e))?;
            if line.is_empty() {
                continue;
            }
            let Some((id_str, term_str)) = line.split_once('\t') else {
                report
                    .violations
                    .push(format!("{display}:{lineno}: missing TAB separator"));
                continue;
            };
            let Ok(id) = id_str.parse::<u64>() else {
                report
                    .violations
                    .push(format!("{display}:{lineno}: unparsable id {id_str:?}"));
                continue;
            };
            let term = match Term::new(term_str) {
                Ok(t) => t,
                Err(e) => {
                    report.violations.push(format!("{display}:{lineno}: {e}"));
                    continue;
                }
            };
            report.dictionary_entries += 1;

            if id < places as u64 {
                report
                    .violations
                    .push(format!("{display}:{lineno}: reserved id {id}"));
            } else if id % places as u64 != place as u64 {
                report.violations.push(format!(
                    "{display}:{lineno}: residue law broken, id {id} mod {places} != {place}"
                ));
            }
            let owner = term::destination(&term, places)?;
            if owner != place {
                report.violations.push(format!(
                    "{display}:{lineno}: term hashes to place {owner}, stored at {place}"
                ));
            }
            if let Some(prev) = prev_id {
                if id <= prev {
                    report.violations.push(format!(
                        "{display}:{lineno}: journal order broken, id {id} after {prev}"
                    ));
                }
            }
            prev_id = Some(id);

            if let Some((other, other_place)) = by_id.get(&id) {
                report.violations.push(format!(
                    "{display}:{lineno}: id {id} already maps to {:?} at place {other_place}",
                    other.as_str()
                ));
            } else {
                by_id.insert(id, (term.clone(), place));
            }
            if let Some(&other_id) = by_term.get(&term) {
                if other_id != id {
                    report.violations.push(format!(
                        "{display}:{lineno}: term {:?} has ids {other_id} and {id}",
                        term.as_str()
                    ));
                }
            } else {
                by_term.insert(term, id);
            }
        }
    }

    for place in 0..places {
        let (_, encoded) = storage::read_encoded_file(dir, place)?;
        let data = dir.join(storage::data_file_name(place)).display().to_string();
        let mut offset = HEADER_LEN;
        for enc in &encoded {
            for id in &enc.ids {
                if !by_id.contains_key(&id.value()) {
                    report.violations.push(format!(
                        "{data}: id {} at byte offset {offset} not in any dictionary",
                        id.value()
                    ));
                }
                offset += 8;
            }
        }
        report.encoded_statements += encoded.len() as u64;
    }
    Ok(report)
}
