//! Per-place encoding state machine: filter/collect terms, encode owned
//! terms, merge pulled mappings, and compress statements.
//!
//! Each place owns one authoritative dictionary shard holding only the
//! terms whose partition hash maps to it. Within a loop iteration the
//! place collects every parsed term in statement order, pushes each
//! distinct term to its owning place at most once (per-destination dedup
//! sets), encodes the groups it receives, and finally rebuilds its own
//! statements from a transient term-to-id table that is discarded right
//! after compression.

use crate::error::{Error, Result};
use crate::metrics::MetricCounters;
use crate::parser::Chunk;
use crate::term::{EncodedStatement, Term, TermId, TermMap, TermSet};
use crate::transport::{IdGroupMsg, TermGroupMsg};

/// One place's dictionary, buffers, and counters.
pub struct PlaceState {
    pub place_index: usize,
    pub place_count: usize,
    /// Authoritative term -> id map for terms owned by this place.
    pub dict: TermMap<TermId>,
    /// All parsed terms of this place's chunks, in statement order.
    pub term_buffer: Vec<Term>,
    /// Arity of each buffered statement, parallel to groups of terms in
    /// `term_buffer`.
    pub arities: Vec<u8>,
    /// Per-destination unique terms collected this iteration.
    pub outgoing_groups: Vec<Vec<Term>>,
    /// Per-destination dedup sets; cleared every iteration.
    dedup_sets: Vec<TermSet>,
    /// Terms seen in the current chunk; a small, cache-resident pre-filter
    /// so most repeated occurrences never probe the iteration-sized sets.
    chunk_seen: TermSet,
    /// Ids pulled back from each encoder, aligned with `outgoing_groups`.
    pub pulled_ids: Vec<Vec<TermId>>,
    /// Count of ids this place has ever assigned.
    pub next_ordinal: u64,
    /// New mappings created since the journal was last drained.
    journal: Vec<(TermId, Term)>,
    pub metrics: MetricCounters,
}

impl PlaceState {
    pub fn new(place_index: usize, place_count: usize) -> Result<PlaceState> {
        if place_count == 0 {
            return Err(Error::Config("place count must be >= 1".into()));
        }
        if place_index >= place_count {
            return Err(Error::Config(format!(
                "place index {place_index} out of range for {place_count} places"
            )));
        }
        Ok(PlaceState {
            place_index,
            place_count,
            dict: TermMap::default(),
            term_buffer: Vec::new(),
            arities: Vec::new(),
            outgoing_groups: vec![Vec::new(); place_count],
            dedup_sets: vec![TermSet::default(); place_count],
            chunk_seen: TermSet::default(),
            pulled_ids: vec![Vec::new(); place_count],
            next_ordinal: 0,
            journal: Vec::new(),
            metrics: MetricCounters::default(),
        })
    }

    /// Rebuild a place around an existing dictionary (incremental update).
    /// `next_ordinal` resumes from the largest owned id.
    pub fn with_dictionary(
        place_index: usize,
        place_count: usize,
        dict: TermMap<TermId>,
        max_owned_id: Option<u64>,
    ) -> Result<PlaceState> {
        let mut state = PlaceState::new(place_index, place_count)?;
        if let Some(max) = max_owned_id {
            if max % place_count as u64 != place_index as u64 {
                return Err(Error::Corrupt {
                    path: String::new(),
                    msg: format!(
                        "max id {max} does not belong to place {place_index} (mod {place_count})"
                    ),
                });
            }
            state.next_ordinal = (max - place_index as u64) / place_count as u64;
        }
        state.dict = dict;
        Ok(state)
    }

    fn dest_of(&self, term: &Term) -> usize {
        (term.partition_hash() % self.place_count as u64) as usize
    }

    /// Reset the per-iteration buffers. The dictionary, ordinal counter and
    /// accumulated metrics survive; the buffers themselves are reused.
    pub fn begin_iteration(&mut self) {
        self.term_buffer.clear();
        self.arities.clear();
        for g in &mut self.outgoing_groups {
            g.clear();
        }
        for s in &mut self.dedup_sets {
            s.clear();
        }
        for p in &mut self.pulled_ids {
            p.clear();
        }
    }

    /// Collect every term of the chunk into the term buffer and route each
    /// distinct term to its destination group at most once this iteration.
    pub fn filter_and_collect(&mut self, chunk: &Chunk) {
        self.chunk_seen.clear();
        for stmt in &chunk.statements {
            self.arities.push(stmt.arity() as u8);
            for term in stmt.terms() {
                // Intern every occurrence to one canonical Term per
                // iteration: duplicates' parse-time allocations die with
                // the chunk, and later lookups hit the Arc pointer-equality
                // fast path. `chunk_seen` is a small, cache-resident
                // pre-filter so repeats rarely probe the iteration-sized
                // dedup sets.
                let canonical = match self.chunk_seen.get(term) {
                    Some(seen) => seen.clone(),
                    None => {
                        let dest = self.dest_of(term);
                        let canonical = match self.dedup_sets[dest].get(term) {
                            Some(known) => known.clone(),
                            None => {
                                self.dedup_sets[dest].insert(term.clone());
                                self.outgoing_groups[dest].push(term.clone());
                                if dest == self.place_index {
                                    self.metrics.local_terms += 1;
                                } else {
                                    self.metrics.outgoing_terms += 1;
                                }
                                term.clone()
                            }
                        };
                        self.chunk_seen.insert(canonical.clone());
                        canonical
                    }
                };
                self.term_buffer.push(canonical);
            }
            self.metrics.parsed_terms += stmt.arity() as u64;
        }
        self.metrics.statements += chunk.statements.len() as u64;
    }

    /// Build this iteration's push messages, one per destination place,
    /// empty groups included.
    pub fn outgoing_messages(&self, loop_ordinal: u64) -> Vec<TermGroupMsg> {
        (0..self.place_count)
            .map(|dest| TermGroupMsg {
                origin: self.place_index,
                dest,
                loop_ordinal,
                terms: self.outgoing_groups[dest].clone(),
            })
            .collect()
    }

    /// Next fresh id: `(ordinal + 1) * P + placeIndex`. Stride P per place,
    /// disjoint residue classes across places, ids below P never assigned.
    pub fn assign_id(&mut self) -> Result<TermId> {
        let p = self.place_count as u64;
        let id = self
            .next_ordinal
            .checked_add(1)
            .and_then(|n| n.checked_mul(p))
            .and_then(|v| v.checked_add(self.place_index as u64))
            .ok_or_else(|| Error::Capacity("id space exhausted".into()))?;
        self.next_ordinal += 1;
        Ok(TermId(id))
    }

    /// Encode one incoming term group against this place's dictionary and
    /// return the positionally aligned id group. New mappings go to the
    /// journal.
    pub fn encode_owned_terms(&mut self, incoming: &TermGroupMsg) -> Result<IdGroupMsg> {
        if incoming.dest != self.place_index {
            return Err(Error::Protocol(format!(
                "term group for place {} delivered to place {}",
                incoming.dest, self.place_index
            )));
        }
        let mut ids = Vec::with_capacity(incoming.terms.len());
        for term in &incoming.terms {
            if self.dest_of(term) != self.place_index {
                return Err(Error::Protocol(format!(
                    "term {:?} hashed to place {}, received at place {}",
                    term.as_str(),
                    self.dest_of(term),
                    self.place_index
                )));
            }
            if let Some(&id) = self.dict.get(term) {
                self.metrics.hits += 1;
                ids.push(id);
            } else {
                let id = self.assign_id()?;
                self.dict.insert(term.clone(), id);
                self.journal.push((id, term.clone()));
                self.metrics.misses += 1;
                ids.push(id);
            }
        }
        self.metrics.processed_terms += incoming.terms.len() as u64;
        Ok(IdGroupMsg {
            origin: self.place_index,
            dest: incoming.origin,
            loop_ordinal: incoming.loop_ordinal,
            ids,
        })
    }

    /// Mappings created since the last drain, in assignment order.
    pub fn drain_journal(&mut self) -> Vec<(TermId, Term)> {
        std::mem::take(&mut self.journal)
    }

    /// Record an encoder's reply.
    pub fn store_pulled_ids(&mut self, msg: &IdGroupMsg) -> Result<()> {
        if msg.dest != self.place_index {
            return Err(Error::Protocol(format!(
                "id group for place {} delivered to place {}",
                msg.dest, self.place_index
            )));
        }
        self.pulled_ids[msg.origin] = msg.ids.clone();
        Ok(())
    }

    /// Zip each outgoing group with its pulled ids into the transient
    /// compression table. The table is dropped after compression; the
    /// persistent dictionary keeps only owned terms.
    pub fn merge_mappings(&self) -> Result<TermMap<TermId>> {
        let total: usize = self.outgoing_groups.iter().map(|g| g.len()).sum();
        let mut table = TermMap::with_capacity_and_hasher(total, Default::default());
        for dest in 0..self.place_count {
            let terms = &self.outgoing_groups[dest];
            let ids = &self.pulled_ids[dest];
            if terms.len() != ids.len() {
                return Err(Error::Protocol(format!(
                    "place {}: group for dest {dest} has {} terms but {} ids \
                     (lost or reordered message)",
                    self.place_index,
                    terms.len(),
                    ids.len()
                )));
            }
            for (term, &id) in terms.iter().zip(ids) {
                table.insert(term.clone(), id);
            }
        }
        Ok(table)
    }

    /// Consume the term buffer in order, regrouping by recorded arities and
    /// substituting ids from the transient table.
    pub fn compress_statements(
        &mut self,
        table: &TermMap<TermId>,
    ) -> Result<Vec<EncodedStatement>> {
        let mut out = Vec::with_capacity(self.arities.len());
        let mut pos = 0usize;
        for &arity in &self.arities {
            let mut ids = Vec::with_capacity(arity as usize);
            for _ in 0..arity {
                let term = &self.term_buffer[pos];
                let id = table.get(term).ok_or_else(|| {
                    Error::Consistency(format!(
                        "term {:?} missing from compression table at place {}",
                        term.as_str(),
                        self.place_index
                    ))
                })?;
                ids.push(*id);
                pos += 1;
            }
            out.push(EncodedStatement { ids });
        }
        if pos != self.term_buffer.len() {
            return Err(Error::Consistency(format!(
                "term buffer length {} does not match recorded arities ({} consumed)",
                self.term_buffer.len(),
                pos
            )));
        }
        Ok(out)
    }
}
