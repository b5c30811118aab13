//! Deterministic synthetic workload generator with Zipf-skewed term reuse.
//!
//! Terms are fixed-length synthetic IRIs so output sizes are exactly
//! predictable. Alongside the dataset the generator writes a JSON sidecar
//! with the measured byte counts and, for a range of place counts, the
//! exact dictionary/encoded sizes a run over this file will produce —
//! usable as an oracle for compression-ratio checks.

use crate::error::{Error, Result};
use crate::storage::HEADER_LEN;
use crate::term::{self, Term};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Arity discipline of the generated statements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenArity {
    Triples,
    Quads,
    /// Roughly one statement in four is a quad.
    Mixed,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub statements: u64,
    pub distinct_terms: u64,
    /// Zipf exponent; 0 is uniform.
    pub zipf_exponent: f64,
    pub seed: u64,
    pub arity: GenArity,
    /// Byte length of every term (clamped up to the minimum that keeps
    /// terms distinct).
    pub mean_term_len: usize,
}

/// Expected run output sizes for one place count, exact for this file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub places: usize,
    pub dict_bytes: u64,
    pub encoded_bytes: u64,
    pub ratio: f64,
}

/// Measured facts about a generated file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub statements: u64,
    pub triples: u64,
    pub quads: u64,
    pub plain_bytes: u64,
    /// Terms from the pool that actually occur.
    pub distinct_terms: u64,
    pub term_len: usize,
    pub seed: u64,
    pub zipf_exponent: f64,
    pub predictions: Vec<Prediction>,
}

pub const SIDECAR_SUFFIX: &str = ".meta.json";

pub fn sidecar_path(dataset: &Path) -> std::path::PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(SIDECAR_SUFFIX);
    std::path::PathBuf::from(s)
}

/// Cumulative-weight table for Zipf(s) over ranks 1..=n; sampling is a
/// uniform draw plus binary search, deterministic under a seeded generator.
struct ZipfTable {
    cumulative: Vec<f64>,
    total: f64,
}

impl ZipfTable {
    fn new(n: u64, s: f64) -> ZipfTable {
        let mut cumulative = Vec::with_capacity(n as usize);
        let mut total = 0.0;
        for rank in 1..=n {
            total += (rank as f64).powf(-s);
            cumulative.push(total);
        }
        ZipfTable { cumulative, total }
    }

    /// Zero-based rank (0 = most frequent).
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen::<f64>() * self.total;
        self.cumulative.partition_point(|&c| c < u)
    }
}

/// Build the fixed-length term for pool index `i`.
fn make_term(i: u64, len: usize) -> String {
    let mut s = format!("http://gen.test/t{i:012}");
    while s.len() < len {
        s.push('x');
    }
    s
}

const MIN_TERM_LEN: usize = "http://gen.test/t000000000000".len();

/// Generate the dataset at `out` and its sidecar next to it.
pub fn generate(cfg: &GenConfig, out: &Path) -> Result<Sidecar> {
    if cfg.distinct_terms == 0 {
        return Err(Error::Config("distinct term count must be >= 1".into()));
    }
    let term_len = cfg.mean_term_len.max(MIN_TERM_LEN);
    let pool: Vec<String> = (0..cfg.distinct_terms)
        .map(|i| make_term(i, term_len))
        .collect();
    let table = ZipfTable::new(cfg.distinct_terms, cfg.zipf_exponent);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let display = out.display().to_string();
    let file = std::fs::File::create(out).map_err(|e| Error::io(display.clone(), e))?;
    let mut w = std::io::BufWriter::new(file);

    let mut used = vec![false; pool.len()];
    let mut plain_bytes = 0u64;
    let mut quads = 0u64;
    let mut line = String::new();
    for _ in 0..cfg.statements {
        let arity = match cfg.arity {
            GenArity::Triples => 3,
            GenArity::Quads => 4,
            GenArity::Mixed => {
                if rng.gen::<u32>() % 4 == 0 {
                    4
                } else {
                    3
                }
            }
        };
        if arity == 4 {
            quads += 1;
        }
        line.clear();
        for _ in 0..arity {
            let idx = table.sample(&mut rng);
            used[idx] = true;
            line.push('<');
            line.push_str(&pool[idx]);
            line.push_str("> ");
        }
        line.push_str(".\n");
        plain_bytes += line.len() as u64;
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(display.clone(), e))?;
    }
    w.flush().map_err(|e| Error::io(display.clone(), e))?;

    let triples = cfg.statements - quads;
    let mixed = triples > 0 && quads > 0;
    let mut predictions = Vec::new();
    for places in [1usize, 2, 4, 8, 16] {
        let (dict_bytes, encoded_bytes) = predict(
            &pool, &used, places, term_len, triples, quads, mixed,
        )?;
        let ratio = plain_bytes as f64 / (dict_bytes + encoded_bytes) as f64;
        predictions.push(Prediction { places, dict_bytes, encoded_bytes, ratio });
    }

    let sidecar = Sidecar {
        statements: cfg.statements,
        triples,
        quads,
        plain_bytes,
        distinct_terms: used.iter().filter(|&&u| u).count() as u64,
        term_len,
        seed: cfg.seed,
        zipf_exponent: cfg.zipf_exponent,
        predictions,
    };
    let sc_path = sidecar_path(out);
    std::fs::write(&sc_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| Error::io(sc_path.display().to_string(), e))?;
    Ok(sidecar)
}

/// Exact output sizes of an encode run over this file with `places` places.
///
/// Dictionary: the ids at place p form exactly {(n+1)*P + p : n < k_p} where
/// k_p is the count of used terms hashing to p — which ids attach to which
/// terms depends on scheduling, but every term here has the same length, so
/// shard bytes depend only on k_p. Encoded: fixed header plus 8 bytes per
/// id, plus one sidecar byte per statement when arities are mixed.
fn predict(
    pool: &[String],
    used: &[bool],
    places: usize,
    term_len: usize,
    triples: u64,
    quads: u64,
    mixed: bool,
) -> Result<(u64, u64)> {
    let mut per_place = vec![0u64; places];
    for (term, &u) in pool.iter().zip(used) {
        if u {
            per_place[term::destination(&Term::new(term)?, places)?] += 1;
        }
    }
    let mut dict_bytes = 0u64;
    for (p, &k) in per_place.iter().enumerate() {
        for n in 0..k {
            let id = (n + 1) * places as u64 + p as u64;
            dict_bytes += decimal_digits(id) + 1 + term_len as u64 + 1;
        }
    }
    let statements = triples + quads;
    let encoded_bytes = HEADER_LEN * places as u64
        + 8 * (3 * triples + 4 * quads)
        + if mixed { statements } else { 0 };
    Ok((dict_bytes, encoded_bytes))
}

fn decimal_digits(mut v: u64) -> u64 {
    let mut d = 1;
    while v >= 10 {
        v /= 10;
        d += 1;
    }
    d
}
