//! Load-balance instrumentation: per-place counters and max/min/avg
//! aggregation with skew factors.

use serde::{Deserialize, Serialize};

/// Pipeline phases, used to index per-phase wall time.
pub const PHASE_NAMES: [&str; 4] = ["filter", "push", "encode", "compress"];

/// Counters owned by exactly one place; accumulated across loop iterations.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricCounters {
    /// Terms seen while filtering (3 per triple, 4 per quad).
    pub parsed_terms: u64,
    /// Distinct terms pushed to a *different* place, per loop iteration.
    pub outgoing_terms: u64,
    /// Distinct terms destined to this place itself (self-delivery).
    pub local_terms: u64,
    /// Encode requests answered from the dictionary.
    pub hits: u64,
    /// Encode requests that created a new mapping.
    pub misses: u64,
    /// Terms encoded at this place (hits + misses).
    pub processed_terms: u64,
    /// Term-frame payload bytes delivered to this place.
    pub received_bytes: u64,
    /// Statements compressed at this place.
    pub statements: u64,
    /// Wall seconds per phase, accumulated (see [`PHASE_NAMES`]).
    pub phase_secs: [f64; 4],
}

impl MetricCounters {
    /// misses / (hits + misses); `None` when this place encoded nothing.
    pub fn miss_ratio(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        if total == 0 {
            None
        } else {
            Some(self.misses as f64 / total as f64)
        }
    }
}

/// Max/min/avg across places for one metric, plus skew = max/avg.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Stat {
    pub max: f64,
    pub min: f64,
    pub avg: f64,
    pub skew: f64,
}

impl Stat {
    fn from_values(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        let skew = if avg > 0.0 { max / avg } else { 0.0 };
        Stat { max, min, avg, skew }
    }
}

/// Table 5/6-style cross-place aggregation.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub parsed_terms: Stat,
    pub outgoing_terms: Stat,
    pub local_terms: Stat,
    pub hits: Stat,
    pub misses: Stat,
    pub miss_ratio: Stat,
    pub processed_terms: Stat,
    pub received_bytes: Stat,
}

/// Exact max/min/mean over all place counters.
pub fn aggregate(counters: &[MetricCounters]) -> LoadReport {
    fn stat(counters: &[MetricCounters], f: impl Fn(&MetricCounters) -> f64) -> Stat {
        let values: Vec<f64> = counters.iter().map(f).collect();
        Stat::from_values(&values)
    }
    LoadReport {
        parsed_terms: stat(counters, |c| c.parsed_terms as f64),
        outgoing_terms: stat(counters, |c| c.outgoing_terms as f64),
        local_terms: stat(counters, |c| c.local_terms as f64),
        hits: stat(counters, |c| c.hits as f64),
        misses: stat(counters, |c| c.misses as f64),
        miss_ratio: stat(counters, |c| c.miss_ratio().unwrap_or(0.0)),
        processed_terms: stat(counters, |c| c.processed_terms as f64),
        received_bytes: stat(counters, |c| c.received_bytes as f64),
    }
}

/// Aligned text table of a [`LoadReport`].
pub fn format_table(report: &LoadReport) -> String {
    let rows: [(&str, &Stat); 8] = [
        ("parsed_terms", &report.parsed_terms),
        ("outgoing_terms", &report.outgoing_terms),
        ("local_terms", &report.local_terms),
        ("hits", &report.hits),
        ("misses", &report.misses),
        ("miss_ratio", &report.miss_ratio),
        ("processed_terms", &report.processed_terms),
        ("received_bytes", &report.received_bytes),
    ];
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>14} {:>14} {:>14} {:>8}\n",
        "metric", "max", "min", "avg", "skew"
    ));
    for (name, s) in rows {
        out.push_str(&format!(
            "{:<16} {:>14.3} {:>14.3} {:>14.3} {:>8.3}\n",
            name, s.max, s.min, s.avg, s.skew
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_place_max_equals_avg() {
        let c = MetricCounters {
            outgoing_terms: 7,
            misses: 3,
            hits: 5,
            ..Default::default()
        };
        let report = aggregate(std::slice::from_ref(&c));
        assert_eq!(report.outgoing_terms.max, report.outgoing_terms.avg);
        assert_eq!(report.misses.max, 3.0);
    }

    #[test]
    fn equal_counters_have_unit_skew() {
        let counters: Vec<MetricCounters> = (0..4)
            .map(|_| MetricCounters {
                outgoing_terms: 10,
                ..Default::default()
            })
            .collect();
        let report = aggregate(&counters);
        assert_eq!(report.outgoing_terms.skew, 1.0);
    }

    #[test]
    fn miss_ratio_bounds() {
        let c = MetricCounters {
            hits: 1,
            misses: 3,
            ..Default::default()
        };
        assert_eq!(c.miss_ratio(), Some(0.75));
        assert_eq!(MetricCounters::default().miss_ratio(), None);
    }

    #[test]
    fn empty_run_all_zero_table() {
        let report = aggregate(&[]);
        let text = format_table(&report);
        assert!(text.contains("outgoing_terms"));
        let json = serde_json::to_string(&report).unwrap();
        let back: LoadReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.misses.max, 0.0);
    }
}
