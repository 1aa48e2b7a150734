//! Detection of sudden jumps in jvp magnitude.

use serde::{Deserialize, Serialize};

use super::experiment::RunRecord;
use crate::optim::OptimizerKind;

/// A value counts as a spike when it exceeds this multiple of the running
/// median of the values before it.
pub const SPIKE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSummary {
    /// `max |jvp_max| / |median jvp_max|` over the run.
    pub max_over_median: f64,
    pub spike_iters: Vec<u64>,
}

pub fn jvp_spike_report(records: &[RunRecord]) -> SpikeSummary {
    let mut sorted: Vec<f64> = Vec::new();
    let mut spikes = Vec::new();
    let mut max = 0.0f64;
    for r in records.iter().filter(|r| r.jvp_max.is_finite()) {
        let x = r.jvp_max.abs();
        if !sorted.is_empty() && x > SPIKE_FACTOR * median(&sorted) {
            spikes.push(r.iter);
        }
        max = max.max(x);
        let pos = sorted.partition_point(|&y| y < x);
        sorted.insert(pos, x);
    }
    let med = if sorted.is_empty() { f64::NAN } else { median(&sorted) };
    SpikeSummary {
        max_over_median: max / med,
        spike_iters: spikes,
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Spike counts per optimizer: `(kind, runs, total spikes)`.
pub fn spikes_by_optimizer(runs: &[(OptimizerKind, Vec<RunRecord>)]) -> Vec<(OptimizerKind, usize, usize)> {
    let mut table: Vec<(OptimizerKind, usize, usize)> = Vec::new();
    for (kind, records) in runs {
        let count = jvp_spike_report(records).spike_iters.len();
        match table.iter_mut().find(|(k, _, _)| k == kind) {
            Some(row) => {
                row.1 += 1;
                row.2 += count;
            }
            None => table.push((*kind, 1, count)),
        }
    }
    table
}
