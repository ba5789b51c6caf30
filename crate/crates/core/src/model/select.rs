//! Checkpoint selection by evenly spaced inverse perplexity.

use super::train::CheckpointRecord;
use crate::error::{Error, Result};

/// Picks `k` checkpoints whose inverse perplexities `exp(-loss)` lie closest
/// to `k` evenly spaced targets over the observed range. Targets are visited
/// from lowest to highest; each takes the nearest unused checkpoint, ties
/// going to the earlier step. The result is in step order.
pub fn select_checkpoints(history: &[CheckpointRecord], k: usize) -> Result<Vec<CheckpointRecord>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if history.is_empty() {
        return Err(Error::InvalidInput("no checkpoints to select from".into()));
    }
    if k > history.len() {
        return Err(Error::InvalidInput(format!(
            "cannot select {k} of {} checkpoints",
            history.len()
        )));
    }
    let mut records: Vec<&CheckpointRecord> = history.iter().collect();
    records.sort_by_key(|r| r.step);
    let ip: Vec<f64> = records.iter().map(|r| (-r.train_loss).exp()).collect();
    let lo = ip.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ip.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let targets: Vec<f64> = if k == 1 {
        vec![hi]
    } else {
        (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
    };
    let mut used = vec![false; records.len()];
    for target in targets {
        let mut best: Option<usize> = None;
        for (i, &v) in ip.iter().enumerate() {
            if used[i] {
                continue;
            }
            match best {
                Some(b) if (ip[b] - target).abs() <= (v - target).abs() => {}
                _ => best = Some(i),
            }
        }
        used[best.expect("k <= len leaves a free checkpoint")] = true;
    }
    Ok(records
        .into_iter()
        .zip(used)
        .filter(|(_, u)| *u)
        .map(|(r, _)| r.clone())
        .collect())
}
