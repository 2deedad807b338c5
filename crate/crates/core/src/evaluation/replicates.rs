use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::digest::derive_seed;
use crate::par::{self, Exec};

pub const DEFAULT_SEEDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    pub runs: Vec<RunRecord>,
    pub summary: BTreeMap<String, MeanStd>,
}

pub fn replicate_seeds(root: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| derive_seed(root, &format!("replicate:{i}"))).collect()
}

/// Run `experiment` once per derived seed; runs may execute concurrently but are
/// reduced in seed order.
pub fn seeded_replicates<F>(n_seeds: usize, root_seed: u64, exec: Exec, experiment: F) -> Result<Replicates>
where
    F: Fn(u64) -> Result<BTreeMap<String, f64>> + Sync,
{
    if n_seeds < 2 {
        return Err(EvalError::TooFewSeeds(n_seeds));
    }
    let seeds = replicate_seeds(root_seed, n_seeds);
    let outcomes = par::map_slice(exec, &seeds, |&s| experiment(s));
    let mut runs = Vec::with_capacity(n_seeds);
    for (run, (seed, out)) in seeds.iter().zip(outcomes).enumerate() {
        runs.push(RunRecord { run, seed: *seed, metrics: out? });
    }
    let mut summary = BTreeMap::new();
    for key in runs[0].metrics.keys() {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
        if vals.len() == runs.len() {
            summary.insert(key.clone(), MeanStd::of(&vals));
        }
    }
    Ok(Replicates { runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_experiment_has_zero_std() {
        let r = seeded_replicates(DEFAULT_SEEDS, 1, Exec::Parallel, |_| Ok(BTreeMap::from([("auc".into(), 0.9)]))).unwrap();
        assert_eq!(r.runs.len(), 5);
        assert_eq!(r.summary["auc"], MeanStd { mean: 0.9, std: 0.0 });
    }

    #[test]
    fn summary_matches_hand_computation() {
        let r = seeded_replicates(5, 2, Exec::Sequential, |s| Ok(BTreeMap::from([("x".into(), (s % 97) as f64)]))).unwrap();
        let vals: Vec<f64> = r.runs.iter().map(|run| run.metrics["x"]).collect();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        assert!((r.summary["x"].mean - mean).abs() < 1e-12);
        assert!((r.summary["x"].std - std).abs() < 1e-12);
        assert_eq!(r.runs.iter().map(|x| x.seed).collect::<Vec<_>>(), replicate_seeds(2, 5));
    }

    #[test]
    fn errors_propagate_and_one_seed_rejected() {
        assert!(matches!(seeded_replicates(1, 0, Exec::Sequential, |_| Ok(BTreeMap::new())), Err(EvalError::TooFewSeeds(1))));
        assert!(seeded_replicates(3, 0, Exec::Sequential, |_| Err(EvalError::SingleClass)).is_err());
    }
}
