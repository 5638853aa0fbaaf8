//! Experiment sweeps: (method × labeled-set size × seed) grids with
//! mean ± standard-error summaries and AP-vs-iteration curve data.
//!
//! Cells are independent runs and may execute on parallel workers; each run
//! is single-threaded and deterministic, and results are merged in key
//! order, so a sweep is reproducible regardless of worker scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semimultipose_core::engine::Real;
use semimultipose_core::synth::{make_splits, DatasetSpec};

use crate::error::{AppError, Result};
use crate::runner::{train, RunRecord, TrainConfig};

/// The three training modes compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Supervised baseline: `alpha = beta = 0`.
    Supervised,
    /// Fusion loss on labeled frames only: `alpha > 0`, `beta = 0`.
    FusionLabeled,
    /// The full semi-supervised objective: `alpha > 0`, `beta > 0`.
    Semi,
}

impl Method {
    pub fn all() -> [Method; 3] {
        [Method::Supervised, Method::FusionLabeled, Method::Semi]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::FusionLabeled => "fusion-labeled",
            Method::Semi => "semi",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Method::Supervised),
            "fusion-labeled" => Ok(Method::FusionLabeled),
            "semi" => Ok(Method::Semi),
            other => Err(AppError::validation(format!(
                "unknown method {other:?} (expected supervised | fusion-labeled | semi)"
            ))),
        }
    }
}

/// Grid specification for one sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub labeled_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Base dataset; `n_labeled` and `split_seed` are overridden per cell.
    pub dataset: DatasetSpec,
    /// Base schedule; `seed` and the fusion weights are overridden per cell.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: Method::all().to_vec(),
            labeled_sizes: vec![5],
            seeds: (0..5).collect(),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.labeled_sizes.is_empty() || self.seeds.is_empty() {
            return Err(AppError::validation(
                "sweep needs at least one method, size, and seed",
            ));
        }
        self.train.validate()?;
        self.dataset
            .validate()
            .map_err(|e| AppError::validation(e.to_string()))?;
        Ok(())
    }

    /// The concrete training configuration of one cell.
    pub fn cell_config(&self, method: Method, size: usize, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        cfg.weights.alpha = match method {
            Method::Supervised => 0.0,
            _ => TrainConfig::default_alpha(size),
        };
        cfg.weights.beta = match method {
            Method::Semi => cfg.weights.beta,
            _ => 0.0,
        };
        cfg
    }

    pub fn cell_dataset(&self, size: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_labeled: size,
            split_seed: seed,
            ..self.dataset.clone()
        }
    }
}

/// One finished cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub labeled_size: usize,
    pub seed: u64,
    pub final_ap: Real,
    pub record: RunRecord,
}

/// Aggregate over seeds for one (method, size).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub labeled_size: usize,
    pub mean_ap: Real,
    pub std_err: Real,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    /// Cells that failed, with their errors; the sweep continues past them.
    pub failures: Vec<(String, String)>,
}

pub fn mean_and_std_err(values: &[Real]) -> (Real, Real) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<Real>() / n as Real;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1) as Real;
    (mean, (var / n as Real).sqrt())
}

/// Runs every (method × size × seed) cell, optionally on parallel workers.
pub fn run_sweep(config: &SweepConfig, parallel: bool, verbose: bool) -> Result<SweepResult> {
    config.validate()?;
    let mut keys: Vec<(Method, usize, u64)> = Vec::new();
    for &method in &config.methods {
        for &size in &config.labeled_sizes {
            for &seed in &config.seeds {
                keys.push((method, size, seed));
            }
        }
    }

    let run_cell = |&(method, size, seed): &(Method, usize, u64)| {
        let dataset = config.cell_dataset(size, seed);
        let cfg = config.cell_config(method, size, seed);
        let result = make_splits(&dataset)
            .map_err(AppError::from_core)
            .and_then(|data| train(&cfg, &data, None, false))
            .map(|(_, record)| CellResult {
                method,
                labeled_size: size,
                seed,
                final_ap: record.final_ap,
                record,
            });
        if verbose {
            match &result {
                Ok(cell) => log::info!(
                    "cell {}/{}L/seed{} -> AP {:.4}",
                    method.name(),
                    size,
                    seed,
                    cell.final_ap
                ),
                Err(e) => log::warn!("cell {}/{}L/seed{} failed: {e}", method.name(), size, seed),
            }
        }
        ((method, size, seed), result)
    };

    let raw: Vec<((Method, usize, u64), Result<CellResult>)> = if parallel {
        keys.par_iter().map(run_cell).collect()
    } else {
        keys.iter().map(run_cell).collect()
    };

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut sorted = raw;
    sorted.sort_by_key(|(k, _)| *k);
    for ((method, size, seed), outcome) in sorted {
        match outcome {
            Ok(cell) => cells.push(cell),
            Err(e) => failures.push((
                format!("{}/{}L/seed{}", method.name(), size, seed),
                e.to_string(),
            )),
        }
    }

    let mut summary = Vec::new();
    for &method in &config.methods {
        for &size in &config.labeled_sizes {
            let aps: Vec<Real> = cells
                .iter()
                .filter(|c| c.method == method && c.labeled_size == size)
                .map(|c| c.final_ap)
                .collect();
            if aps.is_empty() {
                continue;
            }
            let (mean_ap, std_err) = mean_and_std_err(&aps);
            summary.push(SummaryRow {
                method,
                labeled_size: size,
                mean_ap,
                std_err,
                n: aps.len(),
            });
        }
    }
    summary.sort_by_key(|r| (r.labeled_size, r.method));

    Ok(SweepResult {
        cells,
        summary,
        failures,
    })
}
