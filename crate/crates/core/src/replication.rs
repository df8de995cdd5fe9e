//! Replicated simulation studies: simulate, run a penalty path and an
//! unpenalized fit per objective, and score the recovered sparsity pattern and
//! the error of `L` across replicates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matern::{BlockOrdering, MaternParams};
use crate::objectives::{Objective, ObjectiveKind};
use crate::optimizer::{fit_objective, FitConfig};
use crate::selection::{psi_pattern, solution_path, PathConfig};
use crate::simulate::{illustrative_config, sample_locations_uniform, ExperimentConfig, FieldSimulator};
use crate::spatial_data::SpatialDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationConfig {
    pub experiment: ExperimentConfig,
    pub replicates: usize,
    pub seed: u64,
    pub objectives: Vec<ObjectiveKind>,
    /// Fit and grid settings shared by every path; `fit.kind` is overridden per objective.
    pub path: PathConfig,
    /// Also fit at `λ = 0`, warm-started from the smallest-penalty path fit.
    pub unpenalized: bool,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            experiment: illustrative_config(),
            replicates: 10,
            seed: 0,
            objectives: vec![ObjectiveKind::FullLikelihood, ObjectiveKind::CompositeLikelihood { v: 5 }],
            path: PathConfig::default(),
            unpenalized: true,
        }
    }
}

/// Replicate `r`: fresh uniform locations and an independent field.
pub fn replicate_dataset(experiment: &ExperimentConfig, seed: u64, r: usize) -> Result<SpatialDataset> {
    let s = seed.wrapping_add(r as u64);
    let locs = sample_locations_uniform(experiment.n, &experiment.domain, s)?;
    FieldSimulator::new(&experiment.params, &locs, BlockOrdering::ByVariable)?.draw(s, 1)
}

/// Counts over the strictly lower off-diagonal entries of `Ψ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_nonzero_kept: usize,
    pub true_nonzero_dropped: usize,
    pub true_zero_detected: usize,
    pub true_zero_missed: usize,
}

impl Confusion {
    pub fn between(truth: &MaternParams, estimate: &MaternParams) -> Self {
        let t = psi_pattern(&truth.l);
        let e = psi_pattern(&estimate.l);
        let mut c = Self::default();
        for i in 0..truth.p() {
            for j in 0..i {
                match (t[[i, j]], e[[i, j]]) {
                    (true, true) => c.true_nonzero_kept += 1,
                    (true, false) => c.true_nonzero_dropped += 1,
                    (false, false) => c.true_zero_detected += 1,
                    (false, true) => c.true_zero_missed += 1,
                }
            }
        }
        c
    }

    pub fn add(&mut self, o: &Confusion) {
        self.true_nonzero_kept += o.true_nonzero_kept;
        self.true_nonzero_dropped += o.true_nonzero_dropped;
        self.true_zero_detected += o.true_zero_detected;
        self.true_zero_missed += o.true_zero_missed;
    }

    /// Fraction of true nonzero entries estimated nonzero.
    pub fn retention(&self) -> f64 {
        ratio(self.true_nonzero_kept, self.true_nonzero_kept + self.true_nonzero_dropped)
    }

    /// Fraction of true zero entries estimated zero.
    pub fn zero_detection(&self) -> f64 {
        ratio(self.true_zero_detected, self.true_zero_detected + self.true_zero_missed)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub kind: ObjectiveKind,
    pub selected_lambda: Option<f64>,
    pub selected_l: Option<Array2<f64>>,
    pub unpenalized_l: Option<Array2<f64>>,
    pub confusion: Option<Confusion>,
    pub path_seconds: f64,
    pub unpenalized_seconds: f64,
    pub error: Option<String>,
}

/// Runs one replicate for one objective.
pub fn run_replicate(config: &ReplicationConfig, r: usize, kind: ObjectiveKind) -> Result<ReplicateOutcome> {
    let data = replicate_dataset(&config.experiment, config.seed, r)?;
    let mut pc = config.path.clone();
    pc.fit.kind = kind;
    pc.clic.seed = config.seed.wrapping_add(r as u64);
    let mut out = ReplicateOutcome {
        replicate: r,
        kind,
        selected_lambda: None,
        selected_l: None,
        unpenalized_l: None,
        confusion: None,
        path_seconds: 0.0,
        unpenalized_seconds: 0.0,
        error: None,
    };
    let path = match solution_path(&data, &pc) {
        Ok(p) => p,
        Err(e) => {
            out.error = Some(format!("path: {e}"));
            return Ok(out);
        }
    };
    out.path_seconds = path.seconds;
    if let Some(fit) = path.selected_fit() {
        out.selected_lambda = Some(fit.lambda);
        out.selected_l = Some(fit.params.l.clone());
        out.confusion = Some(Confusion::between(&config.experiment.params, &fit.params));
    } else {
        out.error = Some("no path entry has a criterion value".into());
    }
    if config.unpenalized {
        if let Some(last) = path.entries.iter().rev().find_map(|e| e.fit.as_ref()) {
            let obj = Objective::new(&data, kind, pc.fit.ordering, pc.fit.mean)?;
            let cfg = FitConfig { kind, ..pc.fit.clone() };
            match fit_objective(&obj, 0.0, &cfg, Some(&last.params), None) {
                Ok(f) => {
                    out.unpenalized_seconds = f.seconds;
                    out.unpenalized_l = Some(f.params.l);
                }
                Err(e) => out.error = Some(format!("unpenalized fit: {e}")),
            }
        }
    }
    Ok(out)
}

/// `Σ_{i ≥ j} sqrt(mean_r (L̂_ij - L_ij)²)` over the given estimates.
pub fn total_rmse(truth: &Array2<f64>, estimates: &[&Array2<f64>]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::input("no estimates"));
    }
    let p = truth.nrows();
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..=i {
            let ms = estimates.iter().map(|e| (e[[i, j]] - truth[[i, j]]).powi(2)).sum::<f64>() / estimates.len() as f64;
            total += ms.sqrt();
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub kind: ObjectiveKind,
    pub replicates: usize,
    pub failures: usize,
    pub confusion: Confusion,
    pub retention: f64,
    pub zero_detection: f64,
    pub rmse_penalized: Option<f64>,
    pub rmse_unpenalized: Option<f64>,
    pub mean_path_seconds: f64,
}

/// Pools the outcomes of one objective.
pub fn summarize(truth: &MaternParams, kind: ObjectiveKind, outcomes: &[ReplicateOutcome]) -> StudySummary {
    let mine: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.kind == kind).collect();
    let mut confusion = Confusion::default();
    for o in &mine {
        if let Some(c) = &o.confusion {
            confusion.add(c);
        }
    }
    let pen: Vec<&Array2<f64>> = mine.iter().filter_map(|o| o.selected_l.as_ref()).collect();
    let unpen: Vec<&Array2<f64>> = mine.iter().filter_map(|o| o.unpenalized_l.as_ref()).collect();
    StudySummary {
        kind,
        replicates: mine.len(),
        failures: mine.iter().filter(|o| o.error.is_some()).count(),
        retention: confusion.retention(),
        zero_detection: confusion.zero_detection(),
        confusion,
        rmse_penalized: total_rmse(&truth.l, &pen).ok(),
        rmse_unpenalized: total_rmse(&truth.l, &unpen).ok(),
        mean_path_seconds: mine.iter().map(|o| o.path_seconds).sum::<f64>() / mine.len().max(1) as f64,
    }
}

/// All replicates for all objectives, in replicate-major order.
pub fn run_study(config: &ReplicationConfig, mut progress: impl FnMut(&ReplicateOutcome)) -> Result<Vec<StudySummary>> {
    if config.replicates == 0 {
        return Err(Error::input("replicates must be at least 1"));
    }
    let mut outcomes = Vec::new();
    for r in 0..config.replicates {
        for &kind in &config.objectives {
            let o = run_replicate(config, r, kind)?;
            progress(&o);
            outcomes.push(o);
        }
    }
    Ok(config
        .objectives
        .iter()
        .map(|&k| summarize(&config.experiment.params, k, &outcomes))
        .collect())
}
