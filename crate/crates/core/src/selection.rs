//! Regularization paths and the choice of `λ`: the `λ_max` bound, log-spaced
//! grids, warm-started paths, AIC for the full likelihood and CLIC (with
//! sensitivity `H` and subsampled variability `J`) for the composite likelihood.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, sym_eigen};
use crate::matern::{Direction, MaternParams};
use crate::objectives::{MeanModel, Objective, ObjectiveKind, SmallCholesky};
use crate::optimizer::{fit_marginals, fit_objective, initial_params, FitConfig, FitResult, MarginalFit};
use crate::rng;
use crate::spatial_data::SpatialDataset;

/// `λ_min / λ_max`.
pub const LAMBDA_MIN_RATIO: f64 = 1e-8;
/// How many times an empty subsample window is redrawn before giving up.
const MAX_REDRAWS: usize = 20;

/// Strictly decreasing, log-equispaced penalties from `λ_max` to `1e-8 λ_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub values: Vec<f64>,
    pub lambda_max: f64,
}

impl LambdaGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lambda_min(&self) -> f64 {
        *self.values.last().unwrap_or(&f64::NAN)
    }
}

/// `max(p² - p, 20)`.
pub fn default_grid_len(p: usize) -> usize {
    (p * p).saturating_sub(p).max(20)
}

pub fn lambda_grid(lambda_max: f64, count: usize) -> Result<LambdaGrid> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::input(format!("lambda_max must be positive and finite, got {lambda_max}")));
    }
    if count < 2 {
        return Err(Error::input(format!("a lambda grid needs at least 2 points, got {count}")));
    }
    let last = (count - 1) as f64;
    let values = (0..count)
        .map(|i| match i {
            0 => lambda_max,
            _ if i == count - 1 => lambda_max * LAMBDA_MIN_RATIO,
            _ => lambda_max * LAMBDA_MIN_RATIO.powf(i as f64 / last),
        })
        .collect();
    Ok(LambdaGrid { values, lambda_max })
}

/// Smallest penalty at which the diagonal start `start` is a fixed point:
/// the largest `|∂f/∂l_ij|`, `i > j`, of the negative log-objective.
pub fn lambda_max(obj: &Objective<'_>, start: &MaternParams) -> Result<f64> {
    let g = obj.gradient(start)?;
    let p = start.p();
    let mut m = 0.0f64;
    for i in 0..p {
        for j in 0..i {
            m = m.max(g.dl[[i, j]].abs());
        }
    }
    if !m.is_finite() {
        return Err(Error::FitFailed("gradient at the diagonal start is not finite".into()));
    }
    Ok(m)
}

/// Structural pattern of `Ψ = LLᵀ`: `Ψ_ij ≠ 0` exactly when rows `i` and `j`
/// of `L` share a nonzero column.
pub fn psi_pattern(l: &Array2<f64>) -> Array2<bool> {
    let p = l.nrows();
    Array2::from_shape_fn((p, p), |(i, j)| (0..p).any(|k| l[[i, k]] != 0.0 && l[[j, k]] != 0.0))
}

/// Percentage of zero entries strictly below the diagonal.
fn pct_zero_lower(p: usize, is_zero: impl Fn(usize, usize) -> bool) -> f64 {
    let total = p * (p.saturating_sub(1)) / 2;
    if total == 0 {
        return 100.0;
    }
    let zeros = (0..p).flat_map(|i| (0..i).map(move |j| (i, j))).filter(|&(i, j)| is_zero(i, j)).count();
    100.0 * zeros as f64 / total as f64
}

pub fn pct_zero_l(l: &Array2<f64>) -> f64 {
    pct_zero_lower(l.nrows(), |i, j| l[[i, j]] == 0.0)
}

pub fn pct_zero_psi(l: &Array2<f64>) -> f64 {
    let pat = psi_pattern(l);
    pct_zero_lower(l.nrows(), |i, j| !pat[[i, j]])
}

/// Number of ordered off-diagonal pairs with `Ψ_ij ≠ 0`.
pub fn nonzero_cross_pairs(l: &Array2<f64>) -> usize {
    let pat = psi_pattern(l);
    let p = l.nrows();
    (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).filter(|&(i, j)| i != j && pat[[i, j]]).count()
}

/// `-2ℓ + 4 |{(i, j): i ≠ j, Ψ_ij ≠ 0}|`.
pub fn aic_value(loglik: f64, params: &MaternParams) -> f64 {
    -2.0 * loglik + 4.0 * nonzero_cross_pairs(&params.l) as f64
}

pub fn aic(fit: &FitResult) -> Result<f64> {
    if fit.kind != ObjectiveKind::FullLikelihood {
        return Err(Error::input("AIC applies to full-likelihood fits; use CLIC for composite fits"));
    }
    Ok(aic_value(fit.loglik, &fit.params))
}

/// Sign of the trace correction in CLIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClicSign {
    /// `-CL + tr(J H⁻¹)`: complexity is penalized.
    #[default]
    Penalty,
    /// `-CL - tr(J H⁻¹)`.
    Reward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClicConfig {
    /// Number of subsample windows `M_sub`.
    pub subsamples: usize,
    /// Pairs collected in each window.
    pub pairs_per_subsample: usize,
    /// Pairs sampled for `H`; all pairs when the budget covers them.
    pub h_budget: usize,
    pub seed: u64,
    pub sign: ClicSign,
    /// Subtract the mean pair score before forming window outer products. At a
    /// penalized estimate the score does not vanish, and the uncentered form
    /// grows with `λ²`.
    pub center_scores: bool,
}

impl Default for ClicConfig {
    fn default() -> Self {
        Self {
            subsamples: 120,
            pairs_per_subsample: 50,
            h_budget: 5000,
            seed: 0,
            sign: ClicSign::Penalty,
            center_scores: true,
        }
    }
}

impl ClicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsamples == 0 || self.pairs_per_subsample == 0 || self.h_budget == 0 {
            return Err(Error::input("CLIC subsamples, pairs per subsample and H budget must be positive"));
        }
        Ok(())
    }
}

/// One coordinate of the free parameter vector at a given sparsity pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "block")]
pub enum FreeParameter {
    /// `L_ij`, `i > j`, with `L_ii` moving to keep row `i` at norm `σ_i`.
    L { row: usize, col: usize },
    DeltaB,
    /// `R_B,ij = R_B,ji`, `i < j`.
    Rb { row: usize, col: usize },
}

/// Free coordinates in a fixed order: nonzero `L_ij` (row-major), then the
/// cross-range coordinates. These are `R_B,ij` (row-major, `i < j`) for the pairs
/// with `Ψ_ij ≠ 0` when `Δ_B > 0`, otherwise `Δ_B` alone. Cross ranges depend on
/// `Δ_B (1 - R_B,ij)` only, so listing `Δ_B` next to the `R_B` entries would add
/// a direction with no effect on the likelihood; `R_B` entries of uncoupled
/// pairs have none either.
pub fn free_parameters(params: &MaternParams) -> Vec<FreeParameter> {
    let p = params.p();
    let mut out = Vec::new();
    for i in 0..p {
        for j in 0..i {
            if params.l[[i, j]] != 0.0 {
                out.push(FreeParameter::L { row: i, col: j });
            }
        }
    }
    let pat = psi_pattern(&params.l);
    let coupled = (0..p).any(|i| (0..i).any(|j| pat[[i, j]]));
    if coupled {
        if params.delta_b > 0.0 {
            for i in 0..p {
                for j in (i + 1)..p {
                    if pat[[i, j]] {
                        out.push(FreeParameter::Rb { row: i, col: j });
                    }
                }
            }
        } else {
            out.push(FreeParameter::DeltaB);
        }
    }
    out
}

/// Perturbation direction of one free coordinate.
pub fn free_direction(params: &MaternParams, fp: FreeParameter) -> Result<Direction> {
    match fp {
        FreeParameter::L { row, col } => {
            let mut d = Direction::l_entry(params, row, col)?;
            // l_entry(row, row) moves log L_rr; dL_rr/dL_rc = -L_rc / L_rr on the constraint
            let diag = Direction::l_entry(params, row, row)?;
            let lrr = params.l[[row, row]];
            let c = -params.l[[row, col]] / (lrr * lrr);
            d.dpsi.scaled_add(c, &diag.dpsi);
            Ok(d)
        }
        FreeParameter::DeltaB => Ok(Direction::delta_b(params)),
        FreeParameter::Rb { row, col } => Direction::rb_entry(params, row, col),
    }
}

/// `∂Q_kl/∂θ` along `dir` for a pair at distance `h`, location-major `2p × 2p`.
fn pair_derivative(params: &MaternParams, sigma: &Array2<f64>, range: &Array2<f64>, dir: &Direction, h: f64) -> Result<Array2<f64>> {
    let kernel = params.kernel()?;
    let dsigma = dir.dsigma(params, sigma, range);
    let p = params.p();
    let mut out = Array2::zeros((2 * p, 2 * p));
    for i in 0..p {
        for j in 0..p {
            let same = dsigma[[i, j]] + if i == j { dir.dtau2[i] } else { 0.0 };
            let (m, dm) = kernel.eval(h, range[[i, j]]);
            let cross = dsigma[[i, j]] * m + sigma[[i, j]] * dir.dalpha[[i, j]] * dm;
            out[[i, j]] = same;
            out[[p + i, p + j]] = same;
            out[[i, p + j]] = cross;
            out[[p + i, j]] = cross;
        }
    }
    Ok(out)
}

fn composite_pairs<'o>(obj: &'o Objective<'_>) -> Result<&'o [(usize, usize, f64)]> {
    if !obj.kind().is_composite() {
        return Err(Error::input("H and J are defined for the composite likelihood"));
    }
    let pairs = obj.pairs();
    if pairs.is_empty() {
        return Err(Error::input("composite likelihood has no pairs"));
    }
    Ok(pairs)
}

/// Sensitivity `H = ½ Σ_pairs tr(Q⁻¹ ∂_a Q Q⁻¹ ∂_b Q)` over at most `budget`
/// uniformly sampled pairs, rescaled to the full pair count.
pub fn estimate_h(obj: &Objective<'_>, params: &MaternParams, free: &[FreeParameter], budget: usize, seed: u64) -> Result<Array2<f64>> {
    let pairs = composite_pairs(obj)?;
    let q = free.len();
    let dirs = free.iter().map(|&f| free_direction(params, f)).collect::<Result<Vec<_>>>()?;
    let mut index: Vec<usize> = (0..pairs.len()).collect();
    if budget < pairs.len() {
        let mut r = rng::stream(seed, 0x4853);
        rng::shuffle(&mut r, &mut index);
        index.truncate(budget);
        index.sort_unstable();
    }
    let scale = pairs.len() as f64 / index.len() as f64;
    let (sigma, range) = params.scale_and_range();
    let kernel = params.kernel()?;
    let mut h_mat = Array2::<f64>::zeros((q, q));
    for &e in &index {
        let (k, l, h) = pairs[e];
        let qm = crate::matern::pair_covariance(params, &kernel, &sigma, &range, h);
        let chol = SmallCholesky::new(&qm)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("pair covariance for locations ({k}, {l})")))?;
        let inv = chol.inverse();
        let a: Vec<Array2<f64>> = dirs
            .iter()
            .map(|d| pair_derivative(params, &sigma, &range, d, h).map(|dq| inv.dot(&dq)))
            .collect::<Result<_>>()?;
        for x in 0..q {
            for y in x..q {
                // tr(A_x A_y) = Σ_rs A_x[r,s] A_y[s,r]
                let t: f64 = a[x].iter().zip(a[y].t().iter()).map(|(u, v)| u * v).sum();
                h_mat[[x, y]] += 0.5 * t;
            }
        }
    }
    for x in 0..q {
        for y in x..q {
            let v = h_mat[[x, y]] * scale;
            h_mat[[x, y]] = v;
            h_mat[[y, x]] = v;
        }
    }
    Ok(h_mat)
}

/// Score `∇cl_kl` of one pair along each free coordinate.
pub fn pair_score(obj: &Objective<'_>, params: &MaternParams, dirs: &[Direction], pair: usize) -> Result<Array1<f64>> {
    let pairs = composite_pairs(obj)?;
    let (k, l, h) = *pairs
        .get(pair)
        .ok_or_else(|| Error::input(format!("pair index {pair} out of range")))?;
    let c = obj.pair_term(params, k, l, h)?;
    Ok(dirs.iter().map(|d| c.directional(params, d)).collect())
}

/// Variability `J` by spatial-window subsampling. Each window grows around a
/// random location through its nearest neighbors until it holds at least
/// `pairs_per_subsample` pairs `S_m`; then
/// `J = W (1/M) Σ_m (Σ_{S_m} ∇cl)(Σ_{S_m} ∇cl)ᵀ / |S_m|` with `W` the total pair count,
/// each `∇cl` optionally centered at the mean over all pairs.
pub fn estimate_j_subsample(obj: &Objective<'_>, params: &MaternParams, free: &[FreeParameter], config: &ClicConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let pairs = composite_pairs(obj)?;
    let q = free.len();
    let dirs = free.iter().map(|&f| free_direction(params, f)).collect::<Result<Vec<_>>>()?;
    let data = obj.data();
    let n = data.n();
    let loc = data.locations();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(k, l, _)) in pairs.iter().enumerate() {
        incident[k].push(e);
        incident[l].push(e);
    }
    let mut scores: Vec<Option<Array1<f64>>> = vec![None; pairs.len()];
    let mut mean = Array1::<f64>::zeros(q);
    if config.center_scores {
        for (e, slot) in scores.iter_mut().enumerate() {
            let s = pair_score(obj, params, &dirs, e)?;
            mean += &s;
            *slot = Some(s);
        }
        mean /= pairs.len() as f64;
    }
    let mut acc = Array2::<f64>::zeros((q, q));
    let mut in_window = vec![false; n];
    for m in 0..config.subsamples {
        let mut r = rng::stream(config.seed, 0x4a00_0000 + m as u64);
        let mut window_pairs = Vec::new();
        for _ in 0..MAX_REDRAWS {
            let center = rng::below(&mut r, n);
            let mut order: Vec<(f64, usize)> = (0..n)
                .map(|u| {
                    let d2: f64 = loc.row(u).iter().zip(loc.row(center).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, u)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            in_window.iter_mut().for_each(|x| *x = false);
            window_pairs.clear();
            for &(_, u) in &order {
                in_window[u] = true;
                for &e in &incident[u] {
                    let (k, l, _) = pairs[e];
                    let other = if k == u { l } else { k };
                    if in_window[other] {
                        window_pairs.push(e);
                    }
                }
                if window_pairs.len() >= config.pairs_per_subsample {
                    break;
                }
            }
            if !window_pairs.is_empty() {
                break;
            }
        }
        if window_pairs.is_empty() {
            return Err(Error::input("subsample windows contain no pairs"));
        }
        let mut g = Array1::<f64>::zeros(q);
        for &e in &window_pairs {
            if scores[e].is_none() {
                scores[e] = Some(pair_score(obj, params, &dirs, e)?);
            }
            g += scores[e].as_ref().expect("score cached");
        }
        let w = window_pairs.len() as f64;
        g.scaled_add(-w, &mean);
        for x in 0..q {
            for y in 0..q {
                acc[[x, y]] += g[x] * g[y] / w;
            }
        }
    }
    let scale = pairs.len() as f64 / config.subsamples as f64;
    let j = &acc * scale;
    Ok(Array2::from_shape_fn((q, q), |(x, y)| 0.5 * (j[[x, y]] + j[[y, x]])))
}

/// `tr(J H⁻¹)`, with the ridge `1e-10 tr(H)/q` added when `H` is ill-conditioned.
pub fn trace_jh_inv(j: &Array2<f64>, h: &Array2<f64>) -> Result<f64> {
    let q = h.nrows();
    if q == 0 {
        return Ok(0.0);
    }
    let (vals, _) = sym_eigen(h)?;
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let mut hh = h.clone();
    if !(min > 1e-12 * max) {
        let ridge = 1e-10 * h.diag().sum() / q as f64;
        if !(ridge > 0.0) {
            return Err(Error::Singular("H has no positive trace".into()));
        }
        log::debug!("H ill-conditioned (eigenvalues {min:e}..{max:e}), ridge {ridge:e}");
        for x in 0..q {
            hh[[x, x]] += ridge;
        }
    }
    let inv = spd_inverse(&hh).ok_or_else(|| Error::Singular("H is singular even after the ridge".into()))?;
    Ok((0..q).map(|x| (0..q).map(|y| j[[x, y]] * inv[[y, x]]).sum::<f64>()).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClicValue {
    pub value: f64,
    /// Composite log-likelihood at the estimate.
    pub cl: f64,
    /// `tr(J H⁻¹)`.
    pub trace: f64,
    pub free: Vec<FreeParameter>,
}

/// CLIC of a composite-likelihood estimate.
pub fn clic(obj: &Objective<'_>, params: &MaternParams, config: &ClicConfig) -> Result<ClicValue> {
    config.validate()?;
    composite_pairs(obj)?;
    let cl = obj.loglik(params)?;
    let free = free_parameters(params);
    let trace = if free.is_empty() {
        0.0
    } else {
        let h = estimate_h(obj, params, &free, config.h_budget, config.seed)?;
        let j = estimate_j_subsample(obj, params, &free, config)?;
        trace_jh_inv(&j, &h)?
    };
    let value = match config.sign {
        ClicSign::Penalty => -cl + trace,
        ClicSign::Reward => -cl - trace,
    };
    Ok(ClicValue { value, cl, trace, free })
}

/// Index of the smallest criterion; `None` entries are skipped and ties go to
/// the earlier (larger) `λ`.
pub fn select_lambda(criteria: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in criteria.iter().enumerate() {
        if let Some(v) = c {
            if v.is_nan() {
                continue;
            }
            if best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::input("no valid criterion values on the path"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub fit: FitConfig,
    /// Grid length; `max(p² - p, 20)` when absent.
    pub count: Option<usize>,
    /// Explicit penalties (sorted into descending order) instead of the log grid.
    pub lambdas: Option<Vec<f64>>,
    pub clic: ClicConfig,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    Aic,
    Clic,
}

impl CriterionKind {
    pub fn for_objective(kind: ObjectiveKind) -> Self {
        if kind.is_composite() {
            CriterionKind::Clic
        } else {
            CriterionKind::Aic
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub fit: Option<FitResult>,
    /// Why the fit or its criterion failed.
    pub error: Option<String>,
    pub criterion: Option<f64>,
    pub clic: Option<ClicValue>,
    pub pct_zero_l: f64,
    pub pct_zero_psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub lambda_max: f64,
    pub criterion: CriterionKind,
    pub entries: Vec<PathEntry>,
    pub selected: Option<usize>,
    pub marginals: Vec<MarginalFit>,
    pub start: MaternParams,
    pub seconds: f64,
}

impl PathResult {
    pub fn selected_fit(&self) -> Option<&FitResult> {
        self.selected.and_then(|i| self.entries[i].fit.as_ref())
    }

    pub fn criteria(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.criterion).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    /// One row per `λ`: `lambda, objective, criterion, pct_zero_L, pct_zero_psi, converged`.
    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "lambda,objective,criterion,pct_zero_L,pct_zero_psi,converged")?;
        let num = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_else(|| "NaN".into());
        for e in &self.entries {
            writeln!(
                out,
                "{:e},{},{},{},{},{}",
                e.lambda,
                num(e.fit.as_ref().map(|f| f.objective())),
                num(e.criterion),
                e.pct_zero_l,
                e.pct_zero_psi,
                e.fit.as_ref().is_some_and(|f| f.converged)
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(&mut file).map_err(|e| Error::io(path, e))
    }
}

/// Marginal pre-fit, `λ_max`, grid and warm-started path; selects by AIC or
/// CLIC according to the objective.
pub fn solution_path(data: &SpatialDataset, config: &PathConfig) -> Result<PathResult> {
    let obj = Objective::new(data, config.fit.kind, config.fit.ordering, config.fit.mean)?;
    if data.p() < 2 {
        return Err(Error::input("a penalty path needs at least two variables"));
    }
    let marginals = fit_marginals(data, &config.fit)?;
    let start = initial_params(&marginals, config.fit.nu)?;
    let lmax = lambda_max(&obj, &start)?;
    let grid = match &config.lambdas {
        Some(values) => {
            let mut v = values.clone();
            if v.is_empty() || v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::input("explicit lambdas must be nonnegative and finite"));
            }
            v.sort_by(|a, b| b.total_cmp(a));
            v.dedup();
            LambdaGrid { values: v, lambda_max: lmax }
        }
        None => {
            if !(lmax > 0.0) {
                return Err(Error::FitFailed("lambda_max is zero: the diagonal start is stationary".into()));
            }
            lambda_grid(lmax, config.count.unwrap_or_else(|| default_grid_len(data.p())))?
        }
    };
    let mut result = solution_path_on_grid(&obj, &start, &grid, config)?;
    result.marginals = marginals;
    Ok(result)
}

/// Path over `grid` starting from `start`; entry `i + 1` is warm-started at entry `i`.
pub fn solution_path_on_grid(obj: &Objective<'_>, start: &MaternParams, grid: &LambdaGrid, config: &PathConfig) -> Result<PathResult> {
    config.fit.validate()?;
    if grid.values.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::input("lambda grid must be strictly decreasing"));
    }
    if config.fit.kind.is_composite() && config.fit.mean == MeanModel::Constant {
        log::debug!("composite path with centered data");
    }
    let started = Instant::now();
    let criterion = CriterionKind::for_objective(obj.kind());
    let mut warm = start.clone();
    let mut entries = Vec::with_capacity(grid.len());
    for (idx, &lambda) in grid.values.iter().enumerate() {
        let mut entry = PathEntry {
            lambda,
            fit: None,
            error: None,
            criterion: None,
            clic: None,
            pct_zero_l: f64::NAN,
            pct_zero_psi: f64::NAN,
        };
        match fit_objective(obj, lambda, &config.fit, Some(&warm), None) {
            Ok(fit) => {
                entry.pct_zero_l = pct_zero_l(&fit.params.l);
                entry.pct_zero_psi = pct_zero_psi(&fit.params.l);
                match criterion {
                    CriterionKind::Aic => entry.criterion = Some(aic_value(fit.loglik, &fit.params)),
                    CriterionKind::Clic => match clic(obj, &fit.params, &config.clic) {
                        Ok(c) => {
                            entry.criterion = Some(c.value);
                            entry.clic = Some(c);
                        }
                        Err(e) => entry.error = Some(format!("CLIC: {e}")),
                    },
                }
                log::info!(
                    "path {}/{}: lambda {lambda:.4e}, objective {:.6e}, criterion {:?}, {} iterations, {:.1}% zeros in L",
                    idx + 1,
                    grid.len(),
                    fit.objective(),
                    entry.criterion,
                    fit.iterations,
                    entry.pct_zero_l
                );
                warm = fit.params.clone();
                entry.fit = Some(fit);
            }
            Err(e) => {
                log::warn!("path fit at lambda {lambda:e} failed: {e}");
                entry.error = Some(e.to_string());
            }
        }
        entries.push(entry);
    }
    let criteria: Vec<Option<f64>> = entries.iter().map(|e| e.criterion).collect();
    let selected = select_lambda(&criteria).ok();
    Ok(PathResult {
        lambda_max: grid.lambda_max,
        criterion,
        entries,
        selected,
        marginals: Vec::new(),
        start: start.clone(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matern::BlockOrdering;
    use crate::simulate::{sample_locations_uniform, simulate_field, Domain};
    use crate::spatial_data::nearest_neighbors;
    use ndarray::array;

    #[test]
    fn grid_endpoints() {
        let g = lambda_grid(1.0, 3).unwrap();
        assert_eq!(g.values[0], 1.0);
        assert!((g.values[1] - 1e-4).abs() < 1e-16);
        assert_eq!(g.values[2], 1e-8);
        let g = lambda_grid(3.5, 2).unwrap();
        assert_eq!(g.values, vec![3.5, 3.5e-8]);
        assert_eq!(default_grid_len(5), 20);
        assert_eq!(default_grid_len(6), 30);
        assert!(lambda_grid(0.0, 5).is_err());
        assert!(lambda_grid(1.0, 1).is_err());
        let g = lambda_grid(7.0, 37).unwrap();
        assert!(g.values.windows(2).all(|w| w[0] > w[1]));
        assert!((g.lambda_min() / 7e-8 - 1.0).abs() < 1e-12);
    }

    fn with_l(l: Array2<f64>) -> MaternParams {
        let p = l.nrows();
        let sigma2: Vec<f64> = (0..p).map(|i| l.row(i).dot(&l.row(i))).collect();
        let mut params = MaternParams::independent(0.5, &sigma2, &vec![3.0; p], &vec![0.0; p]).unwrap();
        params.l = l;
        params
    }

    #[test]
    fn aic_counting() {
        let one_pair = with_l(array![[1.0, 0.0, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(aic_value(-100.0, &one_pair), 208.0);
        let diag = with_l(Array2::eye(3));
        assert_eq!(aic_value(-100.0, &diag), 200.0);
        // a chain through column 0 makes Ψ_23 structurally nonzero as well
        let chain = with_l(array![[1.0, 0.0, 0.0], [0.3, 1.0, 0.0], [0.2, 0.0, 1.0]]);
        assert_eq!(nonzero_cross_pairs(&chain.l), 6);
        assert_eq!(aic_value(-100.0, &chain) - aic_value(-100.0, &one_pair), 16.0);
    }

    #[test]
    fn sparsity_percentages() {
        let l = array![[1.0, 0.0, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!((pct_zero_l(&l) - 200.0 / 3.0).abs() < 1e-12);
        assert!((pct_zero_psi(&l) - 200.0 / 3.0).abs() < 1e-12);
        let chain = array![[1.0, 0.0, 0.0], [0.3, 1.0, 0.0], [0.2, 0.0, 1.0]];
        assert!((pct_zero_l(&chain) - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(pct_zero_psi(&chain), 0.0);
    }

    #[test]
    fn selection_rule() {
        assert_eq!(select_lambda(&[Some(5.0), Some(3.0), Some(1.0), Some(2.0), Some(4.0)]).unwrap(), 2);
        assert_eq!(select_lambda(&[Some(1.0), Some(1.0), Some(1.0)]).unwrap(), 0);
        assert_eq!(select_lambda(&[None, Some(2.0), None, Some(2.0)]).unwrap(), 1);
        assert!(select_lambda(&[None, None]).is_err());
    }

    fn composite_case(seed: u64) -> (MaternParams, SpatialDataset) {
        let rho = array![[1.0, 0.4, 0.2], [0.4, 1.0, 0.3], [0.2, 0.3, 1.0]];
        let params = MaternParams::from_correlation(0.5, &[1.0, 1.5, 0.7], &[4.0, 3.0, 5.0], &[0.0; 3], &rho, 2.0, array![[1.0, 0.5, 0.2], [0.5, 1.0, 0.4], [0.2, 0.4, 1.0]]).unwrap();
        let locs = sample_locations_uniform(30, &Domain::unit_square(), seed).unwrap();
        let data = simulate_field(&params, &locs, seed + 1, BlockOrdering::ByVariable).unwrap();
        (params, data)
    }

    /// Sets one free coordinate to `value` in place, keeping the row-norm constraint.
    fn moved(params: &MaternParams, fp: FreeParameter, eps: f64) -> MaternParams {
        let mut q = params.clone();
        match fp {
            FreeParameter::L { row, col } => {
                q.l[[row, col]] += eps;
                let others: f64 = (0..row).map(|c| q.l[[row, c]].powi(2)).sum();
                q.l[[row, row]] = (q.sigma2[row] - others).sqrt();
            }
            FreeParameter::DeltaB => q.delta_b += eps,
            FreeParameter::Rb { row, col } => {
                q.rb[[row, col]] += eps;
                q.rb[[col, row]] += eps;
            }
        }
        q
    }

    #[test]
    fn free_parameter_map() {
        let (params, _) = composite_case(1);
        let free = free_parameters(&params);
        assert_eq!(free.len(), 3 + 3);
        assert_eq!(free[0], FreeParameter::L { row: 1, col: 0 });
        assert_eq!(free[3], FreeParameter::Rb { row: 0, col: 1 });
        assert_eq!(free[5], FreeParameter::Rb { row: 1, col: 2 });
        let diag = with_l(Array2::eye(3));
        assert!(free_parameters(&diag).is_empty());
        let mut no_range = params.clone();
        no_range.delta_b = 0.0;
        assert_eq!(free_parameters(&no_range)[3..], [FreeParameter::DeltaB]);
    }

    #[test]
    fn pair_scores_match_differences() {
        let (params, data) = composite_case(2);
        let graph = nearest_neighbors(data.locations(), 2).unwrap();
        let obj = Objective::composite(&data, &graph).unwrap();
        let free = free_parameters(&params);
        let dirs: Vec<Direction> = free.iter().map(|&f| free_direction(&params, f).unwrap()).collect();
        let pairs = obj.pairs().to_vec();
        for e in [0, 7, pairs.len() - 1] {
            let (k, l, _) = pairs[e];
            let single = Objective::composite_with_pairs(&data, &[(k, l)], MeanModel::Zero).unwrap();
            let s = pair_score(&obj, &params, &dirs, e).unwrap();
            for (x, &fp) in free.iter().enumerate() {
                let h = 1e-6;
                let up = single.loglik(&moved(&params, fp, h)).unwrap();
                let down = single.loglik(&moved(&params, fp, -h)).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!((s[x] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "pair {e} coord {x}: {} vs {fd}", s[x]);
            }
        }
    }

    /// `E[cl_kl(θ)]` under `z ~ N(0, Q(θ₀))`, up to a constant.
    fn expected_pair_loglik(params: &MaternParams, truth: &Array2<f64>, s_k: &[f64], s_l: &[f64]) -> f64 {
        let q = crate::matern::assemble_pair_covariance(params, s_k, s_l).unwrap();
        let ch = SmallCholesky::new(&q).unwrap();
        let inv = ch.inverse();
        let tr: f64 = inv.iter().zip(truth.iter()).map(|(a, b)| a * b).sum();
        -0.5 * (ch.log_det() + tr)
    }

    #[test]
    fn h_matches_expected_hessian() {
        let (params, data) = composite_case(3);
        let (k, l) = (0, 1);
        let obj = Objective::composite_with_pairs(&data, &[(k, l)], MeanModel::Zero).unwrap();
        let free = free_parameters(&params);
        let h = estimate_h(&obj, &params, &free, 10, 0).unwrap();
        let s_k: Vec<f64> = data.locations().row(k).to_vec();
        let s_l: Vec<f64> = data.locations().row(l).to_vec();
        let truth = crate::matern::assemble_pair_covariance(&params, &s_k, &s_l).unwrap();
        let eps = 1e-4;
        for (x, &a) in free.iter().enumerate() {
            for (y, &b) in free.iter().enumerate() {
                let f = |da: f64, db: f64| expected_pair_loglik(&moved(&moved(&params, a, da), b, db), &truth, &s_k, &s_l);
                let fd = (f(eps, eps) - f(eps, -eps) - f(-eps, eps) + f(-eps, -eps)) / (4.0 * eps * eps);
                assert!((h[[x, y]] + fd).abs() < 1e-5 * (1.0 + fd.abs()), "({x},{y}): {} vs {}", h[[x, y]], -fd);
            }
        }
        for x in 0..free.len() {
            for y in 0..free.len() {
                assert_eq!(h[[x, y]], h[[y, x]]);
            }
        }
    }

    #[test]
    fn h_budget_rescales() {
        let (params, data) = composite_case(4);
        let graph = nearest_neighbors(data.locations(), 3).unwrap();
        let obj = Objective::composite(&data, &graph).unwrap();
        let free = free_parameters(&params);
        let all = estimate_h(&obj, &params, &free, usize::MAX, 0).unwrap();
        let again = estimate_h(&obj, &params, &free, obj.pairs().len(), 9).unwrap();
        assert_eq!(all, again);
        let sub = estimate_h(&obj, &params, &free, obj.pairs().len() / 2, 1).unwrap();
        let rel = (&sub - &all).iter().map(|v| v.abs()).sum::<f64>() / all.iter().map(|v| v.abs()).sum::<f64>();
        assert!(rel < 0.5, "relative L1 difference {rel}");
    }

    #[test]
    fn single_window_covering_everything() {
        let (params, data) = composite_case(5);
        let graph = nearest_neighbors(data.locations(), 2).unwrap();
        let obj = Objective::composite(&data, &graph).unwrap();
        let free = free_parameters(&params);
        let dirs: Vec<Direction> = free.iter().map(|&f| free_direction(&params, f).unwrap()).collect();
        let cfg = ClicConfig {
            subsamples: 1,
            pairs_per_subsample: usize::MAX,
            center_scores: false,
            ..ClicConfig::default()
        };
        let j = estimate_j_subsample(&obj, &params, &free, &cfg).unwrap();
        // centered, the single window's score is exactly the mean and cancels
        let centered = estimate_j_subsample(&obj, &params, &free, &ClicConfig { center_scores: true, ..cfg.clone() }).unwrap();
        assert!(centered.iter().all(|v| v.abs() < 1e-9 * (1.0 + j.iter().fold(0.0f64, |m, x| m.max(x.abs())))));
        let mut g = Array1::<f64>::zeros(free.len());
        for e in 0..obj.pairs().len() {
            g += &pair_score(&obj, &params, &dirs, e).unwrap();
        }
        for x in 0..free.len() {
            for y in 0..free.len() {
                assert!((j[[x, y]] - g[x] * g[y]).abs() < 1e-9 * (1.0 + (g[x] * g[y]).abs()));
            }
        }
        let (vals, _) = sym_eigen(&j).unwrap();
        assert!(vals[0] > -1e-8 * vals[vals.len() - 1]);
    }

    #[test]
    fn clic_assembly_and_sign() {
        let (params, data) = composite_case(6);
        let graph = nearest_neighbors(data.locations(), 2).unwrap();
        let obj = Objective::composite(&data, &graph).unwrap();
        let cfg = ClicConfig {
            subsamples: 20,
            pairs_per_subsample: 10,
            ..ClicConfig::default()
        };
        let c = clic(&obj, &params, &cfg).unwrap();
        let free = free_parameters(&params);
        let h = estimate_h(&obj, &params, &free, cfg.h_budget, cfg.seed).unwrap();
        let j = estimate_j_subsample(&obj, &params, &free, &cfg).unwrap();
        let inv = spd_inverse(&h).unwrap();
        let tr: f64 = j.dot(&inv).diag().sum();
        assert!((c.trace - tr).abs() < 1e-9 * tr.abs());
        assert!((c.value - (-obj.loglik(&params).unwrap() + tr)).abs() < 1e-9 * c.value.abs());
        let r = clic(&obj, &params, &ClicConfig { sign: ClicSign::Reward, ..cfg.clone() }).unwrap();
        assert!((r.value - (c.value - 2.0 * tr)).abs() < 1e-9 * c.value.abs());
        // diagonal model: no free cross parameters
        let diag = MaternParams::independent(0.5, &[1.0, 1.5, 0.7], &[4.0, 3.0, 5.0], &[0.0; 3]).unwrap();
        let d = clic(&obj, &diag, &cfg).unwrap();
        assert_eq!(d.trace, 0.0);
    }

    #[test]
    fn scalar_trace_oracle() {
        let j = array![[3.0]];
        let h = array![[1.5]];
        assert!((trace_jh_inv(&j, &h).unwrap() - 2.0).abs() < 1e-15);
        // a null direction of H shared by J contributes nothing
        let j = array![[2.0, 0.0], [0.0, 0.0]];
        let h = array![[4.0, 0.0], [0.0, 0.0]];
        assert!((trace_jh_inv(&j, &h).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn lambda_max_freezes_diagonal() {
        let (_, data) = composite_case(7);
        let cfg = FitConfig { max_iter: 20, ..FitConfig::default() };
        let obj = Objective::full(&data);
        let marg = fit_marginals(&data, &cfg).unwrap();
        let start = initial_params(&marg, 0.5).unwrap();
        let lmax = lambda_max(&obj, &start).unwrap();
        assert!(lmax > 0.0);
        let fit = fit_objective(&obj, lmax, &cfg, Some(&start), None).unwrap();
        assert_eq!(pct_zero_l(&fit.params.l), 100.0);
        let below = fit_objective(&obj, 0.5 * lmax, &cfg, Some(&start), None).unwrap();
        assert!(pct_zero_l(&below.params.l) < 100.0);
    }

    #[test]
    fn short_path_is_monotone_and_selects() {
        let (_, data) = composite_case(8);
        let cfg = PathConfig {
            fit: FitConfig { max_iter: 15, ..FitConfig::default() },
            count: Some(5),
            ..PathConfig::default()
        };
        let path = solution_path(&data, &cfg).unwrap();
        assert_eq!(path.entries.len(), 5);
        assert_eq!(path.entries[0].pct_zero_l, 100.0);
        assert_eq!(path.criterion, CriterionKind::Aic);
        let sel = path.selected.unwrap();
        let crit = path.criteria();
        assert!(crit.iter().flatten().all(|&c| c >= crit[sel].unwrap()));
        // each warm-started fit ends no higher than its starting point
        for e in &path.entries {
            let f = e.fit.as_ref().unwrap();
            assert!(f.trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(e.pct_zero_psi <= e.pct_zero_l + 1e-12);
        }
        let mut buf = Vec::new();
        path.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("lambda,objective,criterion,pct_zero_L,pct_zero_psi,converged"));
        assert_eq!(text.lines().count(), 6);
        let back = PathResult::from_json(&path.to_json().unwrap()).unwrap();
        assert_eq!(back.selected, path.selected);
    }
}
