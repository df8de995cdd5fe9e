//! Marginal pre-fit followed by projected proximal block coordinate descent
//! over `(L, Δ_B, R_B)`.

use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_eigen};
use crate::matern::{enforce_diagonal_constraint, BlockGradient, BlockOrdering, MaternParams};
use crate::objectives::{l1_penalty, Evaluation, MeanModel, Objective, ObjectiveKind};
use crate::spatial_data::{pairwise_distances, SpatialDataset};

/// Acceptance rule for a backtracking candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineSearch {
    /// Accept the first candidate that strictly decreases the penalized objective.
    #[default]
    Improvement,
    /// Require a decrease of at least `1e-4 ‖Δx‖² / t` (Armijo-type).
    SufficientDecrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub kind: ObjectiveKind,
    pub ordering: BlockOrdering,
    pub mean: MeanModel,
    /// Common smoothness `ν`.
    pub nu: f64,
    /// Outer iterations `M`.
    pub max_iter: usize,
    /// Initial step `τ₀`.
    pub initial_step: f64,
    /// Backtracking factor `β`.
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Stop when the relative decrease of the penalized objective falls below this.
    pub tol: f64,
    pub line_search: LineSearch,
    /// Start each block's search at its last accepted step divided by `β`
    /// instead of at `τ₀`.
    pub adaptive_step: bool,
    /// Estimate per-variable nuggets in the marginal fit (otherwise `τ² = 0`).
    pub estimate_nugget: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::FullLikelihood,
            ordering: BlockOrdering::ByVariable,
            mean: MeanModel::Zero,
            nu: 0.5,
            max_iter: 200,
            initial_step: 1.0,
            shrink: 0.5,
            max_backtracks: 50,
            tol: 1e-6,
            line_search: LineSearch::Improvement,
            adaptive_step: true,
            estimate_nugget: false,
        }
    }
}

/// Largest step the adaptive schedule may reach, relative to `τ₀`.
const MAX_STEP_GROWTH: f64 = 1e8;

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::input("max_iter must be at least 1"));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::input("initial_step must be positive"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::input("shrink must lie in (0, 1)"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::input("tol must be positive"));
        }
        if let ObjectiveKind::CompositeLikelihood { v } = self.kind {
            if v == 0 {
                return Err(Error::input("composite likelihood needs v >= 1"));
            }
        }
        if !(self.nu > 0.0) {
            return Err(Error::params("nu", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalFit {
    pub sigma2: f64,
    pub alpha: f64,
    pub tau2: f64,
    /// Log-objective of the single variable at the estimate.
    pub loglik: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MaternParams,
    pub lambda: f64,
    pub kind: ObjectiveKind,
    /// Log-objective at the estimate.
    pub loglik: f64,
    /// Penalized objective after initialization and after every outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `nonzero[i][j]` for `j ≤ i`: whether `L_ij ≠ 0`.
    pub nonzero: Vec<Vec<bool>>,
    pub marginals: Option<Vec<MarginalFit>>,
    pub seconds: f64,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NAN)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Lower-triangular nonzero pattern of `L`.
pub fn nonzero_pattern(l: &Array2<f64>) -> Vec<Vec<bool>> {
    (0..l.nrows()).map(|i| (0..=i).map(|j| l[[i, j]] != 0.0).collect()).collect()
}

/// State reported to the observer after each outer iteration.
pub struct IterationReport<'a> {
    pub iteration: usize,
    pub params: &'a MaternParams,
    pub objective: f64,
    pub jitter: f64,
}

/// `sign(x) max(|x| - t, 0)`.
pub fn soft_threshold_scalar(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Soft-thresholds the strict lower triangle; the diagonal passes through and
/// the strict upper triangle is zeroed.
pub fn soft_threshold(m: &Array2<f64>, t: f64) -> Array2<f64> {
    let p = m.nrows();
    Array2::from_shape_fn((p, p), |(i, j)| {
        if i == j {
            m[[i, i]]
        } else if j < i {
            soft_threshold_scalar(m[[i, j]], t)
        } else {
            0.0
        }
    })
}

/// Proximal step on `L` in log-diagonal coordinates followed by the row rescaling
/// `row_i ← σ_i row_i / ‖row_i‖`. `dl` is the gradient of the minimized objective.
pub fn update_l(params: &MaternParams, dl: &Array2<f64>, step: f64, lambda: f64) -> Array2<f64> {
    let p = params.p();
    let coords = params.l_coords();
    let moved = Array2::from_shape_fn((p, p), |(i, j)| if j <= i { coords[[i, j]] - step * dl[[i, j]] } else { 0.0 });
    let mut l = soft_threshold(&moved, step * lambda);
    for i in 0..p {
        l[[i, i]] = l[[i, i]].exp();
    }
    enforce_diagonal_constraint(&mut l, params.sigma2.as_slice().expect("contiguous sigma2"));
    l
}

/// Tolerance and sweep limit of the alternating projections.
pub const PROJECTION_TOL: f64 = 1e-9;
pub const PROJECTION_SWEEPS: usize = 500;

/// Nearest (Frobenius) symmetric, unit-diagonal, PSD matrix with off-diagonal
/// entries in `[0, 1]`, by alternating projections with Dykstra's correction.
pub fn project_correlation_box(a: &Array2<f64>) -> Result<Array2<f64>> {
    let p = a.nrows();
    if a.ncols() != p {
        return Err(Error::input("projection needs a square matrix"));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..p {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-12 * scale {
                return Err(Error::input("projection needs a symmetric matrix"));
            }
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("projection needs finite entries"));
    }
    let mut y = a.clone();
    let mut correction = Array2::<f64>::zeros((p, p));
    for _ in 0..PROJECTION_SWEEPS {
        let r = &y - &correction;
        let x = project_psd(&r)?;
        correction = &x - &r;
        let y_next = project_box(&x);
        let step = frob(&y_next, &y);
        let gap = frob(&y_next, &x);
        y = y_next;
        if step < PROJECTION_TOL && gap < PROJECTION_TOL {
            break;
        }
    }
    // shrink toward I to remove any residual negative eigenvalue; keeps the box
    let min_eig = if p > 1 { min_eigenvalue(&y)? } else { 1.0 };
    if min_eig < 0.0 {
        let s = -min_eig / (1.0 - min_eig);
        let eye = Array2::<f64>::eye(p);
        y = &y * (1.0 - s) + &eye * s;
        y = project_box(&y);
    }
    Ok(y)
}

fn frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    crate::linalg::frobenius_distance(a, b)
}

fn project_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = sym_eigen(a)?;
    let clipped = vals.mapv(|v| v.max(0.0));
    let p = a.nrows();
    let scaled = Array2::from_shape_fn((p, p), |(i, k)| vecs[[i, k]] * clipped[k]);
    let out = scaled.dot(&vecs.t());
    Ok(Array2::from_shape_fn((p, p), |(i, j)| 0.5 * (out[[i, j]] + out[[j, i]])))
}

fn project_box(a: &Array2<f64>) -> Array2<f64> {
    let p = a.nrows();
    Array2::from_shape_fn((p, p), |(i, j)| {
        if i == j {
            1.0
        } else {
            (0.5 * (a[[i, j]] + a[[j, i]])).clamp(0.0, 1.0)
        }
    })
}

/// Minimizes `f` over `ℝ^d` by Nelder–Mead; returns `(x, f(x), evaluations, converged)`.
fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64, usize, bool) {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..d {
        let mut x = start.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut evals = d + 1;
    let mut converged = false;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let spread = (values[d] - values[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= ftol * (values[0].abs() + 1e-10) && size < 1e-6 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|k| simplex[..d].iter().map(|x| x[k]).sum::<f64>() / d as f64).collect();
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + t * (w - c)).collect()
        };
        let reflected = along(-1.0, &simplex[d]);
        let fr = f(&reflected);
        evals += 1;
        if fr < values[0] {
            let expanded = along(-2.0, &simplex[d]);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[d] = expanded;
                values[d] = fe;
            } else {
                simplex[d] = reflected;
                values[d] = fr;
            }
        } else if fr < values[d - 1] {
            simplex[d] = reflected;
            values[d] = fr;
        } else {
            let (contracted, fc) = if fr < values[d] {
                let c = along(-0.5, &simplex[d]);
                let fc = f(&c);
                (c, fc)
            } else {
                let c = along(0.5, &simplex[d]);
                let fc = f(&c);
                (c, fc)
            };
            evals += 1;
            if fc < values[d].min(fr) {
                simplex[d] = contracted;
                values[d] = fc;
            } else {
                for i in 1..=d {
                    let best = simplex[0].clone();
                    simplex[i] = simplex[i].iter().zip(&best).map(|(x, b)| b + 0.5 * (x - b)).collect();
                    values[i] = f(&simplex[i]);
                    evals += 1;
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    (simplex[best].clone(), values[best], evals, converged)
}

/// Independent univariate fits of `(σ_i², α_i, τ_i²)` for every variable.
pub fn fit_marginals(data: &SpatialDataset, config: &FitConfig) -> Result<Vec<MarginalFit>> {
    config.validate()?;
    if data.n() < 3 {
        return Err(Error::input("marginal fits need at least 3 observations"));
    }
    let dist = pairwise_distances(data.locations());
    let extent = dist.iter().fold(0.0f64, |m, &v| m.max(v));
    if !(extent > 0.0) {
        return Err(Error::input("locations span no distance"));
    }
    (0..data.p())
        .map(|j| {
            let column = data.variable(j);
            fit_one_marginal(&column, config, extent).map_err(|e| {
                Error::FitFailed(format!("marginal fit of variable {} ({}): {e}", j, data.names()[j]))
            })
        })
        .collect()
}

fn fit_one_marginal(column: &SpatialDataset, config: &FitConfig, extent: f64) -> Result<MarginalFit> {
    let obj = Objective::new(column, config.kind, config.ordering, config.mean)?;
    let z = column.column(0);
    let mean = if config.mean == MeanModel::Constant { z.mean().unwrap_or(0.0) } else { 0.0 };
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
    if !(var > 0.0) {
        return Err(Error::input("column has zero variance"));
    }
    let nu = config.nu;
    let decode = |x: &[f64]| -> (f64, f64, f64) {
        let tau2 = if config.estimate_nugget { x[2].exp() } else { 0.0 };
        (x[0].exp(), x[1].exp(), tau2)
    };
    let mut evals = 0usize;
    let mut objective = |x: &[f64]| -> f64 {
        evals += 1;
        let (s, a, t) = decode(x);
        match MaternParams::independent(nu, &[s], &[a], &[t]).and_then(|p| obj.loglik(&p)) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };
    // practical ranges of 10%, 30% and 100% of the domain extent
    let mut best: Option<(Vec<f64>, f64)> = None;
    for frac in [0.1, 0.3, 1.0] {
        let alpha0 = 3.0 / (frac * extent);
        let mut x = vec![(if config.estimate_nugget { 0.9 * var } else { var }).ln(), alpha0.ln()];
        if config.estimate_nugget {
            x.push((0.1 * var).ln());
        }
        let v = objective(&x);
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((x, v));
        }
    }
    let (start, start_value) = best.expect("at least one start");
    if !start_value.is_finite() {
        return Err(Error::NotPositiveDefinite("no starting value gives a finite likelihood".into()));
    }
    let (mut x, mut fx, _, mut converged) = nelder_mead(&mut objective, &start, 0.5, 600, 1e-10);
    // one restart around the optimum guards against simplex collapse
    if fx.is_finite() {
        let (x2, f2, _, c2) = nelder_mead(&mut objective, &x, 0.1, 300, 1e-10);
        if f2 <= fx {
            x = x2;
            fx = f2;
            converged = converged && c2;
        }
    }
    if !fx.is_finite() {
        return Err(Error::FitFailed("likelihood not finite at the estimate".into()));
    }
    let (sigma2, alpha, tau2) = decode(&x);
    Ok(MarginalFit {
        sigma2,
        alpha,
        tau2,
        loglik: -fx,
        evaluations: evals,
        converged,
    })
}

/// Diagonal-`L` starting point built from marginal fits.
pub fn initial_params(marginals: &[MarginalFit], nu: f64) -> Result<MaternParams> {
    let s: Vec<f64> = marginals.iter().map(|m| m.sigma2).collect();
    let a: Vec<f64> = marginals.iter().map(|m| m.alpha).collect();
    let t: Vec<f64> = marginals.iter().map(|m| m.tau2).collect();
    MaternParams::independent(nu, &s, &a, &t)
}

/// Fits at penalty `lambda`. Without a warm start, the marginal parameters are
/// estimated first and the cross structure starts at `L` diagonal, `Δ_B = 0`, `R_B = I`.
pub fn fit(data: &SpatialDataset, lambda: f64, config: &FitConfig, warm_start: Option<&MaternParams>) -> Result<FitResult> {
    config.validate()?;
    let obj = Objective::new(data, config.kind, config.ordering, config.mean)?;
    fit_objective(&obj, lambda, config, warm_start, None)
}

struct Current {
    params: MaternParams,
    eval: Evaluation,
    f: f64,
}

/// Core loop on a prepared objective; `observer` sees every outer iteration.
pub fn fit_objective(
    obj: &Objective<'_>,
    lambda: f64,
    config: &FitConfig,
    warm_start: Option<&MaternParams>,
    mut observer: Option<&mut dyn FnMut(&IterationReport<'_>)>,
) -> Result<FitResult> {
    config.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::input(format!("lambda must be nonnegative and finite, got {lambda}")));
    }
    let started = Instant::now();
    let data = obj.data();
    let (start, marginals) = match warm_start {
        Some(w) => {
            w.validate()?;
            if w.p() != data.p() {
                return Err(Error::input(format!("warm start has p = {}, data has p = {}", w.p(), data.p())));
            }
            (w.clone(), None)
        }
        None => {
            let m = fit_marginals(data, config)?;
            (initial_params(&m, config.nu)?, Some(m))
        }
    };
    let eval = obj
        .evaluate(&start)
        .map_err(|e| Error::FitFailed(format!("objective at the starting point: {e}")))?;
    let f0 = -eval.loglik + lambda * l1_penalty(&start.l);
    let mut cur = Current { params: start, eval, f: f0 };
    let mut trace = vec![f0];
    let mut converged = false;
    let mut iterations = 0;
    let p = data.p();
    let t0 = config.initial_step;
    let cap = t0 * MAX_STEP_GROWTH;
    let mut steps = [t0; 3];
    if p == 1 {
        converged = true;
    }
    while !converged && iterations < config.max_iter {
        iterations += 1;
        let f_prev = cur.f;

        // L block
        let grad = neg(&obj.gradient_at(&cur.eval)?);
        let dl = grad.dl.clone();
        let base = cur.params.clone();
        let start_t = if config.adaptive_step { steps[0] } else { t0 };
        if let Some(t) = block_search(obj, lambda, config, &mut cur, start_t, |t| {
            let mut q = base.clone();
            q.l = update_l(&base, &dl, t, lambda);
            q
        })? {
            steps[0] = (t / config.shrink).min(cap);
        }

        let coupled = has_cross_structure(&cur.params);
        if coupled {
            // Δ_B block
            let grad = neg(&obj.gradient_at(&cur.eval)?);
            let g = grad.d_delta_b;
            if g != 0.0 {
                let base = cur.params.clone();
                let start_t = if config.adaptive_step { steps[1] } else { t0 };
                if let Some(t) = block_search(obj, lambda, config, &mut cur, start_t, |t| {
                    let mut q = base.clone();
                    q.delta_b = (base.delta_b - t * g).max(0.0);
                    q
                })? {
                    steps[1] = (t / config.shrink).min(cap);
                }
            }
        }

        if coupled && cur.params.delta_b > 0.0 && p > 1 {
            // R_B block
            let grad = neg(&obj.gradient_at(&cur.eval)?);
            let mut g = Array2::<f64>::zeros((p, p));
            for i in 0..p {
                for j in (i + 1)..p {
                    g[[i, j]] = grad.d_rb[[i, j]];
                    g[[j, i]] = grad.d_rb[[i, j]];
                }
            }
            if g.iter().any(|&v| v != 0.0) {
                let base = cur.params.clone();
                let start_t = if config.adaptive_step { steps[2] } else { t0 };
                let mut projection_error = None;
                let found = block_search(obj, lambda, config, &mut cur, start_t, |t| {
                    let mut q = base.clone();
                    let moved = &base.rb - &(&g * t);
                    match project_correlation_box(&moved) {
                        Ok(r) => q.rb = r,
                        Err(e) => projection_error = Some(e),
                    }
                    q
                })?;
                if let Some(e) = projection_error {
                    log::warn!("R_B projection failed: {e}");
                }
                if let Some(t) = found {
                    steps[2] = (t / config.shrink).min(cap);
                }
            }
        }

        trace.push(cur.f);
        if let Some(obs) = observer.as_mut() {
            obs(&IterationReport {
                iteration: iterations,
                params: &cur.params,
                objective: cur.f,
                jitter: cur.eval.jitter(),
            });
        }
        let decrease = f_prev - cur.f;
        log::debug!("iteration {iterations}: objective {:.10e} (decrease {decrease:.3e})", cur.f);
        if decrease <= config.tol * f_prev.abs().max(1.0) {
            converged = true;
        }
    }
    let loglik = cur.eval.loglik;
    Ok(FitResult {
        nonzero: nonzero_pattern(&cur.params.l),
        params: cur.params,
        lambda,
        kind: obj.kind(),
        loglik,
        trace,
        converged,
        iterations,
        marginals,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn neg(g: &BlockGradient) -> BlockGradient {
    g.scaled(-1.0)
}

/// Whether any `Ψ_ij`, `i ≠ j`, is nonzero (otherwise `Δ_B` and `R_B` do not enter `Σ`).
fn has_cross_structure(params: &MaternParams) -> bool {
    let psi = params.psi();
    let p = params.p();
    (0..p).any(|i| (0..p).any(|j| i != j && psi[[i, j]] != 0.0))
}

/// Squared Frobenius distance between the free blocks of two parameter sets.
fn block_distance2(a: &MaternParams, b: &MaternParams) -> f64 {
    let l: f64 = a.l_coords().iter().zip(b.l_coords().iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let r: f64 = a.rb.iter().zip(b.rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    l + r + (a.delta_b - b.delta_b).powi(2)
}

/// Backtracks over `t = start·β^i`; on acceptance replaces `cur` and returns the step.
fn block_search(
    obj: &Objective<'_>,
    lambda: f64,
    config: &FitConfig,
    cur: &mut Current,
    start: f64,
    mut candidate: impl FnMut(f64) -> MaternParams,
) -> Result<Option<f64>> {
    let mut t = start;
    for _ in 0..=config.max_backtracks {
        let q = candidate(t);
        if q == cur.params {
            t *= config.shrink;
            continue;
        }
        if let Ok(eval) = obj.evaluate(&q) {
            let f = -eval.loglik + lambda * l1_penalty(&q.l);
            let accept = match config.line_search {
                LineSearch::Improvement => f < cur.f,
                LineSearch::SufficientDecrease => f <= cur.f - 1e-4 * block_distance2(&q, &cur.params) / t && f < cur.f,
            };
            if accept && f.is_finite() {
                *cur = Current { params: q, eval, f };
                return Ok(Some(t));
            }
        }
        t *= config.shrink;
    }
    Ok(None)
}

/// Projected gradient update of `Δ_B` alone (the other blocks fixed).
pub fn update_delta_b(obj: &Objective<'_>, params: &MaternParams, lambda: f64, config: &FitConfig) -> Result<f64> {
    let eval = obj.evaluate(params)?;
    let g = -obj.gradient_at(&eval)?.d_delta_b;
    if g == 0.0 {
        return Ok(params.delta_b);
    }
    let f = -eval.loglik + lambda * l1_penalty(&params.l);
    let mut cur = Current { params: params.clone(), eval, f };
    block_search(obj, lambda, config, &mut cur, config.initial_step, |t| {
        let mut q = params.clone();
        q.delta_b = (params.delta_b - t * g).max(0.0);
        q
    })?;
    Ok(cur.params.delta_b)
}

/// Projected gradient update of `R_B` alone (the other blocks fixed).
pub fn update_rb(obj: &Objective<'_>, params: &MaternParams, lambda: f64, config: &FitConfig) -> Result<Array2<f64>> {
    let p = params.p();
    let eval = obj.evaluate(params)?;
    let grad = obj.gradient_at(&eval)?;
    let g = Array2::from_shape_fn((p, p), |(i, j)| match i.cmp(&j) {
        std::cmp::Ordering::Less => -grad.d_rb[[i, j]],
        std::cmp::Ordering::Greater => -grad.d_rb[[j, i]],
        std::cmp::Ordering::Equal => 0.0,
    });
    if g.iter().all(|&v| v == 0.0) {
        return Ok(params.rb.clone());
    }
    let f = -eval.loglik + lambda * l1_penalty(&params.l);
    let mut cur = Current { params: params.clone(), eval, f };
    block_search(obj, lambda, config, &mut cur, config.initial_step, |t| {
        let mut q = params.clone();
        if let Ok(r) = project_correlation_box(&(&params.rb - &(&g * t))) {
            q.rb = r;
        }
        q
    })?;
    Ok(cur.params.rb)
}

/// Maximum violation of the model constraints (zero when all hold).
pub fn constraint_violation(params: &MaternParams) -> f64 {
    let p = params.p();
    let psi_diag = Array1::from_shape_fn(p, |i| params.l.row(i).dot(&params.l.row(i)));
    let mut worst = 0.0f64;
    for i in 0..p {
        worst = worst.max((psi_diag[i] - params.sigma2[i]).abs() / params.sigma2[i]);
    }
    worst = worst.max((-params.delta_b).max(0.0));
    for i in 0..p {
        worst = worst.max((params.rb[[i, i]] - 1.0).abs());
        for j in 0..p {
            let r = params.rb[[i, j]];
            worst = worst.max((-r).max(0.0)).max((r - 1.0).max(0.0));
        }
    }
    if p > 1 {
        if let Ok(e) = min_eigenvalue(&params.rb) {
            worst = worst.max((-e).max(0.0));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_field, sample_locations_uniform, Domain};
    use ndarray::array;

    #[test]
    fn soft_threshold_values() {
        assert!((soft_threshold_scalar(0.5, 0.3) - 0.2).abs() < 1e-15);
        assert_eq!(soft_threshold_scalar(-0.2, 0.3), 0.0);
        assert_eq!(soft_threshold_scalar(1.7, 0.0), 1.7);
        for x in [-2.0, -0.1, 0.4, 3.0] {
            assert_eq!(soft_threshold_scalar(-x, 0.25), -soft_threshold_scalar(x, 0.25));
        }
        let m = array![[-5.0, 9.0], [0.5, -7.0]];
        let s = soft_threshold(&m, 0.3);
        assert_eq!(s, array![[-5.0, 0.0], [0.2, -7.0]]);
    }

    fn three_var() -> MaternParams {
        let rho = array![[1.0, 0.4, 0.2], [0.4, 1.0, 0.3], [0.2, 0.3, 1.0]];
        MaternParams::from_correlation(0.5, &[1.0, 2.0, 0.5], &[3.0, 4.0, 5.0], &[0.0; 3], &rho, 1.0, Array2::eye(3))
            .unwrap()
    }

    #[test]
    fn update_l_fixed_point_and_full_threshold() {
        let params = three_var();
        let zero = Array2::zeros((3, 3));
        let same = update_l(&params, &zero, 0.1, 0.0);
        for (a, b) in same.iter().zip(params.l.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let wiped = update_l(&params, &zero, 1.0, 10.0);
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(wiped[[i, j]], 0.0);
            }
            assert!((wiped[[i, i]] - params.sigma2[i].sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn update_l_keeps_diagonal_constraint() {
        let params = three_var();
        let g = array![[0.3, 0.0, 0.0], [-1.2, 0.5, 0.0], [0.7, 0.05, -0.4]];
        let l = update_l(&params, &g, 0.2, 0.3);
        for i in 0..3 {
            let row: f64 = l.row(i).iter().map(|v| v * v).sum();
            assert!((row - params.sigma2[i]).abs() < 1e-12 * params.sigma2[i]);
        }
        // |0.05·0.2| below the threshold 0.06 from a start of 0 stays zero after rescaling
        let mut sparse = params.clone();
        sparse.l[[2, 1]] = 0.0;
        crate::matern::enforce_diagonal_constraint(&mut sparse.l, &[1.0, 2.0, 0.5]);
        let l = update_l(&sparse, &g, 0.2, 0.3);
        assert_eq!(l[[2, 1]], 0.0);
    }

    #[test]
    fn projection_examples() {
        let valid = array![[1.0, 0.3, 0.0], [0.3, 1.0, 0.5], [0.0, 0.5, 1.0]];
        let out = project_correlation_box(&valid).unwrap();
        assert!(frob(&out, &valid) < 1e-9);
        let big = array![[1.0, 1.4], [1.4, 1.0]];
        let out = project_correlation_box(&big).unwrap();
        assert!((out[[0, 1]] - 1.0).abs() < 1e-9);
        let neg = array![[1.0, -0.6, -0.6], [-0.6, 1.0, -0.6], [-0.6, -0.6, 1.0]];
        let out = project_correlation_box(&neg).unwrap();
        assert!(frob(&out, &Array2::eye(3)) < 1e-9);
        assert!(project_correlation_box(&array![[1.0, 0.2], [0.3, 1.0]]).is_err());
    }

    #[test]
    fn equicorrelation_projection_matches_grid_search() {
        // nearest equicorrelation c ∈ [0, 1] to a 4×4 matrix with off-diagonal 1.3
        let a = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 1.3 });
        let out = project_correlation_box(&a).unwrap();
        let best = (0..=10_000)
            .map(|k| k as f64 / 10_000.0)
            .map(|c| (c, 12.0 * (1.3 - c).powi(2)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap()
            .0;
        assert!((out[[0, 1]] - best).abs() < 1e-4);
    }

    #[test]
    fn delta_b_stays_at_boundary() {
        let mut params = three_var();
        params.delta_b = 0.0;
        let loc = array![[0.0, 0.0], [0.2, 0.1], [0.6, 0.4], [0.9, 0.8]];
        let values = Array2::from_shape_fn((4, 3), |(k, i)| ((k * 3 + i) as f64).sin());
        let data = SpatialDataset::new(loc, values, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let obj = Objective::full(&data);
        let g = -obj.gradient(&params).unwrap().d_delta_b;
        let out = update_delta_b(&obj, &params, 0.0, &FitConfig::default()).unwrap();
        if g > 0.0 {
            assert_eq!(out, 0.0);
        } else {
            assert!(out >= 0.0);
        }
        // R_B cannot move when Δ_B = 0
        assert_eq!(update_rb(&obj, &params, 0.0, &FitConfig::default()).unwrap(), params.rb);
    }

    #[test]
    fn nelder_mead_quadratic() {
        let mut f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2);
        let (x, fx, _, converged) = nelder_mead(&mut f, &[0.0, 0.0], 0.5, 2000, 1e-14);
        assert!(converged);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
        assert!(fx < 1e-10);
    }

    fn simulated(params: &MaternParams, n: usize, seed: u64) -> SpatialDataset {
        let locs = sample_locations_uniform(n, &Domain::unit_square(), seed).unwrap();
        simulate_field(params, &locs, seed + 1, BlockOrdering::ByVariable).unwrap()
    }

    #[test]
    fn marginal_fit_recovers_variance() {
        let truth = MaternParams::independent(0.5, &[1.0], &[5.0], &[0.0]).unwrap();
        let data = simulated(&truth, 300, 3);
        let m = fit_marginals(&data, &FitConfig::default()).unwrap();
        assert!(m[0].sigma2 > 0.5 && m[0].sigma2 < 2.0, "{:?}", m[0]);
        assert!(m[0].alpha > 0.0);
        assert_eq!(m[0].tau2, 0.0);
    }

    #[test]
    fn white_noise_goes_to_nugget() {
        let data = simulated(&MaternParams::independent(0.5, &[1e-6], &[5.0], &[1.0]).unwrap(), 200, 5);
        let config = FitConfig {
            estimate_nugget: true,
            ..FitConfig::default()
        };
        let m = fit_marginals(&data, &config).unwrap();
        let total = m[0].sigma2 + m[0].tau2;
        assert!((total - 1.0).abs() < 0.3, "{:?}", m[0]);
        assert!(m[0].tau2 > m[0].sigma2 || m[0].alpha > 100.0, "{:?}", m[0]);
    }

    #[test]
    fn univariate_fit_is_marginal_fit() {
        let truth = MaternParams::independent(0.5, &[1.5], &[4.0], &[0.0]).unwrap();
        let data = simulated(&truth, 100, 8);
        let r = fit(&data, 0.3, &FitConfig::default(), None).unwrap();
        let m = r.marginals.as_ref().unwrap();
        assert_eq!(r.params.sigma2[0], m[0].sigma2);
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let rho = array![[1.0, 0.6], [0.6, 1.0]];
        let truth = MaternParams::from_correlation(0.5, &[1.0, 1.0], &[5.0, 8.0], &[0.0, 0.0], &rho, 10.0, array![[1.0, 0.5], [0.5, 1.0]])
            .unwrap();
        let data = simulated(&truth, 80, 12);
        let config = FitConfig {
            max_iter: 30,
            ..FitConfig::default()
        };
        let a = fit(&data, 1.0, &config, None).unwrap();
        let b = fit(&data, 1.0, &config, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
        for w in a.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(a.params.l[[1, 0]] > 0.0);
        assert!(constraint_violation(&a.params) < 1e-10);
        let json = a.to_json().unwrap();
        assert_eq!(FitResult::from_json(&json).unwrap().params, a.params);
    }
}
