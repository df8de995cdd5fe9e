//! Full Gaussian log-likelihood, pairwise composite log-likelihood and the
//! LASSO-penalized objective, with analytic gradients.
//!
//! Both gradients use `∂ℓ/∂θ = ½ tr(W ∂Σ/∂θ)` with `W = Σ⁻¹rrᵀΣ⁻¹ - Σ⁻¹`,
//! contracted block by block against the Matérn correlation blocks.

use std::f64::consts::PI;

use faer::Mat;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::matern::{
    assemble_covariance, contract_blocks, contract_outer, pair_covariance, BlockGradient, BlockOrdering,
    Contractions, MaternKernel, MaternParams,
};
use crate::spatial_data::{distance, nearest_neighbors, pairwise_distances, NeighborGraph, SpatialDataset};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Jitter allowed when factorizing `Σ` inside the objective.
const OBJECTIVE_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum ObjectiveKind {
    FullLikelihood,
    CompositeLikelihood { v: usize },
}

impl ObjectiveKind {
    pub fn is_composite(&self) -> bool {
        matches!(self, ObjectiveKind::CompositeLikelihood { .. })
    }
}

/// Mean of each variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanModel {
    #[default]
    Zero,
    /// Unknown constant per variable: profiled out by GLS under the full
    /// likelihood, removed by the sample mean under the composite likelihood.
    Constant,
}

/// Data-bound log-objective ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    data: &'a SpatialDataset,
    kind: ObjectiveKind,
    ordering: BlockOrdering,
    mean: MeanModel,
    inner: Inner,
}

#[derive(Debug, Clone)]
enum Inner {
    Full {
        dist: Array2<f64>,
    },
    Composite {
        pairs: Vec<(usize, usize, f64)>,
        centered: Array2<f64>,
    },
}

/// Log-objective value at some parameters, with the factorizations needed to
/// compute the gradient there without refactorizing.
pub struct Evaluation {
    pub loglik: f64,
    params: MaternParams,
    factors: Vec<ComponentFactor>,
}

struct ComponentFactor {
    vars: Vec<usize>,
    chol: Cholesky,
    residual: Vec<f64>,
}

impl Evaluation {
    /// Largest diagonal jitter used by any factorization.
    pub fn jitter(&self) -> f64 {
        self.factors.iter().map(|f| f.chol.jitter).fold(0.0, f64::max)
    }

    pub fn params(&self) -> &MaternParams {
        &self.params
    }
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a SpatialDataset, kind: ObjectiveKind, ordering: BlockOrdering, mean: MeanModel) -> Result<Self> {
        match kind {
            ObjectiveKind::FullLikelihood => Ok(Self {
                data,
                kind,
                ordering,
                mean,
                inner: Inner::Full {
                    dist: pairwise_distances(data.locations()),
                },
            }),
            ObjectiveKind::CompositeLikelihood { v } => {
                let graph = nearest_neighbors(data.locations(), v)?;
                Self::composite_with_pairs(data, &graph.pairs(), mean).map(|mut o| {
                    o.kind = kind;
                    o.ordering = ordering;
                    o
                })
            }
        }
    }

    pub fn full(data: &'a SpatialDataset) -> Self {
        Self::new(data, ObjectiveKind::FullLikelihood, BlockOrdering::ByVariable, MeanModel::Zero)
            .expect("full likelihood construction cannot fail")
    }

    pub fn composite(data: &'a SpatialDataset, graph: &NeighborGraph) -> Result<Self> {
        if graph.n() != data.n() {
            return Err(Error::input(format!(
                "neighbor graph has {} locations, dataset has {}",
                graph.n(),
                data.n()
            )));
        }
        let mut o = Self::composite_with_pairs(data, &graph.pairs(), MeanModel::Zero)?;
        o.kind = ObjectiveKind::CompositeLikelihood { v: graph.v };
        Ok(o)
    }

    /// Composite likelihood over an explicit list of unordered location pairs.
    pub fn composite_with_pairs(data: &'a SpatialDataset, pairs: &[(usize, usize)], mean: MeanModel) -> Result<Self> {
        let loc = data.locations();
        let mut list = Vec::with_capacity(pairs.len());
        for &(k, l) in pairs {
            if k >= data.n() || l >= data.n() || k == l {
                return Err(Error::input(format!("invalid location pair ({k}, {l})")));
            }
            list.push((k, l, distance(loc.row(k), loc.row(l))));
        }
        let mut centered = data.values().clone();
        if mean == MeanModel::Constant {
            for mut col in centered.columns_mut() {
                let m = col.mean().unwrap_or(0.0);
                col.mapv_inplace(|v| v - m);
            }
        }
        Ok(Self {
            data,
            kind: ObjectiveKind::CompositeLikelihood { v: 0 },
            ordering: BlockOrdering::ByLocation,
            mean,
            inner: Inner::Composite { pairs: list, centered },
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn data(&self) -> &SpatialDataset {
        self.data
    }

    pub fn ordering(&self) -> BlockOrdering {
        self.ordering
    }

    /// `(k, l, h_kl)` for the composite likelihood; empty for the full likelihood.
    pub fn pairs(&self) -> &[(usize, usize, f64)] {
        match &self.inner {
            Inner::Full { .. } => &[],
            Inner::Composite { pairs, .. } => pairs,
        }
    }

    fn check(&self, params: &MaternParams) -> Result<()> {
        if params.p() != self.data.p() {
            return Err(Error::input(format!(
                "parameters have p = {}, data has p = {}",
                params.p(),
                self.data.p()
            )));
        }
        Ok(())
    }

    /// Log-likelihood (full) or composite log-likelihood.
    pub fn loglik(&self, params: &MaternParams) -> Result<f64> {
        Ok(self.evaluate(params)?.loglik)
    }

    pub fn evaluate(&self, params: &MaternParams) -> Result<Evaluation> {
        self.check(params)?;
        match &self.inner {
            Inner::Full { dist } => self.full_evaluate(params, dist),
            Inner::Composite { pairs, centered } => {
                let kernel = params.kernel()?;
                let (sigma, range) = params.scale_and_range();
                let p = params.p();
                let mut total = 0.0;
                for &(k, l, h) in pairs {
                    let q = pair_covariance(params, &kernel, &sigma, &range, h);
                    let z = pair_vector(centered, k, l);
                    let ch = SmallCholesky::new(&q).ok_or_else(|| {
                        Error::NotPositiveDefinite(format!("pair covariance for locations ({k}, {l})"))
                    })?;
                    total += -(p as f64) * LN_2PI - 0.5 * ch.log_det() - 0.5 * ch.quad_form(&z);
                }
                Ok(Evaluation {
                    loglik: total,
                    params: params.clone(),
                    factors: Vec::new(),
                })
            }
        }
    }

    fn full_evaluate(&self, params: &MaternParams, dist: &Array2<f64>) -> Result<Evaluation> {
        let n = self.data.n();
        let mut total = 0.0;
        let mut factors = Vec::new();
        for vars in params.psi_components() {
            let q = vars.len();
            let sigma = assemble_covariance(params, dist, &vars, self.ordering)?;
            let chol = Cholesky::with_jitter(&sigma, OBJECTIVE_JITTER, "covariance matrix")?;
            let mut z = vec![0.0; n * q];
            for (a, &i) in vars.iter().enumerate() {
                for k in 0..n {
                    z[self.ordering.index(a, k, n, q)] = self.data.values()[[k, i]];
                }
            }
            if self.mean == MeanModel::Constant {
                z = gls_residual(&chol, &z, n, q, self.ordering)?;
            }
            total += -0.5 * (n * q) as f64 * (2.0 * PI).ln() - 0.5 * chol.log_det() - 0.5 * chol.quad_form(&z);
            factors.push(ComponentFactor {
                vars,
                chol,
                residual: z,
            });
        }
        Ok(Evaluation {
            loglik: total,
            params: params.clone(),
            factors,
        })
    }

    /// Gradient of the log-objective.
    pub fn gradient(&self, params: &MaternParams) -> Result<BlockGradient> {
        let eval = self.evaluate(params)?;
        self.gradient_at(&eval)
    }

    /// Gradient of the log-objective at the parameters of `eval`.
    pub fn gradient_at(&self, eval: &Evaluation) -> Result<BlockGradient> {
        let c = self.contractions_at(eval)?;
        Ok(BlockGradient::from_contractions(&eval.params, &c))
    }

    fn contractions_at(&self, eval: &Evaluation) -> Result<Contractions> {
        let params = &eval.params;
        let kernel = params.kernel()?;
        let (_, range) = params.scale_and_range();
        let p = params.p();
        match &self.inner {
            Inner::Full { dist } => {
                let n = self.data.n();
                let mut c = Contractions::zeros(p);
                // Σ⁻¹ r per variable, for the cross-component terms
                let mut z1_var: Vec<Vec<f64>> = vec![Vec::new(); p];
                let mut comp_of = vec![0usize; p];
                for (ci, f) in eval.factors.iter().enumerate() {
                    let q = f.vars.len();
                    let inv = f.chol.inverse();
                    let z1 = f.chol.solve_vec(&f.residual);
                    contract_blocks(
                        &kernel,
                        &range,
                        dist,
                        &f.vars,
                        self.ordering,
                        |r, s| z1[r] * z1[s] - inv[(r, s)],
                        &mut c,
                    );
                    for (a, &i) in f.vars.iter().enumerate() {
                        comp_of[i] = ci;
                        z1_var[i] = (0..n).map(|k| z1[self.ordering.index(a, k, n, q)]).collect();
                    }
                }
                for i in 0..p {
                    for j in (i + 1)..p {
                        if comp_of[i] != comp_of[j] {
                            let (g, d) = contract_outer(&kernel, range[[i, j]], dist, &z1_var[i], &z1_var[j]);
                            // Σ⁻¹ is block diagonal, so this block of W is the outer product
                            c.g[[i, j]] = g;
                            c.g[[j, i]] = g;
                            c.d[[i, j]] = d;
                            c.d[[j, i]] = d;
                        }
                    }
                }
                Ok(c)
            }
            Inner::Composite { pairs, centered } => {
                let (sigma, _) = params.scale_and_range();
                let mut c = Contractions::zeros(p);
                for &(k, l, h) in pairs {
                    let q = pair_covariance(params, &kernel, &sigma, &range, h);
                    let z = pair_vector(centered, k, l);
                    let term = pair_contractions(&kernel, &range, &q, &z, h).ok_or_else(|| {
                        Error::NotPositiveDefinite(format!("pair covariance for locations ({k}, {l})"))
                    })?;
                    c.add(&term);
                }
                Ok(c)
            }
        }
    }

    /// Log-objective of the single pair `(k, l)` and its contractions.
    pub(crate) fn pair_term(&self, params: &MaternParams, k: usize, l: usize, h: f64) -> Result<Contractions> {
        let Inner::Composite { centered, .. } = &self.inner else {
            return Err(Error::input("pair terms exist only for the composite likelihood"));
        };
        let kernel = params.kernel()?;
        let (sigma, range) = params.scale_and_range();
        let q = pair_covariance(params, &kernel, &sigma, &range, h);
        pair_contractions(&kernel, &range, &q, &pair_vector(centered, k, l), h)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("pair covariance for locations ({k}, {l})")))
    }

    /// `f(θ) + λ Σ_{i>j} |L_ij|` with `f` the negative log-objective.
    pub fn penalized(&self, params: &MaternParams, lambda: f64) -> Result<f64> {
        if !(lambda >= 0.0) {
            return Err(Error::input(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(-self.loglik(params)? + lambda * l1_penalty(&params.l))
    }
}

/// Residual `z - X μ̂` of the per-variable constant mean fitted by GLS.
fn gls_residual(chol: &Cholesky, z: &[f64], n: usize, q: usize, ordering: BlockOrdering) -> Result<Vec<f64>> {
    let x = Mat::from_fn(n * q, q, |r, a| {
        let var = match ordering {
            BlockOrdering::ByVariable => r / n,
            BlockOrdering::ByLocation => r % q,
        };
        if var == a {
            1.0
        } else {
            0.0
        }
    });
    let sx = chol.solve_mat(x.as_ref());
    let xtsx = Mat::from_fn(q, q, |a, b| (0..n * q).map(|r| x[(r, a)] * sx[(r, b)]).sum::<f64>());
    let xtsz: Vec<f64> = (0..q).map(|a| (0..n * q).map(|r| sx[(r, a)] * z[r]).sum()).collect();
    let small = Cholesky::new(xtsx.as_ref(), "GLS normal equations")?;
    let mu = small.solve_vec(&xtsz);
    Ok((0..n * q)
        .map(|r| {
            let a = (0..q).find(|&a| x[(r, a)] == 1.0).unwrap_or(0);
            z[r] - mu[a]
        })
        .collect())
}

fn pair_vector(values: &Array2<f64>, k: usize, l: usize) -> Vec<f64> {
    values.row(k).iter().chain(values.row(l).iter()).copied().collect()
}

/// Contractions of `W = Q⁻¹zzᵀQ⁻¹ - Q⁻¹` for one pair at distance `h`.
fn pair_contractions(
    kernel: &MaternKernel,
    range: &Array2<f64>,
    q: &Array2<f64>,
    z: &[f64],
    h: f64,
) -> Option<Contractions> {
    let ch = SmallCholesky::new(q)?;
    let inv = ch.inverse();
    let z1 = ch.solve(z);
    let p = range.nrows();
    let w = |r: usize, s: usize| z1[r] * z1[s] - inv[[r, s]];
    let mut c = Contractions::zeros(p);
    for i in 0..p {
        for j in i..p {
            let (m, dm) = kernel.eval(h, range[[i, j]]);
            let same = w(i, j) + w(p + i, p + j);
            let cross = w(i, p + j) + w(p + i, j);
            let g = same + cross * m;
            let d = cross * dm;
            c.g[[i, j]] = g;
            c.g[[j, i]] = g;
            c.d[[i, j]] = d;
            c.d[[j, i]] = d;
        }
        c.w_diag[i] = w(i, i) + w(p + i, p + i);
    }
    Some(c)
}

/// `Σ_{i>j} |L_ij|`.
pub fn l1_penalty(l: &Array2<f64>) -> f64 {
    let p = l.nrows();
    let mut s = 0.0;
    for i in 0..p {
        for j in 0..i {
            s += l[[i, j]].abs();
        }
    }
    s
}

pub fn full_loglik(params: &MaternParams, data: &SpatialDataset, ordering: BlockOrdering) -> Result<f64> {
    Objective::new(data, ObjectiveKind::FullLikelihood, ordering, MeanModel::Zero)?.loglik(params)
}

pub fn full_loglik_grad(params: &MaternParams, data: &SpatialDataset, ordering: BlockOrdering) -> Result<BlockGradient> {
    Objective::new(data, ObjectiveKind::FullLikelihood, ordering, MeanModel::Zero)?.gradient(params)
}

pub fn composite_loglik(params: &MaternParams, data: &SpatialDataset, graph: &NeighborGraph) -> Result<f64> {
    Objective::composite(data, graph)?.loglik(params)
}

pub fn composite_loglik_grad(params: &MaternParams, data: &SpatialDataset, graph: &NeighborGraph) -> Result<BlockGradient> {
    Objective::composite(data, graph)?.gradient(params)
}

pub fn penalized_objective(params: &MaternParams, lambda: f64, objective: &Objective<'_>) -> Result<f64> {
    objective.penalized(params, lambda)
}

/// Cholesky factorization for the small `2p × 2p` pair matrices.
pub(crate) struct SmallCholesky {
    l: Array2<f64>,
}

impl SmallCholesky {
    pub(crate) fn new(a: &Array2<f64>) -> Option<Self> {
        let n = a.nrows();
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > 0.0) {
                return None;
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / djj;
            }
        }
        Some(Self { l })
    }

    pub(crate) fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[[i, k]] * y[k];
            }
            y[i] = s / self.l[[i, i]];
        }
        y
    }

    pub(crate) fn quad_form(&self, b: &[f64]) -> f64 {
        self.forward(b).iter().map(|v| v * v).sum()
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = self.forward(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    pub(crate) fn inverse(&self) -> Array2<f64> {
        let n = self.l.nrows();
        let mut inv = Array2::zeros((n, n));
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[[r, c]] = col[r];
            }
        }
        inv
    }
}

/// Deterministic summary of a gradient for logging.
pub fn gradient_norm(g: &BlockGradient) -> f64 {
    let s: f64 = g.dl.iter().chain(g.d_rb.iter()).map(|v| v * v).sum::<f64>() + g.d_delta_b * g.d_delta_b;
    s.sqrt()
}
