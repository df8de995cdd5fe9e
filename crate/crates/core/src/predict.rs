//! Simple and ordinary cokriging with per-target variances, over a moving
//! neighborhood and the variables coupled to the target through `Ψ`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use faer::Mat;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::matern::{MaternKernel, MaternParams};
use crate::simulate::Domain;
use crate::spatial_data::{BruteForceIndex, NeighborIndex, SpatialDataset};

/// Default moving-neighborhood size.
pub const DEFAULT_NEIGHBORS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KrigingMode {
    /// Known zero mean.
    Simple,
    /// Unknown constant mean per variable, one unbiasedness constraint each.
    #[default]
    Ordinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighborhood {
    All,
    Nearest(usize),
}

impl Default for Neighborhood {
    fn default() -> Self {
        Neighborhood::Nearest(DEFAULT_NEIGHBORS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivePolicy {
    All,
    /// The target and the variables `j` with `Ψ_tj ≠ 0`.
    #[default]
    SparsityReduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    /// `m × d` target locations.
    pub targets: Array2<f64>,
    /// Variables to predict; all when empty.
    pub variables: Vec<usize>,
    pub mode: KrigingMode,
    pub neighborhood: Neighborhood,
    pub policy: ActivePolicy,
    /// Include the nugget on both sides so data are interpolated exactly;
    /// otherwise the target is the noise-free signal.
    pub exact: bool,
}

impl PredictionRequest {
    pub fn new(targets: Array2<f64>) -> Self {
        Self {
            targets,
            variables: Vec::new(),
            mode: KrigingMode::default(),
            neighborhood: Neighborhood::default(),
            policy: ActivePolicy::default(),
            exact: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CokrigingResult {
    pub locations: Array2<f64>,
    /// Predicted variable indices, one column each below.
    pub variables: Vec<usize>,
    pub names: Vec<String>,
    pub predictions: Array2<f64>,
    pub variances: Array2<f64>,
    /// Active variable set used for each predicted variable.
    pub active: Vec<Vec<usize>>,
    pub seconds: f64,
}

impl CokrigingResult {
    /// Long format: coordinates, `variable`, `prediction`, `variance`.
    pub fn write_csv_to<W: Write>(&self, out: &mut W, coord_names: &[String]) -> std::io::Result<()> {
        let mut header: Vec<String> = coord_names.to_vec();
        header.extend(["variable", "prediction", "variance"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for (c, name) in self.names.iter().enumerate() {
            for r in 0..self.locations.nrows() {
                let coords: Vec<String> = self.locations.row(r).iter().map(|v| format!("{v}")).collect();
                writeln!(
                    out,
                    "{},{},{},{}",
                    coords.join(","),
                    name,
                    self.predictions[[r, c]],
                    self.variances[[r, c]]
                )?;
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path, coord_names: &[String]) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv_to(&mut file, coord_names)
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Variables that enter the prediction of `target`, sorted.
pub fn active_variable_set(params: &MaternParams, target: usize, policy: ActivePolicy) -> Vec<usize> {
    let p = params.p();
    match policy {
        ActivePolicy::All => (0..p).collect(),
        ActivePolicy::SparsityReduced => {
            let psi = params.psi();
            (0..p).filter(|&j| j == target || psi[[target, j]] != 0.0).collect()
        }
    }
}

/// Covariance evaluator with `σ_ij`, `α_ij` precomputed.
struct CovarianceTable {
    kernel: MaternKernel,
    sigma: Array2<f64>,
    range: Array2<f64>,
    tau2: Array1<f64>,
}

impl CovarianceTable {
    fn new(params: &MaternParams) -> Result<Self> {
        let (sigma, range) = params.scale_and_range();
        Ok(Self {
            kernel: params.kernel()?,
            sigma,
            range,
            tau2: params.tau2.clone(),
        })
    }

    /// Signal covariance `σ_ij M(h; α_ij)` (no nugget).
    fn signal(&self, h: f64, i: usize, j: usize) -> f64 {
        let s = self.sigma[[i, j]];
        if s == 0.0 {
            0.0
        } else {
            s * self.kernel.correlation(h, self.range[[i, j]])
        }
    }
}

pub fn cokrige(train: &SpatialDataset, params: &MaternParams, request: &PredictionRequest) -> Result<CokrigingResult> {
    let started = Instant::now();
    params.validate()?;
    let p = params.p();
    if p != train.p() {
        return Err(Error::input(format!("parameters have p = {p}, training data has p = {}", train.p())));
    }
    if request.targets.ncols() != train.d() {
        return Err(Error::input(format!(
            "targets have {} coordinates, training data has {}",
            request.targets.ncols(),
            train.d()
        )));
    }
    let variables: Vec<usize> = if request.variables.is_empty() {
        (0..p).collect()
    } else {
        request.variables.clone()
    };
    if let Some(&bad) = variables.iter().find(|&&t| t >= p) {
        return Err(Error::input(format!("target variable {bad} out of range (p = {p})")));
    }
    let n = train.n();
    let k = match request.neighborhood {
        Neighborhood::All => n,
        Neighborhood::Nearest(0) => return Err(Error::input("neighborhood size must be at least 1")),
        Neighborhood::Nearest(k) => k.min(n),
    };
    let cov = CovarianceTable::new(params)?;
    let active: Vec<Vec<usize>> = variables.iter().map(|&t| active_variable_set(params, t, request.policy)).collect();
    // targets sharing an active set share one factorization per location
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (c, a) in active.iter().enumerate() {
        groups.entry(a.clone()).or_default().push(c);
    }
    let m = request.targets.nrows();
    let mut predictions = Array2::<f64>::zeros((m, variables.len()));
    let mut variances = Array2::<f64>::zeros((m, variables.len()));
    let index = BruteForceIndex::new(train.locations());
    let values = train.values();
    let loc = train.locations();
    for r in 0..m {
        let target = request.targets.row(r);
        let neigh = index.nearest(target, k, None);
        for (vars, cols) in &groups {
            let q = vars.len();
            let size = q * neigh.len();
            // data order: variable-major over the neighborhood
            let sigma_nn = Mat::<f64>::from_fn(size, size, |x, y| {
                let (a, u) = (x / neigh.len(), x % neigh.len());
                let (b, w) = (y / neigh.len(), y % neigh.len());
                let h = if u == w {
                    0.0
                } else {
                    crate::spatial_data::distance(loc.row(neigh[u].0), loc.row(neigh[w].0))
                };
                let mut c = cov.signal(h, vars[a], vars[b]);
                if x == y {
                    c += cov.tau2[vars[a]];
                }
                c
            });
            let chol = Cholesky::new(sigma_nn.as_ref(), "cokriging matrix").map_err(|_| {
                Error::Singular(format!(
                    "cokriging matrix at target {r} ({:?}) with {} neighbors is not positive definite; \
                     check for duplicate training locations",
                    target.to_vec(),
                    neigh.len()
                ))
            })?;
            let z: Vec<f64> = (0..size).map(|x| values[[neigh[x % neigh.len()].0, vars[x / neigh.len()]]]).collect();
            let indicator = Mat::<f64>::from_fn(size, q, |x, a| if x / neigh.len() == a { 1.0 } else { 0.0 });
            let (sinv_f, schur) = match request.mode {
                KrigingMode::Simple => (None, None),
                KrigingMode::Ordinary => {
                    let sf = chol.solve_mat(indicator.as_ref());
                    let s = Mat::<f64>::from_fn(q, q, |a, b| (0..size).map(|x| indicator[(x, a)] * sf[(x, b)]).sum());
                    let sc = Cholesky::new(s.as_ref(), "ordinary cokriging constraints").map_err(|_| {
                        Error::Singular(format!("unbiasedness constraints are degenerate at target {r}"))
                    })?;
                    (Some(sf), Some(sc))
                }
            };
            for &c in cols {
                let t = variables[c];
                let c0: Vec<f64> = (0..size)
                    .map(|x| {
                        let (a, u) = (x / neigh.len(), x % neigh.len());
                        let h = neigh[u].1;
                        let mut v = cov.signal(h, t, vars[a]);
                        if request.exact && h == 0.0 && vars[a] == t {
                            v += cov.tau2[t];
                        }
                        v
                    })
                    .collect();
                let c00 = cov.sigma[[t, t]] + if request.exact { cov.tau2[t] } else { 0.0 };
                let mut w = chol.solve_vec(&c0);
                let mut var = c00 - dot(&w, &c0);
                if let (Some(sf), Some(sc)) = (&sinv_f, &schur) {
                    // m = S⁻¹(Fᵀ Σ⁻¹ c0 - f0), w = Σ⁻¹c0 - Σ⁻¹F m
                    let ta = vars.binary_search(&t).expect("target is active");
                    let rhs: Vec<f64> = (0..q)
                        .map(|a| (0..size).map(|x| indicator[(x, a)] * w[x]).sum::<f64>() - if a == ta { 1.0 } else { 0.0 })
                        .collect();
                    let mult = sc.solve_vec(&rhs);
                    for (x, wx) in w.iter_mut().enumerate() {
                        *wx -= (0..q).map(|a| sf[(x, a)] * mult[a]).sum::<f64>();
                    }
                    var = c00 - dot(&w, &c0) - mult[ta];
                }
                predictions[[r, c]] = dot(&w, &z);
                variances[[r, c]] = var.max(0.0);
            }
        }
    }
    Ok(CokrigingResult {
        locations: request.targets.clone(),
        names: variables.iter().map(|&t| train.names()[t].clone()).collect(),
        variables,
        predictions,
        variances,
        active,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub variable: usize,
    pub name: String,
    pub rmse: f64,
    /// Mean prediction standard deviation.
    pub mean_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub scores: Vec<VariableScore>,
    /// Square root of the summed squared per-variable RMSEs.
    pub total_rmse: f64,
}

impl PredictionSummary {
    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "variable,rmse,mean_sd")?;
        for s in &self.scores {
            writeln!(out, "{},{},{}", s.name, s.rmse, s.mean_sd)?;
        }
        Ok(())
    }
}

/// RMSE of each predicted variable against `truth` observed at the same locations.
pub fn evaluate_predictions(result: &CokrigingResult, truth: &SpatialDataset) -> Result<PredictionSummary> {
    let m = result.locations.nrows();
    if truth.n() != m || truth.d() != result.locations.ncols() {
        return Err(Error::input(format!(
            "truth has {} locations in {} dimensions, predictions have {m} in {}",
            truth.n(),
            truth.d(),
            result.locations.ncols()
        )));
    }
    for r in 0..m {
        let off = crate::spatial_data::distance(truth.locations().row(r), result.locations.row(r));
        if off > 1e-9 {
            return Err(Error::input(format!("truth location {r} does not match the prediction location")));
        }
    }
    let mut scores = Vec::new();
    for (c, &t) in result.variables.iter().enumerate() {
        if t >= truth.p() {
            return Err(Error::input(format!("truth has no variable {t}")));
        }
        let se: f64 = (0..m).map(|r| (result.predictions[[r, c]] - truth.values()[[r, t]]).powi(2)).sum();
        let sd: f64 = (0..m).map(|r| result.variances[[r, c]].sqrt()).sum();
        scores.push(VariableScore {
            variable: t,
            name: result.names[c].clone(),
            rmse: (se / m as f64).sqrt(),
            mean_sd: sd / m as f64,
        });
    }
    let total_rmse = scores.iter().map(|s| s.rmse * s.rmse).sum::<f64>().sqrt();
    Ok(PredictionSummary { scores, total_rmse })
}

/// Regular grid with `counts[k]` equispaced points (endpoints included) along axis `k`;
/// the first axis varies fastest.
pub fn regular_grid(domain: &Domain, counts: &[usize]) -> Result<Array2<f64>> {
    domain.validate()?;
    let d = domain.dim();
    if counts.len() != d || counts.contains(&0) {
        return Err(Error::input(format!("grid needs {d} positive counts")));
    }
    let total: usize = counts.iter().product();
    let mut out = Array2::zeros((total, d));
    for r in 0..total {
        let mut rem = r;
        for k in 0..d {
            let i = rem % counts[k];
            rem /= counts[k];
            let frac = if counts[k] == 1 { 0.5 } else { i as f64 / (counts[k] - 1) as f64 };
            out[[r, k]] = domain.lower[k] + frac * (domain.upper[k] - domain.lower[k]);
        }
    }
    Ok(out)
}
