//! Parsimonious multivariate Matérn model with a common smoothness `ν`.
//!
//! The cross-covariance between variables `i` and `j` at lag `h` is
//! `σ_ij M(h; α_ij, ν)` with
//!
//! * `α_ij² = (α_i² + α_j²)/2 + Δ_B (1 - R_B,ij)`,
//! * `σ_ij = Ψ_ij α_i^ν α_j^ν / α_ij^{2ν}`, `Ψ = L Lᵀ`, `Ψ_ii = σ_i²`,
//!
//! plus a nugget `τ_i²` on the diagonal of each variable's own block.

use faer::Mat;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::spatial_data::pairwise_distances;
use crate::special::{bessel_k_unchecked, gamma, ln_gamma};

/// Relative tolerance for `(L Lᵀ)_ii = σ_i²`.
pub const DIAGONAL_TOLERANCE: f64 = 1e-10;
/// Minimum eigenvalue accepted for `R_B`.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// `L_ii ≥ DIAGONAL_FLOOR · σ_i`.
pub const DIAGONAL_FLOOR: f64 = 1e-8;

/// Arguments `√(2ν)αh` above this give a correlation that underflows to 0.
const UNDERFLOW_ARG: f64 = 705.0;
const TINY_ARG: f64 = 1e-12;

/// Layout of the stacked `np` observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOrdering {
    /// All `n` values of variable 0, then variable 1, ... (index `i·n + k`).
    #[default]
    ByVariable,
    /// All `p` variables at location 0, then location 1, ... (index `k·p + i`).
    ByLocation,
}

impl BlockOrdering {
    #[inline]
    pub fn index(self, var: usize, loc: usize, n: usize, p: usize) -> usize {
        match self {
            BlockOrdering::ByVariable => var * n + loc,
            BlockOrdering::ByLocation => loc * p + var,
        }
    }

    /// Maps a stacked index in this ordering to the index of the same entry in `other`.
    pub fn permute(self, other: BlockOrdering, idx: usize, n: usize, p: usize) -> usize {
        let (var, loc) = match self {
            BlockOrdering::ByVariable => (idx / n, idx % n),
            BlockOrdering::ByLocation => (idx % p, idx / p),
        };
        other.index(var, loc, n, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum KernelForm {
    Exponential,
    ThreeHalves,
    FiveHalves,
    General { log_norm: f64 },
}

/// Matérn correlation `M(h; α, ν)` for a fixed smoothness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternKernel {
    nu: f64,
    scale: f64,
    form: KernelForm,
}

impl MaternKernel {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::params("nu", format!("must be positive and finite, got {nu}")));
        }
        let form = if nu == 0.5 {
            KernelForm::Exponential
        } else if nu == 1.5 {
            KernelForm::ThreeHalves
        } else if nu == 2.5 {
            KernelForm::FiveHalves
        } else {
            KernelForm::General {
                log_norm: (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu),
            }
        };
        Ok(Self {
            nu,
            scale: (2.0 * nu).sqrt(),
            form,
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// `M(h; α)`; exactly 1 at `h = 0`.
    #[inline]
    pub fn correlation(&self, h: f64, alpha: f64) -> f64 {
        self.eval(h, alpha).0
    }

    /// `(M, ∂M/∂α)` at lag `h`.
    #[inline]
    pub fn eval(&self, h: f64, alpha: f64) -> (f64, f64) {
        if h == 0.0 {
            return (1.0, 0.0);
        }
        let u = self.scale * alpha * h;
        if u < TINY_ARG {
            return (1.0, 0.0);
        }
        if u > UNDERFLOW_ARG {
            return (0.0, 0.0);
        }
        match self.form {
            KernelForm::Exponential => {
                let e = (-u).exp();
                (e, -e * u / alpha)
            }
            KernelForm::ThreeHalves => {
                let e = (-u).exp();
                ((1.0 + u) * e, -u * u * e / alpha)
            }
            KernelForm::FiveHalves => {
                let e = (-u).exp();
                (
                    (1.0 + u + u * u / 3.0) * e,
                    -(u * u / 3.0) * (1.0 + u) * e / alpha,
                )
            }
            KernelForm::General { log_norm } => {
                let norm = log_norm.exp();
                let upow = u.powf(self.nu);
                let m = norm * upow * bessel_k_unchecked(self.nu, u);
                // d/du [u^ν K_ν(u)] = -u^ν K_{ν-1}(u)
                let dm = -norm * upow * u * bessel_k_unchecked((self.nu - 1.0).abs(), u) / alpha;
                (m.min(1.0), dm)
            }
        }
    }
}

/// `(2^{1-ν}/Γ(ν)) (√(2ν) α h)^ν K_ν(√(2ν) α h)`.
pub fn matern_correlation(h: f64, alpha: f64, nu: f64) -> Result<f64> {
    if !(h >= 0.0) || !(alpha > 0.0) {
        return Err(Error::input(format!(
            "matern_correlation needs h >= 0 and alpha > 0 (h = {h}, alpha = {alpha})"
        )));
    }
    Ok(MaternKernel::new(nu)?.correlation(h, alpha))
}

/// Complete parameter vector of the multivariate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsDocument", try_from = "ParamsDocument")]
pub struct MaternParams {
    pub nu: f64,
    pub sigma2: Array1<f64>,
    pub alpha: Array1<f64>,
    pub tau2: Array1<f64>,
    /// Lower-triangular factor of `Ψ`.
    pub l: Array2<f64>,
    pub delta_b: f64,
    pub rb: Array2<f64>,
}

impl MaternParams {
    /// Independent variables: diagonal `L`, `Δ_B = 0`, `R_B = I`.
    pub fn independent(nu: f64, sigma2: &[f64], alpha: &[f64], tau2: &[f64]) -> Result<Self> {
        let p = sigma2.len();
        let params = Self {
            nu,
            sigma2: Array1::from(sigma2.to_vec()),
            alpha: Array1::from(alpha.to_vec()),
            tau2: Array1::from(tau2.to_vec()),
            l: Array2::from_diag(&Array1::from_iter(sigma2.iter().map(|s| s.max(0.0).sqrt()))),
            delta_b: 0.0,
            rb: Array2::eye(p),
        };
        params.validate()?;
        Ok(params)
    }

    /// Builds `L` from a correlation matrix `ρ` so that `Ψ_ij = σ_i σ_j ρ_ij`.
    pub fn from_correlation(
        nu: f64,
        sigma2: &[f64],
        alpha: &[f64],
        tau2: &[f64],
        rho: &Array2<f64>,
        delta_b: f64,
        rb: Array2<f64>,
    ) -> Result<Self> {
        let p = sigma2.len();
        if rho.dim() != (p, p) {
            return Err(Error::params("rho", format!("expected {p}x{p}")));
        }
        if sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::params("sigma2", "entries must be positive"));
        }
        let sd: Vec<f64> = sigma2.iter().map(|s| s.sqrt()).collect();
        let psi = Array2::from_shape_fn((p, p), |(i, j)| sd[i] * sd[j] * rho[[i, j]]);
        let mut l = lower_cholesky_psd(&psi)?;
        enforce_diagonal_constraint(&mut l, sigma2);
        let params = Self {
            nu,
            sigma2: Array1::from(sigma2.to_vec()),
            alpha: Array1::from(alpha.to_vec()),
            tau2: Array1::from(tau2.to_vec()),
            l,
            delta_b,
            rb,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn p(&self) -> usize {
        self.sigma2.len()
    }

    /// `Ψ = L Lᵀ`.
    pub fn psi(&self) -> Array2<f64> {
        self.l.dot(&self.l.t())
    }

    /// `ρ_ij = Ψ_ij / (σ_i σ_j)`.
    pub fn correlation(&self) -> Array2<f64> {
        let psi = self.psi();
        let p = self.p();
        Array2::from_shape_fn((p, p), |(i, j)| {
            psi[[i, j]] / (self.sigma2[i] * self.sigma2[j]).sqrt()
        })
    }

    pub fn kernel(&self) -> Result<MaternKernel> {
        MaternKernel::new(self.nu)
    }

    /// Checks every model constraint; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::params("sigma2", "at least one variable required"));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::params("nu", format!("must be positive, got {}", self.nu)));
        }
        if self.alpha.len() != p {
            return Err(Error::params("alpha", format!("length {} != p = {p}", self.alpha.len())));
        }
        if self.tau2.len() != p {
            return Err(Error::params("tau2", format!("length {} != p = {p}", self.tau2.len())));
        }
        if self.l.dim() != (p, p) {
            return Err(Error::params("L", format!("expected {p}x{p}")));
        }
        if self.rb.dim() != (p, p) {
            return Err(Error::params("RB", format!("expected {p}x{p}")));
        }
        for i in 0..p {
            if !(self.sigma2[i] > 0.0) || !self.sigma2[i].is_finite() {
                return Err(Error::params("sigma2", format!("entry {i} must be positive")));
            }
            if !(self.alpha[i] > 0.0) || !self.alpha[i].is_finite() {
                return Err(Error::params("alpha", format!("entry {i} must be positive")));
            }
            if !(self.tau2[i] >= 0.0) || !self.tau2[i].is_finite() {
                return Err(Error::params("tau2", format!("entry {i} must be nonnegative")));
            }
        }
        if self.l.iter().any(|v| !v.is_finite()) {
            return Err(Error::params("L", "non-finite entry"));
        }
        for i in 0..p {
            if !(self.l[[i, i]] > 0.0) {
                return Err(Error::params("L", format!("diagonal entry {i} must be positive")));
            }
            for j in (i + 1)..p {
                if self.l[[i, j]] != 0.0 {
                    return Err(Error::params("L", "must be lower triangular"));
                }
            }
            let row: f64 = self.l.row(i).iter().map(|v| v * v).sum();
            if (row - self.sigma2[i]).abs() > DIAGONAL_TOLERANCE * self.sigma2[i] {
                return Err(Error::params(
                    "L",
                    format!("(L Lᵀ)_{i}{i} = {row} does not match sigma2 = {}", self.sigma2[i]),
                ));
            }
        }
        if !(self.delta_b >= 0.0) || !self.delta_b.is_finite() {
            return Err(Error::params("DeltaB", format!("must be >= 0, got {}", self.delta_b)));
        }
        for i in 0..p {
            if self.rb[[i, i]] != 1.0 {
                return Err(Error::params("RB", "diagonal must be 1"));
            }
            for j in 0..p {
                let r = self.rb[[i, j]];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::params("RB", format!("entry ({i},{j}) = {r} outside [0, 1]")));
                }
                if r != self.rb[[j, i]] {
                    return Err(Error::params("RB", "must be symmetric"));
                }
            }
        }
        if p > 1 {
            let min_eig = min_eigenvalue(&self.rb)?;
            if min_eig < -PSD_TOLERANCE {
                return Err(Error::params(
                    "RB",
                    format!("not positive semidefinite (min eigenvalue {min_eig:e})"),
                ));
            }
        }
        Ok(())
    }

    /// `α_ij`.
    pub fn cross_range(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.alpha[i];
        }
        let a2 = 0.5 * (self.alpha[i].powi(2) + self.alpha[j].powi(2))
            + self.delta_b * (1.0 - self.rb[[i, j]]);
        a2.sqrt()
    }

    /// `σ_ij` given `Ψ_ij`.
    fn scale_from_psi(&self, psi_ij: f64, i: usize, j: usize) -> f64 {
        if i == j {
            return psi_ij;
        }
        let a = self.cross_range(i, j);
        // Γ(ν_ij)/√(Γ(ν_i)Γ(ν_j)) = 1 under a common ν
        psi_ij * (self.alpha[i] * self.alpha[j] / (a * a)).powf(self.nu)
    }

    /// `σ_ij`.
    pub fn cross_sigma(&self, i: usize, j: usize) -> f64 {
        let psi_ij: f64 = self.l.row(i).dot(&self.l.row(j));
        self.scale_from_psi(psi_ij, i, j)
    }

    /// `p × p` matrices `(σ_ij)` and `(α_ij)`.
    pub fn scale_and_range(&self) -> (Array2<f64>, Array2<f64>) {
        let p = self.p();
        let psi = self.psi();
        let mut sigma = Array2::zeros((p, p));
        let mut range = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                sigma[[i, j]] = self.scale_from_psi(psi[[i, j]], i, j);
                range[[i, j]] = self.cross_range(i, j);
            }
        }
        (sigma, range)
    }

    /// `C_ij(h)`, including the nugget when `i = j` and `h = 0`.
    pub fn cross_covariance(&self, h: f64, i: usize, j: usize) -> Result<f64> {
        let kernel = self.kernel()?;
        let mut c = self.cross_sigma(i, j) * kernel.correlation(h, self.cross_range(i, j));
        if i == j && h == 0.0 {
            c += self.tau2[i];
        }
        Ok(c)
    }

    /// Unconstrained coordinates of `L` (`log L_ii` on the diagonal).
    pub fn l_coords(&self) -> Array2<f64> {
        let mut out = self.l.clone();
        for i in 0..self.p() {
            out[[i, i]] = self.l[[i, i]].ln();
        }
        out
    }

    /// Variables grouped into connected components of the graph `Ψ_ij ≠ 0`.
    /// Components and their members are sorted.
    pub fn psi_components(&self) -> Vec<Vec<usize>> {
        connected_components(&self.psi())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ParamsDocument::from(self)).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDocument =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        doc.into_params()
    }
}

/// Connected components of the nonzero pattern of a symmetric matrix.
pub fn connected_components(a: &Array2<f64>) -> Vec<Vec<usize>> {
    let p = a.nrows();
    let mut label = vec![usize::MAX; p];
    let mut comps = Vec::new();
    for start in 0..p {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        label[start] = id;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in 0..p {
                if label[j] == usize::MAX && a[[i, j]] != 0.0 {
                    label[j] = id;
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// Serialized form: arrays for vectors, row-major lower triangle for `L`,
/// row-major full matrix for `RB`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsDocument {
    p: usize,
    nu: f64,
    sigma2: Vec<f64>,
    alpha: Vec<f64>,
    tau2: Vec<f64>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    l: Option<Vec<f64>>,
    /// Alternative to `L`: row-major correlation matrix of the variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<Vec<f64>>,
    #[serde(rename = "DeltaB")]
    delta_b: f64,
    #[serde(rename = "RB")]
    rb: Vec<f64>,
}

impl From<&MaternParams> for ParamsDocument {
    fn from(m: &MaternParams) -> Self {
        let p = m.p();
        let mut l = Vec::with_capacity(p * (p + 1) / 2);
        for i in 0..p {
            for j in 0..=i {
                l.push(m.l[[i, j]]);
            }
        }
        Self {
            p,
            nu: m.nu,
            sigma2: m.sigma2.to_vec(),
            alpha: m.alpha.to_vec(),
            tau2: m.tau2.to_vec(),
            l: Some(l),
            rho: None,
            delta_b: m.delta_b,
            rb: m.rb.iter().copied().collect(),
        }
    }
}

impl From<MaternParams> for ParamsDocument {
    fn from(m: MaternParams) -> Self {
        ParamsDocument::from(&m)
    }
}

impl TryFrom<ParamsDocument> for MaternParams {
    type Error = Error;

    fn try_from(doc: ParamsDocument) -> Result<Self> {
        doc.into_params()
    }
}

impl ParamsDocument {
    fn into_params(self) -> Result<MaternParams> {
        let p = self.p;
        if self.sigma2.len() != p {
            return Err(Error::params("sigma2", format!("length {} != p = {p}", self.sigma2.len())));
        }
        if self.rb.len() != p * p {
            return Err(Error::params("RB", format!("expected {} entries", p * p)));
        }
        let rb = Array2::from_shape_vec((p, p), self.rb).map_err(|e| Error::params("RB", e.to_string()))?;
        match (self.l, self.rho) {
            (Some(flat), _) => {
                if flat.len() != p * (p + 1) / 2 {
                    return Err(Error::params("L", format!("expected {} entries", p * (p + 1) / 2)));
                }
                let mut l = Array2::zeros((p, p));
                let mut it = flat.into_iter();
                for i in 0..p {
                    for j in 0..=i {
                        l[[i, j]] = it.next().unwrap_or(0.0);
                    }
                }
                let params = MaternParams {
                    nu: self.nu,
                    sigma2: Array1::from(self.sigma2),
                    alpha: Array1::from(self.alpha),
                    tau2: Array1::from(self.tau2),
                    l,
                    delta_b: self.delta_b,
                    rb,
                };
                params.validate()?;
                Ok(params)
            }
            (None, Some(rho)) => {
                if rho.len() != p * p {
                    return Err(Error::params("rho", format!("expected {} entries", p * p)));
                }
                let rho = Array2::from_shape_vec((p, p), rho)
                    .map_err(|e| Error::params("rho", e.to_string()))?;
                MaternParams::from_correlation(
                    self.nu,
                    &self.sigma2,
                    &self.alpha,
                    &self.tau2,
                    &rho,
                    self.delta_b,
                    rb,
                )
            }
            (None, None) => Err(Error::params("L", "either L or rho is required")),
        }
    }
}

/// Lower Cholesky factor of a symmetric PSD matrix; zero pivots are left at zero.
pub fn lower_cholesky_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let p = a.nrows();
    let mut l = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        let scale = a[[j, j]].abs().max(f64::MIN_POSITIVE);
        if d < -1e-8 * scale {
            return Err(Error::params("rho", "correlation matrix is not positive semidefinite"));
        }
        if d <= 1e-14 * scale {
            continue;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..p {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Rescales row `i` of `L` to norm `σ_i` and applies the diagonal floor
/// `L_ii ≥ DIAGONAL_FLOOR · σ_i` (shrinking the off-diagonal part of the row to compensate).
/// Zero entries stay zero.
pub fn enforce_diagonal_constraint(l: &mut Array2<f64>, sigma2: &[f64]) {
    let p = l.nrows();
    for i in 0..p {
        let sigma = sigma2[i].sqrt();
        let floor = DIAGONAL_FLOOR * sigma;
        let norm = l.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            for j in 0..=i {
                l[[i, j]] *= sigma / norm;
            }
        }
        if !(l[[i, i]] >= floor) {
            if norm > 0.0 && norm.is_finite() {
                log::debug!("row {i} of L hit the diagonal floor");
            } else {
                log::warn!("row {i} of L vanished; resetting to the diagonal floor");
            }
            l[[i, i]] = floor;
            let off: f64 = (0..i).map(|j| l[[i, j]] * l[[i, j]]).sum::<f64>().sqrt();
            let target = (sigma2[i] - floor * floor).max(0.0).sqrt();
            if off > 0.0 {
                for j in 0..i {
                    l[[i, j]] *= target / off;
                }
            } else {
                l[[i, i]] = sigma;
            }
        }
    }
}

/// The diagonal and full factor matrices whose Hadamard product gives `(σ_ij)`:
/// `(Γ A Ψ A Γ) ⊙ Ā ⊙ Γ̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyFactors {
    /// `1/√Γ(ν)`.
    pub gamma_diag: Array1<f64>,
    /// `α_i^ν`.
    pub a_diag: Array1<f64>,
    /// `α_ij^{-2ν}`.
    pub a_bar: Array2<f64>,
    /// `Γ(ν)`.
    pub gamma_bar: Array2<f64>,
}

impl AssemblyFactors {
    pub fn new(params: &MaternParams) -> Self {
        let p = params.p();
        let nu = params.nu;
        let g = gamma(nu);
        Self {
            gamma_diag: Array1::from_elem(p, 1.0 / g.sqrt()),
            a_diag: params.alpha.mapv(|a| a.powf(nu)),
            a_bar: Array2::from_shape_fn((p, p), |(i, j)| params.cross_range(i, j).powf(-2.0 * nu)),
            gamma_bar: Array2::from_elem((p, p), g),
        }
    }

    /// `(σ_ij)` from a given `Ψ`.
    pub fn scale_matrix(&self, psi: &Array2<f64>) -> Array2<f64> {
        let p = psi.nrows();
        Array2::from_shape_fn((p, p), |(i, j)| {
            let d_i = self.gamma_diag[i] * self.a_diag[i];
            let d_j = self.gamma_diag[j] * self.a_diag[j];
            d_i * psi[[i, j]] * d_j * self.a_bar[[i, j]] * self.gamma_bar[[i, j]]
        })
    }
}

/// `Σ(θ)` for the given locations (`np × np`).
pub fn assemble_full_covariance(
    params: &MaternParams,
    locations: &Array2<f64>,
    ordering: BlockOrdering,
) -> Result<Mat<f64>> {
    params.validate()?;
    let dist = pairwise_distances(locations);
    let vars: Vec<usize> = (0..params.p()).collect();
    assemble_covariance(params, &dist, &vars, ordering)
}

/// Covariance of the variables `vars` (in that order) over all locations of `dist`.
pub(crate) fn assemble_covariance(
    params: &MaternParams,
    dist: &Array2<f64>,
    vars: &[usize],
    ordering: BlockOrdering,
) -> Result<Mat<f64>> {
    let kernel = params.kernel()?;
    let (sigma, range) = params.scale_and_range();
    let n = dist.nrows();
    let q = vars.len();
    let mut out = Mat::<f64>::zeros(n * q, n * q);
    for (a, &i) in vars.iter().enumerate() {
        for (b, &j) in vars.iter().enumerate().skip(a) {
            let s = sigma[[i, j]];
            let alpha = range[[i, j]];
            for k in 0..n {
                let r = ordering.index(a, k, n, q);
                for l in 0..n {
                    let c = if s == 0.0 {
                        0.0
                    } else {
                        s * kernel.correlation(dist[[k, l]], alpha)
                    };
                    let col = ordering.index(b, l, n, q);
                    out[(r, col)] = c;
                    out[(col, r)] = c;
                }
            }
            if i == j {
                for k in 0..n {
                    let r = ordering.index(a, k, n, q);
                    out[(r, r)] += params.tau2[i];
                }
            }
        }
    }
    Ok(out)
}

/// `2p × 2p` covariance of `(Z(s_k), Z(s_l))`, location-major.
pub fn assemble_pair_covariance(params: &MaternParams, s_k: &[f64], s_l: &[f64]) -> Result<Array2<f64>> {
    let h = s_k
        .iter()
        .zip(s_l)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if h == 0.0 {
        return Err(Error::input("pair covariance requires distinct locations"));
    }
    let (sigma, range) = params.scale_and_range();
    Ok(pair_covariance(params, &params.kernel()?, &sigma, &range, h))
}

pub(crate) fn pair_covariance(
    params: &MaternParams,
    kernel: &MaternKernel,
    sigma: &Array2<f64>,
    range: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let p = params.p();
    let mut q = Array2::zeros((2 * p, 2 * p));
    for i in 0..p {
        for j in 0..p {
            let s = sigma[[i, j]];
            let c0 = s + if i == j { params.tau2[i] } else { 0.0 };
            let ch = if s == 0.0 { 0.0 } else { s * kernel.correlation(h, range[[i, j]]) };
            q[[i, j]] = c0;
            q[[p + i, p + j]] = c0;
            q[[i, p + j]] = ch;
            q[[p + i, j]] = ch;
        }
    }
    q
}

/// A perturbation direction of the cross-structure: `dΨ` and `dα_ij` (both `p × p`, symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub dpsi: Array2<f64>,
    pub dalpha: Array2<f64>,
    pub dtau2: Array1<f64>,
}

impl Direction {
    pub fn zeros(p: usize) -> Self {
        Self {
            dpsi: Array2::zeros((p, p)),
            dalpha: Array2::zeros((p, p)),
            dtau2: Array1::zeros(p),
        }
    }

    /// Direction of the coordinate `l_ab` (`a ≥ b`; diagonal through `L_aa = exp(l_aa)`).
    pub fn l_entry(params: &MaternParams, a: usize, b: usize) -> Result<Self> {
        let p = params.p();
        if b > a || a >= p {
            return Err(Error::input(format!("l_{a}{b} is not a lower-triangular entry")));
        }
        let chain = if a == b { params.l[[a, a]] } else { 1.0 };
        let mut d = Self::zeros(p);
        // dΨ = E_ab Lᵀ + L E_ba
        for j in 0..p {
            d.dpsi[[a, j]] += chain * params.l[[j, b]];
            d.dpsi[[j, a]] += chain * params.l[[j, b]];
        }
        Ok(d)
    }

    pub fn delta_b(params: &MaternParams) -> Self {
        let p = params.p();
        let mut d = Self::zeros(p);
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    d.dalpha[[i, j]] = (1.0 - params.rb[[i, j]]) / (2.0 * params.cross_range(i, j));
                }
            }
        }
        d
    }

    /// Direction of the symmetric pair `(R_B,ij, R_B,ji)`, `i < j`.
    pub fn rb_entry(params: &MaternParams, i: usize, j: usize) -> Result<Self> {
        let p = params.p();
        if i >= j || j >= p {
            return Err(Error::input(format!("R_B entry ({i},{j}) must satisfy i < j < p")));
        }
        let mut d = Self::zeros(p);
        let v = -params.delta_b / (2.0 * params.cross_range(i, j));
        d.dalpha[[i, j]] = v;
        d.dalpha[[j, i]] = v;
        Ok(d)
    }

    /// `dσ_ij = α_i^ν α_j^ν α_ij^{-2ν} dΨ_ij - 2ν σ_ij dα_ij / α_ij`.
    pub(crate) fn dsigma(&self, params: &MaternParams, sigma: &Array2<f64>, range: &Array2<f64>) -> Array2<f64> {
        let p = params.p();
        let nu = params.nu;
        Array2::from_shape_fn((p, p), |(i, j)| {
            if i == j {
                return self.dpsi[[i, i]];
            }
            let ratio = (params.alpha[i] * params.alpha[j] / (range[[i, j]] * range[[i, j]])).powf(nu);
            ratio * self.dpsi[[i, j]] - 2.0 * nu * sigma[[i, j]] * self.dalpha[[i, j]] / range[[i, j]]
        })
    }
}

/// `∂Σ/∂θ` along `dir` over the variables `vars`.
pub(crate) fn assemble_direction(
    params: &MaternParams,
    dist: &Array2<f64>,
    vars: &[usize],
    ordering: BlockOrdering,
    dir: &Direction,
) -> Result<Mat<f64>> {
    let kernel = params.kernel()?;
    let (sigma, range) = params.scale_and_range();
    let dsigma = dir.dsigma(params, &sigma, &range);
    let n = dist.nrows();
    let q = vars.len();
    let mut out = Mat::<f64>::zeros(n * q, n * q);
    for (a, &i) in vars.iter().enumerate() {
        for (b, &j) in vars.iter().enumerate().skip(a) {
            let ds = dsigma[[i, j]];
            let sda = sigma[[i, j]] * dir.dalpha[[i, j]];
            if ds == 0.0 && sda == 0.0 {
                continue;
            }
            let alpha = range[[i, j]];
            for k in 0..n {
                let r = ordering.index(a, k, n, q);
                for l in 0..n {
                    let (m, dm) = kernel.eval(dist[[k, l]], alpha);
                    let c = ds * m + sda * dm;
                    let col = ordering.index(b, l, n, q);
                    out[(r, col)] = c;
                    out[(col, r)] = c;
                }
            }
        }
        for k in 0..n {
            let r = ordering.index(a, k, n, q);
            out[(r, r)] += dir.dtau2[i];
        }
    }
    Ok(out)
}

/// `∂Σ/∂l_ij` (`j ≤ i`), diagonal entries through `L_ii = exp(l_ii)`.
pub fn d_sigma_d_l(
    params: &MaternParams,
    locations: &Array2<f64>,
    i: usize,
    j: usize,
    ordering: BlockOrdering,
) -> Result<Mat<f64>> {
    let dir = Direction::l_entry(params, i, j)?;
    let vars: Vec<usize> = (0..params.p()).collect();
    assemble_direction(params, &pairwise_distances(locations), &vars, ordering, &dir)
}

/// `∂Σ/∂Δ_B`.
pub fn d_sigma_d_delta_b(params: &MaternParams, locations: &Array2<f64>, ordering: BlockOrdering) -> Result<Mat<f64>> {
    let dir = Direction::delta_b(params);
    let vars: Vec<usize> = (0..params.p()).collect();
    assemble_direction(params, &pairwise_distances(locations), &vars, ordering, &dir)
}

/// `∂Σ/∂R_B,ij` for the symmetric pair `i < j`.
pub fn d_sigma_d_rb(
    params: &MaternParams,
    locations: &Array2<f64>,
    i: usize,
    j: usize,
    ordering: BlockOrdering,
) -> Result<Mat<f64>> {
    let dir = Direction::rb_entry(params, i, j)?;
    let vars: Vec<usize> = (0..params.p()).collect();
    assemble_direction(params, &pairwise_distances(locations), &vars, ordering, &dir)
}

/// Contractions of a symmetric weight matrix `W` against the correlation blocks:
/// `G_ij = Σ_kl W_(ik),(jl) M_ij(h_kl)`, `D_ij` the same with `∂M/∂α`, and
/// `w_i = Σ_k W_(ik),(ik)`. With `W = Σ⁻¹zzᵀΣ⁻¹ - Σ⁻¹` these give `∂ℓ = ½ tr(W ∂Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contractions {
    pub g: Array2<f64>,
    pub d: Array2<f64>,
    pub w_diag: Array1<f64>,
}

impl Contractions {
    pub fn zeros(p: usize) -> Self {
        Self {
            g: Array2::zeros((p, p)),
            d: Array2::zeros((p, p)),
            w_diag: Array1::zeros(p),
        }
    }

    pub fn add(&mut self, other: &Contractions) {
        self.g += &other.g;
        self.d += &other.d;
        self.w_diag += &other.w_diag;
    }

    /// `½ tr(W ∂Σ)` along `dir`.
    pub fn directional(&self, params: &MaternParams, dir: &Direction) -> f64 {
        let (sigma, range) = params.scale_and_range();
        let dsigma = dir.dsigma(params, &sigma, &range);
        let p = params.p();
        let mut total = 0.0;
        for i in 0..p {
            for j in 0..p {
                total += dsigma[[i, j]] * self.g[[i, j]] + sigma[[i, j]] * dir.dalpha[[i, j]] * self.d[[i, j]];
            }
            total += dir.dtau2[i] * self.w_diag[i];
        }
        0.5 * total
    }
}

/// Derivatives of a log-objective with respect to every parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGradient {
    /// `∂/∂l_ij` on the lower triangle (diagonal in log coordinates).
    pub dl: Array2<f64>,
    pub d_delta_b: f64,
    /// `∂/∂R_B,ij` for `i < j` (upper triangle; rest zero).
    pub d_rb: Array2<f64>,
    pub d_tau2: Array1<f64>,
}

impl BlockGradient {
    pub fn zeros(p: usize) -> Self {
        Self {
            dl: Array2::zeros((p, p)),
            d_delta_b: 0.0,
            d_rb: Array2::zeros((p, p)),
            d_tau2: Array1::zeros(p),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dl: &self.dl * c,
            d_delta_b: self.d_delta_b * c,
            d_rb: &self.d_rb * c,
            d_tau2: &self.d_tau2 * c,
        }
    }

    pub fn add(&mut self, other: &BlockGradient) {
        self.dl += &other.dl;
        self.d_delta_b += other.d_delta_b;
        self.d_rb += &other.d_rb;
        self.d_tau2 += &other.d_tau2;
    }

    pub fn is_finite(&self) -> bool {
        self.dl.iter().chain(self.d_rb.iter()).chain(self.d_tau2.iter()).all(|v| v.is_finite())
            && self.d_delta_b.is_finite()
    }

    /// Assembles the gradient of `½ tr(W ∂Σ)` from the contractions.
    pub fn from_contractions(params: &MaternParams, c: &Contractions) -> Self {
        let p = params.p();
        let nu = params.nu;
        let (sigma, range) = params.scale_and_range();
        // S: gradient with respect to Ψ (ordered entries); T: with respect to α_ij (i ≠ j)
        let mut s = Array2::zeros((p, p));
        let mut t = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    s[[i, i]] = 0.5 * c.g[[i, i]];
                } else {
                    let a = range[[i, j]];
                    let ratio = (params.alpha[i] * params.alpha[j] / (a * a)).powf(nu);
                    s[[i, j]] = 0.5 * c.g[[i, j]] * ratio;
                    t[[i, j]] = 0.5 * sigma[[i, j]] * (c.d[[i, j]] - 2.0 * nu * c.g[[i, j]] / a);
                }
            }
        }
        let sl = s.dot(&params.l);
        let mut dl = Array2::zeros((p, p));
        for a in 0..p {
            for b in 0..=a {
                let g = 2.0 * sl[[a, b]];
                dl[[a, b]] = if a == b { g * params.l[[a, a]] } else { g };
            }
        }
        let mut d_delta_b = 0.0;
        let mut d_rb = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    let a = range[[i, j]];
                    d_delta_b += t[[i, j]] * (1.0 - params.rb[[i, j]]) / (2.0 * a);
                    if i < j {
                        d_rb[[i, j]] = 2.0 * t[[i, j]] * (-params.delta_b / (2.0 * a));
                    }
                }
            }
        }
        Self {
            dl,
            d_delta_b,
            d_rb,
            d_tau2: c.w_diag.mapv(|w| 0.5 * w),
        }
    }
}

/// Contractions of `W` (over `vars`, in `ordering`) against the blocks of `M` and `∂M/∂α`.
/// `w(r, c)` returns entry `(r, c)` of the symmetric weight matrix. Writes the
/// `vars × vars` entries of `out`.
pub(crate) fn contract_blocks(
    kernel: &MaternKernel,
    range: &Array2<f64>,
    dist: &Array2<f64>,
    vars: &[usize],
    ordering: BlockOrdering,
    w: impl Fn(usize, usize) -> f64,
    out: &mut Contractions,
) {
    let n = dist.nrows();
    let q = vars.len();
    for (a, &i) in vars.iter().enumerate() {
        for (b, &j) in vars.iter().enumerate().skip(a) {
            let alpha = range[[i, j]];
            let mut g = 0.0;
            let mut d = 0.0;
            for k in 0..n {
                let r = ordering.index(a, k, n, q);
                for l in 0..n {
                    let (m, dm) = kernel.eval(dist[[k, l]], alpha);
                    let wv = w(ordering.index(b, l, n, q), r);
                    g += wv * m;
                    d += wv * dm;
                }
            }
            out.g[[i, j]] = g;
            out.g[[j, i]] = g;
            out.d[[i, j]] = d;
            out.d[[j, i]] = d;
        }
        let mut wd = 0.0;
        for k in 0..n {
            let r = ordering.index(a, k, n, q);
            wd += w(r, r);
        }
        out.w_diag[i] = wd;
    }
}

/// `(Σ_kl x_k y_l M(h_kl; α), Σ_kl x_k y_l ∂M/∂α)`: the contraction of a rank-one weight block.
pub(crate) fn contract_outer(kernel: &MaternKernel, alpha: f64, dist: &Array2<f64>, x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = dist.nrows();
    let mut g = 0.0;
    let mut d = 0.0;
    for k in 0..n {
        let mut gk = 0.0;
        let mut dk = 0.0;
        for l in 0..n {
            let (m, dm) = kernel.eval(dist[[k, l]], alpha);
            gk += y[l] * m;
            dk += y[l] * dm;
        }
        g += x[k] * gk;
        d += x[k] * dk;
    }
    (g, d)
}
