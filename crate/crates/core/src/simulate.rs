//! Gaussian random field simulation by Cholesky factorization and the
//! illustrative five-variable configuration.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::matern::{assemble_covariance, BlockOrdering, MaternParams};
use crate::rng;
use crate::spatial_data::{pairwise_distances, SpatialDataset, DUPLICATE_TOLERANCE};

/// Largest jitter (relative to the mean diagonal) tried when `Σ` is numerically semidefinite.
pub const MAX_SIMULATION_JITTER: f64 = 1e-6;

/// Axis-aligned box in `ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Self { lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn unit_square() -> Self {
        Self {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::input("domain bounds must be nonempty and of equal length"));
        }
        for (a, b) in self.lower.iter().zip(&self.upper) {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::input(format!("degenerate domain side [{a}, {b}]")));
            }
        }
        Ok(())
    }
}

/// `n` i.i.d. uniform points in `domain`.
pub fn sample_locations_uniform(n: usize, domain: &Domain, seed: u64) -> Result<Array2<f64>> {
    domain.validate()?;
    if n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let d = domain.dim();
    let mut r = rng::stream(seed, 0);
    let draw = |r: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
        (0..d)
            .map(|k| domain.lower[k] + (domain.upper[k] - domain.lower[k]) * rng::open_uniform(r))
            .collect()
    };
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    while points.len() < n {
        let x = draw(&mut r);
        let dup = points.iter().any(|q| {
            q.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= DUPLICATE_TOLERANCE
        });
        if !dup {
            points.push(x);
        }
    }
    Ok(Array2::from_shape_fn((n, d), |(i, k)| points[i][k]))
}

/// Reusable factorization for drawing many fields with the same parameters and locations.
pub struct FieldSimulator {
    locations: Array2<f64>,
    ordering: BlockOrdering,
    p: usize,
    /// Per component of `Ψ`: its variables and the Cholesky factor of their covariance.
    blocks: Vec<(Vec<usize>, Cholesky)>,
}

impl FieldSimulator {
    pub fn new(params: &MaternParams, locations: &Array2<f64>, ordering: BlockOrdering) -> Result<Self> {
        params.validate()?;
        let dist = pairwise_distances(locations);
        let mut blocks = Vec::new();
        // Σ is block diagonal over the connected components of Ψ
        for vars in params.psi_components() {
            let sigma = assemble_covariance(params, &dist, &vars, ordering)?;
            let chol = Cholesky::with_jitter(&sigma, MAX_SIMULATION_JITTER, "simulation covariance")?;
            if chol.jitter > 0.0 {
                log::info!("simulation covariance needed jitter {:e}", chol.jitter);
            }
            blocks.push((vars, chol));
        }
        Ok(Self {
            locations: locations.clone(),
            ordering,
            p: params.p(),
            blocks,
        })
    }

    /// Largest jitter added to any block.
    pub fn jitter(&self) -> f64 {
        self.blocks.iter().map(|(_, c)| c.jitter).fold(0.0, f64::max)
    }

    /// One field from stream `(seed, stream_id)`; the `np` standard normals are
    /// drawn in the stacked order of `ordering`.
    pub fn draw(&self, seed: u64, stream_id: u64) -> Result<SpatialDataset> {
        let n = self.locations.nrows();
        let p = self.p;
        let mut r = rng::stream(seed, stream_id);
        let x: Vec<f64> = (0..n * p).map(|_| rng::standard_normal(&mut r)).collect();
        let mut values = Array2::<f64>::zeros((n, p));
        for (vars, chol) in &self.blocks {
            let q = vars.len();
            let mut local = vec![0.0; n * q];
            for (a, &i) in vars.iter().enumerate() {
                for k in 0..n {
                    local[self.ordering.index(a, k, n, q)] = x[self.ordering.index(i, k, n, p)];
                }
            }
            let g = chol.factor();
            let m = n * q;
            let mut z = vec![0.0; m];
            for c in 0..m {
                let xc = local[c];
                if xc == 0.0 {
                    continue;
                }
                let col = g.col(c);
                for rr in c..m {
                    z[rr] += col[rr] * xc;
                }
            }
            for (a, &i) in vars.iter().enumerate() {
                for k in 0..n {
                    values[[k, i]] = z[self.ordering.index(a, k, n, q)];
                }
            }
        }
        let names = (1..=p).map(|i| format!("Z{i}")).collect();
        SpatialDataset::new(self.locations.clone(), values, names)
    }
}

/// `Z = chol(Σ) X` with `X ~ N(0, I)` drawn from `seed`.
pub fn simulate_field(params: &MaternParams, locations: &Array2<f64>, seed: u64, ordering: BlockOrdering) -> Result<SpatialDataset> {
    FieldSimulator::new(params, locations, ordering)?.draw(seed, 0)
}

/// Identity with `value` on the first off-diagonals.
pub fn make_band_r(p: usize, value: f64) -> Result<Array2<f64>> {
    if p == 0 {
        return Err(Error::input("p must be at least 1"));
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::input(format!("band value must lie in [0, 1], got {value}")));
    }
    Ok(Array2::from_shape_fn((p, p), |(i, j)| {
        if i == j {
            1.0
        } else if i.abs_diff(j) == 1 {
            value
        } else {
            0.0
        }
    }))
}

/// Generating parameters, sampling domain and sample size of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub params: MaternParams,
    pub domain: Domain,
    pub n: usize,
}

/// Five variables on the unit square, `n = 500`: `σ² = (0.5, 1, 1.5, 2, 2.5)`,
/// `α = (10, 6.67, 5, 4, 3.33)`, tridiagonal `ρ = R_B` with off-diagonal 0.5,
/// `Δ_B = 60`, `ν = 0.5`, no nugget.
pub fn illustrative_config() -> ExperimentConfig {
    let band = make_band_r(5, 0.5).expect("valid band");
    let params = MaternParams::from_correlation(
        0.5,
        &[0.5, 1.0, 1.5, 2.0, 2.5],
        &[10.0, 6.67, 5.0, 4.0, 3.33],
        &[0.0; 5],
        &band,
        60.0,
        band.clone(),
    )
    .expect("illustrative parameters are valid");
    ExperimentConfig {
        params,
        domain: Domain::unit_square(),
        n: 500,
    }
}

/// A `p`-variable stand-in for large applications: tridiagonal `ρ = R_B` with
/// off-diagonal 0.4, variances cycling through 0.5..2.5, inverse ranges through
/// 3..10, `Δ_B = 20`, `ν = 0.5`, and a small nugget on every variable.
pub fn surrogate_config(p: usize, n: usize) -> Result<ExperimentConfig> {
    if p < 2 {
        return Err(Error::input("the surrogate needs at least two variables"));
    }
    let band = make_band_r(p, 0.4)?;
    let sigma2: Vec<f64> = (0..p).map(|i| 0.5 + 0.5 * (i % 5) as f64).collect();
    let alpha: Vec<f64> = (0..p).map(|i| 3.0 + (i % 8) as f64).collect();
    let params = MaternParams::from_correlation(0.5, &sigma2, &alpha, &vec![0.05; p], &band, 20.0, band.clone())?;
    Ok(ExperimentConfig {
        params,
        domain: Domain::unit_square(),
        n,
    })
}
