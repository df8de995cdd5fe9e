//! Special functions: the modified Bessel function of the second kind `K_ν`,
//! the gamma function and the standard normal quantile.
//!
//! `K_ν(x)` is computed from `K_μ`, `K_{μ+1}` with `|μ| ≤ 1/2` followed by the
//! (stable) upward recurrence `K_{μ+k+1} = 2(μ+k)/x · K_{μ+k} + K_{μ+k-1}`.
//! For `x < 2` the pair comes from Temme's series; for `x ≥ 2` from Steed's
//! continued fraction (CF2).

use std::f64::consts::PI;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_TERMS: usize = 10_000;

/// Taylor coefficients of `1/Γ(1+x)` about 0.
const RECIP_GAMMA_1P: [f64; 29] = [
    1.0,
    0.577_215_664_901_532_860_61,
    -0.655_878_071_520_253_881_08,
    -0.042_002_635_034_095_235_529,
    0.166_538_611_382_291_489_5,
    -0.042_197_734_555_544_336_748,
    -0.009_621_971_527_876_973_562_1,
    0.007_218_943_246_663_099_542_4,
    -0.001_165_167_591_859_065_112_1,
    -0.000_215_241_674_114_950_972_82,
    0.000_128_050_282_388_116_186_15,
    -0.000_020_134_854_780_788_238_656,
    -1.250_493_482_142_670_657_3e-6,
    1.133_027_231_981_695_882_4e-6,
    -2.056_338_416_977_607_103_5e-7,
    6.116_095_104_481_415_817_9e-9,
    5.002_007_644_469_222_930_1e-9,
    -1.181_274_570_487_020_144_6e-9,
    1.043_426_711_691_100_510_5e-10,
    7.782_263_439_905_071_254e-12,
    -3.696_805_618_642_205_708_2e-12,
    5.100_370_287_454_475_979e-13,
    -2.058_326_053_566_506_783_2e-14,
    -5.348_122_539_423_017_982_4e-15,
    1.226_778_628_238_260_790_2e-15,
    -1.181_259_301_697_458_769_5e-16,
    1.186_692_254_751_600_332_6e-18,
    1.412_380_655_318_031_781_6e-18,
    -2.298_745_684_435_370_206_6e-19,
];

/// Returns `(gam1, gam2, 1/Γ(1+μ), 1/Γ(1-μ))` for `|μ| ≤ 1/2`, where
/// `gam1 = (1/Γ(1-μ) - 1/Γ(1+μ)) / (2μ)` and `gam2 = (1/Γ(1-μ) + 1/Γ(1+μ)) / 2`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    let mut even = 0.0;
    let mut odd = 0.0;
    // Horner in μ² over even / odd coefficients.
    for k in (0..RECIP_GAMMA_1P.len()).rev() {
        if k % 2 == 0 {
            even = even * mu2 + RECIP_GAMMA_1P[k];
        }
    }
    for k in (0..RECIP_GAMMA_1P.len()).rev() {
        if k % 2 == 1 {
            odd = odd * mu2 + RECIP_GAMMA_1P[k];
        }
    }
    // g(μ) = even + μ·odd
    let gam1 = -odd;
    let gam2 = even;
    (gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1)
}

/// `(K_μ(x), K_{μ+1}(x))` for `|μ| ≤ 1/2`, `x > 0`.
fn k_pair_small_order(mu: f64, x: f64) -> (f64, f64) {
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let e = e.exp();
        let mut p = 0.5 * e / gampl;
        let mut q = 0.5 / (e * gammi);
        let mut c = 1.0;
        let d = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_TERMS {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu * mu);
            c *= d / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum, sum1 * 2.0 / x)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu * mu;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAX_TERMS {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        let h = a1 * h;
        let kmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        let kmu1 = kmu * (mu + x + 0.5 - h) / x;
        (kmu, kmu1)
    }
}

/// Modified Bessel function of the second kind `K_ν(x)` for real order and `x > 0`.
///
/// Uses `K_{-ν} = K_ν`. Returns 0 when the result underflows (x above ~700).
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::input(format!("bessel_k requires x > 0, got {x}")));
    }
    if !nu.is_finite() {
        return Err(Error::input(format!("bessel_k requires a finite order, got {nu}")));
    }
    Ok(bessel_k_unchecked(nu.abs(), x))
}

pub(crate) fn bessel_k_unchecked(nu: f64, x: f64) -> f64 {
    if x > 705.0 {
        return 0.0;
    }
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut kmu, mut k1) = k_pair_small_order(mu, x);
    let xi2 = 2.0 / x;
    for i in 1..=(nl as usize) {
        let next = (mu + i as f64) * xi2 * k1 + kmu;
        kmu = k1;
        k1 = next;
    }
    kmu
}

/// `Γ(x)` for `x > 0`.
pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Standard normal quantile `Φ⁻¹(p)`, `0 < p < 1`.
pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}
