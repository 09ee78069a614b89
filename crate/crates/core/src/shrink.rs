//! Empirical-Bayes layer on top of a group fit.
//!
//! The group-level relative reporting rate is `s = (1 - p) · mu`. Each AE cell
//! gets the posterior mean of its rate `λ` under the prior
//! `p · δ0 + (1 - p) · Gamma(shape r, scale mu / r)` and a Poisson likelihood
//! `y ~ Poisson(M λ)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::zinb::{ln_nb_zero, ZinbParams};

#[derive(Debug, Error, PartialEq)]
pub enum ShrinkError {
    #[error("sample mean equals prior mean; weights are undefined")]
    UndefinedWeights,
    #[error("quadrature did not reach tolerance after {0} subintervals")]
    Quadrature(usize),
    #[error("posterior undefined: {0}")]
    Undefined(&'static str),
}

/// Group-level RR for one vaccine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSignal {
    pub vaccine: String,
    pub group: String,
    pub s: f64,
}

/// Posterior summary for one vaccine-AE cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AePosterior {
    pub vaccine: String,
    pub ae: String,
    pub y: f64,
    pub m: f64,
    /// Posterior probability the cell is a structural zero; 0 when `y > 0`.
    pub pi_hat: f64,
    pub lambda_hat: f64,
}

impl AePosterior {
    pub fn new(
        vaccine: impl Into<String>,
        ae: impl Into<String>,
        y: f64,
        m: f64,
        params: &ZinbParams,
    ) -> Self {
        Self {
            vaccine: vaccine.into(),
            ae: ae.into(),
            y,
            m,
            pi_hat: if y > 0.0 { 0.0 } else { posterior_zero_weight(params, m) },
            lambda_hat: posterior_lambda_mean(y, params, m),
        }
    }
}

pub fn group_rr(params: &ZinbParams) -> f64 {
    (1.0 - params.p) * params.mu
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Posterior probability that a zero count came from the point mass.
pub fn posterior_zero_weight(params: &ZinbParams, m: f64) -> f64 {
    let ZinbParams { p, .. } = *params;
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (ln_p, ln_count) = zero_components(params, m);
    (ln_p - log_add_exp(ln_p, ln_count)).exp()
}

/// `1 − π̂`, computed directly so it keeps full precision when `π̂ ≈ 1`.
pub fn posterior_count_weight(params: &ZinbParams, m: f64) -> f64 {
    let ZinbParams { p, .. } = *params;
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let (ln_p, ln_count) = zero_components(params, m);
    (ln_count - log_add_exp(ln_p, ln_count)).exp()
}

fn zero_components(params: &ZinbParams, m: f64) -> (f64, f64) {
    let ZinbParams { p, mu, r } = *params;
    (p.ln(), (-p).ln_1p() + ln_nb_zero(r, m * mu))
}

/// Posterior mean of `λ` given count `y` at expected count `m`.
pub fn posterior_lambda_mean(y: f64, params: &ZinbParams, m: f64) -> f64 {
    let ZinbParams { mu, r, .. } = *params;
    let denom = r + m * mu;
    if y > 0.0 {
        mu * (r + y) / denom
    } else {
        posterior_count_weight(params, m) * mu * r / denom
    }
}

/// Weights `(w1, w2)` with `w1 + w2 = 1` such that
/// `λ̂ = w1 · y/M + w2 · (1 - p) · mu`.
pub fn posterior_weights(y: f64, params: &ZinbParams, m: f64) -> Result<(f64, f64), ShrinkError> {
    let ZinbParams { p, mu, r } = *params;
    let sample = y / m;
    let prior = (1.0 - p) * mu;
    if (sample - prior).abs() <= 4.0 * f64::EPSILON * sample.abs().max(prior.abs()) {
        return Err(ShrinkError::UndefinedWeights);
    }
    let w1 = if y == 0.0 {
        1.0 - posterior_count_weight(params, m) / (1.0 - p) * r / (r + m * mu)
    } else {
        (posterior_lambda_mean(y, params, m) - prior) / (sample - prior)
    };
    Ok((w1, 1.0 - w1))
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * GK_WEIGHTS[7];
    let mut gauss = fc * GAUSS_WEIGHTS[3];
    for k in 0..7 {
        let dx = half * GK_NODES[k];
        let pair = f(center - dx) + f(center + dx);
        kronrod += GK_WEIGHTS[k] * pair;
        if k % 2 == 1 {
            gauss += GAUSS_WEIGHTS[k / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive Gauss-Kronrod integration of a nonnegative integrand.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<f64, ShrinkError> {
    const MAX_INTERVALS: usize = 4000;
    let (v, e) = gk15(&f, a, b);
    let mut intervals = vec![(a, b, v, e)];
    loop {
        let total: f64 = intervals.iter().map(|iv| iv.2).sum();
        let err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if err <= rel_tol * total.abs() || err < f64::MIN_POSITIVE {
            return Ok(total);
        }
        if intervals.len() >= MAX_INTERVALS {
            return Err(ShrinkError::Quadrature(intervals.len()));
        }
        let worst = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(k, _)| k)
            .unwrap_or(0);
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

/// Posterior mean of `λ` by direct numerical integration of
/// `λ · f(y | λ) · π(λ)` over the prior, with the point mass at zero handled
/// analytically and the gamma part integrated on the log scale.
///
/// Independent of the conjugate closed form; used to check it.
pub fn posterior_lambda_quadrature_oracle(
    y: f64,
    params: &ZinbParams,
    m: f64,
) -> Result<f64, ShrinkError> {
    let ZinbParams { p, mu, r } = *params;
    if p >= 1.0 {
        return if y == 0.0 {
            Ok(0.0)
        } else {
            Err(ShrinkError::Undefined("positive count under a pure point mass"))
        };
    }
    // Gamma(shape r, rate r/mu) density times Poisson(y | m λ), written in
    // u = ln λ including the Jacobian λ:
    //   exp(c + (r + y) u - b e^u),  b = r/mu + m.
    let rate = r / mu;
    let b = rate + m;
    let c = r * rate.ln() - ln_gamma(r) + y * m.ln() - ln_gamma(y + 1.0);
    let shape = r + y;
    let log_kernel = |u: f64, extra: f64| (shape + extra) * u - b * u.exp();

    let mode0 = (shape / b).ln();
    let mode1 = ((shape + 1.0) / b).ln();
    let peak0 = log_kernel(mode0, 0.0);
    let peak1 = log_kernel(mode1, 1.0);
    let lo = mode0 - (80.0 / shape + 4.0);
    let hi = mode1 + (1.0 + 80.0 / shape).ln() + 4.0;

    const REL_TOL: f64 = 1e-9;
    let i0 = integrate(|u| (log_kernel(u, 0.0) - peak0).exp(), lo, hi, REL_TOL)?;
    let i1 = integrate(|u| (log_kernel(u, 1.0) - peak1).exp(), lo, hi, REL_TOL)?;

    let ln_1mp = (-p).ln_1p();
    let ln_num = ln_1mp + c + peak1 + i1.ln();
    let ln_gamma_part = ln_1mp + c + peak0 + i0.ln();
    // the point mass only supports y = 0 (Poisson(0) is degenerate at 0)
    let ln_den = if y == 0.0 && p > 0.0 {
        log_add_exp(p.ln(), ln_gamma_part)
    } else {
        ln_gamma_part
    };
    Ok((ln_num - ln_den).exp())
}
