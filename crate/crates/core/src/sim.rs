//! Monte Carlo study of estimator bias and MSE for `s` and `λ̂`.
//!
//! Each replication draws AE-level rates from the zero-inflated gamma prior,
//! Poisson counts around `M·λ`, fits the group model and compares the fitted
//! group RR and posterior means with the truth.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use statrs::distribution::{Discrete, DiscreteCDF, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shrink::{group_rr, posterior_lambda_mean};
use crate::zinb::{fit_group, FitConfig, GroupDesign, ZinbParams};

/// Dispersion used to emulate the zero-inflated Poisson limit.
pub const ZIP_DISPERSION: f64 = 1e8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed simulation file at line {line}: {reason}")]
    Malformed { line: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// Per-vaccine `p` and `mu`, recycled if shorter than the vaccine count.
    Explicit { p: Vec<f64>, mu: Vec<f64>, r: f64 },
    /// Uniform draws, made once per scenario from the seed.
    Range {
        p: (f64, f64),
        mu: (f64, f64),
        r: (f64, f64),
    },
}

impl Default for ParamSource {
    fn default() -> Self {
        ParamSource::Explicit {
            p: vec![0.2, 0.4, 0.6],
            mu: vec![0.8, 1.5, 3.0],
            r: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub group_sizes: Vec<usize>,
    pub n_vaccines: usize,
    pub n_replications: usize,
    /// Scales every offset; the base offsets do not depend on it.
    pub offset_multiplier: f64,
    pub zip_mode: bool,
    pub param_source: ParamSource,
    /// Offsets are log-uniform on this range.
    pub offset_range: (f64, f64),
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            group_sizes: vec![20, 50, 100, 200],
            n_vaccines: 3,
            n_replications: 1000,
            offset_multiplier: 1.0,
            zip_mode: false,
            param_source: ParamSource::default(),
            offset_range: (1.0, 100.0),
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

// Stream layout under the scenario seed: two per (size, replication), one
// for rates and one for count uniforms, so scenarios differing only in the
// offset multiplier share their draws. One per size for offsets, one for
// parameter draws.
const PARAM_STREAM: u64 = u64::MAX;
const COUNT_BIT: u64 = 1 << 62;

fn offsets_stream(group_size: usize) -> u64 {
    u64::MAX - 1 - group_size as u64
}

fn replication_stream(group_size: usize, replication: usize) -> u64 {
    ((group_size as u64) << 32) | replication as u64
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(m.to_string()));
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            return bad("group sizes must be positive");
        }
        if self.group_sizes.iter().any(|&k| k as u64 >= 1 << 30)
            || self.n_replications as u64 >= 1 << 32
        {
            return bad("group size too large");
        }
        if self.n_vaccines == 0 {
            return bad("need at least one vaccine");
        }
        if !(self.offset_multiplier.is_finite() && self.offset_multiplier > 0.0) {
            return bad("offset multiplier must be positive");
        }
        let (lo, hi) = self.offset_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("offset range must satisfy 0 < lo <= hi");
        }
        match &self.param_source {
            ParamSource::Explicit { p, mu, r } => {
                if p.is_empty() || mu.is_empty() {
                    return bad("explicit parameters are empty");
                }
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad("p outside [0, 1]");
                }
                if mu.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("mu must be positive");
                }
                if !(r.is_finite() && *r > 0.0) {
                    return bad("r must be positive");
                }
            }
            ParamSource::Range { p, mu, r } => {
                let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
                if !(ok(*p) && ok(*mu) && ok(*r)) {
                    return bad("ranges must be finite with lo <= hi");
                }
                if p.0 < 0.0 || p.1 > 1.0 || mu.0 <= 0.0 || r.0 <= 0.0 {
                    return bad("range outside parameter domain");
                }
            }
        }
        Ok(())
    }

    /// True parameters per vaccine, with `r` replaced under `zip_mode`.
    pub fn true_params(&self) -> Vec<ZinbParams> {
        let mut out = match &self.param_source {
            ParamSource::Explicit { p, mu, r } => (0..self.n_vaccines)
                .map(|i| ZinbParams::new(p[i % p.len()], mu[i % mu.len()], *r))
                .collect::<Vec<_>>(),
            ParamSource::Range { p, mu, r } => {
                let mut rng = rng_for(self.seed, PARAM_STREAM);
                let mut draw = |(a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..b) };
                let r = draw(*r);
                (0..self.n_vaccines)
                    .map(|_| {
                        let p = draw(*p);
                        ZinbParams::new(p, draw(*mu), r)
                    })
                    .collect()
            }
        };
        if self.zip_mode {
            out.iter_mut().for_each(|t| t.r = ZIP_DISPERSION);
        }
        out
    }

    /// Offsets per vaccine and AE before the multiplier, fixed by seed and size.
    ///
    /// Stratified log-uniform sample: one draw inside each of `group_size`
    /// equal-probability strata, in shuffled order. Small groups then cover
    /// the range as evenly as large ones.
    pub fn base_offsets(&self, group_size: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_for(self.seed, offsets_stream(group_size));
        let (lo, hi) = (self.offset_range.0.ln(), self.offset_range.1.ln());
        (0..self.n_vaccines)
            .map(|_| {
                let mut row: Vec<f64> = (0..group_size)
                    .map(|k| {
                        let u = (k as f64 + rng.random::<f64>()) / group_size as f64;
                        (lo + u * (hi - lo)).exp()
                    })
                    .collect();
                row.shuffle(&mut rng);
                row
            })
            .collect()
    }
}

/// One simulated AE group.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDraw {
    /// `[vaccine][ae]`
    pub offsets: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl SimDraw {
    pub fn design(&self) -> GroupDesign {
        let mut y = Vec::new();
        let mut offset = Vec::new();
        let mut index = Vec::new();
        for (v, (ys, ms)) in self.y.iter().zip(&self.offsets).enumerate() {
            y.extend_from_slice(ys);
            offset.extend_from_slice(ms);
            index.extend(std::iter::repeat_n(v, ys.len()));
        }
        GroupDesign::new(y, offset, index, self.y.len()).expect("simulated design is valid")
    }
}

/// Smallest `k` with `P(Y <= k) >= u` for `Y ~ Poisson(rate)`. Starts at the
/// mode and walks with the pmf recurrence, about `sqrt(rate)` steps.
pub fn poisson_quantile(rate: f64, u: f64) -> f64 {
    let dist = Poisson::new(rate).expect("positive rate");
    let mut k = rate.floor() as u64;
    let mut pmf = dist.pmf(k);
    let mut cdf = dist.cdf(k);
    if u <= cdf {
        while k > 0 && u <= cdf - pmf {
            cdf -= pmf;
            pmf *= k as f64 / rate;
            k -= 1;
        }
    } else {
        while cdf < u && pmf > 0.0 {
            k += 1;
            pmf *= rate / k as f64;
            cdf += pmf;
        }
    }
    k as f64
}

/// Draws `λ` and `y` for one replication at one group size.
pub fn simulate_group(scenario: &SimScenario, group_size: usize, replication: usize) -> SimDraw {
    let truth = scenario.true_params();
    let offsets: Vec<Vec<f64>> = scenario
        .base_offsets(group_size)
        .into_iter()
        .map(|row| row.into_iter().map(|m| m * scenario.offset_multiplier).collect())
        .collect();
    let stream = replication_stream(group_size, replication);
    let mut rate_rng = rng_for(scenario.seed, stream);
    let mut count_rng = rng_for(scenario.seed, stream | COUNT_BIT);
    let mut lambda = Vec::with_capacity(truth.len());
    let mut y = Vec::with_capacity(truth.len());
    for (t, ms) in truth.iter().zip(&offsets) {
        let gamma = Gamma::new(t.r, t.mu / t.r).expect("positive shape and scale");
        let mut lrow = Vec::with_capacity(group_size);
        let mut yrow = Vec::with_capacity(group_size);
        for &m in ms {
            let l = if rate_rng.random::<f64>() < t.p {
                0.0
            } else {
                gamma.sample(&mut rate_rng)
            };
            // Inversion keeps counts monotone in the rate for a shared
            // uniform, coupling scenarios that differ only in the multiplier.
            let u: f64 = count_rng.random();
            let count = if l * m > 0.0 {
                poisson_quantile(l * m, u)
            } else {
                0.0
            };
            lrow.push(l);
            yrow.push(count);
        }
        lambda.push(lrow);
        y.push(yrow);
    }
    SimDraw { offsets, lambda, y }
}

/// Per-replication results for one vaccine at one group size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCell {
    pub vaccine: usize,
    pub group_size: usize,
    /// `ŝ − s`
    pub s_bias: Vec<f64>,
    /// Mean over the group's AEs of `λ̂ − λ`.
    pub lambda_bias: Vec<f64>,
    /// Mean over the group's AEs of `(λ̂ − λ)²`.
    pub lambda_sq_error: Vec<f64>,
    /// Fitted parameters; not part of the CSV output.
    #[serde(skip)]
    pub estimates: Vec<ZinbParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    /// Mean of squared samples.
    pub mean_sq: f64,
}

pub fn aggregate(samples: &[f64]) -> Aggregate {
    let n = samples.len();
    if n == 0 {
        return Aggregate {
            n,
            mean: f64::NAN,
            se: f64::NAN,
            mean_sq: f64::NAN,
        };
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let mean_sq = samples.iter().map(|b| b * b).sum::<f64>() / nf;
    let se = if n > 1 {
        let var = samples.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    } else {
        f64::NAN
    };
    Aggregate { n, mean, se, mean_sq }
}

impl SimCell {
    /// Bias summary for `ŝ`; `mean_sq` is its MSE.
    pub fn s_summary(&self) -> Aggregate {
        aggregate(&self.s_bias)
    }

    pub fn lambda_mse(&self) -> f64 {
        aggregate(&self.lambda_sq_error).mean
    }

    pub fn lambda_mean_bias(&self) -> f64 {
        aggregate(&self.lambda_bias).mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub truth: Vec<ZinbParams>,
    /// Ordered by group size, then vaccine.
    pub cells: Vec<SimCell>,
    pub fits: usize,
    pub nonconverged: usize,
}

impl SimReport {
    pub fn cell(&self, vaccine: usize, group_size: usize) -> Option<&SimCell> {
        self.cells
            .iter()
            .find(|c| c.vaccine == vaccine && c.group_size == group_size)
    }
}

struct Replicate {
    s_bias: Vec<f64>,
    lambda_bias: Vec<f64>,
    lambda_sq_error: Vec<f64>,
    estimates: Vec<ZinbParams>,
    converged: bool,
}

fn run_replicate(scenario: &SimScenario, truth: &[ZinbParams], size: usize, rep: usize) -> Replicate {
    let draw = simulate_group(scenario, size, rep);
    let fit = fit_group(&draw.design(), &scenario.fit);
    let n_vac = truth.len();
    let mut out = Replicate {
        s_bias: Vec::with_capacity(n_vac),
        lambda_bias: Vec::with_capacity(n_vac),
        lambda_sq_error: Vec::with_capacity(n_vac),
        estimates: Vec::with_capacity(n_vac),
        converged: fit.converged,
    };
    for (v, t) in truth.iter().enumerate() {
        let est = fit.params(v);
        out.s_bias.push(group_rr(&est) - group_rr(t));
        let (mut bias, mut sq) = (0.0, 0.0);
        for k in 0..size {
            let err = posterior_lambda_mean(draw.y[v][k], &est, draw.offsets[v][k]) - draw.lambda[v][k];
            bias += err;
            sq += err * err;
        }
        out.lambda_bias.push(bias / size as f64);
        out.lambda_sq_error.push(sq / size as f64);
        out.estimates.push(est);
    }
    out
}

/// Runs every (group size, replication) pair in parallel; output order and
/// values depend only on the scenario.
pub fn run_study(scenario: &SimScenario) -> Result<SimReport, SimError> {
    scenario.validate()?;
    let truth = scenario.true_params();
    let jobs: Vec<(usize, usize)> = scenario
        .group_sizes
        .iter()
        .flat_map(|&k| (0..scenario.n_replications).map(move |rep| (k, rep)))
        .collect();
    let results: Vec<Replicate> = jobs
        .par_iter()
        .map(|&(k, rep)| run_replicate(scenario, &truth, k, rep))
        .collect();

    let mut cells = Vec::new();
    let mut nonconverged = 0;
    for (g, &size) in scenario.group_sizes.iter().enumerate() {
        let reps = &results[g * scenario.n_replications..(g + 1) * scenario.n_replications];
        nonconverged += reps.iter().filter(|r| !r.converged).count();
        for v in 0..truth.len() {
            cells.push(SimCell {
                vaccine: v,
                group_size: size,
                s_bias: reps.iter().map(|r| r.s_bias[v]).collect(),
                lambda_bias: reps.iter().map(|r| r.lambda_bias[v]).collect(),
                lambda_sq_error: reps.iter().map(|r| r.lambda_sq_error[v]).collect(),
                estimates: reps.iter().map(|r| r.estimates[v]).collect(),
            });
        }
    }
    Ok(SimReport {
        scenario: scenario.name.clone(),
        truth,
        cells,
        fits: results.len(),
        nonconverged,
    })
}

pub const GROUP_METRICS: [&str; 1] = ["s_bias"];
pub const AE_METRICS: [&str; 2] = ["lambda_bias", "lambda_sq_error"];

fn vaccine_label(v: usize) -> String {
    format!("V{}", v + 1)
}

fn write_long<W: Write>(sink: W, report: &SimReport, metrics: &[&str]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["scenario", "vaccine", "group_size", "metric", "value"])?;
    for cell in &report.cells {
        for &metric in metrics {
            let values = match metric {
                "s_bias" => &cell.s_bias,
                "lambda_bias" => &cell.lambda_bias,
                _ => &cell.lambda_sq_error,
            };
            for v in values {
                // shortest round-trip form so parse-back is exact
                w.write_record([
                    report.scenario.clone(),
                    vaccine_label(cell.vaccine),
                    cell.group_size.to_string(),
                    metric.to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Long-format CSVs `scenario,vaccine,group_size,metric,value`: the group
/// file carries `s_bias`, the AE file `lambda_bias` and `lambda_sq_error`.
pub fn emit_sim_plots<G: Write, A: Write>(report: &SimReport, group_sink: G, ae_sink: A) -> Result<(), SimError> {
    write_long(group_sink, report, &GROUP_METRICS)?;
    write_long(ae_sink, report, &AE_METRICS)
}

/// Reads back files written by [`emit_sim_plots`]. Truth, fit counts and
/// estimates are not stored and come back empty.
pub fn parse_sim_plots<G: Read, A: Read>(group_source: G, ae_source: A) -> Result<SimReport, SimError> {
    let mut report = SimReport {
        scenario: String::new(),
        truth: Vec::new(),
        cells: Vec::new(),
        fits: 0,
        nonconverged: 0,
    };
    for source in [Box::new(group_source) as Box<dyn Read>, Box::new(ae_source)] {
        let mut rdr = csv::Reader::from_reader(source);
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |reason: &str| SimError::Malformed {
                line,
                reason: reason.to_string(),
            };
            if record.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            report.scenario = record[0].to_string();
            let vaccine = record[1]
                .strip_prefix('V')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .ok_or_else(|| bad("vaccine label"))?
                - 1;
            let group_size: usize = record[2].parse().map_err(|_| bad("group size"))?;
            let value: f64 = record[4].parse().map_err(|_| bad("value"))?;
            let idx = match report
                .cells
                .iter()
                .position(|c| c.vaccine == vaccine && c.group_size == group_size)
            {
                Some(i) => i,
                None => {
                    report.cells.push(SimCell {
                        vaccine,
                        group_size,
                        s_bias: Vec::new(),
                        lambda_bias: Vec::new(),
                        lambda_sq_error: Vec::new(),
                        estimates: Vec::new(),
                    });
                    report.cells.len() - 1
                }
            };
            let cell = &mut report.cells[idx];
            match &record[3] {
                "s_bias" => cell.s_bias.push(value),
                "lambda_bias" => cell.lambda_bias.push(value),
                "lambda_sq_error" => cell.lambda_sq_error.push(value),
                _ => return Err(bad("unknown metric")),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimScenario {
        SimScenario {
            group_sizes: vec![20],
            n_replications: 4,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn certain_zero_gives_all_zero() {
        let sc = SimScenario {
            param_source: ParamSource::Explicit {
                p: vec![1.0],
                mu: vec![2.0],
                r: 1.0,
            },
            ..small()
        };
        let d = simulate_group(&sc, 30, 0);
        assert!(d.lambda.iter().flatten().all(|&l| l == 0.0));
        assert!(d.y.iter().flatten().all(|&y| y == 0.0));
    }

    #[test]
    fn zip_mode_rates_collapse_to_mu() {
        let sc = SimScenario {
            zip_mode: true,
            ..small()
        };
        let d = simulate_group(&sc, 200, 3);
        for (v, row) in d.lambda.iter().enumerate() {
            let mu = [0.8, 1.5, 3.0][v];
            for &l in row.iter().filter(|&&l| l > 0.0) {
                assert!((l - mu).abs() < 1e-3 * mu);
            }
        }
    }

    #[test]
    fn multiplier_scales_the_same_offsets() {
        let a = simulate_group(&small(), 20, 0);
        let b = simulate_group(
            &SimScenario {
                offset_multiplier: 5.0,
                ..small()
            },
            20,
            0,
        );
        for (ra, rb) in a.offsets.iter().zip(&b.offsets) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((5.0 * x - y).abs() < 1e-12 * y);
            }
        }
        assert_eq!(a.lambda, b.lambda);
        assert!(a.offsets.iter().flatten().all(|&m| (1.0..=100.0).contains(&m)));
    }

    #[test]
    fn study_is_deterministic_and_shaped() {
        let a = run_study(&small()).unwrap();
        let b = run_study(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 3);
        assert!(a.cells.iter().all(|c| c.s_bias.len() == 4));
        let c = &a.cells[0];
        let mse: f64 = c.s_bias.iter().map(|b| b * b).sum::<f64>() / 4.0;
        assert!((c.s_summary().mean_sq - mse).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let report = run_study(&small()).unwrap();
        let (mut g, mut a) = (Vec::new(), Vec::new());
        emit_sim_plots(&report, &mut g, &mut a).unwrap();
        let back = parse_sim_plots(g.as_slice(), a.as_slice()).unwrap();
        assert_eq!(back.cells.len(), report.cells.len());
        for (x, y) in back.cells.iter().zip(&report.cells) {
            assert_eq!(x.s_bias, y.s_bias);
            assert_eq!(x.lambda_bias, y.lambda_bias);
            assert_eq!(x.lambda_sq_error, y.lambda_sq_error);
        }
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let report = SimReport {
            scenario: "x".into(),
            truth: vec![],
            cells: vec![],
            fits: 0,
            nonconverged: 0,
        };
        let (mut g, mut a) = (Vec::new(), Vec::new());
        emit_sim_plots(&report, &mut g, &mut a).unwrap();
        assert_eq!(String::from_utf8(g).unwrap(), "scenario,vaccine,group_size,metric,value\n");
        assert_eq!(String::from_utf8(a).unwrap(), "scenario,vaccine,group_size,metric,value\n");
    }

    #[test]
    fn poisson_quantile_matches_cdf() {
        for &rate in &[0.01, 0.7, 3.0, 25.0, 400.0, 9000.0] {
            let dist = Poisson::new(rate).unwrap();
            for &u in &[1e-9, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-12] {
                let k = poisson_quantile(rate, u) as u64;
                assert!(dist.cdf(k) >= u - 1e-9, "rate {rate} u {u} k {k}");
                if k > 0 {
                    assert!(dist.cdf(k - 1) < u + 1e-9, "rate {rate} u {u} k {k}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_scenarios() {
        assert!(SimScenario { n_vaccines: 0, ..small() }.validate().is_err());
        assert!(SimScenario { group_sizes: vec![0], ..small() }.validate().is_err());
    }
}
