//! Zero-inflated negative binomial kernel and the per-group maximum-likelihood
//! fitter.
//!
//! Each AE group is fit on its own. A cell `(vaccine i, AE k)` with weighted
//! count `y` and expected count `M` is modelled as
//!
//! ```text
//! y ~ p_i · δ0 + (1 - p_i) · NB(r, mean M·mu_i)
//! ```
//!
//! with a dispersion `r` shared by all vaccines of the group. The fitter works
//! on the unconstrained vector `(α_1..α_I, φ_1..φ_I, ln r)` with
//! `p = logistic(α)` and `mu = exp(φ)`, and maps the optimum back to the natural
//! scale. Counts may be fractional (multi-vaccine weights); the factorial is
//! generalized through `Γ(y + 1)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::contingency::{ContingencyTable, ExpectedCounts};
use crate::optim::{minimize_box, BfgsOptions, Termination};

#[derive(Debug, Error, PartialEq)]
pub enum ZinbError {
    #[error("non-finite or out-of-domain input: {0}")]
    Domain(&'static str),
    #[error("invalid design: {0}")]
    Design(String),
}

/// Natural-scale parameters for one vaccine of a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZinbParams {
    /// Zero-inflation probability.
    pub p: f64,
    /// Count-part mean per unit of expected count.
    pub mu: f64,
    /// Dispersion (NB shape).
    pub r: f64,
}

impl ZinbParams {
    pub fn new(p: f64, mu: f64, r: f64) -> Self {
        Self { p, mu, r }
    }
}

/// Threshold above which `ln Γ(r + y) − ln Γ(r)` and `ψ(r + y) − ψ(r)` switch
/// to asymptotic differences, avoiding cancellation between two huge values.
const ASYMPTOTIC_R: f64 = 50.0;

fn stirling_tail(x: f64) -> f64 {
    let x2 = x * x;
    1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x * x2 * x2)
}

/// `ln Γ(r + y) − ln Γ(r)` for `r > 0`, `y ≥ 0`.
pub(crate) fn ln_gamma_ratio(r: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if r >= ASYMPTOTIC_R {
        (r - 0.5) * (y / r).ln_1p() + y * (r + y).ln() - y + stirling_tail(r + y) - stirling_tail(r)
    } else {
        ln_gamma(r + y) - ln_gamma(r)
    }
}

/// `ψ(r + y) − ψ(r)`.
pub(crate) fn digamma_diff(r: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if r >= ASYMPTOTIC_R {
        let tail = |x: f64| {
            let x2 = x * x;
            -1.0 / (2.0 * x) - 1.0 / (12.0 * x2) + 1.0 / (120.0 * x2 * x2)
                - 1.0 / (252.0 * x2 * x2 * x2)
        };
        (y / r).ln_1p() + tail(r + y) - tail(r)
    } else {
        digamma(r + y) - digamma(r)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln NB(0 | r, m) = r · ln(r / (r + m))`.
#[inline]
pub(crate) fn ln_nb_zero(r: f64, m: f64) -> f64 {
    -r * (m / r).ln_1p()
}

/// Log NB mass for `y > 0` with mean `m` and shape `r`.
#[inline]
fn ln_nb_positive(y: f64, r: f64, m: f64) -> f64 {
    ln_gamma_ratio(r, y) - ln_gamma(y + 1.0) + ln_nb_zero(r, m) - y * (r / m).ln_1p()
}

/// Log mass of a ZINB observation `y` at expected count `offset` (`M`).
pub fn zinb_log_pmf(y: f64, params: &ZinbParams, offset: f64) -> Result<f64, ZinbError> {
    let ZinbParams { p, mu, r } = *params;
    if !(y.is_finite() && y >= 0.0) {
        return Err(ZinbError::Domain("y must be finite and >= 0"));
    }
    if !(offset.is_finite() && offset > 0.0) {
        return Err(ZinbError::Domain("M must be finite and > 0"));
    }
    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
        return Err(ZinbError::Domain("p must lie in [0, 1]"));
    }
    if !(mu.is_finite() && mu > 0.0 && r.is_finite() && r > 0.0) {
        return Err(ZinbError::Domain("mu and r must be finite and > 0"));
    }
    let m = offset * mu;
    let ln_1mp = (-p).ln_1p();
    Ok(if y == 0.0 {
        log_add_exp(p.ln(), ln_1mp + ln_nb_zero(r, m))
    } else {
        ln_1mp + ln_nb_positive(y, r, m)
    })
}

/// Cells of one AE group: counts, offsets, and the vaccine each cell belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDesign {
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub vaccine_index: Vec<usize>,
    pub n_vaccines: usize,
}

impl GroupDesign {
    pub fn new(
        y: Vec<f64>,
        offset: Vec<f64>,
        vaccine_index: Vec<usize>,
        n_vaccines: usize,
    ) -> Result<Self, ZinbError> {
        if y.len() != offset.len() || y.len() != vaccine_index.len() {
            return Err(ZinbError::Design("length mismatch".into()));
        }
        if n_vaccines == 0 {
            return Err(ZinbError::Design("no vaccines".into()));
        }
        if let Some(bad) = y.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ZinbError::Design(format!("count {bad} not finite and >= 0")));
        }
        if let Some(bad) = offset.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(ZinbError::Design(format!("offset {bad} not finite and > 0")));
        }
        let mut seen = vec![false; n_vaccines];
        for &v in &vaccine_index {
            if v >= n_vaccines {
                return Err(ZinbError::Design(format!("vaccine index {v} out of range")));
            }
            seen[v] = true;
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(ZinbError::Design(format!("vaccine {v} has no cells")));
        }
        Ok(Self {
            y,
            offset,
            vaccine_index,
            n_vaccines,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of unconstrained parameters, `2I + 1`.
    pub fn n_params(&self) -> usize {
        2 * self.n_vaccines + 1
    }

    fn cells_per_vaccine(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_vaccines];
        self.vaccine_index.iter().for_each(|&v| n[v] += 1);
        n
    }
}

/// One AE group cut out of a contingency table. Cells with `M = 0` are
/// dropped, as are vaccines left without cells.
#[derive(Debug, Clone)]
pub struct TableGroup {
    pub design: GroupDesign,
    /// Table row of each design vaccine.
    pub rows: Vec<usize>,
    /// Table `(row, column)` of each design cell.
    pub cells: Vec<(usize, usize)>,
}

impl TableGroup {
    /// Cells are ordered vaccine-major, then by the order of `columns`.
    pub fn from_table(
        table: &ContingencyTable,
        expected: &ExpectedCounts,
        columns: &[usize],
    ) -> Option<Self> {
        let mut y = Vec::new();
        let mut offset = Vec::new();
        let mut vaccine_index = Vec::new();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for i in 0..table.n_rows() {
            let before = y.len();
            for &j in columns {
                let m = expected.get(i, j);
                if m > 0.0 {
                    y.push(table.count(i, j));
                    offset.push(m);
                    vaccine_index.push(rows.len());
                    cells.push((i, j));
                }
            }
            if y.len() > before {
                rows.push(i);
            }
        }
        if rows.is_empty() {
            return None;
        }
        let design = GroupDesign::new(y, offset, vaccine_index, rows.len()).ok()?;
        Some(Self {
            design,
            rows,
            cells,
        })
    }

    /// Same cells with counts re-read from another table over the same
    /// universes (a permuted table). Offsets are kept.
    pub fn with_counts_from(&self, table: &ContingencyTable) -> GroupDesign {
        GroupDesign {
            y: self.cells.iter().map(|&(i, j)| table.count(i, j)).collect(),
            offset: self.design.offset.clone(),
            vaccine_index: self.design.vaccine_index.clone(),
            n_vaccines: self.design.n_vaccines,
        }
    }
}

/// Value and gradient of the negative log-likelihood at `theta`. Returns
/// `+∞` (and leaves `grad` unspecified) when any term is non-finite.
fn negloglik_impl(theta: &[f64], design: &GroupDesign, mut grad: Option<&mut [f64]>) -> f64 {
    let n_vac = design.n_vaccines;
    let ln_r = theta[2 * n_vac];
    let r = ln_r.exp();
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    // per-vaccine transforms, computed once
    let per_vaccine: Vec<(f64, f64, f64, f64)> = (0..n_vac)
        .map(|v| {
            let (alpha, phi) = (theta[v], theta[n_vac + v]);
            let ln_p = -softplus(-alpha);
            let ln_1mp = -softplus(alpha);
            (ln_p, ln_1mp, phi.exp(), ln_p.exp())
        })
        .collect();

    let mut total = 0.0;
    for n in 0..design.y.len() {
        let v = design.vaccine_index[n];
        let (ln_p, ln_1mp, mu, p) = per_vaccine[v];
        let y = design.y[n];
        let m = design.offset[n] * mu;
        let ln_q = ln_nb_zero(r, m);
        let ll;
        if y == 0.0 {
            ll = log_add_exp(ln_p, ln_1mp + ln_q);
            if let Some(g) = grad.as_deref_mut() {
                let post_zero = (ln_p - ll).exp();
                let post_count = (ln_1mp + ln_q - ll).exp();
                let one_minus_q = -ln_q.exp_m1();
                g[v] -= post_zero * (1.0 - p) * one_minus_q;
                g[n_vac + v] -= post_count * (-r * m / (r + m));
                g[2 * n_vac] -= post_count * r * (-(m / r).ln_1p() + m / (r + m));
            }
        } else {
            ll = ln_1mp + ln_nb_positive(y, r, m);
            if let Some(g) = grad.as_deref_mut() {
                g[v] -= -p;
                g[n_vac + v] -= r * (y - m) / (r + m);
                g[2 * n_vac] -=
                    r * (digamma_diff(r, y) - (m / r).ln_1p() + (m - y) / (r + m));
            }
        }
        total -= ll;
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

/// Negative log-likelihood of a group at `theta = (α.., φ.., ln r)`.
/// Entries are summed in index order.
pub fn group_negloglik(theta: &[f64], design: &GroupDesign) -> f64 {
    if theta.len() != design.n_params() || theta.iter().any(|t| !t.is_finite()) {
        return f64::INFINITY;
    }
    negloglik_impl(theta, design, None)
}

/// Analytic gradient of [`group_negloglik`].
pub fn group_negloglik_grad(theta: &[f64], design: &GroupDesign) -> Vec<f64> {
    let mut g = vec![0.0; design.n_params()];
    if theta.len() == design.n_params() && theta.iter().all(|t| t.is_finite()) {
        negloglik_impl(theta, design, Some(&mut g));
    } else {
        g.iter_mut().for_each(|v| *v = f64::NAN);
    }
    g
}

/// Box limits on the unconstrained parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamClamp {
    /// `|α| ≤ alpha`.
    pub alpha: f64,
    /// `|φ| ≤ phi`.
    pub phi: f64,
    pub ln_r_min: f64,
    pub ln_r_max: f64,
}

impl Default for ParamClamp {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            phi: 15.0,
            ln_r_min: -10.0,
            ln_r_max: 20.0,
        }
    }
}

impl ParamClamp {
    /// Parses `alpha,phi,ln_r_min,ln_r_max`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let v: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
            .collect::<Result<_, _>>()?;
        match v.as_slice() {
            &[alpha, phi, lo, hi] if alpha > 0.0 && phi > 0.0 && lo < hi => Ok(Self {
                alpha,
                phi,
                ln_r_min: lo,
                ln_r_max: hi,
            }),
            _ => Err(format!("expected `alpha,phi,ln_r_min,ln_r_max`, got `{text}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub clamp: ParamClamp,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 500,
            clamp: ParamClamp::default(),
        }
    }
}

/// Why a vaccine's estimates should be read with care.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryFlags {
    /// Every cell is zero: `p` pinned at the upper clamp, `φ` at its start.
    pub all_zero: bool,
    /// Fewer than two cells.
    pub too_few_cells: bool,
    pub p_at_bound: bool,
    pub mu_at_bound: bool,
}

impl BoundaryFlags {
    pub fn any(&self) -> bool {
        self.all_zero || self.too_few_cells || self.p_at_bound || self.mu_at_bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaccineEstimate {
    pub p: f64,
    pub mu: f64,
    pub flags: BoundaryFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    pub vaccines: Vec<VaccineEstimate>,
    pub r: f64,
    pub r_at_bound: bool,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub termination: Termination,
    /// Optimum on the unconstrained scale.
    pub theta: Vec<f64>,
}

impl GroupFit {
    pub fn params(&self, vaccine: usize) -> ZinbParams {
        let v = &self.vaccines[vaccine];
        ZinbParams::new(v.p, v.mu, self.r)
    }

    pub fn any_boundary(&self) -> bool {
        self.r_at_bound || self.vaccines.iter().any(|v| v.flags.any())
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Starting point: zero fraction for `p` (clamped to `[0.05, 0.95]`), the
/// pooled ratio `Σy / ΣM` over positive cells for `mu` (floored at 0.01), and
/// `r = 1`.
pub fn initial_theta(design: &GroupDesign, clamp: &ParamClamp) -> Vec<f64> {
    let n_vac = design.n_vaccines;
    let mut zeros = vec![0usize; n_vac];
    let mut cells = vec![0usize; n_vac];
    let mut sum_y = vec![0.0; n_vac];
    let mut sum_m = vec![0.0; n_vac];
    for n in 0..design.len() {
        let v = design.vaccine_index[n];
        cells[v] += 1;
        if design.y[n] == 0.0 {
            zeros[v] += 1;
        } else {
            sum_y[v] += design.y[n];
            sum_m[v] += design.offset[n];
        }
    }
    let mut theta = vec![0.0; 2 * n_vac + 1];
    for v in 0..n_vac {
        let p0 = (zeros[v] as f64 / cells[v] as f64).clamp(0.05, 0.95);
        theta[v] = (p0 / (1.0 - p0)).ln().clamp(-clamp.alpha, clamp.alpha);
        let ratio = if sum_m[v] > 0.0 { sum_y[v] / sum_m[v] } else { 0.0 };
        theta[n_vac + v] = ratio.max(0.01).ln().clamp(-clamp.phi, clamp.phi);
    }
    theta[2 * n_vac] = 0.0f64.clamp(clamp.ln_r_min, clamp.ln_r_max);
    theta
}

/// Maximum-likelihood fit of one AE group.
///
/// Non-convergence is reported through [`GroupFit::converged`], never as an
/// error. Vaccines whose cells are all zero have `p` pinned at
/// `logistic(clamp.alpha)` and `φ` at its starting value.
pub fn fit_group(design: &GroupDesign, config: &FitConfig) -> GroupFit {
    let n_vac = design.n_vaccines;
    let c = &config.clamp;
    let mut theta0 = initial_theta(design, c);

    let mut all_zero = vec![true; n_vac];
    for n in 0..design.len() {
        if design.y[n] != 0.0 {
            all_zero[design.vaccine_index[n]] = false;
        }
    }
    let cells = design.cells_per_vaccine();

    let mut lower = vec![0.0; 2 * n_vac + 1];
    let mut upper = vec![0.0; 2 * n_vac + 1];
    let mut free = vec![true; 2 * n_vac + 1];
    for v in 0..n_vac {
        lower[v] = -c.alpha;
        upper[v] = c.alpha;
        lower[n_vac + v] = -c.phi;
        upper[n_vac + v] = c.phi;
        if all_zero[v] {
            theta0[v] = c.alpha;
            free[v] = false;
            free[n_vac + v] = false;
        }
    }
    lower[2 * n_vac] = c.ln_r_min;
    upper[2 * n_vac] = c.ln_r_max;

    let opts = BfgsOptions {
        grad_tol: config.grad_tol,
        max_iters: config.max_iters,
        ..BfgsOptions::default()
    };
    let result = minimize_box(
        |x, g| negloglik_impl(x, design, Some(g)),
        &theta0,
        &lower,
        &upper,
        &free,
        &opts,
    );

    let theta = result.x;
    let at = |i: usize| theta[i] <= lower[i] || theta[i] >= upper[i];
    let vaccines = (0..n_vac)
        .map(|v| VaccineEstimate {
            p: logistic(theta[v]),
            mu: theta[n_vac + v].exp(),
            flags: BoundaryFlags {
                all_zero: all_zero[v],
                too_few_cells: cells[v] < 2,
                p_at_bound: !all_zero[v] && at(v),
                mu_at_bound: !all_zero[v] && at(n_vac + v),
            },
        })
        .collect();
    GroupFit {
        vaccines,
        r: theta[2 * n_vac].exp(),
        r_at_bound: at(2 * n_vac),
        loglik: -result.value,
        initial_loglik: -result.initial_value,
        converged: result.termination == Termination::GradientTolerance,
        iterations: result.iterations,
        gradient_norm: result.grad_norm,
        termination: result.termination,
        theta,
    }
}
