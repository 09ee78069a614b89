//! Box-constrained BFGS with a backtracking Armijo line search.
//!
//! Variables sitting on a bound with the gradient pointing outward are held
//! fixed for the step (projected gradient), and a mask can pin variables for
//! the whole run. Convergence is judged on the projected gradient ∞-norm.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Largest ∞-norm of a single trial step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 500,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl BfgsResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Zeroes gradient components of pinned variables and of variables on a
/// bound whose gradient points out of the box. Returns the ∞-norm.
fn projected_gradient(
    x: &[f64],
    g: &[f64],
    lower: &[f64],
    upper: &[f64],
    free: &[bool],
    out: &mut [f64],
) -> f64 {
    let mut norm = 0.0f64;
    for i in 0..x.len() {
        let blocked = !free[i] || (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0);
        out[i] = if blocked { 0.0 } else { g[i] };
        norm = norm.max(out[i].abs());
    }
    norm
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective` inside `[lower, upper]`. `objective(x, grad)` returns
/// the value and writes the gradient; a non-finite value is treated as a
/// rejected trial point.
pub fn minimize_box<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    free: &[bool],
    opts: &BfgsOptions,
) -> BfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    let initial_value = f;
    let mut gp = vec![0.0; n];
    let mut gnorm = projected_gradient(&x, &g, lower, upper, free, &mut gp);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsResult {
            x,
            value: f,
            initial_value,
            grad_norm: f64::INFINITY,
            iterations: 0,
            termination: Termination::NonFiniteStart,
        };
    }

    // inverse Hessian approximation, row-major
    let identity = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        (0..n).for_each(|i| h[i * n + i] = 1.0);
    };
    let mut h = vec![0.0; n * n];
    identity(&mut h);
    let mut h_is_identity = true;

    let mut d = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut gp_new = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut yv = vec![0.0; n];
    let mut hy = vec![0.0; n];

    let mut iterations = 0;
    let termination = loop {
        if gnorm <= opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let mut accepted = false;
        for attempt in 0..2 {
            if attempt == 1 {
                if h_is_identity {
                    break;
                }
                identity(&mut h);
                h_is_identity = true;
            }
            for i in 0..n {
                let held = !free[i]
                    || (x[i] <= lower[i] && g[i] > 0.0)
                    || (x[i] >= upper[i] && g[i] < 0.0);
                d[i] = if held {
                    0.0
                } else {
                    -(0..n).map(|k| h[i * n + k] * gp[k]).sum::<f64>()
                };
            }
            if dot(&d, &gp) >= 0.0 {
                if h_is_identity {
                    break;
                }
                continue;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut t = if dmax > opts.max_step { opts.max_step / dmax } else { 1.0 };
            for _ in 0..opts.max_backtracks {
                for i in 0..n {
                    x_new[i] = x[i] + t * d[i];
                }
                project(&mut x_new, lower, upper);
                let f_new = objective(&x_new, &mut g_new);
                if f_new.is_finite() && g_new.iter().all(|v| v.is_finite()) {
                    let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
                    let gnorm_new =
                        projected_gradient(&x_new, &g_new, lower, upper, free, &mut gp_new);
                    let armijo = f_new <= f + opts.c1 * decrease;
                    // Near the optimum the decrease drowns in rounding noise;
                    // accept steps that keep f flat and shrink the gradient.
                    let flat = f_new <= f + 1e-12 * f.abs().max(1.0) && gnorm_new < gnorm;
                    if armijo || flat {
                        for i in 0..n {
                            s[i] = x_new[i] - x[i];
                            yv[i] = if free[i] { g_new[i] - g[i] } else { 0.0 };
                        }
                        let sy = dot(&s, &yv);
                        let yy = dot(&yv, &yv);
                        if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() && sy > 0.0 {
                            if h_is_identity {
                                let scale = sy / yy;
                                h.iter_mut().for_each(|v| *v *= scale);
                            }
                            for i in 0..n {
                                hy[i] = (0..n).map(|k| h[i * n + k] * yv[k]).sum();
                            }
                            let yhy = dot(&yv, &hy);
                            let rho = 1.0 / sy;
                            for i in 0..n {
                                for k in 0..n {
                                    h[i * n + k] += rho * ((1.0 + rho * yhy) * s[i] * s[k]
                                        - hy[i] * s[k]
                                        - s[i] * hy[k]);
                                }
                            }
                            h_is_identity = false;
                        }
                        x.copy_from_slice(&x_new);
                        g.copy_from_slice(&g_new);
                        gp.copy_from_slice(&gp_new);
                        f = f_new;
                        gnorm = gnorm_new;
                        accepted = true;
                        break;
                    }
                }
                t *= opts.shrink;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break Termination::LineSearchFailed;
        }
    };

    BfgsResult {
        x,
        value: f,
        initial_value,
        grad_norm: gnorm,
        iterations,
        termination,
    }
}
