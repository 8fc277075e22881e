//! Deterministic unconstrained minimizers: limited-memory BFGS with a
//! strong Wolfe line search, and plain gradient descent.
//!
//! The L-BFGS direction comes from the standard two-loop recursion over the
//! last `memory` curvature pairs, with the initial Hessian scaled by
//! `s.y / y.y`. The line search brackets and then zooms with cubic
//! interpolation, falling back to bisection whenever the cubic step is
//! untrustworthy. Pairs with `s.y <= 1e-10` are dropped rather than let a
//! near-zero curvature poison the inverse Hessian estimate.
//!
//! Everything here is pure: same objective, same start, same iterates.

use std::collections::VecDeque;

use ndarray::Array1;

use crate::error::{KsdError, Result};

/// Curvature pairs below this `s.y` are not stored.
const CURVATURE_FLOOR: f64 = 1e-10;

/// Largest step the bracketing phase will try.
const ALPHA_MAX: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop when the gradient infinity norm drops below this.
    pub tol_grad: f64,
    pub max_iters: usize,
    /// Function-evaluation budget per line search (bracketing and zoom each).
    pub max_line_search: usize,
    /// Keep every iterate in the outcome (memory-heavy; off by default).
    pub store_iterates: bool,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            tol_grad: 1e-10,
            max_iters: 500,
            max_line_search: 25,
            store_iterates: false,
        }
    }
}

/// One completed iteration. `iteration` 0 is the starting point, with a
/// zero step length.
#[derive(Debug, Clone)]
pub struct OptimRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub grad_l2_norm: f64,
    pub step_length: f64,
    /// Whether the accepted step satisfied both strong Wolfe conditions.
    /// False only for steps taken by the steepest-descent fallback.
    pub wolfe_ok: bool,
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad: Array1<f64>,
    pub records: Vec<OptimRecord>,
    /// Present when `store_iterates` was set: one position per record.
    pub iterates: Vec<Array1<f64>>,
    /// Gradient tolerance reached.
    pub converged: bool,
    /// Both line searches failed; `x` is the best point seen.
    pub stalled: bool,
    /// The objective went non-finite during gradient descent.
    pub diverged: bool,
}

fn inf_norm(g: &Array1<f64>) -> f64 {
    g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn l2_norm(g: &Array1<f64>) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Minimizes `eval` from `x0`. `eval` returns the value and gradient; a
/// non-finite value is treated as "worse than anything" by the line search,
/// which lets callers encode constraint violations as infinity.
pub fn lbfgs_minimize<F>(
    mut eval: F,
    x0: &Array1<f64>,
    cfg: &LbfgsConfig,
) -> Result<MinimizeOutcome>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    validate_config(cfg)?;
    let (f0, g0) = eval(x0);
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(KsdError::NonFinite {
            context: "objective at the initial point".into(),
        });
    }

    let mut x = x0.clone();
    let mut f = f0;
    let mut g = g0;
    let mut records = vec![OptimRecord {
        iteration: 0,
        value: f,
        grad_inf_norm: inf_norm(&g),
        grad_l2_norm: l2_norm(&g),
        step_length: 0.0,
        wolfe_ok: true,
    }];
    let mut iterates = if cfg.store_iterates {
        vec![x.clone()]
    } else {
        Vec::new()
    };

    let mut history: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut converged = inf_norm(&g) < cfg.tol_grad;
    let mut stalled = false;

    let mut iter = 0;
    while !converged && iter < cfg.max_iters {
        let mut d = two_loop_direction(&g, &history);
        let mut dg = d.dot(&g);
        if dg >= 0.0 {
            // The approximation stopped being a descent model; restart it.
            history.clear();
            d = g.mapv(|v| -v);
            dg = -g.dot(&g);
        }

        let step = match strong_wolfe_search(&mut eval, &x, f, &d, dg, cfg) {
            Some(s) => s,
            None => {
                // Fall back to steepest descent with plain backtracking.
                let d_sd = g.mapv(|v| -v);
                let dg_sd = -g.dot(&g);
                match backtrack_armijo(&mut eval, &x, f, &d_sd, dg_sd, cfg) {
                    Some(s) => s,
                    None => {
                        stalled = true;
                        break;
                    }
                }
            }
        };

        let s_vec = &step.x - &x;
        let y_vec = &step.g - &g;
        let sy = s_vec.dot(&y_vec);
        if sy > CURVATURE_FLOOR {
            history.push_back((s_vec, y_vec, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }

        x = step.x;
        f = step.f;
        g = step.g;
        iter += 1;
        records.push(OptimRecord {
            iteration: iter,
            value: f,
            grad_inf_norm: inf_norm(&g),
            grad_l2_norm: l2_norm(&g),
            step_length: step.alpha,
            wolfe_ok: step.wolfe_ok,
        });
        if cfg.store_iterates {
            iterates.push(x.clone());
        }
        converged = inf_norm(&g) < cfg.tol_grad;
    }

    Ok(MinimizeOutcome {
        value: f,
        grad: g,
        x,
        records,
        iterates,
        converged,
        stalled,
        diverged: false,
    })
}

/// Fixed-step gradient descent with the same record shape as L-BFGS.
pub fn gd_minimize<F>(
    mut eval: F,
    x0: &Array1<f64>,
    step: f64,
    max_iters: usize,
    tol_grad: f64,
) -> Result<MinimizeOutcome>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    if !step.is_finite() || step <= 0.0 {
        return Err(KsdError::InvalidParameter(format!(
            "gradient descent step must be positive, got {step}"
        )));
    }
    let (f0, g0) = eval(x0);
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(KsdError::NonFinite {
            context: "objective at the initial point".into(),
        });
    }
    let mut x = x0.clone();
    let mut f = f0;
    let mut g = g0;
    let mut records = vec![OptimRecord {
        iteration: 0,
        value: f,
        grad_inf_norm: inf_norm(&g),
        grad_l2_norm: l2_norm(&g),
        step_length: 0.0,
        wolfe_ok: true,
    }];
    let mut converged = inf_norm(&g) < tol_grad;
    let mut diverged = false;
    let mut iter = 0;
    while !converged && iter < max_iters {
        let x_next = &x - &g.mapv(|v| step * v);
        let (f_next, g_next) = eval(&x_next);
        if !f_next.is_finite() || g_next.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        x = x_next;
        f = f_next;
        g = g_next;
        iter += 1;
        records.push(OptimRecord {
            iteration: iter,
            value: f,
            grad_inf_norm: inf_norm(&g),
            grad_l2_norm: l2_norm(&g),
            step_length: step,
            wolfe_ok: true,
        });
        converged = inf_norm(&g) < tol_grad;
    }
    Ok(MinimizeOutcome {
        value: f,
        grad: g,
        x,
        records,
        iterates: Vec::new(),
        converged,
        stalled: false,
        diverged,
    })
}

fn validate_config(cfg: &LbfgsConfig) -> Result<()> {
    if cfg.memory == 0 {
        return Err(KsdError::InvalidParameter("lbfgs memory must be >= 1".into()));
    }
    if !(cfg.c1 > 0.0 && cfg.c1 < cfg.c2 && cfg.c2 < 1.0) {
        return Err(KsdError::InvalidParameter(format!(
            "wolfe constants need 0 < c1 < c2 < 1, got c1={}, c2={}",
            cfg.c1, cfg.c2
        )));
    }
    if cfg.max_line_search == 0 {
        return Err(KsdError::InvalidParameter(
            "max_line_search must be >= 1".into(),
        ));
    }
    if !cfg.tol_grad.is_finite() || cfg.tol_grad < 0.0 {
        return Err(KsdError::InvalidParameter(format!(
            "tol_grad must be nonnegative, got {}",
            cfg.tol_grad
        )));
    }
    Ok(())
}

/// Two-loop recursion: applies the inverse Hessian estimate to `g` and
/// negates, yielding the search direction.
fn two_loop_direction(
    g: &Array1<f64>,
    history: &VecDeque<(Array1<f64>, Array1<f64>, f64)>,
) -> Array1<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= &(y * a);
        alphas.push(a);
    }
    let gamma = match history.back() {
        Some((s, y, _)) => s.dot(y) / y.dot(y),
        None => 1.0,
    };
    q *= gamma;
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += &(s * (a - b));
    }
    q.mapv(|v| -v)
}

struct AcceptedStep {
    alpha: f64,
    x: Array1<f64>,
    f: f64,
    g: Array1<f64>,
    wolfe_ok: bool,
}

struct Trial {
    alpha: f64,
    x: Array1<f64>,
    f: f64,
    /// Directional derivative `g . d` at this trial.
    df: f64,
    g: Array1<f64>,
}

fn try_alpha<F>(eval: &mut F, x0: &Array1<f64>, d: &Array1<f64>, alpha: f64) -> Trial
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let x = x0 + &d.mapv(|v| alpha * v);
    let (f, g) = eval(&x);
    let df = if g.iter().all(|v| v.is_finite()) {
        g.dot(d)
    } else {
        f64::NAN
    };
    Trial { alpha, x, f, df, g }
}

/// Bracketing phase of the strong Wolfe search. Starts at a unit step,
/// doubles until the minimum is bracketed, then hands off to [`zoom`].
fn strong_wolfe_search<F>(
    eval: &mut F,
    x0: &Array1<f64>,
    f0: f64,
    d: &Array1<f64>,
    dg0: f64,
    cfg: &LbfgsConfig,
) -> Option<AcceptedStep>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let mut prev = (0.0, f0, dg0);
    let mut alpha = 1.0;
    for i in 0..cfg.max_line_search {
        let t = try_alpha(eval, x0, d, alpha);
        let decrease_failed = !t.f.is_finite() || t.f > f0 + cfg.c1 * alpha * dg0;
        if decrease_failed || (i > 0 && t.f >= prev.1) {
            return zoom(eval, x0, f0, d, dg0, prev, (t.alpha, t.f, t.df), cfg);
        }
        if t.df.abs() <= -cfg.c2 * dg0 {
            return Some(AcceptedStep {
                alpha: t.alpha,
                x: t.x,
                f: t.f,
                g: t.g,
                wolfe_ok: true,
            });
        }
        if t.df >= 0.0 {
            return zoom(eval, x0, f0, d, dg0, (t.alpha, t.f, t.df), prev, cfg);
        }
        prev = (t.alpha, t.f, t.df);
        if alpha >= ALPHA_MAX {
            break;
        }
        alpha = (2.0 * alpha).min(ALPHA_MAX);
    }
    None
}

/// Shrinks a bracket `(lo, hi)` around a strong Wolfe point. `lo` always
/// holds the lowest value satisfying sufficient decrease seen so far.
#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    eval: &mut F,
    x0: &Array1<f64>,
    f0: f64,
    d: &Array1<f64>,
    dg0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    cfg: &LbfgsConfig,
) -> Option<AcceptedStep>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    for _ in 0..cfg.max_line_search {
        let width = (hi.0 - lo.0).abs();
        if width < 1e-16 * lo.0.abs().max(1.0) {
            return None;
        }
        let alpha = interpolate(lo, hi);
        let t = try_alpha(eval, x0, d, alpha);
        if !t.f.is_finite() || t.f > f0 + cfg.c1 * alpha * dg0 || t.f >= lo.1 {
            hi = (t.alpha, t.f, t.df);
        } else {
            if t.df.abs() <= -cfg.c2 * dg0 {
                return Some(AcceptedStep {
                    alpha: t.alpha,
                    x: t.x,
                    f: t.f,
                    g: t.g,
                    wolfe_ok: true,
                });
            }
            if t.df * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (t.alpha, t.f, t.df);
        }
    }
    None
}

/// Minimizer of the cubic through two bracket ends with values and slopes,
/// clamped away from the ends; bisection when the cubic is undefined or
/// lands outside the safe interior.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, d0) = lo;
    let (a1, f1, d1) = hi;
    let mid = 0.5 * (a0 + a1);
    if !(f0.is_finite() && f1.is_finite() && d0.is_finite() && d1.is_finite()) || a0 == a1 {
        return mid;
    }
    let e = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = e * e - d0 * d1;
    if disc < 0.0 {
        return mid;
    }
    let sq = disc.sqrt() * (a1 - a0).signum();
    let denom = d1 - d0 + 2.0 * sq;
    if denom == 0.0 {
        return mid;
    }
    let cand = a1 - (a1 - a0) * (d1 + sq - e) / denom;
    let (inner, outer) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * (outer - inner);
    if cand.is_finite() && cand > inner + margin && cand < outer - margin {
        cand
    } else {
        mid
    }
}

/// Armijo backtracking from a unit step; the fallback when the Wolfe search
/// comes up empty.
fn backtrack_armijo<F>(
    eval: &mut F,
    x0: &Array1<f64>,
    f0: f64,
    d: &Array1<f64>,
    dg0: f64,
    cfg: &LbfgsConfig,
) -> Option<AcceptedStep>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let mut alpha = 1.0;
    for _ in 0..cfg.max_line_search {
        let t = try_alpha(eval, x0, d, alpha);
        if t.f.is_finite()
            && t.g.iter().all(|v| v.is_finite())
            && t.f <= f0 + cfg.c1 * alpha * dg0
        {
            return Some(AcceptedStep {
                alpha: t.alpha,
                x: t.x,
                f: t.f,
                g: t.g,
                wolfe_ok: false,
            });
        }
        alpha *= 0.5;
    }
    None
}
