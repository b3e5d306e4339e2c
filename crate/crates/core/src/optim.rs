//! Deterministic minimizers for smooth objectives on `Rᵖ`: limited-memory
//! BFGS with a strong-Wolfe line search, and gradient descent with
//! Armijo backtracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    QuasiNewtonLimitedMemory,
    GradientDescentBacktracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Curvature pairs kept by the quasi-Newton method.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once `‖∇f‖ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop once an accepted step lowers `f` by less than
    /// `loss_tol · max(|f|, f64::MIN_POSITIVE)`.
    pub loss_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::QuasiNewtonLimitedMemory,
            memory: 10,
            max_iters: 2000,
            grad_tol: 1e-8,
            loss_tol: 1e-13,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 40,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.memory == 0 {
            return bad("memory must be at least 1");
        }
        if !(self.grad_tol > 0.0 && self.loss_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return bad("line-search constants need 0 < c1 < c2 < 1");
        }
        if self.max_line_evals == 0 {
            return bad("max_line_evals must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradTol,
    LossTol,
    MaxIters,
    LineSearchFailed,
}

/// State after each accepted iteration.
#[derive(Debug, Clone)]
pub struct IterState<'a, T> {
    pub iter: usize,
    pub x: &'a [T],
    pub f: T,
    pub grad_norm: T,
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub f: T,
    pub grad: Vec<T>,
    pub iters: usize,
    pub evals: usize,
    pub termination: Termination,
}

struct Probe<T> {
    alpha: T,
    f: T,
    g: Vec<T>,
    slope: T,
}

fn step_to<T: Scalar>(x: &[T], p: &[T], alpha: T) -> Vec<T> {
    x.iter().zip(p).map(|(&xi, &pi)| xi + alpha * pi).collect()
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, kept
/// inside the middle 80% of the bracket.
fn cubic_step<T: Scalar>(a: &Probe<T>, b: &Probe<T>) -> T {
    let (lo, hi) = if a.alpha < b.alpha {
        (a.alpha, b.alpha)
    } else {
        (b.alpha, a.alpha)
    };
    let three = T::lit(3.0);
    let d1 = a.slope + b.slope - three * (a.f - b.f) / (a.alpha - b.alpha);
    let rad = d1 * d1 - a.slope * b.slope;
    let width = hi - lo;
    let guard = T::lit(0.1) * width;
    let mid = lo + width / T::lit(2.0);
    if !(rad >= T::zero()) {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * rad.sqrt();
    let denom = b.slope - a.slope + T::lit(2.0) * d2;
    if denom == T::zero() {
        return mid;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / denom;
    if !t.is_finite() || t < lo + guard || t > hi - guard {
        mid
    } else {
        t
    }
}

/// Strong-Wolfe line search. Returns `None` when no acceptable step is
/// found within the evaluation budget.
fn strong_wolfe<T: Scalar>(
    f: &mut impl FnMut(&[T]) -> Result<(T, Vec<T>)>,
    x: &[T],
    f0: T,
    slope0: T,
    p: &[T],
    alpha_init: T,
    cfg: &OptimizerConfig,
    evals: &mut usize,
) -> Result<Option<Probe<T>>> {
    let c1 = T::lit(cfg.c1);
    let c2 = T::lit(cfg.c2);
    let mut eval = |alpha: T, evals: &mut usize| -> Result<Probe<T>> {
        *evals += 1;
        let (fa, ga) = f(&step_to(x, p, alpha))?;
        let slope = dot(&ga, p);
        Ok(Probe {
            alpha,
            f: fa,
            g: ga,
            slope,
        })
    };
    let armijo = |pr: &Probe<T>| pr.f.is_finite() && pr.f <= f0 + c1 * pr.alpha * slope0;
    let curvature = |pr: &Probe<T>| pr.slope.abs() <= -c2 * slope0;

    let mut prev = Probe {
        alpha: T::zero(),
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let mut alpha = alpha_init;
    let mut used = 0;
    let (mut lo, mut hi) = loop {
        if used >= cfg.max_line_evals {
            return Ok(None);
        }
        used += 1;
        let cur = eval(alpha, evals)?;
        if !armijo(&cur) || (used > 1 && cur.f >= prev.f) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.slope >= T::zero() {
            break (cur, prev);
        }
        alpha = cur.alpha * T::lit(2.0);
        prev = cur;
    };
    // Zoom: `lo` satisfies sufficient decrease and has the lower value.
    while used < cfg.max_line_evals {
        used += 1;
        let t = if hi.f.is_finite() && hi.slope.is_finite() {
            cubic_step(&lo, &hi)
        } else {
            (lo.alpha + hi.alpha) / T::lit(2.0)
        };
        if (t - lo.alpha).abs() <= T::eps() * lo.alpha.abs().max(T::one()) {
            break;
        }
        let cur = eval(t, evals)?;
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= T::zero() {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Budget exhausted: accept the best sufficient-decrease point, if any.
    Ok(if lo.alpha > T::zero() { Some(lo) } else { None })
}

fn two_loop<T: Scalar>(g: &[T], hist: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, &yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, &si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|&v| -v).collect()
}

/// Minimizes `f` from `x0`. `observe` sees the starting point (iteration 0)
/// and every accepted iterate.
pub fn minimize<T: Scalar>(
    x0: Vec<T>,
    mut f: impl FnMut(&[T]) -> Result<(T, Vec<T>)>,
    cfg: &OptimizerConfig,
    mut observe: impl FnMut(&IterState<'_, T>),
) -> Result<Minimum<T>> {
    cfg.validate()?;
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut evals = 1;
    if !fx.is_finite() {
        return Err(Error::Divergence("non-finite objective at the starting point".into()));
    }
    observe(&IterState {
        iter: 0,
        x: &x,
        f: fx,
        grad_norm: norm(&g),
    });
    let mut hist: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(cfg.memory);
    let mut gd_alpha = T::one();
    let mut iters = 0;
    let termination = loop {
        let gn = norm(&g);
        if gn <= T::lit(cfg.grad_tol) {
            break Termination::GradTol;
        }
        if iters >= cfg.max_iters {
            break Termination::MaxIters;
        }
        let probe = match cfg.method {
            Method::QuasiNewtonLimitedMemory => {
                let mut p = two_loop(&g, &hist);
                let mut slope = dot(&g, &p);
                if !(slope < T::zero()) {
                    hist.clear();
                    p = g.iter().map(|&v| -v).collect();
                    slope = -gn * gn;
                }
                let alpha0 = if hist.is_empty() {
                    (T::one() / gn).min(T::one())
                } else {
                    T::one()
                };
                let found = strong_wolfe(&mut f, &x, fx, slope, &p, alpha0, cfg, &mut evals)?;
                match found {
                    Some(pr) => Some((p, pr)),
                    None if !hist.is_empty() => {
                        // retry once along the steepest-descent direction
                        hist.clear();
                        let p: Vec<T> = g.iter().map(|&v| -v).collect();
                        let a0 = (T::one() / gn).min(T::one());
                        strong_wolfe(&mut f, &x, fx, -gn * gn, &p, a0, cfg, &mut evals)?.map(|pr| (p, pr))
                    }
                    None => None,
                }
            }
            Method::GradientDescentBacktracking => {
                let p: Vec<T> = g.iter().map(|&v| -v).collect();
                let slope = -gn * gn;
                let mut alpha = gd_alpha;
                let mut found = None;
                for _ in 0..cfg.max_line_evals {
                    evals += 1;
                    let (fa, ga) = f(&step_to(&x, &p, alpha))?;
                    if fa.is_finite() && fa <= fx + T::lit(cfg.c1) * alpha * slope {
                        found = Some(Probe {
                            alpha,
                            f: fa,
                            slope: dot(&ga, &p),
                            g: ga,
                        });
                        break;
                    }
                    alpha = alpha / T::lit(2.0);
                }
                if let Some(pr) = &found {
                    gd_alpha = pr.alpha * T::lit(2.0);
                }
                found.map(|pr| (p, pr))
            }
        };
        let Some((p, pr)) = probe else {
            break Termination::LineSearchFailed;
        };
        let x_new = step_to(&x, &p, pr.alpha);
        let s: Vec<T> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = pr.g.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if cfg.method == Method::QuasiNewtonLimitedMemory && sy > T::lit(1e-10) * norm(&s) * norm(&y) {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, sy.recip()));
        }
        let decrease = fx - pr.f;
        x = x_new;
        fx = pr.f;
        g = pr.g;
        iters += 1;
        observe(&IterState {
            iter: iters,
            x: &x,
            f: fx,
            grad_norm: norm(&g),
        });
        if decrease < T::lit(cfg.loss_tol) * fx.abs().max(T::min_positive_value()) {
            break Termination::LossTol;
        }
    };
    Ok(Minimum {
        x,
        f: fx,
        grad: g,
        iters,
        evals,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let cfg = OptimizerConfig {
            grad_tol: 1e-10,
            loss_tol: 1e-30,
            ..Default::default()
        };
        let mut fs = Vec::new();
        let m = minimize(vec![-1.2, 1.0], rosenbrock, &cfg, |s| fs.push(s.f)).unwrap();
        assert_eq!(m.termination, Termination::GradTol);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8);
        assert!(fs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gd_descends_on_quadratic() {
        let cfg = OptimizerConfig {
            method: Method::GradientDescentBacktracking,
            grad_tol: 1e-9,
            loss_tol: 1e-30,
            ..Default::default()
        };
        let quad = |x: &[f64]| Ok((x[0] * x[0] + 10.0 * x[1] * x[1], vec![2.0 * x[0], 20.0 * x[1]]));
        let m = minimize(vec![3.0, -1.0], quad, &cfg, |_| {}).unwrap();
        assert_eq!(m.termination, Termination::GradTol);
        assert!(m.f < 1e-17);
    }

    #[test]
    fn zero_iterations_returns_start() {
        let cfg = OptimizerConfig {
            max_iters: 0,
            ..Default::default()
        };
        let m = minimize(vec![-1.2, 1.0], rosenbrock, &cfg, |_| {}).unwrap();
        assert_eq!(m.x, vec![-1.2, 1.0]);
        assert_eq!(m.termination, Termination::MaxIters);
    }

    #[test]
    fn config_validation() {
        let mut cfg = OptimizerConfig::default();
        cfg.memory = 0;
        assert!(cfg.validate().is_err());
        let cfg = OptimizerConfig {
            c1: 0.95,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
