//! Preconditioned gradient descent on the per-prompt least-squares
//! objective, written with plain loops so that it shares no arithmetic with
//! the transformer forward pass.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::sampler::{build_z0, Prompt};
use crate::scalar::Scalar;
use crate::transformer::{forward_recorded, predict, TransformerParams, Variant};

/// Iterates `w₀ = 0, w₁, …, w_k` and the objective at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct GDTrajectory<T> {
    pub iterates: Vec<Vec<T>>,
    pub objective: Vec<T>,
}

impl<T: Scalar> GDTrajectory<T> {
    /// `iteration,R,w_0,…,w_{d-1}` rows.
    pub fn to_csv(&self) -> String {
        let d = self.iterates.first().map_or(0, Vec::len);
        let mut out = String::from("iteration,R");
        for j in 0..d {
            let _ = write!(out, ",w_{j}");
        }
        out.push('\n');
        for (i, (w, r)) in self.iterates.iter().zip(&self.objective).enumerate() {
            let _ = write!(out, "{i},{:.16e}", r.as_f64());
            for x in w {
                let _ = write!(out, ",{:.16e}", x.as_f64());
            }
            out.push('\n');
        }
        out
    }
}

/// `R(w) = (1/2n) Σ_{i≤n} ⟨w − w★, x_i⟩²` and its gradient
/// `(1/n) X̄ X̄ᵀ (w − w★)`.
pub fn regression_objective<T: Scalar>(prompt: &Prompt<T>, w: &[T]) -> Result<(T, Vec<T>)> {
    let d = prompt.d();
    let n = prompt.n();
    if w.len() != d || prompt.w_star.len() != d {
        return Err(shape_err(format!("w has length {}, expected {d}", w.len())));
    }
    let inv_n = T::from_count(n).recip();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); d];
    for i in 0..n {
        let mut r = T::zero();
        for j in 0..d {
            r += (w[j] - prompt.w_star[j]) * prompt.x[(j, i)];
        }
        value += r * r;
        for j in 0..d {
            grad[j] += inv_n * r * prompt.x[(j, i)];
        }
    }
    Ok((value * inv_n / T::lit(2.0), grad))
}

/// `w_{i+1} = w_i + A_i ∇R(w_i)` from `w₀ = 0`.
pub fn precond_gd<T: Scalar>(prompt: &Prompt<T>, a_list: &[Matrix<T>]) -> Result<GDTrajectory<T>> {
    let d = prompt.d();
    let mut w = vec![T::zero(); d];
    let (r0, mut g) = regression_objective(prompt, &w)?;
    let mut iterates = vec![w.clone()];
    let mut objective = vec![r0];
    for a in a_list {
        if a.rows() != d || a.cols() != d {
            return Err(shape_err(format!(
                "preconditioner is {:?}, expected {d}×{d}",
                a.shape()
            )));
        }
        let mut next = w.clone();
        for (j, slot) in next.iter_mut().enumerate() {
            for k in 0..d {
                *slot += a[(j, k)] * g[k];
            }
        }
        w = next;
        let (r, gn) = regression_objective(prompt, &w)?;
        g = gn;
        iterates.push(w.clone());
        objective.push(r);
    }
    Ok(GDTrajectory { iterates, objective })
}

/// Largest gap between the transformer prediction after each layer and
/// the oracle prediction `⟨x_q, w_i⟩`.
pub fn check_lemma1<T: Scalar>(prompt: &Prompt<T>, params: &TransformerParams<T>) -> Result<T> {
    if params.variant() != Variant::Sparse {
        return Err(Error::UnsupportedVariant(format!(
            "the gradient-descent correspondence needs a sparse stack, got {}",
            params.variant()
        )));
    }
    let a_list: Vec<Matrix<T>> = params
        .a_matrices()
        .expect("sparse stack")
        .into_iter()
        .cloned()
        .collect();
    let traj = precond_gd(prompt, &a_list)?;
    let zs = forward_recorded(&build_z0(prompt), params)?;
    let xq = prompt.query();
    let mut gap = T::zero();
    for (z, w) in zs.iter().zip(&traj.iterates) {
        let oracle = xq.iter().zip(w).fold(T::zero(), |acc, (&x, &wi)| acc + x * wi);
        gap = gap.max((predict(z) - oracle).abs());
    }
    Ok(gap)
}

/// `X + (1/n) B X M Xᵀ A X`, the covariate half of a GD++ layer.
pub fn gdpp_covariate_step<T: Scalar>(x: &Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let d = x.rows();
    let cols = x.cols();
    if cols < 2 || a.shape() != (d, d) || b.shape() != (d, d) {
        return Err(shape_err("covariate step needs X: d×(n+1) with n ≥ 1 and d×d A, B"));
    }
    let n = cols - 1;
    let inv_n = T::from_count(n).recip();
    // G = Xᵀ A X, (n+1)×(n+1)
    let mut ax = vec![T::zero(); d * cols];
    for i in 0..d {
        for c in 0..cols {
            let mut s = T::zero();
            for k in 0..d {
                s += a[(i, k)] * x[(k, c)];
            }
            ax[i * cols + c] = s;
        }
    }
    let mut bx = vec![T::zero(); d * n];
    for i in 0..d {
        for c in 0..n {
            let mut s = T::zero();
            for k in 0..d {
                s += b[(i, k)] * x[(k, c)];
            }
            bx[i * n + c] = s;
        }
    }
    let mut out = x.clone();
    for c in 0..cols {
        // (Xᵀ A X)[m, c] for the masked rows m < n
        let g: Vec<T> = (0..n)
            .map(|m| (0..d).fold(T::zero(), |acc, k| acc + x[(k, m)] * ax[k * cols + c]))
            .collect();
        for i in 0..d {
            let mut s = T::zero();
            for m in 0..n {
                s += bx[i * n + m] * g[m];
            }
            out[(i, c)] += inv_n * s;
        }
    }
    Ok(out)
}
