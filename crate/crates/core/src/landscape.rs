//! Diagnostics around the family of parameters with `A_i ∝ Σ⁻¹` (and
//! `B_i ∝ I`): distances to scaled identities, projections of gradients
//! onto that family, a flow that stays inside it, and exact symmetries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{sym_eigen, Matrix};
use crate::loss::{loss_and_grad, map_prompt_grads, moment_loss, per_prompt_sq_error, Batch, GradientBundle};
use crate::sampler::{CovarianceSpec, Prompt};
use crate::scalar::Scalar;
use crate::transformer::{symmetric_checked, TransformerParams, Variant};

/// `‖M − αI‖_F / ‖M‖_F` with `α = tr(M)/d`.
pub fn dist_to_identity<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    if !m.is_square() {
        return Err(shape_err(format!("Dist needs a square matrix, got {:?}", m.shape())));
    }
    let norm = m.frobenius_norm();
    if norm == T::zero() {
        return Err(Error::UndefinedMetric("Dist of the zero matrix".into()));
    }
    let alpha = m.trace() / T::from_count(m.rows());
    let mut r = m.clone();
    for i in 0..m.rows() {
        r[(i, i)] -= alpha;
    }
    Ok(r.frobenius_norm() / norm)
}

/// Dist of `Σ^{1/2} M Σ^{1/2}`.
pub fn whitened_dist<T: Scalar>(m: &Matrix<T>, spec: &CovarianceSpec<T>) -> Result<T> {
    dist_to_identity(&whiten(m, spec)?)
}

pub fn whiten<T: Scalar>(m: &Matrix<T>, spec: &CovarianceSpec<T>) -> Result<Matrix<T>> {
    let h = spec.sigma_half();
    if m.shape() != h.shape() {
        return Err(shape_err("matrix and covariance dimensions differ"));
    }
    Ok(h.matmul(m).matmul(h))
}

/// `(1/d) tr(Σ^{1/2} G Σ^{1/2})`, computed as `(1/d) tr(Σ G)`.
fn r_scalar<T: Scalar>(g: &Matrix<T>, spec: &CovarianceSpec<T>) -> T {
    spec.sigma().frobenius_dot(&g.transpose()) / T::from_count(spec.dim())
}

/// `(1/d) tr(Σ^{-1/2} H Σ^{1/2})`, which is similarity invariant.
fn s_scalar<T: Scalar>(h: &Matrix<T>, spec: &CovarianceSpec<T>) -> T {
    spec.sigma_inv_half().matmul(h).matmul(spec.sigma_half()).trace() / T::from_count(spec.dim())
}

pub fn s_project_sparse<T: Scalar>(grads: &GradientBundle<T>, spec: &CovarianceSpec<T>) -> Result<Vec<T>> {
    match grads {
        GradientBundle::Sparse { da } => Ok(da.iter().map(|g| r_scalar(g, spec)).collect()),
        other => Err(Error::UnsupportedVariant(format!(
            "expected a sparse bundle, got {}",
            other.variant()
        ))),
    }
}

pub fn s_project_full<T: Scalar>(grads: &GradientBundle<T>, spec: &CovarianceSpec<T>) -> Result<(Vec<T>, Vec<T>)> {
    match grads {
        GradientBundle::Gdpp { da, db } => Ok((
            da.iter().map(|g| r_scalar(g, spec)).collect(),
            db.iter().map(|h| s_scalar(h, spec)).collect(),
        )),
        other => Err(Error::UnsupportedVariant(format!(
            "expected a GD++ bundle, got {}",
            other.variant()
        ))),
    }
}

/// The direction `R̃_i = r_i Σ⁻¹` built from the projection of `direction`.
pub fn s_projected_direction<T: Scalar>(
    direction: &GradientBundle<T>,
    spec: &CovarianceSpec<T>,
) -> Result<GradientBundle<T>> {
    let inv = spec.sigma_inv();
    match direction {
        GradientBundle::Sparse { .. } => Ok(GradientBundle::Sparse {
            da: s_project_sparse(direction, spec)?
                .into_iter()
                .map(|r| inv.scale(r))
                .collect(),
        }),
        GradientBundle::Gdpp { .. } => {
            let (r, s) = s_project_full(direction, spec)?;
            let eye = Matrix::identity(spec.dim());
            Ok(GradientBundle::Gdpp {
                da: r.into_iter().map(|r| inv.scale(r)).collect(),
                db: s.into_iter().map(|s| eye.scale(s)).collect(),
            })
        }
        GradientBundle::Full { .. } => Err(Error::UnsupportedVariant("full bundles have no S-projection".into())),
    }
}

fn check_direction<T: Scalar>(params: &TransformerParams<T>, direction: &GradientBundle<T>) -> Result<()> {
    let zero = GradientBundle::zeros_like(params);
    if zero.variant() != direction.variant() || zero.flatten().len() != direction.flatten().len() {
        return Err(shape_err("direction does not match the parameter layout"));
    }
    Ok(())
}

/// `⟨∇f(params), direction⟩` on the batch.
pub fn directional_derivative<T: Scalar>(
    params: &TransformerParams<T>,
    direction: &GradientBundle<T>,
    batch: &Batch<T>,
) -> Result<T> {
    check_direction(params, direction)?;
    let (_, g) = loss_and_grad(params, batch)?;
    Ok(g.dot(direction))
}

/// Per-prompt values whose mean is [`directional_derivative`].
pub fn directional_derivative_samples<T: Scalar>(
    params: &TransformerParams<T>,
    direction: &GradientBundle<T>,
    batch: &Batch<T>,
) -> Result<Vec<T>> {
    check_direction(params, direction)?;
    map_prompt_grads(params, batch, |_, g| g.dot(direction))
}

/// `A_i = a_i Σ⁻¹`.
#[derive(Debug, Clone)]
pub struct SPointSparse<'s, T> {
    pub a: Vec<T>,
    pub spec: &'s CovarianceSpec<T>,
}

impl<T: Scalar> SPointSparse<'_, T> {
    pub fn materialize(&self) -> Result<TransformerParams<T>> {
        let inv = self.spec.sigma_inv();
        TransformerParams::sparse(self.a.iter().map(|&a| inv.scale(a)).collect())
    }
}

/// `A_i = a_i Σ⁻¹`, `B_i = b_i I`.
#[derive(Debug, Clone)]
pub struct SPointFull<'s, T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub spec: &'s CovarianceSpec<T>,
}

impl<T: Scalar> SPointFull<'_, T> {
    pub fn materialize(&self) -> Result<TransformerParams<T>> {
        if self.a.len() != self.b.len() {
            return Err(shape_err("a and b scalars differ in length"));
        }
        let inv = self.spec.sigma_inv();
        let eye = Matrix::identity(self.spec.dim());
        TransformerParams::gdpp(
            self.a
                .iter()
                .zip(&self.b)
                .map(|(&a, &b)| (inv.scale(a), eye.scale(b)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub enum SPoint<'s, T> {
    Sparse(SPointSparse<'s, T>),
    Full(SPointFull<'s, T>),
}

impl<'s, T: Scalar> SPoint<'s, T> {
    fn spec(&self) -> &'s CovarianceSpec<T> {
        match self {
            Self::Sparse(p) => p.spec,
            Self::Full(p) => p.spec,
        }
    }

    fn a(&self) -> &[T] {
        match self {
            Self::Sparse(p) => &p.a,
            Self::Full(p) => &p.a,
        }
    }

    fn b(&self) -> Option<&[T]> {
        match self {
            Self::Sparse(_) => None,
            Self::Full(p) => Some(&p.b),
        }
    }

    pub fn materialize(&self) -> Result<TransformerParams<T>> {
        match self {
            Self::Sparse(p) => p.materialize(),
            Self::Full(p) => p.materialize(),
        }
    }

    fn with(&self, a: Vec<T>, b: Option<Vec<T>>) -> Self {
        let spec = self.spec();
        match b {
            None => Self::Sparse(SPointSparse { a, spec }),
            Some(b) => Self::Full(SPointFull { a, b, spec }),
        }
    }
}

impl<'s, T> From<SPointSparse<'s, T>> for SPoint<'s, T> {
    fn from(p: SPointSparse<'s, T>) -> Self {
        Self::Sparse(p)
    }
}

impl<'s, T> From<SPointFull<'s, T>> for SPoint<'s, T> {
    fn from(p: SPointFull<'s, T>) -> Self {
        Self::Full(p)
    }
}

/// One row per accepted step, starting with the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FlowRecord<T> {
    pub step: Vec<usize>,
    /// Accumulated flow time.
    pub time: Vec<T>,
    pub loss: Vec<T>,
    pub a: Vec<Vec<T>>,
    pub b: Option<Vec<Vec<T>>>,
    pub r: Vec<Vec<T>>,
    pub s: Option<Vec<Vec<T>>>,
    /// `Σ r_i²` plus `Σ s_i²` when present.
    pub projected_grad_sq: Vec<T>,
}

impl<T: Scalar> FlowRecord<T> {
    pub fn final_loss(&self) -> T {
        *self.loss.last().expect("flow records start nonempty")
    }

    pub fn to_csv(&self) -> String {
        let k = self.a.first().map_or(0, Vec::len);
        let mut out = String::from("step,time,loss");
        for i in 0..k {
            let _ = write!(out, ",r_{i}");
        }
        if self.s.is_some() {
            for i in 0..k {
                let _ = write!(out, ",s_{i}");
            }
        }
        for i in 0..k {
            let _ = write!(out, ",a_{i}");
        }
        if self.b.is_some() {
            for i in 0..k {
                let _ = write!(out, ",b_{i}");
            }
        }
        out.push('\n');
        for row in 0..self.step.len() {
            let _ = write!(
                out,
                "{},{:.16e},{:.16e}",
                self.step[row],
                self.time[row].as_f64(),
                self.loss[row].as_f64()
            );
            let mut cols: Vec<&[T]> = vec![&self.r[row]];
            if let Some(s) = &self.s {
                cols.push(&s[row]);
            }
            cols.push(&self.a[row]);
            if let Some(b) = &self.b {
                cols.push(&b[row]);
            }
            for x in cols.into_iter().flatten() {
                let _ = write!(out, ",{:.16e}", x.as_f64());
            }
            out.push('\n');
        }
        out
    }
}

/// Halvings tried before a step is abandoned.
const MAX_HALVINGS: usize = 60;
/// Step growth after an accepted step.
const STEP_GROWTH: f64 = 1.25;

/// Explicit Euler on `ȧ_i = −d·r_i` (and `ḃ_i = −d·s_i`), halving the step
/// whenever the fixed-batch loss would increase.
pub fn constrained_flow<'s, T: Scalar>(
    init: impl Into<SPoint<'s, T>>,
    batch: &Batch<T>,
    step: T,
    iters: usize,
) -> Result<FlowRecord<T>> {
    let init = init.into();
    if step < T::zero() || !step.is_finite() {
        return Err(Error::Config(format!(
            "flow step must be finite and nonnegative, got {step}"
        )));
    }
    let spec = init.spec();
    let dd = T::from_count(spec.dim());
    let eval = |p: &SPoint<'s, T>| -> Result<(T, Vec<T>, Option<Vec<T>>)> {
        let (l, g) = loss_and_grad(&p.materialize()?, batch)?;
        match p {
            SPoint::Sparse(_) => Ok((l, s_project_sparse(&g, spec)?, None)),
            SPoint::Full(_) => {
                let (r, s) = s_project_full(&g, spec)?;
                Ok((l, r, Some(s)))
            }
        }
    };
    let sq = |r: &[T], s: &Option<Vec<T>>| r.iter().chain(s.iter().flatten()).map(|&x| x * x).sum::<T>();
    let mut point = init.clone();
    let (mut loss, mut r, mut s) = eval(&point)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at the initial point a = {:?}",
            point.a()
        )));
    }
    let mut rec = FlowRecord {
        step: vec![0],
        time: vec![T::zero()],
        loss: vec![loss],
        a: vec![point.a().to_vec()],
        b: point.b().map(|b| vec![b.to_vec()]),
        r: vec![r.clone()],
        s: s.clone().map(|s| vec![s]),
        projected_grad_sq: vec![sq(&r, &s)],
    };
    let mut h = step;
    let mut time = T::zero();
    for it in 1..=iters {
        let mut accepted = None;
        let mut trial = h;
        for _ in 0..=MAX_HALVINGS {
            let a: Vec<T> = point.a().iter().zip(&r).map(|(&a, &ri)| a - trial * dd * ri).collect();
            let b = point
                .b()
                .zip(s.as_ref())
                .map(|(b, s)| b.iter().zip(s).map(|(&b, &si)| b - trial * dd * si).collect());
            let cand = point.with(a, b);
            let cand_loss = moment_loss(&cand.materialize()?, batch)?;
            if cand_loss.is_finite() && cand_loss <= loss {
                accepted = Some((cand, trial));
                break;
            }
            trial = trial / T::lit(2.0);
        }
        // No decrease at any tried step: stay put for this step.
        let (next, used) = accepted.unwrap_or_else(|| (point.clone(), T::zero()));
        let (l, rn, sn) = eval(&next)?;
        if !l.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss after step {it}; last valid a = {:?}",
                point.a()
            )));
        }
        point = next;
        loss = l;
        r = rn;
        s = sn;
        time += used;
        if used > T::zero() {
            h = used * T::lit(STEP_GROWTH);
        }
        rec.step.push(it);
        rec.time.push(time);
        rec.loss.push(loss);
        rec.a.push(point.a().to_vec());
        if let Some(b) = rec.b.as_mut() {
            b.push(point.b().expect("full point").to_vec());
        }
        rec.r.push(r.clone());
        if let Some(sv) = rec.s.as_mut() {
            sv.push(s.clone().expect("full point"));
        }
        rec.projected_grad_sq.push(sq(&r, &s));
    }
    Ok(rec)
}

/// `|ℓ(A) − ℓ(A with layers i, j exchanged)|` on one prompt.
pub fn swap_invariance_check<T: Scalar>(
    prompt: &Prompt<T>,
    spoint: &SPointSparse<'_, T>,
    i: usize,
    j: usize,
) -> Result<T> {
    let params = spoint.materialize()?;
    let swapped = params.swapped(i, j)?;
    Ok((per_prompt_sq_error(&params, prompt)? - per_prompt_sq_error(&swapped, prompt)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment<T> {
    /// Off-diagonal Frobenius mass of `Vᵀ A₁ V` over `‖A₁‖_F`.
    pub value: T,
    /// Some eigenvalue gap of `A₀` is below [`DEGENERACY_GAP`].
    pub degenerate: bool,
}

pub const DEGENERACY_GAP: f64 = 1e-8;

/// How far `A₁` is from diagonal in the eigenbasis of `A₀`.
pub fn diagonal_alignment<T: Scalar>(a0: &Matrix<T>, a1: &Matrix<T>) -> Result<Alignment<T>> {
    if !a0.is_square() || a0.shape() != a1.shape() {
        return Err(shape_err("alignment needs two square matrices of equal size"));
    }
    let a0 = symmetric_checked(a0.clone(), "A₀")?;
    let a1 = symmetric_checked(a1.clone(), "A₁")?;
    let norm = a1.frobenius_norm();
    if norm == T::zero() {
        return Err(Error::UndefinedMetric("alignment against a zero matrix".into()));
    }
    let (vals, v) = sym_eigen(&a0);
    let degenerate = vals.windows(2).any(|w| (w[1] - w[0]).abs() < T::lit(DEGENERACY_GAP));
    let rot = v.tr_matmul(&a1).matmul(&v);
    let off: T = (0..rot.rows())
        .flat_map(|i| (0..rot.cols()).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| rot[(i, j)] * rot[(i, j)])
        .sum();
    Ok(Alignment {
        value: off.sqrt() / norm,
        degenerate,
    })
}

/// The variant a flow over `point` works with.
pub fn spoint_variant<T>(point: &SPoint<'_, T>) -> Variant {
    match point {
        SPoint::Sparse(_) => Variant::Sparse,
        SPoint::Full(_) => Variant::Gdpp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{make_covariance, Basis};

    #[test]
    fn dist_hand_values() {
        let eye = Matrix::<f64>::identity(3).scale(3.0);
        assert_eq!(dist_to_identity(&eye).unwrap(), 0.0);
        let m = Matrix::from_diag(&[2.0, 0.0]);
        assert!((dist_to_identity(&m).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let skew = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(dist_to_identity(&skew).unwrap(), 1.0);
        assert!(dist_to_identity(&Matrix::<f64>::zeros(2, 2)).is_err());
    }

    #[test]
    fn projection_hand_values() {
        let spec = make_covariance::<f64>(1, &[2.0], Basis::Identity).unwrap();
        let g = GradientBundle::Sparse {
            da: vec![Matrix::from_rows(&[vec![2.0]]).unwrap()],
        };
        assert!((s_project_sparse(&g, &spec).unwrap()[0] - 8.0).abs() < 1e-14);
        let spec2 = make_covariance::<f64>(2, &[1.0, 2.0], Basis::Identity).unwrap();
        let h = GradientBundle::Gdpp {
            da: vec![Matrix::zeros(2, 2)],
            db: vec![spec2.sigma().clone()],
        };
        let (r, s) = s_project_full(&h, &spec2).unwrap();
        assert_eq!(r, vec![0.0]);
        assert!((s[0] - 2.5).abs() < 1e-14);
        assert!(s_project_full(&g, &spec).is_err());
    }
}
