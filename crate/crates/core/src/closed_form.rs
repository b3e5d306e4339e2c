//! The global optimum of a single unconstrained layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{mean_and_se, single_layer_prompt_grad, Batch, SingleLayerParams};
use crate::sampler::{CovarianceSpec, WeightPrior};
use crate::scalar::Scalar;

/// `b = e_{d+1}`, `A = −[Γ; 0]` where `Γ` shares the eigenvectors of `Σ`
/// and maps eigenvalue `λ_i` to `s_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OptimalSingleLayer<T> {
    /// Paired with the eigenvalues as returned by [`CovarianceSpec::eigenvalues`].
    pub s: Vec<T>,
    pub b: Vec<T>,
    #[serde(rename = "A")]
    pub a: Matrix<T>,
}

impl<T: Scalar> OptimalSingleLayer<T> {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn params(&self) -> SingleLayerParams<T> {
        SingleLayerParams {
            b: self.b.clone(),
            a: self.a.clone(),
        }
    }

    /// The `d × d` block `−Γ`.
    pub fn top_block(&self) -> Matrix<T> {
        let d = self.dim();
        self.a.block(0, 0, d, d)
    }
}

/// `s_i = 1 / ((n+1)/n · λ_i + (1/n) Σ_k λ_k)`.
pub fn eigen_scales<T: Scalar>(eigenvalues: &[T], n: usize) -> Vec<T> {
    let nn = T::from_count(n);
    let total: T = eigenvalues.iter().copied().sum();
    eigenvalues
        .iter()
        .map(|&l| ((nn + T::one()) / nn * l + total / nn).recip())
        .collect()
}

pub fn optimal_single_layer<T: Scalar>(spec: &CovarianceSpec<T>, n: usize) -> Result<OptimalSingleLayer<T>> {
    if n == 0 {
        return Err(Error::InvalidLength("prompt length n must be at least 1".into()));
    }
    let d = spec.dim();
    let lambdas = spec.eigenvalues();
    let s = eigen_scales(&lambdas, n);
    // Σ's eigenvalue λ_k = d_k², so Γ is a function of the entries d_k.
    let nn = T::from_count(n);
    let total: T = lambdas.iter().copied().sum();
    let gamma = spec.spectral_fn(|dk| ((nn + T::one()) / nn * dk * dk + total / nn).recip());
    let mut a = Matrix::zeros(d + 1, d);
    a.set_block(0, 0, &gamma.symmetrized().scale(-T::one()));
    let mut b = vec![T::zero(); d + 1];
    b[d] = T::one();
    Ok(OptimalSingleLayer { s, b, a })
}

/// `1 / ((n−1)/n + (d+2)/n)`, the common scale when `Σ = I`.
pub fn isotropic_scale<T: Scalar>(n: usize, d: usize) -> T {
    let nn = T::from_count(n);
    (T::from_count(n - 1) / nn + T::from_count(d + 2) / nn).recip()
}

/// Monte-Carlo gradient of the reduced single-layer loss at a point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StationarityReport<T> {
    pub grad_norm: T,
    /// Norm of the per-coordinate standard errors.
    pub standard_error: T,
    /// Coordinates ordered as `b` then row-major `A`.
    pub mean: Vec<T>,
    pub se: Vec<T>,
}

impl<T: Scalar> StationarityReport<T> {
    /// Largest `|mean| / se` over coordinates with nonzero spread.
    pub fn max_z(&self) -> T {
        self.mean
            .iter()
            .zip(&self.se)
            .filter(|(_, &s)| s > T::zero())
            .map(|(&m, &s)| m.abs() / s)
            .fold(T::zero(), T::max)
    }
}

pub fn stationarity_check<T: Scalar>(opt: &OptimalSingleLayer<T>, batch: &Batch<T>) -> Result<StationarityReport<T>> {
    if let Some(m) = batch.manifest() {
        if m.prior != WeightPrior::Isotropic {
            return Err(Error::Config(
                "the single-layer optimum assumes an isotropic weight prior".into(),
            ));
        }
    }
    if batch.d() != opt.dim() {
        return Err(crate::error::shape_err("optimum and batch dimensions differ"));
    }
    let slp = opt.params();
    let n = batch.n();
    let per: Vec<Vec<T>> = batch
        .moments()
        .par_iter()
        .map(|m| {
            let (_, g) = single_layer_prompt_grad(&slp, m, n);
            g.b.into_iter().chain(g.a.into_vec()).collect()
        })
        .collect();
    let k = per[0].len();
    let (mean, se): (Vec<T>, Vec<T>) = (0..k)
        .map(|j| mean_and_se(&per.iter().map(|v| v[j]).collect::<Vec<_>>()))
        .unzip();
    let norm = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>().sqrt();
    Ok(StationarityReport {
        grad_norm: norm(&mean),
        standard_error: norm(&se),
        mean,
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{make_covariance, Basis};

    #[test]
    fn isotropic_values() {
        assert!((isotropic_scale::<f64>(20, 5) - 1.0 / 1.3).abs() < 1e-15);
        assert!((isotropic_scale::<f64>(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((isotropic_scale::<f64>(1_000_000, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn anisotropic_scales() {
        let spec = make_covariance::<f64>(2, &[1.0, 2.0], Basis::Identity).unwrap();
        let opt = optimal_single_layer(&spec, 4).unwrap();
        assert!((opt.s[0] - 0.4).abs() < 1e-15);
        assert!((opt.s[1] - 0.16).abs() < 1e-15);
        assert!((opt.a[(0, 0)] + 0.4).abs() < 1e-15);
        assert!((opt.a[(1, 1)] + 0.16).abs() < 1e-15);
        assert_eq!(opt.a[(2, 0)], 0.0);
        assert_eq!(opt.b, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn n_zero_rejected() {
        let spec = CovarianceSpec::<f64>::isotropic(2).unwrap();
        assert!(optimal_single_layer(&spec, 0).is_err());
    }
}
