//! The in-context regression task distribution: covariance specs, weight
//! priors, prompts and their token matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, householder_qr, Matrix};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Largest tolerated `‖UᵀU − I‖_F` for an explicitly supplied basis.
pub fn orthogonality_tol<T: Scalar>(d: usize) -> T {
    T::lit(1e-12).max(T::eps() * T::lit(64.0 * d as f64))
}

/// Where the eigenbasis `U` of a covariance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis<T> {
    Identity,
    Haar(u64),
    Explicit(Matrix<T>),
}

/// `Σ = Uᵀ diag(d_entries)² U` together with its cached matrix powers.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec<T> {
    dim: usize,
    basis: Basis<T>,
    u: Matrix<T>,
    d_entries: Vec<T>,
    sigma: Matrix<T>,
    sigma_inv: Matrix<T>,
    sigma_half: Matrix<T>,
    sigma_inv_half: Matrix<T>,
}

impl<T: Scalar> CovarianceSpec<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn basis(&self) -> &Basis<T> {
        &self.basis
    }

    pub fn u(&self) -> &Matrix<T> {
        &self.u
    }

    pub fn d_entries(&self) -> &[T] {
        &self.d_entries
    }

    /// Eigenvalues `λ_i = d_i²` in the order of `d_entries`.
    pub fn eigenvalues(&self) -> Vec<T> {
        self.d_entries.iter().map(|&x| x * x).collect()
    }

    pub fn sigma(&self) -> &Matrix<T> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &Matrix<T> {
        &self.sigma_inv
    }

    pub fn sigma_half(&self) -> &Matrix<T> {
        &self.sigma_half
    }

    pub fn sigma_inv_half(&self) -> &Matrix<T> {
        &self.sigma_inv_half
    }

    /// `Uᵀ f(D) U` for a function of the diagonal entries of `D`.
    pub fn spectral_fn(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let d = self.dim;
        let mut out = Matrix::<T>::zeros(d, d);
        for (k, &dk) in self.d_entries.iter().enumerate() {
            let w = f(dk);
            let uk = self.u.row(k);
            out.add_outer(w, uk, uk);
        }
        out
    }

    /// Isotropic spec `Σ = I_d`.
    pub fn isotropic(d: usize) -> Result<Self> {
        make_covariance(d, &vec![T::one(); d], Basis::Identity)
    }
}

/// Uniformly distributed (Haar) orthogonal matrix: QR of a standard Gaussian
/// matrix with the signs of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal<T: Scalar>(d: usize, rng: RngStream) -> Result<Matrix<T>> {
    if d == 0 {
        return Err(Error::InvalidDimension("orthogonal matrix of dimension 0".into()));
    }
    let mut g = rng.generator();
    let gauss = Matrix::<T>::from_vec(d, d, g.normals(d * d));
    let (mut q, r) = householder_qr(&gauss);
    for j in 0..d {
        if r[(j, j)] < T::zero() {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

pub fn make_covariance<T: Scalar>(d: usize, d_entries: &[T], basis: Basis<T>) -> Result<CovarianceSpec<T>> {
    if d == 0 {
        return Err(Error::InvalidDimension("covariance of dimension 0".into()));
    }
    if d_entries.len() != d {
        return Err(Error::InvalidDimension(format!(
            "expected {d} diagonal entries, got {}",
            d_entries.len()
        )));
    }
    if let Some(bad) = d_entries.iter().find(|&&x| !(x > T::zero() && x.is_finite())) {
        return Err(Error::InvalidSpectrum(format!(
            "diagonal entry {bad} is not a positive finite number"
        )));
    }
    let u = match &basis {
        Basis::Identity => Matrix::identity(d),
        Basis::Haar(seed) => haar_orthogonal(d, RngStream::new(*seed, 0))?,
        Basis::Explicit(u) => {
            if u.shape() != (d, d) {
                return Err(Error::InvalidBasis(format!(
                    "basis has shape {:?}, expected ({d}, {d})",
                    u.shape()
                )));
            }
            let gap = u.orthogonality_gap();
            if !(gap <= orthogonality_tol::<T>(d)) {
                return Err(Error::InvalidBasis(format!("‖UᵀU − I‖_F = {gap:e}")));
            }
            u.clone()
        }
    };
    let mut spec = CovarianceSpec {
        dim: d,
        basis,
        u,
        d_entries: d_entries.to_vec(),
        sigma: Matrix::zeros(d, d),
        sigma_inv: Matrix::zeros(d, d),
        sigma_half: Matrix::zeros(d, d),
        sigma_inv_half: Matrix::zeros(d, d),
    };
    // Each power is assembled from the rank-one eigen-terms and then
    // symmetrized so the cached matrices are exactly symmetric.
    spec.sigma = spec.spectral_fn(|x| x * x).symmetrized();
    spec.sigma_inv = spec.spectral_fn(|x| (x * x).recip()).symmetrized();
    spec.sigma_half = spec.spectral_fn(|x| x).symmetrized();
    spec.sigma_inv_half = spec.spectral_fn(|x| x.recip()).symmetrized();
    Ok(spec)
}

/// JSON form: `{"d":…, "d_entries":[…], "u_seed":…}` or `{"…", "u":[[…]]}`;
/// neither key means `U = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFile {
    pub d: usize,
    pub d_entries: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<Vec<f64>>>,
}

impl CovarianceFile {
    pub fn build<T: Scalar>(&self) -> Result<CovarianceSpec<T>> {
        let entries: Vec<T> = self.d_entries.iter().map(|&x| T::lit(x)).collect();
        let basis = match (&self.u_seed, &self.u) {
            (Some(_), Some(_)) => return Err(Error::InvalidBasis("give either u_seed or u, not both".into())),
            (Some(seed), None) => Basis::Haar(*seed),
            (None, Some(rows)) => {
                let m = Matrix::from_rows(rows).ok_or_else(|| Error::InvalidBasis("ragged u".into()))?;
                Basis::Explicit(m.cast())
            }
            (None, None) => Basis::Identity,
        };
        make_covariance(self.d, &entries, basis)
    }

    pub fn from_spec<T: Scalar>(spec: &CovarianceSpec<T>) -> Self {
        let (u_seed, u) = match spec.basis() {
            Basis::Identity => (None, None),
            Basis::Haar(seed) => (Some(*seed), None),
            Basis::Explicit(m) => (None, Some(m.cast::<f64>().to_rows())),
        };
        Self {
            d: spec.dim(),
            d_entries: spec.d_entries().iter().map(|x| x.as_f64()).collect(),
            u_seed,
            u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPrior {
    /// `w★ ~ N(0, I_d)`
    Isotropic,
    /// `w★ ~ N(0, Σ⁻¹)`
    InverseCovariance,
}

/// One regression instance: `n` labelled covariates plus a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Prompt<T> {
    /// `d × (n+1)`; the last column is the query covariate.
    pub x: Matrix<T>,
    pub y: Vec<T>,
    pub w_star: Vec<T>,
    pub y_query: T,
}

impl<T: Scalar> Prompt<T> {
    /// Assembles a prompt, computing every label with [`dot`].
    pub fn from_parts(x: Matrix<T>, w_star: Vec<T>) -> Result<Self> {
        let (d, cols) = x.shape();
        if cols < 2 {
            return Err(Error::InvalidLength(
                "a prompt needs n ≥ 1 examples plus a query".into(),
            ));
        }
        if w_star.len() != d {
            return Err(Error::Shape(format!("w★ has length {}, expected {d}", w_star.len())));
        }
        let labels: Vec<T> = (0..cols).map(|j| dot(&x.col(j), &w_star)).collect();
        let y_query = labels[cols - 1];
        Ok(Self {
            y: labels[..cols - 1].to_vec(),
            x,
            w_star,
            y_query,
        })
    }

    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn query(&self) -> Vec<T> {
        self.x.col(self.n())
    }

    /// `(Q x, Q w★)` with the stored labels kept; for orthogonal `Q` the
    /// labels are unchanged in exact arithmetic.
    pub fn rotated(&self, q: &Matrix<T>) -> Self {
        Self {
            x: q.matmul(&self.x),
            y: self.y.clone(),
            w_star: q.mat_vec(&self.w_star),
            y_query: self.y_query,
        }
    }
}

pub fn sample_prompt<T: Scalar>(
    spec: &CovarianceSpec<T>,
    n: usize,
    prior: WeightPrior,
    rng: RngStream,
) -> Result<Prompt<T>> {
    if n == 0 {
        return Err(Error::InvalidLength("prompt length n must be ≥ 1".into()));
    }
    let d = spec.dim();
    let mut g = rng.generator();
    let raw_w: Vec<T> = g.normals(d);
    let w_star = match prior {
        WeightPrior::Isotropic => raw_w,
        WeightPrior::InverseCovariance => spec.sigma_inv_half().mat_vec(&raw_w),
    };
    // x = Uᵀ diag(d_entries) g
    let mut x = Matrix::zeros(d, n + 1);
    let u = spec.u();
    for j in 0..=n {
        let scaled: Vec<T> = g
            .normals::<T>(d)
            .into_iter()
            .zip(spec.d_entries())
            .map(|(z, &s)| z * s)
            .collect();
        let col = u.tr_mat_vec(&scaled);
        for i in 0..d {
            x[(i, j)] = col[i];
        }
    }
    Prompt::from_parts(x, w_star)
}

/// Token matrix `Z₀ = [X; (y, 0)]` of shape `(d+1) × (n+1)`.
pub fn build_z0<T: Scalar>(prompt: &Prompt<T>) -> Matrix<T> {
    token_matrix(prompt, T::zero())
}

/// `Z₀` with the query label slot set to `corner` (the true label gives the
/// filled-in matrix used by the trace form of the loss).
pub fn token_matrix<T: Scalar>(prompt: &Prompt<T>, corner: T) -> Matrix<T> {
    let d = prompt.d();
    let n = prompt.n();
    let mut z = Matrix::zeros(d + 1, n + 1);
    z.set_block(0, 0, &prompt.x);
    for (j, &yj) in prompt.y.iter().enumerate() {
        z[(d, j)] = yj;
    }
    z[(d, n)] = corner;
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;

    #[test]
    fn haar_dim_one_is_sign() {
        let q: Matrix<f64> = haar_orthogonal(1, RngStream::new(5, 0)).unwrap();
        assert_eq!(q[(0, 0)].abs(), 1.0);
        assert!(haar_orthogonal::<f64>(0, RngStream::new(5, 0)).is_err());
    }

    #[test]
    fn haar_is_orthogonal() {
        for seed in 0..20 {
            let q: Matrix<f64> = haar_orthogonal(5, RngStream::new(seed, 3)).unwrap();
            assert!(q.orthogonality_gap() <= 1e-12);
        }
    }

    #[test]
    fn identity_covariance() {
        let spec = make_covariance(2, &[1.0, 1.0], Basis::Identity).unwrap();
        assert_eq!(spec.sigma(), &Matrix::identity(2));
    }

    #[test]
    fn scalar_covariance_powers() {
        let spec = make_covariance(1, &[2.0], Basis::Identity).unwrap();
        assert_eq!(spec.sigma()[(0, 0)], 4.0);
        assert_eq!(spec.sigma_inv()[(0, 0)], 0.25);
        assert_eq!(spec.sigma_inv_half()[(0, 0)], 0.5);
        assert_eq!(spec.sigma_half()[(0, 0)], 2.0);
    }

    #[test]
    fn haar_covariance_spectrum() {
        let spec = make_covariance(5, &[1.0, 1.0, 0.5, 0.25, 1.0], Basis::Haar(11)).unwrap();
        let (vals, _) = sym_eigen(spec.sigma());
        let mut want: Vec<f64> = vec![1.0, 1.0, 0.25, 0.0625, 1.0];
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (v, w) in vals.iter().zip(&want) {
            assert!((v - w).abs() < 1e-10, "{v} vs {w}");
        }
        let id = Matrix::identity(5);
        assert!((&spec.sigma_inv().matmul(spec.sigma()) - &id).frobenius_norm() <= 1e-10);
        assert!((&spec.sigma_half().matmul(spec.sigma_half()) - spec.sigma()).frobenius_norm() <= 1e-10);
        assert!(spec.sigma().asymmetry() <= 1e-12);
        assert!(spec.u().orthogonality_gap() <= 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            make_covariance(2, &[1.0, 0.0], Basis::Identity),
            Err(Error::InvalidSpectrum(_))
        ));
        assert!(matches!(
            make_covariance(2, &[1.0, -1.0], Basis::Identity),
            Err(Error::InvalidSpectrum(_))
        ));
        let skew = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            make_covariance(2, &[1.0, 1.0], Basis::Explicit(skew)),
            Err(Error::InvalidBasis(_))
        ));
        assert!(matches!(
            make_covariance::<f64>(0, &[], Basis::Identity),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn labels_are_exact_inner_products() {
        let spec = CovarianceSpec::<f64>::isotropic(4).unwrap();
        let p = sample_prompt(&spec, 7, WeightPrior::Isotropic, RngStream::new(1, 2)).unwrap();
        for i in 0..7 {
            assert_eq!(p.y[i], dot(&p.x.col(i), &p.w_star));
        }
        assert_eq!(p.y_query, dot(&p.query(), &p.w_star));
        assert!(sample_prompt(&spec, 0, WeightPrior::Isotropic, RngStream::new(1, 2)).is_err());
    }

    #[test]
    fn z0_layout() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let p = Prompt::from_parts(x, vec![2.0]).unwrap();
        let z = build_z0(&p);
        assert_eq!(z, Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap());

        let spec = CovarianceSpec::<f64>::isotropic(2).unwrap();
        let p = sample_prompt(&spec, 3, WeightPrior::Isotropic, RngStream::new(0, 0)).unwrap();
        let z = build_z0(&p);
        assert_eq!(z.shape(), (3, 4));
        assert_eq!(z.block(0, 0, 2, 4), p.x);
        assert_eq!(z[(2, 3)], 0.0);
    }

    #[test]
    fn covariance_json_roundtrip() {
        let file: CovarianceFile = serde_json::from_str(r#"{"d":3,"d_entries":[1.0,0.5,2.0],"u_seed":4}"#).unwrap();
        let spec: CovarianceSpec<f64> = file.build().unwrap();
        assert_eq!(spec.basis(), &Basis::Haar(4));
        assert_eq!(CovarianceFile::from_spec(&spec), file);

        let explicit = CovarianceFile {
            d: 2,
            d_entries: vec![1.0, 2.0],
            u_seed: None,
            u: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
        };
        let spec: CovarianceSpec<f64> = explicit.build().unwrap();
        assert_eq!(spec.sigma()[(0, 0)], 4.0);
        assert_eq!(spec.sigma()[(1, 1)], 1.0);
    }
}
