//! Masked linear self-attention and the residual forward recursion
//! `Z_{ℓ+1} = Z_ℓ + (1/n)·P_ℓ Z_ℓ M (Z_ℓᵀ Q_ℓ Z_ℓ)`.
//!
//! Three parametrizations are supported: unconstrained `(P, Q)` layers, the
//! sparse family that only carries a symmetric `A` (and realizes
//! preconditioned gradient descent), and the GD++ family carrying `(A, B)`.
//! Structured layers can always be embedded back into `(P, Q)` form.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Largest accepted `‖A − Aᵀ‖_F / max(1, ‖A‖_F)` before a structured layer is
/// rejected; inputs within tolerance are stored exactly symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FullLayer<T> {
    #[serde(rename = "P")]
    pub p: Matrix<T>,
    #[serde(rename = "Q")]
    pub q: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "SparseLayerRaw<T>")]
pub struct SparseLayer<T> {
    #[serde(rename = "A")]
    a: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "GdppLayerRaw<T>")]
pub struct GdppLayer<T> {
    #[serde(rename = "A")]
    a: Matrix<T>,
    #[serde(rename = "B")]
    b: Matrix<T>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct SparseLayerRaw<T> {
    #[serde(rename = "A")]
    a: Matrix<T>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct GdppLayerRaw<T> {
    #[serde(rename = "A")]
    a: Matrix<T>,
    #[serde(rename = "B")]
    b: Matrix<T>,
}

impl<T: Scalar> TryFrom<SparseLayerRaw<T>> for SparseLayer<T> {
    type Error = Error;
    fn try_from(raw: SparseLayerRaw<T>) -> Result<Self> {
        SparseLayer::new(raw.a)
    }
}

impl<T: Scalar> TryFrom<GdppLayerRaw<T>> for GdppLayer<T> {
    type Error = Error;
    fn try_from(raw: GdppLayerRaw<T>) -> Result<Self> {
        GdppLayer::new(raw.a, raw.b)
    }
}

pub fn symmetric_checked<T: Scalar>(a: Matrix<T>, what: &str) -> Result<Matrix<T>> {
    if !a.is_square() {
        return Err(shape_err(format!("{what} must be square, got {:?}", a.shape())));
    }
    let asym = a.asymmetry();
    let scale = T::one().max(a.frobenius_norm());
    if !(asym <= T::lit(SYMMETRY_TOL) * scale) {
        return Err(Error::Asymmetric(format!("{what}: ‖A − Aᵀ‖_F = {asym:e}")));
    }
    Ok(a.symmetrized())
}

impl<T: Scalar> SparseLayer<T> {
    pub fn new(a: Matrix<T>) -> Result<Self> {
        Ok(Self {
            a: symmetric_checked(a, "sparse layer A")?,
        })
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }
}

impl<T: Scalar> GdppLayer<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        let a = symmetric_checked(a, "GD++ layer A")?;
        if b.shape() != a.shape() {
            return Err(shape_err(format!("B has shape {:?}, A has {:?}", b.shape(), a.shape())));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }
}

impl<T: Scalar> FullLayer<T> {
    pub fn new(p: Matrix<T>, q: Matrix<T>) -> Result<Self> {
        if !p.is_square() || p.shape() != q.shape() || p.rows() < 2 {
            return Err(shape_err(format!(
                "P and Q must be matching (d+1)×(d+1) matrices, got {:?} and {:?}",
                p.shape(),
                q.shape()
            )));
        }
        Ok(Self { p, q })
    }

    /// Token dimension `d + 1`.
    pub fn width(&self) -> usize {
        self.p.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Sparse,
    Gdpp,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Sparse => "sparse",
            Variant::Gdpp => "gdpp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "layers", rename_all = "lowercase")]
#[serde(bound = "T: Scalar")]
pub enum Layers<T> {
    Full(Vec<FullLayer<T>>),
    Sparse(Vec<SparseLayer<T>>),
    Gdpp(Vec<GdppLayer<T>>),
}

/// A nonempty stack of layers sharing covariate dimension `d`.
///
/// JSON: `{"variant":"sparse","layers":[{"A":[[…]]},…]}`, with `{"A","B"}`
/// layers for `gdpp` and `{"P","Q"}` layers for `full`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "Layers<T>", into = "Layers<T>")]
pub struct TransformerParams<T: Scalar> {
    d: usize,
    layers: Layers<T>,
}

impl<T: Scalar> TryFrom<Layers<T>> for TransformerParams<T> {
    type Error = Error;
    fn try_from(layers: Layers<T>) -> Result<Self> {
        TransformerParams::new(layers)
    }
}

impl<T: Scalar> From<TransformerParams<T>> for Layers<T> {
    fn from(p: TransformerParams<T>) -> Self {
        p.layers
    }
}

impl<T: Scalar> TransformerParams<T> {
    pub fn new(layers: Layers<T>) -> Result<Self> {
        let dims: Vec<usize> = match &layers {
            Layers::Full(ls) => ls.iter().map(|l| l.width() - 1).collect(),
            Layers::Sparse(ls) => ls.iter().map(SparseLayer::dim).collect(),
            Layers::Gdpp(ls) => ls.iter().map(GdppLayer::dim).collect(),
        };
        let Some(&d) = dims.first() else {
            return Err(Error::Config("a transformer needs at least one layer".into()));
        };
        if d == 0 || dims.iter().any(|&x| x != d) {
            return Err(shape_err(format!("layer dimensions disagree: {dims:?}")));
        }
        if let Layers::Full(ls) = &layers {
            for l in ls {
                FullLayer::new(l.p.clone(), l.q.clone())?;
            }
        }
        Ok(Self { d, layers })
    }

    pub fn sparse(a: Vec<Matrix<T>>) -> Result<Self> {
        Self::new(Layers::Sparse(
            a.into_iter().map(SparseLayer::new).collect::<Result<_>>()?,
        ))
    }

    pub fn gdpp(ab: Vec<(Matrix<T>, Matrix<T>)>) -> Result<Self> {
        Self::new(Layers::Gdpp(
            ab.into_iter()
                .map(|(a, b)| GdppLayer::new(a, b))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn full(pq: Vec<(Matrix<T>, Matrix<T>)>) -> Result<Self> {
        Self::new(Layers::Full(
            pq.into_iter()
                .map(|(p, q)| FullLayer::new(p, q))
                .collect::<Result<_>>()?,
        ))
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(variant: Variant, d: usize, depth: usize) -> Result<Self> {
        let z = || Matrix::zeros(d, d);
        match variant {
            Variant::Sparse => Self::sparse((0..depth).map(|_| z()).collect()),
            Variant::Gdpp => Self::gdpp((0..depth).map(|_| (z(), z())).collect()),
            Variant::Full => Self::full(
                (0..depth)
                    .map(|_| (Matrix::zeros(d + 1, d + 1), Matrix::zeros(d + 1, d + 1)))
                    .collect(),
            ),
        }
    }

    pub fn variant(&self) -> Variant {
        match &self.layers {
            Layers::Full(_) => Variant::Full,
            Layers::Sparse(_) => Variant::Sparse,
            Layers::Gdpp(_) => Variant::Gdpp,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> usize {
        match &self.layers {
            Layers::Full(ls) => ls.len(),
            Layers::Sparse(ls) => ls.len(),
            Layers::Gdpp(ls) => ls.len(),
        }
    }

    pub fn layers(&self) -> &Layers<T> {
        &self.layers
    }

    /// The `A_i` of a structured stack; `None` for full layers.
    pub fn a_matrices(&self) -> Option<Vec<&Matrix<T>>> {
        match &self.layers {
            Layers::Sparse(ls) => Some(ls.iter().map(SparseLayer::a).collect()),
            Layers::Gdpp(ls) => Some(ls.iter().map(GdppLayer::a).collect()),
            Layers::Full(_) => None,
        }
    }

    /// The `B_i` of a GD++ stack.
    pub fn b_matrices(&self) -> Option<Vec<&Matrix<T>>> {
        match &self.layers {
            Layers::Gdpp(ls) => Some(ls.iter().map(GdppLayer::b).collect()),
            _ => None,
        }
    }

    /// Every layer as an unconstrained `(P, Q)` pair.
    pub fn embedded(&self) -> Vec<FullLayer<T>> {
        match &self.layers {
            Layers::Full(ls) => ls.clone(),
            Layers::Sparse(ls) => ls.iter().map(|l| embed_sparse(l)).collect(),
            Layers::Gdpp(ls) => ls.iter().map(|l| embed_gdpp(l)).collect(),
        }
    }

    pub fn to_full(&self) -> Self {
        Self {
            d: self.d,
            layers: Layers::Full(self.embedded()),
        }
    }

    /// Number of scalars returned by [`flatten`](Self::flatten).
    pub fn num_scalars(&self) -> usize {
        let per_layer = match self.variant() {
            Variant::Sparse => self.d * self.d,
            Variant::Gdpp => 2 * self.d * self.d,
            Variant::Full => 2 * (self.d + 1) * (self.d + 1),
        };
        per_layer * self.depth()
    }

    /// Concatenated row-major storage: `A_i` for sparse, `A_i, B_i` for
    /// GD++, `P_i, Q_i` for full layers.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        match &self.layers {
            Layers::Sparse(ls) => ls.iter().for_each(|l| out.extend_from_slice(l.a.as_slice())),
            Layers::Gdpp(ls) => ls.iter().for_each(|l| {
                out.extend_from_slice(l.a.as_slice());
                out.extend_from_slice(l.b.as_slice());
            }),
            Layers::Full(ls) => ls.iter().for_each(|l| {
                out.extend_from_slice(l.p.as_slice());
                out.extend_from_slice(l.q.as_slice());
            }),
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for the same variant and shape.
    /// Structured `A` blocks are symmetrized.
    pub fn unflatten(&self, v: &[T]) -> Result<Self> {
        if v.len() != self.num_scalars() {
            return Err(shape_err(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                self.num_scalars()
            )));
        }
        let d = self.d;
        let dd = d * d;
        let m = (d + 1) * (d + 1);
        let layers = match self.variant() {
            Variant::Sparse => Layers::Sparse(
                v.chunks(dd)
                    .map(|c| SparseLayer {
                        a: Matrix::from_vec(d, d, c.to_vec()).symmetrized(),
                    })
                    .collect(),
            ),
            Variant::Gdpp => Layers::Gdpp(
                v.chunks(2 * dd)
                    .map(|c| GdppLayer {
                        a: Matrix::from_vec(d, d, c[..dd].to_vec()).symmetrized(),
                        b: Matrix::from_vec(d, d, c[dd..].to_vec()),
                    })
                    .collect(),
            ),
            Variant::Full => Layers::Full(
                v.chunks(2 * m)
                    .map(|c| FullLayer {
                        p: Matrix::from_vec(d + 1, d + 1, c[..m].to_vec()),
                        q: Matrix::from_vec(d + 1, d + 1, c[m..].to_vec()),
                    })
                    .collect(),
            ),
        };
        Ok(Self { d, layers })
    }

    /// Same stack with layers `i` and `j` exchanged.
    pub fn swapped(&self, i: usize, j: usize) -> Result<Self> {
        let k = self.depth();
        if i >= k || j >= k {
            return Err(Error::Index(format!("layer indices ({i}, {j}) with depth {k}")));
        }
        let mut out = self.clone();
        match &mut out.layers {
            Layers::Full(ls) => ls.swap(i, j),
            Layers::Sparse(ls) => ls.swap(i, j),
            Layers::Gdpp(ls) => ls.swap(i, j),
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

fn embed_sparse<T: Scalar>(layer: &SparseLayer<T>) -> FullLayer<T> {
    let d = layer.dim();
    let mut p = Matrix::zeros(d + 1, d + 1);
    p[(d, d)] = T::one();
    let mut q = Matrix::zeros(d + 1, d + 1);
    q.set_block(0, 0, &layer.a);
    FullLayer { p, q }
}

fn embed_gdpp<T: Scalar>(layer: &GdppLayer<T>) -> FullLayer<T> {
    let d = layer.dim();
    let mut p = Matrix::zeros(d + 1, d + 1);
    p.set_block(0, 0, &layer.b);
    p[(d, d)] = T::one();
    let mut q = Matrix::zeros(d + 1, d + 1);
    q.set_block(0, 0, &layer.a);
    FullLayer { p, q }
}

/// A structured layer by reference, for [`embed_structured_to_full`].
pub enum StructuredLayer<'a, T> {
    Sparse(&'a SparseLayer<T>),
    Gdpp(&'a GdppLayer<T>),
}

/// Sparse: `P = blockdiag(0, 1)`, `Q = [[A, 0], [0, 0]]`.
/// GD++: `P = [[B, 0], [0, 1]]`, same `Q`.
pub fn embed_structured_to_full<T: Scalar>(layer: StructuredLayer<'_, T>) -> FullLayer<T> {
    match layer {
        StructuredLayer::Sparse(l) => embed_sparse(l),
        StructuredLayer::Gdpp(l) => embed_gdpp(l),
    }
}

/// The `(n+1)×(n+1)` mask `diag(I_n, 0)`.
pub fn mask<T: Scalar>(n: usize) -> Matrix<T> {
    let mut m = Matrix::identity(n + 1);
    m[(n, n)] = T::zero();
    m
}

/// `Z M`: `Z` with its query column zeroed.
fn masked<T: Scalar>(z: &Matrix<T>) -> Matrix<T> {
    let mut zm = z.clone();
    let last = z.cols() - 1;
    for i in 0..z.rows() {
        zm[(i, last)] = T::zero();
    }
    zm
}

fn check_tokens<T: Scalar>(z: &Matrix<T>, width: usize) -> Result<()> {
    if z.rows() != width || z.cols() < 2 {
        return Err(shape_err(format!(
            "token matrix has shape {:?}, expected ({width}, n+1) with n ≥ 1",
            z.shape()
        )));
    }
    Ok(())
}

/// `Attn_{P,Q}(Z) = P Z M (Zᵀ Q Z)`.
pub fn attention<T: Scalar>(z: &Matrix<T>, layer: &FullLayer<T>) -> Result<Matrix<T>> {
    check_tokens(z, layer.width())?;
    let scores = z.tr_matmul(&layer.q.matmul(z));
    Ok(layer.p.matmul(&masked(z)).matmul(&scores))
}

/// Runs every layer with the `1/n` residual scaling and returns `Z_k`.
pub fn forward<T: Scalar>(z0: &Matrix<T>, params: &TransformerParams<T>) -> Result<Matrix<T>> {
    Ok(forward_recorded(z0, params)?.pop().expect("at least Z₀"))
}

/// Like [`forward`], but returns every intermediate `Z_0, …, Z_k`.
pub fn forward_recorded<T: Scalar>(z0: &Matrix<T>, params: &TransformerParams<T>) -> Result<Vec<Matrix<T>>> {
    check_tokens(z0, params.dim() + 1)?;
    let inv_n = T::from_count(z0.cols() - 1).recip();
    let mut states = Vec::with_capacity(params.depth() + 1);
    states.push(z0.clone());
    for layer in params.embedded() {
        let z = states.last().expect("nonempty");
        let mut next = z.clone();
        next.axpy(inv_n, &attention(z, &layer)?);
        states.push(next);
    }
    Ok(states)
}

/// Covariate/label recursion for structured stacks:
/// `X ← X + (1/n) B X M Xᵀ A X`, `Y ← Y + (1/n) Y M Xᵀ A X` (with `B = 0`
/// for sparse stacks). Returns every `(X_i, Y_i)`.
pub fn forward_xy_recorded<T: Scalar>(
    x0: &Matrix<T>,
    y0: &[T],
    params: &TransformerParams<T>,
) -> Result<Vec<(Matrix<T>, Vec<T>)>> {
    let d = params.dim();
    if x0.rows() != d || x0.cols() < 2 || y0.len() != x0.cols() {
        return Err(shape_err(format!(
            "X₀ {:?} / Y₀ length {} do not match d = {d}",
            x0.shape(),
            y0.len()
        )));
    }
    let ab: Vec<(&Matrix<T>, Option<&Matrix<T>>)> = match params.layers() {
        Layers::Sparse(ls) => ls.iter().map(|l| (l.a(), None)).collect(),
        Layers::Gdpp(ls) => ls.iter().map(|l| (l.a(), Some(l.b()))).collect(),
        Layers::Full(_) => {
            return Err(Error::UnsupportedVariant(
                "forward_xy needs a sparse or GD++ stack".into(),
            ))
        }
    };
    let n = x0.cols() - 1;
    let inv_n = T::from_count(n).recip();
    let mut out = Vec::with_capacity(ab.len() + 1);
    out.push((x0.clone(), y0.to_vec()));
    for (a, b) in ab {
        let (x, y) = out.last().expect("nonempty");
        // Xᵀ A X
        let gram = x.tr_matmul(&a.matmul(x));
        let mut y_masked = y.clone();
        y_masked[n] = T::zero();
        let dy = gram.tr_mat_vec(&y_masked);
        let y_next: Vec<T> = y.iter().zip(&dy).map(|(&yi, &di)| yi + inv_n * di).collect();
        let x_next = match b {
            Some(b) => {
                let mut xn = x.clone();
                xn.axpy(inv_n, &b.matmul(&masked(x)).matmul(&gram));
                xn
            }
            None => x.clone(),
        };
        out.push((x_next, y_next));
    }
    Ok(out)
}

pub fn forward_xy<T: Scalar>(x0: &Matrix<T>, y0: &[T], params: &TransformerParams<T>) -> Result<(Matrix<T>, Vec<T>)> {
    Ok(forward_xy_recorded(x0, y0, params)?.pop().expect("at least the input"))
}

/// Prediction for the query label: `−[Z]_{d+1, n+1}`.
pub fn predict<T: Scalar>(z: &Matrix<T>) -> T {
    -z[(z.rows() - 1, z.cols() - 1)]
}
