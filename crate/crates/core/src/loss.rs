//! The in-context loss: per-prompt squared error, its Monte-Carlo mean, the
//! trace reformulation, exact gradients, and the single-layer reduction.
//!
//! Two evaluation routes exist. The token route runs the literal forward
//! recursion on `(d+1)×(n+1)` token matrices and is the reference. The
//! moment route works on per-prompt sufficient statistics: every layer acts
//! on the tokens as a left multiplication `Z ← T Z`, so only
//! `K = Z M Zᵀ` and the query column need to be propagated. Gradients come
//! from reverse-mode differentiation of the moment route; tests tie the two
//! routes together.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, FullSink, FullView, FullWorkspace, GradSink, LayerView, MomentView, Workspace};
use crate::linalg::{dot, Matrix};
use crate::rng::RngStream;
use crate::sampler::{build_z0, sample_prompt, token_matrix, CovarianceFile, CovarianceSpec, Prompt, WeightPrior};
use crate::scalar::Scalar;
use crate::transformer::{forward, mask, FullLayer, Layers, TransformerParams, Variant};

/// Prompts per work unit. Partial sums are formed serially inside a chunk
/// and combined by [`tree_reduce`], so results do not depend on the thread
/// count.
pub const CHUNK: usize = 512;

/// Pairwise reduction with a shape fixed by `items.len()` alone.
pub fn tree_reduce<A>(mut items: Vec<A>, combine: impl Fn(A, A) -> A) -> Option<A> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Per-prompt statistics sufficient for every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMoments<T> {
    /// `X̄ X̄ᵀ` over the `n` labelled columns.
    pub s: Matrix<T>,
    /// `X̄ y`.
    pub u: Vec<T>,
    /// `Σ y_i²`.
    pub yy: T,
    pub x_query: Vec<T>,
    pub y_query: T,
}

impl<T: Scalar> PromptMoments<T> {
    pub fn of(prompt: &Prompt<T>) -> Self {
        let d = prompt.d();
        let n = prompt.n();
        let xbar = prompt.x.block(0, 0, d, n);
        Self {
            s: xbar.matmul_tr(&xbar),
            u: xbar.mat_vec(&prompt.y),
            yy: dot(&prompt.y, &prompt.y),
            x_query: prompt.query(),
            y_query: prompt.y_query,
        }
    }

    /// `K = Z₀ M Z₀ᵀ = [[S, u], [uᵀ, Σy²]]`.
    pub fn token_gram(&self) -> Matrix<T> {
        let d = self.u.len();
        let mut k = Matrix::zeros(d + 1, d + 1);
        k.set_block(0, 0, &self.s);
        for i in 0..d {
            k[(i, d)] = self.u[i];
            k[(d, i)] = self.u[i];
        }
        k[(d, d)] = self.yy;
        k
    }
}

/// Where a batch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub seed: u64,
    pub count: usize,
    pub n: usize,
    pub prior: WeightPrior,
    pub spec: CovarianceFile,
}

impl BatchManifest {
    pub fn sample<T: Scalar>(&self) -> Result<Batch<T>> {
        let spec = self.spec.build()?;
        Batch::sample(&spec, self.n, self.prior, self.seed, self.count)
    }
}

/// A nonempty, shape-homogeneous list of prompts with cached moments.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    prompts: Vec<Prompt<T>>,
    moments: Vec<PromptMoments<T>>,
    d: usize,
    n: usize,
    manifest: Option<BatchManifest>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_prompts(prompts: Vec<Prompt<T>>) -> Result<Self> {
        let first = prompts.first().ok_or(Error::EmptyBatch)?;
        let (d, n) = (first.d(), first.n());
        if prompts.iter().any(|p| p.d() != d || p.n() != n) {
            return Err(shape_err("batch prompts have mixed (d, n)"));
        }
        let moments = prompts.par_iter().map(PromptMoments::of).collect();
        Ok(Self {
            prompts,
            moments,
            d,
            n,
            manifest: None,
        })
    }

    /// `count` prompts; prompt `i` is drawn from stream `(seed, i)`.
    pub fn sample(spec: &CovarianceSpec<T>, n: usize, prior: WeightPrior, seed: u64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let prompts = (0..count as u64)
            .into_par_iter()
            .map(|i| sample_prompt(spec, n, prior, RngStream::new(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = Self::from_prompts(prompts)?;
        batch.manifest = Some(BatchManifest {
            seed,
            count,
            n,
            prior,
            spec: CovarianceFile::from_spec(spec),
        });
        Ok(batch)
    }

    pub fn prompts(&self) -> &[Prompt<T>] {
        &self.prompts
    }

    pub fn moments(&self) -> &[PromptMoments<T>] {
        &self.moments
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn manifest(&self) -> Option<&BatchManifest> {
        self.manifest.as_ref()
    }

    /// The batch with every prompt transformed by [`Prompt::rotated`].
    pub fn rotated(&self, q: &Matrix<T>) -> Result<Self> {
        Self::from_prompts(self.prompts.iter().map(|p| p.rotated(q)).collect())
    }

    /// Sub-batch of the first `count` prompts.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        Self::from_prompts(self.prompts[..count.min(self.len())].to_vec())
    }
}

/// Gradient of the loss with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase", bound = "T: Scalar")]
pub enum GradientBundle<T> {
    Sparse { da: Vec<Matrix<T>> },
    Gdpp { da: Vec<Matrix<T>>, db: Vec<Matrix<T>> },
    Full { dp: Vec<Matrix<T>>, dq: Vec<Matrix<T>> },
}

impl<T: Scalar> GradientBundle<T> {
    pub fn zeros_like(params: &TransformerParams<T>) -> Self {
        let d = params.dim();
        let k = params.depth();
        let z = |m: usize| (0..k).map(|_| Matrix::zeros(m, m)).collect::<Vec<_>>();
        match params.variant() {
            Variant::Sparse => Self::Sparse { da: z(d) },
            Variant::Gdpp => Self::Gdpp { da: z(d), db: z(d) },
            Variant::Full => Self::Full {
                dp: z(d + 1),
                dq: z(d + 1),
            },
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Self::Sparse { .. } => Variant::Sparse,
            Self::Gdpp { .. } => Variant::Gdpp,
            Self::Full { .. } => Variant::Full,
        }
    }

    pub fn da(&self) -> Option<&[Matrix<T>]> {
        match self {
            Self::Sparse { da } | Self::Gdpp { da, .. } => Some(da),
            Self::Full { .. } => None,
        }
    }

    pub fn db(&self) -> Option<&[Matrix<T>]> {
        match self {
            Self::Gdpp { db, .. } => Some(db),
            _ => None,
        }
    }

    fn blocks(&self) -> Vec<&Matrix<T>> {
        match self {
            Self::Sparse { da } => da.iter().collect(),
            Self::Gdpp { da, db } => da.iter().zip(db).flat_map(|(a, b)| [a, b]).collect(),
            Self::Full { dp, dq } => dp.iter().zip(dq).flat_map(|(p, q)| [p, q]).collect(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match self {
            Self::Sparse { da } => da.iter_mut().collect(),
            Self::Gdpp { da, db } => da.iter_mut().zip(db.iter_mut()).flat_map(|(a, b)| [a, b]).collect(),
            Self::Full { dp, dq } => dp.iter_mut().zip(dq.iter_mut()).flat_map(|(p, q)| [p, q]).collect(),
        }
    }

    /// Same layout as [`TransformerParams::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        self.blocks().into_iter().flat_map(|m| m.as_slice().to_vec()).collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.variant(), other.variant(), "bundle variant mismatch");
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for m in self.blocks_mut() {
            *m = m.scale(s);
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.variant(), other.variant(), "bundle variant mismatch");
        self.blocks()
            .into_iter()
            .zip(other.blocks())
            .map(|(a, b)| a.frobenius_dot(b))
            .sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Projects every `dA` onto the symmetric matrices.
    fn symmetrize_a(&mut self) {
        if let Self::Sparse { da } | Self::Gdpp { da, .. } = self {
            for m in da.iter_mut() {
                *m = m.symmetrized();
            }
        }
    }
}

/// Bundle-shaped view of a parameter set, used for directions.
pub fn params_as_bundle<T: Scalar>(params: &TransformerParams<T>) -> GradientBundle<T> {
    match params.layers() {
        Layers::Sparse(ls) => GradientBundle::Sparse {
            da: ls.iter().map(|l| l.a().clone()).collect(),
        },
        Layers::Gdpp(ls) => GradientBundle::Gdpp {
            da: ls.iter().map(|l| l.a().clone()).collect(),
            db: ls.iter().map(|l| l.b().clone()).collect(),
        },
        Layers::Full(ls) => GradientBundle::Full {
            dp: ls.iter().map(|l| l.p.clone()).collect(),
            dq: ls.iter().map(|l| l.q.clone()).collect(),
        },
    }
}

fn check_prompt<T: Scalar>(params: &TransformerParams<T>, prompt: &Prompt<T>) -> Result<()> {
    if prompt.d() != params.dim() {
        return Err(shape_err(format!(
            "prompt has d = {}, parameters have d = {}",
            prompt.d(),
            params.dim()
        )));
    }
    Ok(())
}

/// `([Z_k]_{d+1,n+1} + ⟨w★, x_{n+1}⟩)²` via the token route.
pub fn per_prompt_sq_error<T: Scalar>(params: &TransformerParams<T>, prompt: &Prompt<T>) -> Result<T> {
    check_prompt(params, prompt)?;
    let zk = forward(&build_z0(prompt), params)?;
    let r = zk[(prompt.d(), prompt.n())] + prompt.y_query;
    Ok(r * r)
}

/// `Tr((I−M) Ȳ_kᵀ Ȳ_k (I−M))` where `Ȳ_k` is the label row after running
/// the stack on the token matrix whose query slot holds the true label.
pub fn trace_form_loss<T: Scalar>(params: &TransformerParams<T>, prompt: &Prompt<T>) -> Result<T> {
    check_prompt(params, prompt)?;
    let d = prompt.d();
    let n = prompt.n();
    let zk = forward(&token_matrix(prompt, prompt.y_query), params)?;
    let y_row = Matrix::row_vector(zk.row(d));
    let keep = &Matrix::identity(n + 1) - &mask(n);
    let proj = keep.matmul(&y_row.transpose());
    let outer = proj.matmul_tr(&proj);
    Ok(outer.trace())
}

/// Arithmetic mean of [`per_prompt_sq_error`] over the batch.
pub fn mc_loss<T: Scalar>(params: &TransformerParams<T>, batch: &Batch<T>) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let partials = batch
        .prompts()
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(T::zero(), |acc, p| {
                Ok::<_, Error>(acc + per_prompt_sq_error(params, p)?)
            })
        })
        .collect::<Result<Vec<T>>>()?;
    let total = tree_reduce(partials, |a, b| a + b).expect("nonempty");
    Ok(total / T::from_count(batch.len()))
}

/// Mean and standard error of per-prompt values.
pub fn mean_and_se<T: Scalar>(values: &[T]) -> (T, T) {
    let m = T::from_count(values.len());
    let mean = values.iter().copied().sum::<T>() / m;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (m - T::one());
    (mean, (var / m).sqrt())
}

// ---------------------------------------------------------------------------
// Moment route.

struct StructuredLayerRef<'a, T> {
    a: &'a Matrix<T>,
    b: Option<&'a Matrix<T>>,
}

enum Stack<'a, T> {
    Structured(Vec<StructuredLayerRef<'a, T>>),
    Full(&'a [FullLayer<T>]),
}

fn stack_of<T: Scalar>(params: &TransformerParams<T>) -> Stack<'_, T> {
    match params.layers() {
        Layers::Sparse(ls) => Stack::Structured(ls.iter().map(|l| StructuredLayerRef { a: l.a(), b: None }).collect()),
        Layers::Gdpp(ls) => Stack::Structured(
            ls.iter()
                .map(|l| StructuredLayerRef {
                    a: l.a(),
                    b: Some(l.b()),
                })
                .collect(),
        ),
        Layers::Full(ls) => Stack::Full(ls),
    }
}

fn sink_of<T: Scalar>(grad: &mut GradientBundle<T>) -> GradSink<'_, T> {
    match grad {
        GradientBundle::Sparse { da } => GradSink {
            da: da.iter_mut().map(|m| m.as_mut_slice()).collect(),
            db: None,
        },
        GradientBundle::Gdpp { da, db } => GradSink {
            da: da.iter_mut().map(|m| m.as_mut_slice()).collect(),
            db: Some(db.iter_mut().map(|m| m.as_mut_slice()).collect()),
        },
        GradientBundle::Full { .. } => unreachable!("structured stack with a full bundle"),
    }
}

/// Summed loss of consecutive prompts via the moment route; adds the
/// (unsymmetrized) gradient into `grad` when given.
fn eval_chunk<T: Scalar>(
    stack: &Stack<'_, T>,
    moms: &[PromptMoments<T>],
    inv_n: T,
    grad: Option<&mut GradientBundle<T>>,
) -> T {
    match stack {
        Stack::Structured(layers) => {
            let views: Vec<LayerView<'_, T>> = layers
                .iter()
                .map(|l| LayerView {
                    a: l.a.as_slice(),
                    b: l.b.map(Matrix::as_slice),
                })
                .collect();
            let mut ws = Workspace::default();
            let mut sink = grad.map(sink_of);
            moms.iter().fold(T::zero(), |acc, m| {
                let view = MomentView {
                    s: m.s.as_slice(),
                    u: &m.u,
                    x_query: &m.x_query,
                    y_query: m.y_query,
                };
                acc + kernels::structured(&views, &view, inv_n, &mut ws, sink.as_mut())
            })
        }
        Stack::Full(layers) => {
            let views: Vec<FullView<'_, T>> = layers
                .iter()
                .map(|l| FullView {
                    p: l.p.as_slice(),
                    q: l.q.as_slice(),
                })
                .collect();
            let mut ws = FullWorkspace::default();
            let mut sink = grad.map(|g| match g {
                GradientBundle::Full { dp, dq } => FullSink {
                    dp: dp.iter_mut().map(|m| m.as_mut_slice()).collect(),
                    dq: dq.iter_mut().map(|m| m.as_mut_slice()).collect(),
                },
                _ => unreachable!("full stack with a structured bundle"),
            });
            moms.iter().fold(T::zero(), |acc, m| {
                let view = MomentView {
                    s: m.s.as_slice(),
                    u: &m.u,
                    x_query: &m.x_query,
                    y_query: m.y_query,
                };
                acc + kernels::full(&views, &view, m.yy, inv_n, &mut ws, sink.as_mut())
            })
        }
    }
}

/// Reference version of the sparse kernel.
///
/// Sparse stacks leave the covariates fixed, so the state is `u = X̄ Y_ℓᵀ`
/// and the running query entry `c`:
/// `c ← c + (1/n) uᵀ A x_q`, `u ← u + (1/n) S A u`.
#[cfg(test)]
fn sparse_loss_grad<T: Scalar>(
    layers: &[StructuredLayerRef<'_, T>],
    mom: &PromptMoments<T>,
    inv_n: T,
    grad: Option<&mut GradientBundle<T>>,
) -> T {
    let k = layers.len();
    let mut us: Vec<Vec<T>> = Vec::with_capacity(k + 1);
    us.push(mom.u.clone());
    let mut c = T::zero();
    for l in layers {
        let u = us.last().expect("nonempty");
        let p = l.a.mat_vec(u);
        c += inv_n * dot(&p, &mom.x_query);
        let sp = mom.s.mat_vec(&p);
        us.push(u.iter().zip(&sp).map(|(&ui, &si)| ui + inv_n * si).collect());
    }
    let r = c + mom.y_query;
    if let Some(grad) = grad {
        let GradientBundle::Sparse { da } = grad else {
            unreachable!("sparse stack with non-sparse bundle")
        };
        let gc = T::lit(2.0) * r;
        let d = mom.u.len();
        let mut gu = vec![T::zero(); d];
        for i in (0..k).rev() {
            let sgu = mom.s.tr_mat_vec(&gu);
            let gp: Vec<T> = (0..d).map(|j| inv_n * (gc * mom.x_query[j] + sgu[j])).collect();
            da[i].add_outer(T::one(), &gp, &us[i]);
            let agp = layers[i].a.tr_mat_vec(&gp);
            for (g, a) in gu.iter_mut().zip(agp) {
                *g += a;
            }
        }
    }
    r * r
}

#[cfg(test)]
struct GdppTape<T> {
    s: Matrix<T>,
    u: Vec<T>,
    xq: Vec<T>,
    p: Vec<T>,
    v: Vec<T>,
    t: Option<Matrix<T>>,
}

/// GD++ stacks act on the covariates as `X ← T X` with
/// `T = I + (1/n) B S A`, so the state is `(S, u, x_q, c)`.
#[cfg(test)]
fn gdpp_loss_grad<T: Scalar>(
    layers: &[StructuredLayerRef<'_, T>],
    mom: &PromptMoments<T>,
    inv_n: T,
    grad: Option<&mut GradientBundle<T>>,
) -> T {
    let k = layers.len();
    let d = mom.u.len();
    let mut tape: Vec<GdppTape<T>> = Vec::with_capacity(k);
    let mut s = mom.s.clone();
    let mut u = mom.u.clone();
    let mut xq = mom.x_query.clone();
    let mut c = T::zero();
    for (i, l) in layers.iter().enumerate() {
        let p = l.a.mat_vec(&u);
        c += inv_n * dot(&p, &xq);
        let sp = s.mat_vec(&p);
        let v: Vec<T> = u.iter().zip(&sp).map(|(&ui, &si)| ui + inv_n * si).collect();
        let last = i + 1 == k;
        let t = match (l.b, last) {
            (Some(b), false) => {
                let mut t = b.matmul(&s).matmul(l.a).scale(inv_n);
                for j in 0..d {
                    t[(j, j)] += T::one();
                }
                Some(t)
            }
            _ => None,
        };
        let (s_next, u_next, xq_next) = match &t {
            Some(t) => (t.matmul(&s).matmul_tr(t), t.mat_vec(&v), t.mat_vec(&xq)),
            None => (s.clone(), v.clone(), xq.clone()),
        };
        tape.push(GdppTape { s, u, xq, p, v, t });
        s = s_next;
        u = u_next;
        xq = xq_next;
    }
    let r = c + mom.y_query;
    if let Some(grad) = grad {
        let GradientBundle::Gdpp { da, db } = grad else {
            unreachable!("GD++ stack with non-GD++ bundle")
        };
        let gc = T::lit(2.0) * r;
        let mut gs = Matrix::zeros(d, d);
        let mut gu = vec![T::zero(); d];
        let mut gxq = vec![T::zero(); d];
        for i in (0..k).rev() {
            let tp = &tape[i];
            let a = layers[i].a;
            let (mut gv, mut gs_in, mut gxq_in) = match (&tp.t, layers[i].b) {
                (Some(t), Some(b)) => {
                    // gT = gu' vᵀ + gx' x_qᵀ + (G + Gᵀ) T S
                    let mut gt = Matrix::zeros(d, d);
                    gt.add_outer(T::one(), &gu, &tp.v);
                    gt.add_outer(T::one(), &gxq, &tp.xq);
                    let gsym = &gs + &gs.transpose();
                    gt += &gsym.matmul(t).matmul(&tp.s);
                    let gv = t.tr_mat_vec(&gu);
                    let gxq_in = t.tr_mat_vec(&gxq);
                    let mut gs_in = t.tr_matmul(&gs).matmul(t);
                    // T = I + (1/n) B S A
                    let sa = tp.s.matmul(a);
                    db[i].axpy(inv_n, &gt.matmul_tr(&sa));
                    gs_in.axpy(inv_n, &b.tr_matmul(&gt).matmul_tr(a));
                    da[i].axpy(inv_n, &b.matmul(&tp.s).tr_matmul(&gt));
                    (gv, gs_in, gxq_in)
                }
                _ => (gu.clone(), gs.clone(), gxq.clone()),
            };
            // v = u + (1/n) S p
            gs_in.add_outer(inv_n, &gv, &tp.p);
            let sgv = tp.s.tr_mat_vec(&gv);
            let mut gp: Vec<T> = sgv.iter().map(|&x| inv_n * x).collect();
            // c += (1/n) pᵀ x_q
            for j in 0..d {
                gp[j] += inv_n * gc * tp.xq[j];
                gxq_in[j] += inv_n * gc * tp.p[j];
            }
            // p = A u
            da[i].add_outer(T::one(), &gp, &tp.u);
            let agp = a.tr_mat_vec(&gp);
            for (g, x) in gv.iter_mut().zip(agp) {
                *g += x;
            }
            gu = gv;
            gs = gs_in;
            gxq = gxq_in;
        }
    }
    r * r
}

/// Reference version of the unconstrained kernel.
#[cfg(test)]
fn full_loss_grad<T: Scalar>(
    layers: &[FullLayer<T>],
    mom: &PromptMoments<T>,
    inv_n: T,
    grad: Option<&mut GradientBundle<T>>,
) -> T {
    let k = layers.len();
    let d = mom.u.len();
    let m = d + 1;
    let mut ks: Vec<Matrix<T>> = Vec::with_capacity(k);
    let mut zs: Vec<Vec<T>> = Vec::with_capacity(k + 1);
    let mut ts: Vec<Matrix<T>> = Vec::with_capacity(k);
    let mut kmat = mom.token_gram();
    let mut z: Vec<T> = mom.x_query.iter().copied().chain(std::iter::once(T::zero())).collect();
    for (i, l) in layers.iter().enumerate() {
        let mut t = l.p.matmul(&kmat).matmul(&l.q).scale(inv_n);
        for j in 0..m {
            t[(j, j)] += T::one();
        }
        let z_next = t.mat_vec(&z);
        let k_next = if i + 1 < k {
            t.matmul(&kmat).matmul_tr(&t)
        } else {
            kmat.clone()
        };
        ks.push(kmat);
        zs.push(z);
        ts.push(t);
        kmat = k_next;
        z = z_next;
    }
    let r = z[d] + mom.y_query;
    if let Some(grad) = grad {
        let GradientBundle::Full { dp, dq } = grad else {
            unreachable!("full stack with non-full bundle")
        };
        let mut gz = vec![T::zero(); m];
        gz[d] = T::lit(2.0) * r;
        let mut gk = Matrix::zeros(m, m);
        for i in (0..k).rev() {
            let (t, kin, zin, l) = (&ts[i], &ks[i], &zs[i], &layers[i]);
            let mut gt = Matrix::zeros(m, m);
            gt.add_outer(T::one(), &gz, zin);
            gt += &gk.matmul(t).matmul_tr(kin);
            gt += &gk.tr_matmul(t).matmul(kin);
            let gz_in = t.tr_mat_vec(&gz);
            let mut gk_in = t.tr_matmul(&gk).matmul(t);
            gk_in.axpy(inv_n, &l.p.tr_matmul(&gt).matmul_tr(&l.q));
            dp[i].axpy(inv_n, &gt.matmul_tr(&kin.matmul(&l.q)));
            dq[i].axpy(inv_n, &l.p.matmul(kin).tr_matmul(&gt));
            gz = gz_in;
            gk = gk_in;
        }
    }
    r * r
}

/// Loss and gradient of one prompt through the moment route.
pub fn prompt_loss_and_grad<T: Scalar>(
    params: &TransformerParams<T>,
    mom: &PromptMoments<T>,
    n: usize,
) -> (T, GradientBundle<T>) {
    let stack = stack_of(params);
    let mut g = GradientBundle::zeros_like(params);
    let loss = eval_chunk(
        &stack,
        std::slice::from_ref(mom),
        T::from_count(n).recip(),
        Some(&mut g),
    );
    g.symmetrize_a();
    (loss, g)
}

/// Per-prompt `(loss, gradient)` mapped through `f`, in batch order.
pub fn map_prompt_grads<T: Scalar, R: Send>(
    params: &TransformerParams<T>,
    batch: &Batch<T>,
    f: impl Fn(T, &GradientBundle<T>) -> R + Sync,
) -> Result<Vec<R>> {
    check_batch(params, batch)?;
    Ok(batch
        .moments()
        .par_iter()
        .map(|mom| {
            let (l, g) = prompt_loss_and_grad(params, mom, batch.n());
            f(l, &g)
        })
        .collect())
}

fn check_batch<T: Scalar>(params: &TransformerParams<T>, batch: &Batch<T>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.d() != params.dim() {
        return Err(shape_err(format!(
            "batch has d = {}, parameters have d = {}",
            batch.d(),
            params.dim()
        )));
    }
    Ok(())
}

/// Batch-mean loss through the moment route (no gradient).
pub fn moment_loss<T: Scalar>(params: &TransformerParams<T>, batch: &Batch<T>) -> Result<T> {
    check_batch(params, batch)?;
    let stack = stack_of(params);
    let inv_n = T::from_count(batch.n()).recip();
    let partials: Vec<T> = batch
        .moments()
        .par_chunks(CHUNK)
        .map(|chunk| eval_chunk(&stack, chunk, inv_n, None))
        .collect();
    Ok(tree_reduce(partials, |a, b| a + b).expect("nonempty") / T::from_count(batch.len()))
}

/// Batch-mean loss and its exact gradient. `dA` blocks are projected onto
/// the symmetric matrices for structured stacks.
pub fn loss_and_grad<T: Scalar>(params: &TransformerParams<T>, batch: &Batch<T>) -> Result<(T, GradientBundle<T>)> {
    check_batch(params, batch)?;
    let stack = stack_of(params);
    let inv_n = T::from_count(batch.n()).recip();
    let partials: Vec<(T, GradientBundle<T>)> = batch
        .moments()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = GradientBundle::zeros_like(params);
            let l = eval_chunk(&stack, chunk, inv_n, Some(&mut g));
            (l, g)
        })
        .collect();
    let (total, mut g) = tree_reduce(partials, |(la, mut ga), (lb, gb)| {
        ga.add_assign(&gb);
        (la + lb, ga)
    })
    .expect("nonempty");
    let inv_count = T::from_count(batch.len()).recip();
    g.scale(inv_count);
    g.symmetrize_a();
    Ok((total * inv_count, g))
}

/// JSON dump of a loss/gradient evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LossGradDump<T> {
    pub loss: T,
    pub grad_norm: T,
    pub gradient: GradientBundle<T>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch: Option<BatchManifest>,
}

// ---------------------------------------------------------------------------
// Single-layer reduction.

/// `b` is the last row of `P`; `A` the first `d` columns of `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SingleLayerParams<T> {
    pub b: Vec<T>,
    #[serde(rename = "A")]
    pub a: Matrix<T>,
}

impl<T: Scalar> SingleLayerParams<T> {
    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// `P = [0; bᵀ]`, `Q = [A 0]`.
    pub fn to_full(&self) -> FullLayer<T> {
        let d = self.dim();
        let mut p = Matrix::zeros(d + 1, d + 1);
        p.row_mut(d).copy_from_slice(&self.b);
        let mut q = Matrix::zeros(d + 1, d + 1);
        q.set_block(0, 0, &self.a);
        FullLayer { p, q }
    }

    pub fn to_params(&self) -> TransformerParams<T> {
        TransformerParams::new(Layers::Full(vec![self.to_full()])).expect("well-formed single layer")
    }

    /// `(γ b, γ⁻¹ A)`.
    pub fn rescaled(&self, gamma: T) -> Self {
        Self {
            b: self.b.iter().map(|&x| x * gamma).collect(),
            a: self.a.scale(gamma.recip()),
        }
    }

    /// The scale-free product `b ⊗ vec(A)` as a `(d+1) × (d+1)d` matrix.
    pub fn product(&self) -> Matrix<T> {
        let va = self.a.as_slice();
        Matrix::from_fn(self.b.len(), va.len(), |i, j| self.b[i] * va[j])
    }
}

pub fn single_layer_reduce<T: Scalar>(layer: &FullLayer<T>) -> SingleLayerParams<T> {
    let m = layer.width();
    let d = m - 1;
    SingleLayerParams {
        b: layer.p.row(d).to_vec(),
        a: layer.q.block(0, 0, m, d),
    }
}

/// Residual `bᵀ C A x_q + ⟨w★, x_q⟩` with `C = (1/n) Σ_{i≤n} z_i z_iᵀ`.
fn single_layer_residual<T: Scalar>(slp: &SingleLayerParams<T>, mom: &PromptMoments<T>, n: usize) -> (T, Vec<T>) {
    let c = mom.token_gram().scale(T::from_count(n).recip());
    let ax = slp.a.mat_vec(&mom.x_query);
    let cax = c.mat_vec(&ax);
    (dot(&slp.b, &cax) + mom.y_query, cax)
}

/// `(bᵀ C A x_q + ⟨w★, x_q⟩)²` for one prompt.
pub fn single_layer_sq_error<T: Scalar>(slp: &SingleLayerParams<T>, prompt: &Prompt<T>) -> Result<T> {
    if slp.a.rows() != prompt.d() + 1 || slp.b.len() != prompt.d() + 1 || slp.dim() != prompt.d() {
        return Err(shape_err("single-layer parameters do not match the prompt dimension"));
    }
    let (r, _) = single_layer_residual(slp, &PromptMoments::of(prompt), prompt.n());
    Ok(r * r)
}

/// Gradient of one prompt's reduced loss with respect to `(b, A)`:
/// `∂b = 2r·C A x_q`, `∂A = 2r·(C b) x_qᵀ`.
pub fn single_layer_prompt_grad<T: Scalar>(
    slp: &SingleLayerParams<T>,
    mom: &PromptMoments<T>,
    n: usize,
) -> (T, SingleLayerParams<T>) {
    let (r, cax) = single_layer_residual(slp, mom, n);
    let two_r = T::lit(2.0) * r;
    let c = mom.token_gram().scale(T::from_count(n).recip());
    let cb = c.mat_vec(&slp.b);
    let mut da = Matrix::zeros(slp.a.rows(), slp.a.cols());
    da.add_outer(two_r, &cb, &mom.x_query);
    (
        r * r,
        SingleLayerParams {
            b: cax.iter().map(|&x| two_r * x).collect(),
            a: da,
        },
    )
}

pub fn single_layer_loss<T: Scalar>(slp: &SingleLayerParams<T>, batch: &Batch<T>) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if slp.dim() != batch.d() || slp.b.len() != batch.d() + 1 {
        return Err(shape_err("single-layer parameters do not match the batch dimension"));
    }
    let n = batch.n();
    let partials: Vec<T> = batch
        .moments()
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().fold(T::zero(), |acc, m| {
                let (r, _) = single_layer_residual(slp, m, n);
                acc + r * r
            })
        })
        .collect();
    Ok(tree_reduce(partials, |a, b| a + b).expect("nonempty") / T::from_count(batch.len()))
}
