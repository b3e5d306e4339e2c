//! Allocation-free per-prompt forward/backward passes for structured
//! stacks in moment form. Matrices are `d×d` row-major slices.

use crate::scalar::Scalar;

#[inline(always)]
fn mv<T: Scalar>(a: &[T], x: &[T], out: &mut [T], d: usize) {
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        out[i] = row.iter().zip(&x[..d]).fold(T::zero(), |acc, (&r, &xi)| acc + r * xi);
    }
}

/// `out = aᵀ x`.
#[inline(always)]
fn mtv<T: Scalar>(a: &[T], x: &[T], out: &mut [T], d: usize) {
    let out = &mut out[..d];
    out.fill(T::zero());
    for i in 0..d {
        let xi = x[i];
        let row = &a[i * d..(i + 1) * d];
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * xi;
        }
    }
}

/// `out = a b`.
#[inline(always)]
fn mm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], d: usize) {
    let (a, b, out) = (&a[..d * d], &b[..d * d], &mut out[..d * d]);
    out.fill(T::zero());
    for i in 0..d {
        let orow = &mut out[i * d..(i + 1) * d];
        for k in 0..d {
            let aik = a[i * d + k];
            let brow = &b[k * d..(k + 1) * d];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out = aᵀ b`.
#[inline(always)]
fn mtm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], d: usize) {
    let (a, b, out) = (&a[..d * d], &b[..d * d], &mut out[..d * d]);
    out.fill(T::zero());
    for k in 0..d {
        let arow = &a[k * d..(k + 1) * d];
        let brow = &b[k * d..(k + 1) * d];
        for i in 0..d {
            let aki = arow[i];
            let orow = &mut out[i * d..(i + 1) * d];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
}

/// `out = a bᵀ`.
#[inline(always)]
fn mmt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], d: usize) {
    let (a, b, out) = (&a[..d * d], &b[..d * d], &mut out[..d * d]);
    for i in 0..d {
        let arow = &a[i * d..(i + 1) * d];
        for j in 0..d {
            let brow = &b[j * d..(j + 1) * d];
            out[i * d + j] = arow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
}

#[inline(always)]
fn outer_acc<T: Scalar>(out: &mut [T], s: T, u: &[T], v: &[T], d: usize) {
    for i in 0..d {
        let su = s * u[i];
        for (o, &vj) in out[i * d..(i + 1) * d].iter_mut().zip(&v[..d]) {
            *o += su * vj;
        }
    }
}

#[inline(always)]
fn axpy<T: Scalar>(out: &mut [T], s: T, x: &[T]) {
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += s * xi;
    }
}

#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// One prompt's moments as flat slices.
pub(crate) struct MomentView<'a, T> {
    pub s: &'a [T],
    pub u: &'a [T],
    pub x_query: &'a [T],
    pub y_query: T,
}

/// Scratch space reused across the prompts of a chunk.
#[derive(Default)]
pub(crate) struct Workspace<T> {
    d: usize,
    k: usize,
    s: Vec<T>,
    t: Vec<T>,
    r: Vec<T>,
    w: Vec<T>,
    u: Vec<T>,
    xq: Vec<T>,
    p: Vec<T>,
    v: Vec<T>,
    gs: Vec<T>,
    gs_in: Vec<T>,
    gt: Vec<T>,
    m1: Vec<T>,
    m2: Vec<T>,
    gu: Vec<T>,
    gxq: Vec<T>,
    gv: Vec<T>,
    gp: Vec<T>,
    gx_in: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn ensure(&mut self, d: usize, k: usize) {
        if self.d == d && self.k == k {
            return;
        }
        let (d2, z) = (d * d, T::zero());
        *self = Self {
            d,
            k,
            s: vec![z; (k + 1) * d2],
            t: vec![z; k * d2],
            r: vec![z; k * d2],
            w: vec![z; k * d2],
            u: vec![z; (k + 1) * d],
            xq: vec![z; (k + 1) * d],
            p: vec![z; k * d],
            v: vec![z; k * d],
            gs: vec![z; d2],
            gs_in: vec![z; d2],
            gt: vec![z; d2],
            m1: vec![z; d2],
            m2: vec![z; d2],
            gu: vec![z; d],
            gxq: vec![z; d],
            gv: vec![z; d],
            gp: vec![z; d],
            gx_in: vec![z; d],
        };
    }
}

/// Layer matrices as flat slices; `b` is `None` for sparse stacks.
pub(crate) struct LayerView<'a, T> {
    pub a: &'a [T],
    pub b: Option<&'a [T]>,
}

/// Gradient accumulators, one `d×d` slice per layer.
pub(crate) struct GradSink<'a, T> {
    pub da: Vec<&'a mut [T]>,
    pub db: Option<Vec<&'a mut [T]>>,
}

/// Squared error of one prompt; accumulates the (unsymmetrized) gradient
/// into `sink` when given.
pub(crate) fn structured<T: Scalar>(
    layers: &[LayerView<'_, T>],
    mom: &MomentView<'_, T>,
    inv_n: T,
    ws: &mut Workspace<T>,
    sink: Option<&mut GradSink<'_, T>>,
) -> T {
    // Constant dimensions let the small loops unroll.
    match mom.u.len() {
        1 => structured_body(layers, mom, inv_n, ws, sink, 1),
        2 => structured_body(layers, mom, inv_n, ws, sink, 2),
        3 => structured_body(layers, mom, inv_n, ws, sink, 3),
        4 => structured_body(layers, mom, inv_n, ws, sink, 4),
        5 => structured_body(layers, mom, inv_n, ws, sink, 5),
        6 => structured_body(layers, mom, inv_n, ws, sink, 6),
        d => structured_body(layers, mom, inv_n, ws, sink, d),
    }
}

#[inline(always)]
fn structured_body<T: Scalar>(
    layers: &[LayerView<'_, T>],
    mom: &MomentView<'_, T>,
    inv_n: T,
    ws: &mut Workspace<T>,
    sink: Option<&mut GradSink<'_, T>>,
    d: usize,
) -> T {
    let d2 = d * d;
    let k = layers.len();
    ws.ensure(d, k);
    let gdpp = layers.iter().any(|l| l.b.is_some());
    ws.u[..d].copy_from_slice(mom.u);
    ws.xq[..d].copy_from_slice(mom.x_query);
    if gdpp {
        ws.s[..d2].copy_from_slice(mom.s);
    }
    let mut c = T::zero();
    for (i, l) in layers.iter().enumerate() {
        let (s_i, x_i) = if gdpp {
            (&ws.s[i * d2..(i + 1) * d2], &ws.xq[i * d..(i + 1) * d])
        } else {
            (mom.s, mom.x_query)
        };
        let (u_lo, u_hi) = ws.u.split_at_mut((i + 1) * d);
        let u_i = &u_lo[i * d..];
        let p_i = &mut ws.p[i * d..(i + 1) * d];
        mv(l.a, u_i, p_i, d);
        c += inv_n * dot(p_i, x_i);
        let v_i = &mut ws.v[i * d..(i + 1) * d];
        mv(s_i, p_i, v_i, d);
        for (vj, &uj) in v_i.iter_mut().zip(u_i) {
            *vj = uj + inv_n * *vj;
        }
        let u_next = &mut u_hi[..d];
        match l.b {
            Some(b) if i + 1 < k => {
                let r_i = &mut ws.r[i * d2..(i + 1) * d2];
                mm(s_i, l.a, r_i, d);
                let t_i = &mut ws.t[i * d2..(i + 1) * d2];
                mm(b, r_i, t_i, d);
                for (j, x) in t_i.iter_mut().enumerate() {
                    *x *= inv_n;
                    if j % (d + 1) == 0 {
                        *x += T::one();
                    }
                }
                let w_i = &mut ws.w[i * d2..(i + 1) * d2];
                mm(t_i, s_i, w_i, d);
                let (s_lo, s_hi) = ws.s.split_at_mut((i + 1) * d2);
                let _ = s_lo;
                mmt(w_i, t_i, &mut s_hi[..d2], d);
                mv(t_i, v_i, u_next, d);
                let (x_lo, x_hi) = ws.xq.split_at_mut((i + 1) * d);
                mv(t_i, &x_lo[i * d..], &mut x_hi[..d], d);
            }
            _ => {
                u_next.copy_from_slice(v_i);
                if gdpp {
                    let (s_lo, s_hi) = ws.s.split_at_mut((i + 1) * d2);
                    s_hi[..d2].copy_from_slice(&s_lo[i * d2..]);
                    let (x_lo, x_hi) = ws.xq.split_at_mut((i + 1) * d);
                    x_hi[..d].copy_from_slice(&x_lo[i * d..]);
                }
            }
        }
    }
    let res = c + mom.y_query;
    let Some(sink) = sink else {
        return res * res;
    };
    let gc = T::lit(2.0) * res;
    ws.gu.fill(T::zero());
    ws.gxq.fill(T::zero());
    ws.gs.fill(T::zero());
    for i in (0..k).rev() {
        let l = &layers[i];
        let (s_i, x_i) = if gdpp {
            (&ws.s[i * d2..(i + 1) * d2], &ws.xq[i * d..(i + 1) * d])
        } else {
            (mom.s, mom.x_query)
        };
        let u_i = &ws.u[i * d..(i + 1) * d];
        let p_i = &ws.p[i * d..(i + 1) * d];
        let v_i = &ws.v[i * d..(i + 1) * d];
        let has_t = l.b.is_some() && i + 1 < k;
        if has_t {
            let b = l.b.expect("checked");
            let t_i = &ws.t[i * d2..(i + 1) * d2];
            let r_i = &ws.r[i * d2..(i + 1) * d2];
            let w_i = &ws.w[i * d2..(i + 1) * d2];
            // gT = gu' vᵀ + gx' x_qᵀ + (G + Gᵀ) T S
            for a in 0..d {
                for bcol in 0..d {
                    ws.m1[a * d + bcol] = ws.gs[a * d + bcol] + ws.gs[bcol * d + a];
                }
            }
            mm(&ws.m1, w_i, &mut ws.gt, d);
            outer_acc(&mut ws.gt, T::one(), &ws.gu, v_i, d);
            outer_acc(&mut ws.gt, T::one(), &ws.gxq, x_i, d);
            mtv(t_i, &ws.gu, &mut ws.gv, d);
            mtv(t_i, &ws.gxq, &mut ws.gx_in, d);
            mm(&ws.gs, t_i, &mut ws.m1, d);
            mtm(t_i, &ws.m1, &mut ws.gs_in, d);
            // T = I + (1/n) B S A
            mmt(&ws.gt, r_i, &mut ws.m1, d);
            if let Some(db) = sink.db.as_mut() {
                axpy(db[i], inv_n, &ws.m1);
            }
            mtm(b, &ws.gt, &mut ws.m2, d);
            mmt(&ws.m2, l.a, &mut ws.m1, d);
            axpy(&mut ws.gs_in, inv_n, &ws.m1);
            mtm(s_i, &ws.m2, &mut ws.m1, d);
            axpy(sink.da[i], inv_n, &ws.m1);
        } else {
            ws.gv.copy_from_slice(&ws.gu);
            ws.gx_in.copy_from_slice(&ws.gxq);
            if gdpp {
                ws.gs_in.copy_from_slice(&ws.gs);
            }
        }
        // v = u + (1/n) S p
        if gdpp {
            outer_acc(&mut ws.gs_in, inv_n, &ws.gv, p_i, d);
        }
        mtv(s_i, &ws.gv, &mut ws.gp, d);
        for j in 0..d {
            ws.gp[j] = inv_n * (ws.gp[j] + gc * x_i[j]);
            ws.gx_in[j] += inv_n * gc * p_i[j];
        }
        // p = A u
        outer_acc(sink.da[i], T::one(), &ws.gp, u_i, d);
        mtv(l.a, &ws.gp, &mut ws.gu, d);
        for j in 0..d {
            ws.gu[j] += ws.gv[j];
        }
        std::mem::swap(&mut ws.gxq, &mut ws.gx_in);
        if gdpp {
            std::mem::swap(&mut ws.gs, &mut ws.gs_in);
        }
    }
    res * res
}

/// Scratch space for unconstrained stacks in `m = d+1` token space.
#[derive(Default)]
pub(crate) struct FullWorkspace<T> {
    m: usize,
    k: usize,
    km: Vec<T>,
    z: Vec<T>,
    t: Vec<T>,
    pk: Vec<T>,
    kq: Vec<T>,
    a: Vec<T>,
    qz: Vec<T>,
    kqz: Vec<T>,
    gz: Vec<T>,
    gz_in: Vec<T>,
    gk: Vec<T>,
    gk_in: Vec<T>,
    gt: Vec<T>,
    m1: Vec<T>,
    m2: Vec<T>,
}

impl<T: Scalar> FullWorkspace<T> {
    fn ensure(&mut self, m: usize, k: usize) {
        if self.m == m && self.k == k {
            return;
        }
        let (m2, z) = (m * m, T::zero());
        *self = Self {
            m,
            k,
            km: vec![z; k * m2],
            z: vec![z; (k + 1) * m],
            t: vec![z; k * m2],
            pk: vec![z; k * m2],
            kq: vec![z; k * m2],
            a: vec![z; m],
            qz: vec![z; m],
            kqz: vec![z; m],
            gz: vec![z; m],
            gz_in: vec![z; m],
            gk: vec![z; m2],
            gk_in: vec![z; m2],
            gt: vec![z; m2],
            m1: vec![z; m2],
            m2: vec![z; m2],
        };
    }
}

/// `(P, Q)` of one unconstrained layer, `m×m` row-major.
pub(crate) struct FullView<'a, T> {
    pub p: &'a [T],
    pub q: &'a [T],
}

pub(crate) struct FullSink<'a, T> {
    pub dp: Vec<&'a mut [T]>,
    pub dq: Vec<&'a mut [T]>,
}

/// Squared error of one prompt through unconstrained layers
/// `z ← T z`, `K ← T K Tᵀ` with `T = I + (1/n) P K Q`.
pub(crate) fn full<T: Scalar>(
    layers: &[FullView<'_, T>],
    mom: &MomentView<'_, T>,
    yy: T,
    inv_n: T,
    ws: &mut FullWorkspace<T>,
    sink: Option<&mut FullSink<'_, T>>,
) -> T {
    match mom.u.len() + 1 {
        2 => full_body(layers, mom, yy, inv_n, ws, sink, 2),
        3 => full_body(layers, mom, yy, inv_n, ws, sink, 3),
        4 => full_body(layers, mom, yy, inv_n, ws, sink, 4),
        5 => full_body(layers, mom, yy, inv_n, ws, sink, 5),
        6 => full_body(layers, mom, yy, inv_n, ws, sink, 6),
        7 => full_body(layers, mom, yy, inv_n, ws, sink, 7),
        m => full_body(layers, mom, yy, inv_n, ws, sink, m),
    }
}

#[inline(always)]
fn full_body<T: Scalar>(
    layers: &[FullView<'_, T>],
    mom: &MomentView<'_, T>,
    yy: T,
    inv_n: T,
    ws: &mut FullWorkspace<T>,
    sink: Option<&mut FullSink<'_, T>>,
    m: usize,
) -> T {
    let d = m - 1;
    let m2 = m * m;
    let k = layers.len();
    ws.ensure(m, k);
    {
        let k0 = &mut ws.km[..m2];
        for i in 0..d {
            k0[i * m..i * m + d].copy_from_slice(&mom.s[i * d..(i + 1) * d]);
            k0[i * m + d] = mom.u[i];
            k0[d * m + i] = mom.u[i];
        }
        k0[d * m + d] = yy;
        ws.z[..d].copy_from_slice(mom.x_query);
        ws.z[d] = T::zero();
    }
    let last = k - 1;
    for i in 0..last {
        let l = &layers[i];
        let (k_lo, k_hi) = ws.km.split_at_mut((i + 1) * m2);
        let k_i = &k_lo[i * m2..];
        let pk = &mut ws.pk[i * m2..(i + 1) * m2];
        let kq = &mut ws.kq[i * m2..(i + 1) * m2];
        let t = &mut ws.t[i * m2..(i + 1) * m2];
        mm(l.p, k_i, pk, m);
        mm(k_i, l.q, kq, m);
        mm(pk, l.q, t, m);
        for (j, x) in t.iter_mut().enumerate() {
            *x *= inv_n;
            if j % (m + 1) == 0 {
                *x += T::one();
            }
        }
        let (z_lo, z_hi) = ws.z.split_at_mut((i + 1) * m);
        mv(t, &z_lo[i * m..], &mut z_hi[..m], m);
        mm(t, k_i, &mut ws.m1, m);
        mmt(&ws.m1, t, &mut k_hi[..m2], m);
    }
    // Only the label entry of the last layer's output is read.
    let l = &layers[last];
    let k_l = &ws.km[last * m2..(last + 1) * m2];
    let z_l = &ws.z[last * m..(last + 1) * m];
    mtv(k_l, &l.p[d * m..(d + 1) * m], &mut ws.a, m);
    mv(l.q, z_l, &mut ws.qz, m);
    let res = z_l[d] + inv_n * dot(&ws.a, &ws.qz) + mom.y_query;
    let Some(sink) = sink else {
        return res * res;
    };
    let g = T::lit(2.0) * res;
    mv(k_l, &ws.qz, &mut ws.kqz, m);
    axpy(&mut sink.dp[last][d * m..(d + 1) * m], inv_n * g, &ws.kqz);
    outer_acc(sink.dq[last], inv_n * g, &ws.a, z_l, m);
    mtv(l.q, &ws.a, &mut ws.gz, m);
    for x in ws.gz.iter_mut() {
        *x *= inv_n * g;
    }
    ws.gz[d] += g;
    if last > 0 {
        ws.gk.fill(T::zero());
        outer_acc(&mut ws.gk, inv_n * g, &l.p[d * m..(d + 1) * m], &ws.qz, m);
    }
    for i in (0..last).rev() {
        let l = &layers[i];
        let k_i = &ws.km[i * m2..(i + 1) * m2];
        let z_i = &ws.z[i * m..(i + 1) * m];
        let t = &ws.t[i * m2..(i + 1) * m2];
        // gT = gz zᵀ + (gK + gKᵀ) T K
        for r in 0..m {
            for c in 0..m {
                ws.m1[r * m + c] = ws.gk[r * m + c] + ws.gk[c * m + r];
            }
        }
        mm(&ws.m1, t, &mut ws.m2, m);
        mm(&ws.m2, k_i, &mut ws.gt, m);
        outer_acc(&mut ws.gt, T::one(), &ws.gz, z_i, m);
        mmt(&ws.gt, &ws.kq[i * m2..(i + 1) * m2], &mut ws.m1, m);
        axpy(sink.dp[i], inv_n, &ws.m1);
        mtm(&ws.pk[i * m2..(i + 1) * m2], &ws.gt, &mut ws.m1, m);
        axpy(sink.dq[i], inv_n, &ws.m1);
        mtv(t, &ws.gz, &mut ws.gz_in, m);
        std::mem::swap(&mut ws.gz, &mut ws.gz_in);
        if i > 0 {
            mtm(t, &ws.gk, &mut ws.m1, m);
            mm(&ws.m1, t, &mut ws.gk_in, m);
            mtm(l.p, &ws.gt, &mut ws.m1, m);
            mmt(&ws.m1, l.q, &mut ws.m2, m);
            axpy(&mut ws.gk_in, inv_n, &ws.m2);
            std::mem::swap(&mut ws.gk, &mut ws.gk_in);
        }
    }
    res * res
}
