//! Dense kernels with hand-written backward passes.
//!
//! Activations are row-major `[rows x cols]` slices. Every `*_bwd` takes the
//! values cached by its `*_fwd` and the upstream gradient.

use num_traits::{Float, FromPrimitive};

pub trait Scalar: Float + FromPrimitive + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// `C <- alpha * A * B + beta * C` for strided `m x k` A, `k x n` B, `m x n` C.
    ///
    /// # Safety
    /// Every strided index touched must lie inside the pointed-to allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with `stride` columns.
    pub fn block(data: &'a [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        View {
            data: &data[col0..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable view.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        ViewMut {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(data: &'a mut [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        ViewMut {
            data: &mut data[col0..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c <- alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        assert!(
            (c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len(),
            "output view out of bounds"
        );
    }
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: the bounds of all three views were checked above and `c` is
    // uniquely borrowed, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `y = x w + b` for `x: [rows x din]`, `w: [din x dout]`.
pub fn linear_fwd<T: Scalar>(x: &[T], rows: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        T::one(),
        View::new(x, rows, din),
        View::new(w, din, dout),
        T::one(),
        ViewMut::new(&mut y, rows, dout),
    );
    y
}

/// Accumulates `dw += x^T dy`, `db += sum_rows dy` and returns `dx = dy w^T` when asked.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dy: &[T],
    dout: usize,
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    gemm(
        T::one(),
        View::new(x, rows, din).t(),
        View::new(dy, rows, dout),
        T::one(),
        ViewMut::new(dw, din, dout),
    );
    for row in dy.chunks_exact(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); rows * din];
    gemm(
        T::one(),
        View::new(dy, rows, dout),
        View::new(w, din, dout).t(),
        T::zero(),
        ViewMut::new(&mut dx, rows, din),
    );
    Some(dx)
}

pub const LN_EPS: f64 = 1e-5;

/// Parameter-free layer norm over the last axis; returns `(xhat, inv_std)`.
pub fn layer_norm_fwd<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(LN_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
        let is = (var + eps).sqrt().recip();
        inv.push(is);
        out.extend(row.iter().map(|v| (*v - mean) * is));
    }
    (out, inv)
}

pub fn layer_norm_bwd<T: Scalar>(dxhat: &[T], xhat: &[T], inv_std: &[T], d: usize) -> Vec<T> {
    let dn = T::from_usize(d).unwrap();
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((g, xh), is) in dxhat.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(inv_std) {
        let mean_g = g.iter().copied().sum::<T>() / dn;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / dn;
        dx.extend(g.iter().zip(xh).map(|(gi, xi)| *is * (*gi - mean_g - *xi * mean_gx)));
    }
    dx
}

fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

pub fn silu_fwd<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| *v * sigmoid(*v)).collect()
}

pub fn silu_bwd<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(v, g)| {
            let s = sigmoid(*v);
            *g * s * (T::one() + *v * (T::one() - s))
        })
        .collect()
}

/// Feature-wise modulation `h * (1 + gamma_f) + beta_f`, where frame `f` owns
/// `per_frame` consecutive rows and `gb` holds `[gamma | beta]` per frame.
pub fn film_fwd<T: Scalar>(h: &[T], per_frame: usize, d: usize, gb: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(h.len());
    for (f, block) in h.chunks_exact(per_frame * d).enumerate() {
        let (gamma, beta) = gb[f * 2 * d..(f + 1) * 2 * d].split_at(d);
        for row in block.chunks_exact(d) {
            out.extend(
                row.iter()
                    .zip(gamma)
                    .zip(beta)
                    .map(|((v, g), b)| *v * (T::one() + *g) + *b),
            );
        }
    }
    out
}

/// Returns `(dh, dgb)`.
pub fn film_bwd<T: Scalar>(dm: &[T], h: &[T], per_frame: usize, d: usize, gb: &[T]) -> (Vec<T>, Vec<T>) {
    let frames = h.len() / (per_frame * d);
    let mut dh = Vec::with_capacity(h.len());
    let mut dgb = vec![T::zero(); frames * 2 * d];
    for f in 0..frames {
        let gamma = &gb[f * 2 * d..f * 2 * d + d];
        let (dgamma, dbeta) = dgb[f * 2 * d..(f + 1) * 2 * d].split_at_mut(d);
        let span = f * per_frame * d..(f + 1) * per_frame * d;
        for (grow, hrow) in dm[span.clone()].chunks_exact(d).zip(h[span].chunks_exact(d)) {
            for c in 0..d {
                dgamma[c] = dgamma[c] + grow[c] * hrow[c];
                dbeta[c] = dbeta[c] + grow[c];
                dh.push(grow[c] * (T::one() + gamma[c]));
            }
        }
    }
    (dh, dgb)
}

/// 3x3 zero-padded neighborhood gather: `[frames*gh*gw x d] -> [frames*gh*gw x 9d]`.
pub fn im2col<T: Scalar>(x: &[T], frames: usize, gh: usize, gw: usize, d: usize) -> Vec<T> {
    let mut col = vec![T::zero(); frames * gh * gw * 9 * d];
    for f in 0..frames {
        for r in 0..gh {
            for c in 0..gw {
                let dst = ((f * gh + r) * gw + c) * 9 * d;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sr, sc) = (r + ky, c + kx);
                        if sr < 1 || sc < 1 || sr > gh || sc > gw {
                            continue;
                        }
                        let src = ((f * gh + sr - 1) * gw + sc - 1) * d;
                        let k = (ky * 3 + kx) * d;
                        col[dst + k..dst + k + d].copy_from_slice(&x[src..src + d]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(dcol: &[T], frames: usize, gh: usize, gw: usize, d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); frames * gh * gw * d];
    for f in 0..frames {
        for r in 0..gh {
            for c in 0..gw {
                let src = ((f * gh + r) * gw + c) * 9 * d;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sr, sc) = (r + ky, c + kx);
                        if sr < 1 || sc < 1 || sr > gh || sc > gw {
                            continue;
                        }
                        let dst = ((f * gh + sr - 1) * gw + sc - 1) * d;
                        let k = (ky * 3 + kx) * d;
                        for ch in 0..d {
                            dx[dst + ch] = dx[dst + ch] + dcol[src + k + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn softmax_rows<T: Scalar>(s: &mut [T], n: usize) {
    for row in s.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Full multi-head self-attention over `tokens` rows of `qkv = [q | k | v]`.
///
/// Returns the head-concatenated output `[tokens x d]` and, when `keep_probs`,
/// the per-head attention matrices.
pub fn attention_fwd<T: Scalar>(
    qkv: &[T],
    tokens: usize,
    d: usize,
    heads: usize,
    keep_probs: bool,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_usize(dh).unwrap().sqrt().recip();
    let mut out = vec![T::zero(); tokens * d];
    let mut probs = if keep_probs {
        vec![T::zero(); heads * tokens * tokens]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_probs {
        Vec::new()
    } else {
        vec![T::zero(); tokens * tokens]
    };
    for h in 0..heads {
        let p: &mut [T] = if keep_probs {
            &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens]
        } else {
            &mut scratch
        };
        let q = View::block(qkv, tokens, 3 * d, h * dh, dh);
        let k = View::block(qkv, tokens, 3 * d, d + h * dh, dh);
        let v = View::block(qkv, tokens, 3 * d, 2 * d + h * dh, dh);
        gemm(scale, q, k.t(), T::zero(), ViewMut::new(p, tokens, tokens));
        softmax_rows(p, tokens);
        gemm(
            T::one(),
            View::new(p, tokens, tokens),
            v,
            T::zero(),
            ViewMut::block(&mut out, tokens, d, h * dh, dh),
        );
    }
    (out, probs)
}

pub fn attention_bwd<T: Scalar>(qkv: &[T], probs: &[T], dout: &[T], tokens: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let scale = T::from_usize(dh).unwrap().sqrt().recip();
    let mut dqkv = vec![T::zero(); tokens * 3 * d];
    let mut dp = vec![T::zero(); tokens * tokens];
    for h in 0..heads {
        let p = &probs[h * tokens * tokens..(h + 1) * tokens * tokens];
        let q = View::block(qkv, tokens, 3 * d, h * dh, dh);
        let k = View::block(qkv, tokens, 3 * d, d + h * dh, dh);
        let v = View::block(qkv, tokens, 3 * d, 2 * d + h * dh, dh);
        let dout_h = View::block(dout, tokens, d, h * dh, dh);
        // dV = P^T dO
        gemm(
            T::one(),
            View::new(p, tokens, tokens).t(),
            dout_h,
            T::zero(),
            ViewMut::block(&mut dqkv, tokens, 3 * d, 2 * d + h * dh, dh),
        );
        // dP = dO V^T, then through the row softmax.
        gemm(
            T::one(),
            dout_h,
            v.t(),
            T::zero(),
            ViewMut::new(&mut dp, tokens, tokens),
        );
        for (drow, prow) in dp.chunks_exact_mut(tokens).zip(p.chunks_exact(tokens)) {
            let dot = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum::<T>();
            for (g, pv) in drow.iter_mut().zip(prow) {
                *g = *pv * (*g - dot);
            }
        }
        gemm(
            scale,
            View::new(&dp, tokens, tokens),
            k,
            T::zero(),
            ViewMut::block(&mut dqkv, tokens, 3 * d, h * dh, dh),
        );
        gemm(
            scale,
            View::new(&dp, tokens, tokens).t(),
            q,
            T::zero(),
            ViewMut::block(&mut dqkv, tokens, 3 * d, d + h * dh, dh),
        );
    }
    dqkv
}

pub fn add_assign<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = *x + *y;
    }
}
