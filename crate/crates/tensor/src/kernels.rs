//! Raw slice kernels shared by the eager [`Tensor`](crate::Tensor) methods and
//! the recorded [`Graph`](crate::Graph) operations.

use crate::conv::ConvGeometry;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (&d, &i) in shape.iter().zip(index) {
        assert!(i < d, "index {index:?} out of bounds for {shape:?}");
        off = off * d + i;
    }
    off
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
///
/// A transposed operand is stored row-major in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

/// Shape bookkeeping for rank-2/rank-3 matrix products with batch broadcast from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MatmulPlan {
    pub a_batch: usize,
    pub b_batch: usize,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batched_output: bool,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let split = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match *s {
                [r, c] => Some((1, r, c)),
                [bt, r, c] => Some((bt, r, c)),
                _ => None,
            }
        };
        let err = || TensorError::dim("matmul", format!("cannot multiply {a:?} by {b:?}"));
        let (a_batch, m, k) = split(a).ok_or_else(err)?;
        let (b_batch, k2, n) = split(b).ok_or_else(err)?;
        if k != k2 || !(a_batch == b_batch || a_batch == 1 || b_batch == 1) {
            return Err(err());
        }
        Ok(MatmulPlan {
            a_batch,
            b_batch,
            batch: a_batch.max(b_batch),
            m,
            k,
            n,
            batched_output: a.len() == 3 || b.len() == 3,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched_output {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn flops(&self) -> u64 {
        2 * (self.batch * self.m * self.k * self.n) as u64
    }

    fn a_at<'a, T>(&self, a: &'a [T], i: usize) -> &'a [T] {
        let sz = self.m * self.k;
        let i = if self.a_batch == 1 { 0 } else { i };
        &a[i * sz..(i + 1) * sz]
    }

    fn b_at<'a, T>(&self, b: &'a [T], i: usize) -> &'a [T] {
        let sz = self.k * self.n;
        let i = if self.b_batch == 1 { 0 } else { i };
        &b[i * sz..(i + 1) * sz]
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.b_batch == 1 {
            gemm(self.a_batch * m, k, n, a, false, b, false, out, false);
            return;
        }
        for i in 0..self.batch {
            let o = &mut out[i * m * n..(i + 1) * m * n];
            gemm(m, k, n, self.a_at(a, i), false, self.b_at(b, i), false, o, false);
        }
    }

    /// Accumulates `dA = dC Bᵀ` and `dB = Aᵀ dC` into zero-initialised buffers.
    pub fn backward<T: Scalar>(
        &self,
        a: &[T],
        b: &[T],
        dout: &[T],
        da: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(da) = da {
            if self.b_batch == 1 {
                gemm(self.a_batch * m, n, k, dout, false, b, true, da, true);
            } else {
                for i in 0..self.batch {
                    let d = &dout[i * m * n..(i + 1) * m * n];
                    let j = if self.a_batch == 1 { 0 } else { i };
                    let dst = &mut da[j * m * k..(j + 1) * m * k];
                    gemm(m, n, k, d, false, self.b_at(b, i), true, dst, true);
                }
            }
        }
        if let Some(db) = db {
            if self.b_batch == 1 && self.a_batch == self.batch {
                gemm(k, self.batch * m, n, a, true, dout, false, db, true);
            } else {
                for i in 0..self.batch {
                    let d = &dout[i * m * n..(i + 1) * m * n];
                    let j = if self.b_batch == 1 { 0 } else { i };
                    let dst = &mut db[j * k * n..(j + 1) * k * n];
                    gemm(k, m, n, self.a_at(a, i), true, d, false, dst, true);
                }
            }
        }
    }
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(TensorError::dim(
            "permute",
            format!("permutation {perm:?} for shape {shape:?}"),
        ));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(TensorError::dim(
                "permute",
                format!("invalid permutation {perm:?}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Copy>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the odometer over all but the innermost axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis length, inner) decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(shape: &[usize], axis: usize, x: &[T], out: &mut [T]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    shape: &[usize],
    axis: usize,
    y: &[T],
    dy: &[T],
    dx: &mut [T],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += dy[base + j * inner] * y[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                dx[p] += y[p] * (dy[p] - dot);
            }
        }
    }
}

/// Normalises each last-axis row; returns per-row mean and reciprocal std.
pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_usize(d);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_usize(d);
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut xhat = vec![T::zero(); d];
    for (r, (&mean, &rstd)) in means.iter().zip(rstds).enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            xhat[c] = (row[c] - mean) * rstd;
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            for c in 0..d {
                dg[c] += g[c] * xhat[c];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for c in 0..d {
                db[c] += g[c];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for c in 0..d {
                let gh = g[c] * gamma[c];
                mean_g += gh;
                mean_gx += gh * xhat[c];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for c in 0..d {
                let gh = g[c] * gamma[c];
                dx[r * d + c] += rstd * (gh - mean_g - xhat[c] * mean_gx);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (cig, cog, cout) = (g.cin_group, g.cout_group, g.cout);
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_off = ((n * g.out_h + oy) * g.out_w + ox) * cout;
                let o = &mut out[o_off..o_off + cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_col(ox, kx) else { continue };
                        let x_off = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let w_off = (ky * g.kw + kx) * cig * cout;
                        for grp in 0..g.groups {
                            let og = &mut o[grp * cog..(grp + 1) * cog];
                            for ci in 0..cig {
                                let xv = x[x_off + grp * cig + ci];
                                let wr = &w[w_off + ci * cout + grp * cog..][..cog];
                                for (acc, &wv) in og.iter_mut().zip(wr) {
                                    *acc += xv * wv;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    for (acc, &bv) in o.iter_mut().zip(b) {
                        *acc += bv;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (cig, cog, cout) = (g.cin_group, g.cout_group, g.cout);
    if let Some(db) = db {
        for row in dout.chunks(cout) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_off = ((n * g.out_h + oy) * g.out_w + ox) * cout;
                let go = &dout[o_off..o_off + cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_col(ox, kx) else { continue };
                        let x_off = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let w_off = (ky * g.kw + kx) * cig * cout;
                        for grp in 0..g.groups {
                            let gg = &go[grp * cog..(grp + 1) * cog];
                            for ci in 0..cig {
                                let xi = x_off + grp * cig + ci;
                                let wi = w_off + ci * cout + grp * cog;
                                if let Some(dx) = dx.as_deref_mut() {
                                    let wr = &w[wi..wi + cog];
                                    let mut s = T::zero();
                                    for (&gv, &wv) in gg.iter().zip(wr) {
                                        s += gv * wv;
                                    }
                                    dx[xi] += s;
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    let xv = x[xi];
                                    for (acc, &gv) in dw[wi..wi + cog].iter_mut().zip(gg) {
                                        *acc += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
