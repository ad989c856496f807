//! Raw numeric kernels shared by the tape and the plain operators.

use alloc::vec;
use alloc::vec::Vec;

use crate::kmap::KernelMap;
use crate::matrix::Matrix;
use crate::scalar::{gemm, Operand, Scalar};

fn gather_into<T: Scalar>(src: &Matrix<T>, rows: impl Iterator<Item = u32>, buf: &mut Vec<T>) {
    buf.clear();
    for r in rows {
        buf.extend_from_slice(src.row(r as usize));
    }
}

fn scatter_add<T: Scalar>(dst: &mut Matrix<T>, rows: impl Iterator<Item = u32>, buf: &[T]) {
    let cols = dst.cols();
    for (chunk, r) in buf.chunks_exact(cols).zip(rows) {
        for (d, &v) in dst.row_mut(r as usize).iter_mut().zip(chunk) {
            *d += v;
        }
    }
}

/// Gather, multiply by the per-offset weight slice, scatter-add.
///
/// `weight` is `(K * m_in) x m_out`; slice `k` holds `W_k`. Offsets are
/// processed in kernel order so the accumulation order is fixed.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Matrix<T>,
    weight: &Matrix<T>,
    bias: Option<&Matrix<T>>,
    kmap: &KernelMap,
) -> Matrix<T> {
    let m_in = x.cols();
    let m_out = weight.cols();
    let mut out = Matrix::zeros(kmap.n_out(), m_out);
    if let Some(b) = bias {
        for r in 0..kmap.n_out() {
            out.row_mut(r).copy_from_slice(b.row(0));
        }
    }
    let (mut xin, mut prod) = (Vec::new(), Vec::new());
    for k in 0..kmap.volume() {
        let pairs = kmap.pairs(k);
        if pairs.is_empty() {
            continue;
        }
        let wk = &weight.as_slice()[k * m_in * m_out..(k + 1) * m_in * m_out];
        let w_op = Operand::new(wk, m_in, m_out);
        if kmap.is_identity(k) {
            gemm(Operand::new(x.as_slice(), x.rows(), m_in), w_op, T::one(), out.as_mut_slice());
            continue;
        }
        gather_into(x, pairs.iter().map(|p| p.0), &mut xin);
        prod.clear();
        prod.resize(pairs.len() * m_out, T::zero());
        gemm(Operand::new(&xin, pairs.len(), m_in), w_op, T::zero(), &mut prod);
        scatter_add(&mut out, pairs.iter().map(|p| p.1), &prod);
    }
    out
}

/// Gradients of [`conv_forward`] with respect to input (when requested),
/// weight and bias.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Matrix<T>,
    weight: &Matrix<T>,
    kmap: &KernelMap,
    grad: &Matrix<T>,
    need_input: bool,
) -> (Option<Matrix<T>>, Matrix<T>, Matrix<T>) {
    let m_in = x.cols();
    let m_out = weight.cols();
    let mut gx = need_input.then(|| Matrix::zeros(x.rows(), m_in));
    let mut gw = Matrix::zeros(weight.rows(), m_out);
    let (mut xin, mut gin, mut prod) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..kmap.volume() {
        let pairs = kmap.pairs(k);
        if pairs.is_empty() {
            continue;
        }
        let wk = &weight.as_slice()[k * m_in * m_out..(k + 1) * m_in * m_out];
        let gwk = &mut gw.as_mut_slice()[k * m_in * m_out..(k + 1) * m_in * m_out];
        if kmap.is_identity(k) {
            let n = x.rows();
            gemm(Operand::new(x.as_slice(), n, m_in).t(), Operand::new(grad.as_slice(), n, m_out), T::one(), gwk);
            if let Some(gx) = gx.as_mut() {
                gemm(
                    Operand::new(grad.as_slice(), n, m_out),
                    Operand::new(wk, m_in, m_out).t(),
                    T::one(),
                    gx.as_mut_slice(),
                );
            }
            continue;
        }
        let p = pairs.len();
        gather_into(x, pairs.iter().map(|p| p.0), &mut xin);
        gather_into(grad, pairs.iter().map(|p| p.1), &mut gin);
        gemm(Operand::new(&xin, p, m_in).t(), Operand::new(&gin, p, m_out), T::one(), gwk);
        if let Some(gx) = gx.as_mut() {
            prod.clear();
            prod.resize(p * m_in, T::zero());
            gemm(Operand::new(&gin, p, m_out), Operand::new(wk, m_in, m_out).t(), T::zero(), &mut prod);
            scatter_add(gx, pairs.iter().map(|p| p.0), &prod);
        }
    }
    (gx, gw, column_sums(grad))
}

/// `1 x cols` row of column sums.
pub(crate) fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Per-channel mean and biased variance over rows.
pub(crate) fn channel_moments<T: Scalar>(x: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let (n, m) = (x.rows(), x.cols());
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut mean = vec![T::zero(); m];
    for r in 0..n {
        for (a, &v) in mean.iter_mut().zip(x.row(r)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v *= inv_n);
    let mut var = vec![T::zero(); m];
    for r in 0..n {
        for ((a, &v), &mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_n);
    (mean, var)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `max(z, 0) - z * y + ln(1 + exp(-|z|))`.
#[inline]
pub(crate) fn bce_with_logits<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// `ln(sum(exp(row)))`.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}
