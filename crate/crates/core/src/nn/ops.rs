//! Sparse operators over tape variables, and plain (tape-free) versions of
//! each operator for direct use.

use alloc::sync::Arc;
use alloc::vec::Vec;

use super::tape::{Tape, Var, NO_ROW};
use crate::coords::{generative_expand, CoordSet, SparseTensor};
use crate::error::{bail, Result};
use crate::kmap::{build_kernel_map, Kernel, KernelMap};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// A sparse tensor whose features live on a tape.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub coords: Arc<CoordSet>,
    pub feats: Var,
}

impl SparseVar {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    pub fn input<T: Scalar>(tape: &mut Tape<T>, t: &SparseTensor<T>, requires_grad: bool) -> Self {
        Self { coords: t.coords.clone(), feats: tape.input(t.features.clone(), requires_grad) }
    }

    pub fn to_tensor<T: Scalar>(&self, tape: &Tape<T>) -> SparseTensor<T> {
        SparseTensor { coords: self.coords.clone(), features: tape.value(self.feats).clone() }
    }
}

/// Per-row batch index and the number of batch slots (`max batch + 1`).
pub fn batch_groups(coords: &CoordSet) -> (Arc<Vec<u32>>, usize) {
    let ids = coords.batch_ids();
    let n = ids.iter().max().map_or(0, |&b| b as usize + 1);
    (Arc::new(ids), n)
}

pub fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: &SparseVar,
    w: Var,
    b: Option<Var>,
    kmap: Arc<KernelMap>,
    out: Arc<CoordSet>,
) -> Result<SparseVar> {
    if kmap.n_out() != out.len() {
        bail!(Shape, "kernel map has {} outputs, coordinate set {}", kmap.n_out(), out.len());
    }
    let feats = tape.conv(x.feats, w, b, kmap)?;
    Ok(SparseVar { coords: out, feats })
}

/// `A ++ B` on A's coordinates, zero-filled where B has no row.
pub fn concat<T: Scalar>(tape: &mut Tape<T>, a: &SparseVar, b: &SparseVar) -> Result<SparseVar> {
    if a.stride() != b.stride() {
        bail!(Shape, "concat of strides {} and {}", a.stride(), b.stride());
    }
    let rows: Vec<u32> = if Arc::ptr_eq(&a.coords, &b.coords) {
        (0..a.len() as u32).collect()
    } else {
        a.coords.iter().map(|c| b.coords.get(c).unwrap_or(NO_ROW)).collect()
    };
    let feats = tape.concat(a.feats, b.feats, Arc::new(rows))?;
    Ok(SparseVar { coords: a.coords.clone(), feats })
}

/// Mean feature vector per batch item: `n_batches x m`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: &SparseVar) -> Result<Var> {
    let (groups, n) = batch_groups(&x.coords);
    tape.group_mean(x.feats, groups, n)
}

/// Squeeze-and-excite gating with `fc1: m x h` and `fc2: h x m`.
pub fn squeeze_excite<T: Scalar>(tape: &mut Tape<T>, x: &SparseVar, fc1: Var, fc2: Var) -> Result<SparseVar> {
    let (groups, n) = batch_groups(&x.coords);
    let pooled = tape.group_mean(x.feats, groups.clone(), n)?;
    let h = tape.matmul(pooled, fc1)?;
    let h = tape.relu(h);
    let g = tape.matmul(h, fc2)?;
    let g = tape.sigmoid(g);
    let feats = tape.broadcast_mul(x.feats, g, groups)?;
    Ok(SparseVar { coords: x.coords.clone(), feats })
}

/// Convolution weights: `K` offsets of `m_in x m_out` matrices stacked into a
/// `(K * m_in) x m_out` matrix, plus an optional `1 x m_out` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub kernel: Kernel,
    pub weight: Matrix<T>,
    pub bias: Option<Matrix<T>>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(kernel: Kernel, weight: Matrix<T>, bias: Option<Matrix<T>>) -> Result<Self> {
        if !weight.rows().is_multiple_of(kernel.volume()) {
            bail!(Shape, "weight rows {} not a multiple of kernel volume {}", weight.rows(), kernel.volume());
        }
        if let Some(b) = &bias {
            if b.rows() != 1 || b.cols() != weight.cols() {
                bail!(Shape, "bias must be 1 x {}", weight.cols());
            }
        }
        if !weight.is_finite() || bias.as_ref().is_some_and(|b| !b.is_finite()) {
            bail!(Numerical, "convolution weights must be finite");
        }
        Ok(Self { kernel, weight, bias })
    }

    /// Weights from per-offset matrices in kernel offset order.
    pub fn from_offsets(kernel: Kernel, per_offset: &[Matrix<T>], bias: Option<Matrix<T>>) -> Result<Self> {
        if per_offset.len() != kernel.volume() {
            bail!(Shape, "{} offset matrices for kernel volume {}", per_offset.len(), kernel.volume());
        }
        let (m_in, m_out) = (per_offset[0].rows(), per_offset[0].cols());
        let mut data = Vec::with_capacity(kernel.volume() * m_in * m_out);
        for w in per_offset {
            if w.rows() != m_in || w.cols() != m_out {
                bail!(Shape, "offset matrices must all be {m_in} x {m_out}");
            }
            data.extend_from_slice(w.as_slice());
        }
        let rows = kernel.volume() * m_in;
        Self::new(kernel, Matrix::from_vec(rows, m_out, data)?, bias)
    }

    /// Every offset block transposed. A transposed convolution with these
    /// weights is the adjoint of this convolution's linear part.
    pub fn adjoint(&self) -> Self {
        let (k, m_out) = (self.kernel.volume(), self.weight.cols());
        let m_in = self.weight.rows() / k;
        let mut data = Vec::with_capacity(self.weight.as_slice().len());
        for o in 0..k {
            let block = &self.weight.as_slice()[o * m_in * m_out..(o + 1) * m_in * m_out];
            let block = Matrix::from_vec(m_in, m_out, block.to_vec()).expect("block shape").transpose();
            data.extend_from_slice(block.as_slice());
        }
        let weight = Matrix::from_vec(k * m_out, m_in, data).expect("same count");
        Self { kernel: self.kernel.clone(), weight, bias: None }
    }

    pub fn m_in(&self) -> usize {
        self.weight.rows() / self.kernel.volume()
    }

    pub fn m_out(&self) -> usize {
        self.weight.cols()
    }
}

fn run_conv<T: Scalar>(t: &SparseTensor<T>, w: &ConvWeights<T>, kmap: KernelMap, out: Arc<CoordSet>) -> Result<SparseTensor<T>> {
    if t.channels() != w.m_in() {
        bail!(Shape, "tensor has {} channels, weights expect {}", t.channels(), w.m_in());
    }
    if kmap.volume() != w.kernel.volume() {
        bail!(Shape, "kernel map has {} offsets, weights {}", kmap.volume(), w.kernel.volume());
    }
    let mut tape = Tape::new();
    let x = SparseVar::input(&mut tape, t, false);
    let wv = tape.input(w.weight.clone(), false);
    let bv = w.bias.as_ref().map(|b| tape.input(b.clone(), false));
    conv(&mut tape, &x, wv, bv, Arc::new(kmap), out).map(|y| y.to_tensor(&tape))
}

/// Sparse convolution of `t` onto `out` using a forward or transposed map
/// built for exactly those coordinate sets.
pub fn sparse_conv<T: Scalar>(
    t: &SparseTensor<T>,
    w: &ConvWeights<T>,
    kmap: &KernelMap,
    out: Arc<CoordSet>,
) -> Result<SparseTensor<T>> {
    if kmap.n_in() != t.len() {
        bail!(Shape, "kernel map has {} inputs, tensor {}", kmap.n_in(), t.len());
    }
    run_conv(t, w, kmap.clone(), out)
}

/// Builds the forward map from `t` to `out` and convolves.
pub fn sparse_conv_to<T: Scalar>(t: &SparseTensor<T>, w: &ConvWeights<T>, out: Arc<CoordSet>, conv_stride: i32) -> Result<SparseTensor<T>> {
    let kmap = build_kernel_map(&t.coords, &out, &w.kernel, conv_stride, false)?;
    run_conv(t, w, kmap, out)
}

/// Upsamples by `up_factor`, generating every kernel translate of every input
/// coordinate.
pub fn generative_transposed_conv<T: Scalar>(t: &SparseTensor<T>, w: &ConvWeights<T>, up_factor: i32) -> Result<SparseTensor<T>> {
    let out = Arc::new(generative_expand(&t.coords, &w.kernel, up_factor)?);
    let kmap = build_kernel_map(&t.coords, &out, &w.kernel, up_factor, true)?;
    run_conv(t, w, kmap, out)
}

pub fn relu<T: Scalar>(t: &SparseTensor<T>) -> SparseTensor<T> {
    SparseTensor { coords: t.coords.clone(), features: t.features.map(|v| v.max(T::zero())) }
}

/// Mean feature row per batch item; items without voxels get zeros.
pub fn global_avg_pool_plain<T: Scalar>(t: &SparseTensor<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let x = SparseVar::input(&mut tape, t, false);
    let v = global_avg_pool(&mut tape, &x)?;
    Ok(tape.value(v).clone())
}

/// Squeeze-and-excite with reduction `r`: `fc1` is `m x m/r`, `fc2` is
/// `m/r x m`.
pub fn squeeze_excite_plain<T: Scalar>(t: &SparseTensor<T>, fc1: &Matrix<T>, fc2: &Matrix<T>, r: usize) -> Result<SparseTensor<T>> {
    let m = t.channels();
    if r == 0 || !m.is_multiple_of(r) {
        bail!(Config, "channel count {m} is not divisible by reduction {r}");
    }
    let h = m / r;
    if fc1.rows() != m || fc1.cols() != h || fc2.rows() != h || fc2.cols() != m {
        bail!(Shape, "squeeze-excite weights must be {m}x{h} and {h}x{m}");
    }
    if t.is_empty() {
        return Ok(t.clone());
    }
    let mut tape = Tape::new();
    let x = SparseVar::input(&mut tape, t, false);
    let (a, b) = (tape.input(fc1.clone(), false), tape.input(fc2.clone(), false));
    let y = squeeze_excite(&mut tape, &x, a, b)?;
    Ok(y.to_tensor(&tape))
}

pub fn concat_features<T: Scalar>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    let mut tape = Tape::new();
    let (av, bv) = (SparseVar::input(&mut tape, a, false), SparseVar::input(&mut tape, b, false));
    let y = concat(&mut tape, &av, &bv)?;
    Ok(y.to_tensor(&tape))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Affine batch-norm parameters with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: alloc::vec![T::one(); channels],
            beta: alloc::vec![T::zero(); channels],
            running_mean: alloc::vec![T::zero(); channels],
            running_var: alloc::vec![T::one(); channels],
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
            mode: BnMode::Train,
        }
    }
}

/// Running-statistics update: exponential average with the batch mean and
/// the unbiased batch variance.
pub fn update_running<T: Scalar>(mean: &mut [T], var: &mut [T], batch_mean: &[T], batch_var: &[T], n: usize, momentum: T) {
    let correction = if n > 1 { T::from_f64(n as f64 / (n - 1) as f64) } else { T::one() };
    let keep = T::one() - momentum;
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + momentum * batch_mean[c];
        var[c] = (keep * var[c] + momentum * batch_var[c] * correction).max(T::zero());
    }
}

pub fn batch_norm<T: Scalar>(t: &SparseTensor<T>, state: &mut BatchNormState<T>) -> Result<SparseTensor<T>> {
    let m = t.channels();
    if state.gamma.len() != m {
        bail!(Shape, "batch norm has {} channels, tensor {}", state.gamma.len(), m);
    }
    if t.is_empty() {
        if state.mode == BnMode::Train {
            log::debug!("batch norm skipped on an empty tensor");
        }
        return Ok(t.clone());
    }
    let mut tape = Tape::new();
    let x = tape.input(t.features.clone(), false);
    let g = tape.input(Matrix::from_vec(1, m, state.gamma.clone())?, false);
    let b = tape.input(Matrix::from_vec(1, m, state.beta.clone())?, false);
    let y = match state.mode {
        BnMode::Train => {
            let (y, mom) = tape.batch_norm(x, g, b, state.eps)?;
            update_running(&mut state.running_mean, &mut state.running_var, &mom.mean, &mom.var, mom.count, state.momentum);
            y
        }
        BnMode::Eval => tape.batch_norm_eval(x, g, b, &state.running_mean, &state.running_var, state.eps)?,
    };
    Ok(SparseTensor { coords: t.coords.clone(), features: tape.value(y).clone() })
}
