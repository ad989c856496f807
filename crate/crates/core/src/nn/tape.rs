//! Reverse-mode tape over feature matrices.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! execution order, accumulating gradients additively where a value fans out,
//! and leaves the tape empty.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, sigmoid};
use super::params::ParamId;
use crate::error::{bail, Result};
use crate::kmap::KernelMap;
use crate::matrix::Matrix;
use crate::scalar::{gemm, Operand, Scalar};

/// Handle to a tape value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for absent rows in [`Tape::concat`].
pub const NO_ROW: u32 = u32::MAX;

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, kmap: Arc<KernelMap> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    GroupMean { x: Var, groups: Arc<Vec<u32>>, counts: Vec<u32> },
    MatMul { a: Var, b: Var },
    BroadcastMul { x: Var, gate: Var, groups: Arc<Vec<u32>> },
    Concat { a: Var, b: Var, b_rows: Arc<Vec<u32>> },
    Gather { x: Var, rows: Arc<Vec<u32>> },
    AddRow { x: Var, b: Var },
    Bce { logits: Var, targets: Vec<T> },
    WeightedCe { logits: Var, labels: Vec<u32>, weights: Vec<T> },
    LinComb { terms: Vec<(Var, T)> },
    DotConst { x: Var, r: Matrix<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "sparse_conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::GroupMean { .. } => "group_mean",
            Op::MatMul { .. } => "matmul",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::AddRow { .. } => "add_row",
            Op::Bce { .. } => "bce_with_logits",
            Op::WeightedCe { .. } => "weighted_cross_entropy",
            Op::LinComb { .. } => "lin_comb",
            Op::DotConst { .. } => "dot_const",
        }
    }
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    margin: f64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), margin: f64::INFINITY }
    }

    /// Smallest distance of any recorded non-smooth decision from its kink:
    /// ReLU inputs from 0, plus whatever callers report via
    /// [`Tape::note_margin`]. Finite-difference checks skip instances where
    /// this is tiny.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn note_margin(&mut self, distance: f64) {
        self.margin = self.margin.min(distance.abs());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            bail!(Contract, "variable {} is not on this tape", v.0);
        }
        Ok(())
    }

    /// Constant input; gradients are still reported for it when
    /// `requires_grad` is set.
    pub fn input(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, id: ParamId, value: Matrix<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// Sparse convolution driven by `kmap`; `w` is `(K * m_in) x m_out`,
    /// `b` is `1 x m_out`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, kmap: Arc<KernelMap>) -> Result<Var> {
        self.check(x)?;
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rows() != kmap.n_in() {
            bail!(Shape, "conv input has {} rows, kernel map expects {}", xv.rows(), kmap.n_in());
        }
        if wv.rows() != kmap.volume() * xv.cols() {
            bail!(
                Shape,
                "conv weight has {} rows, expected {} offsets x {} channels",
                wv.rows(),
                kmap.volume(),
                xv.cols()
            );
        }
        if let Some(b) = b {
            if self.value(b).cols() != wv.cols() || self.value(b).rows() != 1 {
                bail!(Shape, "conv bias must be 1 x {}", wv.cols());
            }
        }
        let out = kernels::conv_forward(xv, wv, b.map(|b| self.value(b)), &kmap);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, kmap }, ng))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let m = self.value(x).cols();
        if self.value(gamma).as_slice().len() != m || self.value(beta).as_slice().len() != m {
            bail!(Shape, "batch norm affine parameters must have {} entries", m);
        }
        Ok(m)
    }

    /// Training-mode batch norm over all rows. Returns the batch moments so the
    /// caller can update running statistics. Rows must be non-empty.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchMoments<T>)> {
        let m = self.check_affine(x, gamma, beta)?;
        let xv = self.value(x);
        let n = xv.rows();
        if n == 0 {
            bail!(Contract, "training batch norm on an empty tensor");
        }
        let (mean, var) = kernels::channel_moments(xv);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, m);
        let mut y = Matrix::zeros(n, m);
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        for r in 0..n {
            for c in 0..m {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                y.set(r, c, g[c] * h + b[c]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, ng);
        Ok((v, BatchMoments { mean, var, count: n }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let m = self.check_affine(x, gamma, beta)?;
        if mean.len() != m || var.len() != m {
            bail!(Shape, "running statistics must have {} entries", m);
        }
        let xv = self.value(x);
        let n = xv.rows();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, m);
        let mut y = Matrix::zeros(n, m);
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        for r in 0..n {
            for c in 0..m {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                y.set(r, c, g[c] * h + b[c]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(y, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let m = self.value(x).as_slice().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
        self.note_margin(m);
        let y = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid { x }, ng)
    }

    /// Mean of rows per group; empty groups yield zero rows.
    pub fn group_mean(&mut self, x: Var, groups: Arc<Vec<u32>>, n_groups: usize) -> Result<Var> {
        let xv = self.value(x);
        if groups.len() != xv.rows() {
            bail!(Shape, "{} group ids for {} rows", groups.len(), xv.rows());
        }
        let mut counts = vec![0u32; n_groups];
        let mut out = Matrix::zeros(n_groups, xv.cols());
        for (r, &g) in groups.iter().enumerate() {
            let g = g as usize;
            if g >= n_groups {
                bail!(Shape, "group id {} out of {}", g, n_groups);
            }
            counts[g] += 1;
            for (o, &v) in out.row_mut(g).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::from_f64(c as f64);
                out.row_mut(g).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::GroupMean { x, groups, counts }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b }, ng))
    }

    /// `y[r, c] = x[r, c] * gate[groups[r], c]`.
    pub fn broadcast_mul(&mut self, x: Var, gate: Var, groups: Arc<Vec<u32>>) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        if groups.len() != xv.rows() || gv.cols() != xv.cols() {
            bail!(Shape, "gate {}x{} does not broadcast over {}x{}", gv.rows(), gv.cols(), xv.rows(), xv.cols());
        }
        let mut y = xv.clone();
        for (r, &g) in groups.iter().enumerate() {
            if g as usize >= gv.rows() {
                bail!(Shape, "group id {} out of {}", g, gv.rows());
            }
            for (o, &s) in y.row_mut(r).iter_mut().zip(gv.row(g as usize)) {
                *o *= s;
            }
        }
        let ng = self.needs(x) || self.needs(gate);
        Ok(self.push(y, Op::BroadcastMul { x, gate, groups }, ng))
    }

    /// Row `r` of the output is `a[r] ++ b[b_rows[r]]`, zero-filled where
    /// `b_rows[r] == NO_ROW`.
    pub fn concat(&mut self, a: Var, b: Var, b_rows: Arc<Vec<u32>>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if b_rows.len() != av.rows() {
            bail!(Shape, "concat map has {} rows, left operand {}", b_rows.len(), av.rows());
        }
        let (ma, mb) = (av.cols(), bv.cols());
        let mut y = Matrix::zeros(av.rows(), ma + mb);
        for (r, &br) in b_rows.iter().enumerate() {
            let row = y.row_mut(r);
            row[..ma].copy_from_slice(av.row(r));
            if br != NO_ROW {
                if br as usize >= bv.rows() {
                    bail!(Shape, "concat row {} out of {}", br, bv.rows());
                }
                row[ma..].copy_from_slice(bv.row(br as usize));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Concat { a, b, b_rows }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<u32>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&r) = rows.iter().find(|&&r| r as usize >= xv.rows()) {
            bail!(Shape, "gather row {} out of {}", r, xv.rows());
        }
        let y = xv.gather_rows(&rows);
        let ng = self.needs(x);
        Ok(self.push(y, Op::Gather { x, rows }, ng))
    }

    /// Adds the `1 x c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            bail!(Shape, "row vector {}x{} does not match {} columns", bv.rows(), bv.cols(), xv.cols());
        }
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (o, &v) in y.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += v;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(y, Op::AddRow { x, b }, ng))
    }

    /// Mean binary cross entropy of an `n x 1` logit column; 0 when `n == 0`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 || z.rows() != targets.len() {
            bail!(Shape, "bce expects {} x 1 logits, got {}x{}", targets.len(), z.rows(), z.cols());
        }
        let n = targets.len();
        let total: T = z.as_slice().iter().zip(&targets).map(|(&z, &y)| kernels::bce_with_logits(z, y)).sum();
        let loss = if n == 0 { T::zero() } else { total / T::from_f64(n as f64) };
        let ng = self.needs(logits);
        Ok(self.push(Matrix::scalar(loss), Op::Bce { logits, targets }, ng))
    }

    /// `(1/n) sum_r weights[r] * -log softmax(logits[r])[labels[r]]`; 0 when
    /// `n == 0`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: Vec<u32>, weights: Vec<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() || weights.len() != labels.len() {
            bail!(Shape, "{} labels and {} weights for {} logit rows", labels.len(), weights.len(), z.rows());
        }
        let mut total = T::zero();
        for (r, (&y, &w)) in labels.iter().zip(&weights).enumerate() {
            if y as usize >= z.cols() {
                bail!(Shape, "label {} out of {} classes", y, z.cols());
            }
            let row = z.row(r);
            total += w * (kernels::log_sum_exp(row) - row[y as usize]);
        }
        let n = labels.len();
        let loss = if n == 0 { T::zero() } else { total / T::from_f64(n as f64) };
        let ng = self.needs(logits);
        Ok(self.push(Matrix::scalar(loss), Op::WeightedCe { logits, labels, weights }, ng))
    }

    /// `sum_i c_i * s_i` over `1 x 1` values.
    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, c) in terms {
            let m = self.value(v);
            if m.rows() != 1 || m.cols() != 1 {
                bail!(Shape, "lin_comb terms must be scalars");
            }
            total += c * m.get(0, 0);
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Matrix::scalar(total), Op::LinComb { terms: terms.to_vec() }, ng))
    }

    /// `sum(x * r)` for a constant `r` of x's shape.
    pub fn dot_const(&mut self, x: Var, r: Matrix<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != r.rows() || xv.cols() != r.cols() {
            bail!(Shape, "dot_const weights {}x{} for {}x{}", r.rows(), r.cols(), xv.rows(), xv.cols());
        }
        let s = xv.dot(&r);
        let ng = self.needs(x);
        Ok(self.push(Matrix::scalar(s), Op::DotConst { x, r }, ng))
    }

    /// First node whose value holds NaN or infinity: `(node index, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| (i, n.op.name()))
    }

    /// Back-propagates from the scalar `loss` with unit seed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with(loss, T::one())
    }

    /// Back-propagates `seed * d(loss)` and clears the tape.
    pub fn backward_with(&mut self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            bail!(Contract, "backward called on an empty tape");
        }
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            bail!(Contract, "backward needs a scalar loss, got {}x{}", lv.rows(), lv.cols());
        }
        let nodes = core::mem::take(&mut self.nodes);
        self.margin = f64::INFINITY;
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(seed));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    params.push((id, idx));
                    grads[idx] = Some(g);
                    continue;
                }
                _ => {}
            }
            let mut acc = |v: Var, d: Matrix<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::Conv { x, w, b, kmap } => {
                    let need_x = nodes[x.0].needs_grad;
                    let (gx, gw, gb) =
                        kernels::conv_backward(&nodes[x.0].value, &nodes[w.0].value, kmap, &g, need_x);
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let (n, m) = (g.rows(), g.cols());
                    let gs = nodes[gamma.0].value.as_slice();
                    let mut dgamma = Matrix::zeros(1, m);
                    let mut dbeta = Matrix::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g.get(r, c);
                            dbeta.as_mut_slice()[c] += gv;
                            dgamma.as_mut_slice()[c] += gv * xhat.get(r, c);
                        }
                    }
                    let nn = T::from_f64(n as f64);
                    let mut dx = Matrix::zeros(n, m);
                    for c in 0..m {
                        let k = gs[c] * inv_std[c] / nn;
                        let (db, dg) = (dbeta.as_slice()[c], dgamma.as_slice()[c]);
                        for r in 0..n {
                            dx.set(r, c, k * (nn * g.get(r, c) - db - xhat.get(r, c) * dg));
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, reshape_like(dgamma, &nodes[gamma.0].value));
                    acc(*beta, reshape_like(dbeta, &nodes[beta.0].value));
                }
                Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                    let (n, m) = (g.rows(), g.cols());
                    let gs = nodes[gamma.0].value.as_slice();
                    let mut dgamma = Matrix::zeros(1, m);
                    let mut dbeta = Matrix::zeros(1, m);
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g.get(r, c);
                            dbeta.as_mut_slice()[c] += gv;
                            dgamma.as_mut_slice()[c] += gv * xhat.get(r, c);
                            dx.set(r, c, gv * gs[c] * inv_std[c]);
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, reshape_like(dgamma, &nodes[gamma.0].value));
                    acc(*beta, reshape_like(dbeta, &nodes[beta.0].value));
                }
                Op::Relu { x } => {
                    let xv = &nodes[x.0].value;
                    let mut d = g;
                    for (dv, &v) in d.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if v <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(*x, d);
                }
                Op::Sigmoid { x } => {
                    let mut d = g;
                    for (dv, &y) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *dv *= y * (T::one() - y);
                    }
                    acc(*x, d);
                }
                Op::GroupMean { x, groups, counts } => {
                    let xv = &nodes[x.0].value;
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &gr) in groups.iter().enumerate() {
                        let inv = T::one() / T::from_f64(counts[gr as usize] as f64);
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(gr as usize)) {
                            *o = v * inv;
                        }
                    }
                    acc(*x, d);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        gemm(
                            Operand::new(g.as_slice(), g.rows(), g.cols()),
                            Operand::new(bv.as_slice(), bv.rows(), bv.cols()).t(),
                            T::zero(),
                            da.as_mut_slice(),
                        );
                        acc(*a, da);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(
                            Operand::new(av.as_slice(), av.rows(), av.cols()).t(),
                            Operand::new(g.as_slice(), g.rows(), g.cols()),
                            T::zero(),
                            db.as_mut_slice(),
                        );
                        acc(*b, db);
                    }
                }
                Op::BroadcastMul { x, gate, groups } => {
                    let (xv, gv) = (&nodes[x.0].value, &nodes[gate.0].value);
                    let mut dx = g.clone();
                    let mut dgate = Matrix::zeros(gv.rows(), gv.cols());
                    for (r, &gr) in groups.iter().enumerate() {
                        let gr = gr as usize;
                        for c in 0..xv.cols() {
                            let up = g.get(r, c);
                            dx.set(r, c, up * gv.get(gr, c));
                            let cur = dgate.get(gr, c);
                            dgate.set(gr, c, cur + up * xv.get(r, c));
                        }
                    }
                    acc(*x, dx);
                    acc(*gate, dgate);
                }
                Op::Concat { a, b, b_rows } => {
                    let ma = nodes[a.0].value.cols();
                    let bv = &nodes[b.0].value;
                    let mut da = Matrix::zeros(g.rows(), ma);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for (r, &br) in b_rows.iter().enumerate() {
                        let row = g.row(r);
                        da.row_mut(r).copy_from_slice(&row[..ma]);
                        if br != NO_ROW {
                            for (o, &v) in db.row_mut(br as usize).iter_mut().zip(&row[ma..]) {
                                *o += v;
                            }
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Gather { x, rows } => {
                    let xv = &nodes[x.0].value;
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in d.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*x, d);
                }
                Op::AddRow { x, b } => {
                    let db = kernels::column_sums(&g);
                    acc(*x, g);
                    acc(*b, db);
                }
                Op::Bce { logits, targets } => {
                    let up = g.get(0, 0);
                    let n = targets.len();
                    let mut d = Matrix::zeros(n, 1);
                    if n > 0 {
                        let scale = up / T::from_f64(n as f64);
                        let z = &nodes[logits.0].value;
                        for (r, &y) in targets.iter().enumerate() {
                            d.set(r, 0, (sigmoid(z.get(r, 0)) - y) * scale);
                        }
                    }
                    acc(*logits, d);
                }
                Op::WeightedCe { logits, labels, weights } => {
                    let up = g.get(0, 0);
                    let z = &nodes[logits.0].value;
                    let n = labels.len();
                    let mut d = Matrix::zeros(z.rows(), z.cols());
                    if n > 0 {
                        let scale = up / T::from_f64(n as f64);
                        for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                            let row = z.row(r);
                            let lse = kernels::log_sum_exp(row);
                            let out = d.row_mut(r);
                            for (c, (o, &v)) in out.iter_mut().zip(row).enumerate() {
                                let p = (v - lse).exp();
                                let t = if c == y as usize { T::one() } else { T::zero() };
                                *o = w * scale * (p - t);
                            }
                        }
                    }
                    acc(*logits, d);
                }
                Op::DotConst { x, r } => {
                    let mut d = r.clone();
                    d.scale(g.get(0, 0));
                    acc(*x, d);
                }
                Op::LinComb { terms } => {
                    let up = g.get(0, 0);
                    for &(v, c) in terms {
                        acc(v, Matrix::scalar(up * c));
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn reshape_like<T: Scalar>(row: Matrix<T>, like: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(like.rows(), like.cols(), row.into_vec()).expect("same element count")
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tape variable (inputs marked `requires_grad`, params).
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter, summed over every use on the tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix<T>)> {
        let mut out: Vec<(ParamId, Matrix<T>)> = Vec::new();
        for &(id, idx) in &self.params {
            let Some(g) = self.grads[idx].as_ref() else { continue };
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
