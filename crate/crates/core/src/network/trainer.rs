//! One optimization step, inference, and per-dataset evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::loss::{class_balanced_ce, completion_loss, segmentation_targets, total_loss};
use super::model::{GtPyramid, Network};
use super::stats::ClassStats;
use crate::coords::{to_dense, voxelize, Coord, DenseLabel, FusedPoint, GridSpec, OccupancyGrid, SparseTensor};
use crate::error::{bail, Error, Result};
use crate::eval::{completion_counts, CompletionCounts, Confusion};
use crate::fusion::{augment, AugmentConfig};
use crate::matrix::Matrix;
use crate::nn::{adam_step, cosine_anneal, AdamState, Ctx, Mode, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// A voxelized frame with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub input: SparseTensor<T>,
    pub gt: OccupancyGrid,
}

/// Optional augmentation, then voxelization at batch index 0.
pub fn prepare_example<R: Rng + ?Sized>(
    points: Vec<FusedPoint>,
    gt: &OccupancyGrid,
    spec: &GridSpec,
    aug: Option<&AugmentConfig>,
    rng: &mut R,
) -> Result<Example<f32>> {
    let (points, gt) = match aug {
        Some(cfg) => augment(points, gt, spec, cfg, rng),
        None => (points, gt.clone()),
    };
    Ok(Example { input: voxelize(&points, spec, 0)?, gt })
}

/// Stacks single-item tensors, giving item `i` batch index `i`.
pub fn batch_inputs<T: Scalar>(inputs: &[&SparseTensor<T>]) -> Result<SparseTensor<T>> {
    let Some(first) = inputs.first() else {
        bail!(MalformedInput, "empty batch");
    };
    let ch = first.channels();
    let total = inputs.iter().map(|t| t.len()).sum();
    let mut coords = Vec::with_capacity(total);
    let mut data = Vec::with_capacity(total * ch);
    for (b, t) in inputs.iter().enumerate() {
        if t.channels() != ch || t.stride() != 1 {
            bail!(Shape, "batch items must be stride-1 tensors with {ch} channels");
        }
        coords.extend(t.coords.iter().map(|c| Coord { batch: b as u32, ..*c }));
        data.extend_from_slice(t.features.as_slice());
    }
    SparseTensor::from_parts(1, coords, Matrix::from_vec(total, ch, data)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub completion: f64,
    pub segmentation: f64,
}

impl StepLosses {
    pub fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.completion += o.completion;
        self.segmentation += o.segmentation;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { total: self.total * s, completion: self.completion * s, segmentation: self.segmentation * s }
    }
}

/// Records the full forward pass and the three loss terms on `ctx.tape`.
pub fn forward_losses<T: Scalar>(
    net: &Network,
    ctx: &mut Ctx<'_, T>,
    input: &SparseTensor<T>,
    grids: &[&OccupancyGrid],
    stats: Option<&ClassStats>,
    dims: [usize; 3],
) -> Result<(Var, Var, Var)> {
    let cfg = net.config();
    let pyramid = GtPyramid::new(grids, cfg.depth());
    let (x, ext) = net.split_input(ctx, input)?;
    let out = net.completion_forward(ctx, &x, ext, Some(&pyramid), dims)?;
    let seg = net.segmentation_forward(ctx, &out.dense)?;
    let lc = completion_loss(&mut ctx.tape, &out.levels, &pyramid)?;
    let (rows, targets) = segmentation_targets(&out.dense.coords, grids, cfg.seg_ignore_free)?;
    if let Some(&y) = targets.iter().find(|&&y| y as usize >= cfg.num_classes) {
        bail!(Config, "ground-truth label {y} outside the model's {} classes", cfg.num_classes);
    }
    let stats = if cfg.use_cb_loss { stats } else { None };
    if cfg.use_cb_loss && stats.is_none() {
        bail!(Config, "class-balanced loss enabled without class statistics");
    }
    let ls = class_balanced_ce(&mut ctx.tape, seg.feats, rows, targets, stats, cfg.beta)?;
    let total = total_loss(&mut ctx.tape, lc, ls, cfg.lambda)?;
    Ok((total, lc, ls))
}

fn non_finite<T: Scalar>(tape: &Tape<T>) -> Error {
    match tape.first_non_finite() {
        Some((node, op)) => Error::Numerical(format!("non-finite value first produced by {op} (tape node {node})")),
        None => Error::Numerical("non-finite loss".into()),
    }
}

/// Parameters, optimizer state and schedule of a training run.
pub struct Trainer {
    pub net: Network,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub stats: Option<ClassStats>,
    pub lr0: f64,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(net: Network, store: ParamStore<f32>, stats: Option<ClassStats>, lr0: f64, total_steps: u64) -> Self {
        Self { net, store, adam: AdamState::new(), stats, lr0, total_steps }
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        cosine_anneal(self.lr0, self.adam.step, self.total_steps)
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &[&Example<f32>], dims: [usize; 3]) -> Result<StepLosses> {
        let input = batch_inputs(&batch.iter().map(|e| &e.input).collect::<Vec<_>>())?;
        let grids: Vec<&OccupancyGrid> = batch.iter().map(|e| &e.gt).collect();
        let lr = self.lr();
        let mut ctx = Ctx::new(&mut self.store, Mode::Train);
        let (total, lc, ls) = forward_losses(&self.net, &mut ctx, &input, &grids, self.stats.as_ref(), dims)?;
        let value = |v: Var| ctx.tape.value(v).get(0, 0).as_f64();
        let losses = StepLosses { total: value(total), completion: value(lc), segmentation: value(ls) };
        if !losses.total.is_finite() {
            return Err(non_finite(&ctx.tape));
        }
        let grads = ctx.tape.backward(total)?.param_grads();
        drop(ctx);
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient for {}", self.store.name(*id))));
        }
        adam_step(&mut self.store, &grads, &mut self.adam, lr)?;
        Ok(losses)
    }
}

/// Class logits on the predicted stride-1 voxels plus the densified grids.
pub struct Prediction<T> {
    pub logits: SparseTensor<T>,
    pub grids: Vec<OccupancyGrid>,
}

/// Completion followed by segmentation in inference mode.
pub fn infer_sparse<T: Scalar>(net: &Network, store: &mut ParamStore<T>, input: &SparseTensor<T>, dims: [usize; 3]) -> Result<SparseTensor<T>> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let (x, ext) = net.split_input(&mut ctx, input)?;
    let out = net.completion_forward(&mut ctx, &x, ext, None, dims)?;
    let seg = net.segmentation_forward(&mut ctx, &out.dense)?;
    let t = seg.to_tensor(&ctx.tape);
    if !t.features.is_finite() {
        return Err(non_finite(&ctx.tape));
    }
    Ok(t)
}

/// Argmax labels on a dense grid per batch item.
pub fn densify<T: Scalar>(logits: &SparseTensor<T>, spec: &GridSpec, batches: usize) -> Result<Vec<OccupancyGrid>> {
    (0..batches as u32).map(|b| to_dense(logits, spec, DenseLabel::Argmax, b)).collect()
}

pub fn predict<T: Scalar>(net: &Network, store: &mut ParamStore<T>, input: &SparseTensor<T>, spec: &GridSpec) -> Result<Prediction<T>> {
    let logits = infer_sparse(net, store, input, spec.dims)?;
    let batches = input.coords.batch_count().max(1);
    let grids = densify(&logits, spec, batches)?;
    Ok(Prediction { logits, grids })
}

/// Accumulated completion counts and confusion over `examples`, one frame
/// at a time.
pub fn evaluate<'a, T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    examples: impl IntoIterator<Item = (&'a SparseTensor<T>, &'a OccupancyGrid)>,
    spec: &GridSpec,
) -> Result<(CompletionCounts, Confusion)> {
    let mut counts = CompletionCounts::default();
    let mut conf = Confusion::new(crate::coords::labels::NUM_CLASSES);
    for (input, gt) in examples {
        let p = predict(net, store, input, spec)?;
        counts.merge(&completion_counts(&p.grids[0], gt)?);
        conf.accumulate(&p.grids[0], gt)?;
    }
    Ok((counts, conf))
}

/// Patience-based stopping on a score that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: None, since: 0 }
    }

    /// Records an epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.patience > 0 && self.since >= self.patience)
        }
    }
}
