//! Epoch loop: augmentation, batched Adam steps, validation, metric log
//! and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use socc_core::coords::{voxelize, FusedPoint};
use socc_core::eval::DEFAULT_EXCLUDE;
use socc_core::fusion::augment;
use socc_core::network::{evaluate, ClassStats, EarlyStopping, Example, Network, StepLosses, Trainer};
use socc_core::{GridSpec, OccupancyGrid, SparseTensor};

use crate::config::RunConfig;
use crate::dataset::FrameSource;
use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::pipeline::{save_checkpoint, CONFIG_FILE};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.socc";
pub const LAST_CHECKPOINT: &str = "last.socc";

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_completion: f64,
    pub loss_segmentation: f64,
    pub lr: f64,
    pub val_iou: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_iou: f64,
    pub stopped_early: bool,
    pub out_dir: PathBuf,
}

/// Frames held in memory as fused points.
struct Prepared {
    points: Vec<FusedPoint>,
    gt: OccupancyGrid,
    input: SparseTensor<f32>,
}

fn to_tensor(points: &[FusedPoint], grid: &GridSpec, width: usize) -> Result<SparseTensor<f32>> {
    if points.is_empty() {
        return Ok(SparseTensor::empty(1, width));
    }
    Ok(voxelize(points, grid, 0)?)
}

/// Seed of the augmentation stream for one frame in one epoch.
fn frame_seed(seed: u64, epoch: usize, frame: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (frame as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Resolves the model input width against the dataset and checks splits,
/// before anything is written.
pub fn plan<S: FrameSource>(ds: &S, cfg: &RunConfig) -> Result<(RunConfig, Vec<usize>, Vec<usize>)> {
    let mut cfg = cfg.clone();
    let train = ds.split("train");
    if train.is_empty() {
        return Err(Error::config("dataset has no frames in the train split"));
    }
    let ext = if cfg.model.use_external_features {
        let first = ds.load(train[0])?;
        let e: usize = first.feature_maps.iter().map(|m| m.channels as usize).sum();
        if e == 0 {
            return Err(Error::config("external features enabled but the dataset has no feature maps"));
        }
        e
    } else {
        0
    };
    cfg.model.ext_channels = ext;
    cfg.validate()?;
    let mut eval = ds.split(&cfg.eval_split);
    if eval.is_empty() {
        log::info!("split {:?} is empty; validating on the training frames", cfg.eval_split);
        eval = train.clone();
    }
    Ok((cfg, train, eval))
}

pub fn train<S: FrameSource + Sync>(ds: &S, cfg: &RunConfig) -> Result<TrainOutcome> {
    let (cfg, train_idx, eval_idx) = plan(ds, cfg)?;
    let grid = ds.config().grid;
    let with_maps = cfg.model.ext_channels > 0;
    let width = cfg.model.input_channels();
    let intensity_max = ds.config().intensity_max;

    let load = |i: usize| -> Result<Prepared> {
        let f = ds.load(i)?;
        let gt = f.gt.clone().ok_or_else(|| Error::data(format!("frame {} has no ground truth", f.id)))?;
        let points = f.fused(intensity_max, with_maps)?;
        let input = to_tensor(&points, &grid, width)?;
        if input.channels() != width {
            return Err(Error::data(format!("frame {} gives {} input channels, expected {width}", f.id, input.channels())));
        }
        Ok(Prepared { points, gt, input })
    };
    let train_frames: Vec<Prepared> = train_idx.par_iter().map(|&i| load(i)).collect::<Result<_>>()?;
    let eval_frames: Vec<Prepared> = eval_idx.par_iter().map(|&i| load(i)).collect::<Result<_>>()?;
    let stats = ClassStats::from_grids(train_frames.iter().map(|f| &f.gt), cfg.model.num_classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (net, store) = Network::new::<f32, _>(&cfg.model, &mut rng)?;
    let steps_per_epoch = train_frames.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(net, store, cfg.model.use_cb_loss.then_some(stats), cfg.lr, (cfg.epochs * steps_per_epoch) as u64);

    // Inputs are valid; start writing.
    let out = cfg.output_dir.clone();
    write_bytes(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_frames.len()).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = trainer.lr();
        order.shuffle(&mut rng);
        let examples: Vec<Example<f32>> = order
            .par_iter()
            .map(|&i| {
                let f = &train_frames[i];
                if !cfg.augment {
                    return Ok(Example { input: f.input.clone(), gt: f.gt.clone() });
                }
                let mut r = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, epoch, i));
                let (pts, gt) = augment(f.points.clone(), &f.gt, &grid, &cfg.aug, &mut r);
                Ok(Example { input: to_tensor(&pts, &grid, width)?, gt })
            })
            .collect::<Result<_>>()?;

        let mut sum = StepLosses::default();
        for batch in examples.chunks(cfg.batch_size) {
            let refs: Vec<&Example<f32>> = batch.iter().collect();
            let l = trainer.step(&refs, grid.dims)?;
            sum.add(&l.scaled(batch.len() as f64));
        }
        let mean = sum.scaled(1.0 / examples.len() as f64);

        let (counts, conf) = evaluate(&trainer.net, &mut trainer.store, eval_frames.iter().map(|f| (&f.input, &f.gt)), &grid)?;
        let entry = EpochLog {
            epoch,
            loss_total: mean.total,
            loss_completion: mean.completion,
            loss_segmentation: mean.segmentation,
            lr,
            val_iou: counts.report().iou,
            val_miou: conf.report(&DEFAULT_EXCLUDE).miou,
        };
        let line = serde_json::to_string(&entry).expect("plain struct");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {epoch}: loss {:.4} (c {:.4}, s {:.4}) iou {:.4} miou {:.4} [{:.1}s]",
            entry.loss_total,
            entry.loss_completion,
            entry.loss_segmentation,
            entry.val_iou,
            entry.val_miou,
            t0.elapsed().as_secs_f64()
        );
        save_checkpoint(&out.join(LAST_CHECKPOINT), &trainer.store)?;
        let (improved, stop) = stopper.observe(epoch, entry.val_iou);
        if improved {
            save_checkpoint(&out.join(BEST_CHECKPOINT), &trainer.store)?;
        }
        log.push(entry);
        if stop {
            log::info!("no validation improvement for {} epochs; stopping", cfg.patience);
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { log, best_epoch: stopper.best_epoch, best_iou: stopper.best, stopped_early, out_dir: out })
}

/// Reads a metric log back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}
