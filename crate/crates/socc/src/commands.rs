//! Subcommand bodies. Each validates its inputs before writing anything.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use socc_core::network::{gradcheck, Network};
use socc_core::nn::gradcheck::format_report;

use crate::bench::{bench, BenchReport};
use crate::config::{DatasetConfig, RunConfig};
use crate::dataset::{Dataset, Frame, FrameSource};
use crate::error::{Error, Result};
use crate::formats::{encode_sogt, write_bytes};
use crate::pipeline::{config_for_checkpoint, infer_frame, load_model, StageTimes};
use crate::report::{eval_dirs, EvalReport};
use crate::synth::{generate_scene, SceneSpec};
use crate::train::{train, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
    Dense,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "dense" => Ok(Preset::Dense),
            _ => Err(format!("unknown preset {s:?} (desk, full, dense)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub frames: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Trailing frames tagged `val`.
    pub val_frames: usize,
    pub feature_scale: Option<u32>,
}

/// Scene seed of frame `i`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn scene_spec(preset: Preset, seed: u64) -> SceneSpec {
    match preset {
        Preset::Desk => SceneSpec::desk(seed),
        Preset::Full => SceneSpec::full(seed),
        Preset::Dense => SceneSpec::dense(seed),
    }
}

/// Generates frames in memory, then writes the dataset.
pub fn synth(a: &SynthArgs) -> Result<DatasetConfig> {
    if a.val_frames > a.frames {
        return Err(Error::config(format!("{} validation frames out of {}", a.val_frames, a.frames)));
    }
    if a.feature_scale == Some(0) {
        return Err(Error::config("feature scale must be positive"));
    }
    if a.out.join("index.txt").exists() {
        return Err(Error::config(format!("{} already holds a dataset", a.out.display())));
    }
    let template = scene_spec(a.preset, a.seed);
    let config = DatasetConfig { grid: template.grid, intensity_max: template.lidar.intensity_max };
    let frames: Vec<(Frame, String)> = (0..a.frames)
        .into_par_iter()
        .map(|i| {
            let mut spec = scene_spec(a.preset, scene_seed(a.seed, i));
            spec.feature_scale = a.feature_scale;
            let split = if i + a.val_frames >= a.frames { "val" } else { "train" };
            Ok((Frame::from_synth(&format!("{i:06}"), generate_scene(&spec)?), split.to_string()))
        })
        .collect::<Result<_>>()?;
    Dataset::write(&a.out, &config, &frames)?;
    Ok(config)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = Dataset::open(&cfg.data_root)?;
    train(&ds, cfg)
}

#[derive(Clone, Debug)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub data: PathBuf,
    /// All frames when empty.
    pub frames: Vec<String>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct InferRecord {
    pub id: String,
    pub output: PathBuf,
    pub input_voxels: usize,
    pub output_voxels: usize,
    pub occupied: usize,
    pub times: StageTimes,
}

/// Writes `<out>/<id>.sogt` per frame.
pub fn infer(a: &InferArgs) -> Result<Vec<InferRecord>> {
    let cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref(), &a.overrides)?;
    let (net, mut store) = load_model(&a.checkpoint, &cfg)?;
    let ds = Dataset::open(&a.data)?;
    let picks: Vec<usize> = if a.frames.is_empty() {
        (0..ds.len()).collect()
    } else {
        a.frames
            .iter()
            .map(|id| ds.records.iter().position(|r| &r.id == id).ok_or_else(|| Error::data(format!("no frame {id:?} in {}", a.data.display()))))
            .collect::<Result<_>>()?
    };
    let mut results = Vec::new();
    for i in picks {
        let frame = ds.load(i)?;
        let r = infer_frame(&net, &mut store, &frame, &ds.config)?;
        results.push((frame.id.clone(), r));
    }
    let mut out = Vec::new();
    for (id, r) in results {
        let path = a.out.join(format!("{id}.sogt"));
        write_bytes(&path, &encode_sogt(&r.grid))?;
        out.push(InferRecord {
            id,
            output: path,
            input_voxels: r.input_voxels,
            output_voxels: r.output_voxels,
            occupied: r.grid.occupied_count(),
            times: r.times,
        });
    }
    Ok(out)
}

pub fn eval(pred: &Path, gt: &Path) -> Result<EvalReport> {
    eval_dirs(pred, gt)
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    /// Randomly initialized weights when absent.
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub data: PathBuf,
    pub max_frames: Option<usize>,
    pub warmup: usize,
    pub repeats: usize,
}

pub fn bench_cmd(a: &BenchArgs) -> Result<BenchReport> {
    let (net, mut store) = match &a.checkpoint {
        Some(ckpt) => {
            let cfg = config_for_checkpoint(ckpt, a.config.as_deref(), &a.overrides)?;
            load_model(ckpt, &cfg)?
        }
        None => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            Network::new::<f32, _>(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
        }
    };
    let ds = Dataset::open(&a.data)?;
    let n = a.max_frames.unwrap_or(ds.len()).min(ds.len());
    let frames: Vec<Frame> = (0..n).map(|i| ds.load(i)).collect::<Result<_>>()?;
    bench(&net, &mut store, &frames, &ds.config, a.warmup, a.repeats)
}

/// Full operator suite plus the composite network; fails on any mismatch.
pub fn gradcheck_cmd(seed: u64, instances: usize, probes: usize) -> Result<String> {
    let reports = gradcheck::full_suite(seed, instances, probes)?;
    let text = reports.iter().map(format_report).collect::<Vec<_>>().join("\n");
    if reports.iter().all(|r| r.passed) {
        Ok(text)
    } else {
        Err(Error::GradCheck(text))
    }
}
