//! Model files and stage-timed inference on single frames.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use socc_core::coords::{to_dense, DenseLabel};
use socc_core::network::Network;
use socc_core::nn::{checkpoint, Ctx, Mode, ParamStore};
use socc_core::OccupancyGrid;

use crate::config::{DatasetConfig, KeyValues, RunConfig};
use crate::dataset::Frame;
use crate::error::{Result, WithPath};
use crate::formats::{read_bytes, write_bytes};

/// Name of the effective configuration written next to checkpoints.
pub const CONFIG_FILE: &str = "config.txt";

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_bytes(path, &checkpoint::encode(&store.to_named())?)
}

/// Rebuilds the network from `config` and loads weights from `ckpt`.
pub fn load_model(ckpt: &Path, config: &RunConfig) -> Result<(Network, ParamStore<f32>)> {
    let (net, mut store) = Network::new::<f32, _>(&config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tensors = checkpoint::decode(&read_bytes(ckpt)?).at(ckpt)?;
    store.load_named(&tensors).at(ckpt)?;
    Ok((net, store))
}

/// Explicit config file, else the one saved beside the checkpoint.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let mut kv = KeyValues::read_run_config(&path)?;
    for o in overrides {
        kv.set_pair(o)?;
    }
    RunConfig::from_kv(&kv)
}

/// Wall-clock seconds per inference stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct StageTimes {
    /// Projection, color sampling and voxelization.
    pub fusion: f64,
    pub completion: f64,
    pub segmentation: f64,
    /// Argmax onto the dense grid.
    pub densify: f64,
    pub total: f64,
}

pub struct Inference {
    pub grid: OccupancyGrid,
    pub times: StageTimes,
    pub input_voxels: usize,
    pub output_voxels: usize,
}

/// Runs fusion, completion, segmentation and densification on one frame.
pub fn infer_frame(net: &Network, store: &mut ParamStore<f32>, frame: &Frame, data: &DatasetConfig) -> Result<Inference> {
    let cfg = net.config();
    let start = Instant::now();
    let input = frame.input(data, cfg.ext_channels > 0)?;
    let t_fusion = start.elapsed().as_secs_f64();

    let mut ctx = Ctx::new(store, Mode::Eval);
    let t0 = Instant::now();
    let (x, ext) = net.split_input(&mut ctx, &input)?;
    let out = net.completion_forward(&mut ctx, &x, ext, None, data.grid.dims)?;
    let t_completion = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let seg = net.segmentation_forward(&mut ctx, &out.dense)?;
    let t_segmentation = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let logits = seg.to_tensor(&ctx.tape);
    if !logits.features.is_finite() {
        return Err(socc_core::Error::Numerical("non-finite class logits".into()).into());
    }
    let grid = to_dense(&logits, &data.grid, DenseLabel::Argmax, 0)?;
    let t_densify = t0.elapsed().as_secs_f64();
    let times = StageTimes {
        fusion: t_fusion,
        completion: t_completion,
        segmentation: t_segmentation,
        densify: t_densify,
        total: start.elapsed().as_secs_f64(),
    };
    Ok(Inference { grid, times, input_voxels: input.len(), output_voxels: logits.len() })
}
