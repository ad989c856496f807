//! Single-stream inference latency and memory.

use socc_core::network::Network;
use socc_core::nn::ParamStore;

use crate::config::DatasetConfig;
use crate::dataset::Frame;
use crate::error::Result;
use crate::memory::{self, MemorySource};
use crate::pipeline::{infer_frame, StageTimes};

pub const TARGET_FPS: [f64; 2] = [20.0, 30.0];

/// Summary of a sample; all zero when empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(samples: &[f64]) -> Stats {
    if samples.is_empty() {
        return Stats::default();
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Stats {
        count: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        p50: percentile(&s, 50.0),
        p95: percentile(&s, 95.0),
        min: s[0],
        max: s[s.len() - 1],
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct StageStats {
    pub fusion: Stats,
    pub completion: Stats,
    pub segmentation: Stats,
    pub densify: Stats,
    pub total: Stats,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Seconds per frame.
    pub stages: StageStats,
    pub fps_mean: f64,
    pub fps_p50: f64,
    pub target_fps: [f64; 2],
    /// Ratio of the 95th to the 50th percentile total latency.
    pub p95_over_p50: f64,
    pub input_voxels_mean: f64,
    pub output_voxels_mean: f64,
    pub occupied_voxels_mean: f64,
    pub peak_memory_bytes: Option<u64>,
    pub memory_source: Option<MemorySource>,
}

impl BenchReport {
    pub fn meets(&self, fps: f64) -> bool {
        self.fps_p50 >= fps
    }
}

/// Times `repeats` passes over `frames` after `warmup` untimed passes.
/// Data loading is excluded; fusion is timed as the first stage.
pub fn bench(net: &Network, store: &mut ParamStore<f32>, frames: &[Frame], data: &DatasetConfig, warmup: usize, repeats: usize) -> Result<BenchReport> {
    let mut report = BenchReport { frames: frames.len(), warmup, repeats, target_fps: TARGET_FPS, ..Default::default() };
    if repeats == 0 || frames.is_empty() {
        return Ok(report);
    }
    for _ in 0..warmup {
        for f in frames {
            infer_frame(net, store, f, data)?;
        }
    }
    memory::reset_peak();
    let mut times: Vec<StageTimes> = Vec::with_capacity(frames.len() * repeats);
    let (mut inputs, mut outputs, mut occupied) = (0usize, 0usize, 0usize);
    for _ in 0..repeats {
        for f in frames {
            let r = infer_frame(net, store, f, data)?;
            times.push(r.times);
            inputs += r.input_voxels;
            outputs += r.output_voxels;
            occupied += r.grid.occupied_count();
        }
    }
    let col = |f: fn(&StageTimes) -> f64| summarize(&times.iter().map(f).collect::<Vec<_>>());
    report.stages = StageStats {
        fusion: col(|t| t.fusion),
        completion: col(|t| t.completion),
        segmentation: col(|t| t.segmentation),
        densify: col(|t| t.densify),
        total: col(|t| t.total),
    };
    let n = times.len() as f64;
    let total = &report.stages.total;
    report.fps_mean = if total.mean > 0.0 { 1.0 / total.mean } else { f64::INFINITY };
    report.fps_p50 = if total.p50 > 0.0 { 1.0 / total.p50 } else { f64::INFINITY };
    report.p95_over_p50 = if total.p50 > 0.0 { total.p95 / total.p50 } else { 1.0 };
    report.input_voxels_mean = inputs as f64 / n;
    report.output_voxels_mean = outputs as f64 / n;
    report.occupied_voxels_mean = occupied as f64 / n;
    if let Some((bytes, src)) = memory::peak() {
        report.peak_memory_bytes = Some(bytes);
        report.memory_source = Some(src);
    }
    Ok(report)
}
