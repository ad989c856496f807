//! Evaluation of prediction directories and JSON / text reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use socc_core::coords::labels;
use socc_core::eval::{completion_counts, CompletionCounts, CompletionReport, Confusion, SegmentationReport, DEFAULT_EXCLUDE};

use crate::bench::{BenchReport, Stats};
use crate::error::{Error, Result};
use crate::formats::read_sogt;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub completion: CompletionReport,
    pub counts: CompletionCounts,
    pub segmentation: SegmentationReport,
}

fn sogt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "sogt") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Matches `*.sogt` files by name; `gt_dir` may be a dataset root, in
/// which case its `frames/` directory is used.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let gt_dir = if gt_dir.join("frames").is_dir() { gt_dir.join("frames") } else { gt_dir.to_path_buf() };
    let preds = sogt_files(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::data(format!("no .sogt predictions in {}", pred_dir.display())));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for p in &preds {
        let g = gt_dir.join(p.file_name().expect("listed file"));
        if !g.exists() {
            return Err(Error::data(format!("no ground truth for {}", p.display())));
        }
        pairs.push((p.clone(), g));
    }
    let mut counts = CompletionCounts::default();
    let mut conf = Confusion::new(labels::NUM_CLASSES);
    for (p, g) in &pairs {
        let (pred, gt) = (read_sogt(p)?, read_sogt(g)?);
        counts.merge(&completion_counts(&pred, &gt)?);
        conf.accumulate(&pred, &gt)?;
    }
    Ok(EvalReport { frames: pairs.len(), completion: counts.report(), counts, segmentation: conf.report(&DEFAULT_EXCLUDE) })
}

pub fn eval_json(r: &EvalReport) -> Value {
    let per_class: serde_json::Map<String, Value> = labels::NAMES
        .iter()
        .zip(&r.segmentation.per_class)
        .map(|(n, v)| (n.to_string(), v.map_or(Value::Null, Value::from)))
        .collect();
    json!({
        "frames": r.frames,
        "completion": {
            "iou": r.completion.iou,
            "precision": r.completion.precision,
            "recall": r.completion.recall,
            "f1": r.completion.f1,
            "true_positive": r.counts.tp,
            "predicted": r.counts.pred,
            "ground_truth": r.counts.gt,
        },
        "segmentation": {
            "miou": r.segmentation.miou,
            "per_class_iou": per_class,
            "evaluated_voxels": r.segmentation.confusion.total(),
        },
    })
}

pub fn eval_text(r: &EvalReport) -> String {
    let c = &r.completion;
    let mut s = String::new();
    writeln!(s, "Scene completion ({} frames)", r.frames).unwrap();
    writeln!(s, "{:>10} {:>10} {:>10} {:>10}", "IoU", "Precision", "Recall", "F1").unwrap();
    writeln!(s, "{:>10.4} {:>10.4} {:>10.4} {:>10.4}", c.iou, c.precision, c.recall, c.f1).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "Semantic segmentation").unwrap();
    writeln!(s, "{:<12} {:>8}", "class", "IoU").unwrap();
    for (k, name) in labels::NAMES.iter().enumerate() {
        let v = r.segmentation.per_class[k].map_or("-".to_string(), |x| format!("{x:.4}"));
        let note = if DEFAULT_EXCLUDE.contains(&(k as u8)) { "  (not in mean)" } else { "" };
        writeln!(s, "{name:<12} {v:>8}{note}").unwrap();
    }
    writeln!(s, "{:<12} {:>8.4}", "mIoU", r.segmentation.miou).unwrap();
    s
}

pub fn bench_json(r: &BenchReport) -> Value {
    serde_json::to_value(r).expect("plain struct")
}

pub fn bench_text(r: &BenchReport) -> String {
    let mut s = String::new();
    writeln!(s, "Inference latency: {} frames x {} repeats ({} warmup)", r.frames, r.repeats, r.warmup).unwrap();
    writeln!(s, "{:<14} {:>10} {:>10} {:>10}", "stage (ms)", "mean", "p50", "p95").unwrap();
    let row = |s: &mut String, name: &str, st: &Stats| {
        writeln!(s, "{name:<14} {:>10.2} {:>10.2} {:>10.2}", st.mean * 1e3, st.p50 * 1e3, st.p95 * 1e3).unwrap();
    };
    row(&mut s, "fusion", &r.stages.fusion);
    row(&mut s, "completion", &r.stages.completion);
    row(&mut s, "segmentation", &r.stages.segmentation);
    row(&mut s, "densify", &r.stages.densify);
    row(&mut s, "total", &r.stages.total);
    writeln!(s).unwrap();
    writeln!(s, "{:<14} {:>10.2}  (p95/p50 {:.3})", "FPS (p50)", r.fps_p50, r.p95_over_p50).unwrap();
    for t in r.target_fps {
        writeln!(s, "{:<14} {:>10.0}  {}", "target FPS", t, if r.meets(t) { "met" } else { "not met" }).unwrap();
    }
    writeln!(s, "{:<14} {:>10.0}", "input voxels", r.input_voxels_mean).unwrap();
    writeln!(s, "{:<14} {:>10.0}", "output voxels", r.output_voxels_mean).unwrap();
    if let (Some(b), Some(src)) = (r.peak_memory_bytes, r.memory_source) {
        writeln!(s, "{:<14} {:>10.1}  MiB ({:?}, estimate)", "peak memory", b as f64 / (1024.0 * 1024.0), src).unwrap();
    }
    s
}
