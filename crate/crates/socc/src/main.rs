use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use socc::commands::{self, BenchArgs, InferArgs, Preset, SynthArgs};
use socc::config::RunConfig;
use socc::memory::CountingAlloc;
use socc::report::{bench_json, bench_text, eval_json, eval_text};
use socc::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "socc", version, about = "Sparse semantic occupancy: synthesize, train, infer, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        preset: Preset,
        /// Number of trailing frames tagged as validation.
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// Also write a feature map at this image downscale.
        #[arg(long)]
        features: Option<u32>,
    },
    /// Train on a dataset; writes checkpoints, the metric log and the effective config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `section.key=value`, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict label grids for dataset frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config saved beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Frame id; repeat for several, omit for all.
        #[arg(long = "frame")]
        frames: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted grids with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time inference per stage.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of every operator and the composite network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 30)]
        probes: usize,
    },
}

fn write_json(path: &Option<PathBuf>, v: &serde_json::Value) -> Result<(), Error> {
    if let Some(p) = path {
        socc::formats::write_bytes(p, serde_json::to_string_pretty(v).expect("json").as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth { out, frames, seed, preset, val, features } => {
            commands::synth(&SynthArgs { out: out.clone(), frames, seed, preset, val_frames: val, feature_scale: features })?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Cmd::Train { config, mut set, data, out, epochs, seed } => {
            let flags = [("data.root", data.map(|p| p.display().to_string())), ("output.dir", out.map(|p| p.display().to_string())), ("train.epochs", epochs.map(|e| e.to_string())), ("train.seed", seed.map(|s| s.to_string()))];
            set.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))));
            let cfg = RunConfig::load(config.as_deref(), &set)?;
            let o = commands::train_cmd(&cfg)?;
            let last = o.log.last();
            println!(
                "trained {} epochs; best val IoU {:.4} at epoch {:?}; last mIoU {:.4}; outputs in {}",
                o.log.len(),
                o.best_iou,
                o.best_epoch,
                last.map_or(0.0, |l| l.val_miou),
                o.out_dir.display()
            );
        }
        Cmd::Infer { checkpoint, config, set, data, frames, out } => {
            let recs = commands::infer(&InferArgs { checkpoint, config, overrides: set, data, frames, out })?;
            for r in recs {
                println!("{}", serde_json::to_string(&r).expect("json"));
            }
        }
        Cmd::Eval { pred, gt, json } => {
            let r = commands::eval(&pred, &gt)?;
            write_json(&json, &eval_json(&r))?;
            print!("{}", eval_text(&r));
        }
        Cmd::Bench { checkpoint, config, set, data, frames, warmup, repeats, json } => {
            let r = commands::bench_cmd(&BenchArgs { checkpoint, config, overrides: set, data, max_frames: frames, warmup, repeats })?;
            write_json(&json, &bench_json(&r))?;
            print!("{}", bench_text(&r));
        }
        Cmd::Gradcheck { seed, instances, probes } => {
            let text = commands::gradcheck_cmd(seed, instances, probes)?;
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let threads = std::env::var("SOCC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Error::GradCheck(text) = &e {
                println!("{text}");
                eprintln!("error: gradient check failed");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
