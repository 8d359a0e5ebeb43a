//! `bevfuse`: generate synthetic data, train, evaluate, score and ablate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevfuse_core::checkpoint::Checkpoint;
use bevfuse_core::config::{RunConfig, KEYS};
use bevfuse_core::dataset_io::{encode_png, read_dataset, write_dataset};
use bevfuse_core::metrics::{
    evaluate, predictions_json, read_ground_truth, read_predictions, write_json, EvalConfig, MetricsReport, Subset,
};
use bevfuse_core::synth::{generate_dataset, Split};
use bevfuse_core::train::{ablation_suite, predict_scene, predict_split, Trainer};
use bevfuse_core::viz::render_bev;
use bevfuse_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bevfuse", version, about = "Camera-radar BEV fusion detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        /// Overrides the config's seed for scene generation.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the train split and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the val split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "all")]
        subset: Subset,
        #[arg(long)]
        report: PathBuf,
        /// Also write the predictions in the metrics file schema.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score prediction and ground-truth files, or combine given summary metrics.
    Nds {
        #[arg(long, required_unless_present = "summary", requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        subset: Subset,
        /// `mAP,mATE,mASE,mAOE,mAVE,mAAE`: skip matching and only combine.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["pred", "gt"])]
        summary: Option<Vec<f64>>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate the four radar/multi-task combinations (plus the
    /// config's `k_sweep` capacities) over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Draw one val or train frame from above: ground truth, predictions, radar.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every configuration key.
    Keys,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out, scenes, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            let ds = generate_dataset(&cfg.scene, &cfg.rig(), &cfg.grid, scenes)?;
            write_dataset(&ds, &out)?;
            let val = ds.split(Split::Val).count();
            println!("wrote {} scenes ({} train, {val} val) to {}", scenes, scenes - val, out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = read_dataset(&data)?;
            let mut trainer = Trainer::new(cfg.train.clone(), ds.rig.clone(), ds.grid)?;
            trainer.fit(&ds)?;
            Checkpoint::from_trainer(&trainer).save(&out)?;
            if let (Some(a), Some(b)) = (trainer.history.first(), trainer.history.last()) {
                println!("{} steps, l_joint {:.4} -> {:.4}", trainer.step, a.l_joint, b.l_joint);
            }
        }
        Command::Eval { data, ckpt, subset, report, predictions } => {
            let ds = read_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let (preds, gts) = predict_split(&model, &ds, Split::Val, ck.train_config.toggles())?;
            if let Some(p) = predictions {
                write_json(&p, &predictions_json(&preds))?;
            }
            let r = evaluate(&preds, &gts, &EvalConfig::default(), subset)?;
            write_report(&r, &report)?;
            println!("{}: {} frames, NDS {:.4}, mAP {:.4}", subset.name(), r.num_frames, r.nds, r.map);
        }
        Command::Nds { pred, gt, subset, summary, report } => {
            let r = match (summary, pred, gt) {
                (Some(v), _, _) => {
                    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                        return Err(Error::Data("summary metrics must be finite and non-negative".into()));
                    }
                    MetricsReport::from_summary(v[0], [v[1], v[2], v[3], v[4], v[5]])
                }
                (None, Some(p), Some(g)) => evaluate(&read_predictions(&p)?, &read_ground_truth(&g)?, &EvalConfig::default(), subset)?,
                _ => unreachable!("clap enforces --pred with --gt or --summary"),
            };
            write_report(&r, &report)?;
            println!("NDS {:.4}", r.nds);
        }
        Command::Ablate { data, config, seeds, report } => {
            let cfg = load_config(config.as_deref())?;
            let ds = read_dataset(&data)?;
            let r = ablation_suite(&cfg.train, &ds, &seeds, &cfg.k_sweep)?;
            write_report(&r, &report)?;
            for row in &r.ablation {
                let s = |k: &str| row.scores.get(k).map_or(f64::NAN, |s| s.nds);
                println!(
                    "{:<8} rb={:<5} mtl={:<5} K={:<3} NDS all {:.4} rain {:.4} night {:.4}",
                    row.table, row.with_rb, row.with_mtl, row.capacity, s("all"), s("rain"), s("night")
                );
            }
        }
        Command::Viz { data, ckpt, frame, out } => {
            let ds = read_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let scene = ds
                .scenes
                .iter()
                .find(|s| s.frames.iter().any(|f| f.frame_id == frame))
                .ok_or_else(|| Error::Data(format!("no frame {frame:?} in {}", data.display())))?;
            let preds = predict_scene(&model, scene, ck.train_config.toggles())?;
            let k = scene.frames.iter().position(|f| f.frame_id == frame).expect("frame present");
            let img = render_bev(&scene.frames[k], &preds[k].detections, &ds.rig, &ds.grid);
            std::fs::write(&out, encode_png(&img)).map_err(|e| Error::io(&out, e))?;
        }
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<18} {doc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Command::Nds { summary: Some(v), .. } = &cli.command {
        if v.len() != 6 {
            eprintln!("error: --summary takes 6 comma-separated values (mAP,mATE,mASE,mAOE,mAVE,mAAE), got {}", v.len());
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
