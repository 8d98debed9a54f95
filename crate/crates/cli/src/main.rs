use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wsod_core::data::{
    extract_labels, generate_synthetic, load_dataset, load_vocabulary, save_dataset,
    save_vocabulary, ClassVocabulary, ImageRecord,
};
use wsod_core::evald::{evaluate, format_table, load_detections, save_detections};
use wsod_core::fusion::FusionMode;
use wsod_core::numkit::checkpoint;
use wsod_core::pipeline::{
    infer, model_from_checkpoint, run_ablation, train, RunConfig, SEED_ENV,
};
use wsod_core::priors::{estimate_priors, PriorStats};
use wsod_core::{Error, Result};

/// Weakly-supervised detection with depth priors.
#[derive(Parser)]
#[command(name = "wsod", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// JSON Lines dataset.
    #[arg(long)]
    data: PathBuf,
    /// Class vocabulary (JSON array of entries).
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset and its vocabulary.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Replace image labels with labels read off the captions.
    ExtractLabels {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate depth priors from scored detections.
    EstimatePriors {
        #[command(flatten)]
        data: DataArgs,
        /// Detections (JSON Lines) written by `infer`.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json and report.json.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score every proposal of a dataset with a checkpoint.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["rgb", "fused", "depth"])]
        inference_mode: Option<String>,
        #[arg(long)]
        min_score: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP and CorLoc of a detections file against annotated records.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        detections: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the baseline and the five component configurations.
    Ablation {
        #[command(flatten)]
        data: DataArgs,
        /// Estimated from the baseline's detections when omitted.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.into(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn load(args: &DataArgs) -> Result<(Vec<ImageRecord>, ClassVocabulary)> {
    let vocab = load_vocabulary(&args.vocab)?;
    let records = load_dataset(&args.data, &vocab)?;
    Ok((records, vocab))
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let text = cli.config.as_deref().map(read_text).transpose()?;
    let seed = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(text.as_deref(), &cli.sets, seed.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::GenData { out_dir } => {
            let ds = generate_synthetic(&cfg.synthetic, cfg.seed)?;
            std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
                path: out_dir.clone(),
                source,
            })?;
            save_dataset(&out_dir.join("dataset.jsonl"), &ds.records)?;
            save_vocabulary(&out_dir.join("vocab.json"), &ds.vocab)?;
            println!(
                "wrote {} images, {} classes to {}",
                ds.records.len(),
                ds.vocab.len(),
                out_dir.display()
            );
        }
        Command::ExtractLabels { data, out } => {
            let (mut records, vocab) = load(data)?;
            let mut missing = 0;
            for r in &mut records {
                match &r.caption {
                    Some(c) => r.labels = Some(extract_labels(c, &vocab)),
                    None => missing += 1,
                }
            }
            save_dataset(out, &records)?;
            println!("labeled {} images ({missing} without caption)", records.len() - missing);
        }
        Command::EstimatePriors {
            data,
            detections,
            out,
        } => {
            let (records, vocab) = load(data)?;
            let dets = load_detections(detections)?;
            let (stats, coverage) = estimate_priors(&records, &dets, vocab.len(), &cfg.priors)?;
            stats.save(out)?;
            println!("{}", serde_json::to_string_pretty(&coverage)?);
        }
        Command::Train {
            data,
            priors,
            out_dir,
        } => {
            let (records, vocab) = load(data)?;
            let priors = priors.as_deref().map(PriorStats::load).transpose()?;
            let out = train(&cfg, &records, &vocab, priors.as_ref())?;
            write_text(&out_dir.join("checkpoint.json"), &checkpoint::to_json(&out.model)?)?;
            write_text(&out_dir.join("report.json"), &out.report.to_json()?)?;
            let last = out.report.final_epoch();
            println!(
                "epoch {}: total {:.6} (mil {:.6}, nce {:.6}, refine {:.6})",
                last.epoch, last.total, last.mil, last.nce, last.refine
            );
            if let Some(eval) = &out.report.eval {
                print!("{}", format_table(&[("model".to_string(), eval)]));
            }
        }
        Command::Infer {
            data,
            checkpoint: ckpt,
            inference_mode,
            min_score,
            out,
        } => {
            let (records, _) = load(data)?;
            let model = model_from_checkpoint(&checkpoint::load(ckpt)?)?;
            let mode = match inference_mode {
                Some(m) => m.parse()?,
                None => cfg.inference.mode.unwrap_or(FusionMode::RgbOnly),
            };
            let min_score = min_score.unwrap_or(cfg.inference.min_score);
            let dets = infer(&model, &records, mode, cfg.mil.aggregation(), min_score)?;
            save_detections(out, &dets)?;
            println!("{} detections over {} images", dets.len(), records.len());
        }
        Command::Evaluate {
            data,
            detections,
            out,
        } => {
            let (records, vocab) = load(data)?;
            let dets = load_detections(detections)?;
            let report = evaluate(&dets, &records, vocab.len(), &cfg.eval)?;
            print!("{}", format_table(&[("detections".to_string(), &report)]));
            if let Some(out) = out {
                write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
        }
        Command::Ablation { data, priors, out } => {
            let (records, vocab) = load(data)?;
            let priors = priors.as_deref().map(PriorStats::load).transpose()?;
            let report = run_ablation(&cfg, &records, &vocab, priors.as_ref())?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wsod: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
