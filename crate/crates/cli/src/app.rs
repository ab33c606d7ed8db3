//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use burstnet::eval::FusionMethod;
use burstnet::preprocess::VadParams;
use burstnet::training::{Split, TrainConfig};

use crate::commands::*;
use crate::config::Config;
use crate::error::{CliError, Result, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "burstnet", version, about = "Vocal burst classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `path,label,split` CSV.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (a file for `predict`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for per-clip work; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trim silence and normalise amplitude.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vad_frame_len: Option<usize>,
        #[arg(long)]
        vad_hop: Option<usize>,
        /// Energy percentile used as the noise floor, in [0, 1].
        #[arg(long)]
        vad_percentile: Option<f64>,
        #[arg(long)]
        vad_margin_db: Option<f64>,
        #[arg(long)]
        vad_min_region: Option<usize>,
        #[arg(long)]
        vad_merge_gap: Option<usize>,
    },
    /// Compute fixed-length mel spectrograms (or pool embeddings).
    Featurize {
        #[command(flatten)]
        common: Common,
        /// 150 or 85 time bins.
        #[arg(long)]
        target_len: Option<usize>,
    },
    /// Train a model and keep a checkpoint per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// melspec150, melspec85 or embedding.
        #[arg(long)]
        approach: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_name = "BOOL")]
        mixup: Option<bool>,
        #[arg(long)]
        mixup_alpha: Option<f64>,
        #[arg(long, value_name = "BOOL")]
        time_wrap: Option<bool>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        eval_batch: Option<usize>,
    },
    /// Predict with one or more checkpoints, fusing their outputs.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Repeat to fuse several models.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Take the best `--top-k` checkpoints from this history file.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        /// train, val or test; all rows when omitted.
        #[arg(long)]
        split: Option<String>,
        /// mean or vote.
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long)]
        eval_batch: Option<usize>,
    },
    /// Score predictions against manifest labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

struct Resolved {
    cfg: Config,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
    workers: usize,
}

impl Common {
    fn resolve(self) -> Result<Resolved> {
        let cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let workers = cfg.pick(self.workers, "workers")?.unwrap_or(1);
        if workers == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        Ok(Resolved {
            manifest: cfg.pick(self.manifest, "manifest")?,
            out: cfg.pick(self.out, "out")?,
            seed: cfg.pick(self.seed, "seed")?.unwrap_or(0),
            workers,
            cfg,
        })
    }
}

impl Resolved {
    fn manifest(&self) -> Result<PathBuf> {
        self.manifest.clone().ok_or_else(|| CliError::Usage("--manifest is required".into()))
    }

    fn out(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: burstnet::Error| CliError::Usage(e.to_string()))
}

fn parse_fusion(s: &str) -> Result<FusionMethod> {
    match s {
        "mean" => Ok(FusionMethod::Mean),
        "vote" => Ok(FusionMethod::Vote),
        _ => Err(CliError::Usage(format!("unknown fusion {s:?} (expected mean or vote)"))),
    }
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Preprocess {
            common,
            vad_frame_len,
            vad_hop,
            vad_percentile,
            vad_margin_db,
            vad_min_region,
            vad_merge_gap,
        } => {
            let r = common.resolve()?;
            let d = VadParams::default();
            let c = &r.cfg;
            let vad = VadParams {
                frame_len: c.pick(vad_frame_len, "vad_frame_len")?.unwrap_or(d.frame_len),
                hop: c.pick(vad_hop, "vad_hop")?.unwrap_or(d.hop),
                energy_percentile_floor: c.pick(vad_percentile, "vad_percentile")?.unwrap_or(d.energy_percentile_floor),
                energy_margin_db: c.pick(vad_margin_db, "vad_margin_db")?.unwrap_or(d.energy_margin_db),
                min_region_frames: c.pick(vad_min_region, "vad_min_region")?.unwrap_or(d.min_region_frames),
                merge_gap_frames: c.pick(vad_merge_gap, "vad_merge_gap")?.unwrap_or(d.merge_gap_frames),
            };
            vad.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let report = cmd_preprocess(&PreprocessOptions {
                manifest: r.manifest()?,
                out: r.out()?,
                vad,
                workers: r.workers,
            })?;
            Ok(format!("preprocessed {} clips, {} flagged empty\n", report.clips.len(), report.flagged()))
        }
        Command::Featurize { common, target_len } => {
            let r = common.resolve()?;
            let target_len = r.cfg.pick(target_len, "target_len")?.unwrap_or(burstnet::features::LONG_FRAMES);
            let report = cmd_featurize(&FeaturizeOptions {
                manifest: r.manifest()?,
                out: r.out()?,
                target_len,
                workers: r.workers,
            })?;
            Ok(report.summary())
        }
        Command::Train {
            common,
            approach,
            epochs,
            learning_rate,
            batch_size,
            mixup,
            mixup_alpha,
            time_wrap,
            top_k,
            eval_batch,
        } => {
            let r = common.resolve()?;
            let c = &r.cfg;
            let approach: Approach = c
                .pick(approach, "approach")?
                .ok_or_else(|| CliError::Usage("--approach is required".into()))?
                .parse()?;
            let d = TrainConfig::for_architecture(approach.architecture(), r.seed);
            let config = TrainConfig {
                batch_size: c.pick(batch_size, "batch_size")?.unwrap_or(d.batch_size),
                epochs: c.pick(epochs, "epochs")?.unwrap_or(d.epochs),
                learning_rate: c.pick(learning_rate, "learning_rate")?.unwrap_or(d.learning_rate),
                mixup_alpha: c.pick(mixup_alpha, "mixup_alpha")?.unwrap_or(d.mixup_alpha),
                use_mixup: c.pick(mixup, "mixup")?.unwrap_or(d.use_mixup),
                use_time_wrap: c.pick(time_wrap, "time_wrap")?.unwrap_or(d.use_time_wrap),
                seed: r.seed,
                top_k: c.pick(top_k, "top_k")?.unwrap_or(d.top_k),
                eval_batch: c.pick(eval_batch, "eval_batch")?.unwrap_or(d.eval_batch),
            };
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let out = r.out()?;
            let summary = cmd_train(&TrainOptions {
                manifest: r.manifest()?,
                out: out.clone(),
                approach,
                config,
                workers: r.workers,
            })?;
            let mut text = format!("trained {} epochs; history in {}\n", summary.history.records.len(), history_path(&out).display());
            for (i, rec) in summary.top.iter().enumerate() {
                text.push_str(&format!("top {}: epoch {} val UAR {:.4}\n", i + 1, rec.epoch, rec.val_uar));
            }
            Ok(text)
        }
        Command::Predict {
            common,
            mut checkpoint,
            history,
            top_k,
            split,
            fusion,
            eval_batch,
        } => {
            let r = common.resolve()?;
            let c = &r.cfg;
            if checkpoint.is_empty() {
                if let Some(p) = c.raw("checkpoint") {
                    checkpoint = p.split(',').map(|s| PathBuf::from(s.trim())).collect();
                }
            }
            if let Some(h) = c.pick(history, "history")? {
                let k = c.pick(top_k, "top_k")?.unwrap_or(1);
                checkpoint.extend(checkpoints_from_history(&h, k)?);
            }
            let split = c.pick(split, "split")?.map(|s| parse_split(&s)).transpose()?;
            let fusion = parse_fusion(&c.pick(fusion, "fusion")?.unwrap_or_else(|| "mean".into()))?;
            let out = r.out()?;
            let set = cmd_predict(&PredictOptions {
                checkpoints: checkpoint.clone(),
                manifest: r.manifest()?,
                out: out.clone(),
                split,
                fusion,
                workers: r.workers,
                eval_batch: c.pick(eval_batch, "eval_batch")?.unwrap_or(80),
            })?;
            Ok(format!(
                "wrote {} predictions from {} model(s) to {}\n",
                set.len(),
                checkpoint.len(),
                out.display()
            ))
        }
        Command::Evaluate { common, predictions } => {
            let r = common.resolve()?;
            let predictions = r
                .cfg
                .pick(predictions, "predictions")?
                .ok_or_else(|| CliError::Usage("--predictions is required".into()))?;
            let eval = cmd_evaluate(&EvaluateOptions {
                predictions,
                manifest: r.manifest()?,
                out: r.out.clone(),
            })?;
            Ok(eval.report())
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
