//! The five pipeline stages. Each takes a fully resolved options struct so
//! it can be driven from tests as well as from the argument parser.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use burstnet::audio::{load_clip, write_wav, WavEncoding};
use burstnet::embeddings::{average_pool, read_embedding_file};
use burstnet::eval::{
    accuracy, confusion_matrix, fuse_labels, read_predictions, uar, write_predictions, ConfusionMatrix, FusionMethod,
    PredictionSet,
};
use burstnet::features::{fix_length, temporal_bin_quantile, write_mat1, Matrix, MelFeaturizer, MelSpecParams};
use burstnet::models::{load_checkpoint, Architecture, CLASS_NAMES, N_CLASSES};
use burstnet::preprocess::{preprocess, VadParams};
use burstnet::rng::SeedTree;
use burstnet::training::{
    load_feature, predict_probs, select_top_k, train, EpochRecord, Feature, Samples, Split, TrainConfig, TrainHistory,
    HISTORY_FILE,
};

use crate::error::{CliError, Result};
use crate::manifest::{Manifest, ManifestRow};

/// Maps `f` over `items` on `workers` threads, keeping input order. The
/// error reported is the first in input order.
fn par_map<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let results: Vec<Result<R>> = if workers <= 1 {
        items.iter().map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| items.par_iter().map(&f).collect())
    };
    results.into_iter().collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn extension(path: &Path) -> &str {
    path.extension().and_then(|e| e.to_str()).unwrap_or("")
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub vad: VadParams,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipReport {
    pub id: String,
    pub input_samples: usize,
    pub output_samples: usize,
    /// First speech sample and one past the last, when any speech was found.
    pub speech: Option<(usize, usize)>,
    pub flagged_empty: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    pub clips: Vec<ClipReport>,
}

impl PreprocessReport {
    pub fn flagged(&self) -> usize {
        self.clips.iter().filter(|c| c.flagged_empty).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,input_samples,output_samples,speech_start,speech_end,flagged_empty\n");
        for c in &self.clips {
            let (s, e) = c.speech.map_or((String::new(), String::new()), |(s, e)| (s.to_string(), e.to_string()));
            writeln!(out, "{},{},{},{s},{e},{}", c.id, c.input_samples, c.output_samples, c.flagged_empty).unwrap();
        }
        out
    }
}

/// Trims silence and peak-normalises every clip. Outputs are float WAVs so
/// the peak is exactly 1.0; clips left empty are kept and flagged.
pub fn cmd_preprocess(opts: &PreprocessOptions) -> Result<PreprocessReport> {
    opts.vad.validate()?;
    let manifest = Manifest::read(&opts.manifest)?;
    create_dir(&opts.out)?;
    let clips = par_map(opts.workers, &manifest.rows, |row| {
        let clip = load_clip(manifest.resolve(row))?;
        let done = preprocess(&clip, &opts.vad);
        let id = row.id();
        write_wav(opts.out.join(format!("{id}.wav")), &done.clip, WavEncoding::Float32)?;
        let speech = match (done.vad_regions.first(), done.vad_regions.last()) {
            (Some(a), Some(b)) => Some((a.start_sample, b.end_sample)),
            _ => None,
        };
        Ok(ClipReport {
            id,
            input_samples: clip.len(),
            output_samples: done.clip.len(),
            speech,
            flagged_empty: done.was_empty_after_vad,
        })
    })?;
    let out_manifest = Manifest {
        rows: manifest
            .rows
            .iter()
            .map(|r| ManifestRow {
                path: PathBuf::from(format!("{}.wav", r.id())),
                ..r.clone()
            })
            .collect(),
        base: opts.out.clone(),
    };
    out_manifest.write(&opts.out.join("manifest.csv"))?;
    let report = PreprocessReport { clips };
    write_text(&opts.out.join("preprocess_report.csv"), &report.to_csv())?;
    for c in report.clips.iter().filter(|c| c.flagged_empty) {
        log::warn!("clip {} has no speech after silence removal; kept untrimmed", c.id);
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FeaturizeOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub target_len: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizeReport {
    pub ids: Vec<String>,
    /// Frames before length fixing (embedding rows for `.emb1` inputs).
    pub lengths: Vec<usize>,
    /// 90th-percentile length, absent for an empty manifest.
    pub q90: Option<usize>,
    pub target_len: usize,
}

impl FeaturizeReport {
    pub fn summary(&self) -> String {
        let q90 = self.q90.map_or_else(|| "none".to_string(), |q| q.to_string());
        format!("clips={}\ntarget_frames={}\nq90_frames={q90}\n", self.ids.len(), self.target_len)
    }
}

fn spectrogram_for(featurizer: &MelFeaturizer, path: &Path, target_len: usize) -> Result<(Matrix<f32>, usize)> {
    let spec = featurizer.compute(&load_clip(path)?)?;
    let frames = spec.n_frames();
    Ok((fix_length(&spec, target_len).values, frames))
}

/// Writes one `MAT1` per clip: a fixed-length spectrogram for audio, or the
/// pooled `1 × 768` vector for an `.emb1` sequence.
pub fn cmd_featurize(opts: &FeaturizeOptions) -> Result<FeaturizeReport> {
    if opts.target_len == 0 {
        return Err(CliError::Usage("target length must be positive".into()));
    }
    let manifest = Manifest::read(&opts.manifest)?;
    create_dir(&opts.out)?;
    let featurizer = MelFeaturizer::new(MelSpecParams::default())?;
    let lengths = par_map(opts.workers, &manifest.rows, |row| {
        let path = manifest.resolve(row);
        let (m, frames) = if extension(&path) == "emb1" {
            let seq = read_embedding_file(&path)?;
            let rows = seq.frames.rows;
            (Matrix::from_vec(1, seq.frames.cols, average_pool(&seq)?), rows)
        } else {
            spectrogram_for(&featurizer, &path, opts.target_len)?
        };
        write_mat1(opts.out.join(format!("{}.mat1", row.id())), &m)?;
        Ok(frames)
    })?;
    let out_manifest = Manifest {
        rows: manifest
            .rows
            .iter()
            .map(|r| ManifestRow {
                path: PathBuf::from(format!("{}.mat1", r.id())),
                ..r.clone()
            })
            .collect(),
        base: opts.out.clone(),
    };
    out_manifest.write(&opts.out.join("manifest.csv"))?;
    let ids: Vec<String> = manifest.rows.iter().map(ManifestRow::id).collect();
    let mut table = String::from("id,frames\n");
    for (id, n) in ids.iter().zip(&lengths) {
        writeln!(table, "{id},{n}").unwrap();
    }
    write_text(&opts.out.join("lengths.csv"), &table)?;
    let q90 = if lengths.is_empty() { None } else { Some(temporal_bin_quantile(&lengths, 0.9)?) };
    let report = FeaturizeReport {
        ids,
        lengths,
        q90,
        target_len: opts.target_len,
    };
    write_text(&opts.out.join("featurize_report.txt"), &report.summary())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approach {
    Melspec150,
    Melspec85,
    Embedding,
}

impl FromStr for Approach {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "melspec150" => Ok(Approach::Melspec150),
            "melspec85" => Ok(Approach::Melspec85),
            "embedding" => Ok(Approach::Embedding),
            _ => Err(CliError::Usage(format!(
                "unknown approach {s:?} (expected melspec150, melspec85 or embedding)"
            ))),
        }
    }
}

impl Approach {
    pub fn architecture(self) -> Architecture {
        match self {
            Approach::Melspec150 => Architecture::MelSpecCnn { time_bins: 150 },
            Approach::Melspec85 => Architecture::MelSpecCnn { time_bins: 85 },
            Approach::Embedding => Architecture::EmbeddingMlp,
        }
    }
}

/// Loads the rows of `split` (all rows when `None`) as model inputs.
/// Audio rows are featurized on the fly.
pub fn load_samples(manifest: &Manifest, split: Option<Split>, arch: Architecture, workers: usize) -> Result<Samples> {
    let rows: Vec<&ManifestRow> = manifest.rows.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();
    let featurizer = MelFeaturizer::new(MelSpecParams::default())?;
    let features = par_map(workers, &rows, |row| {
        let path = manifest.resolve(row);
        match (extension(&path), arch) {
            ("wav", Architecture::MelSpecCnn { time_bins }) => {
                Ok(spectrogram_for(&featurizer, &path, time_bins)?.0.data)
            }
            ("wav", Architecture::EmbeddingMlp) => Err(CliError::Data(format!(
                "{}: the embedding approach needs .emb1 or .mat1 features, not audio",
                path.display()
            ))),
            _ => Ok(load_feature(&Feature::Path(path), arch)?),
        }
    })?;
    Ok(Samples::from_parts(
        rows.iter().map(|r| r.id()).collect(),
        rows.iter().map(|r| r.label).collect(),
        arch.input_shape(),
        features,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub approach: Approach,
    pub config: TrainConfig,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: TrainHistory,
    /// Best epochs by validation UAR, best first.
    pub top: Vec<EpochRecord>,
}

pub const TOP_K_FILE: &str = "top_k.csv";

pub fn cmd_train(opts: &TrainOptions) -> Result<TrainSummary> {
    opts.config.validate()?;
    let manifest = Manifest::read(&opts.manifest)?;
    let arch = opts.approach.architecture();
    let train_set = load_samples(&manifest, Some(Split::Train), arch, opts.workers)?;
    let val_set = load_samples(&manifest, Some(Split::Val), arch, opts.workers)?;
    if train_set.is_empty() {
        return Err(CliError::Data("manifest has no train rows".into()));
    }
    if val_set.is_empty() {
        return Err(CliError::Data("manifest has no val rows".into()));
    }
    create_dir(&opts.out)?;
    let mut model = arch.build::<f32>(&SeedTree::new(opts.config.seed).child("model"))?;
    let history = train(&mut model, &train_set, &val_set, &opts.config, &opts.out)?;
    let top: Vec<EpochRecord> = select_top_k(&history, opts.config.top_k).into_iter().cloned().collect();
    let mut table = String::from("rank,epoch,val_uar,checkpoint_path\n");
    for (i, r) in top.iter().enumerate() {
        writeln!(table, "{},{},{:.6},{}", i + 1, r.epoch, r.val_uar, r.checkpoint_path.display()).unwrap();
    }
    write_text(&opts.out.join(TOP_K_FILE), &table)?;
    Ok(TrainSummary { history, top })
}

/// Checkpoint paths of the `k` best epochs recorded in a history file.
pub fn checkpoints_from_history(history: &Path, k: usize) -> Result<Vec<PathBuf>> {
    let h = TrainHistory::read(history)?;
    let dir = history.parent().unwrap_or(Path::new(""));
    Ok(select_top_k(&h, k).into_iter().map(|r| dir.join(&r.checkpoint_path)).collect())
}

/// History file inside a training output directory.
pub fn history_path(train_out: &Path) -> PathBuf {
    train_out.join(HISTORY_FILE)
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub checkpoints: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// Predictions CSV to write.
    pub out: PathBuf,
    pub split: Option<Split>,
    pub fusion: FusionMethod,
    pub workers: usize,
    pub eval_batch: usize,
}

/// Predicts the selected rows with every checkpoint and fuses the sets.
/// Batches are fixed-size and independent of `workers`, so the output does
/// not depend on the thread count.
pub fn cmd_predict(opts: &PredictOptions) -> Result<PredictionSet> {
    if opts.checkpoints.is_empty() {
        return Err(CliError::Usage("predict needs at least one checkpoint".into()));
    }
    if opts.eval_batch == 0 {
        return Err(CliError::Usage("eval batch must be positive".into()));
    }
    let manifest = Manifest::read(&opts.manifest)?;
    let mut cache: Vec<(Architecture, Samples)> = Vec::new();
    let mut sets = Vec::with_capacity(opts.checkpoints.len());
    for path in &opts.checkpoints {
        let ckpt = load_checkpoint(path)?;
        let arch = ckpt.architecture;
        if !cache.iter().any(|(a, _)| *a == arch) {
            cache.push((arch, load_samples(&manifest, opts.split, arch, opts.workers)?));
        }
        let samples = &cache.iter().find(|(a, _)| *a == arch).expect("cached above").1;
        let starts: Vec<usize> = (0..samples.len()).step_by(opts.eval_batch).collect();
        let chunks = par_map(opts.workers, &starts, |&s| {
            let idx: Vec<usize> = (s..(s + opts.eval_batch).min(samples.len())).collect();
            let part = Samples {
                ids: idx.iter().map(|&i| samples.ids[i].clone()).collect(),
                labels: vec![None; idx.len()],
                item_shape: samples.item_shape.clone(),
                data: samples.batch(&idx).into_data(),
            };
            let mut model = ckpt.model.clone();
            Ok(predict_probs(&mut model, &part, opts.eval_batch)?)
        })?;
        sets.push(PredictionSet::new(samples.ids.clone(), chunks.concat())?);
    }
    let fused = fuse_labels(&sets, opts.fusion)?;
    if let Some(dir) = opts.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_predictions(&opts.out, &fused)?;
    Ok(fused)
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    /// Directory for the metrics and confusion-matrix files.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub uar: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    pub fn report(&self) -> String {
        format!(
            "uar={:.6}\naccuracy={:.6}\nsamples={}\n\n{}",
            self.uar,
            self.accuracy,
            self.confusion.total(),
            self.confusion.to_text(&CLASS_NAMES)
        )
    }
}

/// Scores a predictions file against manifest labels, matched by clip id.
pub fn cmd_evaluate(opts: &EvaluateOptions) -> Result<Evaluation> {
    let manifest = Manifest::read(&opts.manifest)?;
    let preds = read_predictions(&opts.predictions)?;
    let labels: std::collections::HashMap<String, Option<usize>> =
        manifest.rows.iter().map(|r| (r.id(), r.label)).collect();
    let mut truth = Vec::with_capacity(preds.len());
    for (row, id) in preds.ids.iter().enumerate() {
        match labels.get(id) {
            Some(Some(l)) => truth.push(*l),
            Some(None) => {
                return Err(CliError::Data(format!("prediction row {} ({id}) has no label in the manifest", row + 1)))
            }
            None => {
                return Err(CliError::Data(format!(
                    "id mismatch: prediction row {} ({id:?}) is not in the manifest",
                    row + 1
                )))
            }
        }
    }
    let pred = preds.labels();
    let confusion = confusion_matrix(&truth, &pred, N_CLASSES)?;
    let eval = Evaluation {
        uar: uar(&confusion)?,
        accuracy: accuracy(&truth, &pred)?,
        confusion,
    };
    if let Some(dir) = &opts.out {
        create_dir(dir)?;
        write_text(&dir.join("metrics.txt"), &eval.report())?;
        write_text(&dir.join("confusion.csv"), &eval.confusion.to_csv(&CLASS_NAMES))?;
    }
    Ok(eval)
}
