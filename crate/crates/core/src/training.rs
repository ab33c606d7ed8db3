//! Datasets, class-balanced batching, MixUp, temporal wrapping, the training
//! loop and top-k checkpoint selection.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::embeddings::{average_pool, read_embedding_file};
use crate::error::{Error, Result};
use crate::eval::{accuracy, argmax, confusion_matrix, uar};
use crate::features::{fix_length, read_mat1, MelSpectrogram};
use crate::models::{save_checkpoint, Architecture, CheckpointMeta, ModelGraph, N_CLASSES, N_MELS};
use crate::nn::loss::{categorical_crossentropy, one_hot};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Mode, Tensor};
use crate::rng::{Rng, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    /// A `MAT1` spectrogram or pooled vector, or an `EMB1` sequence.
    Path(PathBuf),
    /// Already in model-input layout.
    Inline(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub feature: Feature,
    /// `None` for unlabelled test clips.
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
}

/// Features of one split resolved into memory, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    /// Shape of one item, e.g. `[128, 85, 1]`.
    pub item_shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    /// Loads one split for `arch`.
    pub fn load(&self, split: Split, arch: Architecture) -> Result<Samples> {
        let items: Vec<&Item> = self.split(split).collect();
        let features = items
            .iter()
            .map(|i| load_feature(&i.feature, arch))
            .collect::<Result<Vec<_>>>()?;
        Ok(Samples::from_parts(
            items.iter().map(|i| i.id.clone()).collect(),
            items.iter().map(|i| i.label).collect(),
            arch.input_shape(),
            features,
        ))
    }
}

/// Reads one feature into model-input layout. Spectrograms with a different
/// number of time bins are zero-padded or truncated.
pub fn load_feature(feature: &Feature, arch: Architecture) -> Result<Vec<f32>> {
    let want: usize = arch.input_shape().iter().product();
    let (values, origin) = match feature {
        Feature::Inline(v) => (v.clone(), "inline feature".to_string()),
        Feature::Path(p) => (load_feature_file(p, arch)?, p.display().to_string()),
    };
    if values.len() != want {
        return Err(Error::Shape(format!(
            "{origin}: {} values, {arch} needs {want}",
            values.len()
        )));
    }
    Ok(values)
}

fn load_feature_file(path: &Path, arch: Architecture) -> Result<Vec<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("emb1") => average_pool(&read_embedding_file(path)?),
        Some("mat1") => {
            let m = read_mat1(path)?;
            match arch {
                Architecture::MelSpecCnn { time_bins } => {
                    if m.rows != N_MELS {
                        return Err(Error::Shape(format!(
                            "{}: {} mel bands, expected {N_MELS}",
                            path.display(),
                            m.rows
                        )));
                    }
                    let spec = MelSpectrogram {
                        original_t: m.cols,
                        values: m,
                        source_id: String::new(),
                    };
                    Ok(fix_length(&spec, time_bins).values.data)
                }
                Architecture::EmbeddingMlp => Ok(m.data),
            }
        }
        _ => Err(Error::InvalidArgument(format!(
            "{}: feature files must be .mat1 or .emb1",
            path.display()
        ))),
    }
}

impl Samples {
    pub fn from_parts(ids: Vec<String>, labels: Vec<Option<usize>>, item_shape: Vec<usize>, features: Vec<Vec<f32>>) -> Self {
        Self {
            ids,
            labels,
            item_shape,
            data: features.concat(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let k = self.item_len();
        &self.data[i * k..(i + 1) * k]
    }

    /// Every label, or an error naming the first unlabelled item.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.ok_or_else(|| Error::InvalidArgument(format!("item {id} has no label"))))
            .collect()
    }

    /// Stacks the chosen items into an `N × item_shape` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.item_shape);
        Tensor::from_vec(&shape, data).expect("batch shape matches data")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Items per batch before MixUp; a multiple of the class count.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mixup_alpha: f64,
    pub use_mixup: bool,
    pub use_time_wrap: bool,
    pub seed: u64,
    pub top_k: usize,
    /// Batch size for inference passes.
    pub eval_batch: usize,
}

impl TrainConfig {
    /// The published regime for each architecture.
    pub fn for_architecture(arch: Architecture, seed: u64) -> Self {
        let cnn = matches!(arch, Architecture::MelSpecCnn { .. });
        Self {
            batch_size: 400,
            epochs: if cnn { 100 } else { 200 },
            learning_rate: if cnn { 0.02 } else { 1e-4 },
            mixup_alpha: 0.2,
            use_mixup: cnn,
            use_time_wrap: arch == Architecture::MelSpecCnn { time_bins: crate::features::SHORT_FRAMES },
            seed,
            top_k: 5,
            eval_batch: 80,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.batch_size % N_CLASSES != 0 {
            return bad(format!("batch size {} is not a positive multiple of {N_CLASSES}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.use_mixup && !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!("mixup alpha {} must be positive", self.mixup_alpha));
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if self.eval_batch == 0 {
            return bad("eval batch must be positive".into());
        }
        AdamConfig::with_lr(self.learning_rate).validate()
    }
}

/// Index batches for one epoch. Each batch holds `batch_size / classes`
/// draws per class, sampled with replacement, and is shuffled; an epoch has
/// enough batches to cover the largest class once on average.
pub fn stratified_batches(labels: &[usize], classes: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if classes == 0 || batch_size == 0 || batch_size % classes != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} is not a positive multiple of {classes} classes"
        )));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside 0..{classes}")))?
            .push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Empty(format!("class {c} has no training items")));
    }
    let per = batch_size / classes;
    let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let n_batches = majority.div_ceil(per);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for members in &by_class {
            for _ in 0..per {
                batch.push(members[rng.random_range(0..members.len())]);
            }
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// `x' = λ x + (1−λ) x[perm]`, likewise for `y`, with one λ for the batch.
pub fn mixup_with(x: &Tensor<f32>, y: &Tensor<f32>, lambda: f32, perm: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if y.shape().first() != Some(&n) || perm.len() != n {
        return Err(Error::Shape(format!(
            "mixup batch sizes differ: features {:?}, labels {:?}, permutation {}",
            x.shape(),
            y.shape(),
            perm.len()
        )));
    }
    let mix = |t: &Tensor<f32>| {
        let k = t.len() / n.max(1);
        let src = t.data();
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in perm.iter().enumerate() {
            let (a, b) = (&src[i * k..(i + 1) * k], &src[j * k..(j + 1) * k]);
            out.extend(a.iter().zip(b).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b));
        }
        Tensor::from_vec(t.shape(), out)
    };
    Ok((mix(x)?, mix(y)?))
}

pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// MixUp with `λ ~ Beta(α, α)` and a uniform random pairing permutation.
pub fn mixup(x: &Tensor<f32>, y: &Tensor<f32>, alpha: f64, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mixup needs at least 2 items, got {n}")));
    }
    let lambda = sample_lambda(alpha, rng)? as f32;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    mixup_with(x, y, lambda, &perm)
}

/// Rotates every row of a row-major `rows × t` matrix so column `j` moves
/// to column `(j + k) mod t`.
pub fn time_wrap_by(data: &mut [f32], t: usize, k: usize) {
    if t == 0 {
        return;
    }
    for row in data.chunks_exact_mut(t) {
        row.rotate_right(k % t);
    }
}

/// Wraps a `128 × T` spectrogram by a uniform random offset; returns it.
pub fn time_wrap(data: &mut [f32], t: usize, rng: &mut Rng) -> usize {
    if t == 0 {
        return 0;
    }
    let k = rng.random_range(0..t);
    time_wrap_by(data, t, k);
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_uar: f64,
    /// Relative to the directory holding the history file.
    pub checkpoint_path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_FILE: &str = "history.csv";
const HISTORY_HEADER: &str = "epoch,train_accuracy,val_uar,checkpoint_path";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.epoch,
                r.train_accuracy,
                r.val_uar,
                r.checkpoint_path.display()
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::malformed(path, e.to_string()))?;
        if header.iter().ne(HISTORY_HEADER.split(',')) {
            return Err(Error::malformed(path, format!("header must be {HISTORY_HEADER}")));
        }
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::malformed(path, e.to_string()))?;
            let bad = |what: &str| Error::malformed(path, format!("bad {what} in {rec:?}"));
            records.push(EpochRecord {
                epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
                train_accuracy: rec[1].parse().map_err(|_| bad("train_accuracy"))?,
                val_uar: rec[2].parse().map_err(|_| bad("val_uar"))?,
                checkpoint_path: PathBuf::from(&rec[3]),
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The `k` records with the highest validation UAR, best first; ties go to
/// the earlier epoch.
pub fn select_top_k(history: &TrainHistory, k: usize) -> Vec<&EpochRecord> {
    let mut order: Vec<&EpochRecord> = history.records.iter().collect();
    order.sort_by(|a, b| b.val_uar.total_cmp(&a.val_uar).then(a.epoch.cmp(&b.epoch)));
    order.truncate(k);
    order
}

/// Class probabilities for every item, computed in inference mode.
pub fn predict_probs(model: &mut ModelGraph<f32>, samples: &Samples, batch: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(samples.len() * N_CLASSES);
    let mut unused = SeedTree::new(0).rng("inference");
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let p = model.predict(&samples.batch(chunk), Mode::Infer, &mut unused)?;
        out.extend_from_slice(p.data());
    }
    Ok(out)
}

fn predicted_labels(probs: &[f32]) -> Vec<usize> {
    probs.chunks_exact(N_CLASSES).map(argmax).collect()
}

/// Validation UAR of `model` on labelled samples.
pub fn evaluate_uar(model: &mut ModelGraph<f32>, samples: &Samples, batch: usize) -> Result<f64> {
    let truth = samples.require_labels()?;
    let pred = predicted_labels(&predict_probs(model, samples, batch)?);
    uar(&confusion_matrix(&truth, &pred, N_CLASSES)?)
}

fn checkpoint_name(epoch: usize) -> PathBuf {
    Path::new("checkpoints").join(format!("epoch_{epoch:03}.bkpt"))
}

/// Trains in place. After every epoch a checkpoint goes to
/// `out_dir/checkpoints/` and the history so far to `out_dir/history.csv`.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &Samples,
    val_set: &Samples,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainHistory> {
    config.validate()?;
    crate::nn::retain_freed_memory();
    let train_labels = train_set.require_labels()?;
    val_set.require_labels()?;
    if val_set.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let t_bins = match model.name.parse::<Architecture>()? {
        Architecture::MelSpecCnn { time_bins } => Some(time_bins),
        Architecture::EmbeddingMlp => None,
    };
    let wrap = config.use_time_wrap && t_bins.is_some();
    if config.use_time_wrap && !wrap {
        log::warn!("time wrapping only applies to spectrogram models; ignoring it");
    }
    let dir = out_dir.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut opt = Adam::<f32>::new(AdamConfig::with_lr(config.learning_rate))?;
    let root = SeedTree::new(config.seed).child("train");
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let es = root.index(epoch as u64);
        let mut batch_rng = es.rng("batches");
        let (mut wrap_rng, mut mix_rng, mut drop_rng) = (es.rng("wrap"), es.rng("mixup"), es.rng("dropout"));
        let batches = stratified_batches(&train_labels, N_CLASSES, config.batch_size, &mut batch_rng)?;
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let mut x = train_set.batch(idx);
            if let (true, Some(t)) = (wrap, t_bins) {
                let k = train_set.item_len();
                for item in x.data_mut().chunks_exact_mut(k) {
                    time_wrap(item, t, &mut wrap_rng);
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let mut y = one_hot::<f32>(&labels, N_CLASSES)?;
            if config.use_mixup {
                (x, y) = mixup(&x, &y, config.mixup_alpha, &mut mix_rng)?;
            }
            let pass = model.forward(&x, Mode::TRAIN, &mut drop_rng)?;
            let (loss, d_logits) = categorical_crossentropy(&pass.output, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {loss} at epoch {epoch}, batch {}", b + 1)));
            }
            loss_sum += loss;
            let grads = model.backward_from_logits(pass, d_logits)?;
            let flat: Vec<&Tensor<f32>> = grads.iter().flatten().collect();
            opt.step(model.params_mut().zip(flat).map(|(p, g)| (p.data_mut(), g.data())))?;
        }
        if model.all_tensors().any(|t| !t.all_finite()) {
            return Err(Error::Numeric(format!("non-finite weights after epoch {epoch}")));
        }

        // Accuracy against mixed targets is ill-defined, so it is measured
        // on one fresh clean stratified batch.
        let probe = stratified_batches(&train_labels, N_CLASSES, config.batch_size, &mut es.rng("train-accuracy"))?
            .swap_remove(0);
        let probe_set = Samples {
            ids: probe.iter().map(|&i| train_set.ids[i].clone()).collect(),
            labels: probe.iter().map(|&i| Some(train_labels[i])).collect(),
            item_shape: train_set.item_shape.clone(),
            data: train_set.batch(&probe).into_data(),
        };
        let probe_pred = predicted_labels(&predict_probs(model, &probe_set, config.eval_batch)?);
        let train_accuracy = accuracy(&probe_set.require_labels()?, &probe_pred)?;
        let val_uar = evaluate_uar(model, val_set, config.eval_batch)?;

        let rel = checkpoint_name(epoch);
        let meta = CheckpointMeta {
            epoch: Some(epoch),
            seed: Some(config.seed),
            val_uar: Some(val_uar),
            extra: [
                ("learning_rate".to_string(), config.learning_rate.to_string()),
                ("train_accuracy".to_string(), format!("{train_accuracy:.6}")),
            ]
            .into(),
        };
        save_checkpoint(out_dir.join(&rel), model, &meta)?;
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, train accuracy {train_accuracy:.4}, val UAR {val_uar:.4}",
            config.epochs,
            loss_sum / batches.len() as f64
        );
        history.records.push(EpochRecord {
            epoch,
            train_accuracy,
            val_uar,
            checkpoint_path: rel,
        });
        history.write(out_dir.join(HISTORY_FILE))?;
    }
    Ok(history)
}
