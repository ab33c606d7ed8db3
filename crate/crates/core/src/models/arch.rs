use std::fmt;
use std::str::FromStr;

use crate::embeddings::EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::features::{LONG_FRAMES, SHORT_FRAMES};
use crate::nn::{LayerSpec, Scalar};
use crate::rng::SeedTree;

use super::graph::{GraphBuilder, ModelGraph, Src};

pub const N_CLASSES: usize = 8;
pub const N_MELS: usize = 128;

/// Label names in class-index order.
pub const CLASS_NAMES: [&str; N_CLASSES] = ["Cry", "Gasp", "Groan", "Grunt", "Laugh", "Pant", "Scream", "Other"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

/// The two supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Three-branch CNN over a `128 × time_bins × 1` spectrogram.
    MelSpecCnn { time_bins: usize },
    /// Three-layer perceptron over a pooled 768-d embedding.
    EmbeddingMlp,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::MelSpecCnn { time_bins } => write!(f, "melspec_cnn_{time_bins}"),
            Architecture::EmbeddingMlp => write!(f, "embedding_mlp"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "embedding_mlp" {
            return Ok(Architecture::EmbeddingMlp);
        }
        s.strip_prefix("melspec_cnn_")
            .and_then(|t| t.parse().ok())
            .map(|time_bins| Architecture::MelSpecCnn { time_bins })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?}")))
    }
}

impl Architecture {
    pub fn build<T: Scalar>(self, seed: &SeedTree) -> Result<ModelGraph<T>> {
        match self {
            Architecture::MelSpecCnn { time_bins } => build_melspec_cnn(time_bins, seed),
            Architecture::EmbeddingMlp => build_embedding_mlp(seed),
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Architecture::MelSpecCnn { time_bins } => vec![N_MELS, time_bins, 1],
            Architecture::EmbeddingMlp => vec![EMBEDDING_DIM],
        }
    }
}

/// Spectrogram CNN. Axis 0 of the input is frequency, so the `(10, 1)`
/// branch spans ten mel bands and the `(1, 10)` branch ten time frames.
pub fn build_melspec_cnn<T: Scalar>(time_bins: usize, seed: &SeedTree) -> Result<ModelGraph<T>> {
    if time_bins != LONG_FRAMES && time_bins != SHORT_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "spectrogram CNN takes {LONG_FRAMES} or {SHORT_FRAMES} time bins, got {time_bins}"
        )));
    }
    let arch = Architecture::MelSpecCnn { time_bins };
    let mut rng = seed.rng("init");
    let mut g = GraphBuilder::new(&arch.to_string(), &arch.input_shape());

    let mut branches = Vec::new();
    for (b, kernel) in [(10, 1), (1, 10), (3, 3)].into_iter().enumerate() {
        let mut x = Src::Input;
        for (name, spec) in [
            ("conv", LayerSpec::Conv2d { filters: 16, kernel }),
            ("bn", LayerSpec::BatchNorm),
            ("relu", LayerSpec::Relu),
            ("drop", LayerSpec::SpatialDropout { rate: 0.2 }),
            ("pool", LayerSpec::MaxPool2d { pool: (4, 2) }),
        ] {
            x = g.add(&format!("a{b}.{name}"), spec, &[x], &mut rng)?;
        }
        branches.push(x);
    }
    let mut x = g.add("concat", LayerSpec::Concat, &branches, &mut rng)?;

    for (b, (filters, kernel, rate)) in [(32, (5, 5), 0.3), (32, (5, 5), 0.3), (64, (3, 3), 0.4)]
        .into_iter()
        .enumerate()
    {
        for (name, spec) in [
            ("bn_in", LayerSpec::BatchNorm),
            ("conv", LayerSpec::Conv2d { filters, kernel }),
            ("bn", LayerSpec::BatchNorm),
            ("relu", LayerSpec::Relu),
            ("drop", LayerSpec::SpatialDropout { rate }),
            ("pool", LayerSpec::MaxPool2d { pool: (2, 4) }),
        ] {
            x = g.add(&format!("b{b}.{name}"), spec, &[x], &mut rng)?;
        }
    }
    for (name, spec) in [
        ("b3.bn_in", LayerSpec::BatchNorm),
        ("b3.conv", LayerSpec::Conv2d { filters: 16, kernel: (3, 3) }),
        ("b3.gmp", LayerSpec::GlobalMaxPool),
        ("c.bn", LayerSpec::BatchNorm),
        ("c.dense", LayerSpec::Dense { units: N_CLASSES }),
        ("c.softmax", LayerSpec::Softmax),
    ] {
        x = g.add(name, spec, &[x], &mut rng)?;
    }
    g.finish()
}

/// Embedding classifier; both hidden layers use element-wise dropout 0.2.
pub fn build_embedding_mlp<T: Scalar>(seed: &SeedTree) -> Result<ModelGraph<T>> {
    let arch = Architecture::EmbeddingMlp;
    let mut rng = seed.rng("init");
    let mut g = GraphBuilder::new(&arch.to_string(), &arch.input_shape());
    let mut x = Src::Input;
    for (name, spec) in [
        ("l1.bn", LayerSpec::BatchNorm),
        ("l1.dense", LayerSpec::Dense { units: 64 }),
        ("l1.drop", LayerSpec::Dropout { rate: 0.2 }),
        ("l1.relu", LayerSpec::Relu),
        ("l2.dense", LayerSpec::Dense { units: 32 }),
        ("l2.drop", LayerSpec::Dropout { rate: 0.2 }),
        ("l2.relu", LayerSpec::Relu),
        ("l3.dense", LayerSpec::Dense { units: N_CLASSES }),
        ("l3.softmax", LayerSpec::Softmax),
    ] {
        x = g.add(name, spec, &[x], &mut rng)?;
    }
    g.finish()
}
