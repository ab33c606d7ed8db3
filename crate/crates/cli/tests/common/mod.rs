//! Synthetic corpora shared by the integration suites.
#![allow(dead_code)]

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use burstnet::audio::{write_wav, AudioClip, WavEncoding};
use burstnet::embeddings::{write_embedding_file, EmbeddingSequence, EMBEDDING_DIM};
use burstnet::features::Matrix;
use burstnet::models::CLASS_NAMES;
use burstnet::rng::{Rng, SeedTree};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const RATE: u32 = 16_000;

const CENTERS_HZ: [f32; 8] = [250.0, 450.0, 800.0, 1300.0, 2000.0, 2900.0, 4000.0, 5500.0];
const AM_HZ: [f32; 8] = [3.0, 11.0, 5.0, 14.0, 7.0, 2.0, 9.0, 16.0];

/// Two-pole band-pass (constant peak gain) over white noise.
fn band_noise(n: usize, center: f32, q: f32, rng: &mut Rng) -> Vec<f32> {
    let w0 = 2.0 * PI * center / RATE as f32;
    let alpha = w0.sin() / (2.0 * q);
    let (b0, b2) = (alpha, -alpha);
    let (a0, a1, a2) = (1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f32 = StandardNormal.sample(rng);
        let y = (b0 * x + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        (x2, x1, y2, y1) = (x1, x, y1, y);
        out.push(y);
    }
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-9);
    out.iter_mut().for_each(|v| *v /= peak);
    out
}

/// One second of audio for `class`. Even classes are amplitude-modulated
/// tones, odd classes modulated band-limited noise. Each clip jitters the
/// centre frequency, modulation rate, level and burst position, and adds a
/// quiet noise floor.
pub fn class_clip(class: usize, rng: &mut Rng) -> Vec<f32> {
    let n = RATE as usize;
    let fc = CENTERS_HZ[class] * rng.random_range(0.94..1.06);
    let am = AM_HZ[class] * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..2.0 * PI);
    let level = rng.random_range(0.3..0.9);
    let len = rng.random_range(n * 6 / 10..n * 9 / 10);
    let start = rng.random_range(0..n - len);
    let carrier: Vec<f32> = if class % 2 == 0 {
        (0..len).map(|i| (2.0 * PI * fc * i as f32 / RATE as f32 + phase).sin()).collect()
    } else {
        band_noise(len, fc, 4.0, rng)
    };
    let mut s = vec![0.0f32; n];
    for (i, c) in carrier.into_iter().enumerate() {
        let t = i as f32 / RATE as f32;
        let env = 0.6 + 0.4 * (2.0 * PI * am * t + phase).sin();
        let fade = ((i.min(len - 1 - i)) as f32 / 160.0).min(1.0);
        s[start + i] = level * env * fade * c;
    }
    for v in &mut s {
        let z: f32 = StandardNormal.sample(rng);
        *v += 0.001 * z;
    }
    s
}

/// Writes `train_per + val_per` clips per class as 16-bit WAVs and a
/// manifest listing them; returns the manifest path.
pub fn write_audio_corpus(dir: &Path, train_per: usize, val_per: usize, seed: u64) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let root = SeedTree::new(seed).child("corpus");
    let mut manifest = String::from("path,label,split\n");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        for i in 0..train_per + val_per {
            let mut rng = root.index((c * 10_000 + i) as u64).rng("clip");
            let file = format!("{}_{i:03}.wav", name.to_lowercase());
            let clip = AudioClip::new(class_clip(c, &mut rng), RATE, file.clone());
            write_wav(dir.join(&file), &clip, WavEncoding::Pcm16).unwrap();
            let split = if i < train_per { "train" } else { "val" };
            manifest.push_str(&format!("{file},{name},{split}\n"));
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).unwrap();
    path
}

/// Eight isotropic unit-variance Gaussian clusters in 768 dimensions whose
/// centres lie `separation` standard deviations apart (random orthogonal-ish
/// directions at radius `separation / sqrt 2`).
pub struct Clusters {
    pub means: Vec<Vec<f32>>,
}

impl Clusters {
    pub fn new(separation: f32, seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).rng("cluster-means");
        let mut means: Vec<Vec<f32>> = Vec::new();
        for _ in 0..CLASS_NAMES.len() {
            // Gram-Schmidt keeps the pairwise distances exact.
            let mut v: Vec<f32> = (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            for m in &means {
                let dot: f32 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                let mm: f32 = m.iter().map(|a| a * a).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot / mm * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f32>().sqrt();
            let radius = separation / 2f32.sqrt();
            means.push(v.iter().map(|a| a / norm * radius).collect());
        }
        Self { means }
    }

    pub fn sample(&self, class: usize, rng: &mut Rng) -> Vec<f32> {
        self.means[class]
            .iter()
            .map(|m| {
                let z: f32 = StandardNormal.sample(rng);
                m + z
            })
            .collect()
    }

    /// Index of the nearest centre: the Bayes rule for this mixture.
    pub fn nearest(&self, x: &[f32]) -> usize {
        let d = |m: &Vec<f32>| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        (0..self.means.len())
            .min_by(|&a, &b| d(&self.means[a]).total_cmp(&d(&self.means[b])))
            .unwrap()
    }
}

/// Writes one single-frame `EMB1` file per sample plus a manifest; returns
/// the manifest path and the `(id, label, features)` rows of the val split.
pub fn write_cluster_corpus(
    dir: &Path,
    clusters: &Clusters,
    train_per: usize,
    val_per: usize,
    seed: u64,
) -> (PathBuf, Vec<(usize, Vec<f32>)>) {
    fs::create_dir_all(dir).unwrap();
    let root = SeedTree::new(seed).child("clusters");
    let mut manifest = String::from("path,label,split\n");
    let mut val = Vec::new();
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let mut rng = root.index(c as u64).rng("samples");
        for i in 0..train_per + val_per {
            let x = clusters.sample(c, &mut rng);
            let file = format!("{}_{i:03}.emb1", name.to_lowercase());
            let seq = EmbeddingSequence {
                frames: Matrix::from_vec(1, EMBEDDING_DIM, x.clone()),
                layer_tag: 1,
                source_id: file.clone(),
            };
            write_embedding_file(dir.join(&file), &seq).unwrap();
            let split = if i < train_per { "train" } else { "val" };
            if i >= train_per {
                val.push((c, x));
            }
            manifest.push_str(&format!("{file},{name},{split}\n"));
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).unwrap();
    (path, val)
}
