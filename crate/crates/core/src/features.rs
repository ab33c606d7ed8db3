//! Log-mel spectrogram featurization.
//!
//! Conventions: periodic Hann window, centered frames with reflect padding,
//! power spectrogram, Slaney mel scale with area-normalized triangles, dB
//! relative to the per-spectrogram maximum with an 80 dB floor, and finally
//! per-spectrogram min-max scaling to [0, 1].

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Temporal lengths used by the two spectrogram CNN variants.
pub const LONG_FRAMES: usize = 150;
pub const SHORT_FRAMES: usize = 85;

const POWER_EPS: f64 = 1e-10;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelSpecParams {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub center: bool,
    pub power: f64,
    /// Dynamic range kept below the spectrogram maximum, in dB.
    pub top_db: f64,
}

impl Default for MelSpecParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 128,
            n_fft: 512,
            hop: 256,
            center: true,
            power: 2.0,
            top_db: 80.0,
        }
    }
}

impl MelSpecParams {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.n_fft < self.hop {
            return Err(Error::InvalidArgument(format!(
                "need n_fft >= hop > 0 (n_fft {}, hop {})",
                self.n_fft, self.hop
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.n_bins() {
            return Err(Error::InvalidArgument(format!(
                "n_mels {} must be in 1..={}",
                self.n_mels,
                self.n_bins()
            )));
        }
        if self.sample_rate == 0 || !(self.power > 0.0) || !(self.top_db >= 0.0) {
            return Err(Error::InvalidArgument("invalid mel spectrogram parameters".into()));
        }
        Ok(())
    }

    /// Number of frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if self.center {
            1 + len / self.hop
        } else if len >= self.n_fft {
            1 + (len - self.n_fft) / self.hop
        } else {
            0
        }
    }
}

/// Normalized log-mel spectrogram, `n_mels` rows (frequency) by T columns (time).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix<f32>,
    pub source_id: String,
    /// Column count before any length fixing.
    pub original_t: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.cols
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Slaney-style triangular filterbank, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(params: &MelSpecParams) -> Result<Matrix<f64>> {
    params.validate()?;
    let n_bins = params.n_bins();
    let nyquist = f64::from(params.sample_rate) / 2.0;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| nyquist * k as f64 / (n_bins - 1) as f64)
        .collect();
    let mel_max = hz_to_mel(nyquist);
    let points = params.n_mels + 2;
    let mel_f: Vec<f64> = (0..points)
        .map(|i| mel_to_hz(mel_max * i as f64 / (points - 1) as f64))
        .collect();

    let mut fb = Matrix::<f64>::zeros(params.n_mels, n_bins);
    for m in 0..params.n_mels {
        let (lo, mid, hi) = (mel_f[m], mel_f[m + 1], mel_f[m + 2]);
        let enorm = 2.0 / (hi - lo);
        let mut any = false;
        for (k, &f) in fft_freqs.iter().enumerate() {
            let lower = (f - lo) / (mid - lo);
            let upper = (hi - f) / (hi - mid);
            let w = lower.min(upper).max(0.0);
            if w > 0.0 {
                any = true;
                fb.set(m, k, w * enorm);
            }
        }
        if !any {
            return Err(Error::EmptyMelFilter { index: m });
        }
    }
    Ok(fb)
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a reflect-padded signal (edge sample not repeated).
fn reflect_index(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = idx.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Reusable STFT and mel projection for one parameter set.
pub struct MelFeaturizer {
    params: MelSpecParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Matrix<f64>,
    /// Non-zero column range of each filter.
    support: Vec<(usize, usize)>,
}

impl MelFeaturizer {
    pub fn new(params: MelSpecParams) -> Result<Self> {
        let filterbank = mel_filterbank(&params)?;
        let support = (0..filterbank.rows)
            .map(|m| {
                let row = filterbank.row(m);
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, last + 1)
            })
            .collect();
        Ok(Self {
            window: hann_periodic(params.n_fft),
            fft: FftPlanner::new().plan_fft_forward(params.n_fft),
            params,
            filterbank,
            support,
        })
    }

    pub fn params(&self) -> &MelSpecParams {
        &self.params
    }

    pub fn filterbank(&self) -> &Matrix<f64> {
        &self.filterbank
    }

    /// Power STFT, `(n_fft/2 + 1) × T`.
    pub fn stft_power(&self, clip: &AudioClip) -> Result<Matrix<f64>> {
        let p = &self.params;
        if clip.sample_rate != p.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "clip {} is at {} Hz, featurizer expects {} Hz",
                clip.source_id, clip.sample_rate, p.sample_rate
            )));
        }
        if clip.is_empty() {
            return Err(Error::Empty(format!("clip {} has no samples", clip.source_id)));
        }
        let x = &clip.samples;
        let n_frames = p.frames_for(x.len());
        let n_bins = p.n_bins();
        let pad = if p.center { (p.n_fft / 2) as isize } else { 0 };
        let mut out = Matrix::<f64>::zeros(n_bins, n_frames);
        let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let origin = (t * p.hop) as isize - pad;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = reflect_index(origin + i as isize, x.len());
                *slot = Complex::new(f64::from(x[idx]) * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(n_bins).enumerate() {
                let mag2 = c.norm_sqr();
                let v = if p.power == 2.0 { mag2 } else { mag2.sqrt().powf(p.power) };
                out.set(k, t, v);
            }
        }
        Ok(out)
    }

    /// Mel projection of a power spectrogram.
    pub fn mel_power(&self, power: &Matrix<f64>) -> Matrix<f64> {
        let frames = power.cols;
        let mut mel = Matrix::<f64>::zeros(self.params.n_mels, frames);
        for m in 0..self.params.n_mels {
            let (lo, hi) = self.support[m];
            let weights = self.filterbank.row(m);
            for k in lo..hi {
                let w = weights[k];
                let src = power.row(k);
                let dst = &mut mel.data[m * frames..(m + 1) * frames];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        mel
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let power = self.stft_power(clip)?;
        let mel = self.mel_power(&power);
        let values = normalize_db(&mel, self.params.top_db);
        Ok(MelSpectrogram {
            original_t: values.cols,
            values,
            source_id: clip.source_id.clone(),
        })
    }
}

/// dB conversion against the matrix maximum, floor at `top_db` below it, then
/// min-max scaling. A constant matrix maps to zeros.
fn normalize_db(mel: &Matrix<f64>, top_db: f64) -> Matrix<f32> {
    let db: Vec<f64> = mel.data.iter().map(|&s| 10.0 * s.max(POWER_EPS).log10()).collect();
    let reference = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = reference - top_db;
    let clamped: Vec<f64> = db.iter().map(|&v| v.max(floor)).collect();
    let lo = clamped.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = reference - lo;
    let data = if range > 0.0 {
        clamped.iter().map(|&v| ((v - lo) / range) as f32).collect()
    } else {
        vec![0.0; clamped.len()]
    };
    Matrix::from_vec(mel.rows, mel.cols, data)
}

pub fn stft_power(clip: &AudioClip, params: &MelSpecParams) -> Result<Matrix<f64>> {
    MelFeaturizer::new(*params)?.stft_power(clip)
}

pub fn mel_spectrogram(clip: &AudioClip, params: &MelSpecParams) -> Result<MelSpectrogram> {
    MelFeaturizer::new(*params)?.compute(clip)
}

/// Pads with zero columns or truncates to exactly `target_t` columns.
pub fn fix_length(spec: &MelSpectrogram, target_t: usize) -> MelSpectrogram {
    let m = &spec.values;
    if m.cols == target_t {
        return spec.clone();
    }
    let mut out = Matrix::<f32>::zeros(m.rows, target_t);
    let keep = m.cols.min(target_t);
    for r in 0..m.rows {
        out.data[r * target_t..r * target_t + keep].copy_from_slice(&m.row(r)[..keep]);
    }
    MelSpectrogram {
        values: out,
        source_id: spec.source_id.clone(),
        original_t: spec.original_t,
    }
}

/// Smallest length `L` such that at least a fraction `q` of `lengths` are `<= L`.
pub fn temporal_bin_quantile(lengths: &[usize], q: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::Empty("no spectrogram lengths".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside (0, 1]")));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let idx = (0..sorted.len())
        .find(|&i| (i + 1) as f64 / n >= q)
        .unwrap_or(sorted.len() - 1);
    Ok(sorted[idx])
}

const MAT1_MAGIC: &[u8; 4] = b"MAT1";

pub fn encode_mat1(m: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.data.len());
    out.extend_from_slice(MAT1_MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mat1(bytes: &[u8], path: &Path) -> Result<Matrix<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAT1_MAGIC {
        return Err(Error::malformed(path, "missing MAT1 magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * rows * cols {
        return Err(Error::malformed(
            path,
            format!("expected {} bytes of data for {rows}x{cols}, found {}", 4 * rows * cols, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_mat1(path: impl AsRef<Path>, m: &Matrix<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_mat1(m)).map_err(|e| Error::io(path, e))
}

pub fn read_mat1(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mat1(&bytes, path)
}
