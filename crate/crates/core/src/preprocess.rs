//! Silence removal and peak normalization.
//!
//! The detector frames the clip, measures per-frame RMS energy in dB, and
//! marks frames above an adaptive threshold as speech. The threshold starts
//! from a low percentile of the frame energies (an estimate of the noise
//! floor) plus a margin, and is capped at `max - margin` so a clip with no
//! quiet stretch at all is kept whole.

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Frames quieter than this are silence regardless of the adaptive threshold.
const ABSOLUTE_FLOOR_DB: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadParams {
    pub frame_len: usize,
    pub hop: usize,
    pub energy_percentile_floor: f64,
    pub energy_margin_db: f64,
    pub min_region_frames: usize,
    pub merge_gap_frames: usize,
}

impl Default for VadParams {
    fn default() -> Self {
        Self {
            frame_len: 400,
            hop: 160,
            energy_percentile_floor: 0.10,
            energy_margin_db: 6.0,
            min_region_frames: 3,
            merge_gap_frames: 5,
        }
    }
}

impl VadParams {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.frame_len < self.hop {
            return Err(Error::InvalidArgument(format!(
                "VAD needs frame_len >= hop > 0 (got frame_len {}, hop {})",
                self.frame_len, self.hop
            )));
        }
        if !(0.0..=1.0).contains(&self.energy_percentile_floor) {
            return Err(Error::InvalidArgument(format!(
                "VAD percentile {} outside [0, 1]",
                self.energy_percentile_floor
            )));
        }
        if !(self.energy_margin_db >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "VAD margin {} dB must be non-negative",
                self.energy_margin_db
            )));
        }
        Ok(())
    }
}

/// Half-open sample range `[start_sample, end_sample)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeechRegion {
    pub start_sample: usize,
    pub end_sample: usize,
}

impl SpeechRegion {
    pub fn len(&self) -> usize {
        self.end_sample - self.start_sample
    }

    pub fn is_empty(&self) -> bool {
        self.end_sample <= self.start_sample
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedClip {
    pub clip: AudioClip,
    pub was_empty_after_vad: bool,
    pub vad_regions: Vec<SpeechRegion>,
}

/// Per-frame RMS energy in dB. The final frame may be partial.
pub fn frame_energies_db(samples: &[f32], frame_len: usize, hop: usize) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let n_frames = if samples.len() <= frame_len {
        1
    } else {
        (samples.len() - frame_len).div_ceil(hop) + 1
    };
    (0..n_frames)
        .map(|i| {
            let start = i * hop;
            let frame = &samples[start..(start + frame_len).min(samples.len())];
            let ms = frame.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>()
                / frame.len() as f64;
            10.0 * ms.max(1e-20).log10()
        })
        .collect()
}

pub fn detect_speech_regions(clip: &AudioClip, params: &VadParams) -> Vec<SpeechRegion> {
    let energies = frame_energies_db(&clip.samples, params.frame_len, params.hop);
    if energies.is_empty() {
        return Vec::new();
    }
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((params.energy_percentile_floor * sorted.len() as f64).ceil() as usize).max(1);
    let floor = sorted[rank - 1];
    let max = sorted[sorted.len() - 1];
    let threshold = (floor + params.energy_margin_db).min(max - params.energy_margin_db);

    let active: Vec<bool> = energies
        .iter()
        .map(|&e| e > ABSOLUTE_FLOOR_DB && e >= threshold)
        .collect();

    let mut runs = active_runs(&active);
    runs.retain(|&(a, b)| b - a >= params.min_region_frames);
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0 - last.1 < params.merge_gap_frames => last.1 = run.1,
            _ => merged.push(run),
        }
    }

    // Frame-level runs are refined to the first and last sample whose
    // magnitude reaches the threshold RMS, which places boundaries to within
    // a fraction of a period instead of a whole frame.
    let level = 10f64.powf(threshold / 20.0);
    let x = &clip.samples;
    let loud = |i: &usize| f64::from(x[*i].abs()) >= level;
    merged
        .into_iter()
        .map(|(first, end)| {
            let head = first * params.hop..(first * params.hop + params.frame_len).min(x.len());
            let last = (end - 1) * params.hop;
            let tail = last..(last + params.frame_len).min(x.len());
            let start = head.clone().find(loud).unwrap_or(head.start);
            let stop = tail.clone().rev().find(loud).map_or(tail.end, |i| i + 1);
            SpeechRegion {
                start_sample: start,
                end_sample: stop.max(start + 1),
            }
        })
        .collect()
}

/// Maximal runs of `true` as half-open `(start, end)` index pairs.
fn active_runs(active: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &a) in active.iter().enumerate() {
        match (a, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, active.len()));
    }
    runs
}

/// Keeps everything from the first region's start to the last region's end.
pub fn trim_silence(clip: &AudioClip, regions: &[SpeechRegion]) -> AudioClip {
    match (regions.first(), regions.last()) {
        (Some(first), Some(last)) => {
            let end = last.end_sample.min(clip.len());
            let start = first.start_sample.min(end);
            clip.with_samples(clip.samples[start..end].to_vec())
        }
        _ => clip.with_samples(Vec::new()),
    }
}

/// Divides by the peak magnitude. Silent clips come back unchanged.
pub fn normalize_amplitude(clip: &AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak == 0.0 {
        return clip.clone();
    }
    clip.with_samples(clip.samples.iter().map(|&s| s / peak).collect())
}

/// Detect, trim, normalize. A clip with nothing left after trimming keeps its
/// full (normalized) extent and is flagged.
pub fn preprocess(clip: &AudioClip, params: &VadParams) -> PreprocessedClip {
    let regions = detect_speech_regions(clip, params);
    let trimmed = trim_silence(clip, &regions);
    if trimmed.peak() == 0.0 {
        PreprocessedClip {
            clip: normalize_amplitude(clip),
            was_empty_after_vad: true,
            vad_regions: regions,
        }
    } else {
        PreprocessedClip {
            clip: normalize_amplitude(&trimmed),
            was_empty_after_vad: false,
            vad_regions: regions,
        }
    }
}
