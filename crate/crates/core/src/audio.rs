//! WAV decoding and sample-rate conversion into canonical mono clips.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Canonical internal sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

const PCM16_SCALE: f32 = 32768.0;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            source_id: self.source_id.clone(),
        }
    }
}

/// Sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Source identifier derived from a path: the file stem.
pub fn source_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes a 16-bit PCM or 32-bit float WAV file (mono or stereo) into a mono clip.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = match WavReader::new(BufReader::new(file)) {
        Ok(r) => r,
        Err(hound::Error::Unsupported) => return Err(unsupported(path, None)),
        Err(hound::Error::IoError(e)) => return Err(Error::io(path, e)),
        Err(e) => return Err(Error::malformed(path, e.to_string())),
    };
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(unsupported(path, Some(spec)));
    }
    if spec.sample_rate == 0 {
        return Err(Error::malformed(path, "sample rate is zero"));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(path, e.to_string()))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(path, e.to_string()))?,
        _ => return Err(unsupported(path, Some(spec))),
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(Error::malformed(path, "non-finite sample value"));
    }
    Ok(AudioClip::new(
        downmix(&interleaved, spec.channels as usize),
        spec.sample_rate,
        source_id_for(path),
    ))
}

/// Averages interleaved frames to mono.
pub fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    match channels {
        1 => interleaved.to_vec(),
        c => interleaved
            .chunks_exact(c)
            .map(|frame| frame.iter().sum::<f32>() / c as f32)
            .collect(),
    }
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::malformed(path, other.to_string()),
    };
    let mut writer = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (s * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(wrap)?;
            }
            WavEncoding::Float32 => writer.write_sample(s).map_err(wrap)?,
        }
    }
    writer.finalize().map_err(wrap)
}

/// Linear-interpolation resampler. Lossy; adequate for bringing foreign
/// corpora to the internal rate.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::Empty(format!("cannot resample empty clip {}", clip.source_id)));
    }
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let ratio = f64::from(clip.sample_rate) / f64::from(target_rate);
    let out_len =
        (src.len() as f64 * f64::from(target_rate) / f64::from(clip.sample_rate)).round() as usize;
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = pos.floor() as usize;
            if i >= last {
                return src[last];
            }
            let frac = pos - i as f64;
            let (a, b) = (f64::from(src[i]), f64::from(src[i + 1]));
            let v = (a + (b - a) * frac) as f32;
            // keep within the bracketing pair despite rounding
            v.clamp(src[i].min(src[i + 1]), src[i].max(src[i + 1]))
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Decodes and brings a file to the internal rate.
pub fn load_clip(path: impl AsRef<Path>) -> Result<AudioClip> {
    let clip = read_wav(path)?;
    if clip.sample_rate == SAMPLE_RATE || clip.is_empty() {
        Ok(clip)
    } else {
        resample_linear(&clip, SAMPLE_RATE)
    }
}

fn unsupported(path: &Path, spec: Option<WavSpec>) -> Error {
    let (tag, bits, channels) = peek_fmt_chunk(path).unwrap_or_else(|| match spec {
        Some(s) => (
            if s.sample_format == SampleFormat::Float { 3 } else { 1 },
            s.bits_per_sample,
            s.channels,
        ),
        None => (0, 0, 0),
    });
    Error::UnsupportedEncoding {
        path: path.to_path_buf(),
        format_tag: tag,
        bits,
        channels,
    }
}

/// Reads (format tag, bits per sample, channels) straight from the `fmt `
/// chunk, for error reporting on files the decoder refuses.
fn peek_fmt_chunk(path: &Path) -> Option<(u16, u16, u16)> {
    let mut bytes = Vec::new();
    File::open(path).ok()?.take(1 << 16).read_to_end(&mut bytes).ok()?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return None;
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().ok()?) as usize;
        if id == b"fmt " && off + 8 + 16 <= bytes.len() {
            let body = off + 8;
            let mut tag = u16_at(body);
            let channels = u16_at(body + 2);
            let bits = u16_at(body + 14);
            // WAVE_FORMAT_EXTENSIBLE carries the real tag in its subformat GUID
            if tag == 0xFFFE && size >= 40 && body + 26 <= bytes.len() {
                tag = u16_at(body + 24);
            }
            return Some((tag, bits, channels));
        }
        off += 8 + size + (size & 1);
    }
    None
}
