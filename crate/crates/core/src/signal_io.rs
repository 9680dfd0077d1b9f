//! Recordings, WAV I/O, framing, and the cohort manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_MS: f64 = 50.0;
pub const DEFAULT_HOP_MS: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    /// Binary target for training; `None` for unknown.
    pub fn as_target(self) -> Option<u8> {
        match self {
            Label::Positive => Some(1),
            Label::Negative => Some(0),
            Label::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            "unknown" | "" => Ok(Label::Unknown),
            other => Err(Error::InvalidArgument(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vowel {
    A,
    I,
    U,
}

impl Vowel {
    pub const ALL: [Vowel; 3] = [Vowel::A, Vowel::I, Vowel::U];

    pub fn as_str(self) -> &'static str {
        match self {
            Vowel::A => "a",
            Vowel::I => "i",
            Vowel::U => "u",
        }
    }
}

impl FromStr for Vowel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Vowel::A),
            "i" => Ok(Vowel::I),
            "u" => Ok(Vowel::U),
            other => Err(Error::InvalidArgument(format!("unknown vowel {other:?}"))),
        }
    }
}

/// A mono recording, peak-normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub speaker_id: String,
    pub label: Label,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Recording {
    /// Builds a recording, peak-normalizing `samples`.
    pub fn new(id: impl Into<String>, sample_rate: u32, mut samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("recording has no samples".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("recording has non-finite samples".into()));
        }
        peak_normalize(&mut samples);
        Ok(Recording {
            id: id.into(),
            speaker_id: "unknown".into(),
            label: Label::Unknown,
            sample_rate,
            samples,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Scales `x` in place so that its peak absolute value is 1. Silent input is left untouched.
pub fn peak_normalize(x: &mut [f64]) {
    let peak = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
}

/// Mean-removes and peak-normalizes `x` in place. A signal whose centered
/// peak is below `1e-12` of its original peak is treated as constant and
/// zeroed, so rounding residue is never amplified.
pub fn center_and_normalize(x: &mut [f64]) {
    let before = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    remove_mean(x);
    let after = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if after <= CONSTANT_TOLERANCE * before {
        x.iter_mut().for_each(|v| *v = 0.0);
    } else {
        x.iter_mut().for_each(|v| *v /= after);
    }
}

/// Best Pearson correlation of `a[n]` with `b[n + lag]` over
/// `|lag| <= max_lag`, computed on the overlapping samples. Returns
/// `(lag, correlation)`; overlaps shorter than 2 samples or with a constant
/// side are skipped, and `(0, 0.0)` is returned if none remain.
pub fn max_normalized_xcorr(a: &[f64], b: &[f64], max_lag: usize) -> (isize, f64) {
    let mut best = (0, 0.0);
    let mut found = false;
    let max_lag = max_lag as isize;
    for lag in -max_lag..=max_lag {
        let (xa, xb) = if lag >= 0 {
            let l = lag as usize;
            if l >= b.len() {
                continue;
            }
            let n = a.len().min(b.len() - l);
            (&a[..n], &b[l..l + n])
        } else {
            let l = (-lag) as usize;
            if l >= a.len() {
                continue;
            }
            let n = b.len().min(a.len() - l);
            (&a[l..l + n], &b[..n])
        };
        if xa.len() < 2 {
            continue;
        }
        let n = xa.len() as f64;
        let (ma, mb) = (xa.iter().sum::<f64>() / n, xb.iter().sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in xa.iter().zip(xb) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        if saa <= 0.0 || sbb <= 0.0 {
            continue;
        }
        let r = sab / (saa * sbb).sqrt();
        if !found || r > best.1 {
            best = (lag, r);
            found = true;
        }
    }
    best
}

pub(crate) const CONSTANT_TOLERANCE: f64 = 1e-12;

/// Subtracts the mean of `x` in place.
pub fn remove_mean(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// Reads a PCM WAV file (integer 8/16/24/32-bit or 32-bit float), mixing
/// down to mono. Speaker and label stay `unknown` until set from a manifest.
pub fn load_wav(path: &Path) -> Result<Recording> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Malformed {
            path: path.into(),
            detail: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::UnsupportedEncoding {
                    path: path.into(),
                    detail: format!("{}-bit float", spec.bits_per_sample),
                });
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio { path: path.into() });
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Recording::new(id, spec.sample_rate, mono).map_err(|e| match e {
        Error::InvalidArgument(detail) => Error::Malformed {
            path: path.into(),
            detail,
        },
        other => other,
    })
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::Unreadable {
            path: path.into(),
            source,
        },
        hound::Error::Unsupported | hound::Error::InvalidSampleFormat | hound::Error::TooWide => {
            Error::UnsupportedEncoding {
                path: path.into(),
                detail: e.to_string(),
            }
        }
        other => Error::Malformed {
            path: path.into(),
            detail: other.to_string(),
        },
    }
}

/// Writes a mono 16-bit PCM WAV.
pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Malformed {
            path: path.into(),
            detail: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub start: usize,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub recording_id: String,
    pub window_len: usize,
    pub hop: usize,
    pub frames: Vec<Frame>,
    /// Set when the signal was shorter than one window.
    pub too_short: bool,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Number of full windows of `window` samples at stride `hop` in a signal of `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || window == 0 || hop == 0 {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Slices a recording into mean-removed sliding windows.
pub fn frame_signal(recording: &Recording, window_ms: f64, hop_ms: f64) -> Result<FrameSequence> {
    if !(window_ms > 0.0 && hop_ms > 0.0 && window_ms >= hop_ms) {
        return Err(Error::InvalidArgument(format!(
            "need window_ms >= hop_ms > 0, got {window_ms}/{hop_ms}"
        )));
    }
    let sr = recording.sample_rate as f64;
    let window_len = (window_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    if window_len == 0 || hop == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window_ms} ms / hop {hop_ms} ms round to zero samples at {sr} Hz"
        )));
    }
    let n = frame_count(recording.samples.len(), window_len, hop);
    let frames = (0..n)
        .map(|i| {
            let start = i * hop;
            let mut samples = recording.samples[start..start + window_len].to_vec();
            remove_mean(&mut samples);
            Frame { start, samples }
        })
        .collect();
    let too_short = recording.samples.len() < window_len;
    if too_short {
        log::warn!(
            "{}: {} samples is shorter than one {}-sample window",
            recording.id,
            recording.samples.len(),
            window_len
        );
    }
    Ok(FrameSequence {
        recording_id: recording.id.clone(),
        window_len,
        hop,
        frames,
        too_short,
    })
}

/// One row of the cohort manifest (`recording_path,speaker_id,label,vowel`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub recording_path: PathBuf,
    pub speaker_id: String,
    pub label: Label,
    #[serde(with = "vowel_field")]
    pub vowel: Option<Vowel>,
}

mod vowel_field {
    use super::Vowel;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vowel>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.map(Vowel::as_str).unwrap_or(""))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vowel>, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

/// Reads a manifest. Relative recording paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["recording_path", "speaker_id", "label", "vowel"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Malformed {
            path: path.into(),
            detail: format!("manifest header must be {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let mut entry: ManifestEntry = row?;
        if entry.label == Label::Unknown {
            return Err(Error::Malformed {
                path: path.into(),
                detail: format!("{}: label must be positive or negative", entry.speaker_id),
            });
        }
        if entry.recording_path.is_relative() {
            entry.recording_path = base.join(&entry.recording_path);
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the recording named by a manifest row and attaches its metadata.
pub fn load_entry(entry: &ManifestEntry) -> Result<Recording> {
    let mut rec = load_wav(&entry.recording_path)?;
    rec.speaker_id = entry.speaker_id.clone();
    rec.label = entry.label;
    Ok(rec)
}
