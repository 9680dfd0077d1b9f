//! Synthetic voice cohorts with planted vocal fold asymmetry.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};
use crate::inverse_filtering::{synthesize, LpcModel};
use crate::phonation_model::{integrate_rk4, raw_flow, GlottalGeometry, InitialConditions, VocalFoldParams};
use crate::signal_io::{write_manifest, write_wav, Label, ManifestEntry, Recording, Vowel};
use crate::{Error, Result};

/// `(frequency Hz, bandwidth Hz)` of the two formants of each vowel preset.
pub fn vowel_formants(vowel: Vowel) -> [(f64, f64); 2] {
    match vowel {
        Vowel::A => [(730.0, 90.0), (1090.0, 110.0)],
        Vowel::I => [(270.0, 60.0), (2290.0, 120.0)],
        Vowel::U => [(300.0, 60.0), (870.0, 90.0)],
    }
}

/// All-pole vocal tract for a vowel: one conjugate pole pair per formant.
pub fn vowel_tract(vowel: Vowel, sample_rate: u32) -> LpcModel {
    all_pole_from_formants(&vowel_formants(vowel), sample_rate as f64)
}

pub fn all_pole_from_formants(formants: &[(f64, f64)], sample_rate: f64) -> LpcModel {
    // Denominator 1 + d_1 z^-1 + ... built by multiplying resonator sections.
    let mut den = vec![1.0];
    for &(freq, bw) in formants {
        let r = (-std::f64::consts::PI * bw / sample_rate).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / sample_rate;
        let section = [1.0, -2.0 * r * theta.cos(), r * r];
        let mut next = vec![0.0; den.len() + 2];
        for (i, d) in den.iter().enumerate() {
            for (j, s) in section.iter().enumerate() {
                next[i + j] += d * s;
            }
        }
        den = next;
    }
    let coefficients: Vec<f64> = den[1..].iter().map(|d| -d).collect();
    LpcModel {
        reflection: Vec::new(),
        gain: 1.0,
        coefficients,
    }
}

/// Uniform sampling box for one label's planted parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub delta: (f64, f64),
}

impl ParamRange {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("alpha", self.alpha), ("beta", self.beta), ("delta", self.delta)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        let corners = [
            VocalFoldParams::new(self.alpha.0, self.beta.0, self.delta.0),
            VocalFoldParams::new(self.alpha.1, self.beta.1, self.delta.1),
        ];
        corners.iter().try_for_each(VocalFoldParams::validate)
    }

    pub fn contains(&self, p: &VocalFoldParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| lo <= v && v <= hi;
        inside(p.alpha, self.alpha) && inside(p.beta, self.beta) && inside(p.delta, self.delta)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> VocalFoldParams {
        let mut u = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let alpha = u(self.alpha);
        let beta = u(self.beta);
        let delta = u(self.delta);
        VocalFoldParams::new(alpha, beta, delta)
    }
}

/// What the flow passes through on its way to the microphone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterChain {
    /// Vowel tract preset followed by first-difference lip radiation.
    Vowel,
    /// Neither tract nor radiation: the recording is the flow itself.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_speakers: usize,
    pub positive_fraction: f64,
    pub negative: ParamRange,
    pub positive: ParamRange,
    /// Speaker `i` uses `vowels[i % vowels.len()]`.
    pub vowels: Vec<Vowel>,
    pub filter: FilterChain,
    /// Infinite for a noiseless cohort.
    pub snr_db: f64,
    pub duration_secs: f64,
    pub sample_rate: u32,
    /// Model time per audio sample; must match the analysis setting.
    pub dt_per_sample: f64,
    /// Simulated samples discarded before the recording starts.
    pub warmup_samples: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_speakers: 20,
            positive_fraction: 0.5,
            negative: ParamRange {
                alpha: (0.45, 0.55),
                beta: (0.28, 0.36),
                delta: (0.0, 0.05),
            },
            positive: ParamRange {
                alpha: (0.4, 0.6),
                beta: (0.28, 0.36),
                delta: (1.1, 1.7),
            },
            vowels: Vowel::ALL.to_vec(),
            filter: FilterChain::Vowel,
            snr_db: 30.0,
            duration_secs: 1.0,
            sample_rate: 8000,
            dt_per_sample: 0.1,
            warmup_samples: 4000,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 4 {
            return Err(Error::InvalidArgument(format!(
                "cohort needs at least 4 speakers, got {}",
                self.n_speakers
            )));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "positive fraction must lie in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        self.negative.validate()?;
        self.positive.validate()?;
        if self.vowels.is_empty() {
            return Err(Error::InvalidArgument("no vowel presets selected".into()));
        }
        if self.snr_db.is_nan() || !(self.duration_secs > 0.0) || self.sample_rate == 0 || !(self.dt_per_sample > 0.0) {
            return Err(Error::InvalidArgument(
                "snr, duration, sample rate and dt_per_sample must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        ((self.n_speakers as f64 * self.positive_fraction).round() as usize).clamp(1, self.n_speakers - 1)
    }

    pub fn label_of(&self, index: usize) -> Label {
        if index < self.n_positive() {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn samples_per_recording(&self) -> usize {
        (self.duration_secs * self.sample_rate as f64).round() as usize
    }

    fn range_for(&self, label: Label) -> &ParamRange {
        match label {
            Label::Positive => &self.positive,
            _ => &self.negative,
        }
    }
}

/// One synthesized speaker and the parameters planted in it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpeaker {
    pub recording: Recording,
    pub params: VocalFoldParams,
    pub vowel: Vowel,
}

/// Row of `ground_truth.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub speaker_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub label: Label,
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

/// Flow → tract → radiation → noise for speaker `index`. Draws come from a
/// ChaCha stream keyed by `(seed, index)`. A blown-up or silent simulation
/// is redrawn up to 5 times.
pub fn synth_speaker(spec: &CohortSpec, index: usize, label: Label) -> Result<SynthSpeaker> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let vowel = spec.vowels[index % spec.vowels.len()];
    let n = spec.samples_per_recording();
    let range = *spec.range_for(label);

    let mut last_err = None;
    for _ in 0..=5 {
        let params = range.draw(&mut rng);
        let flow = match simulate_flow(&params, spec, n) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("{}: redrawing parameters after {e}", speaker_id(index));
                last_err = Some(e);
                continue;
            }
        };
        let mut signal = match spec.filter {
            FilterChain::Identity => flow,
            FilterChain::Vowel => {
                let speech = synthesize(&flow, &vowel_tract(vowel, spec.sample_rate));
                std::iter::once(speech[0])
                    .chain(speech.windows(2).map(|w| w[1] - w[0]))
                    .collect()
            }
        };
        if spec.snr_db.is_finite() {
            let power = signal.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let sigma = (power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in &mut signal {
                *v += noise.sample(&mut rng);
            }
        }
        let mut recording = Recording::new(format!("{}_{}", speaker_id(index), vowel.as_str()), spec.sample_rate, signal)?;
        recording.speaker_id = speaker_id(index);
        recording.label = label;
        return Ok(SynthSpeaker {
            recording,
            params,
            vowel,
        });
    }
    Err(last_err.unwrap_or(Error::ZeroEnergy))
}

/// Rectified flow after the warmup, `n` samples long: the glottal source
/// that `synth_speaker` feeds into the tract.
pub fn simulate_flow(params: &VocalFoldParams, spec: &CohortSpec, n: usize) -> Result<Vec<f64>> {
    let traj = integrate_rk4(params, &InitialConditions::default(), spec.dt_per_sample, spec.warmup_samples + n - 1)?;
    let flow = raw_flow(&traj, &GlottalGeometry::default(), true).split_off(spec.warmup_samples);
    let peak = flow.iter().fold(0.0f64, |m, v| m.max(*v));
    let floor = flow.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if peak - floor <= 1e-6 * peak.max(1e-300) {
        return Err(Error::ZeroEnergy);
    }
    Ok(flow)
}

/// Synthesizes every speaker of the cohort (speakers in parallel under
/// `exec`; output does not depend on it).
pub fn synth_cohort(spec: &CohortSpec, exec: Exec) -> Result<Vec<SynthSpeaker>> {
    spec.validate()?;
    exec::map_range(exec, spec.n_speakers, |i| synth_speaker(spec, i, spec.label_of(i)))
        .into_iter()
        .collect()
}

/// Writes one WAV per speaker plus `manifest.csv` and `ground_truth.csv`
/// into `dir`.
pub fn write_cohort(dir: &Path, speakers: &[SynthSpeaker]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(speakers.len());
    let mut truth = csv::Writer::from_path(dir.join(GROUND_TRUTH_FILE))?;
    for s in speakers {
        let file = format!("{}.wav", s.recording.id);
        write_wav(&dir.join(&file), s.recording.sample_rate, &s.recording.samples)?;
        manifest.push(ManifestEntry {
            recording_path: file.into(),
            speaker_id: s.recording.speaker_id.clone(),
            label: s.recording.label,
            vowel: Some(s.vowel),
        });
        truth.serialize(GroundTruth {
            speaker_id: s.recording.speaker_id.clone(),
            alpha: s.params.alpha,
            beta: s.params.beta,
            delta: s.params.delta,
            label: s.recording.label,
        })?;
    }
    truth.flush()?;
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

pub fn generate_cohort(spec: &CohortSpec, dir: &Path, exec: Exec) -> Result<Vec<ManifestEntry>> {
    let speakers = synth_cohort(spec, exec)?;
    write_cohort(dir, &speakers)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}
