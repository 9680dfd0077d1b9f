//! Recording-level analysis: frames, inverse filtering, model fit, pairing.

use crate::adles::{fit_frames, FitOptions, FitResult};
use crate::evaluation::RecordingFrames;
use crate::exec::{self, Exec};
use crate::inverse_filtering::{iaif, GlottalFlowEstimate, IaifConfig};
use crate::s2ap::FramePair;
use crate::signal_io::{frame_signal, Recording, DEFAULT_HOP_MS, DEFAULT_WINDOW_MS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub iaif: IaifConfig,
    pub fit: FitOptions,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            window_ms: DEFAULT_WINDOW_MS,
            hop_ms: DEFAULT_HOP_MS,
            iaif: IaifConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_ms > 0.0 && self.hop_ms > 0.0 && self.window_ms.is_finite() && self.hop_ms.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "window and hop must be positive, got {} ms and {} ms",
                self.window_ms, self.hop_ms
            )));
        }
        if !(self.iaif.leak > 0.0 && self.iaif.leak < 1.0) || self.iaif.glottal_order == 0 || self.iaif.tract_order == Some(0) {
            return Err(Error::InvalidArgument(format!("invalid inverse filtering settings: {:?}", self.iaif)));
        }
        self.fit.validate()
    }
}

/// Everything computed for one recording. `flows`, `fits` and
/// `pairs.frames` are index-aligned and hold only the usable frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingAnalysis {
    pub flows: Vec<GlottalFlowEstimate>,
    pub fits: Vec<FitResult>,
    pub pairs: RecordingFrames,
    /// Frames dropped because they were silent or could not be fitted.
    pub skipped: Vec<usize>,
}

/// Frames `recording`, inverse filters every frame and fits the model to it.
/// Silent or unfittable frames are skipped; a recording with no usable frame
/// is an error.
pub fn analyze_recording(recording: &Recording, config: &AnalysisConfig, exec: Exec) -> Result<RecordingAnalysis> {
    config.validate()?;
    let frames = frame_signal(recording, config.window_ms, config.hop_ms)?;
    if frames.too_short {
        log::warn!("{}: shorter than one analysis window, zero-padded", recording.id);
    }
    let flows: Vec<GlottalFlowEstimate> =
        exec::map_range(exec, frames.len(), |i| iaif(&frames.frames[i].samples, recording.sample_rate, &config.iaif, i))
            .into_iter()
            .collect::<Result<_>>()?;

    let mut skipped = Vec::new();
    let (voiced, silent): (Vec<_>, Vec<_>) = flows.into_iter().partition(|f| !f.silent);
    skipped.extend(silent.iter().map(|f| f.frame_index));

    let mut kept_flows = Vec::with_capacity(voiced.len());
    let mut fits = Vec::with_capacity(voiced.len());
    for (flow, fit) in voiced.iter().zip(fit_frames(&voiced, &config.fit, exec)) {
        match fit {
            Ok(fit) => {
                kept_flows.push(flow.clone());
                fits.push(fit);
            }
            Err(e) => {
                log::warn!("{} frame {}: fit failed: {e}", recording.id, flow.frame_index);
                skipped.push(flow.frame_index);
            }
        }
    }
    skipped.sort_unstable();
    if fits.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no usable frames", recording.id)));
    }

    let pairs = kept_flows
        .iter()
        .zip(&fits)
        .map(|(u, fit)| {
            FramePair::new(
                u.samples.clone(),
                fit.final_flow.samples.clone(),
                recording.label,
                recording.id.clone(),
                u.frame_index,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordingAnalysis {
        flows: kept_flows,
        fits,
        pairs: RecordingFrames {
            recording_id: recording.id.clone(),
            speaker_id: recording.speaker_id.clone(),
            label: recording.label,
            frames: pairs,
        },
        skipped,
    })
}
