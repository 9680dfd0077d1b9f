//! Glottal flow estimation from speech by iterative adaptive inverse filtering.

mod iaif;
mod lpc;

pub use iaif::{iaif, IaifConfig};
pub use lpc::{
    autocorrelate, hann_window, inverse_filter, leaky_integrate, levinson_durbin, synthesize,
    LpcModel,
};

use serde::{Deserialize, Serialize};

/// Where a glottal flow waveform came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Inverse filtering of recorded speech.
    Filter,
    /// Simulation of the vocal fold model.
    Model,
}

/// A per-frame glottal flow waveform, mean-removed and peak-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GlottalFlowEstimate {
    pub samples: Vec<f64>,
    pub provenance: Provenance,
    pub frame_index: usize,
    /// The source frame carried no energy; `samples` is all zero.
    pub silent: bool,
}

impl GlottalFlowEstimate {
    pub fn new(samples: Vec<f64>, provenance: Provenance, frame_index: usize) -> Self {
        let silent = samples.iter().all(|&v| v == 0.0);
        GlottalFlowEstimate {
            samples,
            provenance,
            frame_index,
            silent,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
