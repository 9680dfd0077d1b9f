use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the analysis chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported encoding: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("{path}: file contains no audio samples")]
    EmptyAudio { path: PathBuf },
    #[error("{path}: malformed file: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("autocorrelation energy r0 = {0} is not positive")]
    NonPositiveEnergy(f64),
    #[error("Levinson-Durbin recursion degenerated at order {order} (prediction error {error})")]
    DegenerateLpc { order: usize, error: f64 },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite state encountered")]
    NonFiniteState,
    #[error("trajectory blew up at step {step}")]
    BlowUp { step: usize },
    #[error("model flow has zero energy")]
    ZeroEnergy,

    #[error("non-finite loss during training: {0}")]
    NonFiniteLoss(String),
    #[error("dataset must contain both labels")]
    SingleClass,
    #[error("need at least {needed} speakers for {needed}-fold split, found {found}")]
    TooFewSpeakers { needed: usize, found: usize },
    #[error("fold {fold}: speaker {speaker} appears in both train and test")]
    SpeakerLeakage { fold: usize, speaker: String },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }
}
