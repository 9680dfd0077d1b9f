//! Detection of voice-production anomalies from two glottal flow estimates.
//!
//! For every analysis frame of a recording the crate produces
//!
//! * `u_filter`, the glottal flow recovered from the speech by iterative
//!   adaptive inverse filtering ([`inverse_filtering`]), and
//! * `u_model`, the flow of an asymmetric one-mass vocal fold oscillator
//!   ([`phonation_model`]) whose parameters are fitted to `u_filter` by
//!   adjoint least squares ([`adles`]).
//!
//! The paired streams are classified by a small CNN with sandwiched two-step
//! attention pooling ([`s2ap`]), evaluated by speaker-stratified
//! cross-validation ([`evaluation`]). [`synth`] generates labeled cohorts with
//! planted vocal fold asymmetry so the whole chain runs without clinical data.
//!
//! Data-parallel loops go through [`exec`]; build without the default
//! `parallel` feature to drop the rayon dependency.

pub mod adles;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod inverse_filtering;
pub mod phonation_model;
pub mod pipeline;
pub mod s2ap;
pub mod signal_io;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Exec;
pub use inverse_filtering::{GlottalFlowEstimate, Provenance};
pub use signal_io::{Label, Recording, Vowel};
