use serde::{Deserialize, Serialize};

use super::lpc::{autocorrelate, hann_window, inverse_filter, leaky_integrate, levinson_durbin, LpcModel};
use super::{GlottalFlowEstimate, Provenance};
use crate::error::{Error, Result};
use crate::signal_io::center_and_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IaifConfig {
    /// Vocal tract LPC order; `None` picks `round(sample_rate / 1000) + 2`.
    pub tract_order: Option<usize>,
    pub glottal_order: usize,
    /// Leaky integrator coefficient used to undo lip radiation.
    pub leak: f64,
}

impl Default for IaifConfig {
    fn default() -> Self {
        IaifConfig {
            tract_order: None,
            glottal_order: 4,
            leak: 0.99,
        }
    }
}

impl IaifConfig {
    pub fn tract_order_for(&self, sample_rate: u32) -> usize {
        self.tract_order
            .unwrap_or_else(|| (sample_rate as f64 / 1000.0).round() as usize + 2)
    }
}

// White-noise floor (-40 dB) added to r0; keeps near-periodic frames from
// being nulled outright by the tract model.
const LAG0_CONDITIONING: f64 = 1e-4;

fn windowed_lpc(x: &[f64], window: &[f64], order: usize) -> Result<LpcModel> {
    let xw: Vec<f64> = x.iter().zip(window).map(|(a, w)| a * w).collect();
    let mut r = autocorrelate(&xw, order)?;
    r[0] *= 1.0 + LAG0_CONDITIONING;
    levinson_durbin(&r, order)
}

/// Estimates the glottal flow of one speech frame.
///
/// Pipeline: a first-order glottal tilt estimate is removed, a vocal tract
/// model is fitted and inverse filtered out, and the result integrated; the
/// glottal contribution is then re-estimated at `glottal_order`, removed, and
/// a refined tract model gives the final flow after leaky integration. LPC
/// analysis uses a Hann window; filtering runs on the unwindowed frame,
/// preceded by a short ramp from `-x[0]` to `x[0]` that absorbs the filter
/// startup. The integrator's unknown initial state leaves a `c·leakⁿ` mode in
/// the output, which is fitted past the startup span and removed together
/// with the mean.
pub fn iaif(
    frame: &[f64],
    sample_rate: u32,
    config: &IaifConfig,
    frame_index: usize,
) -> Result<GlottalFlowEstimate> {
    let p = config.tract_order_for(sample_rate);
    if frame.len() < 2 * (p + 1) {
        return Err(Error::InvalidArgument(format!(
            "frame of {} samples is too short for tract order {p}",
            frame.len()
        ))
        .at_frame(frame_index));
    }
    if frame.iter().all(|&v| v == 0.0) {
        return Ok(GlottalFlowEstimate::new(
            vec![0.0; frame.len()],
            Provenance::Filter,
            frame_index,
        ));
    }
    let leak = config.leak;
    let window = hann_window(frame.len());
    let pad = p + 1;
    let padded: Vec<f64> = (0..pad)
        .map(|i| frame[0] * (2.0 * i as f64 / (pad - 1) as f64 - 1.0))
        .chain(frame.iter().copied())
        .collect();
    let body = |x: &[f64]| x[pad..].to_vec();
    let run = || -> Result<Vec<f64>> {
        let tilt = windowed_lpc(frame, &window, 1)?;
        let tract_only = inverse_filter(&padded, &tilt);
        let tract = windowed_lpc(&body(&tract_only), &window, p)?;
        let flow1 = leaky_integrate(&inverse_filter(&padded, &tract), leak);

        let glottal = windowed_lpc(&body(&flow1), &window, config.glottal_order)?;
        let tract_only2 = leaky_integrate(&inverse_filter(&padded, &glottal), leak);
        let tract2 = windowed_lpc(&body(&tract_only2), &window, p)?;
        Ok(body(&leaky_integrate(&inverse_filter(&padded, &tract2), leak)))
    };
    let mut flow = run().map_err(|e| e.at_frame(frame_index))?;
    remove_integrator_mode(&mut flow, leak, pad);
    center_and_normalize(&mut flow);
    Ok(GlottalFlowEstimate::new(flow, Provenance::Filter, frame_index))
}

/// Removes `c0 + c1·leakⁿ` from `x`, with the coefficients fitted on `x[skip..]`.
fn remove_integrator_mode(x: &mut [f64], leak: f64, skip: usize) {
    let mode: Vec<f64> = std::iter::successors(Some(1.0), |v| Some(v * leak))
        .take(x.len())
        .collect();
    let (xs, ms) = (&x[skip..], &mode[skip..]);
    let n = xs.len() as f64;
    let se: f64 = ms.iter().sum();
    let see: f64 = ms.iter().map(|v| v * v).sum();
    let sy: f64 = xs.iter().sum();
    let sey: f64 = xs.iter().zip(ms).map(|(a, b)| a * b).sum();
    let det = n * see - se * se;
    if det.abs() <= 1e-12 * n * see {
        return;
    }
    let c0 = (see * sy - se * sey) / det;
    let c1 = (n * sey - se * sy) / det;
    x.iter_mut().zip(&mode).for_each(|(v, e)| *v -= c0 + c1 * e);
}
