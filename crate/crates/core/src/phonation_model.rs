//! Asymmetric one-mass vocal fold oscillator and its glottal flow.
//!
//! Each fold obeys
//!
//! ```text
//! ẍ_r + β(1 + x_r²)ẋ_r + x_r − (Δ/2)x_r = α(ẋ_r + ẋ_l)
//! ẍ_l + β(1 + x_l²)ẋ_l + x_l + (Δ/2)x_l = α(ẋ_r + ẋ_l)
//! ```
//!
//! in dimensionless time, starting from rest at displacements `(C_r, C_l)`.
//! The glottal flow is proportional to the glottal opening
//! `2·x0 + x_l + x_r`, clamped at zero when the folds collide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse_filtering::{GlottalFlowEstimate, Provenance};
use crate::signal_io::center_and_normalize;

/// Displacements beyond this magnitude abort integration.
pub const BLOW_UP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocalFoldParams {
    /// Coupling to the subglottal pressure.
    pub alpha: f64,
    /// Lumped mass, spring and damping coefficient.
    pub beta: f64,
    /// Left/right stiffness asymmetry.
    pub delta: f64,
}

impl VocalFoldParams {
    pub const fn new(alpha: f64, beta: f64, delta: f64) -> Self {
        VocalFoldParams { alpha, beta, delta }
    }

    pub fn is_valid(&self) -> bool {
        self.alpha >= 0.0 && self.beta > 0.0 && self.delta.abs() < 2.0 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "vocal fold parameters outside alpha >= 0, beta > 0, |delta| < 2: {self:?}"
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.delta]
    }

    pub fn from_array(p: [f64; 3]) -> Self {
        VocalFoldParams::new(p[0], p[1], p[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlottalGeometry {
    /// Half the rest glottal width.
    pub x0: f64,
    pub d: f64,
    pub c_tilde: f64,
    pub area_at_glottis: f64,
    pub air_density: f64,
    pub sound_speed: f64,
}

impl Default for GlottalGeometry {
    fn default() -> Self {
        GlottalGeometry {
            x0: 0.1,
            d: 1.0,
            c_tilde: 1.0,
            area_at_glottis: 1.0,
            air_density: 1.0,
            sound_speed: 1.0,
        }
    }
}

impl GlottalGeometry {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.x0,
            self.d,
            self.c_tilde,
            self.area_at_glottis,
            self.air_density,
            self.sound_speed,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("glottal geometry must be positive: {self:?}")))
        }
    }
}

/// Initial fold displacements; both folds start at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialConditions {
    pub c_r: f64,
    pub c_l: f64,
}

impl Default for InitialConditions {
    fn default() -> Self {
        InitialConditions { c_r: 0.1, c_l: 0.1 }
    }
}

impl InitialConditions {
    pub fn state(&self) -> State {
        [self.c_r, 0.0, self.c_l, 0.0]
    }
}

/// `(x_r, v_r, x_l, v_l)`.
pub type State = [f64; 4];

/// Model settings shared by simulation and fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Starting point of every per-frame fit.
    pub initial_params: VocalFoldParams,
    pub geometry: GlottalGeometry,
    pub init: InitialConditions,
    pub rectify: bool,
    /// Model time elapsed per audio sample; one integration step per sample.
    pub dt_per_sample: f64,
    /// Extra model samples simulated past the frame; the fit compares the
    /// frame with the best-matching window.
    pub max_lag: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            initial_params: VocalFoldParams::new(0.4, 0.25, 0.0),
            geometry: GlottalGeometry::default(),
            init: InitialConditions::default(),
            rectify: true,
            dt_per_sample: 0.1,
            max_lag: 200,
        }
    }
}

/// Right-hand side of the first-order system.
pub fn derivatives(state: &State, params: &VocalFoldParams) -> Result<State> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    Ok(rhs(state, params))
}

#[inline]
pub(crate) fn rhs(s: &State, p: &VocalFoldParams) -> State {
    let [xr, vr, xl, vl] = *s;
    let drive = p.alpha * (vr + vl);
    let half = 0.5 * p.delta;
    let ar = drive - p.beta * (1.0 + xr * xr) * vr - xr + half * xr;
    let al = drive - p.beta * (1.0 + xl * xl) * vl - xl - half * xl;
    [vr, ar, vl, al]
}

#[inline]
pub(crate) fn rk4_step(y: &State, p: &VocalFoldParams, dt: f64) -> State {
    let k1 = rhs(y, p);
    let k2 = rhs(&axpy(y, 0.5 * dt, &k1), p);
    let k3 = rhs(&axpy(y, 0.5 * dt, &k2), p);
    let k4 = rhs(&axpy(y, dt, &k3), p);
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

#[inline]
pub(crate) fn axpy(y: &State, a: f64, k: &State) -> State {
    std::array::from_fn(|i| y[i] + a * k[i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldTrajectory {
    pub dt: f64,
    pub x_r: Vec<f64>,
    pub v_r: Vec<f64>,
    pub x_l: Vec<f64>,
    pub v_l: Vec<f64>,
    pub init: InitialConditions,
}

impl FoldTrajectory {
    pub fn len(&self) -> usize {
        self.x_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_r.is_empty()
    }

    pub fn state(&self, i: usize) -> State {
        [self.x_r[i], self.v_r[i], self.x_l[i], self.v_l[i]]
    }
}

/// Classic fourth-order Runge–Kutta. The returned trajectory has
/// `steps + 1` points including the initial state.
pub fn integrate_rk4(
    params: &VocalFoldParams,
    init: &InitialConditions,
    dt: f64,
    steps: usize,
) -> Result<FoldTrajectory> {
    if !(dt > 0.0) || steps == 0 {
        return Err(Error::InvalidArgument(format!("need dt > 0 and steps > 0, got {dt}, {steps}")));
    }
    let mut traj = FoldTrajectory {
        dt,
        x_r: Vec::with_capacity(steps + 1),
        v_r: Vec::with_capacity(steps + 1),
        x_l: Vec::with_capacity(steps + 1),
        v_l: Vec::with_capacity(steps + 1),
        init: *init,
    };
    let mut y = init.state();
    derivatives(&y, params)?;
    for step in 0..=steps {
        if step > 0 {
            y = rk4_step(&y, params, dt);
            if !y.iter().all(|v| v.is_finite() && v.abs() <= BLOW_UP_LIMIT) {
                return Err(Error::BlowUp { step });
            }
        }
        traj.x_r.push(y[0]);
        traj.v_r.push(y[1]);
        traj.x_l.push(y[2]);
        traj.v_l.push(y[3]);
    }
    Ok(traj)
}

/// Unnormalized flow `c̃·d·(2·x0 + x_l + x_r)`, clamped at zero if `rectify`.
pub fn raw_flow(traj: &FoldTrajectory, geom: &GlottalGeometry, rectify: bool) -> Vec<f64> {
    let scale = geom.c_tilde * geom.d;
    traj.x_r
        .iter()
        .zip(&traj.x_l)
        .map(|(xr, xl)| {
            let opening = 2.0 * geom.x0 + xl + xr;
            scale * if rectify { opening.max(0.0) } else { opening }
        })
        .collect()
}

/// Linear interpolation taps mapping `src_len` samples onto `n_out`
/// equispaced points with aligned endpoints: output `j` is
/// `(1 - frac)·src[lo] + frac·src[lo + 1]`.
pub fn interp_taps(src_len: usize, n_out: usize) -> Vec<(usize, f64)> {
    if n_out == 0 || src_len == 0 {
        return Vec::new();
    }
    if n_out == 1 || src_len == 1 {
        return vec![(0, 0.0); n_out];
    }
    let scale = (src_len - 1) as f64 / (n_out - 1) as f64;
    (0..n_out)
        .map(|j| {
            let pos = j as f64 * scale;
            let lo = (pos.floor() as usize).min(src_len - 2);
            (lo, pos - lo as f64)
        })
        .collect()
}

pub fn resample_linear(src: &[f64], n_out: usize) -> Vec<f64> {
    interp_taps(src.len(), n_out)
        .into_iter()
        .map(|(lo, frac)| {
            if frac == 0.0 {
                src[lo]
            } else {
                (1.0 - frac) * src[lo] + frac * src[lo + 1]
            }
        })
        .collect()
}

/// Model glottal flow resampled to `n_out` points, mean-removed and peak-normalized.
pub fn glottal_flow_from_traj(
    traj: &FoldTrajectory,
    geom: &GlottalGeometry,
    n_out: usize,
    rectify: bool,
    frame_index: usize,
) -> GlottalFlowEstimate {
    let mut u = resample_linear(&raw_flow(traj, geom, rectify), n_out);
    center_and_normalize(&mut u);
    GlottalFlowEstimate::new(u, Provenance::Model, frame_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LIMIT_CYCLE: VocalFoldParams = VocalFoldParams::new(0.5, 0.32, 0.0);

    fn autocorr_period(x: &[f64], min_lag: usize, max_lag: usize) -> usize {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
        (min_lag..=max_lag)
            .map(|k| {
                let r: f64 = c[..c.len() - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum();
                (k, r / (c.len() - k) as f64)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    }

    fn amplitude(x: &[f64]) -> f64 {
        let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        0.5 * (hi - lo)
    }

    #[test]
    fn derivative_examples() {
        let p = VocalFoldParams::new(0.5, 0.32, 0.0);
        assert_eq!(derivatives(&[0.0; 4], &p).unwrap(), [0.0; 4]);
        let d = derivatives(&[1.0, 0.0, 0.0, 0.0], &p).unwrap();
        assert_eq!(d, [0.0, -1.0, 0.0, 0.0]);
        let sym = derivatives(&[0.3, -0.7, 0.3, -0.7], &VocalFoldParams::new(0.9, 0.2, 0.0)).unwrap();
        assert_eq!(sym[1], sym[3]);
        assert!(matches!(
            derivatives(&[f64::NAN, 0.0, 0.0, 0.0], &p),
            Err(Error::NonFiniteState)
        ));
    }

    #[test]
    fn origin_stays_put() {
        let zero = InitialConditions { c_r: 0.0, c_l: 0.0 };
        let t = integrate_rk4(&LIMIT_CYCLE, &zero, 0.1, 100).unwrap();
        assert_eq!(t.len(), 101);
        assert!(t.x_r.iter().chain(&t.x_l).chain(&t.v_r).chain(&t.v_l).all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_limit_cycle_is_sustained() {
        let t = integrate_rk4(&LIMIT_CYCLE, &InitialConditions::default(), 1e-3, 20_000).unwrap();
        for (r, l) in t.x_r.iter().zip(&t.x_l) {
            assert!((r - l).abs() <= 1e-9 * r.abs().max(1.0));
        }
        // Growth from 0.1 to the limit cycle takes about 10 time units, so
        // stationarity is judged over 80.
        let t = integrate_rk4(&LIMIT_CYCLE, &InitialConditions::default(), 1e-3, 80_000).unwrap();
        let q = t.len() / 4;
        let a2 = amplitude(&t.x_r[q..2 * q]);
        let a4 = amplitude(&t.x_r[3 * q..]);
        assert!(a2 > 0.01 && a4 > 0.01);
        assert!((a4 - a2).abs() / a2 < 0.1, "{a2} vs {a4}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let init = InitialConditions::default();
        let horizon = 20.0;
        let end = |dt: f64| {
            let steps = (horizon / dt).round() as usize;
            let t = integrate_rk4(&LIMIT_CYCLE, &init, dt, steps).unwrap();
            t.state(steps)
        };
        let dt = 0.05;
        let reference = end(dt / 64.0);
        let err = |s: State| s.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let ratio = err(end(dt)) / err(end(dt / 2.0));
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn blow_up_reports_step() {
        let wild = VocalFoldParams::new(50.0, 1e-6, 0.0);
        let err = integrate_rk4(&wild, &InitialConditions::default(), 0.5, 100_000).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step } if step > 0));
        assert!(integrate_rk4(&wild, &InitialConditions::default(), 0.0, 10).is_err());
        assert!(integrate_rk4(&wild, &InitialConditions::default(), 0.1, 0).is_err());
    }

    #[test]
    fn velocities_consistent_with_displacements() {
        let p = VocalFoldParams::new(0.5, 0.32, 0.4);
        let dt = 1e-3;
        let t = integrate_rk4(&p, &InitialConditions::default(), dt, 5000).unwrap();
        for i in 1..t.len() - 1 {
            let fd = (t.x_r[i + 1] - t.x_r[i - 1]) / (2.0 * dt);
            assert!((fd - t.v_r[i]).abs() < 1e-4 * (1.0 + t.v_r[i].abs()));
        }
    }

    #[test]
    fn zero_trajectory_gives_zero_flow() {
        let zero = InitialConditions { c_r: 0.0, c_l: 0.0 };
        let t = integrate_rk4(&LIMIT_CYCLE, &zero, 0.1, 50).unwrap();
        let geom = GlottalGeometry::default();
        assert!(raw_flow(&t, &geom, true).iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let g = glottal_flow_from_traj(&t, &geom, 40, true, 0);
        assert!(g.samples.iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(g.provenance, Provenance::Model);
    }

    #[test]
    fn clamp_is_identity_when_glottis_open() {
        // Small damped oscillation never closes a glottis of width 0.2.
        let p = VocalFoldParams::new(0.1, 0.8, 0.3);
        let t = integrate_rk4(&p, &InitialConditions { c_r: 0.05, c_l: 0.05 }, 0.1, 300).unwrap();
        let geom = GlottalGeometry::default();
        assert_eq!(raw_flow(&t, &geom, true), raw_flow(&t, &geom, false));
    }

    #[test]
    fn flow_period_matches_fold_period() {
        let dt = 0.1;
        let t = integrate_rk4(&LIMIT_CYCLE, &InitialConditions::default(), dt, 4000).unwrap();
        let tail = 2000;
        let xr = &t.x_r[tail..];
        let flow = raw_flow(&t, &GlottalGeometry::default(), true);
        let fold_period = autocorr_period(xr, 20, 120);
        let flow_period = autocorr_period(&flow[tail..], 20, 120);
        assert!(fold_period.abs_diff(flow_period) <= 1, "{fold_period} vs {flow_period}");
    }

    #[test]
    fn resampling() {
        assert_eq!(resample_linear(&[0.0, 1.0, 2.0], 3), vec![0.0, 1.0, 2.0]);
        assert_eq!(resample_linear(&[0.0, 2.0], 3), vec![0.0, 1.0, 2.0]);
        assert_eq!(resample_linear(&[0.0, 1.0, 2.0, 3.0, 4.0], 3), vec![0.0, 2.0, 4.0]);
        assert_eq!(resample_linear(&[5.0], 2), vec![5.0, 5.0]);
    }

    #[test]
    fn asymmetry_grows_with_delta() {
        let discrepancy = |delta: f64| {
            let p = VocalFoldParams::new(0.5, 0.32, delta);
            let t = integrate_rk4(&p, &InitialConditions::default(), 0.05, 4000).unwrap();
            let scale = t.x_r.iter().chain(&t.x_l).fold(0.0_f64, |m, v| m.max(v.abs()));
            t.x_r.iter().zip(&t.x_l).fold(0.0_f64, |m, (r, l)| m.max((r - l).abs())) / scale
        };
        let d: Vec<f64> = [0.0, 0.2, 0.4, 0.8].iter().map(|&x| discrepancy(x)).collect();
        assert!(d[0] < 1e-12);
        assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
    }

    proptest! {
        #[test]
        fn origin_is_fixed_for_all_params(alpha in 0.0f64..2.0, beta in 0.01f64..3.0, delta in -1.99f64..1.99) {
            let p = VocalFoldParams::new(alpha, beta, delta);
            prop_assert!(p.is_valid());
            prop_assert_eq!(derivatives(&[0.0; 4], &p).unwrap(), [0.0; 4]);
        }

        #[test]
        fn symmetric_start_stays_symmetric(alpha in 0.0f64..0.8, beta in 0.1f64..1.0, c in -0.3f64..0.3) {
            let p = VocalFoldParams::new(alpha, beta, 0.0);
            let t = integrate_rk4(&p, &InitialConditions { c_r: c, c_l: c }, 0.05, 500).unwrap();
            for (r, l) in t.x_r.iter().zip(&t.x_l) {
                prop_assert!((r - l).abs() <= 1e-9 * r.abs().max(1.0));
            }
        }
    }
}
