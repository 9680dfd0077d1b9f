//! Per-frame least-squares fitting of the vocal fold parameters.
//!
//! The objective compares the inverse-filtered flow `u_filter` with the
//! model flow after mean removal and an optimal amplitude scale:
//!
//! ```text
//! J(α, β, Δ) = (1/N) Σ_n (u_filter[n] − s*·u_model[n])²,   s* = ⟨u_filter, u_model⟩ / ⟨u_model, u_model⟩
//! ```
//!
//! Gradients come from the discrete adjoint of the RK4 scheme: the reverse
//! sweep differentiates every Runge–Kutta stage exactly, so the gradient is
//! that of the discretized objective to rounding error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::inverse_filtering::{GlottalFlowEstimate, Provenance};
use crate::phonation_model::{
    axpy, integrate_rk4, interp_taps, raw_flow, rhs, FoldTrajectory, ModelConfig, State,
    VocalFoldParams,
};
use crate::signal_io::{center_and_normalize, CONSTANT_TOLERANCE};

/// Lower bound on β and upper bound on |Δ| used when projecting iterates.
pub const BETA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1.99;

/// Closed-form least-squares amplitude `argmin_s Σ (u_filter − s·u_model)²`.
pub fn scale_align(u_filter: &[f64], u_model: &[f64]) -> Result<f64> {
    check_lengths(u_filter, u_model)?;
    let mm = dot(u_model, u_model);
    if mm == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    Ok(dot(u_filter, u_model) / mm)
}

/// Mean squared difference, optionally after scaling `u_model` by [`scale_align`].
pub fn residual_objective(u_filter: &[f64], u_model: &[f64], align: bool) -> Result<f64> {
    check_lengths(u_filter, u_model)?;
    if u_filter.is_empty() {
        return Ok(0.0);
    }
    let s = if align { scale_align(u_filter, u_model)? } else { 1.0 };
    let sse: f64 = u_filter
        .iter()
        .zip(u_model)
        .map(|(a, b)| (a - s * b).powi(2))
        .sum();
    Ok(sse / u_filter.len() as f64)
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The flow-matching objective for one frame.
///
/// With `model.max_lag = L > 0` the model stream is `N + L` samples long and
/// the target is compared with the best-matching length-`N` window of it, so
/// the fixed initial conditions do not pin the oscillation phase. The chosen
/// lag is piecewise constant in the parameters and drops out of the gradient
/// like the amplitude scale does.
#[derive(Debug, Clone)]
pub struct FlowObjective<'a> {
    target: &'a [f64],
    model: ModelConfig,
    steps: usize,
}

struct Aligned {
    lag: usize,
    /// Chosen window, mean removed.
    window: Vec<f64>,
    scale: f64,
    loss: f64,
}

impl<'a> FlowObjective<'a> {
    /// One integration step per model sample.
    pub fn new(target: &'a [f64], model: ModelConfig) -> Self {
        let steps = (target.len() + model.max_lag).saturating_sub(1).max(1);
        Self::with_steps(target, model, steps)
    }

    /// Simulates `steps` steps and resamples onto `target.len() + max_lag`
    /// points.
    pub fn with_steps(target: &'a [f64], model: ModelConfig, steps: usize) -> Self {
        FlowObjective { target, model, steps }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    fn stream_len(&self) -> usize {
        self.target.len() + self.model.max_lag
    }

    /// Best window of the resampled model stream.
    fn align(&self, stream: &[f64]) -> Result<Aligned> {
        let n = self.target.len();
        let nf = n as f64;
        let u = self.target;
        let su: f64 = u.iter().sum();
        let mut best: Option<(usize, f64)> = None;
        for lag in 0..=self.model.max_lag {
            let w = &stream[lag..lag + n];
            let s1: f64 = w.iter().sum();
            let s2: f64 = dot(w, w);
            let mm = s2 - s1 * s1 / nf;
            if !(mm > 1e-12 * s2) {
                continue;
            }
            let c = dot(u, w) - s1 * su / nf;
            let explained = c * c / mm;
            if best.is_none_or(|(_, e)| explained > e) {
                best = Some((lag, explained));
            }
        }
        let lag = best.ok_or(Error::ZeroEnergy)?.0;
        let mut window = stream[lag..lag + n].to_vec();
        let peak_before = window.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mean = window.iter().sum::<f64>() / nf;
        window.iter_mut().for_each(|v| *v -= mean);
        let peak_after = window.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mm = dot(&window, &window);
        if peak_after <= CONSTANT_TOLERANCE * peak_before || mm == 0.0 {
            return Err(Error::ZeroEnergy);
        }
        let scale = dot(u, &window) / mm;
        let loss = u.iter().zip(&window).map(|(a, b)| (a - scale * b).powi(2)).sum::<f64>() / nf;
        Ok(Aligned {
            lag,
            window,
            scale,
            loss,
        })
    }

    fn simulate(&self, params: &VocalFoldParams) -> Result<(FoldTrajectory, Vec<f64>, Vec<(usize, f64)>, Vec<f64>)> {
        let m = &self.model;
        let traj = integrate_rk4(params, &m.init, m.dt_per_sample, self.steps)?;
        let raw = raw_flow(&traj, &m.geometry, m.rectify);
        let taps = interp_taps(raw.len(), self.stream_len());
        let stream = taps
            .iter()
            .map(|&(lo, f)| if f == 0.0 { raw[lo] } else { (1.0 - f) * raw[lo] + f * raw[lo + 1] })
            .collect();
        Ok((traj, raw, taps, stream))
    }

    /// The aligned model flow: the chosen window, mean-removed and
    /// peak-normalized.
    pub fn model_flow(&self, params: &VocalFoldParams) -> Result<GlottalFlowEstimate> {
        let (_, _, _, stream) = self.simulate(params)?;
        let mut window = match self.align(&stream) {
            Ok(a) => a.window,
            Err(_) => stream[..self.target.len()].to_vec(),
        };
        center_and_normalize(&mut window);
        Ok(GlottalFlowEstimate::new(window, Provenance::Model, 0))
    }

    /// Lag of the best-matching model window.
    pub fn best_lag(&self, params: &VocalFoldParams) -> Result<usize> {
        let (_, _, _, stream) = self.simulate(params)?;
        Ok(self.align(&stream)?.lag)
    }

    /// Objective value by full simulation.
    pub fn value(&self, params: &VocalFoldParams) -> Result<f64> {
        let (_, _, _, stream) = self.simulate(params)?;
        Ok(self.align(&stream)?.loss)
    }

    /// Objective value and its gradient with respect to `(α, β, Δ)`.
    pub fn value_and_gradient(&self, params: &VocalFoldParams) -> Result<(f64, [f64; 3])> {
        let m = &self.model;
        let dt = m.dt_per_sample;
        let (traj, raw, taps, stream) = self.simulate(params)?;
        let Aligned {
            lag,
            window,
            scale: s,
            loss,
        } = self.align(&stream)?;
        let n = self.target.len();
        let inv_n = 1.0 / n as f64;

        // dJ/dwindow; s is optimal so its own variation drops out.
        let mut g: Vec<f64> = self
            .target
            .iter()
            .zip(&window)
            .map(|(u, v)| -2.0 * inv_n * s * (u - s * v))
            .collect();
        let gmean = g.iter().sum::<f64>() * inv_n;
        g.iter_mut().for_each(|v| *v -= gmean);

        let mut g_raw = vec![0.0; raw.len()];
        for (&(lo, f), gj) in taps[lag..lag + n].iter().zip(&g) {
            g_raw[lo] += (1.0 - f) * gj;
            if f != 0.0 {
                g_raw[lo + 1] += f * gj;
            }
        }
        let geom = &m.geometry;
        let flow_scale = geom.c_tilde * geom.d;
        let source = |k: usize| -> f64 {
            let open = 2.0 * geom.x0 + traj.x_l[k] + traj.x_r[k];
            if m.rectify && open <= 0.0 {
                0.0
            } else {
                flow_scale * g_raw[k]
            }
        };

        let mut grad = [0.0; 3];
        let last = traj.len() - 1;
        let mut lam: State = {
            let d = source(last);
            [d, 0.0, d, 0.0]
        };
        for k in (0..last).rev() {
            lam = rk4_step_vjp(&traj.state(k), params, dt, &lam, &mut grad);
            let d = source(k);
            lam[0] += d;
            lam[2] += d;
        }
        Ok((loss, grad))
    }
}

/// Vector-Jacobian product of `rhs` at state `s`: returns `wᵀ ∂f/∂y` and
/// accumulates `wᵀ ∂f/∂p` into `gp`.
#[inline]
fn rhs_vjp(s: &State, p: &VocalFoldParams, w: &State, gp: &mut [f64; 3]) -> State {
    let [xr, vr, xl, vl] = *s;
    let half = 0.5 * p.delta;
    let xr_bar = w[1] * (-2.0 * p.beta * xr * vr - 1.0 + half);
    let vr_bar = w[0] + w[1] * (p.alpha - p.beta * (1.0 + xr * xr)) + w[3] * p.alpha;
    let xl_bar = w[3] * (-2.0 * p.beta * xl * vl - 1.0 - half);
    let vl_bar = w[2] + w[1] * p.alpha + w[3] * (p.alpha - p.beta * (1.0 + xl * xl));
    gp[0] += (w[1] + w[3]) * (vr + vl);
    gp[1] -= w[1] * (1.0 + xr * xr) * vr + w[3] * (1.0 + xl * xl) * vl;
    gp[2] += 0.5 * (w[1] * xr - w[3] * xl);
    [xr_bar, vr_bar, xl_bar, vl_bar]
}

/// Reverse-mode sweep through one RK4 step starting at `y`, given the
/// adjoint `lam_next` of the step's output.
#[inline]
fn rk4_step_vjp(y: &State, p: &VocalFoldParams, dt: f64, lam_next: &State, gp: &mut [f64; 3]) -> State {
    let k1 = rhs(y, p);
    let y2 = axpy(y, 0.5 * dt, &k1);
    let k2 = rhs(&y2, p);
    let y3 = axpy(y, 0.5 * dt, &k2);
    let k3 = rhs(&y3, p);
    let y4 = axpy(y, dt, &k3);

    let mut lam = *lam_next;
    let k4_bar: State = std::array::from_fn(|i| dt / 6.0 * lam_next[i]);
    let mut k3_bar: State = std::array::from_fn(|i| dt / 3.0 * lam_next[i]);
    let mut k2_bar: State = k3_bar;
    let mut k1_bar: State = k4_bar;

    let y4_bar = rhs_vjp(&y4, p, &k4_bar, gp);
    for i in 0..4 {
        lam[i] += y4_bar[i];
        k3_bar[i] += dt * y4_bar[i];
    }
    let y3_bar = rhs_vjp(&y3, p, &k3_bar, gp);
    for i in 0..4 {
        lam[i] += y3_bar[i];
        k2_bar[i] += 0.5 * dt * y3_bar[i];
    }
    let y2_bar = rhs_vjp(&y2, p, &k2_bar, gp);
    for i in 0..4 {
        lam[i] += y2_bar[i];
        k1_bar[i] += 0.5 * dt * y2_bar[i];
    }
    let y1_bar = rhs_vjp(y, p, &k1_bar, gp);
    for i in 0..4 {
        lam[i] += y1_bar[i];
    }
    lam
}

/// Adjoint gradient of the flow objective for `u_filter` under `model`,
/// simulated for `steps` steps.
pub fn adjoint_gradient(
    params: &VocalFoldParams,
    u_filter: &[f64],
    model: &ModelConfig,
    steps: usize,
) -> Result<[f64; 3]> {
    FlowObjective::with_steps(u_filter, *model, steps)
        .value_and_gradient(params)
        .map(|(_, g)| g)
}

/// Central differences of an arbitrary objective over `(α, β, Δ)`.
pub fn finite_diff_gradient<F>(objective: F, params: &VocalFoldParams, h: f64) -> Result<[f64; 3]>
where
    F: Fn(&VocalFoldParams) -> Result<f64>,
{
    let base = params.as_array();
    let mut grad = [0.0; 3];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        let jp = objective(&VocalFoldParams::from_array(plus))?;
        let jm = objective(&VocalFoldParams::from_array(minus))?;
        *g = (jp - jm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference gradient of the flow objective by full re-simulation.
pub fn flow_finite_diff_gradient(
    params: &VocalFoldParams,
    u_filter: &[f64],
    model: &ModelConfig,
    steps: usize,
    h: f64,
) -> Result<[f64; 3]> {
    let obj = FlowObjective::with_steps(u_filter, *model, steps);
    finite_diff_gradient(|p| obj.value(p), params, h)
}

/// How the descent direction is formed from the adjoint gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Descent {
    /// Plain steepest descent.
    Steepest,
    /// Gradient preconditioned by a BFGS inverse-Hessian estimate.
    #[default]
    Bfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub model: ModelConfig,
    pub descent: Descent,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub armijo: f64,
    pub shrink: f64,
    /// Length of the first trial step in parameter space.
    pub initial_step: f64,
    pub max_backtracks: usize,
    /// `Δ = 0` is a stationary point of the objective when both folds start
    /// alike; a start with `|Δ|` below this is moved to `+symmetry_break`.
    pub symmetry_break: f64,
    /// Start each frame from the previous frame's solution.
    pub warm_start: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            model: ModelConfig::default(),
            descent: Descent::Bfgs,
            grad_tol: 1e-6,
            rel_tol: 1e-8,
            max_iters: 500,
            armijo: 1e-4,
            shrink: 0.5,
            initial_step: 0.1,
            max_backtracks: 30,
            symmetry_break: 0.05,
            warm_start: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        self.model.initial_params.validate()?;
        self.model.geometry.validate()?;
        let positive = [
            ("grad_tol", self.grad_tol),
            ("rel_tol", self.rel_tol),
            ("initial_step", self.initial_step),
            ("dt_per_sample", self.model.dt_per_sample),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "armijo and shrink must lie in (0, 1), got {} and {}",
                self.armijo, self.shrink
            )));
        }
        if !(self.symmetry_break >= 0.0 && self.symmetry_break < DELTA_MAX) {
            return Err(Error::InvalidArgument(format!("symmetry_break out of range: {}", self.symmetry_break)));
        }
        if !(self.model.init.c_r.is_finite() && self.model.init.c_l.is_finite()) {
            return Err(Error::InvalidArgument("initial displacements must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: VocalFoldParams,
    pub loss: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_flow: GlottalFlowEstimate,
}

pub fn project(p: [f64; 3]) -> [f64; 3] {
    [p[0].max(0.0), p[1].max(BETA_MIN), p[2].clamp(-DELTA_MAX, DELTA_MAX)]
}

type Mat3 = [[f64; 3]; 3];

fn scaled_identity(c: f64) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { c } else { 0.0 }))
}

fn mat_vec(m: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| dot(&m[i], v))
}

/// BFGS update of the inverse Hessian estimate; skipped without positive curvature.
fn bfgs_update(h: &mut Mat3, s: &[f64; 3], y: &[f64; 3]) {
    let sy = dot(s, y);
    if !(sy > 1e-12 * norm(s) * norm(y)) {
        return;
    }
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let next: Mat3 = std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            h[i][j] - rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j]
        })
    });
    *h = next;
}

/// Fits `(α, β, Δ)` to one inverse-filtered flow by projected descent with
/// a backtracking (Armijo) line search.
pub fn fit_frame(
    u_filter: &GlottalFlowEstimate,
    init_params: &VocalFoldParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    if u_filter.samples.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("cannot fit an all-zero flow".into()));
    }
    init_params.validate()?;
    let frame = u_filter.frame_index;
    let objective = FlowObjective::new(&u_filter.samples, opts.model);
    let eval = |p: &[f64; 3]| objective.value_and_gradient(&VocalFoldParams::from_array(*p));

    let mut p = project(init_params.as_array());
    let (mut loss, mut grad) = eval(&p).map_err(|e| e.at_frame(frame))?;
    if norm(&grad) >= opts.grad_tol && p[2].abs() < opts.symmetry_break * 1e-2 {
        let mut q = p;
        q[2] = opts.symmetry_break;
        if let Ok((l, g)) = eval(&q) {
            (p, loss, grad) = (q, l, g);
        }
    }
    let mut trace = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    let fresh = |g: &[f64; 3]| scaled_identity(opts.initial_step / norm(g).max(f64::MIN_POSITIVE));
    let mut h = fresh(&grad);

    while iterations < opts.max_iters {
        if norm(&grad) < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        if opts.descent == Descent::Steepest {
            h = fresh(&grad);
        }
        let mut accepted = None;
        for attempt in 0..2 {
            let mut dir: [f64; 3] = mat_vec(&h, &grad).map(|v| -v);
            if dot(&dir, &grad) >= 0.0 || attempt == 1 {
                h = fresh(&grad);
                dir = mat_vec(&h, &grad).map(|v| -v);
            }
            let mut t = 1.0;
            for _ in 0..opts.max_backtracks {
                let trial = project(std::array::from_fn(|i| p[i] + t * dir[i]));
                let moved: [f64; 3] = std::array::from_fn(|i| trial[i] - p[i]);
                if let Ok((l, g)) = eval(&trial) {
                    if l.is_finite() && l <= loss + opts.armijo * dot(&grad, &moved) {
                        accepted = Some((trial, l, g));
                        break;
                    }
                }
                t *= opts.shrink;
            }
            if accepted.is_some() || opts.descent == Descent::Steepest {
                break;
            }
        }
        let Some((trial, l, g)) = accepted else {
            break;
        };
        let s: [f64; 3] = std::array::from_fn(|i| trial[i] - p[i]);
        let y: [f64; 3] = std::array::from_fn(|i| g[i] - grad[i]);
        let rel = (loss - l) / loss.abs().max(f64::MIN_POSITIVE);
        if opts.descent == Descent::Bfgs {
            bfgs_update(&mut h, &s, &y);
        }
        p = trial;
        loss = l;
        grad = g;
        trace.push(loss);
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }
    if !converged && norm(&grad) < opts.grad_tol {
        converged = true;
    }
    let params = VocalFoldParams::from_array(p);
    let mut final_flow = objective.model_flow(&params).map_err(|e| e.at_frame(frame))?;
    final_flow.frame_index = frame;
    Ok(FitResult {
        params,
        loss,
        loss_trace: trace,
        converged,
        iterations,
        final_flow,
    })
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Fits every frame. Without warm start the frames are independent and run
/// under `exec`; with warm start they run in order.
pub fn fit_frames(
    flows: &[GlottalFlowEstimate],
    opts: &FitOptions,
    exec: Exec,
) -> Vec<Result<FitResult>> {
    let init = opts.model.initial_params;
    if opts.warm_start {
        let mut start = init;
        return flows
            .iter()
            .map(|f| {
                let r = fit_frame(f, &start, opts);
                if let Ok(fit) = &r {
                    start = fit.params;
                }
                r
            })
            .collect();
    }
    exec::map(exec, flows, |f| fit_frame(f, &init, opts))
}

/// Writes `frame_index,alpha,beta,delta,loss,converged,iters`.
pub fn write_fit_csv<W: Write>(out: W, fits: &[FitResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame_index", "alpha", "beta", "delta", "loss", "converged", "iters"])?;
    for f in fits {
        w.write_record([
            f.final_flow.frame_index.to_string(),
            f.params.alpha.to_string(),
            f.params.beta.to_string(),
            f.params.delta.to_string(),
            f.loss.to_string(),
            f.converged.to_string(),
            f.iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fit_csv_file(path: &Path, fits: &[FitResult]) -> Result<()> {
    write_fit_csv(std::fs::File::create(path)?, fits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inverse_filtering::Provenance;
    use crate::phonation_model::InitialConditions;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planted_flow(params: &VocalFoldParams, n: usize) -> GlottalFlowEstimate {
        let zeros = vec![0.0; n];
        let mut f = FlowObjective::new(&zeros, ModelConfig::default())
            .model_flow(params)
            .unwrap();
        f.provenance = Provenance::Filter;
        f
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn objective_examples() {
        let u = [0.3, -0.2, 0.9];
        assert_eq!(residual_objective(&u, &u, true).unwrap(), 0.0);
        assert_eq!(residual_objective(&u, &u, false).unwrap(), 0.0);
        assert_eq!(residual_objective(&[1.0, -1.0], &[-1.0, 1.0], false).unwrap(), 4.0);
        let tripled: Vec<f64> = u.iter().map(|v| 3.0 * v).collect();
        assert!(residual_objective(&u, &tripled, true).unwrap() < 1e-30);
        assert!(matches!(
            residual_objective(&u, &[1.0], true),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn scale_align_examples() {
        let m = [0.5, -1.0, 0.25];
        let f: Vec<f64> = m.iter().map(|v| 2.0 * v).collect();
        assert_eq!(scale_align(&f, &m).unwrap(), 2.0);
        assert_eq!(scale_align(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(scale_align(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::ZeroEnergy)));
    }

    #[test]
    fn scale_align_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sse = |s: f64| a.iter().zip(&b).map(|(x, y)| (x - s * y).powi(2)).sum::<f64>();
            let oracle = golden_section(sse, -10.0, 10.0);
            assert!((scale_align(&a, &b).unwrap() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_vanishes_at_planted_params() {
        let p = VocalFoldParams::new(0.5, 0.32, 0.4);
        let target = planted_flow(&p, 400);
        let (loss, g) = FlowObjective::new(&target.samples, ModelConfig::default())
            .value_and_gradient(&p)
            .unwrap();
        assert!(loss < 1e-20);
        assert!(norm(&g) < 1e-6, "{g:?}");
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = ModelConfig::default();
        let target = planted_flow(&VocalFoldParams::new(0.55, 0.3, 0.5), 201);
        for _ in 0..10 {
            let p = VocalFoldParams::new(
                rng.random_range(0.3..0.7),
                rng.random_range(0.15..0.6),
                rng.random_range(-0.9..0.9),
            );
            let adj = adjoint_gradient(&p, &target.samples, &model, 200).unwrap();
            let fd = flow_finite_diff_gradient(&p, &target.samples, &model, 200, 1e-5).unwrap();
            for i in 0..3 {
                assert!(rel_err(adj[i], fd[i]) < 1e-4, "{p:?}: {adj:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn adjoint_handles_resampling() {
        // 150 steps onto 97 output samples exercises the interpolation adjoint.
        let model = ModelConfig::default();
        let target = planted_flow(&VocalFoldParams::new(0.6, 0.3, 0.2), 97);
        let p = VocalFoldParams::new(0.45, 0.35, 0.3);
        let adj = adjoint_gradient(&p, &target.samples, &model, 150).unwrap();
        let fd = flow_finite_diff_gradient(&p, &target.samples, &model, 150, 1e-5).unwrap();
        for i in 0..3 {
            assert!(rel_err(adj[i], fd[i]) < 1e-4, "{adj:?} vs {fd:?}");
        }
    }

    #[test]
    fn delta_gradient_vanishes_under_mirror_symmetry() {
        let target = planted_flow(&VocalFoldParams::new(0.5, 0.32, 0.0), 201);
        let p = VocalFoldParams::new(0.45, 0.3, 0.0);
        let model = ModelConfig::default();
        let adj = adjoint_gradient(&p, &target.samples, &model, 200).unwrap();
        let fd = flow_finite_diff_gradient(&p, &target.samples, &model, 200, 1e-5).unwrap();
        assert!(adj[2].abs() < 1e-8 && fd[2].abs() < 1e-8, "{adj:?} {fd:?}");
        // Holds for an asymmetric target too: J is even in delta.
        let asym = planted_flow(&VocalFoldParams::new(0.5, 0.32, 0.6), 201);
        let adj = adjoint_gradient(&p, &asym.samples, &model, 200).unwrap();
        assert!(adj[2].abs() < 1e-8);
    }

    #[test]
    fn finite_diff_on_quadratic_seam() {
        let quad = |p: &VocalFoldParams| Ok(p.alpha.powi(2) + p.beta.powi(2) + p.delta.powi(2));
        let p = VocalFoldParams::new(0.7, 0.3, -0.4);
        let h = 1e-3;
        let g = finite_diff_gradient(quad, &p, h).unwrap();
        for (gi, pi) in g.iter().zip(p.as_array()) {
            assert!((gi - 2.0 * pi).abs() <= h * h);
        }
    }

    #[test]
    fn finite_diff_step_sweep_is_v_shaped() {
        let model = ModelConfig::default();
        let target = planted_flow(&VocalFoldParams::new(0.55, 0.3, 0.5), 201);
        let p = VocalFoldParams::new(0.45, 0.36, 0.3);
        let adj = adjoint_gradient(&p, &target.samples, &model, 200).unwrap();
        let err = |h: f64| {
            let fd = flow_finite_diff_gradient(&p, &target.samples, &model, 200, h).unwrap();
            (0..3).map(|i| rel_err(adj[i], fd[i])).fold(0.0, f64::max)
        };
        let (coarse, mid, fine) = (err(1e-3), err(1e-5), err(1e-7));
        assert!(mid < coarse && mid < fine, "{coarse:e} {mid:e} {fine:e}");
    }

    #[test]
    fn recovers_planted_parameters() {
        let planted = VocalFoldParams::new(0.5, 0.32, 0.4);
        let target = planted_flow(&planted, 400);
        let mut opts = FitOptions::default();
        opts.model.max_lag = 0;
        let fit = fit_frame(&target, &VocalFoldParams::new(0.4, 0.25, 0.0), &opts).unwrap();
        for (got, want) in fit.params.as_array().iter().zip(planted.as_array()) {
            assert!((got.abs() - want).abs() / want < 0.1, "{:?}", fit.params);
        }
        assert!(fit.loss < 1e-3);
        assert!(fit.converged);
        assert_eq!(fit.final_flow.provenance, Provenance::Model);
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lag_search_finds_shifted_window() {
        let planted = VocalFoldParams::new(0.5, 0.32, 0.4);
        let long = planted_flow(&planted, 337);
        let mut target = long.samples[37..].to_vec();
        center_and_normalize(&mut target);
        let target = &target[..];
        let objective = FlowObjective::new(target, ModelConfig { max_lag: 60, ..ModelConfig::default() });
        assert_eq!(objective.best_lag(&planted).unwrap(), 37);
        assert!(objective.value(&planted).unwrap() < 1e-6);
        let literal = FlowObjective::new(target, ModelConfig { max_lag: 0, ..ModelConfig::default() });
        assert!(literal.value(&planted).unwrap() > 1e-2);
    }

    #[test]
    fn lagged_gradient_matches_finite_differences() {
        let target = planted_flow(&VocalFoldParams::new(0.52, 0.3, 0.35), 260);
        let target = &target.samples[23..];
        let objective = FlowObjective::new(target, ModelConfig { max_lag: 50, ..ModelConfig::default() });
        let p = VocalFoldParams::new(0.5, 0.31, 0.3);
        let lag = objective.best_lag(&p).unwrap();
        assert!(lag > 0);
        let (_, adj) = objective.value_and_gradient(&p).unwrap();
        let fd = finite_diff_gradient(|q| objective.value(q), &p, 1e-6).unwrap();
        for i in 0..3 {
            assert!(rel_err(adj[i], fd[i]) < 1e-4, "{adj:?} vs {fd:?}");
        }
    }

    #[test]
    fn start_at_optimum_converges_immediately() {
        let planted = VocalFoldParams::new(0.5, 0.32, 0.4);
        let target = planted_flow(&planted, 400);
        let fit = fit_frame(&target, &planted, &FitOptions::default()).unwrap();
        assert!(fit.iterations <= 2);
        assert!(fit.converged);
        assert_eq!(fit.params, planted);
    }

    #[test]
    fn rejects_silent_target_and_invalid_start() {
        let silent = GlottalFlowEstimate::new(vec![0.0; 100], Provenance::Filter, 0);
        assert!(fit_frame(&silent, &VocalFoldParams::new(0.4, 0.25, 0.0), &FitOptions::default()).is_err());
        let target = planted_flow(&VocalFoldParams::new(0.5, 0.32, 0.0), 100);
        assert!(fit_frame(&target, &VocalFoldParams::new(0.4, -1.0, 0.0), &FitOptions::default()).is_err());
    }

    #[test]
    fn steepest_descent_still_descends() {
        let target = planted_flow(&VocalFoldParams::new(0.5, 0.32, 0.4), 200);
        let opts = FitOptions {
            descent: Descent::Steepest,
            max_iters: 50,
            ..FitOptions::default()
        };
        let fit = fit_frame(&target, &VocalFoldParams::new(0.4, 0.25, 0.0), &opts).unwrap();
        assert!(fit.loss < fit.loss_trace[0]);
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fit_frames_is_order_independent_and_deterministic() {
        let flows: Vec<GlottalFlowEstimate> = [0.1, 0.3, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut f = planted_flow(&VocalFoldParams::new(0.5, 0.32, d), 200);
                f.frame_index = i;
                f
            })
            .collect();
        let opts = FitOptions::default();
        let seq = fit_frames(&flows, &opts, Exec::Sequential);
        let par = fit_frames(&flows, &opts, Exec::Parallel);
        let reversed: Vec<_> = flows.iter().rev().cloned().collect();
        let rev = fit_frames(&reversed, &opts, Exec::Parallel);
        for i in 0..3 {
            let a = seq[i].as_ref().unwrap();
            assert_eq!(a, par[i].as_ref().unwrap());
            assert_eq!(a, rev[2 - i].as_ref().unwrap());
            assert_eq!(a.final_flow.frame_index, i);
        }
        let warm = fit_frames(&flows, &FitOptions { warm_start: true, ..opts }, Exec::Parallel);
        assert!(warm.iter().all(|r| r.is_ok()));
    }

    #[test]
    fn fit_csv_layout() {
        let target = planted_flow(&VocalFoldParams::new(0.5, 0.32, 0.4), 100);
        let fit = fit_frame(&target, &VocalFoldParams::new(0.5, 0.32, 0.4), &FitOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_fit_csv(&mut buf, &[fit]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("frame_index,alpha,beta,delta,loss,converged,iters"));
        assert!(lines.next().unwrap().starts_with("0,0.5,0.32,0.4,"));
    }

    #[test]
    fn rectify_off_gradient_matches_too() {
        let model = ModelConfig {
            rectify: false,
            init: InitialConditions { c_r: 0.1, c_l: -0.05 },
            ..ModelConfig::default()
        };
        let zeros = vec![0.0; 120];
        let target = FlowObjective::new(&zeros, model)
            .model_flow(&VocalFoldParams::new(0.6, 0.4, 0.3))
            .unwrap();
        let p = VocalFoldParams::new(0.5, 0.3, -0.2);
        let adj = adjoint_gradient(&p, &target.samples, &model, 119).unwrap();
        let fd = flow_finite_diff_gradient(&p, &target.samples, &model, 119, 1e-5).unwrap();
        for i in 0..3 {
            assert!(rel_err(adj[i], fd[i]) < 1e-4, "{adj:?} vs {fd:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn unaligned_objective_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 16), b in proptest::collection::vec(-1.0f64..1.0, 16)) {
            prop_assert_eq!(residual_objective(&a, &b, false).unwrap(), residual_objective(&b, &a, false).unwrap());
        }

        #[test]
        fn objective_ignores_target_amplitude(scale in 0.01f64..100.0, delta in 0.0f64..0.8) {
            let target = planted_flow(&VocalFoldParams::new(0.5, 0.32, delta), 150);
            let scaled: Vec<f64> = target.samples.iter().map(|v| v * scale).collect();
            let p = VocalFoldParams::new(0.45, 0.3, 0.2);
            let model = ModelConfig::default();
            let j1 = FlowObjective::new(&target.samples, model).value(&p).unwrap();
            let j2 = FlowObjective::new(&scaled, model).value(&p).unwrap();
            prop_assert!((j2 / (scale * scale) - j1).abs() <= 1e-9 * j1.max(1e-12));
        }

        #[test]
        fn accepted_steps_never_increase_loss(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let planted = VocalFoldParams::new(rng.random_range(0.4..0.6), rng.random_range(0.2..0.4), rng.random_range(0.0..0.8));
            let target = planted_flow(&planted, 200);
            let fit = fit_frame(&target, &VocalFoldParams::new(0.4, 0.25, 0.0), &FitOptions::default()).unwrap();
            prop_assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
