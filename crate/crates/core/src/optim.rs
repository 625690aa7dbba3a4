//! Adam and plain gradient descent over a [`ParamSet`], plus the fit loop
//! that minimizes `|| f(G(C)) - y ||^2` while recording loss and PSNR traces.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradSet, Workspace};
use crate::decoder::{DecoderConfig, FixedInput, ParamSet};
use crate::error::{Error, Result};
use crate::inverse::{psnr, ForwardOp};
use crate::tensor::ChannelStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adam,
    Gd,
}

/// Which parameters a finished fit reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotPolicy {
    /// The best-loss iterate seen during the run (default).
    BestLoss,
    /// The final iterate.
    Last,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub method: Method,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Loss (and PSNR, when a reference is given) is recorded every this
    /// many iterations, plus once at the end.
    pub log_every: usize,
    pub seed: u64,
    /// Stop after this many iterations even if `iterations` is larger.
    pub stop_at: Option<usize>,
    pub snapshot: SnapshotPolicy,
    /// Ground-truth image for the PSNR-versus-truth trace.
    #[serde(skip)]
    pub truth: Option<ChannelStack>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iterations: 5000,
            learning_rate: 0.01,
            method: Method::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log_every: 50,
            seed: 0,
            stop_at: None,
            snapshot: SnapshotPolicy::BestLoss,
            truth: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        Ok(())
    }
}

/// First/second moment accumulators for Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update with bias-corrected moments, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, opts: &FitOptions) {
    state.t += 1;
    let b1 = opts.beta1;
    let b2 = opts.beta2;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= opts.learning_rate * m_hat / (v_hat.sqrt() + opts.epsilon);
    }
}

pub fn gd_step(params: &mut [f64], grads: &[f64], opts: &FitOptions) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= opts.learning_rate * g;
    }
}

/// Everything a finished fit reports.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub loss_trace: Vec<(usize, f64)>,
    pub psnr_trace: Option<Vec<(usize, f64)>>,
    pub final_params: ParamSet,
    pub wall_ms: u64,
    /// Loss at `final_params`.
    pub final_loss: f64,
    /// Iteration index of the best-loss iterate.
    pub best_iteration: usize,
    /// Iterations actually run (smaller than requested when `stop_at` hits).
    pub iterations_run: usize,
}

impl FitReport {
    /// Traces as CSV: `iteration,loss,psnr` with an empty PSNR column when no
    /// reference image was supplied.
    pub fn traces_csv(&self) -> String {
        let mut out = String::from("iteration,loss,psnr\n");
        for (idx, (it, loss)) in self.loss_trace.iter().enumerate() {
            let psnr = self
                .psnr_trace
                .as_ref()
                .and_then(|t| t.get(idx))
                .map(|(_, p)| format!("{p}"))
                .unwrap_or_default();
            out.push_str(&format!("{it},{loss},{psnr}\n"));
        }
        out
    }

    /// Run metadata (no parameters, no traces) as JSON.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "wall_ms": self.wall_ms,
            "final_loss": self.final_loss,
            "best_iteration": self.best_iteration,
            "iterations_run": self.iterations_run,
            "logged_points": self.loss_trace.len(),
            "final_psnr": self.psnr_trace.as_ref().and_then(|t| t.last()).map(|(_, p)| *p),
        })
    }
}

/// Minimize the loss from `init_params`. Deterministic given identical
/// inputs and options; aborts with a diagnostic if the loss turns non-finite.
pub fn fit(
    config: &DecoderConfig,
    input: &FixedInput,
    init_params: &ParamSet,
    op: &ForwardOp,
    y: &ChannelStack,
    options: &FitOptions,
) -> Result<FitReport> {
    options.validate()?;
    config.validate()?;
    if let Some(truth) = &options.truth {
        if truth.dims() != config.output_dims || truth.channels() != config.out_channels {
            return Err(Error::shape("truth image does not match decoder output"));
        }
    }
    let start = Instant::now();
    let iterations = options.stop_at.map_or(options.iterations, |s| s.min(options.iterations));

    let mut ws = Workspace::new(config)?;
    let mut params = init_params.clone();
    let mut grads = GradSet::zeros_like(&params);
    let n = params.scalar_count();
    let mut flat_params = Vec::with_capacity(n);
    params.copy_to_flat(&mut flat_params);
    let mut flat_grads = Vec::with_capacity(n);
    let mut adam = AdamState::new(n);

    let mut loss_trace = Vec::new();
    let mut psnr_trace = options.truth.as_ref().map(|_| Vec::new());
    let mut best_loss = f64::INFINITY;
    let mut best_iteration = 0;
    let mut best_params = params.clone();

    for t in 0..iterations {
        let loss = ws.loss_and_grad(config, input, &params, op, y, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, loss });
        }
        if t % options.log_every == 0 {
            loss_trace.push((t, loss));
            if let (Some(trace), Some(truth)) = (psnr_trace.as_mut(), options.truth.as_ref()) {
                trace.push((t, psnr(truth, ws.image())?));
            }
        }
        if loss < best_loss {
            best_loss = loss;
            best_iteration = t;
            best_params.clone_from(&params);
        }
        grads.copy_to_flat(&mut flat_grads);
        match options.method {
            Method::Adam => adam_step(&mut flat_params, &flat_grads, &mut adam, options),
            Method::Gd => gd_step(&mut flat_params, &flat_grads, options),
        }
        params.copy_from_flat(&flat_params);
    }

    // closing evaluation at the last iterate
    let loss = ws.loss_only(config, input, &params, op, y)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { iteration: iterations, loss });
    }
    loss_trace.push((iterations, loss));
    if let (Some(trace), Some(truth)) = (psnr_trace.as_mut(), options.truth.as_ref()) {
        trace.push((iterations, psnr(truth, ws.image())?));
    }
    if loss < best_loss {
        best_loss = loss;
        best_iteration = iterations;
        best_params.clone_from(&params);
    }

    let (final_params, final_loss) = match options.snapshot {
        SnapshotPolicy::BestLoss => (best_params, best_loss),
        SnapshotPolicy::Last => (params, loss),
    };
    Ok(FitReport {
        loss_trace,
        psnr_trace,
        final_params,
        wall_ms: start.elapsed().as_millis() as u64,
        final_loss,
        best_iteration,
        iterations_run: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{forward, make_input, DecoderConfig, Upsampler};
    use crate::inverse::mse;

    #[test]
    fn already_optimal_fit_is_a_fixed_point() {
        let cfg = DecoderConfig::uniform(2, 3, (4, 4), 3, Upsampler::Bilinear, 5);
        let input = make_input(&cfg).unwrap();
        let params = ParamSet::random(&cfg, 6).unwrap();
        let y = forward(&cfg, &input, &params).unwrap();
        let opts = FitOptions {
            iterations: 20,
            log_every: 1,
            ..FitOptions::default()
        };
        let report = fit(&cfg, &input, &params, &ForwardOp::Identity, &y, &opts).unwrap();
        assert_eq!(report.loss_trace[0].1, 0.0);
        assert_eq!(report.final_loss, 0.0);
        assert_eq!(report.final_params, params);
    }

    #[test]
    fn fits_a_constant_gray_image() {
        let cfg = DecoderConfig::uniform(4, 16, (8, 8), 3, Upsampler::Bilinear, 0);
        assert_eq!(cfg.output_dims, (64, 64));
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 1).unwrap();
        let y = ChannelStack::constant(64, 64, 3, 0.5);
        let opts = FitOptions {
            iterations: 2000,
            log_every: 500,
            ..FitOptions::default()
        };
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        let img = forward(&cfg, &input, &report.final_params).unwrap();
        let err = mse(&img, &y).unwrap();
        assert!(err <= 1e-4, "mse = {err}");
    }

    #[test]
    fn adam_step_basics() {
        let opts = FitOptions::default();

        // zero gradient from a fresh state: parameters unchanged
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &opts);
        assert_eq!(p, vec![1.0, -2.0]);

        // moments decay under zero gradients
        st.m = vec![1.0, 1.0];
        st.v = vec![1.0, 1.0];
        adam_step(&mut p, &[0.0, 0.0], &mut st, &opts);
        assert!((st.m[0] - 0.9).abs() < 1e-15);
        assert!((st.v[0] - 0.999).abs() < 1e-15);

        // first step moves opposite the gradient sign
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.4], &mut st, &opts);
        assert!(p[0] < 0.0 && p[1] > 0.0);

        // constant gradient: step magnitude approaches the learning rate
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam_step(&mut p, &[0.37], &mut st, &opts);
            last_step = (p[0] - prev).abs();
            prev = p[0];
        }
        assert!(
            (last_step - opts.learning_rate).abs() < 1e-6,
            "step = {last_step}"
        );
    }

    #[test]
    fn gd_loss_non_increasing_at_small_rate() {
        let cfg = DecoderConfig::uniform(2, 3, (4, 4), 3, Upsampler::Bilinear, 9);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 2).unwrap();
        let y = crate::synth::natural_scene(8, 8, 0);
        let opts = FitOptions {
            iterations: 100,
            learning_rate: 1e-4,
            method: Method::Gd,
            log_every: 1,
            ..FitOptions::default()
        };
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        for pair in report.loss_trace.windows(2) {
            assert!(
                pair[1].1 <= pair[0].1,
                "gd loss increased: {:?} -> {:?}",
                pair[0],
                pair[1]
            );
        }

        // Adam may show small transients but stays within 1% of the running best
        let opts = FitOptions {
            iterations: 100,
            log_every: 1,
            ..FitOptions::default()
        };
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        let mut best = f64::INFINITY;
        for &(_, loss) in &report.loss_trace {
            assert!(loss <= best * 1.01, "adam transient too large: {loss} vs {best}");
            best = best.min(loss);
        }
    }

    #[test]
    fn deterministic_traces() {
        let cfg = DecoderConfig::uniform(2, 4, (4, 4), 3, Upsampler::Bilinear, 3);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 4).unwrap();
        let y = crate::synth::natural_scene(8, 8, 7);
        let opts = FitOptions {
            iterations: 60,
            log_every: 5,
            truth: Some(y.clone()),
            ..FitOptions::default()
        };
        let a = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        let b = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.psnr_trace, b.psnr_trace);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn stop_at_truncates() {
        let cfg = DecoderConfig::uniform(2, 3, (4, 4), 3, Upsampler::Bilinear, 3);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 4).unwrap();
        let y = crate::synth::natural_scene(8, 8, 7);
        let opts = FitOptions {
            iterations: 500,
            stop_at: Some(12),
            log_every: 1,
            ..FitOptions::default()
        };
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        assert_eq!(report.iterations_run, 12);
        assert_eq!(report.loss_trace.last().unwrap().0, 12);
    }

    #[test]
    fn non_finite_observation_aborts_with_iteration() {
        let cfg = DecoderConfig::uniform(2, 3, (4, 4), 3, Upsampler::Bilinear, 3);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 4).unwrap();
        let mut y = crate::synth::natural_scene(8, 8, 7);
        y.data_mut()[0] = f64::NAN;
        let opts = FitOptions {
            iterations: 10,
            ..FitOptions::default()
        };
        match fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts) {
            Err(Error::Diverged { iteration, .. }) => assert_eq!(iteration, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn traces_csv_shape() {
        let cfg = DecoderConfig::uniform(2, 3, (4, 4), 3, Upsampler::Bilinear, 3);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 4).unwrap();
        let y = crate::synth::natural_scene(8, 8, 1);
        let opts = FitOptions {
            iterations: 10,
            log_every: 2,
            truth: Some(y.clone()),
            ..FitOptions::default()
        };
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
        let csv = report.traces_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "iteration,loss,psnr");
        assert_eq!(lines.len(), 1 + report.loss_trace.len());
        let meta = report.metadata_json();
        assert!(meta.get("final_loss").is_some());
        assert!(meta.get("final_psnr").unwrap().is_number());
    }
}
