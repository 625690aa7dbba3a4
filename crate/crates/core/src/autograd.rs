//! Hand-derived reverse-mode gradients of the scalar loss
//! `L = || f(G(params)) - y ||^2` with respect to every trainable scalar,
//! plus an independent central-finite-difference checker.
//!
//! The backward pass walks the forward trace in reverse: sigmoid head,
//! channel-norm (with the full mean/variance terms), ReLU mask (subgradient 0
//! at 0), upsampling adjoint, and the two matrix products per layer.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{CnStats, DecoderConfig, FixedInput, ForwardTrace, ParamSet, Upsampler};
use crate::error::{Error, Result};
use crate::inverse::ForwardOp;
use crate::tensor::{gemm_nt, gemm_tn, row_chunked_sums2, ChannelStack, Matrix};

/// Gradient of the loss with respect to every entry of a [`ParamSet`],
/// stored with identical shapes.
#[derive(Clone, Debug)]
pub struct GradSet {
    pub weights: Vec<Matrix>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> GradSet {
        GradSet {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            gamma: params.gamma.iter().map(|g| vec![0.0; g.len()]).collect(),
            beta: params.beta.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum::<usize>()
            + self.gamma.iter().map(Vec::len).sum::<usize>()
            + self.beta.iter().map(Vec::len).sum::<usize>()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Matrix::all_finite)
            && self.gamma.iter().flatten().all(|v| v.is_finite())
            && self.beta.iter().flatten().all(|v| v.is_finite())
    }

    /// Same scalar order as [`ParamSet::copy_to_flat`].
    pub fn copy_to_flat(&self, out: &mut Vec<f64>) {
        out.clear();
        for w in &self.weights {
            out.extend_from_slice(w.data());
        }
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .flat_map(|m| m.data())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let g = self
            .gamma
            .iter()
            .chain(&self.beta)
            .flatten()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        w.max(g)
    }
}

/// Reusable buffers for repeated loss/gradient evaluations of one
/// architecture. Each instance is owned by a single fit; separate instances
/// may evaluate concurrently.
pub(crate) struct Workspace {
    trace: ForwardTrace,
    g_cur: Vec<f64>,
    g_next: Vec<f64>,
    scratch: Vec<f64>,
}

impl Workspace {
    pub fn new(config: &DecoderConfig) -> Result<Workspace> {
        Ok(Workspace {
            trace: ForwardTrace::new(config)?,
            g_cur: Vec::new(),
            g_next: Vec::new(),
            scratch: Vec::new(),
        })
    }

    pub fn image(&self) -> &ChannelStack {
        &self.trace.image
    }

    /// Forward pass and loss only.
    pub fn loss_only(
        &mut self,
        config: &DecoderConfig,
        input: &FixedInput,
        params: &ParamSet,
        op: &ForwardOp,
        y: &ChannelStack,
    ) -> Result<f64> {
        self.trace.run(config, input, params)?;
        let measured = op.apply(&self.trace.image)?;
        if measured.dims() != y.dims() || measured.channels() != y.channels() {
            return Err(Error::shape(format!(
                "observation has shape {:?}x{}, operator produces {:?}x{}",
                y.dims(),
                y.channels(),
                measured.dims(),
                measured.channels()
            )));
        }
        Ok(measured
            .data()
            .iter()
            .zip(y.data())
            .map(|(m, t)| (m - t) * (m - t))
            .sum())
    }

    /// Forward + backward; fills `grads` and returns the loss.
    pub fn loss_and_grad(
        &mut self,
        config: &DecoderConfig,
        input: &FixedInput,
        params: &ParamSet,
        op: &ForwardOp,
        y: &ChannelStack,
        grads: &mut GradSet,
    ) -> Result<f64> {
        self.trace.run(config, input, params)?;
        let image = &self.trace.image;
        let measured = op.apply(image)?;
        if measured.dims() != y.dims() || measured.channels() != y.channels() {
            return Err(Error::shape(format!(
                "observation has shape {:?}x{}, operator produces {:?}x{}",
                y.dims(),
                y.channels(),
                measured.dims(),
                measured.channels()
            )));
        }
        let mut loss = 0.0;
        let mut residual2 = measured;
        for (m, t) in residual2.data_mut().iter_mut().zip(y.data()) {
            let r = *m - t;
            loss += r * r;
            *m = 2.0 * r;
        }

        // dL/dX through the measurement operator, then through the sigmoid
        let d_image = op.adjoint(&residual2, image.dims())?;
        let d = config.depth;
        let n_d = image.pixels();
        let k_out = image.channels();
        self.g_cur.resize(n_d * k_out, 0.0);
        for ((g, &dx), &x) in self
            .g_cur
            .iter_mut()
            .zip(d_image.data())
            .zip(image.data())
        {
            *g = dx * x * (1.0 - x);
        }

        // head: image = sigmoid(B_d C_d)
        let b_d = &self.trace.stacks[d];
        gemm_tn(
            n_d,
            b_d.channels(),
            k_out,
            b_d.data(),
            &self.g_cur,
            grads.weights[d].data_mut(),
        );
        self.g_next.resize(n_d * b_d.channels(), 0.0);
        gemm_nt(
            n_d,
            k_out,
            b_d.channels(),
            &self.g_cur,
            params.weights[d].data(),
            &mut self.g_next,
        );
        std::mem::swap(&mut self.g_cur, &mut self.g_next);

        for i in (0..d).rev() {
            // g_cur = dL/dB_{i+1} of shape n_{i+1} x k_{i+1}
            let relu_map = &self.trace.relu_maps[i];
            let k_next = relu_map.channels();
            cn_backward(
                &mut self.g_cur[..relu_map.len()],
                relu_map.data(),
                k_next,
                &params.gamma[i],
                &self.trace.stats[i],
                &mut grads.gamma[i],
                &mut grads.beta[i],
            );
            // ReLU mask: post-relu value 0 means pre-activation <= 0
            for (g, &r) in self.g_cur[..relu_map.len()].iter_mut().zip(relu_map.data()) {
                if r <= 0.0 {
                    *g = 0.0;
                }
            }
            // adjoint of the upsampling step back to the product B_i C_i
            let b_i = &self.trace.stacks[i];
            let kind = if i < d - 1 { config.upsampler } else { Upsampler::Identity };
            self.g_next.resize(b_i.pixels() * k_next, 0.0);
            crate::decoder::upsample_adjoint_into(
                kind,
                &self.g_cur[..relu_map.len()],
                b_i.dims(),
                k_next,
                &mut self.g_next[..b_i.pixels() * k_next],
                &mut self.scratch,
            );
            gemm_tn(
                b_i.pixels(),
                b_i.channels(),
                k_next,
                b_i.data(),
                &self.g_next[..b_i.pixels() * k_next],
                grads.weights[i].data_mut(),
            );
            if i > 0 {
                self.g_cur.resize(b_i.pixels() * b_i.channels(), 0.0);
                gemm_nt(
                    b_i.pixels(),
                    k_next,
                    b_i.channels(),
                    &self.g_next[..b_i.pixels() * k_next],
                    params.weights[i].data(),
                    &mut self.g_cur[..b_i.pixels() * b_i.channels()],
                );
            }
        }
        Ok(loss)
    }
}

/// Channel-norm backward with the full quotient-rule derivative:
/// `dL/dr = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))`,
/// overwriting `g`; also accumulates the per-channel `gamma`/`beta` grads.
fn cn_backward(
    g: &mut [f64],
    r: &[f64],
    channels: usize,
    gamma: &[f64],
    stats: &CnStats,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = (r.len() / channels) as f64;
    let mean = &stats.mean;
    let inv_std = &stats.inv_std;
    let sums = row_chunked_sums2(g, r, channels, 2 * channels, |acc, g_row, r_row| {
        let (s1, s2) = acc.split_at_mut(channels);
        for j in 0..channels {
            let xhat = (r_row[j] - mean[j]) * inv_std[j];
            s1[j] += g_row[j];
            s2[j] += g_row[j] * xhat;
        }
    });
    let (s1, s2) = sums.split_at(channels);
    dbeta.copy_from_slice(s1);
    dgamma.copy_from_slice(s2);
    let m1: Vec<f64> = s1.iter().map(|v| v / n).collect();
    let m2: Vec<f64> = s2.iter().map(|v| v / n).collect();
    for (g_row, r_row) in g.chunks_exact_mut(channels).zip(r.chunks_exact(channels)) {
        for j in 0..channels {
            let xhat = (r_row[j] - mean[j]) * inv_std[j];
            g_row[j] = gamma[j] * inv_std[j] * (g_row[j] - m1[j] - xhat * m2[j]);
        }
    }
}

/// Loss and its exact gradient at `params`.
pub fn loss_and_grad(
    config: &DecoderConfig,
    input: &FixedInput,
    params: &ParamSet,
    op: &ForwardOp,
    y: &ChannelStack,
) -> Result<(f64, GradSet)> {
    let mut ws = Workspace::new(config)?;
    let mut grads = GradSet::zeros_like(params);
    let loss = ws.loss_and_grad(config, input, params, op, y, &mut grads)?;
    Ok((loss, grads))
}

/// Outcome of a finite-difference gradient check.
///
/// Errors are reported relative to the largest gradient magnitude seen among
/// the checked coordinates (analytic or numeric); per-coordinate ratios are
/// meaningless where an entry itself vanishes.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_flat_index: usize,
    pub grad_scale: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compare the analytic gradient against central finite differences of the
/// loss. Checks a random subset of at least 200 coordinates (seeded by
/// `config.seed`) plus every `gamma`/`beta` entry of the first layer.
pub fn finite_diff_check(
    config: &DecoderConfig,
    input: &FixedInput,
    params: &ParamSet,
    op: &ForwardOp,
    y: &ChannelStack,
    step: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport> {
    if !(step > 0.0) {
        return Err(Error::config("step must be positive"));
    }
    let (_, grads) = loss_and_grad(config, input, params, op, y)?;
    let mut analytic = Vec::new();
    grads.copy_to_flat(&mut analytic);
    let mut flat = Vec::new();
    params.copy_to_flat(&mut flat);
    let total = flat.len();

    let mut coords: Vec<usize> = if total <= 200 {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e3779b97f4a7c15);
        sample(&mut rng, total, 200).into_iter().collect()
    };
    // all normalization params of the first layer
    let weight_len: usize = params.weights.iter().map(Matrix::len).sum();
    let k1 = params.gamma[0].len();
    coords.extend(weight_len..weight_len + 2 * k1);
    coords.sort_unstable();
    coords.dedup();

    let mut ws = Workspace::new(config)?;
    let mut probe = params.clone();
    let mut max_abs = 0.0f64;
    let mut worst = 0usize;
    let mut numeric_scale = 0.0f64;
    for &c in &coords {
        let saved = flat[c];
        flat[c] = saved + step;
        probe.copy_from_flat(&flat);
        let up = ws.loss_only(config, input, &probe, op, y)?;
        flat[c] = saved - step;
        probe.copy_from_flat(&flat);
        let down = ws.loss_only(config, input, &probe, op, y)?;
        flat[c] = saved;
        let numeric = (up - down) / (2.0 * step);
        numeric_scale = numeric_scale.max(numeric.abs());
        let err = (analytic[c] - numeric).abs();
        if err > max_abs {
            max_abs = err;
            worst = c;
        }
    }
    let grad_scale = coords
        .iter()
        .map(|&c| analytic[c].abs())
        .fold(numeric_scale, f64::max)
        .max(1e-12);
    let max_rel = max_abs / grad_scale;
    Ok(FiniteDiffReport {
        coords_checked: coords.len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_flat_index: worst,
        grad_scale,
        tolerance,
        pass: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{make_input, DecoderConfig, ParamSet, Upsampler};
    use crate::inverse::ForwardOp;

    fn tiny() -> (DecoderConfig, FixedInput, ParamSet) {
        let cfg = DecoderConfig::uniform(2, 3, (4, 4), 3, Upsampler::Bilinear, 21);
        let input = make_input(&cfg).unwrap();
        let params = ParamSet::random(&cfg, 77).unwrap();
        (cfg, input, params)
    }

    #[test]
    fn zero_residual_means_zero_gradient() {
        let (cfg, input, params) = tiny();
        let y = crate::decoder::forward(&cfg, &input, &params).unwrap();
        let (loss, grads) = loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.max_abs() <= 1e-12, "max grad {}", grads.max_abs());
    }

    #[test]
    fn finite_differences_agree_for_all_operators() {
        let (cfg, input, params) = tiny();
        let truth = crate::synth::natural_scene(cfg.output_dims.0, cfg.output_dims.1, 1);
        let mut mask = ChannelStack::constant(8, 8, 1, 1.0);
        for px in (0..64).step_by(5) {
            mask.data_mut()[px] = 0.0;
        }
        for op in [
            ForwardOp::Identity,
            ForwardOp::mask(mask).unwrap(),
            ForwardOp::Downsample4,
        ] {
            let y = crate::inverse::add_noise(&op.apply(&truth).unwrap(), 0.05, 3).unwrap();
            let report =
                finite_diff_check(&cfg, &input, &params, &op, &y, 1e-5, 1e-6).unwrap();
            // fewer params than the 200-coordinate target: all are checked
            assert_eq!(report.coords_checked, crate::decoder::param_count(&cfg));
            assert!(
                report.pass,
                "op {:?}: max rel {} (abs {}, scale {})",
                op_name(&op),
                report.max_rel_error,
                report.max_abs_error,
                report.grad_scale
            );
        }
    }

    fn op_name(op: &ForwardOp) -> &'static str {
        match op {
            ForwardOp::Identity => "identity",
            ForwardOp::Mask(_) => "mask",
            ForwardOp::Downsample4 => "downsample4",
        }
    }

    #[test]
    fn larger_step_reports_larger_error() {
        let (cfg, input, params) = tiny();
        let y = crate::synth::natural_scene(8, 8, 5);
        let fine = finite_diff_check(&cfg, &input, &params, &ForwardOp::Identity, &y, 1e-5, 1e-6)
            .unwrap();
        let coarse = finite_diff_check(&cfg, &input, &params, &ForwardOp::Identity, &y, 1e-1, 1e-6)
            .unwrap();
        assert!(coarse.max_rel_error > fine.max_rel_error);
    }

    #[test]
    fn zero_residual_finite_difference_is_zero() {
        let (cfg, input, params) = tiny();
        let y = crate::decoder::forward(&cfg, &input, &params).unwrap();
        // the analytic gradient is exactly zero here; the numeric one only
        // carries the O(step^2) odd-order truncation term
        let report =
            finite_diff_check(&cfg, &input, &params, &ForwardOp::Identity, &y, 3e-6, 1e-6).unwrap();
        assert!(report.max_abs_error <= 1e-9, "numeric residue {}", report.max_abs_error);
    }

    #[test]
    fn residual_linearity_in_observation() {
        let (cfg, input, params) = tiny();
        let x = crate::decoder::forward(&cfg, &input, &params).unwrap();
        let y = crate::synth::natural_scene(8, 8, 2);
        let (_, g) = loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y).unwrap();

        // y' = 2 forward - y flips the residual: grads scale by -1 exactly
        let mut y_flip = x.clone();
        for (v, &t) in y_flip.data_mut().iter_mut().zip(y.data()) {
            *v = 2.0 * *v - t;
        }
        let (_, g_flip) =
            loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y_flip).unwrap();

        // y'' = 2 y - forward doubles the residual: grads scale by 2 exactly
        let mut y_double = y.clone();
        for (v, &f) in y_double.data_mut().iter_mut().zip(x.data()) {
            *v = 2.0 * *v - f;
        }
        let (_, g_double) =
            loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y_double).unwrap();

        let mut flat = Vec::new();
        let mut flat_flip = Vec::new();
        let mut flat_double = Vec::new();
        g.copy_to_flat(&mut flat);
        g_flip.copy_to_flat(&mut flat_flip);
        g_double.copy_to_flat(&mut flat_double);
        let scale = flat.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        for i in 0..flat.len() {
            assert!((flat_flip[i] + flat[i]).abs() <= 1e-12 * scale.max(1.0));
            assert!((flat_double[i] - 2.0 * flat[i]).abs() <= 1e-11 * scale.max(1.0));
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let (cfg, input, params) = tiny();
        let y1 = crate::synth::natural_scene(8, 8, 3);
        let y2 = crate::synth::natural_scene(8, 8, 4);
        let (_, g1) = loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y1).unwrap();
        let (_, g2) = loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y2).unwrap();
        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        g1.copy_to_flat(&mut f1);
        g2.copy_to_flat(&mut f2);

        // numeric gradient of L(., y1) + L(., y2) on a few coordinates
        let mut flat = Vec::new();
        params.copy_to_flat(&mut flat);
        let mut ws = Workspace::new(&cfg).unwrap();
        let mut probe = params.clone();
        let step = 1e-5;
        let scale = f1
            .iter()
            .zip(&f2)
            .fold(0.0f64, |a, (u, v)| a.max((u + v).abs()));
        for c in (0..flat.len()).step_by(7) {
            let saved = flat[c];
            flat[c] = saved + step;
            probe.copy_from_flat(&flat);
            let up = ws.loss_only(&cfg, &input, &probe, &ForwardOp::Identity, &y1).unwrap()
                + ws.loss_only(&cfg, &input, &probe, &ForwardOp::Identity, &y2).unwrap();
            flat[c] = saved - step;
            probe.copy_from_flat(&flat);
            let down = ws.loss_only(&cfg, &input, &probe, &ForwardOp::Identity, &y1).unwrap()
                + ws.loss_only(&cfg, &input, &probe, &ForwardOp::Identity, &y2).unwrap();
            flat[c] = saved;
            let numeric = (up - down) / (2.0 * step);
            assert!(
                ((f1[c] + f2[c]) - numeric).abs() <= 1e-6 * scale.max(1.0),
                "coord {c}"
            );
        }
    }

    #[test]
    fn dead_relu_blocks_weight_gradient() {
        // all pre-activations negative: C_0 gets exactly zero gradient
        let mut cfg = DecoderConfig::uniform(1, 1, (2, 2), 1, Upsampler::Identity, 0);
        cfg.cn_epsilon = 1e-5;
        let input = make_input(&cfg)
            .unwrap()
            .with_stack(ChannelStack::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        let params = ParamSet {
            weights: vec![
                Matrix::from_vec(1, 1, vec![-2.0]).unwrap(),
                Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            ],
            gamma: vec![vec![1.0]],
            beta: vec![vec![0.3]],
        };
        let y = ChannelStack::constant(2, 2, 1, 0.9);
        let (_, grads) = loss_and_grad(&cfg, &input, &params, &ForwardOp::Identity, &y).unwrap();
        assert!(grads.weights[0].data().iter().all(|&v| v == 0.0));
        // the shift parameter still carries signal
        assert!(grads.beta[0][0].abs() > 0.0);
    }

    #[test]
    fn cn_backward_is_mean_invariant() {
        // gamma = 1, beta = 0: a uniform shift of the inputs does not change
        // the normalized output, so the input gradient must sum to ~0
        let n = 40;
        let channels = 3;
        let r: Vec<f64> = (0..n * channels)
            .map(|i| ((i * 31 % 17) as f64 * 0.21).max(0.0))
            .collect();
        let mut g: Vec<f64> = (0..n * channels)
            .map(|i| ((i * 13 % 23) as f64 - 11.0) * 0.07)
            .collect();
        let mut stats = CnStats::default();
        let mut out = vec![0.0; r.len()];
        crate::decoder::cn_forward(
            &r,
            &mut out,
            channels,
            &[1.0; 3],
            &[0.0; 3],
            1e-6,
            &mut stats,
        );
        let mut dgamma = vec![0.0; channels];
        let mut dbeta = vec![0.0; channels];
        cn_backward(&mut g, &r, channels, &[1.0; 3], &stats, &mut dgamma, &mut dbeta);
        for j in 0..channels {
            let total: f64 = g[j..].iter().step_by(channels).sum();
            assert!(total.abs() <= 1e-9, "channel {j}: {total}");
        }
    }
}
