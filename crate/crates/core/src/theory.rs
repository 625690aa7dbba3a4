//! Executable checks of the analytical claims: the one-layer noise-fitting
//! lower bound, the sign-pattern count behind it, the random-subspace
//! projection concentration, and the 1-D experiment contrasting linear with
//! convex non-linear upsampling.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::decoder::{forward, make_input, DecoderConfig, ParamSet, Upsampler};
use crate::error::{Error, Result};
use crate::inverse::{add_noise, ForwardOp};
use crate::optim::{adam_step, fit, AdamState, FitOptions};
use crate::tensor::{ChannelStack, Matrix};

fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// one-layer noise-fitting bound
// ---------------------------------------------------------------------------

/// A one-layer model `G(C) = relu(U0 B0 C0) c1` with the input and
/// upsampling matrices materialized densely (desk scale only).
#[derive(Clone, Debug)]
pub struct OneLayerInstance {
    pub b0: Matrix,
    pub u0: Matrix,
    pub k: usize,
    pub n0: usize,
    pub n: usize,
}

impl OneLayerInstance {
    /// Gaussian `B0` and `U0`; the bound makes no assumption about either.
    pub fn random(k: usize, n0: usize, n: usize, seed: u64) -> OneLayerInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u0 = Matrix::from_vec(n, n0, gaussian_vec(&mut rng, n * n0)).unwrap();
        let b0 = Matrix::from_vec(n0, k, gaussian_vec(&mut rng, n0 * k)).unwrap();
        OneLayerInstance { b0, u0, k, n0, n }
    }

    /// The combined coupling `M = U0 B0`, an `n x k` matrix.
    fn coupling(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n * self.k];
        crate::tensor::gemm_nn(self.n, self.n0, self.k, self.u0.data(), self.b0.data(), &mut m);
        m
    }
}

/// The guaranteed fraction of noise energy a one-layer decoder must leave
/// behind: `1 - 20 k^2 ln(n0) / n`, valid while `k^2 ln(n0) / n <= 1/32`.
pub fn prop1_bound(k: usize, n0: usize, n: usize) -> Result<f64> {
    let ratio = (k * k) as f64 * (n0 as f64).ln() / n as f64;
    if ratio > 1.0 / 32.0 {
        return Err(Error::Assumption(format!(
            "k^2 ln(n0)/n = {ratio:.6} exceeds 1/32"
        )));
    }
    Ok(1.0 - 20.0 * ratio)
}

#[derive(Clone, Copy, Debug)]
pub struct Prop1Options {
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Prop1Options {
    fn default() -> Self {
        Prop1Options {
            restarts: 10,
            iterations: 300,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// One noise draw of the empirical bound check.
#[derive(Clone, Copy, Debug)]
pub struct Prop1Trial {
    pub achieved_ratio: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Prop1Trial {
    pub fn csv_row(&self, trial: usize) -> String {
        format!("{trial},{},{},{}\n", self.achieved_ratio, self.bound, self.pass)
    }
}

/// Solve `(R^T R + ridge I) c = R^T eta` for the output weights, the exact
/// inner minimization over `c1` at fixed `C0`.
fn solve_output_weights(r: &[f64], n: usize, k: usize, eta: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; k * k];
    crate::tensor::gemm_tn(n, k, k, r, r, &mut a);
    let mut b = vec![0.0; k];
    for (row, &e) in r.chunks_exact(k).zip(eta) {
        for j in 0..k {
            b[j] += row[j] * e;
        }
    }
    let trace: f64 = (0..k).map(|i| a[i * k + i]).sum();
    let ridge = 1e-12 * (trace / k as f64) + 1e-300;
    for i in 0..k {
        a[i * k + i] += ridge;
    }
    // Gaussian elimination with partial pivoting (k is tiny)
    let mut x = b;
    for col in 0..k {
        let mut piv = col;
        for row in col + 1..k {
            if a[row * k + col].abs() > a[piv * k + col].abs() {
                piv = row;
            }
        }
        if piv != col {
            for j in 0..k {
                a.swap(col * k + j, piv * k + j);
            }
            x.swap(col, piv);
        }
        let diag = a[col * k + col];
        if diag == 0.0 {
            continue;
        }
        for row in col + 1..k {
            let f = a[row * k + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..k {
                a[row * k + j] -= f * a[col * k + j];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..k).rev() {
        let diag = a[col * k + col];
        if diag == 0.0 {
            x[col] = 0.0;
            continue;
        }
        let mut s = x[col];
        for j in col + 1..k {
            s -= a[col * k + j] * x[j];
        }
        x[col] = s / diag;
    }
    x
}

/// Fit the one-layer model to pure Gaussian noise and report the achieved
/// normalized residual together with the theoretical lower bound.
///
/// The model has no channel normalization and no sigmoid. The output weights
/// are eliminated exactly by least squares at every step (the achievable set
/// is linear in `c1`), and Adam runs on `C0` from several random restarts;
/// the best restart is reported. Any optimizer result upper-bounds the true
/// minimum, so `achieved >= bound` must hold whenever the theorem does.
pub fn prop1_empirical(
    instance: &OneLayerInstance,
    sigma: f64,
    opts: &Prop1Options,
) -> Result<Prop1Trial> {
    let bound = prop1_bound(instance.k, instance.n0, instance.n)?;
    let (n, k) = (instance.n, instance.k);
    let m = instance.coupling();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0xe7a));
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let eta: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let eta_energy: f64 = eta.iter().map(|v| v * v).sum();

    let adam_opts = FitOptions {
        learning_rate: opts.learning_rate,
        ..FitOptions::default()
    };

    let loss_of = |c0: &[f64], pre: &mut Vec<f64>, r: &mut Vec<f64>| -> (f64, Vec<f64>) {
        pre.resize(n * k, 0.0);
        crate::tensor::gemm_nn(n, k, k, &m, c0, pre);
        r.resize(n * k, 0.0);
        for (dst, &v) in r.iter_mut().zip(pre.iter()) {
            *dst = v.max(0.0);
        }
        let c1 = solve_output_weights(r, n, k, &eta);
        (0.0, c1)
    };

    let mut best = f64::INFINITY;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, restart as u64 + 1));
        let init_sd = 1.0 / (k as f64).sqrt();
        let init = Normal::new(0.0, init_sd).unwrap();
        let mut c0: Vec<f64> = (0..k * k).map(|_| init.sample(&mut rng)).collect();
        let mut state = AdamState::new(k * k);
        let mut pre = Vec::new();
        let mut relu_buf = Vec::new();
        let mut grad = vec![0.0; k * k];
        for _ in 0..opts.iterations {
            let (_, c1) = loss_of(&c0, &mut pre, &mut relu_buf);
            // residual and projected loss at the optimal output weights
            let mut loss = 0.0;
            grad.fill(0.0);
            let mut d_pre = vec![0.0; n * k];
            for (row_idx, row) in relu_buf.chunks_exact(k).enumerate() {
                let out: f64 = row.iter().zip(&c1).map(|(a, b)| a * b).sum();
                let res = out - eta[row_idx];
                loss += res * res;
                for j in 0..k {
                    if pre[row_idx * k + j] > 0.0 {
                        d_pre[row_idx * k + j] = 2.0 * res * c1[j];
                    }
                }
            }
            best = best.min(loss);
            crate::tensor::gemm_tn(n, k, k, &m, &d_pre, &mut grad);
            adam_step(&mut c0, &grad, &mut state, &adam_opts);
            let _ = loss;
        }
        // closing evaluation of the final iterate
        let (_, c1) = loss_of(&c0, &mut pre, &mut relu_buf);
        let mut loss = 0.0;
        for (row_idx, row) in relu_buf.chunks_exact(k).enumerate() {
            let out: f64 = row.iter().zip(&c1).map(|(a, b)| a * b).sum();
            let res = out - eta[row_idx];
            loss += res * res;
        }
        best = best.min(loss);
    }
    let achieved = best / eta_energy;
    Ok(Prop1Trial {
        achieved_ratio: achieved,
        bound,
        pass: achieved >= bound,
    })
}

/// Run several independent noise draws against one instance.
pub fn prop1_trials(
    instance: &OneLayerInstance,
    sigma: f64,
    draws: usize,
    opts: &Prop1Options,
) -> Result<Vec<Prop1Trial>> {
    let trials: Vec<Result<Prop1Trial>> = (0..draws)
        .into_par_iter()
        .map(|draw| {
            let mut o = *opts;
            o.seed = mix_seed(opts.seed, 0x517a_0000 + draw as u64);
            prop1_empirical(instance, sigma, &o)
        })
        .collect();
    trials.into_iter().collect()
}

// ---------------------------------------------------------------------------
// deep noise fitting (soft, multi-layer behavior)
// ---------------------------------------------------------------------------

/// Residual noise energy fraction after fitting the full decoder to pure
/// Gaussian noise. A behavioral check, not a theorem: underparameterization
/// should leave most of the energy unexplained.
#[derive(Clone, Debug)]
pub struct NoiseFit {
    pub residual_fraction: f64,
    pub noise_energy: f64,
    pub final_loss: f64,
}

pub fn deep_noise_fit(
    config: &DecoderConfig,
    sigma: f64,
    options: &FitOptions,
    noise_seed: u64,
) -> Result<NoiseFit> {
    let zeros = ChannelStack::zeros(config.output_dims.0, config.output_dims.1, config.out_channels);
    let eta = add_noise(&zeros, sigma, noise_seed)?;
    let input = make_input(config)?;
    let init = ParamSet::random(config, mix_seed(options.seed, 0xdeef))?;
    let report = fit(config, &input, &init, &ForwardOp::Identity, &eta, options)?;
    let energy = eta.sq_norm();
    Ok(NoiseFit {
        residual_fraction: report.final_loss / energy,
        noise_energy: energy,
        final_loss: report.final_loss,
    })
}

// ---------------------------------------------------------------------------
// sign patterns
// ---------------------------------------------------------------------------

fn pattern_of(a: &Matrix, v: &[f64]) -> Vec<bool> {
    (0..a.rows())
        .map(|r| {
            let mut dot = 0.0;
            for c in 0..a.cols() {
                dot += a.get(r, c) * v[c];
            }
            dot > 0.0
        })
        .collect()
}

fn exact_patterns_k2(a: &Matrix) -> Result<HashSet<Vec<bool>>> {
    if a.cols() != 2 {
        return Err(Error::config("exact sign-pattern count requires k = 2"));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::config("matrix must have at least one row"));
    }
    for r in 0..n {
        let (p, q) = (a.get(r, 0), a.get(r, 1));
        if (p * p + q * q).sqrt() < 1e-12 {
            return Err(Error::Assumption(format!("row {r} is (numerically) zero")));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let cross = a.get(i, 0) * a.get(j, 1) - a.get(i, 1) * a.get(j, 0);
            let scale = (a.get(i, 0).hypot(a.get(i, 1))) * (a.get(j, 0).hypot(a.get(j, 1)));
            if cross.abs() <= 1e-12 * scale {
                return Err(Error::Assumption(format!("rows {i} and {j} are parallel")));
            }
        }
    }
    // each row's zero line contributes two boundary directions; the sectors
    // between consecutive boundaries are the chambers of the arrangement
    let tau = std::f64::consts::TAU;
    let mut boundaries = Vec::with_capacity(2 * n);
    for r in 0..n {
        let normal = a.get(r, 1).atan2(a.get(r, 0));
        for offset in [std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2] {
            boundaries.push((normal + offset).rem_euclid(tau));
        }
    }
    boundaries.sort_by(f64::total_cmp);
    let mut patterns = HashSet::new();
    for i in 0..boundaries.len() {
        let next = if i + 1 < boundaries.len() {
            boundaries[i + 1]
        } else {
            boundaries[0] + tau
        };
        let mid = 0.5 * (boundaries[i] + next);
        patterns.insert(pattern_of(a, &[mid.cos(), mid.sin()]));
    }
    Ok(patterns)
}

/// Exact number of ReLU activation patterns `{(Av > 0)}` for `k = 2`,
/// counted by a sweep over the chambers of the induced line arrangement.
/// Rows must be pairwise non-parallel and nonzero.
pub fn count_sign_patterns_exact(a: &Matrix) -> Result<usize> {
    Ok(exact_patterns_k2(a)?.len())
}

/// Monte-Carlo lower bound on the number of activation patterns for any `k`:
/// the number of distinct patterns among `samples` Gaussian directions.
pub fn count_sign_patterns_mc(a: &Matrix, samples: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patterns = HashSet::new();
    for _ in 0..samples {
        let v = gaussian_vec(&mut rng, a.cols());
        patterns.insert(pattern_of(a, &v));
    }
    patterns.len()
}

/// The classical chamber-count bound for `n` central hyperplanes in
/// dimension `k`: `2 * sum_{i=0}^{k-1} C(n-1, i)`.
pub fn pattern_count_bound(n: usize, k: usize) -> u128 {
    let mut total: u128 = 0;
    for i in 0..k.min(n) {
        total += binomial(n - 1, i);
    }
    2 * total
}

fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

// ---------------------------------------------------------------------------
// projection concentration
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate of how often a Gaussian vector loses more than the
/// guaranteed fraction of its energy to a random `l`-dimensional subspace.
#[derive(Clone, Debug)]
pub struct Lemma2Report {
    pub trials: usize,
    pub failures: usize,
    /// Ratio threshold `1 - 10 beta l / n`.
    pub threshold: f64,
    /// Theoretical failure probability `e^{-beta l} + e^{-n/16}`.
    pub bound_prob: f64,
    pub failure_rate: f64,
    pub mean_ratio: f64,
    pub ratios: Vec<f64>,
    pub pass: bool,
}

impl Lemma2Report {
    pub fn csv(&self) -> String {
        let mut out = String::from("trial,ratio,threshold,pass\n");
        for (i, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{i},{r},{},{}\n", self.threshold, *r >= self.threshold));
        }
        out
    }
}

/// Sample random orthonormal `l`-frames and Gaussian vectors, and measure
/// `||P_perp eta||^2 / ||eta||^2` against `1 - 10 beta l / n`.
pub fn lemma2_mc(n: usize, l: usize, beta: f64, trials: usize, seed: u64) -> Result<Lemma2Report> {
    if l > n {
        return Err(Error::config("subspace dimension cannot exceed the ambient one"));
    }
    if beta < 1.0 {
        return Err(Error::config("beta must be >= 1"));
    }
    let threshold = 1.0 - 10.0 * beta * l as f64 / n as f64;
    let ratios: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, t as u64));
            // orthonormal basis via modified Gram-Schmidt on Gaussian columns
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(l);
            while basis.len() < l {
                let mut q = gaussian_vec(&mut rng, n);
                for b in &basis {
                    let dot: f64 = q.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (qi, bi) in q.iter_mut().zip(b) {
                        *qi -= dot * bi;
                    }
                }
                let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    for qi in &mut q {
                        *qi /= norm;
                    }
                    basis.push(q);
                }
            }
            let eta = gaussian_vec(&mut rng, n);
            let energy: f64 = eta.iter().map(|v| v * v).sum();
            let projected: f64 = basis
                .iter()
                .map(|b| {
                    let dot: f64 = b.iter().zip(&eta).map(|(x, y)| x * y).sum();
                    dot * dot
                })
                .sum();
            1.0 - projected / energy
        })
        .collect();
    let failures = ratios.iter().filter(|&&r| r < threshold).count();
    let bound_prob = (-beta * l as f64).exp() + (-(n as f64) / 16.0).exp();
    let failure_rate = failures as f64 / trials.max(1) as f64;
    let slack = 3.0 * (bound_prob * (1.0 - bound_prob) / trials.max(1) as f64).sqrt();
    let mean_ratio = ratios.iter().sum::<f64>() / trials.max(1) as f64;
    Ok(Lemma2Report {
        trials,
        failures,
        threshold,
        bound_prob,
        failure_rate,
        mean_ratio,
        ratios,
        pass: failure_rate <= bound_prob + slack,
    })
}

// ---------------------------------------------------------------------------
// 1-D upsampling character
// ---------------------------------------------------------------------------

/// Fit a one-pixel-tall decoder to a 1-D target and return the estimate and
/// its mean squared error. The config's upsampler must be a 1-D kind and its
/// output length must match the signal.
pub fn upsampling_character_1d(
    config: &DecoderConfig,
    signal: &[f64],
    options: &FitOptions,
) -> Result<(Vec<f64>, f64)> {
    config.validate()?;
    if !matches!(config.upsampler, Upsampler::Linear1d | Upsampler::Convex1d(_)) {
        return Err(Error::config("1-D experiment requires a 1-D upsampler"));
    }
    if config.out_channels != 1 {
        return Err(Error::config("1-D experiment uses a single output channel"));
    }
    if config.output_dims != (1, signal.len()) {
        return Err(Error::shape(format!(
            "decoder renders {:?}, signal has length {}",
            config.output_dims,
            signal.len()
        )));
    }
    let y = ChannelStack::from_vec(1, signal.len(), 1, signal.to_vec())?;
    let input = make_input(config)?;
    let init = ParamSet::random(config, mix_seed(options.seed, 0x1d))?;
    let report = fit(config, &input, &init, &ForwardOp::Identity, &y, options)?;
    let estimate = forward(config, &input, &report.final_params)?;
    let mse = crate::inverse::mse(&estimate, &y)?;
    Ok((estimate.into_vec(), mse))
}

/// Total variation of the second difference, a roughness score used to
/// compare the character of 1-D estimates.
pub fn second_difference_tv(signal: &[f64]) -> f64 {
    signal
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
        .sum()
}
