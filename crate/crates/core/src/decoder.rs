//! The decoder architecture: a fixed random input tensor pushed through
//! `depth` layers of per-pixel channel mixing, upsampling, ReLU, and channel
//! normalization, finished by a sigmoid output head. All expressive power
//! lives in the mixing weights and the per-channel normalization affines;
//! spatial coupling comes from upsampling alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{relu_in_place, sigmoid_in_place, ChannelStack, Matrix};

/// Spatial interpolation applied between layers.
///
/// `Bilinear` and `Nearest` double both axes of a 2-D stack. `Linear1d` and
/// `Convex1d` act on one-pixel-tall stacks and insert one sample between each
/// neighboring pair (length `m` becomes `2m - 1`); the inserted sample is the
/// midpoint for `Linear1d` and the `lambda`-weighted combination of the left
/// and right neighbors for `Convex1d(lambda)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampler {
    Bilinear,
    Nearest,
    Identity,
    Linear1d,
    Convex1d(f64),
}

impl Upsampler {
    fn is_one_dimensional(self) -> bool {
        matches!(self, Upsampler::Linear1d | Upsampler::Convex1d(_))
    }

    /// Output spatial dims of one application.
    pub fn upsampled_dims(self, dims: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = dims;
        match self {
            Upsampler::Identity => Ok((h, w)),
            Upsampler::Bilinear | Upsampler::Nearest => Ok((2 * h, 2 * w)),
            Upsampler::Linear1d | Upsampler::Convex1d(_) => {
                if h != 1 {
                    return Err(Error::shape(format!(
                        "1-D upsampling requires height 1, got {h}"
                    )));
                }
                Ok((1, 2 * w - 1))
            }
        }
    }
}

fn default_input_scale() -> f64 {
    0.1
}

/// Architecture description. `channels` lists the width of every tensor
/// `B_0..B_depth`, so it has `depth + 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub input_dims: (usize, usize),
    pub output_dims: (usize, usize),
    pub out_channels: usize,
    pub upsampler: Upsampler,
    pub cn_epsilon: f64,
    pub seed: u64,
    /// Entries of the fixed input are drawn uniformly from `[0, input_scale)`.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

impl DecoderConfig {
    /// A depth-`d` decoder with `k` channels at every layer.
    pub fn uniform(
        depth: usize,
        k: usize,
        input_dims: (usize, usize),
        out_channels: usize,
        upsampler: Upsampler,
        seed: u64,
    ) -> Self {
        let mut dims = input_dims;
        for _ in 0..depth.saturating_sub(1) {
            dims = upsampler.upsampled_dims(dims).unwrap_or(dims);
        }
        DecoderConfig {
            depth,
            channels: vec![k; depth + 1],
            input_dims,
            output_dims: dims,
            out_channels,
            upsampler,
            cn_epsilon: 1e-5,
            seed,
            input_scale: default_input_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.channels.len() != self.depth + 1 {
            return Err(Error::config(format!(
                "channels must list k_0..k_{} ({} entries), got {}",
                self.depth,
                self.depth + 1,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&k| k == 0) {
            return Err(Error::config("all channel counts must be >= 1"));
        }
        if self.out_channels != 1 && self.out_channels != 3 {
            return Err(Error::config("out_channels must be 1 or 3"));
        }
        if !(self.cn_epsilon > 0.0) {
            return Err(Error::config("cn_epsilon must be positive"));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::config("input_scale must be positive"));
        }
        if self.input_dims.0 == 0 || self.input_dims.1 == 0 {
            return Err(Error::config("input_dims must be nonzero"));
        }
        if let Upsampler::Convex1d(lambda) = self.upsampler {
            if !(lambda > 0.0 && lambda < 1.0) {
                return Err(Error::config("convex1d weight must lie in (0, 1)"));
            }
        }
        if self.upsampler.is_one_dimensional() && self.input_dims.1 < 2 && self.depth > 1 {
            return Err(Error::config("1-D upsampling needs input width >= 2"));
        }
        let expected = self.layer_dims()?;
        if *expected.last().unwrap() != self.output_dims {
            return Err(Error::config(format!(
                "output_dims {:?} inconsistent with input_dims {:?}, depth {} and upsampler {:?} (expected {:?})",
                self.output_dims,
                self.input_dims,
                self.depth,
                self.upsampler,
                expected.last().unwrap()
            )));
        }
        Ok(())
    }

    /// Spatial dims of `B_0..B_depth`. The final layer does not upsample.
    pub fn layer_dims(&self) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        dims.push(self.input_dims);
        for i in 0..self.depth {
            let prev = dims[i];
            let next = if i < self.depth - 1 {
                self.upsampler.upsampled_dims(prev)?
            } else {
                prev
            };
            dims.push(next);
        }
        Ok(dims)
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig::uniform(6, 64, (16, 16), 3, Upsampler::Bilinear, 0)
    }
}

/// Total number of trainable scalars: every mixing matrix plus the two
/// normalization parameters per normalized channel. For uniform `k` and
/// three output channels this is `d*k^2 + 2*d*k + 3*k`.
pub fn param_count(config: &DecoderConfig) -> usize {
    let d = config.depth;
    let k = &config.channels;
    let mut n = 0;
    for i in 0..d {
        n += k[i] * k[i + 1] + 2 * k[i + 1];
    }
    n + k[d] * config.out_channels
}

/// Parameter count of the hypothetical variant whose channel mixing uses
/// `p x p` filters instead of per-pixel combinations. Only the count is
/// modeled; there is no executable path for `p > 1`. For uniform `k` this is
/// `p^2 (d*k^2 + 3*k) + 2*d*k`, which at `p = 1` regroups to `param_count`.
pub fn param_count_conv(config: &DecoderConfig, p: usize) -> Result<usize> {
    if p == 0 || p % 2 == 0 {
        return Err(Error::config(format!("filter size must be odd and >= 1, got {p}")));
    }
    let d = config.depth;
    let k = &config.channels;
    let mixing: usize = (0..d).map(|i| k[i] * k[i + 1]).sum::<usize>() + k[d] * config.out_channels;
    let norm: usize = (0..d).map(|i| 2 * k[i + 1]).sum();
    Ok(p * p * mixing + norm)
}

/// The fixed random network input `B_0`.
#[derive(Clone, Debug)]
pub struct FixedInput {
    b0: ChannelStack,
    seed: u64,
}

impl FixedInput {
    pub fn stack(&self) -> &ChannelStack {
        &self.b0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replace the stack, e.g. to permute pixels in experiments. Dims must match.
    pub fn with_stack(&self, b0: ChannelStack) -> Result<FixedInput> {
        if b0.dims() != self.b0.dims() || b0.channels() != self.b0.channels() {
            return Err(Error::shape("replacement input must keep dims and channels"));
        }
        Ok(FixedInput { b0, seed: self.seed })
    }
}

/// Draw the fixed input: entries i.i.d. uniform on `[0, input_scale)`,
/// deterministic in `config.seed`.
pub fn make_input(config: &DecoderConfig) -> Result<FixedInput> {
    config.validate()?;
    let (h, w) = config.input_dims;
    let k0 = config.channels[0];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let data: Vec<f64> = (0..h * w * k0)
        .map(|_| rng.random::<f64>() * config.input_scale)
        .collect();
    Ok(FixedInput {
        b0: ChannelStack::from_vec(h, w, k0, data)?,
        seed: config.seed,
    })
}

/// All trainable scalars: mixing matrices `C_0..C_depth` plus per-layer,
/// per-channel normalization scale/shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    /// `C_i` has shape `k_i x k_{i+1}`; the last entry is the `k_d x out_channels` head.
    pub weights: Vec<Matrix>,
    /// `gamma[i][j]` scales channel `j` of layer `i`; length `depth`, each `k_{i+1}`.
    pub gamma: Vec<Vec<f64>>,
    /// `beta[i][j]` shifts channel `j` of layer `i`.
    pub beta: Vec<Vec<f64>>,
}

impl ParamSet {
    /// Gaussian mixing weights with std `1/sqrt(fan_in)`, `gamma = 1`, `beta = 0`.
    pub fn random(config: &DecoderConfig, seed: u64) -> Result<ParamSet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.depth;
        let k = &config.channels;
        let mut weights = Vec::with_capacity(d + 1);
        for i in 0..=d {
            let (rows, cols) = if i < d {
                (k[i], k[i + 1])
            } else {
                (k[d], config.out_channels)
            };
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Matrix::from_vec(rows, cols, data)?);
        }
        let gamma = (0..d).map(|i| vec![1.0; k[i + 1]]).collect();
        let beta = (0..d).map(|i| vec![0.0; k[i + 1]]).collect();
        Ok(ParamSet { weights, gamma, beta })
    }

    pub fn zeros(config: &DecoderConfig) -> Result<ParamSet> {
        config.validate()?;
        let d = config.depth;
        let k = &config.channels;
        let mut weights = Vec::with_capacity(d + 1);
        for i in 0..=d {
            let (rows, cols) = if i < d {
                (k[i], k[i + 1])
            } else {
                (k[d], config.out_channels)
            };
            weights.push(Matrix::zeros(rows, cols));
        }
        Ok(ParamSet {
            weights,
            gamma: (0..d).map(|i| vec![1.0; k[i + 1]]).collect(),
            beta: (0..d).map(|i| vec![0.0; k[i + 1]]).collect(),
        })
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

    /// Scalars in a fixed order: all weight matrices, then per layer gamma
    /// followed by beta.
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

    /// Inverse of [`copy_to_flat`](Self::copy_to_flat).
    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for w in &mut self.weights {
            let len = w.len();
            w.data_mut().copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        for (g, b) in self.gamma.iter_mut().zip(&mut self.beta) {
            let glen = g.len();
            g.copy_from_slice(&flat[pos..pos + glen]);
            pos += glen;
            let blen = b.len();
            b.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
        debug_assert_eq!(pos, flat.len());
    }

    pub(crate) fn check_shapes(&self, config: &DecoderConfig) -> Result<()> {
        let d = config.depth;
        let k = &config.channels;
        if self.weights.len() != d + 1 || self.gamma.len() != d || self.beta.len() != d {
            return Err(Error::shape("parameter set does not match config depth"));
        }
        for i in 0..=d {
            let (rows, cols) = if i < d {
                (k[i], k[i + 1])
            } else {
                (k[d], config.out_channels)
            };
            if self.weights[i].rows() != rows || self.weights[i].cols() != cols {
                return Err(Error::shape(format!(
                    "weight {i} has shape {}x{}, expected {rows}x{cols}",
                    self.weights[i].rows(),
                    self.weights[i].cols()
                )));
            }
        }
        for i in 0..d {
            if self.gamma[i].len() != k[i + 1] || self.beta[i].len() != k[i + 1] {
                return Err(Error::shape(format!("normalization params of layer {i} sized wrong")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// channel normalization
// ---------------------------------------------------------------------------

/// Per-channel mean and reciprocal standard deviation captured during a
/// normalization pass; the backward pass reuses them.
#[derive(Clone, Debug, Default)]
pub(crate) struct CnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalize each channel to zero mean / unit variance (population variance,
/// stabilized by `eps`), then apply the learned affine `gamma, beta`.
pub fn channel_norm(
    z: &ChannelStack,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<ChannelStack> {
    if gamma.len() != z.channels() || beta.len() != z.channels() {
        return Err(Error::shape(format!(
            "gamma/beta must have {} entries",
            z.channels()
        )));
    }
    if eps < 0.0 {
        return Err(Error::config("eps must be >= 0"));
    }
    let mut out = z.clone();
    let mut stats = CnStats::default();
    cn_forward(z.data(), out.data_mut(), z.channels(), gamma, beta, eps, &mut stats);
    Ok(out)
}

pub(crate) fn cn_forward(
    src: &[f64],
    dst: &mut [f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    stats: &mut CnStats,
) {
    let n = (src.len() / channels) as f64;
    let sums = crate::tensor::row_chunked_sums(src, channels, channels, |acc, row| {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    });
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let sq_sums = crate::tensor::row_chunked_sums(src, channels, channels, |acc, row| {
        for ((a, &v), &m) in acc.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *a += d * d;
        }
    });
    let inv_std: Vec<f64> = sq_sums
        .iter()
        .map(|s| {
            let denom = (s / n + eps).sqrt();
            // eps = 0 on a constant channel: define the normalized value as 0
            if denom > 0.0 {
                1.0 / denom
            } else {
                0.0
            }
        })
        .collect();
    for (out_row, in_row) in dst.chunks_exact_mut(channels).zip(src.chunks_exact(channels)) {
        for j in 0..channels {
            out_row[j] = (in_row[j] - mean[j]) * inv_std[j] * gamma[j] + beta[j];
        }
    }
    stats.mean = mean;
    stats.inv_std = inv_std;
}

// ---------------------------------------------------------------------------
// upsampling kernels
//
// Doubling along an axis follows the corner-aligned rule: even outputs copy
// the source sample, odd outputs blend the two neighbors with weights
// (w_left, w_right), and the final output replicates the edge. Linear uses
// (1/2, 1/2), nearest (1, 0). The 1-D insertion rule instead produces length
// 2m-1 with no trailing replicate.
// ---------------------------------------------------------------------------

fn blend(dst: &mut [f64], a: &[f64], b: &[f64], wl: f64, wr: f64) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d = wl * x + wr * y;
    }
}

fn double_rows(src: &[f64], rows: usize, row_len: usize, wl: f64, wr: f64, dst: &mut [f64]) {
    for i in 0..rows {
        let s = &src[i * row_len..(i + 1) * row_len];
        dst[2 * i * row_len..(2 * i + 1) * row_len].copy_from_slice(s);
        let out_start = (2 * i + 1) * row_len;
        if i + 1 < rows {
            let t = &src[(i + 1) * row_len..(i + 2) * row_len];
            blend(&mut dst[out_start..out_start + row_len], s, t, wl, wr);
        } else {
            dst[out_start..out_start + row_len].copy_from_slice(s);
        }
    }
}

fn double_rows_adjoint(gout: &[f64], rows: usize, row_len: usize, wl: f64, wr: f64, gin: &mut [f64]) {
    for i in 0..rows {
        let g = &mut gin[i * row_len..(i + 1) * row_len];
        let even = &gout[2 * i * row_len..(2 * i + 1) * row_len];
        g.copy_from_slice(even);
        if i + 1 < rows {
            let odd = &gout[(2 * i + 1) * row_len..(2 * i + 2) * row_len];
            for (gv, &o) in g.iter_mut().zip(odd) {
                *gv += wl * o;
            }
        } else {
            let last = &gout[(2 * i + 1) * row_len..(2 * i + 2) * row_len];
            for (gv, &o) in g.iter_mut().zip(last) {
                *gv += o;
            }
        }
        if i >= 1 {
            let odd_prev = &gout[(2 * i - 1) * row_len..(2 * i) * row_len];
            for (gv, &o) in g.iter_mut().zip(odd_prev) {
                *gv += wr * o;
            }
        }
    }
}

fn double_cols(src: &[f64], h: usize, w: usize, k: usize, wl: f64, wr: f64, dst: &mut [f64]) {
    let in_row = w * k;
    let out_row = 2 * w * k;
    for r in 0..h {
        let s = &src[r * in_row..(r + 1) * in_row];
        let d = &mut dst[r * out_row..(r + 1) * out_row];
        for c in 0..w {
            let x = &s[c * k..(c + 1) * k];
            d[2 * c * k..(2 * c + 1) * k].copy_from_slice(x);
            let out_start = (2 * c + 1) * k;
            if c + 1 < w {
                let y = &s[(c + 1) * k..(c + 2) * k];
                blend(&mut d[out_start..out_start + k], x, y, wl, wr);
            } else {
                d[out_start..out_start + k].copy_from_slice(x);
            }
        }
    }
}

fn double_cols_adjoint(gout: &[f64], h: usize, w: usize, k: usize, wl: f64, wr: f64, gin: &mut [f64]) {
    let in_row = w * k;
    let out_row = 2 * w * k;
    for r in 0..h {
        let go = &gout[r * out_row..(r + 1) * out_row];
        let gi = &mut gin[r * in_row..(r + 1) * in_row];
        for c in 0..w {
            let g = &mut gi[c * k..(c + 1) * k];
            g.copy_from_slice(&go[2 * c * k..(2 * c + 1) * k]);
            if c + 1 < w {
                for (gv, &o) in g.iter_mut().zip(&go[(2 * c + 1) * k..(2 * c + 2) * k]) {
                    *gv += wl * o;
                }
            } else {
                for (gv, &o) in g.iter_mut().zip(&go[(2 * c + 1) * k..(2 * c + 2) * k]) {
                    *gv += o;
                }
            }
            if c >= 1 {
                for (gv, &o) in g.iter_mut().zip(&go[(2 * c - 1) * k..(2 * c) * k]) {
                    *gv += wr * o;
                }
            }
        }
    }
}

fn insert_cols(src: &[f64], w: usize, k: usize, lambda: f64, dst: &mut [f64]) {
    for c in 0..w {
        let x = &src[c * k..(c + 1) * k];
        dst[2 * c * k..(2 * c + 1) * k].copy_from_slice(x);
        if c + 1 < w {
            let y = &src[(c + 1) * k..(c + 2) * k];
            let out_start = (2 * c + 1) * k;
            blend(&mut dst[out_start..out_start + k], x, y, lambda, 1.0 - lambda);
        }
    }
}

fn insert_cols_adjoint(gout: &[f64], w: usize, k: usize, lambda: f64, gin: &mut [f64]) {
    for c in 0..w {
        let g = &mut gin[c * k..(c + 1) * k];
        g.copy_from_slice(&gout[2 * c * k..(2 * c + 1) * k]);
        if c + 1 < w {
            for (gv, &o) in g.iter_mut().zip(&gout[(2 * c + 1) * k..(2 * c + 2) * k]) {
                *gv += lambda * o;
            }
        }
        if c >= 1 {
            for (gv, &o) in g.iter_mut().zip(&gout[(2 * c - 1) * k..(2 * c) * k]) {
                *gv += (1.0 - lambda) * o;
            }
        }
    }
}

pub(crate) fn upsample_into(
    kind: Upsampler,
    src: &[f64],
    dims: (usize, usize),
    channels: usize,
    dst: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let (h, w) = dims;
    match kind {
        Upsampler::Identity => dst.copy_from_slice(src),
        Upsampler::Bilinear | Upsampler::Nearest => {
            let (wl, wr) = if kind == Upsampler::Bilinear { (0.5, 0.5) } else { (1.0, 0.0) };
            scratch.resize(2 * h * w * channels, 0.0);
            double_rows(src, h, w * channels, wl, wr, scratch);
            double_cols(scratch, 2 * h, w, channels, wl, wr, dst);
        }
        Upsampler::Linear1d => insert_cols(src, w, channels, 0.5, dst),
        Upsampler::Convex1d(lambda) => insert_cols(src, w, channels, lambda, dst),
    }
}

pub(crate) fn upsample_adjoint_into(
    kind: Upsampler,
    gout: &[f64],
    dims: (usize, usize),
    channels: usize,
    gin: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let (h, w) = dims; // input dims
    match kind {
        Upsampler::Identity => gin.copy_from_slice(gout),
        Upsampler::Bilinear | Upsampler::Nearest => {
            let (wl, wr) = if kind == Upsampler::Bilinear { (0.5, 0.5) } else { (1.0, 0.0) };
            scratch.resize(2 * h * w * channels, 0.0);
            double_cols_adjoint(gout, 2 * h, w, channels, wl, wr, scratch);
            double_rows_adjoint(scratch, h, w * channels, wl, wr, gin);
        }
        Upsampler::Linear1d => insert_cols_adjoint(gout, w, channels, 0.5, gin),
        Upsampler::Convex1d(lambda) => insert_cols_adjoint(gout, w, channels, lambda, gin),
    }
}

/// Apply one upsampling step to a stack.
pub fn upsample(b: &ChannelStack, kind: Upsampler) -> Result<ChannelStack> {
    if kind.is_one_dimensional() && b.height() != 1 {
        return Err(Error::shape(format!(
            "{kind:?} applies to one-pixel-tall stacks, got height {}",
            b.height()
        )));
    }
    if let Upsampler::Convex1d(lambda) = kind {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::config("convex1d weight must lie in (0, 1)"));
        }
    }
    let (oh, ow) = kind.upsampled_dims(b.dims())?;
    let mut out = ChannelStack::zeros(oh, ow, b.channels());
    let mut scratch = Vec::new();
    upsample_into(kind, b.data(), b.dims(), b.channels(), out.data_mut(), &mut scratch);
    Ok(out)
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

/// Every intermediate the backward pass needs: layer inputs `B_i`, post-ReLU
/// maps `R_i` (pre-normalization), normalization statistics, and the output
/// image. Buffers are reused across calls when shapes match.
#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace {
    pub stacks: Vec<ChannelStack>,
    pub relu_maps: Vec<ChannelStack>,
    pub stats: Vec<CnStats>,
    pub image: ChannelStack,
    product: Vec<f64>,
    scratch: Vec<f64>,
}

impl ForwardTrace {
    pub fn new(config: &DecoderConfig) -> Result<ForwardTrace> {
        config.validate()?;
        let dims = config.layer_dims()?;
        let d = config.depth;
        let k = &config.channels;
        let mut stacks = Vec::with_capacity(d + 1);
        let mut relu_maps = Vec::with_capacity(d);
        for i in 0..=d {
            let (h, w) = dims[i];
            stacks.push(ChannelStack::zeros(h, w, k[i]));
            if i < d {
                let (nh, nw) = dims[i + 1];
                relu_maps.push(ChannelStack::zeros(nh, nw, k[i + 1]));
            }
        }
        let (oh, ow) = dims[d];
        Ok(ForwardTrace {
            stacks,
            relu_maps,
            stats: vec![CnStats::default(); d],
            image: ChannelStack::zeros(oh, ow, config.out_channels),
            product: Vec::new(),
            scratch: Vec::new(),
        })
    }

    pub fn run(
        &mut self,
        config: &DecoderConfig,
        input: &FixedInput,
        params: &ParamSet,
    ) -> Result<()> {
        params.check_shapes(config)?;
        let b0 = input.stack();
        if b0.dims() != config.input_dims || b0.channels() != config.channels[0] {
            return Err(Error::shape("input stack does not match config"));
        }
        let d = config.depth;
        self.stacks[0].data_mut().copy_from_slice(b0.data());
        for i in 0..d {
            let (b_i, rest) = self.stacks.split_at_mut(i + 1);
            let b_i = &b_i[i];
            let b_next = &mut rest[0];
            let c_i = &params.weights[i];
            let k_next = c_i.cols();
            self.product.resize(b_i.pixels() * k_next, 0.0);
            crate::tensor::gemm_nn(
                b_i.pixels(),
                b_i.channels(),
                k_next,
                b_i.data(),
                c_i.data(),
                &mut self.product,
            );
            let relu_map = &mut self.relu_maps[i];
            let kind = if i < d - 1 { config.upsampler } else { Upsampler::Identity };
            upsample_into(
                kind,
                &self.product,
                b_i.dims(),
                k_next,
                relu_map.data_mut(),
                &mut self.scratch,
            );
            relu_in_place(relu_map.data_mut());
            cn_forward(
                relu_map.data(),
                b_next.data_mut(),
                k_next,
                &params.gamma[i],
                &params.beta[i],
                config.cn_epsilon,
                &mut self.stats[i],
            );
        }
        let b_d = &self.stacks[d];
        let head = &params.weights[d];
        crate::tensor::gemm_nn(
            b_d.pixels(),
            b_d.channels(),
            head.cols(),
            b_d.data(),
            head.data(),
            self.image.data_mut(),
        );
        sigmoid_in_place(self.image.data_mut());
        Ok(())
    }
}

/// Render the image for the given parameters. Deterministic in
/// `(input, params)`; the output lies strictly inside `(0, 1)`.
pub fn forward(
    config: &DecoderConfig,
    input: &FixedInput,
    params: &ParamSet,
) -> Result<ChannelStack> {
    let mut trace = ForwardTrace::new(config)?;
    trace.run(config, input, params)?;
    Ok(trace.image)
}

/// The post-ReLU (pre-normalization) activation maps of every layer.
pub fn layer_activations(
    config: &DecoderConfig,
    input: &FixedInput,
    params: &ParamSet,
) -> Result<Vec<ChannelStack>> {
    let mut trace = ForwardTrace::new(config)?;
    trace.run(config, input, params)?;
    Ok(trace.relu_maps)
}
