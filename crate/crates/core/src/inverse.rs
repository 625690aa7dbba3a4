//! Forward operators for the three inverse problems (denoising,
//! super-resolution, inpainting), Gaussian noise synthesis, and the
//! PSNR/MSE metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::ChannelStack;

/// Downsampling factor of the super-resolution operator.
pub const SR_FACTOR: usize = 4;
const LANCZOS_A: f64 = 3.0;

/// The measurement map `f`.
#[derive(Clone, Debug)]
pub enum ForwardOp {
    /// Denoising: `f = id`.
    Identity,
    /// Inpainting: pixelwise multiplication by a 0/1 mask (1 = kept).
    Mask(ChannelStack),
    /// Super-resolution: separable Lanczos-3 filtering at stride 4,
    /// edge-clamped, taps normalized to sum 1.
    Downsample4,
}

impl ForwardOp {
    /// Build a masking operator; the mask must be single-channel with
    /// entries in `{0, 1}`.
    pub fn mask(mask: ChannelStack) -> Result<ForwardOp> {
        if mask.channels() != 1 {
            return Err(Error::shape("mask must have a single channel"));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::config("mask entries must be 0 or 1"));
        }
        Ok(ForwardOp::Mask(mask))
    }

    pub fn output_dims(&self, input_dims: (usize, usize)) -> Result<(usize, usize)> {
        match self {
            ForwardOp::Identity => Ok(input_dims),
            ForwardOp::Mask(m) => {
                if m.dims() != input_dims {
                    return Err(Error::shape(format!(
                        "mask dims {:?} do not match image dims {:?}",
                        m.dims(),
                        input_dims
                    )));
                }
                Ok(input_dims)
            }
            ForwardOp::Downsample4 => {
                let (h, w) = input_dims;
                if h % SR_FACTOR != 0 || w % SR_FACTOR != 0 {
                    return Err(Error::shape(format!(
                        "downsampling by {SR_FACTOR} needs dims divisible by {SR_FACTOR}, got {h}x{w}"
                    )));
                }
                Ok((h / SR_FACTOR, w / SR_FACTOR))
            }
        }
    }

    /// Apply `f` to an image.
    pub fn apply(&self, x: &ChannelStack) -> Result<ChannelStack> {
        self.output_dims(x.dims())?;
        match self {
            ForwardOp::Identity => Ok(x.clone()),
            ForwardOp::Mask(m) => {
                let mut out = x.clone();
                let k = x.channels();
                for (px, row) in out.data_mut().chunks_exact_mut(k).enumerate() {
                    let keep = m.data()[px];
                    for v in row {
                        *v *= keep;
                    }
                }
                Ok(out)
            }
            ForwardOp::Downsample4 => {
                let taps = lanczos_taps();
                let narrow = downsample_axis_cols(x, &taps);
                Ok(downsample_axis_rows(&narrow, &taps))
            }
        }
    }

    /// Apply the transpose of `f` (as a linear map) to a stack living in the
    /// observation space, producing one in the image space of `input_dims`.
    pub fn adjoint(&self, g: &ChannelStack, input_dims: (usize, usize)) -> Result<ChannelStack> {
        let out_dims = self.output_dims(input_dims)?;
        if g.dims() != out_dims {
            return Err(Error::shape(format!(
                "adjoint input dims {:?} do not match operator output {:?}",
                g.dims(),
                out_dims
            )));
        }
        match self {
            ForwardOp::Identity => Ok(g.clone()),
            ForwardOp::Mask(_) => self.apply(g),
            ForwardOp::Downsample4 => {
                let taps = lanczos_taps();
                let tall = upsample_adjoint_rows(g, input_dims.0, &taps);
                Ok(upsample_adjoint_cols(&tall, input_dims.1, &taps))
            }
        }
    }
}

fn lanczos(t: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.abs() >= LANCZOS_A {
        return 0.0;
    }
    let pt = std::f64::consts::PI * t;
    LANCZOS_A * pt.sin() * (pt / LANCZOS_A).sin() / (pt * pt)
}

/// The 24 filter taps shared by every output sample: the kernel is evaluated
/// at half-integer offsets from the block center and renormalized to sum 1.
fn lanczos_taps() -> Vec<f64> {
    let half_width = (LANCZOS_A * SR_FACTOR as f64) as usize; // 12
    let n = 2 * half_width; // 24
    let mut taps: Vec<f64> = (0..n)
        .map(|j| lanczos((j as f64 - (n as f64 - 1.0) / 2.0) / SR_FACTOR as f64))
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn downsample_axis_cols(x: &ChannelStack, taps: &[f64]) -> ChannelStack {
    let (h, w) = x.dims();
    let k = x.channels();
    let ow = w / SR_FACTOR;
    let mut out = ChannelStack::zeros(h, ow, k);
    let half = taps.len() as isize / 2;
    for r in 0..h {
        for o in 0..ow {
            let base = (SR_FACTOR * o) as isize + SR_FACTOR as isize / 2 - half;
            let dst_start = (r * ow + o) * k;
            for (j, &wt) in taps.iter().enumerate() {
                let src_col = (base + j as isize).clamp(0, w as isize - 1) as usize;
                let src = x.pixel(r, src_col);
                for ch in 0..k {
                    out.data_mut()[dst_start + ch] += wt * src[ch];
                }
            }
        }
    }
    out
}

fn downsample_axis_rows(x: &ChannelStack, taps: &[f64]) -> ChannelStack {
    let (h, w) = x.dims();
    let k = x.channels();
    let oh = h / SR_FACTOR;
    let mut out = ChannelStack::zeros(oh, w, k);
    let half = taps.len() as isize / 2;
    let row_len = w * k;
    for o in 0..oh {
        let base = (SR_FACTOR * o) as isize + SR_FACTOR as isize / 2 - half;
        let dst = o * row_len;
        for (j, &wt) in taps.iter().enumerate() {
            let src_row = (base + j as isize).clamp(0, h as isize - 1) as usize;
            let src = src_row * row_len;
            for i in 0..row_len {
                out.data_mut()[dst + i] += wt * x.data()[src + i];
            }
        }
    }
    out
}

fn upsample_adjoint_rows(g: &ChannelStack, target_h: usize, taps: &[f64]) -> ChannelStack {
    let (oh, w) = g.dims();
    let k = g.channels();
    let mut out = ChannelStack::zeros(target_h, w, k);
    let half = taps.len() as isize / 2;
    let row_len = w * k;
    for o in 0..oh {
        let base = (SR_FACTOR * o) as isize + SR_FACTOR as isize / 2 - half;
        let src = o * row_len;
        for (j, &wt) in taps.iter().enumerate() {
            let dst_row = (base + j as isize).clamp(0, target_h as isize - 1) as usize;
            let dst = dst_row * row_len;
            for i in 0..row_len {
                out.data_mut()[dst + i] += wt * g.data()[src + i];
            }
        }
    }
    out
}

fn upsample_adjoint_cols(g: &ChannelStack, target_w: usize, taps: &[f64]) -> ChannelStack {
    let (h, ow) = g.dims();
    let k = g.channels();
    let mut out = ChannelStack::zeros(h, target_w, k);
    let half = taps.len() as isize / 2;
    for r in 0..h {
        for o in 0..ow {
            let base = (SR_FACTOR * o) as isize + SR_FACTOR as isize / 2 - half;
            let src_start = (r * ow + o) * k;
            for (j, &wt) in taps.iter().enumerate() {
                let dst_col = (base + j as isize).clamp(0, target_w as isize - 1) as usize;
                let dst_start = (r * target_w + dst_col) * k;
                for ch in 0..k {
                    out.data_mut()[dst_start + ch] += wt * g.data()[src_start + ch];
                }
            }
        }
    }
    out
}

/// A measured image together with how it was produced.
#[derive(Clone, Debug)]
pub struct Observation {
    pub y: ChannelStack,
    pub op: ForwardOp,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Observation {
    /// Measure a ground-truth image: `y = f(x) + eta`.
    pub fn synthesize(x: &ChannelStack, op: ForwardOp, sigma: f64, seed: u64) -> Result<Observation> {
        let clean = op.apply(x)?;
        Ok(Observation {
            y: add_noise(&clean, sigma, seed)?,
            op,
            noise_sigma: sigma,
            seed,
        })
    }
}

/// Add i.i.d. Gaussian noise. Values are not clipped, so the result may
/// leave `[0, 1]`.
pub fn add_noise(x: &ChannelStack, sigma: f64, seed: u64) -> Result<ChannelStack> {
    if sigma < 0.0 {
        return Err(Error::config("sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// The noise level whose expected PSNR against the clean image is the given
/// value (on the `[0, 1]` scale): `MSE = sigma^2`.
pub fn sigma_for_input_psnr(psnr_db: f64) -> f64 {
    10f64.powf(-psnr_db / 20.0)
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &ChannelStack, b: &ChannelStack) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::shape("mse operands must have identical shape"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// PSNR cap used when two images agree (numerically) exactly.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio `10 log10(1 / MSE)` for images on a `[0, 1]`
/// scale, capped at 99 dB.
pub fn psnr(a: &ChannelStack, b: &ChannelStack) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}
