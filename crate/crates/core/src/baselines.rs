//! Classical reference methods: orthogonal Daubechies-4 wavelet thresholding
//! (periodic boundary) for the compression comparison, and Catmull-Rom
//! bicubic interpolation for the super-resolution comparison.
//!
//! Orthonormality of the transform is load-bearing for the tests: the
//! reconstruction error of a thresholded expansion must equal the energy of
//! the discarded coefficients exactly (Parseval).

use crate::error::{Error, Result};
use crate::inverse::psnr;
use crate::tensor::ChannelStack;

/// Analysis low-pass filter of the 4-tap Daubechies wavelet.
fn daub4_lowpass() -> [f64; 4] {
    let s3 = 3f64.sqrt();
    let z = 4.0 * 2f64.sqrt();
    [(1.0 + s3) / z, (3.0 + s3) / z, (3.0 - s3) / z, (1.0 - s3) / z]
}

fn daub4_highpass(h: &[f64; 4]) -> [f64; 4] {
    [h[3], -h[2], h[1], -h[0]]
}

#[derive(Clone, Copy, Debug)]
pub struct WaveletConfig {
    pub levels: usize,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig { levels: 4 }
    }
}

/// Multi-level 2-D wavelet expansion of an image, one plane per channel,
/// stored in the standard in-place layout (approximation block top-left).
#[derive(Clone, Debug)]
pub struct WaveletCoeffs {
    height: usize,
    width: usize,
    channels: usize,
    levels: usize,
    data: Vec<f64>,
}

impl WaveletCoeffs {
    pub fn total(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Number of coarsest-level approximation coefficients (all channels).
    pub fn approx_len(&self) -> usize {
        (self.height >> self.levels) * (self.width >> self.levels) * self.channels
    }

    /// Flat indices (into `data`) of the coarsest approximation block.
    #[cfg(test)]
    fn is_approx_index(&self, idx: usize) -> bool {
        let plane = self.height * self.width;
        let within = idx % plane;
        let r = within / self.width;
        let c = within % self.width;
        r < self.height >> self.levels && c < self.width >> self.levels
    }
}

fn check_dims(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::config("levels must be >= 1"));
    }
    let m = 1usize << levels;
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "dims {h}x{w} not divisible by 2^levels = {m}"
        )));
    }
    Ok(())
}

/// One periodic analysis step along a length-`len` strided lane.
fn analyze_lane(buf: &mut [f64], idx: impl Fn(usize) -> usize, len: usize, tmp: &mut [f64]) {
    let h = daub4_lowpass();
    let g = daub4_highpass(&h);
    let half = len / 2;
    for i in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for m in 0..4 {
            let x = buf[idx((2 * i + m) % len)];
            a += h[m] * x;
            d += g[m] * x;
        }
        tmp[i] = a;
        tmp[half + i] = d;
    }
    for (i, &v) in tmp[..len].iter().enumerate() {
        buf[idx(i)] = v;
    }
}

/// One periodic synthesis step along a lane (transpose of `analyze_lane`).
fn synthesize_lane(buf: &mut [f64], idx: impl Fn(usize) -> usize, len: usize, tmp: &mut [f64]) {
    let h = daub4_lowpass();
    let g = daub4_highpass(&h);
    let half = len / 2;
    tmp[..len].fill(0.0);
    for i in 0..half {
        let a = buf[idx(i)];
        let d = buf[idx(half + i)];
        for m in 0..4 {
            tmp[(2 * i + m) % len] += a * h[m] + d * g[m];
        }
    }
    for (i, &v) in tmp[..len].iter().enumerate() {
        buf[idx(i)] = v;
    }
}

fn transform_plane(plane: &mut [f64], h: usize, w: usize, levels: usize, inverse: bool) {
    let mut tmp = vec![0.0; h.max(w)];
    let level_range: Vec<usize> = if inverse {
        (0..levels).rev().collect()
    } else {
        (0..levels).collect()
    };
    for level in level_range {
        let bh = h >> level;
        let bw = w >> level;
        if inverse {
            for c in 0..bw {
                synthesize_lane(plane, |i| i * w + c, bh, &mut tmp);
            }
            for r in 0..bh {
                synthesize_lane(plane, |i| r * w + i, bw, &mut tmp);
            }
        } else {
            for r in 0..bh {
                analyze_lane(plane, |i| r * w + i, bw, &mut tmp);
            }
            for c in 0..bw {
                analyze_lane(plane, |i| i * w + c, bh, &mut tmp);
            }
        }
    }
}

/// Forward multi-level 2-D transform.
pub fn dwt2(image: &ChannelStack, cfg: &WaveletConfig) -> Result<WaveletCoeffs> {
    let (h, w) = image.dims();
    check_dims(h, w, cfg.levels)?;
    let channels = image.channels();
    let mut data = Vec::with_capacity(image.len());
    for ch in 0..channels {
        let mut plane = image.channel_plane(ch);
        transform_plane(&mut plane, h, w, cfg.levels, false);
        data.extend_from_slice(&plane);
    }
    Ok(WaveletCoeffs {
        height: h,
        width: w,
        channels,
        levels: cfg.levels,
        data,
    })
}

/// Inverse transform back to an image.
pub fn idwt2(coeffs: &WaveletCoeffs) -> Result<ChannelStack> {
    let (h, w) = (coeffs.height, coeffs.width);
    let mut out = ChannelStack::zeros(h, w, coeffs.channels);
    for ch in 0..coeffs.channels {
        let mut plane = coeffs.data[ch * h * w..(ch + 1) * h * w].to_vec();
        transform_plane(&mut plane, h, w, coeffs.levels, true);
        out.set_channel_plane(ch, &plane);
    }
    Ok(out)
}

/// Keep the `n_keep` largest-magnitude coefficients across all channels and
/// subbands, zeroing the rest. Ties break by coefficient position, so the
/// kept sets are nested across budgets.
pub fn threshold_n(coeffs: &WaveletCoeffs, n_keep: usize) -> WaveletCoeffs {
    let total = coeffs.total();
    let n_keep = n_keep.min(total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_unstable_by(|&a, &b| {
        coeffs.data[b]
            .abs()
            .total_cmp(&coeffs.data[a].abs())
            .then(a.cmp(&b))
    });
    let mut out = WaveletCoeffs {
        data: vec![0.0; total],
        ..coeffs.clone()
    };
    for &idx in &order[..n_keep] {
        out.data[idx] = coeffs.data[idx];
    }
    out
}

/// PSNR of the image reconstructed from its `n_params` largest wavelet
/// coefficients, the equal-budget baseline for the compression experiment.
pub fn wavelet_psnr_at_budget(
    image: &ChannelStack,
    n_params: usize,
    cfg: &WaveletConfig,
) -> Result<f64> {
    if n_params == 0 {
        return Err(Error::config("budget must be >= 1"));
    }
    let coeffs = dwt2(image, cfg)?;
    let kept = threshold_n(&coeffs, n_params);
    let rec = idwt2(&kept)?;
    psnr(image, &rec)
}

/// Catmull-Rom kernel (cubic convolution with a = -1/2).
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn bicubic_axis_cols(x: &ChannelStack, factor: usize) -> ChannelStack {
    let (h, w) = x.dims();
    let k = x.channels();
    let ow = w * factor;
    let mut out = ChannelStack::zeros(h, ow, k);
    for r in 0..h {
        for o in 0..ow {
            let pos = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = pos.floor();
            let frac = pos - base;
            let dst = (r * ow + o) * k;
            for tap in -1i64..=2 {
                let wgt = catmull_rom(frac - tap as f64);
                let col = (base as i64 + tap).clamp(0, w as i64 - 1) as usize;
                let src = x.pixel(r, col);
                for ch in 0..k {
                    out.data_mut()[dst + ch] += wgt * src[ch];
                }
            }
        }
    }
    out
}

fn bicubic_axis_rows(x: &ChannelStack, factor: usize) -> ChannelStack {
    let (h, w) = x.dims();
    let k = x.channels();
    let oh = h * factor;
    let row_len = w * k;
    let mut out = ChannelStack::zeros(oh, w, k);
    for o in 0..oh {
        let pos = (o as f64 + 0.5) / factor as f64 - 0.5;
        let base = pos.floor();
        let frac = pos - base;
        let dst = o * row_len;
        for tap in -1i64..=2 {
            let wgt = catmull_rom(frac - tap as f64);
            let row = (base as i64 + tap).clamp(0, h as i64 - 1) as usize;
            let src = row * row_len;
            for i in 0..row_len {
                out.data_mut()[dst + i] += wgt * x.data()[src + i];
            }
        }
    }
    out
}

/// Upscale by an integer factor with edge-clamped Catmull-Rom interpolation.
pub fn bicubic_upsample(image: &ChannelStack, factor: usize) -> ChannelStack {
    if factor <= 1 {
        return image.clone();
    }
    let wide = bicubic_axis_cols(image, factor);
    bicubic_axis_rows(&wide, factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, k: usize, seed: u64) -> ChannelStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * k).map(|_| rng.random::<f64>()).collect();
        ChannelStack::from_vec(h, w, k, data).unwrap()
    }

    #[test]
    fn perfect_reconstruction() {
        let img = random_image(256, 256, 1, 1);
        let cfg = WaveletConfig::default();
        let rec = idwt2(&dwt2(&img, &cfg).unwrap()).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-9, "max err {max_err}");
    }

    #[test]
    fn constant_image_has_no_detail() {
        let img = ChannelStack::constant(64, 64, 3, 0.42);
        let cfg = WaveletConfig { levels: 3 };
        let coeffs = dwt2(&img, &cfg).unwrap();
        for idx in 0..coeffs.total() {
            if !coeffs.is_approx_index(idx) {
                assert!(coeffs.data()[idx].abs() < 1e-12);
            }
        }
        // keeping only the approximation block reconstructs exactly
        let kept = threshold_n(&coeffs, coeffs.approx_len());
        let rec = idwt2(&kept).unwrap();
        let err = crate::inverse::mse(&img, &rec).unwrap();
        assert!(err < 1e-24);
    }

    #[test]
    fn energy_is_preserved() {
        let img = random_image(128, 64, 3, 3);
        let coeffs = dwt2(&img, &WaveletConfig::default()).unwrap();
        let img_energy = img.sq_norm();
        let coeff_energy: f64 = coeffs.data().iter().map(|v| v * v).sum();
        assert!(
            (img_energy - coeff_energy).abs() <= 1e-9 * img_energy,
            "{img_energy} vs {coeff_energy}"
        );
    }

    #[test]
    fn threshold_identity_and_parseval() {
        let img = random_image(64, 64, 3, 7);
        let cfg = WaveletConfig { levels: 3 };
        let coeffs = dwt2(&img, &cfg).unwrap();

        let all = threshold_n(&coeffs, coeffs.total());
        assert_eq!(all.data(), coeffs.data());

        let kept = threshold_n(&coeffs, 500);
        let rec = idwt2(&kept).unwrap();
        let rec_err: f64 = img
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let discarded: f64 = coeffs
            .data()
            .iter()
            .zip(kept.data())
            .filter(|(_, &k)| k == 0.0)
            .map(|(&c, _)| c * c)
            .sum();
        assert!(
            (rec_err - discarded).abs() <= 1e-9 * discarded.max(1e-30),
            "{rec_err} vs {discarded}"
        );
    }

    #[test]
    fn keep_sets_are_nested_and_psnr_monotone() {
        let img = random_image(32, 32, 1, 9);
        let cfg = WaveletConfig { levels: 2 };
        let coeffs = dwt2(&img, &cfg).unwrap();
        let mut prev_kept: Vec<bool> = vec![false; coeffs.total()];
        let mut prev_psnr = 0.0;
        for budget in [1, 10, 100, 300, 700, 1024] {
            let kept = threshold_n(&coeffs, budget);
            let mask: Vec<bool> = kept.data().iter().map(|&v| v != 0.0).collect();
            for (was, now) in prev_kept.iter().zip(&mask) {
                assert!(!was | now, "keep-set not nested at budget {budget}");
            }
            let p = wavelet_psnr_at_budget(&img, budget, &cfg).unwrap();
            assert!(p >= prev_psnr, "psnr not monotone at budget {budget}");
            prev_kept = mask;
            prev_psnr = p;
        }
        assert_eq!(
            wavelet_psnr_at_budget(&img, coeffs.total(), &cfg).unwrap(),
            crate::inverse::PSNR_CAP
        );
    }

    #[test]
    fn dwt_rejects_bad_dims() {
        let img = random_image(48, 64, 1, 2);
        assert!(dwt2(&img, &WaveletConfig { levels: 5 }).is_err());
    }

    #[test]
    fn bicubic_basics() {
        let c = ChannelStack::constant(8, 8, 3, 0.37);
        let up = bicubic_upsample(&c, 4);
        assert_eq!(up.dims(), (32, 32));
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_recovers_smooth_ramp() {
        let img = crate::synth::smooth_gradient(64, 64, 1);
        let small = crate::inverse::ForwardOp::Downsample4.apply(&img).unwrap();
        let up = bicubic_upsample(&small, 4);
        let p = psnr(&img, &up).unwrap();
        assert!(p >= 40.0, "psnr {p}");
    }
}
