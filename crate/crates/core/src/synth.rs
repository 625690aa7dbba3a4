//! Deterministic procedural test images and signals.
//!
//! The experiment harness needs repeatable inputs without bundling photo
//! assets: scenes mix smooth gradients, soft and hard-edged shapes, oriented
//! gratings, and fine grain so that they behave like natural photographs for
//! compression and restoration purposes (neither trivially smooth nor pure
//! noise).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::ChannelStack;

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// A 3-channel scene; `variant` seeds the layout, so distinct variants give
/// distinct images while the same variant is bit-reproducible.
pub fn natural_scene(h: usize, w: usize, variant: u64) -> ChannelStack {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ce0e9a5u64.wrapping_add(variant));
    let mut img = ChannelStack::zeros(h, w, 3);
    let (hf, wf) = (h as f64, w as f64);

    // background: oblique color gradient
    let base_a: [f64; 3] = [rng.random_range(0.25..0.7), rng.random_range(0.25..0.7), rng.random_range(0.3..0.8)];
    let base_b: [f64; 3] = [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.1..0.5)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    for r in 0..h {
        for c in 0..w {
            let t = 0.5 + 0.5 * ((c as f64 / wf - 0.5) * ca + (r as f64 / hf - 0.5) * sa);
            for ch in 0..3 {
                img.set(r, c, ch, base_a[ch] * (1.0 - t) + base_b[ch] * t);
            }
        }
    }

    // large soft-edged ellipses
    let n_soft = rng.random_range(4..7);
    for _ in 0..n_soft {
        let cx = rng.random_range(0.1..0.9) * wf;
        let cy = rng.random_range(0.1..0.9) * hf;
        let rx = rng.random_range(0.08..0.3) * wf;
        let ry = rng.random_range(0.08..0.3) * hf;
        let feather = rng.random_range(0.02..0.08);
        let color: [f64; 3] = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let opacity = rng.random_range(0.55..0.95);
        for r in 0..h {
            for c in 0..w {
                let dx = (c as f64 - cx) / rx;
                let dy = (r as f64 - cy) / ry;
                let d = (dx * dx + dy * dy).sqrt();
                let alpha = opacity * (1.0 - smoothstep(1.0 - feather, 1.0 + feather, d));
                if alpha > 0.0 {
                    for ch in 0..3 {
                        let v = img.get(r, c, ch);
                        img.set(r, c, ch, v * (1.0 - alpha) + color[ch] * alpha);
                    }
                }
            }
        }
    }

    // smaller shapes with photographic edge softness (a lens never renders
    // a mathematical step edge)
    let n_hard = rng.random_range(2..4);
    for i in 0..n_hard {
        let color: [f64; 3] = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        let feather_px = rng.random_range(0.6..1.6);
        if i % 2 == 0 {
            let cx = rng.random_range(0.15..0.85) * wf;
            let cy = rng.random_range(0.15..0.85) * hf;
            let rx = rng.random_range(0.05..0.2) * wf;
            let ry = rng.random_range(0.05..0.2) * hf;
            for r in 0..h {
                for c in 0..w {
                    let dx = ((c as f64 - cx) / rx).abs();
                    let dy = ((r as f64 - cy) / ry).abs();
                    let d = dx.max(dy); // rounded-box profile
                    let alpha = 1.0 - smoothstep(1.0 - feather_px / rx.min(ry), 1.0, d);
                    if alpha > 0.0 {
                        for ch in 0..3 {
                            let v = img.get(r, c, ch);
                            img.set(r, c, ch, v * (1.0 - alpha) + color[ch] * alpha);
                        }
                    }
                }
            }
        } else {
            let cx = rng.random_range(0.15..0.85) * wf;
            let cy = rng.random_range(0.15..0.85) * hf;
            let rad = rng.random_range(0.05..0.16) * wf.min(hf);
            for r in 0..h {
                for c in 0..w {
                    let dx = c as f64 - cx;
                    let dy = r as f64 - cy;
                    let d = (dx * dx + dy * dy).sqrt();
                    let alpha = 1.0 - smoothstep(rad - feather_px, rad + feather_px, d);
                    if alpha > 0.0 {
                        for ch in 0..3 {
                            let v = img.get(r, c, ch);
                            img.set(r, c, ch, v * (1.0 - alpha) + color[ch] * alpha);
                        }
                    }
                }
            }
        }
    }

    // gentle low-frequency shading waves
    let n_waves = 4;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.008..0.045) * std::f64::consts::TAU;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.01..0.022);
            (theta, freq, phase, amp)
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let mut t = 0.0;
            for &(theta, freq, phase, amp) in &waves {
                let u = c as f64 * theta.cos() + r as f64 * theta.sin();
                t += amp * (freq * u + phase).sin();
            }
            for ch in 0..3 {
                let v = img.get(r, c, ch);
                img.set(r, c, ch, v + t);
            }
        }
    }

    // broadband sensor grain: white Gaussian, independent per subpixel; this
    // is the part no concise representation can keep
    let grain_std = 0.042;
    let normal = rand_distr::Normal::new(0.0, grain_std).unwrap();
    for v in img.data_mut().iter_mut() {
        *v = (*v + rand_distr::Distribution::sample(&normal, &mut rng)).clamp(0.02, 0.98);
    }
    img
}

/// Grayscale phantom: nested ellipses of constant intensity on a dark
/// background, in the style of standard tomography test images.
pub fn phantom(h: usize, w: usize) -> ChannelStack {
    let mut img = ChannelStack::zeros(h, w, 1);
    let (hf, wf) = (h as f64, w as f64);
    // (cx, cy, rx, ry, rotation, value)
    let ellipses: [(f64, f64, f64, f64, f64, f64); 6] = [
        (0.5, 0.5, 0.42, 0.46, 0.0, 0.82),
        (0.5, 0.5, 0.36, 0.40, 0.0, 0.25),
        (0.40, 0.42, 0.09, 0.16, 0.4, 0.65),
        (0.62, 0.44, 0.08, 0.14, -0.4, 0.55),
        (0.5, 0.65, 0.12, 0.06, 0.0, 0.9),
        (0.5, 0.32, 0.03, 0.03, 0.0, 0.95),
    ];
    for r in 0..h {
        for c in 0..w {
            let x = c as f64 / wf - 0.0;
            let y = r as f64 / hf - 0.0;
            let mut v = 0.05;
            for &(cx, cy, rx, ry, rot, val) in &ellipses {
                let dx = x - cx;
                let dy = y - cy;
                let (cr, sr) = (rot.cos(), rot.sin());
                let u = (dx * cr + dy * sr) / rx;
                let t = (-dx * sr + dy * cr) / ry;
                if u * u + t * t <= 1.0 {
                    v = val;
                }
            }
            img.set(r, c, 0, v);
        }
    }
    img
}

/// Smooth low-frequency ramp, useful where near-exact recovery is expected.
pub fn smooth_gradient(h: usize, w: usize, channels: usize) -> ChannelStack {
    let mut img = ChannelStack::zeros(h, w, channels);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..channels {
                let v = 0.15
                    + 0.6 * (c as f64 / w.max(1) as f64)
                    + 0.2 * (r as f64 / h.max(1) as f64).sin()
                    + 0.03 * ch as f64;
                img.set(r, c, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Bernoulli pixel mask: 1 with probability `keep_fraction`, single channel.
pub fn random_mask(h: usize, w: usize, keep_fraction: f64, seed: u64) -> ChannelStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..h * w)
        .map(|_| if rng.random::<f64>() < keep_fraction { 1.0 } else { 0.0 })
        .collect();
    ChannelStack::from_vec(h, w, 1, data).unwrap()
}

/// All-ones mask with a centered rectangular hole covering the given
/// fraction of each axis.
pub fn hole_mask(h: usize, w: usize, hole_fraction: f64) -> ChannelStack {
    let mut mask = ChannelStack::constant(h, w, 1, 1.0);
    let hh = ((h as f64 * hole_fraction) / 2.0) as usize;
    let hw = ((w as f64 * hole_fraction) / 2.0) as usize;
    for r in h / 2 - hh..h / 2 + hh {
        for c in w / 2 - hw..w / 2 + hw {
            mask.set(r, c, 0, 0.0);
        }
    }
    mask
}

/// One-dimensional piecewise-smooth target: a ramp, a flat plateau with a
/// step discontinuity, a sine arc, and a closing ramp, within `[0.1, 0.9]`.
pub fn piecewise_smooth_waveform(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 / (len.max(2) - 1) as f64;
            if t < 0.3 {
                0.2 + (0.55 / 0.3) * t
            } else if t < 0.5 {
                0.85 - 0.25 * (t - 0.3) / 0.2
            } else if t < 0.55 {
                0.25
            } else if t < 0.85 {
                0.5 + 0.3 * (std::f64::consts::PI * (t - 0.55) / 0.3).sin()
            } else {
                0.45 - 1.5 * (t - 0.85)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible_and_distinct() {
        let a = natural_scene(64, 64, 1);
        let b = natural_scene(64, 64, 1);
        assert_eq!(a, b);
        let c = natural_scene(64, 64, 2);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn masks_are_binary() {
        let m = random_mask(32, 32, 0.7, 3);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let frac = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!((frac - 0.7).abs() < 0.1);
        let hm = hole_mask(32, 32, 0.5);
        assert_eq!(hm.get(16, 16, 0), 0.0);
        assert_eq!(hm.get(1, 1, 0), 1.0);
    }

    #[test]
    fn waveform_in_range() {
        let wf = piecewise_smooth_waveform(241);
        assert_eq!(wf.len(), 241);
        assert!(wf.iter().all(|&v| (0.05..=0.95).contains(&v)));
        // contains an actual discontinuity
        let max_jump = wf.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_jump > 0.2);
    }
}
