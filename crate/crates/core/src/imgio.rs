//! PNG loading and saving. Images are 8-bit on disk and `[0, 1]` reals in
//! memory; grayscale files map to one channel, everything else to three.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::ChannelStack;

pub fn load_png(path: impl AsRef<Path>) -> Result<ChannelStack> {
    let img = image::open(path.as_ref())?;
    Ok(match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            let data: Vec<f64> = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            ChannelStack::from_vec(h as usize, w as usize, 1, data)?
        }
        _ => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut data = Vec::with_capacity((w * h * 3) as usize);
            for p in rgb.pixels() {
                data.extend(p.0.iter().map(|&v| v as f64 / 255.0));
            }
            ChannelStack::from_vec(h as usize, w as usize, 3, data)?
        }
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(stack: &ChannelStack, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = stack.dims();
    match stack.channels() {
        1 => {
            let bytes: Vec<u8> = stack.data().iter().map(|&v| to_byte(v)).collect();
            let img = GrayImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| Error::shape("buffer does not match dims"))?;
            img.save(path.as_ref())?;
        }
        3 => {
            let bytes: Vec<u8> = stack.data().iter().map(|&v| to_byte(v)).collect();
            let img = RgbImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| Error::shape("buffer does not match dims"))?;
            img.save(path.as_ref())?;
        }
        k => return Err(Error::shape(format!("cannot save {k}-channel stack as PNG"))),
    }
    Ok(())
}

/// The in-memory equivalent of a PNG save/load round trip: every value
/// becomes `round(clamp(v) * 255) / 255`. Metrics computed on this match
/// recomputation from the saved file exactly.
pub fn quantize_to_u8_values(stack: &ChannelStack) -> ChannelStack {
    stack.map(|v| to_byte(v) as f64 / 255.0)
}

/// Load an inpainting mask: pixel values below 128 mark hidden regions (0),
/// the rest is kept (1).
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<ChannelStack> {
    let gray = image::open(path.as_ref())?.to_luma8();
    let (w, h) = gray.dimensions();
    let data: Vec<f64> = gray
        .pixels()
        .map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 })
        .collect();
    ChannelStack::from_vec(h as usize, w as usize, 1, data)
}

/// Cut the centered `h x w` window out of a larger stack.
pub fn center_crop(stack: &ChannelStack, h: usize, w: usize) -> Result<ChannelStack> {
    let (sh, sw) = stack.dims();
    if h > sh || w > sw || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "cannot crop {sh}x{sw} to {h}x{w}"
        )));
    }
    let k = stack.channels();
    let r0 = (sh - h) / 2;
    let c0 = (sw - w) / 2;
    let mut data = Vec::with_capacity(h * w * k);
    for r in 0..h {
        let start = ((r0 + r) * sw + c0) * k;
        data.extend_from_slice(&stack.data()[start..start + w * k]);
    }
    ChannelStack::from_vec(h, w, k, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_rgb_and_gray() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::synth::natural_scene(24, 16, 0);
        let path = dir.path().join("scene.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.dims(), (24, 16));
        assert_eq!(back.channels(), 3);
        assert_eq!(back, quantize_to_u8_values(&img));

        let gray = crate::synth::phantom(16, 16);
        let gpath = dir.path().join("phantom.png");
        save_png(&gray, &gpath).unwrap();
        let back = load_png(&gpath).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back, quantize_to_u8_values(&gray));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = crate::synth::random_mask(16, 16, 0.6, 1);
        let path = dir.path().join("mask.png");
        save_png(&mask, &path).unwrap();
        let back = load_mask_png(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn crop_is_centered() {
        let img = crate::synth::natural_scene(16, 16, 2);
        let crop = center_crop(&img, 8, 8).unwrap();
        assert_eq!(crop.dims(), (8, 8));
        assert_eq!(crop.get(0, 0, 0), img.get(4, 4, 0));
        assert!(center_crop(&img, 32, 8).is_err());
    }
}
