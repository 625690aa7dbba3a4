// Decisive sweep across all five scenes for the three restoration tasks.

use deep_decoder::baselines::{bicubic_upsample, wavelet_psnr_at_budget, WaveletConfig};
use deep_decoder::decoder::{forward, make_input, param_count, DecoderConfig, ParamSet, Upsampler};
use deep_decoder::inverse::{add_noise, psnr, ForwardOp};
use deep_decoder::optim::{fit, FitOptions};
use deep_decoder::synth::natural_scene;

fn main() {
    let task = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    for v in 0..5u64 {
        let img = natural_scene(256, 256, v);
        if task == "all" || task == "compress" {
            let cfg = DecoderConfig::uniform(6, 31, (8, 8), 3, Upsampler::Bilinear, v);
            let budget = param_count(&cfg);
            let input = make_input(&cfg).unwrap();
            let init = ParamSet::random(&cfg, 990 + v).unwrap();
            let opts = FitOptions { iterations: 1200, log_every: 1200, ..FitOptions::default() };
            let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &img, &opts).unwrap();
            let rec = forward(&cfg, &input, &report.final_params).unwrap();
            let dd = psnr(&img, &rec).unwrap();
            let wv = wavelet_psnr_at_budget(&img, budget, &WaveletConfig::default()).unwrap();
            println!("compress v{v}: N={budget} dd={dd:.2} wavelet={wv:.2} gap={:+.2}", dd - wv);
        }
        if task == "all" || task == "superres" {
            let y = ForwardOp::Downsample4.apply(&img).unwrap();
            let bic = psnr(&img, &bicubic_upsample(&y, 4)).unwrap();
            let cfg = DecoderConfig::uniform(6, 128, (8, 8), 3, Upsampler::Bilinear, v);
            let input = make_input(&cfg).unwrap();
            let init = ParamSet::random(&cfg, 1010 + v).unwrap();
            let opts = FitOptions { iterations: 800, log_every: 200, truth: Some(img.clone()), ..FitOptions::default() };
            let report = fit(&cfg, &input, &init, &ForwardOp::Downsample4, &y, &opts).unwrap();
            let rec = forward(&cfg, &input, &report.final_params).unwrap();
            let dd = psnr(&img, &rec).unwrap();
            println!("superres v{v}: dd={dd:.2} bicubic={bic:.2} margin={:+.2} trace={:?}",
                     dd - bic, report.psnr_trace.unwrap());
        }
        if task == "all" || task == "denoise" {
            let y = add_noise(&img, 0.1, 800 + v).unwrap();
            let inp = psnr(&img, &y).unwrap();
            let cfg = DecoderConfig::uniform(6, 128, (8, 8), 3, Upsampler::Bilinear, v);
            let input = make_input(&cfg).unwrap();
            let init = ParamSet::random(&cfg, 880 + v).unwrap();
            let opts = FitOptions { iterations: 600, log_every: 100, truth: Some(img.clone()), ..FitOptions::default() };
            let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
            let rec = forward(&cfg, &input, &report.final_params).unwrap();
            let out = psnr(&img, &rec).unwrap();
            println!("denoise v{v}: in={inp:.2} out={out:.2} gain={:+.2} trace={:?}",
                     out - inp, report.psnr_trace.unwrap());
        }
    }
}
