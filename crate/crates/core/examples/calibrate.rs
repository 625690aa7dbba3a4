// Convergence study used to pick iteration budgets for the slow tests:
// prints PSNR-versus-iteration traces for compression, denoising, and
// super-resolution on the synthetic scenes, plus the baselines.

use deep_decoder::baselines::{bicubic_upsample, wavelet_psnr_at_budget, WaveletConfig};
use deep_decoder::decoder::{forward, make_input, param_count, DecoderConfig, ParamSet, Upsampler};
use deep_decoder::inverse::{add_noise, psnr, ForwardOp};
use deep_decoder::optim::{fit, FitOptions};
use deep_decoder::synth::natural_scene;
use deep_decoder::theory::deep_noise_fit;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(String::as_str).unwrap_or("baselines");
    let size = 256usize;
    match what {
        "baselines" => {
            for v in 0..5u64 {
                let img = natural_scene(size, size, v);
                let wpsnr = wavelet_psnr_at_budget(&img, 25_536, &WaveletConfig::default()).unwrap();
                let small = ForwardOp::Downsample4.apply(&img).unwrap();
                let bic = bicubic_upsample(&small, 4);
                let bpsnr = psnr(&img, &bic).unwrap();
                println!("variant {v}: wavelet@25536 = {wpsnr:.2} dB, bicubic4x = {bpsnr:.2} dB");
            }
        }
        "compress" => {
            for v in [0u64, 3] {
                let img = natural_scene(size, size, v);
                let cfg = DecoderConfig::uniform(6, 64, (8, 8), 3, Upsampler::Bilinear, v);
                assert_eq!(param_count(&cfg), 25_536);
                let input = make_input(&cfg).unwrap();
                let init = ParamSet::random(&cfg, v + 100).unwrap();
                let opts = FitOptions {
                    iterations: 2400,
                    log_every: 200,
                    truth: Some(img.clone()),
                    ..FitOptions::default()
                };
                let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &img, &opts).unwrap();
                println!("compress v{v}: {:?}", report.psnr_trace.unwrap());
            }
        }
        "denoise" => {
            for v in [1u64, 4] {
                let img = natural_scene(size, size, v);
                let y = add_noise(&img, 0.1, v + 50).unwrap();
                println!("v{v} input psnr {:.2}", psnr(&img, &y).unwrap());
                let cfg = DecoderConfig::uniform(6, 128, (8, 8), 3, Upsampler::Bilinear, v);
                let input = make_input(&cfg).unwrap();
                let init = ParamSet::random(&cfg, v + 200).unwrap();
                let opts = FitOptions {
                    iterations: 1600,
                    log_every: 100,
                    truth: Some(img.clone()),
                    ..FitOptions::default()
                };
                let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts).unwrap();
                println!("denoise v{v}: {:?}", report.psnr_trace.unwrap());
            }
        }
        "superres" => {
            for v in [0u64, 2] {
                let img = natural_scene(size, size, v);
                let y = ForwardOp::Downsample4.apply(&img).unwrap();
                let cfg = DecoderConfig::uniform(6, 128, (8, 8), 3, Upsampler::Bilinear, v);
                let input = make_input(&cfg).unwrap();
                let init = ParamSet::random(&cfg, v + 300).unwrap();
                let opts = FitOptions {
                    iterations: 1600,
                    log_every: 100,
                    truth: Some(img.clone()),
                    ..FitOptions::default()
                };
                let report = fit(&cfg, &input, &init, &ForwardOp::Downsample4, &y, &opts).unwrap();
                println!("superres v{v}: {:?}", report.psnr_trace.unwrap());
            }
        }
        "noise" => {
            let cfg = DecoderConfig::uniform(5, 64, (16, 16), 3, Upsampler::Bilinear, 0);
            for iters in [400usize, 1200] {
                let opts = FitOptions {
                    iterations: iters,
                    log_every: 200,
                    ..FitOptions::default()
                };
                let nf = deep_noise_fit(&cfg, 0.1, &opts, 7).unwrap();
                println!("noise {iters} iters: residual fraction {:.4}", nf.residual_fraction);
            }
        }
        "final" => {
            // reconstruction PSNR from the best snapshot, per command settings
            for v in 0..5u64 {
                let img = natural_scene(size, size, v);
                let cfg = DecoderConfig::uniform(6, 64, (8, 8), 3, Upsampler::Bilinear, v);
                let input = make_input(&cfg).unwrap();
                let init = ParamSet::random(&cfg, v + 100).unwrap();
                let opts = FitOptions {
                    iterations: 1200,
                    log_every: 400,
                    ..FitOptions::default()
                };
                let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &img, &opts).unwrap();
                let rec = forward(&cfg, &input, &report.final_params).unwrap();
                let dd = psnr(&img, &rec).unwrap();
                let wv = wavelet_psnr_at_budget(&img, 25_536, &WaveletConfig::default()).unwrap();
                println!("v{v}: dd {dd:.2} wavelet {wv:.2} (gap {:+.2})", dd - wv);
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
