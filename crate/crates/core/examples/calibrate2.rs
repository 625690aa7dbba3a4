// Second-round calibration: compression at matched factor ~32 on 256x256.

use deep_decoder::baselines::{wavelet_psnr_at_budget, WaveletConfig};
use deep_decoder::decoder::{forward, make_input, param_count, DecoderConfig, ParamSet, Upsampler};
use deep_decoder::inverse::{psnr, ForwardOp};
use deep_decoder::optim::{fit, FitOptions};
use deep_decoder::synth::natural_scene;

fn main() {
    let k = 31usize;
    for v in 0..5u64 {
        let img = natural_scene(256, 256, v);
        let cfg = DecoderConfig::uniform(6, k, (8, 8), 3, Upsampler::Bilinear, v);
        let budget = param_count(&cfg);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, v + 100).unwrap();
        let opts = FitOptions { iterations: 1200, log_every: 300, truth: Some(img.clone()), ..FitOptions::default() };
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &img, &opts).unwrap();
        let rec = forward(&cfg, &input, &report.final_params).unwrap();
        let dd = psnr(&img, &rec).unwrap();
        let wv = wavelet_psnr_at_budget(&img, budget, &WaveletConfig::default()).unwrap();
        let factor = (3 * 256 * 256) as f64 / budget as f64;
        println!("v{v}: N={budget} factor={factor:.1} dd={dd:.2} wavelet={wv:.2} gap={:+.2} trace={:?}",
                 dd - wv, report.psnr_trace.unwrap());
    }
}
