use std::time::Instant;

use deep_decoder::decoder::{make_input, DecoderConfig, ParamSet, Upsampler};
use deep_decoder::inverse::ForwardOp;
use deep_decoder::optim::{fit, FitOptions};
use deep_decoder::synth::natural_scene;

fn main() {
    for (d, n0, k, iters) in [(6usize, 8usize, 64usize, 30usize), (6, 8, 128, 30), (5, 16, 64, 30)] {
        let cfg = DecoderConfig::uniform(d, k, (n0, n0), 3, Upsampler::Bilinear, 0);
        let (h, w) = cfg.output_dims;
        let img = natural_scene(h, w, 0);
        let input = make_input(&cfg).unwrap();
        let init = ParamSet::random(&cfg, 1).unwrap();
        let opts = FitOptions { iterations: iters, log_every: iters, ..FitOptions::default() };
        let t = Instant::now();
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &img, &opts).unwrap();
        let ms = t.elapsed().as_millis() as f64 / iters as f64;
        println!("d={d} n0={n0} k={k} out={h}x{w}: {ms:.1} ms/iter (final loss {:.2})", report.final_loss);
    }
}
