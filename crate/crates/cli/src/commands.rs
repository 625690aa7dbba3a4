//! One function per subcommand. Reported PSNRs are always computed on 8-bit
//! quantized images (the in-memory equivalent of the saved PNGs), so every
//! number in metrics.csv can be recomputed exactly from the files on disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use deep_decoder::baselines::{bicubic_upsample, wavelet_psnr_at_budget, WaveletConfig};
use deep_decoder::decoder::{
    forward, layer_activations, make_input, param_count, param_count_conv, DecoderConfig,
    FixedInput, ParamSet, Upsampler,
};
use deep_decoder::imgio::{load_mask_png, quantize_to_u8_values, save_png, center_crop};
use deep_decoder::inverse::{add_noise, psnr, sigma_for_input_psnr, ForwardOp};
use deep_decoder::optim::{fit, FitOptions, FitReport, Method, SnapshotPolicy};
use deep_decoder::synth;
use deep_decoder::tensor::{ChannelStack, Matrix};
use deep_decoder::theory;

use crate::harness::{image_stem, load_aligned, map_jobs, ParamsFile, Run};
use crate::{FitArgs, SourceArgs, TheoryCmd};

fn mix(base: u64, salt: u64) -> u64 {
    base ^ salt.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Architecture for fitting one image: spatial dims from the image, depth
/// and width from the flags.
fn config_for(image: &ChannelStack, k: usize, d: usize, seed: u64) -> Result<DecoderConfig> {
    let (h, w) = image.dims();
    let scale = 1usize << (d - 1);
    let cfg = DecoderConfig {
        depth: d,
        channels: vec![k; d + 1],
        input_dims: (h / scale, w / scale),
        output_dims: (h, w),
        out_channels: image.channels(),
        upsampler: Upsampler::Bilinear,
        cn_epsilon: 1e-5,
        seed,
        input_scale: 0.1,
    };
    cfg.validate()
        .with_context(|| format!("image dims {h}x{w} are incompatible with d = {d}"))?;
    Ok(cfg)
}

fn fit_options(args: &FitArgs, truth: Option<ChannelStack>) -> FitOptions {
    FitOptions {
        iterations: args.iters,
        learning_rate: args.lr,
        method: match args.method {
            crate::MethodArg::Adam => Method::Adam,
            crate::MethodArg::Gd => Method::Gd,
        },
        log_every: args.log_every,
        seed: args.seed,
        stop_at: args.stop_at,
        snapshot: SnapshotPolicy::BestLoss,
        truth,
        ..FitOptions::default()
    }
}

/// Alignment every command's crop must respect: the upsampling chain needs
/// dims divisible by 2^(d-1), plus any per-command extra factor.
fn alignment(d: usize, extra: usize) -> usize {
    let base = 1usize << (d - 1);
    let mut a = base.max(extra);
    while a % base != 0 || a % extra != 0 {
        a += base;
    }
    a
}

struct FitOutcome {
    stem: String,
    cfg: DecoderConfig,
    report: FitReport,
    image: ChannelStack,
    loaded_dims: (usize, usize),
    extra: Vec<(String, f64)>,
    saves: Vec<(String, ChannelStack)>,
}

fn save_fit_artifacts(run: &mut Run, outcome: &FitOutcome) -> Result<()> {
    for (name, stack) in &outcome.saves {
        let path = run.out_path(name);
        save_png(stack, &path)?;
    }
    let bundle = ParamsFile {
        config: outcome.cfg.clone(),
        params: outcome.report.final_params.clone(),
    };
    let ppath = run.out_path(&format!("{}_params.json", outcome.stem));
    bundle.save(&ppath)?;
    run.write_text(
        &format!("{}_traces.csv", outcome.stem),
        &outcome.report.traces_csv(),
    )?;
    run.write_text(
        &format!("{}_fit.json", outcome.stem),
        &serde_json::to_string_pretty(&outcome.report.metadata_json())?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// compression
// ---------------------------------------------------------------------------

pub fn cmd_compress(images: &[PathBuf], args: &FitArgs) -> Result<()> {
    let k = args.k.unwrap_or(64);
    let mut run = Run::new("compress", args.seed, args.out.as_deref(), k, args.d, args.iters)?;
    let wavelet_cfg = WaveletConfig::default();
    let align = alignment(args.d, 1 << wavelet_cfg.levels);

    let items: Vec<(usize, PathBuf)> = images.iter().cloned().enumerate().collect();
    let outcomes: Vec<Result<FitOutcome>> = map_jobs(args.jobs, items, |(idx, path)| {
        let (image, loaded_dims) = load_aligned(&path, align)?;
        let cfg = config_for(&image, k, args.d, mix(args.seed, idx as u64))?;
        let input = make_input(&cfg)?;
        let init = ParamSet::random(&cfg, mix(args.seed, 0x1000 + idx as u64))?;
        let opts = fit_options(args, Some(image.clone()));
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &image, &opts)?;
        let recon = quantize_to_u8_values(&forward(&cfg, &input, &report.final_params)?);
        let budget = param_count(&cfg);
        let dd = psnr(&image, &recon)?;
        let wavelet = wavelet_psnr_at_budget(&image, budget, &wavelet_cfg)?;
        let factor =
            (image.channels() * image.pixels()) as f64 / budget as f64;
        // parameter-count pairing against 3x3 filters at matched budget
        let (k3, n3) = matched_conv_width(&cfg, budget)?;
        let stem = image_stem(&path);
        Ok(FitOutcome {
            saves: vec![
                (format!("{stem}_truth.png"), image.clone()),
                (format!("{stem}_reconstruction.png"), recon),
            ],
            extra: vec![
                ("param_count".into(), budget as f64),
                ("compression_factor".into(), factor),
                ("dd_psnr".into(), dd),
                ("wavelet_psnr".into(), wavelet),
                ("p3_matched_k".into(), k3 as f64),
                ("p3_matched_param_count".into(), n3 as f64),
            ],
            stem,
            cfg,
            report,
            image,
            loaded_dims,
        })
    });

    for (path, outcome) in images.iter().zip(outcomes) {
        let outcome = outcome?;
        run.record_input(path, outcome.loaded_dims, outcome.image.dims())?;
        save_fit_artifacts(&mut run, &outcome)?;
        for (metric, value) in &outcome.extra {
            run.metric(&outcome.stem, metric, *value);
        }
        run.manifest.config = Some(outcome.cfg.clone());
    }
    run.manifest.options = json!({"lr": args.lr, "iters": args.iters, "method": format!("{:?}", args.method)});
    run.finish()
}

/// The widest `k'` whose 3x3-filter parameter count stays within the 1x1
/// budget, mirroring the matched-budget comparison of filter sizes.
fn matched_conv_width(cfg: &DecoderConfig, budget: usize) -> Result<(usize, usize)> {
    let mut best = (1, 0);
    for k3 in 1..=cfg.channels[0].max(2) {
        let mut c = cfg.clone();
        c.channels = vec![k3; cfg.depth + 1];
        let n = param_count_conv(&c, 3)?;
        if n <= budget && n > best.1 {
            best = (k3, n);
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// denoising
// ---------------------------------------------------------------------------

pub fn cmd_denoise(
    images: &[PathBuf],
    sigma: Option<f64>,
    input_psnr: Option<f64>,
    args: &FitArgs,
) -> Result<()> {
    let k = args.k.unwrap_or(128);
    let sigma = match (sigma, input_psnr) {
        (Some(_), Some(_)) => bail!("pass either --sigma or --input-psnr, not both"),
        (Some(s), None) => s,
        (None, Some(p)) => sigma_for_input_psnr(p),
        (None, None) => sigma_for_input_psnr(20.0),
    };
    let mut run = Run::new("denoise", args.seed, args.out.as_deref(), k, args.d, args.iters)?;
    let align = alignment(args.d, 1);

    let items: Vec<(usize, PathBuf)> = images.iter().cloned().enumerate().collect();
    let outcomes: Vec<Result<FitOutcome>> = map_jobs(args.jobs, items, |(idx, path)| {
        let (image, loaded_dims) = load_aligned(&path, align)?;
        let y = add_noise(&image, sigma, mix(args.seed, 0x2000 + idx as u64))?;
        let cfg = config_for(&image, k, args.d, mix(args.seed, idx as u64))?;
        let input = make_input(&cfg)?;
        let init = ParamSet::random(&cfg, mix(args.seed, 0x1000 + idx as u64))?;
        let opts = fit_options(args, Some(image.clone()));
        let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &y, &opts)?;
        let recon = quantize_to_u8_values(&forward(&cfg, &input, &report.final_params)?);
        let noisy = quantize_to_u8_values(&y);
        let input_psnr = psnr(&image, &noisy)?;
        let output_psnr = psnr(&image, &recon)?;
        let stem = image_stem(&path);
        Ok(FitOutcome {
            saves: vec![
                (format!("{stem}_truth.png"), image.clone()),
                (format!("{stem}_noisy.png"), noisy),
                (format!("{stem}_reconstruction.png"), recon),
            ],
            extra: vec![
                ("sigma".into(), sigma),
                ("input_psnr".into(), input_psnr),
                ("output_psnr".into(), output_psnr),
                ("improvement_db".into(), output_psnr - input_psnr),
            ],
            stem,
            cfg,
            report,
            image,
            loaded_dims,
        })
    });

    for (path, outcome) in images.iter().zip(outcomes) {
        let outcome = outcome?;
        run.record_input(path, outcome.loaded_dims, outcome.image.dims())?;
        save_fit_artifacts(&mut run, &outcome)?;
        for (metric, value) in &outcome.extra {
            run.metric(&outcome.stem, metric, *value);
        }
        run.manifest.config = Some(outcome.cfg.clone());
    }
    run.manifest.options = json!({"sigma": sigma, "lr": args.lr, "iters": args.iters});
    run.finish()
}

// ---------------------------------------------------------------------------
// super-resolution
// ---------------------------------------------------------------------------

pub fn cmd_superres(images: &[PathBuf], args: &FitArgs) -> Result<()> {
    let k = args.k.unwrap_or(128);
    let mut run = Run::new("superres", args.seed, args.out.as_deref(), k, args.d, args.iters)?;
    let align = alignment(args.d, 4);

    let items: Vec<(usize, PathBuf)> = images.iter().cloned().enumerate().collect();
    let outcomes: Vec<Result<FitOutcome>> = map_jobs(args.jobs, items, |(idx, path)| {
        let (image, loaded_dims) = load_aligned(&path, align)?;
        let y = ForwardOp::Downsample4.apply(&image)?;
        let cfg = config_for(&image, k, args.d, mix(args.seed, idx as u64))?;
        let input = make_input(&cfg)?;
        let init = ParamSet::random(&cfg, mix(args.seed, 0x1000 + idx as u64))?;
        let opts = fit_options(args, Some(image.clone()));
        let report = fit(&cfg, &input, &init, &ForwardOp::Downsample4, &y, &opts)?;
        let recon = quantize_to_u8_values(&forward(&cfg, &input, &report.final_params)?);
        let bicubic = quantize_to_u8_values(&bicubic_upsample(&y, 4));
        let dd = psnr(&image, &recon)?;
        let bc = psnr(&image, &bicubic)?;
        let stem = image_stem(&path);
        Ok(FitOutcome {
            saves: vec![
                (format!("{stem}_truth.png"), image.clone()),
                (format!("{stem}_lowres.png"), quantize_to_u8_values(&y)),
                (format!("{stem}_reconstruction.png"), recon),
                (format!("{stem}_bicubic.png"), bicubic),
            ],
            extra: vec![
                ("dd_psnr".into(), dd),
                ("bicubic_psnr".into(), bc),
                ("dd_minus_bicubic_db".into(), dd - bc),
            ],
            stem,
            cfg,
            report,
            image,
            loaded_dims,
        })
    });

    for (path, outcome) in images.iter().zip(outcomes) {
        let outcome = outcome?;
        run.record_input(path, outcome.loaded_dims, outcome.image.dims())?;
        save_fit_artifacts(&mut run, &outcome)?;
        for (metric, value) in &outcome.extra {
            run.metric(&outcome.stem, metric, *value);
        }
        run.manifest.config = Some(outcome.cfg.clone());
    }
    run.manifest.options = json!({"lr": args.lr, "iters": args.iters});
    run.finish()
}

// ---------------------------------------------------------------------------
// inpainting
// ---------------------------------------------------------------------------

pub fn cmd_inpaint(image_path: &Path, mask_path: &Path, sigma: f64, args: &FitArgs) -> Result<()> {
    let k = args.k.unwrap_or(320);
    let mut run = Run::new("inpaint", args.seed, args.out.as_deref(), k, args.d, args.iters)?;
    let align = alignment(args.d, 1);
    let (image, loaded_dims) = load_aligned(image_path, align)?;
    let mask_full = load_mask_png(mask_path)?;
    if mask_full.dims() != loaded_dims {
        bail!(
            "mask is {:?} but the image is {:?}; they must match before cropping",
            mask_full.dims(),
            loaded_dims
        );
    }
    let mask = center_crop(&mask_full, image.height(), image.width())?;
    let kept_fraction = mask.data().iter().sum::<f64>() / mask.len() as f64;
    let op = ForwardOp::mask(mask)?;
    let y = add_noise(&op.apply(&image)?, sigma, mix(args.seed, 0x3000))?;

    let cfg = config_for(&image, k, args.d, args.seed)?;
    let input = make_input(&cfg)?;
    let init = ParamSet::random(&cfg, mix(args.seed, 0x1000))?;
    let opts = fit_options(args, Some(image.clone()));
    let report = fit(&cfg, &input, &init, &op, &y, &opts)?;
    let recon = quantize_to_u8_values(&forward(&cfg, &input, &report.final_params)?);
    let masked_q = quantize_to_u8_values(&y);
    let identity_psnr = psnr(&image, &masked_q)?;
    let output_psnr = psnr(&image, &recon)?;

    let stem = image_stem(image_path);
    let outcome = FitOutcome {
        saves: vec![
            (format!("{stem}_truth.png"), image.clone()),
            (format!("{stem}_masked.png"), masked_q),
            (format!("{stem}_reconstruction.png"), recon),
        ],
        extra: vec![
            ("kept_fraction".into(), kept_fraction),
            ("identity_psnr".into(), identity_psnr),
            ("output_psnr".into(), output_psnr),
        ],
        stem,
        cfg: cfg.clone(),
        report,
        image,
        loaded_dims,
    };
    run.record_input(image_path, loaded_dims, outcome.image.dims())?;
    run.record_input(mask_path, loaded_dims, outcome.image.dims())?;
    save_fit_artifacts(&mut run, &outcome)?;
    for (metric, value) in &outcome.extra {
        run.metric(&outcome.stem, metric, *value);
    }
    run.manifest.config = Some(cfg);
    run.manifest.options = json!({"sigma": sigma, "lr": args.lr, "iters": args.iters});
    run.finish()
}

// ---------------------------------------------------------------------------
// fitted-parameter studies (sensitivity, quantization, weight histograms,
// activations)
// ---------------------------------------------------------------------------

/// Obtain a fitted model: load a parameter bundle if given, else fit the
/// image now.
fn fitted_model(
    source: &SourceArgs,
    args: &FitArgs,
    default_k: usize,
) -> Result<(DecoderConfig, FixedInput, ParamSet, Option<ChannelStack>, String)> {
    if let Some(bundle_path) = &source.params {
        let bundle = ParamsFile::load(bundle_path)?;
        let input = make_input(&bundle.config)?;
        let image = match &source.image {
            Some(p) => Some(load_aligned(p, alignment(bundle.config.depth, 1))?.0),
            None => None,
        };
        let stem = source
            .image
            .as_deref()
            .map(image_stem)
            .unwrap_or_else(|| image_stem(bundle_path));
        return Ok((bundle.config, input, bundle.params, image, stem));
    }
    let image_path = source
        .image
        .as_ref()
        .context("either an image or --params is required")?;
    let k = args.k.unwrap_or(default_k);
    let (image, _) = load_aligned(image_path, alignment(args.d, 1))?;
    let cfg = config_for(&image, k, args.d, args.seed)?;
    let input = make_input(&cfg)?;
    let init = ParamSet::random(&cfg, mix(args.seed, 0x1000))?;
    let opts = fit_options(args, Some(image.clone()));
    let report = fit(&cfg, &input, &init, &ForwardOp::Identity, &image, &opts)?;
    let stem = image_stem(image_path);
    Ok((cfg, input, report.final_params, Some(image), stem))
}

fn perturbed(params: &ParamSet, layer: usize, target_snr_db: f64, seed: u64) -> ParamSet {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut out = params.clone();
    let w = &params.weights[layer];
    let rms = (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
    let noise_std = rms * 10f64.powf(-target_snr_db / 20.0);
    if noise_std == 0.0 {
        return out;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std).unwrap();
    for v in out.weights[layer].data_mut() {
        *v += normal.sample(&mut rng);
    }
    out
}

pub fn cmd_sensitivity(
    source: &SourceArgs,
    layer: Option<usize>,
    snr_grid: &[f64],
    trials: usize,
    args: &FitArgs,
) -> Result<()> {
    let (cfg, input, params, _image, stem) = fitted_model(source, args, 128)?;
    let k = args.k.unwrap_or(cfg.channels[0]);
    let mut run = Run::new("sensitivity", args.seed, args.out.as_deref(), k, cfg.depth, args.iters)?;
    let base = quantize_to_u8_values(&forward(&cfg, &input, &params)?);
    let layers: Vec<usize> = match layer {
        Some(i) => {
            if i > cfg.depth {
                bail!("layer {i} out of range (0..={})", cfg.depth);
            }
            vec![i]
        }
        None => (0..=cfg.depth).collect(),
    };

    let mut csv = String::from("layer,snr_db,trial,psnr\n");
    for &l in &layers {
        for (si, &snr) in snr_grid.iter().enumerate() {
            let mut values = Vec::with_capacity(trials);
            for t in 0..trials {
                let p = perturbed(&params, l, snr, mix(args.seed, (l as u64) << 24 | (si as u64) << 12 | t as u64));
                let img = quantize_to_u8_values(&forward(&cfg, &input, &p)?);
                let v = psnr(&base, &img)?;
                csv.push_str(&format!("{l},{snr},{t},{v}\n"));
                values.push(v);
            }
            values.sort_by(f64::total_cmp);
            let median = values[values.len() / 2];
            run.metric(&stem, &format!("sensitivity_psnr_layer{l}_snr{snr}"), median);
        }
    }
    run.write_text("sensitivity.csv", &csv)?;

    // one perturbed rendering per layer at 20 dB for visual inspection
    for &l in &layers {
        let p = perturbed(&params, l, 20.0, mix(args.seed, 0xface + l as u64));
        let img = quantize_to_u8_values(&forward(&cfg, &input, &p)?);
        let path = run.out_path(&format!("{stem}_layer{l}_snr20.png"));
        save_png(&img, &path)?;
    }
    let base_path = run.out_path(&format!("{stem}_unperturbed.png"));
    save_png(&base, &base_path)?;
    run.manifest.config = Some(cfg);
    run.manifest.options = json!({"snr_grid": snr_grid, "trials": trials});
    run.finish()
}

fn quantize_slice(data: &mut [f64], bits: u32) {
    let levels = (1u64 << bits) as f64 - 1.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return;
    }
    let step = (hi - lo) / levels;
    for v in data.iter_mut() {
        *v = lo + ((*v - lo) / step).round() * step;
    }
}

/// Uniform per-matrix quantization of every parameter block.
pub fn quantize_params(params: &ParamSet, bits: u32) -> ParamSet {
    let mut out = params.clone();
    for w in &mut out.weights {
        quantize_slice(w.data_mut(), bits);
    }
    for g in &mut out.gamma {
        quantize_slice(g, bits);
    }
    for b in &mut out.beta {
        quantize_slice(b, bits);
    }
    out
}

pub fn cmd_quantize(source: &SourceArgs, bits: u32, args: &FitArgs) -> Result<()> {
    if bits == 0 || bits > 32 {
        bail!("bits must lie in 1..=32");
    }
    let (cfg, input, params, image, stem) = fitted_model(source, args, 64)?;
    let k = args.k.unwrap_or(cfg.channels[0]);
    let mut run = Run::new("quantize", args.seed, args.out.as_deref(), k, cfg.depth, args.iters)?;

    let float_recon = quantize_to_u8_values(&forward(&cfg, &input, &params)?);
    let qparams = quantize_params(&params, bits);
    let q_recon = quantize_to_u8_values(&forward(&cfg, &input, &qparams)?);

    run.metric(&stem, "bits", bits as f64);
    run.metric(&stem, "psnr_vs_float_recon", psnr(&float_recon, &q_recon)?);
    if let Some(image) = &image {
        let p_float = psnr(image, &float_recon)?;
        let p_quant = psnr(image, &q_recon)?;
        run.metric(&stem, "psnr_float_vs_image", p_float);
        run.metric(&stem, "psnr_quantized_vs_image", p_quant);
        run.metric(&stem, "quantization_drop_db", p_float - p_quant);
    }
    let qpath = run.out_path(&format!("{stem}_quantized_reconstruction.png"));
    save_png(&q_recon, &qpath)?;
    let bundle = ParamsFile { config: cfg.clone(), params: qparams };
    let bpath = run.out_path(&format!("{stem}_params_quantized.json"));
    bundle.save(&bpath)?;
    run.manifest.config = Some(cfg);
    run.manifest.options = json!({"bits": bits});
    run.finish()
}

fn sample_moments(data: &[f64]) -> (f64, f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let m2 = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = data.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let kurt = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 };
    (mean, m2.sqrt(), kurt)
}

pub fn cmd_weighthist(source: &SourceArgs, bins: usize, args: &FitArgs) -> Result<()> {
    if bins < 2 {
        bail!("bins must be >= 2");
    }
    let (cfg, _input, params, _image, stem) = fitted_model(source, args, 128)?;
    let k = args.k.unwrap_or(cfg.channels[0]);
    let mut run = Run::new("weighthist", args.seed, args.out.as_deref(), k, cfg.depth, args.iters)?;

    let mut csv = String::from("layer,bin_center,count,gaussian_fit\n");
    for (l, w) in params.weights.iter().enumerate() {
        let data = w.data();
        let (mean, std, kurt) = sample_moments(data);
        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(1e-300);
        let mut counts = vec![0usize; bins];
        for &v in data {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, &count) in counts.iter().enumerate() {
            let center = lo + (b as f64 + 0.5) * width;
            // same-area Gaussian with the sample moments
            let fitted = if std > 0.0 {
                data.len() as f64 * width / (std * (2.0 * std::f64::consts::PI).sqrt())
                    * (-0.5 * ((center - mean) / std).powi(2)).exp()
            } else {
                0.0
            };
            csv.push_str(&format!("{l},{center},{count},{fitted}\n"));
        }
        assert_eq!(counts.iter().sum::<usize>(), data.len());
        run.metric(&stem, &format!("weights_mean_layer{l}"), mean);
        run.metric(&stem, &format!("weights_std_layer{l}"), std);
        run.metric(&stem, &format!("weights_excess_kurtosis_layer{l}"), kurt);
    }
    run.write_text("weighthist.csv", &csv)?;
    run.manifest.config = Some(cfg);
    run.manifest.options = json!({"bins": bins});
    run.finish()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Lay out up to 8 channel maps side by side, each min-max normalized.
fn activation_grid(map: &ChannelStack) -> ChannelStack {
    let shown = map.channels().min(8);
    let (h, w) = map.dims();
    let sep = 2;
    let gw = shown * w + (shown - 1) * sep;
    let mut grid = ChannelStack::constant(h, gw, 1, 1.0);
    for ch in 0..shown {
        let plane = map.channel_plane(ch);
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let x0 = ch * (w + sep);
        for r in 0..h {
            for c in 0..w {
                let v = if hi > lo { (plane[r * w + c] - lo) / (hi - lo) } else { 0.0 };
                grid.set(r, x0 + c, 0, v);
            }
        }
    }
    grid
}

pub fn cmd_activations(source: &SourceArgs, args: &FitArgs) -> Result<()> {
    let (cfg, input, params, image, stem) = fitted_model(source, args, 64)?;
    let k = args.k.unwrap_or(cfg.channels[0]);
    let mut run = Run::new("activations", args.seed, args.out.as_deref(), k, cfg.depth, args.iters)?;
    let maps = layer_activations(&cfg, &input, &params)?;
    for (l, map) in maps.iter().enumerate() {
        let grid = activation_grid(map);
        let path = run.out_path(&format!("{stem}_activations_layer{l}.png"));
        save_png(&grid, &path)?;
    }
    // correlation of the final layer's mean map with the target's luma
    if let Some(image) = &image {
        let last = maps.last().unwrap();
        let mean_map: Vec<f64> = (0..last.pixels())
            .map(|px| {
                let row = &last.data()[px * last.channels()..(px + 1) * last.channels()];
                row.iter().sum::<f64>() / last.channels() as f64
            })
            .collect();
        let luma: Vec<f64> = (0..image.pixels())
            .map(|px| {
                let row = &image.data()[px * image.channels()..(px + 1) * image.channels()];
                row.iter().sum::<f64>() / image.channels() as f64
            })
            .collect();
        run.metric(&stem, "final_layer_correlation", correlation(&mean_map, &luma).abs());
    }
    run.manifest.config = Some(cfg);
    run.finish()
}

// ---------------------------------------------------------------------------
// theory experiments
// ---------------------------------------------------------------------------

pub fn cmd_theory(cmd: &TheoryCmd, args: &FitArgs) -> Result<()> {
    match cmd {
        TheoryCmd::Prop1 { k, n0, n, draws, restarts, iterations, sigma } => {
            let mut run = Run::new("theory-prop1", args.seed, args.out.as_deref(), *k, 1, *iterations)?;
            let instance = theory::OneLayerInstance::random(*k, *n0, *n, args.seed);
            let opts = theory::Prop1Options {
                restarts: *restarts,
                iterations: *iterations,
                seed: args.seed,
                ..theory::Prop1Options::default()
            };
            let trials = theory::prop1_trials(&instance, *sigma, *draws, &opts)?;
            let mut csv = String::from("trial,achieved_ratio,bound,pass\n");
            for (i, t) in trials.iter().enumerate() {
                csv.push_str(&t.csv_row(i));
            }
            run.write_text("prop1.csv", &csv)?;
            let min_ratio = trials.iter().map(|t| t.achieved_ratio).fold(f64::INFINITY, f64::min);
            let failures = trials.iter().filter(|t| !t.pass).count();
            run.metric("prop1", "bound", trials.first().map_or(0.0, |t| t.bound));
            run.metric("prop1", "min_achieved_ratio", min_ratio);
            run.metric("prop1", "trials", trials.len() as f64);
            run.metric("prop1", "violations", failures as f64);
            run.manifest.options = json!({"k": k, "n0": n0, "n": n, "draws": draws, "sigma": sigma});
            run.finish()
        }
        TheoryCmd::Lemma1 { n_max, mc_n, mc_k, samples } => {
            let mut run = Run::new("theory-lemma1", args.seed, args.out.as_deref(), *mc_k, 1, 0)?;
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            let mut csv = String::from("kind,n,k,count,chamber_bound,power_bound\n");
            for n in 1..=*n_max {
                let data: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let a = Matrix::from_vec(n, 2, data)?;
                let count = theory::count_sign_patterns_exact(&a)?;
                csv.push_str(&format!(
                    "exact,{n},2,{count},{},{}\n",
                    theory::pattern_count_bound(n, 2),
                    (n as u128).pow(2)
                ));
            }
            let data: Vec<f64> = (0..mc_n * mc_k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = Matrix::from_vec(*mc_n, *mc_k, data)?;
            let mc = theory::count_sign_patterns_mc(&a, *samples, args.seed ^ 1);
            csv.push_str(&format!(
                "montecarlo,{mc_n},{mc_k},{mc},{},{}\n",
                theory::pattern_count_bound(*mc_n, *mc_k),
                (*mc_n as u128).pow(*mc_k as u32)
            ));
            run.write_text("lemma1.csv", &csv)?;
            run.metric("lemma1", "mc_count", mc as f64);
            run.metric("lemma1", "mc_chamber_bound", theory::pattern_count_bound(*mc_n, *mc_k) as f64);
            run.manifest.options = json!({"n_max": n_max, "mc_n": mc_n, "mc_k": mc_k, "samples": samples});
            run.finish()
        }
        TheoryCmd::Lemma2 { n, l, beta, trials } => {
            let mut run = Run::new("theory-lemma2", args.seed, args.out.as_deref(), *l, 1, *trials)?;
            let report = theory::lemma2_mc(*n, *l, *beta, *trials, args.seed)?;
            run.write_text("lemma2.csv", &report.csv())?;
            run.metric("lemma2", "threshold", report.threshold);
            run.metric("lemma2", "failure_rate", report.failure_rate);
            run.metric("lemma2", "bound_prob", report.bound_prob);
            run.metric("lemma2", "mean_ratio", report.mean_ratio);
            run.metric("lemma2", "pass", report.pass as u8 as f64);
            run.manifest.options = json!({"n": n, "l": l, "beta": beta, "trials": trials});
            run.finish()
        }
        TheoryCmd::Upsample1d { d, n0, k, seeds } => {
            let mut run = Run::new("theory-upsample1d", args.seed, args.out.as_deref(), *k, *d, args.iters)?;
            let len = (*n0 - 1) * (1 << (d - 1)) + 1;
            let signal = synth::piecewise_smooth_waveform(len);
            let mut csv = String::from("kind,seed,mse\n");
            let mut estimates: Vec<(String, Vec<f64>)> = Vec::new();
            let mut medians = Vec::new();
            for (name, kind) in [
                ("linear", Upsampler::Linear1d),
                ("convex", Upsampler::Convex1d(0.75)),
            ] {
                let mut mses = Vec::new();
                for s in 0..*seeds {
                    let mut cfg = DecoderConfig::uniform(*d, *k, (1, *n0), 1, kind, mix(args.seed, s as u64));
                    cfg.cn_epsilon = 1e-5;
                    let opts = FitOptions {
                        iterations: args.iters,
                        learning_rate: args.lr,
                        log_every: args.log_every,
                        seed: mix(args.seed, 0x77 + s as u64),
                        ..FitOptions::default()
                    };
                    let (est, mse) = theory::upsampling_character_1d(&cfg, &signal, &opts)?;
                    csv.push_str(&format!("{name},{s},{mse}\n"));
                    if s == 0 {
                        estimates.push((name.to_string(), est));
                    }
                    mses.push(mse);
                }
                mses.sort_by(f64::total_cmp);
                medians.push((name, mses[mses.len() / 2]));
            }
            run.write_text("upsample1d.csv", &csv)?;
            let mut wave_csv = String::from("t,truth,linear,convex\n");
            for i in 0..len {
                wave_csv.push_str(&format!(
                    "{i},{},{},{}\n",
                    signal[i], estimates[0].1[i], estimates[1].1[i]
                ));
            }
            run.write_text("upsample1d_estimates.csv", &wave_csv)?;
            for (name, median) in medians {
                run.metric("upsample1d", &format!("{name}_median_mse"), median);
            }
            run.manifest.options = json!({"d": d, "n0": n0, "k": k, "seeds": seeds, "iters": args.iters});
            run.finish()
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic inputs
// ---------------------------------------------------------------------------

pub fn cmd_synth(kind: &str, height: usize, width: usize, variant: u64, out: &Path) -> Result<()> {
    let img = match kind {
        "scene" => synth::natural_scene(height, width, variant),
        "phantom" => synth::phantom(height, width),
        "gradient" => synth::smooth_gradient(height, width, 3),
        other => bail!("unknown kind {other}; expected scene|phantom|gradient"),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_png(&img, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
