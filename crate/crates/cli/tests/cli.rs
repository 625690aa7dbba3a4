//! End-to-end runs of the binary at desk scale: each command must exit
//! cleanly, write its manifest and metrics, and report numbers that can be
//! recomputed from the files it saved.

use std::path::{Path, PathBuf};
use std::process::Command;

use deep_decoder::imgio::load_png;
use deep_decoder::inverse::psnr;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deep-decoder"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

/// The single run directory created under `root` by a command.
fn only_run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected exactly one run dir in {}", root.display());
    dirs.pop().unwrap()
}

fn metrics(run_dir: &Path) -> Vec<(String, String, f64)> {
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut rows = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 9, "bad row {line}");
        rows.push((cols[2].to_string(), cols[7].to_string(), cols[8].parse().unwrap()));
    }
    rows
}

fn metric(rows: &[(String, String, f64)], name: &str) -> f64 {
    rows.iter()
        .find(|(_, m, _)| m == name)
        .unwrap_or_else(|| panic!("metric {name} missing"))
        .2
}

fn synth_image(dir: &Path, name: &str, size: usize, variant: u64) -> PathBuf {
    let path = dir.join(name);
    run_ok(&[
        "synth",
        "--kind",
        "scene",
        "--height",
        &size.to_string(),
        "--width",
        &size.to_string(),
        "--variant",
        &variant.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

#[test]
fn denoise_writes_recomputable_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synth_image(tmp.path(), "scene.png", 64, 1);
    let out = tmp.path().join("runs");
    run_ok(&[
        "denoise",
        img.to_str().unwrap(),
        "--input-psnr",
        "20",
        "--k",
        "8",
        "--d",
        "3",
        "--iters",
        "80",
        "--log-every",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    let run_dir = only_run_dir(&out);

    // manifest exists, parses, and records the input digest
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "denoise");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_ms"].as_u64().is_some());

    // CSV PSNRs must match recomputation from the saved PNGs
    let rows = metrics(&run_dir);
    let truth = load_png(run_dir.join("scene_truth.png")).unwrap();
    let noisy = load_png(run_dir.join("scene_noisy.png")).unwrap();
    let recon = load_png(run_dir.join("scene_reconstruction.png")).unwrap();
    let input_psnr = psnr(&truth, &noisy).unwrap();
    let output_psnr = psnr(&truth, &recon).unwrap();
    assert!((metric(&rows, "input_psnr") - input_psnr).abs() <= 0.02);
    assert!((metric(&rows, "output_psnr") - output_psnr).abs() <= 0.02);

    // traces exist and carry the header
    let traces = std::fs::read_to_string(run_dir.join("scene_traces.csv")).unwrap();
    assert!(traces.starts_with("iteration,loss,psnr"));
}

#[test]
fn denoise_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synth_image(tmp.path(), "scene.png", 64, 2);
    let mut all = Vec::new();
    for sub in ["a", "b"] {
        let out = tmp.path().join(sub);
        run_ok(&[
            "denoise",
            img.to_str().unwrap(),
            "--sigma",
            "0.1",
            "--k",
            "8",
            "--d",
            "3",
            "--iters",
            "60",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        let run_dir = only_run_dir(&out);
        let rows = metrics(&run_dir);
        let traces = std::fs::read_to_string(run_dir.join("scene_traces.csv")).unwrap();
        all.push((rows, traces));
    }
    assert_eq!(all[0].0, all[1].0, "metric rows differ between identical runs");
    assert_eq!(all[0].1, all[1].1, "loss traces differ between identical runs");
}

#[test]
fn compress_reports_budget_parity() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synth_image(tmp.path(), "scene.png", 64, 3);
    let out = tmp.path().join("runs");
    run_ok(&[
        "compress",
        img.to_str().unwrap(),
        "--k",
        "8",
        "--d",
        "3",
        "--iters",
        "120",
        "--out",
        out.to_str().unwrap(),
    ]);
    let run_dir = only_run_dir(&out);
    let rows = metrics(&run_dir);
    // d=3, k=8: N = 3*64 + 2*3*8 + 3*8 = 264; factor = 3*64*64/264
    assert_eq!(metric(&rows, "param_count"), 264.0);
    let factor = metric(&rows, "compression_factor");
    assert!((factor - 3.0 * 64.0 * 64.0 / 264.0).abs() < 1e-9);
    assert!(metric(&rows, "wavelet_psnr") > 10.0);
    assert!(metric(&rows, "dd_psnr") > 10.0);
    // the matched 3x3 configuration stays within the 1x1 budget
    assert!(metric(&rows, "p3_matched_param_count") <= 264.0);

    let truth = load_png(run_dir.join("scene_truth.png")).unwrap();
    let recon = load_png(run_dir.join("scene_reconstruction.png")).unwrap();
    let dd = psnr(&truth, &recon).unwrap();
    assert!((metric(&rows, "dd_psnr") - dd).abs() <= 0.02);
}

#[test]
fn superres_and_inpaint_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synth_image(tmp.path(), "scene.png", 64, 4);

    let out = tmp.path().join("sr");
    run_ok(&[
        "superres",
        img.to_str().unwrap(),
        "--k",
        "8",
        "--d",
        "3",
        "--iters",
        "80",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = metrics(&only_run_dir(&out));
    assert!(metric(&rows, "bicubic_psnr") > 10.0);
    assert!(metric(&rows, "dd_psnr") > 10.0);

    // a mask PNG: hide a centered square
    let mask_path = tmp.path().join("mask.png");
    let mask = deep_decoder::synth::hole_mask(64, 64, 0.4);
    deep_decoder::imgio::save_png(&mask, &mask_path).unwrap();
    let out = tmp.path().join("ip");
    run_ok(&[
        "inpaint",
        img.to_str().unwrap(),
        "--mask",
        mask_path.to_str().unwrap(),
        "--k",
        "16",
        "--d",
        "3",
        "--iters",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = metrics(&only_run_dir(&out));
    assert!((metric(&rows, "kept_fraction") - 0.84).abs() < 0.05);
    assert!(metric(&rows, "output_psnr") > metric(&rows, "identity_psnr"));
}

#[test]
fn fitted_model_studies_chain_from_a_params_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synth_image(tmp.path(), "scene.png", 64, 5);
    let out = tmp.path().join("fit");
    run_ok(&[
        "compress",
        img.to_str().unwrap(),
        "--k",
        "8",
        "--d",
        "3",
        "--iters",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    let bundle = only_run_dir(&out).join("scene_params.json");
    assert!(bundle.exists());

    // quantize from the bundle: 16 bits is visually lossless
    let qout = tmp.path().join("q");
    run_ok(&[
        "quantize",
        img.to_str().unwrap(),
        "--params",
        bundle.to_str().unwrap(),
        "--bits",
        "16",
        "--out",
        qout.to_str().unwrap(),
    ]);
    let rows = metrics(&only_run_dir(&qout));
    assert!(metric(&rows, "psnr_vs_float_recon") >= 60.0);
    assert!(metric(&rows, "quantization_drop_db").abs() <= 0.1);

    let hout = tmp.path().join("h");
    run_ok(&[
        "weighthist",
        "--params",
        bundle.to_str().unwrap(),
        "--bins",
        "21",
        "--out",
        hout.to_str().unwrap(),
    ]);
    let run_dir = only_run_dir(&hout);
    let hist = std::fs::read_to_string(run_dir.join("weighthist.csv")).unwrap();
    assert!(hist.lines().count() > 21);
    let rows = metrics(&run_dir);
    assert!(rows.iter().any(|(_, m, _)| m == "weights_std_layer0"));

    let aout = tmp.path().join("a");
    run_ok(&[
        "activations",
        img.to_str().unwrap(),
        "--params",
        bundle.to_str().unwrap(),
        "--out",
        aout.to_str().unwrap(),
    ]);
    let run_dir = only_run_dir(&aout);
    for layer in 0..3 {
        let png = run_dir.join(format!("scene_activations_layer{layer}.png"));
        assert!(png.exists(), "missing {}", png.display());
    }

    let sout = tmp.path().join("s");
    run_ok(&[
        "sensitivity",
        img.to_str().unwrap(),
        "--params",
        bundle.to_str().unwrap(),
        "--snr-grid",
        "10,30",
        "--trials",
        "2",
        "--out",
        sout.to_str().unwrap(),
    ]);
    let run_dir = only_run_dir(&sout);
    let rows = metrics(&run_dir);
    // recovering the weights exactly (infinite SNR) is the cap; finite SNRs rank sensibly
    let low = metric(&rows, "sensitivity_psnr_layer0_snr10");
    let high = metric(&rows, "sensitivity_psnr_layer0_snr30");
    assert!(high > low, "less weight noise must hurt less: {high} vs {low}");
    assert!(run_dir.join("sensitivity.csv").exists());
}

#[test]
fn theory_commands_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    run_ok(&[
        "theory",
        "lemma2",
        "--n",
        "256",
        "--l",
        "8",
        "--trials",
        "60",
        "--out",
        out.to_str().unwrap(),
    ]);
    let run_dir = only_run_dir(&out);
    let rows = metrics(&run_dir);
    assert_eq!(metric(&rows, "pass"), 1.0);
    let csv = std::fs::read_to_string(run_dir.join("lemma2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);

    let out = tmp.path().join("l1");
    run_ok(&[
        "theory", "lemma1", "--n-max", "6", "--samples", "20000", "--out",
        out.to_str().unwrap(),
    ]);
    let rows = metrics(&only_run_dir(&out));
    assert!(metric(&rows, "mc_count") <= metric(&rows, "mc_chamber_bound"));

    let out = tmp.path().join("p1");
    run_ok(&[
        "theory", "prop1", "--draws", "3", "--restarts", "2", "--iterations", "60", "--out",
        out.to_str().unwrap(),
    ]);
    let rows = metrics(&only_run_dir(&out));
    assert_eq!(metric(&rows, "violations"), 0.0);
}

#[test]
fn rejected_preconditions_exit_nonzero_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synth_image(tmp.path(), "tiny.png", 16, 0);

    // 16x16 cannot host d = 6 (needs multiples of 32)
    let msg = run_err(&[
        "compress",
        img.to_str().unwrap(),
        "--d",
        "6",
        "--iters",
        "10",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert!(msg.contains("multiples of"), "unhelpful message: {msg}");

    // mutually exclusive noise flags
    let msg = run_err(&[
        "denoise",
        img.to_str().unwrap(),
        "--sigma",
        "0.1",
        "--input-psnr",
        "20",
        "--d",
        "3",
        "--out",
        tmp.path().join("y").to_str().unwrap(),
    ]);
    assert!(msg.contains("either --sigma or --input-psnr"), "{msg}");

    // missing mask file
    let msg = run_err(&[
        "inpaint",
        img.to_str().unwrap(),
        "--mask",
        tmp.path().join("nope.png").to_str().unwrap(),
        "--d",
        "3",
        "--out",
        tmp.path().join("z").to_str().unwrap(),
    ]);
    assert!(!msg.is_empty());
}
