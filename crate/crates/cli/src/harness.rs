//! Shared run plumbing: output directories, the run manifest, the metrics
//! CSV, input preparation (loading, center-cropping, digests), and the
//! fitted-parameter bundle format.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use deep_decoder::decoder::{DecoderConfig, ParamSet};
use deep_decoder::imgio;
use deep_decoder::tensor::ChannelStack;

pub const OUT_ENV: &str = "DEEP_DECODER_OUT";

#[derive(Debug, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    /// Original dims and the centered crop actually used.
    pub loaded_dims: (usize, usize),
    pub cropped_dims: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image: String,
    pub metric: String,
    pub value: f64,
}

/// Everything needed to reproduce a run, written atomically at the end.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Option<DecoderConfig>,
    pub options: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub metrics: Vec<MetricRecord>,
    pub wall_ms: u64,
}

/// A live run: accumulates outputs and metrics, then finalizes the manifest
/// and the metrics CSV.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub k: usize,
    pub d: usize,
    pub iters: usize,
    started: std::time::Instant,
}

impl Run {
    pub fn new(
        command: &str,
        seed: u64,
        out: Option<&Path>,
        k: usize,
        d: usize,
        iters: usize,
    ) -> Result<Run> {
        let argv: Vec<String> = std::env::args().collect();
        let mut hasher = Sha256::new();
        for a in &argv {
            hasher.update(a.as_bytes());
            hasher.update([0]);
        }
        hasher.update(seed.to_le_bytes());
        let run_id = hex_prefix(&hasher.finalize(), 10);
        let root = out
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let dir = root.join(format!("{command}-{run_id}"));
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Run {
            dir,
            manifest: RunManifest {
                run_id,
                command: command.to_string(),
                argv,
                seed,
                config: None,
                options: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                metrics: Vec::new(),
                wall_ms: 0,
            },
            k,
            d,
            iters,
            started: std::time::Instant::now(),
        })
    }

    pub fn record_input(&mut self, path: &Path, loaded: (usize, usize), cropped: (usize, usize)) -> Result<()> {
        let bytes = fs::read(path)?;
        self.manifest.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: hex_prefix(&Sha256::digest(&bytes), 64),
            loaded_dims: loaded,
            cropped_dims: cropped,
        });
        Ok(())
    }

    pub fn metric(&mut self, image: &str, metric: &str, value: f64) {
        self.manifest.metrics.push(MetricRecord {
            image: image.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Register and return an output path inside the run directory.
    pub fn out_path(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.manifest.outputs.push(path.display().to_string());
        path
    }

    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_path(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    /// Write metrics.csv and manifest.json (the latter atomically) and print
    /// a short summary.
    pub fn finish(mut self) -> Result<()> {
        let mut csv = String::from("run_id,command,image,k,d,iters,seed,metric,value\n");
        for m in &self.manifest.metrics {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.manifest.run_id,
                self.manifest.command,
                m.image,
                self.k,
                self.d,
                self.iters,
                self.manifest.seed,
                m.metric,
                m.value
            ));
        }
        let csv_path = self.dir.join("metrics.csv");
        fs::write(&csv_path, csv)?;
        self.manifest.outputs.push(csv_path.display().to_string());
        self.manifest.wall_ms = self.started.elapsed().as_millis() as u64;

        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.dir.join("manifest.json"))?;

        println!("run {} -> {}", self.manifest.run_id, self.dir.display());
        for m in &self.manifest.metrics {
            println!("  {:<16} {:<28} {:.4}", m.image, m.metric, m.value);
        }
        Ok(())
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Load a PNG and center-crop both axes to multiples of `alignment`.
/// Errors list the nearest valid sizes when the image is too small.
pub fn load_aligned(path: &Path, alignment: usize) -> Result<(ChannelStack, (usize, usize))> {
    let img = imgio::load_png(path).with_context(|| format!("loading {}", path.display()))?;
    let (h, w) = img.dims();
    let ch = (h / alignment) * alignment;
    let cw = (w / alignment) * alignment;
    if ch == 0 || cw == 0 {
        bail!(
            "{} is {h}x{w}; this configuration needs at least {alignment}x{alignment} \
             (valid sizes are multiples of {alignment})",
            path.display()
        );
    }
    let cropped = imgio::center_crop(&img, ch, cw)?;
    Ok((cropped, (h, w)))
}

pub fn image_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

/// Fitted parameters together with the architecture that produced them.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub config: DecoderConfig,
    pub params: ParamSet,
}

impl ParamsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamsFile> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading parameter bundle {}", path.display()))?;
        let bundle: ParamsFile = serde_json::from_str(&text)?;
        bundle.config.validate()?;
        bundle.params.all_finite().then_some(()).context("parameters contain non-finite values")?;
        Ok(bundle)
    }
}

/// Run independent work items, optionally across a private pool of `jobs`
/// threads. Results keep item order either way.
pub fn map_jobs<T: Send, R: Send>(jobs: usize, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| items.into_par_iter().map(f).collect())
}
