use std::path::{Path, PathBuf};
use std::time::Instant;

use nmsparse::codec::encode;
use nmsparse::pipeline::{metadata_bits_report, relative_output_error, run_pipeline, ReconstructionSummary};
use nmsparse::{CalibrationSet, PipelineConfig, ReconstructionSettings, Scorer, WeightMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{read_file, Failure, PruneArgs, ScorerArg};

/// Record of one `prune` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub calibration: PathBuf,
    pub layers: Vec<LayerReport>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub reconstruction: Option<ReconstructionSummary>,
    pub correction_factor: f64,
    pub relative_output_error: f64,
    pub residual_fraction: f64,
    pub salient_fraction: f64,
    pub metadata_bits_per_element: f64,
    pub file_bytes: usize,
}

fn config_from_args(a: &PruneArgs) -> Result<PipelineConfig, Failure> {
    if let Some(path) = &a.config {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| Failure::config(format!("{}: not UTF-8", path.display())))?;
        let cfg = PipelineConfig::from_json(&text)?;
        return Ok(cfg);
    }
    let pattern = a.pattern.expect("clap requires --pattern without --config");
    let scorer = match a.scorer {
        ScorerArg::Magnitude => Scorer::Magnitude,
        ScorerArg::Ria => Scorer::Ria,
    };
    let mut cfg = PipelineConfig::new(pattern, scorer)
        .with_equalization(a.equalize)
        .with_variance_correction(a.variance_correct);
    cfg.salient_pattern = a.salient;
    if let Some(p) = a.activation_power {
        cfg.activation_power = p;
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if a.reconstruct || a.max_iters.is_some() {
        let mut s = ReconstructionSettings::default();
        if let Some(n) = a.max_iters {
            s.max_iters = n;
        }
        cfg.reconstruction = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_path(input: &Path, out_dir: Option<&Path>) -> PathBuf {
    let name = Path::new(input.file_name().unwrap_or(input.as_os_str())).with_extension("nms");
    match out_dir {
        Some(dir) => dir.join(name),
        None => input.with_file_name(name),
    }
}

fn prune_one(
    input: &Path,
    out_dir: Option<&Path>,
    calib: &CalibrationSet,
    cfg: &PipelineConfig,
    dtype: Option<nmsparse::DType>,
) -> Result<LayerReport, Failure> {
    let (w, in_dtype) = WeightMatrix::from_dwt_bytes(&read_file(input)?)
        .map_err(|e| Failure::from(e).prefixed(input))?;
    let out = run_pipeline(&w, calib, cfg).map_err(|e| Failure::from(e).prefixed(input))?;
    let encoded = encode(&out.layer, dtype.unwrap_or(in_dtype))?;
    let output = output_path(input, out_dir);
    encoded
        .write_file(&output)
        .map_err(|e| Failure::from(e).prefixed(&output))?;

    let storage = metadata_bits_report(&out.layer, 32)?;
    let elements = storage.elements.max(1) as f64;
    let report = LayerReport {
        input: input.to_path_buf(),
        output,
        rows: w.rows(),
        cols: w.cols(),
        reconstruction: out.reconstruction,
        correction_factor: out.layer.correction_factor,
        relative_output_error: relative_output_error(&w, &out.layer, calib)?,
        residual_fraction: storage.residual_values as f64 / elements,
        salient_fraction: storage.salient_values as f64 / elements,
        metadata_bits_per_element: storage.total_metadata_bits_per_element,
        file_bytes: encoded.byte_len(),
    };
    log::info!(
        "{} -> {} (relative error {:.4e})",
        input.display(),
        report.output.display(),
        report.relative_output_error
    );
    Ok(report)
}

impl Failure {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

pub fn run(a: PruneArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = config_from_args(&a)?;
    let (calib, _) = CalibrationSet::from_dwt_bytes(&read_file(&a.calib)?)
        .map_err(|e| Failure::from(e).prefixed(&a.calib))?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    let dtype = a.dtype.map(Into::into);
    let layers = pool.install(|| {
        a.inputs
            .par_iter()
            .map(|p| prune_one(p, a.out_dir.as_deref(), &calib, &cfg, dtype))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg,
        calibration: a.calib.clone(),
        layers,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Some(path) = &a.report {
        std::fs::write(path, &text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    }
    if a.json {
        println!("{text}");
    } else {
        for l in &manifest.layers {
            println!(
                "{} -> {}  error {:.4e}  kept {:.4}  salient {:.4}  bytes {}",
                l.input.display(),
                l.output.display(),
                l.relative_output_error,
                l.residual_fraction,
                l.salient_fraction,
                l.file_bytes
            );
        }
    }
    Ok(())
}
