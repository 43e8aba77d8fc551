//! Shared option groups, config-file merging, and output plumbing.
//!
//! Every tunable has three representations: an optional flag, an optional
//! config-file field, and a resolved concrete value. Flags win over the
//! file; the file wins over built-in defaults. Manifests echo resolved
//! values only.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use evolrp::data::{generate_shapes, Dataset};
use evolrp::lrp::LayerRuleConfig;
use evolrp::metrics::MetricConfig;
use evolrp::net::Model;

pub const SCHEMA_VERSION: u32 = 1;

/// Marker for mistakes in how the tool was invoked (missing files,
/// malformed configs); these exit with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a T,
}

/// Every artifact-producing run records its fully resolved configuration.
pub fn write_manifest<T: Serialize>(out_dir: &Path, command: &str, config: &T) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_json(
        &out_dir.join("manifest.json"),
        &Manifest { schema_version: SCHEMA_VERSION, command, config },
    )
}

pub fn load_config_file<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    require_file(path, "config file")?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))
}

pub fn load_model_file(path: &Path) -> anyhow::Result<Model> {
    require_file(path, "model file")?;
    Ok(evolrp::model_io::load_model(path)?)
}

pub fn load_rules_file(path: &Path, model: &Model) -> anyhow::Result<LayerRuleConfig> {
    require_file(path, "rules file")?;
    let text = fs::read_to_string(path)?;
    let config: LayerRuleConfig = serde_json::from_str(&text)
        .map_err(|e| usage(format!("rules file {}: {e}", path.display())))?;
    config.validate_for(model)?;
    Ok(config)
}

/// Synthetic dataset parameters. The data is regenerated from these on
/// every run, so the manifest alone pins the exact images.
#[derive(Args, Debug)]
pub struct DataOpts {
    /// Images per class in the generated shapes set
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Square image side in pixels (divisible by 4)
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Std of the Gaussian pixel noise added to each image
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Seed for dataset generation
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
pub struct DataFile {
    pub n_per_class: Option<usize>,
    pub image_size: Option<usize>,
    pub noise_std: Option<f64>,
    pub data_seed: Option<u64>,
}

#[derive(Serialize, Clone, Debug)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub data_seed: u64,
}

impl DataConfig {
    pub fn resolve(opts: &DataOpts, file: &DataFile, default_per_class: usize) -> DataConfig {
        DataConfig {
            n_per_class: opts.n_per_class.or(file.n_per_class).unwrap_or(default_per_class),
            image_size: opts.image_size.or(file.image_size).unwrap_or(16),
            noise_std: opts.noise_std.or(file.noise_std).unwrap_or(0.05),
            data_seed: opts.data_seed.or(file.data_seed).unwrap_or(7),
        }
    }

    pub fn generate(&self) -> anyhow::Result<Dataset> {
        Ok(generate_shapes(self.n_per_class, self.image_size, self.noise_std, self.data_seed)?)
    }
}

/// Sampling knobs for the faithfulness and sensitivity metrics.
#[derive(Args, Debug)]
pub struct MetricOpts {
    /// Masked feature subsets drawn per image for faithfulness
    #[arg(long)]
    pub n_subsets: Option<usize>,
    /// Spatial positions masked per subset
    #[arg(long)]
    pub subset_size: Option<usize>,
    /// Fill value for masked positions
    #[arg(long)]
    pub baseline_value: Option<f32>,
    /// Gaussian perturbations drawn per image for sensitivity
    #[arg(long)]
    pub n_perturbations: Option<usize>,
    /// Std of the sensitivity perturbations
    #[arg(long)]
    pub perturb_std: Option<f64>,
    /// Master seed for the metric sampling streams
    #[arg(long)]
    pub metric_seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
pub struct MetricFile {
    pub n_subsets: Option<usize>,
    pub subset_size: Option<usize>,
    pub baseline_value: Option<f32>,
    pub n_perturbations: Option<usize>,
    pub perturb_std: Option<f64>,
    pub metric_seed: Option<u64>,
}

pub fn resolve_metric_config(opts: &MetricOpts, file: &MetricFile) -> MetricConfig {
    let d = MetricConfig::default();
    MetricConfig {
        n_subsets: opts.n_subsets.or(file.n_subsets).unwrap_or(d.n_subsets),
        subset_size: opts.subset_size.or(file.subset_size).unwrap_or(d.subset_size),
        baseline_value: opts.baseline_value.or(file.baseline_value).unwrap_or(d.baseline_value),
        n_perturbations: opts
            .n_perturbations
            .or(file.n_perturbations)
            .unwrap_or(d.n_perturbations),
        perturb_std: opts.perturb_std.or(file.perturb_std).unwrap_or(d.perturb_std),
        seed: opts.metric_seed.or(file.metric_seed).unwrap_or(d.seed),
    }
}

/// Parameters of the non-LRP attribution methods.
#[derive(Args, Debug)]
pub struct MethodOpts {
    /// Tuned per-layer rules JSON (required for the EVO-LRP method)
    #[arg(long)]
    pub rules_file: Option<PathBuf>,
    /// Path-integral steps for integrated gradients
    #[arg(long)]
    pub ig_steps: Option<usize>,
    /// Patch side for the LIME and occlusion grids
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Perturbation samples drawn by LIME
    #[arg(long)]
    pub lime_samples: Option<usize>,
    /// LIME locality kernel width (in patches)
    #[arg(long)]
    pub lime_kernel_width: Option<f64>,
    /// LIME ridge regularization strength
    #[arg(long)]
    pub lime_lambda: Option<f64>,
    /// Seed for the LIME mask draws
    #[arg(long)]
    pub lime_seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
pub struct MethodFile {
    pub ig_steps: Option<usize>,
    pub patch_size: Option<usize>,
    pub lime_samples: Option<usize>,
    pub lime_kernel_width: Option<f64>,
    pub lime_lambda: Option<f64>,
    pub lime_seed: Option<u64>,
}

#[derive(Serialize, Clone, Debug)]
pub struct MethodParams {
    pub ig_steps: usize,
    pub patch_size: usize,
    pub lime_samples: usize,
    pub lime_kernel_width: f64,
    pub lime_lambda: f64,
    pub lime_seed: u64,
}

impl MethodParams {
    pub fn resolve(opts: &MethodOpts, file: &MethodFile) -> MethodParams {
        MethodParams {
            ig_steps: opts.ig_steps.or(file.ig_steps).unwrap_or(64),
            patch_size: opts.patch_size.or(file.patch_size).unwrap_or(4),
            lime_samples: opts.lime_samples.or(file.lime_samples).unwrap_or(200),
            lime_kernel_width: opts
                .lime_kernel_width
                .or(file.lime_kernel_width)
                .unwrap_or(4.0),
            lime_lambda: opts.lime_lambda.or(file.lime_lambda).unwrap_or(1e-3),
            lime_seed: opts.lime_seed.or(file.lime_seed).unwrap_or(11),
        }
    }
}
