//! TOML description of a benchmark run.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use difct_core::{
    run_benchmark, BenchConfig, BenchReport, DatasetManifest, DifModel, Error, FdkConfig, FdkFilter, Method,
    SartConfig, Split,
};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    /// Dataset manifest, relative to the config file.
    pub dataset: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    pub methods: Vec<String>,
    pub view_counts: Vec<usize>,
    pub resolutions: Vec<usize>,
    #[serde(default)]
    pub fdk_filter: Option<FdkFilter>,
    #[serde(default)]
    pub sart_iterations: Option<usize>,
    #[serde(default)]
    pub sart_relaxation: Option<f64>,
    /// View count (as a string key) to model checkpoint path.
    #[serde(default)]
    pub models: HashMap<String, PathBuf>,
}

fn default_split() -> String {
    "test".into()
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn parse(text: &str, path: &Path) -> Result<BenchFile, Error> {
    toml::from_str(text).map_err(|e| format_err(path, e.message()))
}

/// Loads the config, its dataset and any models that exist, then runs the benchmark.
pub fn run(path: &Path, log: impl Fn(&str)) -> anyhow::Result<BenchReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let file = parse(&text, path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let manifest_path = base.join(&file.dataset);
    let manifest = DatasetManifest::read(&manifest_path)?;
    let data_dir = manifest_path.parent().unwrap_or(Path::new(""));
    let geom = manifest.load_geometry(data_dir)?;
    let split: Split = file.split.parse()?;
    let cases = manifest.load_split(data_dir, split, &geom)?;
    let methods = file
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = BenchConfig {
        methods,
        view_counts: file.view_counts.clone(),
        resolutions: file.resolutions.clone(),
        ..Default::default()
    };
    cfg.fdk = FdkConfig {
        filter: file.fdk_filter.unwrap_or(cfg.fdk.filter),
        ..cfg.fdk
    };
    cfg.sart = SartConfig {
        n_iterations: file.sart_iterations.unwrap_or(cfg.sart.n_iterations),
        relaxation: file.sart_relaxation.unwrap_or(cfg.sart.relaxation),
        ..cfg.sart
    };
    let mut models = BTreeMap::new();
    let mut warnings = Vec::new();
    for (key, rel) in &file.models {
        let k: usize = key
            .parse()
            .map_err(|_| format_err(path, format!("model key {key:?} is not a view count")))?;
        let model_path = base.join(rel);
        if !model_path.is_file() {
            let msg = format!("model {} for K={k} not found; DIF skipped", model_path.display());
            log(&msg);
            warnings.push(msg);
            continue;
        }
        models.insert(k, DifModel::<f32>::load(&model_path)?);
    }
    let mut report = run_benchmark(&cases, &geom, &cfg, &models, &log)?;
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok(report)
}
