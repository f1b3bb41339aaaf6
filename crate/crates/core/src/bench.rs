//! Method comparison across view counts and output resolutions.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::dataset::Case;
use crate::error::{invalid, Error, Result};
use crate::geometry::ScannerGeometry;
use crate::metrics::{CaseMetrics, EvalReport};
use crate::model::{DifModel, DEFAULT_CHUNK};
use crate::projector::{forward_project, ProjectionStack};
use crate::recon::{fdk_reconstruct, sart_reconstruct, FdkConfig, SartConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Fdk,
    Sart,
    Dif,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fdk" => Ok(Self::Fdk),
            "sart" => Ok(Self::Sart),
            "dif" | "dif-net" | "difnet" => Ok(Self::Dif),
            other => Err(invalid(format!("unknown method {other:?} (expected fdk, sart or dif)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fdk => "fdk",
            Self::Sart => "sart",
            Self::Dif => "dif",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub view_counts: Vec<usize>,
    /// Cubic output edge lengths.
    pub resolutions: Vec<usize>,
    pub fdk: FdkConfig,
    pub sart: SartConfig,
    pub chunk_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Fdk, Method::Sart, Method::Dif],
            view_counts: vec![10],
            resolutions: vec![64],
            fdk: FdkConfig::default(),
            sart: SartConfig::default(),
            chunk_size: DEFAULT_CHUNK,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub cells: Vec<EvalReport>,
    pub warnings: Vec<String>,
}

/// Runs every method on every case for each `(K, resolution)` cell.
///
/// Cases hold normalized ground truth on `geom`'s lattice; projections are
/// reused when their angles match K and simulated otherwise. Ground truth is
/// resampled to each output resolution. A missing DIF model for some K skips
/// that cell with a warning.
pub fn run_benchmark(
    cases: &[Case],
    geom: &ScannerGeometry,
    cfg: &BenchConfig,
    models: &BTreeMap<usize, DifModel<f32>>,
    mut progress: impl FnMut(&str),
) -> Result<BenchReport> {
    if cases.is_empty() {
        return Err(invalid("benchmark needs at least one case"));
    }
    if cfg.methods.is_empty() || cfg.view_counts.is_empty() || cfg.resolutions.is_empty() {
        return Err(invalid("benchmark needs at least one method, view count and resolution"));
    }
    if cfg.resolutions.contains(&0) {
        return Err(invalid("resolutions must be positive"));
    }
    cfg.sart.validate()?;
    let mut report = BenchReport::default();
    for &k in &cfg.view_counts {
        let gk = geom.with_views(k)?;
        let stacks = cases
            .iter()
            .map(|c| stack_for(c, &gk))
            .collect::<Result<Vec<_>>>()?;
        for &res in &cfg.resolutions {
            let shape = [res; 3];
            let truths = cases
                .iter()
                .map(|c| c.volume.resample(shape))
                .collect::<Result<Vec<_>>>()?;
            for &method in &cfg.methods {
                let model = models.get(&k);
                if method == Method::Dif && model.is_none() {
                    let msg = format!("no DIF model for K={k}; skipped");
                    progress(&msg);
                    report.warnings.push(msg);
                    continue;
                }
                let mut cell = EvalReport {
                    method: method.to_string(),
                    n_views: k,
                    resolution: shape,
                    data_range: 1.0,
                    cases: Vec::with_capacity(cases.len()),
                };
                for ((case, stack), truth) in cases.iter().zip(&stacks).zip(&truths) {
                    let start = Instant::now();
                    let pred = match method {
                        Method::Fdk => fdk_reconstruct(stack, &gk, shape, &cfg.fdk)?,
                        Method::Sart => sart_reconstruct(stack, &gk, shape, &cfg.sart)?,
                        Method::Dif => model.expect("checked above").reconstruct(stack, &gk, shape, cfg.chunk_size)?,
                    };
                    let seconds = start.elapsed().as_secs_f64();
                    cell.cases.push(CaseMetrics::evaluate(&case.name, &pred, truth, seconds)?);
                }
                progress(&format!(
                    "{method} K={k} {res}^3: PSNR {:.2} dB, SSIM {:.4}, {:.2} s/case",
                    cell.mean_psnr(),
                    cell.mean_ssim(),
                    cell.mean_seconds()
                ));
                report.cells.push(cell);
            }
        }
    }
    Ok(report)
}

fn stack_for(case: &Case, gk: &ScannerGeometry) -> Result<ProjectionStack> {
    if case.projections.angles() == gk.angles.as_slice() && case.projections.check_compatible(gk).is_ok() {
        return case.projections.clone().bind(gk);
    }
    forward_project(&case.volume, gk)
}

impl BenchReport {
    pub fn cell(&self, method: Method, k: usize, res: usize) -> Option<&EvalReport> {
        let name = method.to_string();
        self.cells
            .iter()
            .find(|c| c.method == name && c.n_views == k && c.resolution == [res; 3])
    }

    /// One row per case and cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n_views,resolution,case,psnr_db,ssim,seconds\n");
        for cell in &self.cells {
            for c in &cell.cases {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.4},{:.6},{:.4}",
                    cell.method, cell.n_views, cell.resolution[0], c.case, c.psnr_db, c.ssim, c.seconds
                );
            }
        }
        out
    }

    /// Methods as rows, `(K, resolution)` cells as columns.
    pub fn summary(&self) -> String {
        let mut columns: Vec<(usize, usize)> = self.cells.iter().map(|c| (c.n_views, c.resolution[0])).collect();
        columns.sort_unstable();
        columns.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !methods.contains(&c.method.as_str()) {
                methods.push(&c.method);
            }
        }
        let mut out = format!("{:<8}", "method");
        for (k, r) in &columns {
            let _ = write!(out, " | {:^26}", format!("K={k} {r}^3"));
        }
        out.push('\n');
        for m in methods {
            let _ = write!(out, "{m:<8}");
            for &(k, r) in &columns {
                match self.cells.iter().find(|c| c.method == m && c.n_views == k && c.resolution[0] == r) {
                    Some(c) => {
                        let _ = write!(
                            out,
                            " | {:>6.2} dB {:>6.4} {:>7.2}s",
                            c.mean_psnr(),
                            c.mean_ssim(),
                            c.mean_seconds()
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:^26}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
