//! Synthetic datasets: phantoms, their projections and a TOML manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::ScannerGeometry;
use crate::io::{self, GeometryConfig};
use crate::phantom::{make_phantom, PhantomKind};
use crate::projector::{forward_project, ProjectionStack};
use crate::volume::{Volume3D, DEFAULT_THRESHOLD};

pub const MANIFEST_FORMAT: &str = "difct-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const GEOMETRY_FILE: &str = "geometry.toml";

/// Percentile of training projection values used as the network input divisor.
pub const NORMALIZATION_PERCENTILE: f64 = 99.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(invalid(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

/// Case counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// The clinical protocol's 464 / 50 / 100 division.
    pub const PAPER: Self = Self {
        train: 464,
        val: 50,
        test: 100,
    };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl FromStr for SplitCounts {
    type Err = Error;

    /// `"paper"` or `"train,val,test"`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "paper" {
            return Ok(Self::PAPER);
        }
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| invalid(format!("split counts must be \"paper\" or \"train,val,test\", got {s:?}")))?;
        match parts[..] {
            [train, val, test] => Ok(Self { train, val, test }),
            _ => Err(invalid(format!("expected three split counts, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCase {
    pub name: String,
    pub split: Split,
    /// Paths are relative to the manifest directory.
    pub volume: PathBuf,
    pub projections: PathBuf,
    pub phantom_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub phantom: PhantomKind,
    pub seed: u64,
    pub geometry: PathBuf,
    /// Hex fingerprint of the geometry every stack was projected with.
    pub geometry_fingerprint: String,
    pub normalization_divisor: f64,
    pub threshold: f32,
    pub cases: Vec<DatasetCase>,
}

/// A loaded case.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub volume: Volume3D,
    pub projections: ProjectionStack,
}

/// Seed of the phantom at `index` in a dataset built with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut h = (seed ^ 0xD1B5_4A32_D192_ED03).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
    h = (h ^ index as u64).wrapping_mul(0xAEF1_7502_108E_F2D9);
    h ^ (h >> 29)
}

/// Value at `pct` percent of the sorted data (nearest rank).
pub fn percentile(values: &[f32], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    let rank = ((pct / 100.0) * (v.len() - 1) as f64).round() as usize;
    let (_, nth, _) = v.select_nth_unstable_by(rank.min(values.len() - 1), f32::total_cmp);
    *nth as f64
}

/// Input divisor for a set of projection stacks; 1 when they are all zero.
pub fn normalization_divisor<'a>(stacks: impl IntoIterator<Item = &'a ProjectionStack>) -> f64 {
    let all: Vec<f32> = stacks.into_iter().flat_map(|s| s.data().iter().copied()).collect();
    let p = percentile(&all, NORMALIZATION_PERCENTILE);
    if p > 0.0 && p.is_finite() {
        p
    } else {
        1.0
    }
}

/// Generates, projects and writes a dataset under `dir`.
///
/// Cases are numbered in split order (train, then val, then test). The
/// normalization divisor is taken from the training projections, or from all
/// of them when there is no training split.
pub fn build_dataset(
    dir: &Path,
    counts: SplitCounts,
    phantom: PhantomKind,
    geom: &ScannerGeometry,
    seed: u64,
) -> Result<DatasetManifest> {
    let geom_cfg = GeometryConfig::from_geometry(geom)?;
    let geom = geom_cfg.to_geometry()?;
    io::write_geometry(&dir.join(GEOMETRY_FILE), &geom_cfg)?;
    let mut cases = Vec::with_capacity(counts.total());
    let mut stacks = Vec::with_capacity(counts.total());
    for index in 0..counts.total() {
        let split = counts.split_of(index);
        let name = format!("{split}_{index:04}");
        let phantom_seed = case_seed(seed, index);
        let vol = make_phantom(phantom, geom.volume_shape, geom.voxel_spacing, phantom_seed)?;
        let proj = forward_project(&vol, &geom)?;
        let case = DatasetCase {
            volume: PathBuf::from(format!("{name}.difvol")),
            projections: PathBuf::from(format!("{name}.difproj")),
            name,
            split,
            phantom_seed,
        };
        io::write_volume(&dir.join(&case.volume), &vol)?;
        io::write_projections(&dir.join(&case.projections), &proj)?;
        stacks.push((split, proj));
        cases.push(case);
    }
    let has_train = counts.train > 0;
    let divisor = normalization_divisor(
        stacks
            .iter()
            .filter(|(s, _)| !has_train || *s == Split::Train)
            .map(|(_, p)| p),
    );
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        phantom,
        seed,
        geometry: PathBuf::from(GEOMETRY_FILE),
        geometry_fingerprint: format!("{:016x}", geom.fingerprint()),
        normalization_divisor: divisor,
        threshold: DEFAULT_THRESHOLD,
        cases,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_string(),
            detail: e.message().to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                path: path.to_string(),
                detail: format!("expected format {MANIFEST_FORMAT:?}, found {:?}", m.format),
            });
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "dataset manifest",
                path: path.to_string(),
                expected: MANIFEST_VERSION.to_string(),
                found: m.version.to_string(),
            });
        }
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text, &path.display().to_string())?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for file in std::iter::once(&m.geometry).chain(m.cases.iter().flat_map(|c| [&c.volume, &c.projections])) {
            let full = dir.join(file);
            if !full.is_file() {
                return Err(Error::io(full, std::io::ErrorKind::NotFound.into()));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| invalid(format!("cannot encode manifest: {e}")))?;
        io::write_atomic(path, text.as_bytes())
    }

    pub fn count(&self, split: Split) -> usize {
        self.cases.iter().filter(|c| c.split == split).count()
    }

    /// Loads the geometry and verifies it against the recorded fingerprint.
    pub fn load_geometry(&self, dir: &Path) -> Result<ScannerGeometry> {
        let path = dir.join(&self.geometry);
        let geom = io::read_geometry(&path)?.to_geometry()?;
        let fp = format!("{:016x}", geom.fingerprint());
        if fp != self.geometry_fingerprint {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("geometry fingerprint {fp} does not match manifest {}", self.geometry_fingerprint),
            });
        }
        Ok(geom)
    }

    /// Loads every case of `split`, checking each stack against `geom`.
    pub fn load_split(&self, dir: &Path, split: Split, geom: &ScannerGeometry) -> Result<Vec<Case>> {
        self.cases
            .iter()
            .filter(|c| c.split == split)
            .map(|c| {
                let volume = io::read_volume(&dir.join(&c.volume))?;
                let path = dir.join(&c.projections);
                let projections = io::read_projections(&path)?;
                projections.check_compatible(geom).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })?;
                if volume.shape() != geom.volume_shape {
                    return Err(Error::Format {
                        path: dir.join(&c.volume).display().to_string(),
                        detail: format!("volume shape {:?} differs from geometry {:?}", volume.shape(), geom.volume_shape),
                    });
                }
                Ok(Case {
                    name: c.name.clone(),
                    volume,
                    projections: projections.bind(geom)?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_counts() {
        let c: SplitCounts = "paper".parse().unwrap();
        assert_eq!((c.train, c.val, c.test), (464, 50, 100));
        assert_eq!("4, 1,2".parse::<SplitCounts>().unwrap().total(), 7);
        assert!("4,1".parse::<SplitCounts>().is_err());
    }

    #[test]
    fn splits_are_contiguous_and_disjoint() {
        let c = SplitCounts { train: 2, val: 1, test: 2 };
        let s: Vec<_> = (0..5).map(|i| c.split_of(i)).collect();
        assert_eq!(s, [Split::Train, Split::Train, Split::Val, Split::Test, Split::Test]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f32> = (0..=1000).map(|i| i as f32).collect();
        assert_eq!(percentile(&v, 99.9), 999.0);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 1000.0);
    }

    #[test]
    fn case_seeds_are_distinct() {
        let seeds: std::collections::HashSet<_> = (0..1000).map(|i| case_seed(3, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(case_seed(0, 1), case_seed(1, 0));
    }
}
