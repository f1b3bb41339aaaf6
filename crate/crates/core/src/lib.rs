//! Cone-beam CT reconstruction: geometry, synthetic data, classical
//! baselines and the deep intensity field network.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod train;
pub mod volume;

pub use bench::{run_benchmark, BenchConfig, BenchReport, Method};
pub use dataset::{build_dataset, Case, DatasetManifest, Split, SplitCounts};
pub use error::{Error, Result};
pub use geometry::{uniform_angles, ScannerGeometry};
pub use phantom::{make_phantom, PhantomKind};
pub use projector::{forward_project, forward_project_single, ProjectionStack};
pub use volume::{grid_points, sample_balanced_points, PointBatch, Volume3D};
pub use recon::{fdk_reconstruct, sart_reconstruct, sart_reconstruct_traced, FdkConfig, FdkFilter, SartConfig};
pub use model::{DifConfig, DifModel, Fusion};
pub use train::{train, TrainConfig, TrainReport, TrainSample};
