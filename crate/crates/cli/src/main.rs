use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use difct_core::io::{self, GeometryConfig};
use difct_core::metrics::CaseMetrics;
use difct_core::model::DEFAULT_CHUNK;
use difct_core::{
    build_dataset, fdk_reconstruct, forward_project, make_phantom, sart_reconstruct, train, DatasetManifest,
    DifConfig, DifModel, Error, FdkConfig, FdkFilter, Fusion, PhantomKind, ProjectionStack, SartConfig,
    ScannerGeometry, Split, SplitCounts, TrainConfig, TrainSample, Volume3D,
};

mod bench_config;

#[derive(Parser)]
#[command(name = "difct", version, about = "Sparse-view cone-beam CT reconstruction")]
struct Cli {
    /// Seed for phantoms, datasets, weight initialization and point sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true, env = "DIFCT_THREADS")]
    threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a geometry preset as TOML.
    Geometry(GeometryArgs),
    /// Generate a synthetic phantom volume.
    Phantom(PhantomArgs),
    /// Simulate projections of a volume.
    Project(ProjectArgs),
    /// Filtered backprojection.
    ReconFdk(FdkArgs),
    /// Iterative algebraic reconstruction.
    ReconSart(SartArgs),
    /// Train an intensity-field model on a dataset.
    Train(TrainArgs),
    /// Reconstruct with a trained model.
    ReconDif(DifArgs),
    /// PSNR and SSIM of a reconstruction against ground truth.
    Eval(EvalArgs),
    /// Compare methods over view counts and resolutions.
    Bench(BenchArgs),
    /// Export one slice as a PGM image.
    Slice(SliceArgs),
    /// Build a synthetic dataset with a manifest.
    Dataset(DatasetArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

impl Preset {
    fn geometry(self, views: usize) -> difct_core::Result<ScannerGeometry> {
        match self {
            Self::Desk => ScannerGeometry::desk(views),
            Self::Full => ScannerGeometry::full(views),
        }
    }
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    /// shepp_logan_3d, random_ellipsoids or sphere.
    #[arg(long, default_value = "random_ellipsoids")]
    kind: PhantomKind,
    /// Take the lattice from this geometry instead of --size/--spacing.
    #[arg(long, visible_alias = "geom")]
    geometry: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Voxel spacing in mm.
    #[arg(long, default_value_t = 3.2)]
    spacing: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    vol: PathBuf,
    #[arg(long, visible_alias = "geom")]
    geometry: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ReconInput {
    #[arg(long)]
    proj: PathBuf,
    #[arg(long, visible_alias = "geom")]
    geometry: PathBuf,
    /// Cubic output edge length; defaults to the geometry's volume shape.
    #[arg(long, visible_alias = "out-shape")]
    res: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FdkArgs {
    #[command(flatten)]
    input: ReconInput,
    /// ram_lak or shepp_logan.
    #[arg(long, default_value = "shepp_logan")]
    filter: FdkFilter,
    #[arg(long)]
    no_redundancy_weights: bool,
}

#[derive(Args)]
struct SartArgs {
    #[command(flatten)]
    input: ReconInput,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    relaxation: f64,
    #[arg(long)]
    allow_negative: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (its train split is used).
    #[arg(long, visible_alias = "data")]
    dataset: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// mlp, max_pool or avg_pool.
    #[arg(long, default_value = "mlp")]
    fusion: Fusion,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Balanced points per volume and step.
    #[arg(long)]
    points: Option<usize>,
    /// Volumes per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps_per_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Final learning rate as a fraction of the initial one.
    #[arg(long, default_value_t = difct_core::train::TOTAL_LR_DECAY)]
    lr_floor: f64,
    /// Checkpoint interval in epochs.
    #[arg(long)]
    save_every: Option<usize>,
}

#[derive(Args)]
struct DifArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: ReconInput,
    /// Query points per inference chunk.
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    chunk: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-case CSV report.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    vol: PathBuf,
    #[arg(long, value_enum, default_value = "z")]
    axis: Axis,
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = 0.0)]
    lo: f32,
    #[arg(long, default_value_t = 1.0)]
    hi: f32,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// "paper" or "train,val,test".
    #[arg(long, default_value = "64,0,16")]
    counts: SplitCounts,
    #[arg(long, default_value = "random_ellipsoids")]
    kind: PhantomKind,
    /// Geometry file; overrides --preset/--views.
    #[arg(long, visible_alias = "geom")]
    geometry: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 10)]
    views: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 usage, 3 data or format, 4 numerical failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => 4,
        Some(err) if err.is_data_error() => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let log = |msg: &str| {
        if cli.verbose {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::Geometry(a) => {
            let geom = a.preset.geometry(a.views)?;
            io::write_geometry(&a.output, &GeometryConfig::from_geometry(&geom)?)?;
        }
        Command::Phantom(a) => {
            let (shape, spacing) = match &a.geometry {
                Some(p) => {
                    let g = load_geometry(p)?;
                    (g.volume_shape, g.voxel_spacing)
                }
                None => ([a.size; 3], [a.spacing; 3]),
            };
            let vol = make_phantom(a.kind, shape, spacing, cli.seed)?;
            io::write_volume(&a.output, &vol)?;
        }
        Command::Project(a) => {
            let geom = load_geometry(&a.geometry)?;
            let vol = io::read_volume(&a.vol)?;
            let start = Instant::now();
            let proj = forward_project(&vol, &geom)?;
            log(&format!("projected {} views in {:.2} s", geom.n_views(), start.elapsed().as_secs_f64()));
            io::write_projections(&a.output, &proj)?;
        }
        Command::ReconFdk(a) => {
            let cfg = FdkConfig {
                filter: a.filter,
                redundancy_weights: !a.no_redundancy_weights,
            };
            reconstruct(&a.input, log, |p, g, s| fdk_reconstruct(p, g, s, &cfg))?;
        }
        Command::ReconSart(a) => {
            let cfg = SartConfig {
                n_iterations: a.iterations,
                relaxation: a.relaxation,
                nonnegativity: !a.allow_negative,
            };
            reconstruct(&a.input, log, |p, g, s| sart_reconstruct(p, g, s, &cfg))?;
        }
        Command::Train(a) => run_train(a, cli.seed, cli.verbose)?,
        Command::ReconDif(a) => {
            let model = DifModel::<f32>::load(&a.model)?;
            reconstruct(&a.input, log, |p, g, s| model.reconstruct(p, g, s, a.chunk))?;
        }
        Command::Eval(a) => {
            let pred = io::read_volume(&a.pred)?;
            let gt = io::read_volume(&a.gt)?;
            let m = CaseMetrics::evaluate(a.pred.display().to_string(), &pred, &gt, 0.0)?;
            println!("psnr_db={:.4} ssim={:.6} identical={}", m.psnr_db, m.ssim, m.identical);
        }
        Command::Bench(a) => {
            let report = bench_config::run(&a.config, log)?;
            io::write_atomic(&a.output, report.to_csv().as_bytes())?;
            print!("{}", report.summary());
        }
        Command::Slice(a) => {
            let vol = io::read_volume(&a.vol)?;
            let pgm = io::encode_slice_pgm(&vol, a.axis as usize, a.index, a.lo, a.hi)?;
            io::write_atomic(&a.output, &pgm)?;
        }
        Command::Dataset(a) => {
            let geom = match &a.geometry {
                Some(p) => load_geometry(p)?,
                None => a.preset.geometry(a.views)?,
            };
            let start = Instant::now();
            let m = build_dataset(&a.out, a.counts, a.kind, &geom, cli.seed)?;
            log(&format!(
                "wrote {} cases ({} train, {} val, {} test) in {:.1} s",
                m.cases.len(),
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test),
                start.elapsed().as_secs_f64()
            ));
        }
    }
    Ok(())
}

fn load_geometry(path: &Path) -> Result<ScannerGeometry> {
    Ok(io::read_geometry(path)?.to_geometry()?)
}

fn reconstruct(
    input: &ReconInput,
    log: impl Fn(&str),
    method: impl FnOnce(&ProjectionStack, &ScannerGeometry, [usize; 3]) -> difct_core::Result<Volume3D>,
) -> Result<()> {
    let geom = load_geometry(&input.geometry)?;
    let proj = io::read_projections(&input.proj)?.bind(&geom)?;
    let shape = input.res.map_or(geom.volume_shape, |r| [r; 3]);
    let start = Instant::now();
    let vol = method(&proj, &geom, shape)?;
    log(&format!("reconstructed {shape:?} in {:.2} s", start.elapsed().as_secs_f64()));
    io::write_volume(&input.output, &vol)?;
    Ok(())
}

fn run_train(a: TrainArgs, seed: u64, verbose: bool) -> Result<()> {
    let manifest = DatasetManifest::read(&a.dataset)?;
    let dir = a.dataset.parent().unwrap_or(Path::new(""));
    let geom = manifest.load_geometry(dir)?;
    let cases = manifest.load_split(dir, Split::Train, &geom)?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training cases".into()).into());
    }
    let mut config = match a.preset {
        Preset::Desk => DifConfig::desk(geom.n_views(), a.fusion),
        Preset::Full => DifConfig::full(geom.n_views(), a.fusion),
    };
    config.channels = a.channels.unwrap_or(config.channels);
    config.base_width = a.base_width.unwrap_or(config.base_width);
    config.depth = a.depth.unwrap_or(config.depth);
    let mut cfg = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::paper(),
    };
    if let Some(e) = a.epochs {
        cfg = cfg.with_epochs(e);
    }
    if !(a.lr_floor > 0.0 && a.lr_floor <= 1.0) {
        return Err(Error::InvalidArgument(format!("--lr-floor must lie in (0, 1], got {}", a.lr_floor)).into());
    }
    cfg.lr_decay = a.lr_floor.powf(1.0 / cfg.epochs as f64);
    cfg.points_per_volume = a.points.unwrap_or(cfg.points_per_volume);
    cfg.batch_volumes = a.batch.unwrap_or(cfg.batch_volumes);
    cfg.steps_per_batch = a.steps_per_batch.unwrap_or(cfg.steps_per_batch);
    cfg.lr0 = a.lr.unwrap_or(cfg.lr0);
    cfg.momentum = a.momentum.unwrap_or(cfg.momentum);
    cfg.threshold = manifest.threshold;
    cfg.seed = seed;
    cfg.checkpoint = Some(a.output.clone());
    cfg.save_every = a.save_every;
    let mut model = DifModel::<f32>::new(config, geom.angles.clone(), manifest.normalization_divisor, seed)?;
    if verbose {
        eprintln!(
            "training {} parameters on {} volumes for {} epochs",
            model.num_parameters(),
            cases.len(),
            cfg.epochs
        );
    }
    let samples: Vec<TrainSample<'_>> = cases
        .iter()
        .map(|c| TrainSample {
            volume: &c.volume,
            projections: &c.projections,
        })
        .collect();
    let start = Instant::now();
    let report = train(&mut model, &geom, &samples, &cfg, |epoch, loss, lr| {
        if verbose {
            eprintln!(
                "epoch {:>4}  loss {loss:.6}  lr {lr:.3e}  {:.0} s",
                epoch + 1,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(last) = report.epoch_losses.last() {
        println!("final_loss={last:.6} steps={}", report.steps);
    }
    Ok(())
}
