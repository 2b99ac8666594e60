//! `mk`: data generation, equivariance checks, training and kernel export.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 a check failed.

mod overlay;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mk_core::geometry::{act_on_field, enumerate_hyperoctahedral, GridShape};
use mk_core::io::{self, Dataset, Tensor};
use mk_core::kernels::{
    assemble_moment_kernel, enumerate_signatures, max_radius, ChannelSpec, MomentKernel, RadialProfile, Signature,
};
use mk_core::network::{build_backbone, ArchConfig, FieldStack, Model};
use mk_core::tasks::{self, check_cells_consistency, registration_consistency, CellImage};
use mk_core::train::{self, Precision, RunConfig, Task};
use mk_core::verify::{approx_equivariance_curve, audit_model, check_membership, fixed_subspace_basis};
use mk_core::{Error, Real};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) | CliError::Core(Error::SizeGuard { .. }) => 2,
            _ => 1,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mk", version, about = "Moment-kernel equivariant networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check kernel membership in the fixed subspace and audit a random model.
    Verify(VerifyArgs),
    /// Write a synthetic dataset.
    GenData(GenArgs),
    /// Train a model, checkpointing after every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write one assembled moment kernel as a tensor file.
    ExportKernel(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    Hyperoctahedral,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classify,
    Register,
    Detect,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classify => Task::Classify,
            TaskArg::Register => Task::Register,
            TaskArg::Detect => Task::Detect,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    /// every radial sample equal to one
    Ones,
    /// standard normal samples drawn from `--seed`
    Random,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 3)]
    support: usize,
    #[arg(long, value_enum, default_value_t = GroupArg::Hyperoctahedral)]
    group: GroupArg,
    /// Also record deviations under N interpolated rotations in (0, π/2] (2D).
    #[arg(long)]
    angles: Option<usize>,
    /// Perturb the first layer off the equivariant subspace.
    #[arg(long)]
    inject_symmetry_break: bool,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Input grid size [default: 16 in 2D, 8 in 3D]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the audit in 32-bit (tolerance 1e-5) instead of 64-bit (1e-10).
    #[arg(long)]
    f32: bool,
    #[arg(long, default_value = "verify_report")]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Grid size [default: the task preset]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    /// Verify every label against its image under all group views.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// `key = value` config [default: the task preset]
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use the plain convolutional baseline.
    #[arg(long)]
    baseline: bool,
    /// Output directory [default: the checkpoint's directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory written by gen-data [default: generated from the config]
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate every group view for the worst-case metrics.
    #[arg(long)]
    views: bool,
    /// Number of detection overlays to render.
    #[arg(long, default_value_t = 4)]
    overlays: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    signature_index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    support: usize,
    /// Radial samples [default: the fewest covering the support]
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Ones)]
    profile: ProfileArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("MK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MK_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Verify(a) => verify(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportKernel(a) => export_kernel(a),
    }
}

/// Fewest radial samples that cover the support's corner radius.
fn samples_for(support: usize, d: usize) -> usize {
    (max_radius(support, d) - 1e-9).ceil().max(0.0) as usize + 1
}

fn signature_label(s: &Signature) -> String {
    if s.pairs().is_empty() {
        return "-".into();
    }
    s.pairs()
        .iter()
        .map(|(a, b)| format!("{a}{b}"))
        .collect::<Vec<_>>()
        .join("|")
}

fn verify(a: VerifyArgs) -> CliResult {
    let GroupArg::Hyperoctahedral = a.group;
    if !(2..=3).contains(&a.dim) {
        return Err(CliError::Usage(format!("--dim must be 2 or 3, got {}", a.dim)));
    }
    let group = enumerate_hyperoctahedral(a.dim);
    let basis = fixed_subspace_basis(a.rank, a.dim, a.support, &group)?;
    let samples = samples_for(a.support, a.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let mut residuals = String::from("signature_index,signature,residual\n");
    let mut worst_residual = 0.0f64;
    for (i, sig) in enumerate_signatures(a.rank).into_iter().enumerate() {
        let profile = RadialProfile::new((0..samples).map(|_| rng.sample(StandardNormal)).collect());
        let label = signature_label(&sig);
        let kernel = assemble_moment_kernel(&MomentKernel {
            dim: a.dim,
            signature: sig,
            profile,
            support: a.support,
        })?;
        let r = check_membership(kernel.data(), &basis)?;
        worst_residual = worst_residual.max(r);
        let _ = writeln!(residuals, "{i},{label},{r:e}");
    }

    let size = a.size.unwrap_or(if a.dim == 2 { 16 } else { 8 });
    let cfg = ArchConfig {
        dim: a.dim,
        layers: a.layers,
        support: a.support,
        radial_samples: samples.max(3),
        seed: a.seed,
        ..ArchConfig::default()
    };
    let mut model = build_backbone::<f64>(&cfg)?;
    if a.inject_symmetry_break {
        model.inject_symmetry_break(0.5);
    }
    let shape = GridShape::cube(a.dim, size);
    let data = (0..shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let input = FieldStack::new(shape, ChannelSpec::scalars(1), 1, data)?;
    let report = if a.f32 {
        audit_model(&model.cast::<f32>(), &input.cast::<f32>(), 1e-5)?
    } else {
        audit_model(&model, &input, 1e-10)?
    };

    let mut elements = String::from("group_element_index,permutation,signs,max_deviation\n");
    for (gi, g) in group.iter().enumerate() {
        let (perm, signs) = g
            .as_signed_permutation()
            .expect("group elements are signed permutations");
        let worst = report
            .rows
            .iter()
            .filter(|r| r.group_element_index == gi)
            .map(|r| r.deviation)
            .fold(0.0, f64::max);
        let join = |v: Vec<String>| v.join(" ");
        let _ = writeln!(
            elements,
            "{gi},{},{},{worst:e}",
            join(perm.iter().map(|p| p.to_string()).collect()),
            join(signs.iter().map(|s| s.to_string()).collect())
        );
    }

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("residuals.csv"), residuals)?;
    fs::write(a.out.join("equivariance.csv"), report.to_csv())?;
    fs::write(a.out.join("elements.csv"), elements)?;
    if let Some(n) = a.angles {
        if a.dim == 2 {
            let angles: Vec<f64> = (1..=n)
                .map(|k| k as f64 * std::f64::consts::FRAC_PI_2 / n as f64)
                .collect();
            let curve = approx_equivariance_curve(&model, &input, &angles)?;
            let mut s = String::from("angle,deviation\n");
            for (t, v) in angles.iter().zip(curve) {
                let _ = writeln!(s, "{t},{v:e}");
            }
            fs::write(a.out.join("angles.csv"), s)?;
        } else {
            log::warn!("--angles only applies in 2D; skipped");
        }
    }

    println!("fixed subspace dimension: {}", basis.dim());
    println!("max kernel residual: {worst_residual:e}");
    print!("{}", report.summary());
    if worst_residual > 1e-10 {
        return Err(CliError::Check(format!(
            "kernel residual {worst_residual:e} above 1e-10"
        )));
    }
    if !report.passed() {
        return Err(CliError::Check(format!(
            "model deviation {:e} above {:e}",
            report.max_deviation(),
            report.tolerance
        )));
    }
    Ok(())
}

fn gen_data(a: GenArgs) -> CliResult {
    let mut cfg = RunConfig::preset(a.task.into());
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(d) = a.dim {
        cfg.arch.dim = d;
    }
    if let Some(d) = a.density {
        cfg.density = d;
    }
    cfg.validate()?;
    let data = cfg.generate(a.seed, a.n)?;
    if a.check {
        check_dataset(&data, &cfg)?;
    }
    io::write_dataset(&a.out, &data, &cfg.grid())?;
    println!("wrote {} {} samples to {}", data.len(), data.task(), a.out.display());
    Ok(())
}

fn check_dataset(data: &Dataset, cfg: &RunConfig) -> CliResult {
    let group = cfg.group();
    match data {
        Dataset::Classify(_) => {}
        Dataset::Register(d) => {
            for (i, s) in d.iter().enumerate() {
                let err = registration_consistency(s)?;
                if err > 1e-9 {
                    return Err(CliError::Check(format!(
                        "sample {i}: volume differs from its label by {err:e}"
                    )));
                }
            }
        }
        Dataset::Detect(d) => {
            for (i, s) in d.iter().enumerate() {
                let dims = s.image.shape().dims().to_vec();
                for (gi, g) in group.iter().enumerate() {
                    let view = CellImage {
                        image: act_on_field(g, &s.image)?,
                        cells: s.cells.iter().map(|c| c.transform(g, &dims)).collect(),
                    };
                    check_cells_consistency(&view)
                        .map_err(|e| CliError::Check(format!("sample {i}, view {gi}: {e}")))?;
                }
            }
        }
    }
    Ok(())
}

fn load_run_config(a: &RunArgs) -> CliResult<RunConfig> {
    let task = Task::from(a.task);
    let mut cfg = match &a.config {
        Some(p) => train::read_config(p, Some(task))?,
        None => RunConfig::preset(task),
    };
    if cfg.task != task {
        return Err(CliError::Usage(format!("config is for task {}, not {task}", cfg.task)));
    }
    cfg.baseline |= a.baseline;
    Ok(cfg)
}

fn out_dir(a: &RunArgs) -> CliResult<PathBuf> {
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let dir = if dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        dir
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> CliResult<Dataset> {
    let (data, grid) = io::read_dataset(dir, cfg.task.name())?;
    if grid != cfg.grid() {
        return Err(CliError::Core(Error::Config(format!(
            "dataset {} has grid {grid:?}, config expects {:?}",
            dir.display(),
            cfg.grid()
        ))));
    }
    Ok(data)
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = load_run_config(&a.run)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let out = out_dir(&a.run)?;
    let train = match &a.train_data {
        Some(d) => load_dataset(d, &cfg)?,
        None => cfg.train_data()?,
    };
    let test = match &a.test_data {
        Some(d) => load_dataset(d, &cfg)?,
        None => cfg.test_data()?,
    };
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, &train, &test, &a.run.checkpoint, &out),
        Precision::F64 => train_with::<f64>(&cfg, &train, &test, &a.run.checkpoint, &out),
    }
}

fn train_with<T: Real>(cfg: &RunConfig, train: &Dataset, test: &Dataset, checkpoint: &Path, out: &Path) -> CliResult {
    let (trainer, log) = train::run_training::<T>(cfg, train, test, |tr, report| {
        io::save_checkpoint(checkpoint, &tr.checkpoint()?)?;
        println!("epoch {}: {}", tr.epoch, report.block().trim_end().replace('\n', ", "));
        Ok(())
    })?;
    if cfg.epochs == 0 {
        io::save_checkpoint(checkpoint, &trainer.checkpoint()?)?;
    }
    fs::write(out.join("metrics.csv"), log.to_csv())?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let cfg = load_run_config(&a.run)?;
    cfg.validate()?;
    let out = out_dir(&a.run)?;
    let ck = io::load_checkpoint(&a.run.checkpoint)?;
    train::check_checkpoint_matches(&ck, &cfg)?;
    let model: Model<f64> = train::model_from_checkpoint(&ck)?;
    let data = match &a.data {
        Some(d) => load_dataset(d, &cfg)?,
        None => cfg.test_data()?,
    };
    let report = train::evaluate(&model, &cfg, &data, a.views || cfg.view_metrics)?;
    let cols = report.columns();
    let header: Vec<&str> = cols.iter().map(|(n, _)| *n).collect();
    let values: Vec<String> = cols.iter().map(|(_, v)| v.to_string()).collect();
    fs::write(
        out.join("eval.csv"),
        format!("{}\n{}\n", header.join(","), values.join(",")),
    )?;
    print!("{}", report.block());
    if let Dataset::Detect(samples) = &data {
        let shown = &samples[..a.overlays.min(samples.len())];
        let images: Vec<_> = shown.iter().map(|s| s.image.clone()).collect();
        let dets = tasks::metrics::detect_all(&model, &images, cfg.threshold, &cfg.yolo(), 8)?;
        for (i, (s, d)) in shown.iter().zip(&dets).enumerate() {
            fs::write(
                out.join(format!("overlay_{i:03}.ppm")),
                overlay::render(&s.image, d, &s.cells),
            )?;
        }
    }
    Ok(())
}

fn export_kernel(a: ExportArgs) -> CliResult {
    let sigs = enumerate_signatures(a.rank);
    let count = sigs.len();
    let signature = sigs
        .into_iter()
        .nth(a.signature_index)
        .ok_or(Error::BadSignatureIndex {
            index: a.signature_index,
            rank: a.rank,
            count,
        })?;
    let samples = a.samples.unwrap_or_else(|| samples_for(a.support, a.dim));
    let profile = match a.profile {
        ProfileArg::Ones => RadialProfile::constant(samples, 1.0),
        ProfileArg::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            RadialProfile::new((0..samples).map(|_| rng.sample(StandardNormal)).collect())
        }
    };
    let kernel = assemble_moment_kernel(&MomentKernel {
        dim: a.dim,
        signature,
        profile,
        support: a.support,
    })?;
    io::save_tensor(&a.out, &Tensor::from_field(&kernel)?)?;
    println!(
        "wrote rank-{} kernel on {}^{} to {}",
        a.rank,
        a.support,
        a.dim,
        a.out.display()
    );
    Ok(())
}
