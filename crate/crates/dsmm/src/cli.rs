use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsmm_core::eval::{
    self, blockify, check_reconstructors, evaluate_image, generate_grm, match_ratios, summarize, ComparisonConfig,
    ComparisonReport, EvalImage, MatrixEntry, PadMode, Reconstructor,
};
use dsmm_core::gradcheck::{gradcheck_with, GradcheckConfig};
use dsmm_core::recon::reconstruct;
use dsmm_core::sampling::{measurement_dim, sample_image};
use dsmm_core::solver::{reconstruct_image, SolverConfig};
use dsmm_core::train::{train_with, PatchDataset, TrainConfig, TrainEvent};
use dsmm_core::{MeasurementMatrix, Provenance};
use rayon::prelude::*;

use crate::config::load_config;
use crate::error::{CliError, CliResult};
use crate::formats::{
    decode_measurements, encode_checkpoint, encode_matrix, encode_measurements, encode_sparse_text,
    read_matrix_source, Checkpoint, Measurements,
};
use crate::fsutil::write_atomic;
use crate::imageio::{load_dir, load_gray, save_gray};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "dsmm", version, about = "Learned sparse measurement matrices for block compressed sensing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a sampling matrix jointly with its reconstruction network.
    Train(TrainArgs),
    /// Measure an image block by block with a matrix.
    Sample(SampleArgs),
    /// Recover an image from block measurements.
    Reconstruct(ReconstructArgs),
    /// Compare matrices on a set of images (PSNR and SSIM).
    Eval(EvalArgs),
    /// Write a matrix (or a checkpoint's constrained matrix) as DSMM1 or sparse text.
    ExportMatrix(ExportArgs),
    /// Convert a sparse-text (or DSMM1) matrix to DSMM1.
    ImportMatrix(ImportArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a row-normalized Gaussian random matrix.
    GenGrm(GenGrmArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PadArg {
    Replicate,
    Crop,
}

impl From<PadArg> for PadMode {
    fn from(p: PadArg) -> Self {
        match p {
            PadArg::Replicate => PadMode::Replicate,
            PadArg::Crop => PadMode::Crop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Ista,
    Learned,
}

impl From<SolverArg> for Reconstructor {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Ista => Reconstructor::Ista,
            SolverArg::Learned => Reconstructor::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatrixFormat {
    /// DSMM1 little-endian binary.
    Binary,
    /// `n_b n_B B alpha nnz` header and `row col value` triples.
    SparseText,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of grayscale PNG/PGM training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, the matrix and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the loss every this many iterations (0 = silent).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// DSMM1 matrix, DSMN1 checkpoint or sparse text.
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Measurements text file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Standard deviation of additive Gaussian measurement noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PadArg::Replicate)]
    pub pad: PadArg,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// l1 weight of the DCT-sparsity term.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Plain ISTA instead of FISTA.
    #[arg(long)]
    pub plain: bool,
}

impl SolverArgs {
    fn config(&self) -> CliResult<SolverConfig> {
        let c = SolverConfig {
            lambda: self.lambda,
            max_iters: self.max_iters,
            rel_tol: self.tol,
            accelerated: !self.plain,
            ..SolverConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub measurements: PathBuf,
    /// Output image (PNG, or PGM by extension).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverArg::Ista)]
    pub solver: SolverArg,
    #[command(flatten)]
    pub ista: SolverArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of evaluation images.
    #[arg(long)]
    pub images: PathBuf,
    /// Matrices or checkpoints to compare; labelled by file stem.
    #[arg(long, num_args = 1.., required = true)]
    pub matrix: Vec<PathBuf>,
    /// Sampling ratios; each matrix is paired with the ratio its row count matches.
    #[arg(long, num_args = 1.., required = true)]
    pub ratio: Vec<f64>,
    /// Reconstructors to run (repeat or comma-separate for several).
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SolverArg::Ista])]
    pub solver: Vec<SolverArg>,
    /// Per-image report CSV; the summary goes to `<stem>_summary.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = PadArg::Replicate)]
    pub pad: PadArg,
    /// Skip writing reconstructed images.
    #[arg(long)]
    pub no_images: bool,
    #[command(flatten)]
    pub ista: SolverArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MatrixFormat::SparseText)]
    pub format: MatrixFormat,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// DSMM1 file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub block_size: usize,
    #[arg(long, default_value_t = 16)]
    pub measurements: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Channels of the hidden convolution layers.
    #[arg(long, default_value_t = dsmm_core::recon::STACK_WIDTH)]
    pub width: usize,
    /// Negative control: perturb one analytic gradient entry before comparing.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct GenGrmArgs {
    #[arg(long)]
    pub block_size: usize,
    /// Sampling ratio; rows = floor(ratio * B^2).
    #[arg(long, required_unless_present = "rows")]
    pub ratio: Option<f64>,
    /// Explicit row count instead of a ratio.
    #[arg(long, conflicts_with = "ratio")]
    pub rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MatrixFormat::Binary)]
    pub format: MatrixFormat,
}

/// Cap the worker pool from `DSMM_THREADS` (unset or 0 = one per core).
pub fn init_threads() {
    let n = std::env::var("DSMM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::ExportMatrix(a) => cmd_export(&a),
        Command::ImportMatrix(a) => cmd_import(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::GenGrm(a) => cmd_gen_grm(&a),
    }
}

pub fn write_matrix(path: &Path, m: &MeasurementMatrix, format: MatrixFormat) -> CliResult<()> {
    let bytes = match format {
        MatrixFormat::Binary => encode_matrix(m).map_err(|e| e.at(path))?,
        MatrixFormat::SparseText => encode_sparse_text(m).into_bytes(),
    };
    write_atomic(path, &bytes)
}

pub const LOSS_FILE: &str = "loss.csv";
pub const MODEL_FILE: &str = "model.dsmn";
pub const MATRIX_FILE: &str = "dsmm.bin";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.dsmn")
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let images = load_dir(&a.data)?;
    let dataset = PatchDataset::new(images.into_iter().map(|(_, t)| t).collect())?;
    train_dataset(&dataset, &cfg, &a.out, a.log_every)
}

/// Train on an in-memory dataset and write all artifacts into `out`.
pub fn train_dataset(dataset: &PatchDataset, cfg: &TrainConfig, out: &Path, log_every: usize) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::output(out, e))?;
    let mut history = Vec::new();
    let mut io_error = None;
    let total = cfg.total_iterations();
    let result = train_with(dataset, cfg, |event| {
        match event {
            TrainEvent::Iteration(rec) => {
                if log_every > 0 && (rec.iteration % log_every == 0 || rec.iteration == total) {
                    eprintln!(
                        "iter {:>6}/{total} epoch {:>3} lr {:.3e} loss {:.6e}",
                        rec.iteration, rec.epoch, rec.lr, rec.loss
                    );
                }
                history.push(*rec);
            }
            TrainEvent::Checkpoint {
                epoch,
                sampling,
                recon,
                is_final,
            } => {
                let ck = Checkpoint {
                    sampling: sampling.clone(),
                    recon: recon.clone(),
                    epoch,
                };
                let written = save_training_state(out, &ck, &history, is_final);
                if let Err(e) = written {
                    io_error = Some(e);
                    return Err(dsmm_core::Error::Hook("checkpoint write failed".into()));
                }
            }
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    match result {
        Ok(_) => Ok(()),
        Err(e) => {
            // keep the partial loss log for diagnosis
            let _ = report::write(&out.join(LOSS_FILE), &report::loss_csv(&history));
            Err(e.into())
        }
    }
}

fn save_training_state(
    out: &Path,
    ck: &Checkpoint,
    history: &[dsmm_core::train::LossRecord],
    is_final: bool,
) -> CliResult<()> {
    let bytes = encode_checkpoint(ck).map_err(|e| e.at(out))?;
    if is_final {
        write_atomic(&out.join(MODEL_FILE), &bytes)?;
        write_matrix(&out.join(MATRIX_FILE), &ck.matrix(), MatrixFormat::Binary)?;
    } else {
        write_atomic(&out.join(checkpoint_name(ck.epoch)), &bytes)?;
    }
    report::write(&out.join(LOSS_FILE), &report::loss_csv(history))
}

pub fn cmd_sample(a: &SampleArgs) -> CliResult<()> {
    if !(a.noise_sigma >= 0.0) {
        return Err(CliError::Config("noise_sigma must be non-negative".into()));
    }
    let phi = read_matrix_source(&a.matrix)?.matrix();
    let image = load_gray(&a.image)?;
    let (padded, (height, width)) = blockify(&image, phi.block_size(), a.pad.into())?;
    let values = sample_image(&padded, &phi, a.noise_sigma, a.seed)?;
    let text = encode_measurements(&Measurements { values, height, width })?;
    write_atomic(&a.out, text.as_bytes())
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> CliResult<()> {
    let source = read_matrix_source(&a.matrix)?;
    let text = std::fs::read_to_string(&a.measurements).map_err(|e| CliError::input(&a.measurements, e))?;
    let m = decode_measurements(&text).map_err(|e| e.at(&a.measurements))?;
    let phi = source.matrix();
    let out = match a.solver {
        SolverArg::Ista => reconstruct_image(&m.values, &phi, &a.ista.config()?)?,
        SolverArg::Learned => {
            let params = source.recon().ok_or_else(|| {
                CliError::Core(dsmm_core::Error::MissingReconstructor {
                    matrix: a.matrix.display().to_string(),
                })
            })?;
            reconstruct(&m.values, params)?
        }
    };
    let out = eval::unblockify(&out, (m.height, m.width))?;
    save_gray(&a.out, &out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "matrix".into())
}

/// Paths derived from the report path: summary CSV and image directory.
pub fn eval_outputs(out: &Path) -> (PathBuf, PathBuf) {
    let parent = out.parent().unwrap_or(Path::new(""));
    let s = stem(out);
    (parent.join(format!("{s}_summary.csv")), parent.join(format!("{s}_images")))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<ComparisonReport> {
    let mut entries = Vec::with_capacity(a.matrix.len());
    for p in &a.matrix {
        let src = read_matrix_source(p)?;
        let mut label = stem(p);
        if entries.iter().any(|e: &MatrixEntry| e.label == label) {
            label = format!("{label}-{}", entries.len());
        }
        entries.push(MatrixEntry {
            label,
            matrix: src.matrix(),
            learned: src.recon().cloned(),
        });
    }
    let paired = match_ratios(&entries, &a.ratio)?;
    let reconstructors: Vec<Reconstructor> = a.solver.iter().map(|&s| s.into()).collect();
    check_reconstructors(&entries, &reconstructors)?;
    let images: Vec<EvalImage> = load_dir(&a.images)?
        .into_iter()
        .map(|(name, image)| EvalImage { name, image })
        .collect();
    let cfg = ComparisonConfig {
        solver: a.ista.config()?,
        pad_mode: a.pad.into(),
        keep_images: !a.no_images,
    };
    let per_image = images
        .par_iter()
        .map(|img| evaluate_image(img, &entries, &paired, &reconstructors, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<_> = per_image.into_iter().flatten().collect();
    let (summary, gains) = summarize(&rows, &entries, &paired, &reconstructors);
    let report = ComparisonReport { rows, summary, gains };

    let (summary_path, image_dir) = eval_outputs(&a.out);
    report::write(&a.out, &report::report_csv(&report.rows))?;
    report::write(&summary_path, &report::summary_csv(&report))?;
    if !a.no_images {
        for c in &report.rows {
            if let Some(img) = &c.reconstruction {
                let name = format!("{}__{}__{}.png", c.image, c.matrix, c.reconstructor.label());
                save_gray(&image_dir.join(name), img)?;
            }
        }
    }
    Ok(report)
}

pub fn cmd_export(a: &ExportArgs) -> CliResult<()> {
    let m = read_matrix_source(&a.input)?.matrix();
    write_matrix(&a.out, &m, a.format)
}

pub fn cmd_import(a: &ImportArgs) -> CliResult<()> {
    let m = read_matrix_source(&a.input)?.matrix();
    write_matrix(&a.out, &m, MatrixFormat::Binary)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cfg = GradcheckConfig {
        block_size: a.block_size,
        measurements: a.measurements,
        alpha: a.alpha,
        width: a.width,
        ..GradcheckConfig::default()
    };
    let corrupt = a.corrupt_backward;
    let report = gradcheck_with(a.seed, &cfg, |g| {
        if corrupt {
            let w = g.recon.stack[1].weight.data_mut();
            w[0] += 1.0 + w[0].abs();
        }
    })?;
    println!("group,params,max_rel_error,status");
    for g in &report.groups {
        let ok = if g.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!("{},{},{:.3e},{ok}", g.name, g.params, g.max_rel_error);
    }
    if report.passed() {
        println!("gradcheck passed (seed {}, tolerance {:e})", report.seed, report.tolerance);
        Ok(())
    } else {
        let w = report.worst().expect("nine groups");
        Err(CliError::Gradcheck(format!(
            "worst offender {} entry {} with relative error {:.3e} (tolerance {:e})",
            w.name, w.worst_index, w.max_rel_error, report.tolerance
        )))
    }
}

pub fn cmd_gen_grm(a: &GenGrmArgs) -> CliResult<()> {
    let rows = match (a.rows, a.ratio) {
        (Some(r), _) => r,
        (None, Some(ratio)) => measurement_dim(ratio, a.block_size)?,
        (None, None) => return Err(CliError::Config("give --ratio or --rows".into())),
    };
    if rows > a.block_size * a.block_size {
        eprintln!(
            "warning: {rows} rows exceed the {} columns of a {}x{} block",
            a.block_size * a.block_size,
            a.block_size,
            a.block_size
        );
    }
    let m = generate_grm(a.block_size, rows, a.seed)?;
    debug_assert_eq!(m.provenance(), Provenance::Gaussian);
    write_matrix(&a.out, &m, a.format)
}
