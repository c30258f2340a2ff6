//! Command-line entry point: synthetic data generation, masked pretraining,
//! supervised training, evaluation, single-pair and tiled inference, and the
//! verification suites.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error (bad
//! flags, bad config file, or refused settings). Diagnostics go to stderr;
//! machine-readable results (CSV rows, check lines) go to stdout unless a
//! log path is configured.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use costflow::checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile};
use costflow::config::{deterministic_mode, FileConfig};
use costflow::flo::write_flo;
use costflow::imageio::read_ppm;
use costflow::metrics::F1Mode;
use costflow::model::FlowModel;
use costflow::params::{Forward, Mode, ParamStore};
use costflow::synth::{list_samples, read_sample, synth_pair, write_sample, MotionKind, SyntheticSample};
use costflow::tensor::{DType, Tensor};
use costflow::tiling::{tile_infer, TileError};
use costflow::train::{pretrain_mcva, train_supervised, SuperviseOptions};
use costflow::verify::{run_gradcheck, GradcheckModule, MODEL_GRAD_SAMPLES, MODEL_GRAD_SEED};

#[derive(Parser)]
#[command(
    name = "costflow",
    version,
    about = "Transformer-based optical flow over 4D cost volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of image pairs with ground-truth flow.
    Synth(SynthArgs),
    /// Masked cost-volume pretraining (requires a frozen image encoder).
    Pretrain(PretrainArgs),
    /// Supervised training, optionally initialized from a pretrained checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a sample directory; prints an AEPE/F1-all CSV row.
    Eval(EvalArgs),
    /// Single-pair inference writing a .flo flow field.
    Infer(InferArgs),
    /// Gaussian-tile inference for inputs larger than the training size.
    TileInfer(TileInferArgs),
    /// Gradient and attention-oracle verification suites; exit 0 iff all pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Number of samples to write.
    #[arg(long)]
    n: usize,
    /// Image size as HxW; both must be multiples of 8.
    #[arg(long, default_value = "96x96")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian pixel noise added to the second frame.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Motion family: mixed, constant, affine, or smooth.
    #[arg(long, default_value = "mixed")]
    motion: String,
}

#[derive(Args)]
struct PretrainArgs {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the [pretrain] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides of the form section.key=value (repeatable).
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Optional pretrained checkpoint to initialize from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the [train] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides of the form section.key=value (repeatable).
    #[arg(long = "set")]
    set: Vec<String>,
    /// Stop as soon as an evaluation AEPE drops below this value.
    #[arg(long)]
    stop_at_aepe: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of sample triplets (as written by `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Outlier combination rule: "or" (default) or "and".
    #[arg(long, default_value = "or")]
    f1_mode: String,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    img1: PathBuf,
    #[arg(long)]
    img2: PathBuf,
    /// Output .flo path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TileInferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    img1: PathBuf,
    #[arg(long)]
    img2: PathBuf,
    /// Output .flo path.
    #[arg(long)]
    out: PathBuf,
    /// Size the checkpoint was trained at, as HxW.
    #[arg(long)]
    train_size: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Suite to run: primitives, attention, model, or all.
    #[arg(long, default_value = "all")]
    module: String,
    /// Parameter tensors sampled by the model suite.
    #[arg(long, default_value_t = MODEL_GRAD_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = MODEL_GRAD_SEED)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// Failure plumbing: configuration errors exit 2, runtime failures exit 1.
// ---------------------------------------------------------------------------

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn cfg_err(e: impl Display) -> Failure {
    Failure::Config(e.to_string())
}

fn run_err(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::TileInfer(a) => cmd_tile_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers.
// ---------------------------------------------------------------------------

/// Every run logs its fully resolved configuration and the determinism mode.
fn log_resolved(context: &str, resolved: &str) {
    eprintln!("[costflow] deterministic={}", deterministic_mode());
    eprintln!("[costflow] resolved config ({context}):");
    for line in resolved.lines() {
        eprintln!("[costflow]   {line}");
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Failure::Config(format!("size '{s}' is not of the form HxW")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Failure::Config(format!("size '{s}' has a non-numeric component")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn parse_f1_mode(s: &str) -> Result<F1Mode, Failure> {
    s.parse::<F1Mode>().map_err(cfg_err)
}

fn load_corpus(dir: &Path, dtype: DType) -> Result<Vec<SyntheticSample>, Failure> {
    let idxs = list_samples(dir).map_err(run_err)?;
    if idxs.is_empty() {
        return Err(Failure::Runtime(format!(
            "no sample triplets found in {}",
            dir.display()
        )));
    }
    idxs.iter()
        .map(|&i| read_sample(dir, i, dtype).map_err(run_err))
        .collect()
}

/// Rebuilds the model a checkpoint was saved from (via its embedded config)
/// and loads every parameter strictly. The reconstruction head is attached
/// exactly when the checkpoint carries its parameters.
fn model_from_checkpoint(file: &CheckpointFile) -> Result<(ParamStore, FlowModel, FileConfig), Failure> {
    let cfg = FileConfig::parse(&file.config_echo, &[])
        .map_err(|e| Failure::Runtime(format!("checkpoint carries an unusable config: {e}")))?;
    let mut store = ParamStore::new(cfg.model.precision.dtype());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let with_head = file.entries.iter().any(|e| e.name.starts_with("pretext."));
    let model = FlowModel::new(&mut store, &mut rng, &cfg.model, with_head).map_err(run_err)?;
    file.apply(&mut store, true).map_err(run_err)?;
    Ok((store, model, cfg))
}

fn read_image(path: &Path, dtype: DType) -> Result<Tensor, Failure> {
    Ok(read_ppm(path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?
        .to_dtype(dtype))
}

/// Writes the metrics CSV to the configured log path, or to stdout.
fn emit_csv(csv: &str, log_csv: &Option<String>) -> CliResult {
    match log_csv {
        Some(path) => {
            std::fs::write(path, csv).map_err(|e| Failure::Runtime(format!("{path}: {e}")))?;
            eprintln!("[costflow] metrics csv written to {path}");
            Ok(())
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> CliResult {
    let (h, w) = parse_size(&a.size)?;
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Failure::Config(format!(
            "size {h}x{w} must be positive multiples of 8"
        )));
    }
    if a.n == 0 {
        return Err(Failure::Config("--n must be at least 1".into()));
    }
    let kinds: &[&str] = &["mixed", "constant", "affine", "smooth"];
    if !kinds.contains(&a.motion.as_str()) {
        return Err(Failure::Config(format!(
            "unknown motion family '{}' (expected one of {kinds:?})",
            a.motion
        )));
    }
    log_resolved(
        "synth",
        &format!(
            "out = {:?}\nn = {}\nsize = \"{h}x{w}\"\nseed = {}\nnoise = {}\nmotion = \"{}\"",
            a.out, a.n, a.seed, a.noise, a.motion
        ),
    );
    std::fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for idx in 0..a.n {
        let kind = match a.motion.as_str() {
            "constant" => MotionKind::Constant(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            "affine" => MotionKind::Affine,
            "smooth" => MotionKind::Smooth,
            _ => match idx % 3 {
                0 => MotionKind::Constant(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                1 => MotionKind::Affine,
                _ => MotionKind::Smooth,
            },
        };
        let sample = synth_pair(h, w, &mut rng, kind, a.noise, DType::F32);
        write_sample(&a.out, idx, &sample).map_err(run_err)?;
    }
    eprintln!("[costflow] wrote {} sample triplets to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> CliResult {
    let mut cfg = FileConfig::load(&a.config, &a.set).map_err(cfg_err)?;
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    // Refused settings are config errors: surface them before any work.
    cfg.pretrain.validate().map_err(cfg_err)?;
    log_resolved("pretrain", &cfg.resolved());

    let dtype = cfg.model.precision.dtype();
    let mut store = ParamStore::new(dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    let model = FlowModel::new(&mut store, &mut rng, &cfg.model, true).map_err(run_err)?;
    let corpus = load_corpus(Path::new(&cfg.pretrain.data_dir), dtype)?;

    let report = pretrain_mcva(&mut store, &model, &corpus, &cfg.pretrain).map_err(run_err)?;
    emit_csv(&report.csv, &cfg.pretrain.log_csv)?;
    save_checkpoint(&a.out, &store, &cfg.resolved()).map_err(run_err)?;
    eprintln!(
        "[costflow] pretraining finished: {} steps, final loss {:.6}; checkpoint {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = FileConfig::load(&a.config, &a.set).map_err(cfg_err)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    log_resolved("train", &cfg.resolved());

    let dtype = cfg.model.precision.dtype();
    let mut store = ParamStore::new(dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = FlowModel::new(&mut store, &mut rng, &cfg.model, false).map_err(run_err)?;

    if let Some(init) = &a.init {
        let file = load_checkpoint(init).map_err(run_err)?;
        let report = file.apply(&mut store, false).map_err(run_err)?;
        if !report.unmatched_in_store.is_empty() {
            return Err(Failure::Runtime(format!(
                "checkpoint {} does not cover the model; missing parameters: [{}]",
                init.display(),
                report.unmatched_in_store.join(", ")
            )));
        }
        eprintln!(
            "[costflow] initialized {} parameters from {}; skipped file-only entries: [{}]",
            report.loaded.len(),
            init.display(),
            report.unmatched_in_file.join(", ")
        );
    }

    let corpus = load_corpus(Path::new(&cfg.train.data_dir), dtype)?;
    let mut opts = SuperviseOptions::from_section(&cfg.train);
    opts.stop_at_aepe = a.stop_at_aepe;
    let report = train_supervised(&mut store, &model, &corpus, &opts).map_err(run_err)?;
    emit_csv(&report.csv, &cfg.train.log_csv)?;
    save_checkpoint(&a.out, &store, &cfg.resolved()).map_err(run_err)?;
    eprintln!(
        "[costflow] training finished: {} steps{}; checkpoint {}",
        report.steps_run,
        if report.stopped_early { " (early stop)" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let f1_mode = parse_f1_mode(&a.f1_mode)?;
    let file = load_checkpoint(&a.ckpt).map_err(run_err)?;
    let (store, model, cfg) = model_from_checkpoint(&file)?;
    log_resolved("eval (from checkpoint)", &cfg.resolved());
    let corpus = load_corpus(&a.data, cfg.model.precision.dtype())?;
    let (aepe, f1) = costflow::train::evaluate(&store, &model, &corpus, f1_mode).map_err(run_err)?;
    println!("aepe,f1_all");
    println!("{aepe},{f1}");
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CliResult {
    let file = load_checkpoint(&a.ckpt).map_err(run_err)?;
    let (store, model, cfg) = model_from_checkpoint(&file)?;
    log_resolved("infer (from checkpoint)", &cfg.resolved());
    let dtype = cfg.model.precision.dtype();
    let img1 = read_image(&a.img1, dtype)?;
    let img2 = read_image(&a.img2, dtype)?;
    let (mh, mw) = model.image_dims();
    let dims = img1.shape().to_vec();
    if dims != [3, mh, mw] {
        return Err(Failure::Runtime(format!(
            "image is {}x{} but the checkpoint expects {mh}x{mw}; use tile-infer for larger inputs",
            dims[1], dims[2]
        )));
    }
    let fw = Forward::new(&store, Mode::Inference);
    let flow = model
        .forward_flows(&fw, &img1, &img2)
        .map_err(run_err)?
        .pop()
        .expect("decoder emits >= 1 iterate");
    write_flo(&a.out, &flow).map_err(run_err)?;
    eprintln!("[costflow] flow written to {}", a.out.display());
    Ok(())
}

fn cmd_tile_infer(a: TileInferArgs) -> CliResult {
    let train = parse_size(&a.train_size)?;
    let file = load_checkpoint(&a.ckpt).map_err(run_err)?;
    let (store, model, cfg) = model_from_checkpoint(&file)?;
    log_resolved("tile-infer (from checkpoint)", &cfg.resolved());
    if model.image_dims() != train {
        let (mh, mw) = model.image_dims();
        return Err(Failure::Config(format!(
            "--train-size {}x{} does not match the checkpoint's training size {mh}x{mw}",
            train.0, train.1
        )));
    }
    let dtype = cfg.model.precision.dtype();
    let img1 = read_image(&a.img1, dtype)?;
    let img2 = read_image(&a.img2, dtype)?;
    let flow = tile_infer(&store, &model, &img1, &img2, train).map_err(|e| match e {
        TileError::Config(_) => cfg_err(e),
        other => run_err(other),
    })?;
    write_flo(&a.out, &flow).map_err(run_err)?;
    eprintln!("[costflow] blended flow written to {}", a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let module: GradcheckModule = a.module.parse().map_err(cfg_err)?;
    if a.samples == 0 {
        return Err(Failure::Config("--samples must be at least 1".into()));
    }
    log_resolved(
        "gradcheck",
        &format!("module = \"{}\"\nsamples = {}\nseed = {}", a.module, a.samples, a.seed),
    );
    let run = run_gradcheck(module, a.samples, a.seed).map_err(run_err)?;
    for line in &run.lines {
        println!("{line}");
    }
    if run.pass {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient verification failed".into()))
    }
}
