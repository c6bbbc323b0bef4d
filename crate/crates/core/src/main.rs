use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skiplayer::config::ExperimentConfig;
use skiplayer::data::{synth, token_display, tokenize_bytes, Corpus};
use skiplayer::decode::{format_stats, greedy_decode, skip_stats, DecodeTrace};
use skiplayer::model::Variant;
use skiplayer::sparse::{flops_at_target, Engine};
use skiplayer::train::{load_checkpoint, save_checkpoint, TrainState};
use skiplayer::{selftest, Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "skiplayer", version, about = "Per-token layer skipping for small decoder-only language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Validation loss and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Greedy decoding from a prompt.
    Decode(DecodeArgs),
    /// Per-token skip statistics from a decode trace.
    Stats(StatsArgs),
    /// Analytic FLOPs per token and effective depth.
    Flops(FlopsArgs),
    /// Run the built-in oracle and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Sparse,
    #[value(name = "masked_dense", alias = "masked-dense")]
    MaskedDense,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Skiplayer,
    Standard,
    Wideffn,
    Highway,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Args)]
struct Overrides {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Checkpoint path (overrides the configuration).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metrics log path (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus and evaluation settings; the checkpoint's own are used otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the decode trace (JSON) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Trace written by `decode --out`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    target_p: Option<f64>,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Sparse => Engine::Sparse,
            EngineArg::MaskedDense => Engine::MaskedDense,
        }
    }
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Skiplayer => Variant::Skiplayer,
            VariantArg::Standard => Variant::Standard,
            VariantArg::Wideffn => Variant::Wideffn,
            VariantArg::Highway => Variant::Highway,
            VariantArg::Random => Variant::Random,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = load_config(o.config.as_deref())?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.train.steps = s;
    }
    if let Some(e) = o.engine {
        cfg.engine.kind = e.into();
    }
    if let Some(v) = o.variant {
        cfg.model.variant = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.data.corpus {
        Some(path) => Corpus::from_file(path, cfg.data.val_fraction),
        None => Corpus::from_bytes(&synth::generate(&cfg.data.synth), cfg.data.val_fraction),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn train<S: Scalar>(cfg: ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(&cfg)?;
    let ckpt = cfg.paths.checkpoint.clone();
    let mut log = output(Some(&cfg.paths.metrics))?;
    let mut state = TrainState::<S>::new(cfg)?;
    eprintln!(
        "training {} parameters on {} tokens ({} validation)",
        state.model.param_count(),
        corpus.train().len(),
        corpus.validation().len()
    );
    let history = state.run(&corpus, Some(&mut *log), |s| save_checkpoint(s, &ckpt))?;
    log.flush()?;
    let report = state.evaluate(&corpus)?;
    if let Some(last) = history.last() {
        eprintln!("step {} nll {:.4} capacities {:?}", last.step, last.nll, last.capacities);
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn is_dtype_mismatch(e: &Error) -> bool {
    matches!(e, Error::Checkpoint(m) if m.contains("does not match the requested element type"))
}

fn with_checkpoint<F32, F64>(path: &Path, f32_fn: F32, f64_fn: F64) -> Result<()>
where
    F32: FnOnce(TrainState<f32>) -> Result<()>,
    F64: FnOnce(TrainState<f64>) -> Result<()>,
{
    match load_checkpoint::<f32>(path) {
        Ok(s) => f32_fn(s),
        Err(e) if is_dtype_mismatch(&e) => f64_fn(load_checkpoint::<f64>(path)?),
        Err(e) => Err(e),
    }
}

fn eval<S: Scalar>(mut state: TrainState<S>, args: &EvalArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let cfg = ExperimentConfig::from_file(path)?;
        state.config.data = cfg.data;
        state.config.engine = cfg.engine;
    }
    if let Some(e) = args.engine {
        state.config.engine.kind = e.into();
    }
    let corpus = load_corpus(&state.config)?;
    let report = state.evaluate(&corpus)?;
    writeln!(output(args.out.as_deref())?, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn decode<S: Scalar>(state: TrainState<S>, args: &DecodeArgs) -> Result<()> {
    let prompt = tokenize_bytes(args.prompt.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(state.config.seed));
    let (ids, trace) = greedy_decode(&state.model, &prompt, args.max_new, &mut rng)?;
    let text = skiplayer::data::detokenize(&ids)?;
    println!("{}", String::from_utf8_lossy(&text));
    if let Some(path) = &args.out {
        writeln!(output(Some(path))?, "{}", trace.to_json()?)?;
    }
    Ok(())
}

fn stats(args: &StatsArgs) -> Result<()> {
    let trace = DecodeTrace::from_json(&std::fs::read_to_string(&args.trace)?)?;
    let rows = skip_stats(&trace, token_display)?;
    write!(output(args.out.as_deref())?, "{}", format_stats(&rows))?;
    Ok(())
}

fn flops(args: &FlopsArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.model;
    if let Some(v) = args.variant {
        cfg.variant = v.into();
    }
    if let Some(l) = args.layers {
        cfg.n_layers = l;
    }
    if let Some(p) = args.target_p {
        cfg.target_p = p;
    }
    cfg.validate()?;
    let r = flops_at_target(&cfg)?;
    println!("variant\t{}", cfg.variant.name());
    println!("layers\t{}", cfg.n_layers);
    println!("target_p\t{}", cfg.effective_p());
    println!("eff_layers\t{}", r.eff_layers);
    println!("flops_per_token\t{:.0}", r.total);
    println!("layer_compute\t{:.0}", r.layer_compute);
    println!("kv_projection\t{:.0}", r.kv_projection);
    println!("router\t{:.0}", r.router);
    println!("gate\t{:.0}", r.gate);
    println!("head\t{:.0}", r.head);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let mut cfg = apply(&args.overrides)?;
            if let Some(p) = args.checkpoint {
                cfg.paths.checkpoint = p;
            }
            if let Some(p) = args.out {
                cfg.paths.metrics = p;
            }
            match args.dtype {
                DTypeArg::F32 => train::<f32>(cfg)?,
                DTypeArg::F64 => train::<f64>(cfg)?,
            }
        }
        Command::Eval(args) => with_checkpoint(&args.checkpoint, |s| eval(s, &args), |s| eval(s, &args))?,
        Command::Decode(args) => with_checkpoint(&args.checkpoint, |s| decode(s, &args), |s| decode(s, &args))?,
        Command::Stats(args) => stats(&args)?,
        Command::Flops(args) => flops(&args)?,
        Command::Selftest { seed } => {
            let checks = selftest::run(seed)?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Toml(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
