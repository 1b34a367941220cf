use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scsgd::bounds::{spectrum_of, BoundInputs, BoundReport};
use scsgd::compare::{compare, Arm};
use scsgd::linalg::{norms, second_moment};
use scsgd::optimizer::evaluate;
use scsgd::sketch::SketchDistribution;
use scsgd::{
    generate_synthetic, sketched_preprocessing, train, Conditioner, Dataset, Error, ErrorClass, LossModel,
    SketchConfig, StepSize, SyntheticSpec, TrainConfig,
};

#[derive(Parser)]
#[command(name = "scsgd", version, about = "Conditioned and sketched-conditioned SGD for multiclass logistic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a power-law feature spectrum.
    Gen(GenArgs),
    /// Build a low-rank conditioner by randomized sketching.
    Sketch(SketchArgs),
    /// Train a linear classifier and write its loss trace.
    Train(TrainArgs),
    /// Evaluate the convergence bounds for a spectrum or dataset.
    Bounds(BoundsArgs),
    /// Run a paired comparison of conditioners from a JSON config.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Eigenvalue i of the feature covariance is i^-decay.
    #[arg(long, default_value_t = 2.0)]
    decay: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset CSV to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the planted weights as JSON.
    #[arg(long)]
    planted: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distribution {
    Gaussian,
    Rademacher,
}

impl From<Distribution> for SketchDistribution {
    fn from(d: Distribution) -> Self {
        match d {
            Distribution::Gaussian => SketchDistribution::Gaussian,
            Distribution::Rademacher => SketchDistribution::Rademacher,
        }
    }
}

#[derive(Args)]
struct SketchArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    /// Sketch width (default 2k, capped at n).
    #[arg(long)]
    r: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Distribution::Gaussian)]
    distribution: Distribution,
    /// Conditioner file; `.json` is written as text, anything else as binary.
    #[arg(long, short)]
    out: PathBuf,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Saved conditioner (identity when omitted).
    #[arg(long)]
    conditioner: Option<PathBuf>,
    /// Held-out dataset CSV.
    #[arg(long, conflicts_with = "holdout")]
    eval: Option<PathBuf>,
    /// Hold out the last N examples of the training file.
    #[arg(long)]
    holdout: Option<usize>,
    /// Training configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Fixed step size.
    #[arg(long, conflicts_with = "sigma")]
    eta: Option<f64>,
    /// Step size sigma/(rho*sqrt(T)) for an assumed bound sigma on the optimum's norm.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Rebuild the conditioner from a moving average of the inputs every N iterations.
    #[arg(long)]
    refresh_every: Option<usize>,
    /// Trace CSV to write.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    /// File with one eigenvalue per line.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    spectrum: Option<PathBuf>,
    /// Dataset CSV whose second-moment spectrum is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Assumed upper bound on the spectral norm of the optimum.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Lipschitz constant (default: that of the multiclass logistic loss).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Rank for the low-rank bounds.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    decay_constant: f64,
}

#[derive(Args)]
struct CompareArgs {
    /// Comparison config JSON.
    config: PathBuf,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareConfig {
    /// Dataset CSV, relative to the config file.
    #[serde(default)]
    data: Option<PathBuf>,
    /// Generated dataset, as an alternative to `data`.
    #[serde(default)]
    synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    eval: Option<PathBuf>,
    #[serde(default)]
    holdout: Option<usize>,
    arms: Vec<Arm>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    target_loss: Option<f64>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    conditioner: &'static str,
    refreshes: usize,
    final_train_loss: f64,
    final_eval_loss: Option<f64>,
    /// Absent when training diverged.
    averaged_train_loss: Option<f64>,
    averaged_train_error01: Option<f64>,
    elapsed_ms: f64,
    index_digest: u64,
    diverged_at: Option<usize>,
}

#[derive(Serialize)]
struct GenSummary<'a> {
    spec: &'a SyntheticSpec,
    planted_spectral_norm: f64,
}

/// Prefixes I/O failures with the path involved.
fn at_path<T>(path: &Path, result: Result<T, Error>) -> Result<T, Error> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    at_path(path, Dataset::load_csv(path))
}

fn read_text(path: &Path) -> Result<String, Error> {
    at_path(path, std::fs::read_to_string(path).map_err(Error::from))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn split_or_load(data: Dataset, eval: Option<&Path>, holdout: Option<usize>) -> Result<(Dataset, Option<Dataset>), Error> {
    match (eval, holdout) {
        (Some(path), _) => Ok((data, Some(load_dataset(path)?))),
        (None, Some(h)) => {
            let (train, held) = data.split_tail(h)?;
            Ok((train, Some(held)))
        }
        (None, None) => Ok((data, None)),
    }
}

fn loss_for(data: &Dataset, eval: Option<&Dataset>) -> Result<LossModel, Error> {
    let p = eval.map_or(0, Dataset::num_classes).max(data.num_classes()).max(2);
    LossModel::multiclass_logistic(p)
}

fn run_gen(args: GenArgs) -> Result<(), Error> {
    let spec = SyntheticSpec {
        n: args.n,
        m: args.m,
        p: args.p,
        decay_power: args.decay,
        noise: args.noise,
        seed: args.seed,
    };
    let (data, planted) = generate_synthetic(&spec)?;
    data.save_csv(&args.out)?;
    if let Some(path) = &args.planted {
        write_json(path, &planted)?;
    }
    print_json(&GenSummary {
        spec: &spec,
        planted_spectral_norm: norms(&planted)?.spectral,
    })
}

fn run_sketch(args: SketchArgs) -> Result<(), Error> {
    let data = load_dataset(&args.data)?;
    let mut cfg = SketchConfig::new(args.k, args.seed).with_distribution(args.distribution.into());
    if let Some(r) = args.r {
        cfg = cfg.with_width(r);
    }
    let (cond, report) = sketched_preprocessing(data.features(), &cfg)?;
    cond.save(&args.out)?;
    match &args.report {
        Some(path) => write_json(path, &report),
        None => print_json(&report),
    }
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(eta) = args.eta {
        cfg.step_size = StepSize::Fixed { eta };
    }
    if let Some(sigma) = args.sigma {
        cfg.step_size = StepSize::Lemma1 { sigma };
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.refresh_every {
        cfg.conditioner_refresh_every = v;
    }

    let data = load_dataset(&args.data)?;
    let (data, eval) = split_or_load(data, args.eval.as_deref(), args.holdout)?;
    let loss = loss_for(&data, eval.as_ref())?;
    let cond = match &args.conditioner {
        Some(path) => at_path(path, Conditioner::load(path))?,
        None => Conditioner::identity(data.n())?,
    };
    let run = train(&data, cond, &cfg, &loss, eval.as_ref())?;
    run.trace.save_csv(&args.out)?;

    let last = run.trace.last().expect("trace holds the initial checkpoint");
    let (avg_loss, avg_err) = match run.diverged_at() {
        Some(_) => (None, None),
        None => {
            let (l, e) = evaluate(run.averaged(), &data, &loss, 0)?;
            (Some(l), Some(e))
        }
    };
    print_json(&TrainSummary {
        iterations: run.diverged_at().map_or(run.state.t, |t| t - 1),
        conditioner: run.conditioner.kind(),
        refreshes: run.refreshes,
        final_train_loss: last.train_loss,
        final_eval_loss: last.eval_loss,
        averaged_train_loss: avg_loss,
        averaged_train_error01: avg_err,
        elapsed_ms: run.elapsed_ms,
        index_digest: run.trace.index_digest,
        diverged_at: run.trace.diverged_at,
    })?;
    run.into_result().map(|_| ())
}

/// One eigenvalue per line; blank lines and `#` comments are skipped. The
/// result is sorted in descending order.
fn read_spectrum(path: &Path) -> Result<Vec<f64>, Error> {
    let text = read_text(path)?;
    let mut spectrum = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value: f64 = line.parse().map_err(|_| Error::Parse {
            line: i as u64 + 1,
            message: format!("not a number: {line:?}"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: i as u64 + 1,
                message: format!("non-finite eigenvalue {value}"),
            });
        }
        spectrum.push(value);
    }
    if spectrum.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no eigenvalues".into(),
        });
    }
    spectrum.sort_by(|a, b| b.total_cmp(a));
    Ok(spectrum)
}

fn run_bounds(args: BoundsArgs) -> Result<(), Error> {
    let spectrum = match (&args.spectrum, &args.data) {
        (Some(path), _) => read_spectrum(path)?,
        (None, Some(path)) => {
            let data = load_dataset(path)?;
            spectrum_of(&second_moment(data.features())?)?
        }
        (None, None) => return Err(usage("either --spectrum or --data is required")),
    };
    let rho = match args.rho {
        Some(rho) => rho,
        None => LossModel::multiclass_logistic(2)?.lipschitz_constant(),
    };
    let mut inputs = BoundInputs::new(args.sigma, rho, args.iterations, spectrum)?;
    if let Some(k) = args.k {
        inputs = inputs.with_rank(k);
    }
    print_json(&BoundReport::evaluate(&inputs, args.decay_constant, None)?)
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn run_compare(args: CompareArgs) -> Result<(), Error> {
    let text = read_text(&args.config)?;
    let config: CompareConfig = serde_json::from_str(&text)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let data = match (&config.data, &config.synthetic) {
        (Some(path), None) => load_dataset(&resolve(base, path))?,
        (None, Some(spec)) => generate_synthetic(spec)?.0,
        _ => return Err(usage("config needs exactly one of `data` and `synthetic`")),
    };
    let eval_path = config.eval.as_ref().map(|p| resolve(base, p));
    let (data, eval) = split_or_load(data, eval_path.as_deref(), config.holdout)?;
    let loss = loss_for(&data, eval.as_ref())?;
    let out_dir = match (&args.out, &config.out_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => resolve(base, dir),
        (None, None) => return Err(usage("no output directory: pass --out or set `out_dir`")),
    };
    let cmp = compare(&data, eval.as_ref(), &config.arms, &config.train, &loss, config.target_loss)?;
    cmp.write(&out_dir)?;
    print_json(&cmp.summary())
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Sketch(a) => run_sketch(a),
        Command::Train(a) => run_train(a),
        Command::Bounds(a) => run_bounds(a),
        Command::Compare(a) => run_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
