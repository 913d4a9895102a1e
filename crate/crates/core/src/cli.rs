//! Command-line surface: `train`, `predict`, `eval`, `bench` and `synth`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data::{self, Dataset, TargetColumn};
use crate::error::Error;
use crate::kernel::{Family, KernelShape};
use crate::model::TrainedModel;
use crate::synth;
use crate::train::{fit, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "alacarte",
    version,
    about = "Fastfood kernel learning with GP marginal likelihood"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it to --out.
    Train(TrainArgs),
    /// Predict mean and variance for every row of an input CSV.
    Predict(PredictArgs),
    /// k-fold cross-validated RMSE.
    Eval(EvalArgs),
    /// Hold-out RMSE, timings and model size over a grid of kernels, Q and m.
    Bench(BenchArgs),
    /// Write a synthetic regression dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Training CSV; the target is the last column unless --target-col is given.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column: `last`, a 0-based index, or a header name.
    #[arg(long, default_value = "last")]
    pub target_col: String,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// L-BFGS iterations after restart selection.
    #[arg(long, default_value_t = 150)]
    pub iters: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// L-BFGS iterations per restart.
    #[arg(long, default_value_t = 20)]
    pub restart_iters: usize,
    #[arg(long, env = "ALACARTE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            max_iters: self.iters,
            restart_count: self.restarts,
            restart_iters: self.restart_iters,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_family)]
    pub kernel: Family,
    /// Groups (mixture components); defaults per kernel.
    #[arg(long = "Q")]
    pub q: Option<usize>,
    /// Frequencies per group; defaults per kernel.
    #[arg(long)]
    pub m: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input CSV with the model's input columns only.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_family)]
    pub kernel: Family,
    #[arg(long = "Q")]
    pub q: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave out wall-time columns so reports are reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated kernel families.
    #[arg(long, value_delimiter = ',', num_args = 0.., value_parser = parse_family)]
    pub kernel: Vec<Family>,
    /// Comma-separated group counts.
    #[arg(long = "Q", value_delimiter = ',', num_args = 0..)]
    pub q: Vec<usize>,
    /// Comma-separated frequencies per group.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub m: Vec<usize>,
    /// The hold-out set is one of this many folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// 1-D draw from a kernel with spectral peak at `--peak`.
    Peaked,
    /// Five-input table with trend, oscillations and an interaction.
    Airfoil,
    /// Smooth function of `--d` inputs.
    Smooth,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long, default_value_t = 6.0)]
    pub peak: f64,
    #[arg(long, env = "ALACARTE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Default `(Q, m)` for a family.
pub fn default_shape(family: Family) -> (usize, usize) {
    match family {
        Family::Gm | Family::Pwl => (5, 256),
        _ => (1, 512),
    }
}

fn shape_for(family: Family, d: usize, q: Option<usize>, m: Option<usize>) -> CliResult<KernelShape> {
    let (dq, dm) = default_shape(family);
    KernelShape::new(family, d, q.unwrap_or(dq), m.unwrap_or(dm)).map_err(|e| CliError::Usage(e.to_string()))
}

fn load(args: &DataArgs) -> CliResult<Dataset> {
    let target: TargetColumn = args
        .target_col
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let ds = data::load_csv(&args.data, &target)?;
    if ds.rejected_rows > 0 {
        log::warn!("dropped {} rows with non-finite values", ds.rejected_rows);
    }
    if ds.is_empty() {
        return Err(CliError::Runtime(Error::EmptyInput));
    }
    Ok(ds)
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(Error::Io(std::io::Error::other(e.to_string()))))
}

fn emit(out: &Option<PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Runtime(e.into())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let ds = load(&args.data)?;
    let shape = shape_for(args.kernel, ds.dim(), args.q, args.m)?;
    let config = args.optim.config();
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let start = Instant::now();
    let (model, nlml) = pool(args.optim.jobs)?.install(|| fit(&shape, &ds.x, &ds.y, &config))?;
    let seconds = start.elapsed().as_secs_f64();
    model.save(&args.out)?;
    Ok(format!(
        "kernel={} Q={} m={} n={} nlml={nlml:.6} seconds={seconds:.3} params={}\n",
        shape.family,
        shape.groups,
        shape.freqs_per_group,
        ds.len(),
        shape.param_count()
    ))
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    let model = TrainedModel::load(&args.model)?;
    let x = data::load_inputs(&args.data)?;
    let (mean, var) = model.predict(&x)?;
    let mut text = String::new();
    for (m, v) in mean.iter().zip(&var) {
        writeln!(text, "{m},{v}").expect("writing to a String");
    }
    emit(&args.out, &text)
}

/// Hold-out RMSE of one fit; returns `(rmse, model, train seconds, predict seconds)`.
fn holdout(
    ds: &Dataset,
    shape: &KernelShape,
    config: &TrainConfig,
    train: &[usize],
    test: &[usize],
) -> crate::Result<(f64, TrainedModel, f64, f64)> {
    let (tr, te) = (ds.subset(train), ds.subset(test));
    let start = Instant::now();
    let (model, _) = fit(shape, &tr.x, &tr.y, config)?;
    let train_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (mean, _) = model.predict(&te.x)?;
    let predict_s = start.elapsed().as_secs_f64();
    Ok((data::rmse(&mean, &te.y)?, model, train_s, predict_s))
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    if args.folds < 2 {
        return Err(CliError::Usage(format!(
            "--folds must be at least 2, got {}",
            args.folds
        )));
    }
    let ds = load(&args.data)?;
    let shape = shape_for(args.kernel, ds.dim(), args.q, args.m)?;
    let config = args.optim.config();
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let parts = data::kfold_partitions(ds.len(), args.folds, args.optim.seed)?;
    let results: Vec<(f64, f64)> = pool(args.optim.jobs)?.install(|| {
        parts
            .par_iter()
            .map(|(train, test)| holdout(&ds, &shape, &config, train, test).map(|(r, _, t, _)| (r, t)))
            .collect::<crate::Result<_>>()
    })?;

    let mut text = String::from(if args.no_timing {
        "fold,rmse\n"
    } else {
        "fold,rmse,seconds\n"
    });
    for (i, (r, t)) in results.iter().enumerate() {
        if args.no_timing {
            writeln!(text, "{},{r:.6}", i + 1)
        } else {
            writeln!(text, "{},{r:.6},{t:.3}", i + 1)
        }
        .expect("writing to a String");
    }
    let rmses: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (mean, std) = mean_std(&rmses);
    writeln!(text, "mean,{mean:.6} ± {std:.6}").expect("writing to a String");
    emit(&args.out, &text)?;
    Ok(text)
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<String> {
    let cells: Vec<(Family, usize, usize)> = args
        .kernel
        .iter()
        .flat_map(|&k| args.q.iter().flat_map(move |&q| args.m.iter().map(move |&m| (k, q, m))))
        .collect();
    if cells.is_empty() {
        return Err(CliError::Usage(
            "the sweep is empty; give --kernel, --Q and --m lists".into(),
        ));
    }
    if args.folds < 2 {
        return Err(CliError::Usage(format!(
            "--folds must be at least 2, got {}",
            args.folds
        )));
    }
    let ds = load(&args.data)?;
    let shapes = cells
        .iter()
        .map(|&(k, q, m)| shape_for(k, ds.dim(), Some(q), Some(m)))
        .collect::<CliResult<Vec<_>>>()?;
    let config = args.optim.config();
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (train, test) = data::kfold_partitions(ds.len(), args.folds, args.optim.seed)?.swap_remove(0);
    let rows: Vec<(f64, f64, f64, usize)> = pool(args.optim.jobs)?.install(|| {
        shapes
            .par_iter()
            .map(|shape| {
                holdout(&ds, shape, &config, &train, &test).map(|(r, model, t, p)| (r, t, p, model.to_bytes().len()))
            })
            .collect::<crate::Result<_>>()
    })?;

    let mut text = String::from(if args.no_timing {
        "kernel,Q,m,rmse,model_bytes\n"
    } else {
        "kernel,Q,m,rmse,train_seconds,predict_seconds,model_bytes\n"
    });
    for ((k, q, m), (r, t, p, bytes)) in cells.iter().zip(&rows) {
        if args.no_timing {
            writeln!(text, "{k},{q},{m},{r:.6},{bytes}")
        } else {
            writeln!(text, "{k},{q},{m},{r:.6},{t:.3},{p:.3},{bytes}")
        }
        .expect("writing to a String");
    }
    emit(&args.out, &text)?;
    Ok(text)
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let text = match args.kind {
        SynthKind::Peaked => {
            let (x, y) = synth::peaked_spectrum_1d(args.n, args.peak, 0.3, 10.0, 0.1, args.seed)?;
            synth::to_csv(&x, &y, Some(&["x", "y"]))
        }
        SynthKind::Airfoil => {
            let (x, y) = synth::airfoil_surrogate(args.n, args.seed);
            synth::to_csv(
                &x,
                &y,
                Some(&["frequency", "angle", "chord", "velocity", "thickness", "level"]),
            )
        }
        SynthKind::Smooth => {
            if args.d == 0 {
                return Err(CliError::Usage("--d must be positive".into()));
            }
            let (x, y) = synth::smooth_regression(args.n, args.d, args.seed);
            let names: Vec<String> = (0..args.d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            synth::to_csv(&x, &y, Some(&refs))
        }
    };
    emit(&args.out, &text)
}

/// Runs one parsed command, printing reports to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            print!("{}", cmd_train(&a)?);
            Ok(())
        }
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => {
            let text = cmd_eval(&a)?;
            if a.out.is_some() {
                print!("{text}");
            }
            Ok(())
        }
        Command::Bench(a) => {
            let text = cmd_bench(&a)?;
            if a.out.is_some() {
                print!("{text}");
            }
            Ok(())
        }
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("alacarte: {e}");
            e.exit_code()
        }
    }
}
