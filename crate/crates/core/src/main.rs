use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use deepgp::deep::{encode, predict, Mode};
use deepgp::error::DeepGpError;
use deepgp::gradients::{finite_difference_check, pack, Data, Objective, DEFAULT_FD_STEP};
use deepgp::io::{
    gen_step, load_csv, write_columns_to, write_dataset, Column, CsvOptions, Dataset, ModelFile, RunConfig,
    TrainingMetadata, STEP_NOISE_SD,
};
use deepgp::optimizer::{initialize, maximize, TraceRecord};
use deepgp::parallel::{resolve_workers, ChunkPlan, Executor};

#[derive(Parser)]
#[command(
    name = "deepgp",
    version,
    about = "Deep Gaussian processes with nested variational compression"
)]
struct Cli {
    /// Worker threads; overrides DEEPGP_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize and train a model from a config file.
    Train(TrainArgs),
    /// Predictive means and variances on a grid or input file.
    Predict(PredictArgs),
    /// Latent means and variances of an autoencoder.
    Encode(EncodeArgs),
    /// Print the bound's term table for a saved model.
    Bound(BoundArgs),
    /// Compare analytic gradients with finite differences.
    CheckGrad(CheckGradArgs),
    /// Write a noisy step-function dataset.
    GenStep(GenStepArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training CSV; overrides `data.path` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Trace CSV (iteration, objective, grad_norm, seconds, batch_id).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evenly spaced 1-D grid as `lo,hi,count`.
    #[arg(long, conflicts_with = "input", value_parser = parse_grid, allow_hyphen_values = true)]
    grid: Option<(f64, f64, usize)>,
    /// CSV of input rows; every column is an input.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of observations; every column is an output dimension.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    no_header: bool,
    /// Hidden layer to read (1-based).
    #[arg(long, default_value_t = 1)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BoundArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV in the layout the model was trained on: inputs then targets.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    no_header: bool,
}

#[derive(Args, Serialize)]
struct CheckGradArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Check at a saved model instead of the initialization.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Serialize)]
struct GenStepArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = STEP_NOISE_SD)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lo, hi, count] = parts.as_slice() else {
        return Err("expected lo,hi,count".into());
    };
    let lo: f64 = lo.parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f64 = hi.parse().map_err(|e| format!("hi: {e}"))?;
    let count: usize = count.parse().map_err(|e| format!("count: {e}"))?;
    if count < 2 || !(hi > lo) {
        return Err("need count ≥ 2 and hi > lo".into());
    }
    Ok((lo, hi, count))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<DeepGpError> for Failure {
    fn from(e: DeepGpError) -> Self {
        let code = match &e {
            DeepGpError::Config(_) | DeepGpError::VersionMismatch { .. } | DeepGpError::InvalidPlan(_) => 2,
            DeepGpError::NotPositiveDefinite { .. }
            | DeepGpError::NotSymmetric { .. }
            | DeepGpError::NonFiniteObjective { .. } => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a, cli.workers),
        Command::Predict(a) => run_predict(a),
        Command::Encode(a) => run_encode(a),
        Command::Bound(a) => bound(a, cli.workers),
        Command::CheckGrad(a) => check_grad(a, cli.workers),
        Command::GenStep(a) => run_gen_step(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_resolved<T: Serialize>(command: &str, value: &T) -> CliResult<()> {
    let text = toml::to_string(value).map_err(|e| DeepGpError::Config(e.to_string()))?;
    println!("# resolved {command} configuration\n{text}");
    Ok(())
}

/// Loads the config, applies command-line overrides and reads the data.
fn load_run(config: &Path, data: Option<&PathBuf>, workers: Option<usize>) -> CliResult<(RunConfig, Dataset)> {
    let mut run = RunConfig::load(config)?;
    if workers.is_some() {
        run.optimizer.workers = workers;
    }
    let mut data_cfg = run.data.clone().unwrap_or(deepgp::io::DataConfig {
        path: PathBuf::new(),
        has_header: true,
        x_cols: None,
        y_cols: None,
        normalize: false,
    });
    if let Some(p) = data {
        data_cfg.path = p.clone();
    }
    if data_cfg.path.as_os_str().is_empty() {
        return Err(DeepGpError::Config("no data file: pass --data or set data.path".into()).into());
    }
    run.data = Some(data_cfg.clone());
    let dataset = load_csv(&data_cfg.path, &data_cfg.csv_options(run.mode))?;
    Ok((run, dataset))
}

fn data_of(d: &Dataset) -> Data<'_> {
    Data {
        x: d.x.as_ref(),
        y: &d.y,
    }
}

fn train(args: &TrainArgs, workers: Option<usize>) -> CliResult<()> {
    let (run, dataset) = load_run(&args.config, args.data.as_ref(), workers)?;
    print_resolved("train", &run)?;
    let data = data_of(&dataset);
    let model = initialize(data, &run.architecture(), run.seed)?;
    let result = maximize(&model, data, &run.optimizer)?;
    let meta = TrainingMetadata {
        seed: run.seed,
        optimizer: run.optimizer.clone(),
        final_bound: result.final_bound,
        iterations: result.trace.last().map_or(0, |t| t.iteration),
        stop_reason: result.reason,
    };
    ModelFile::new(result.model, dataset.normalization.clone(), Some(meta)).save(&args.out)?;
    if let Some(path) = &args.trace {
        write_trace(path, &result.trace)?;
    }
    println!(
        "final bound {:.10} after {} records ({:?})",
        result.final_bound,
        result.trace.len(),
        result.reason
    );
    Ok(())
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(DeepGpError::from)?;
    w.write_record(["iteration", "objective", "grad_norm", "seconds", "batch_id"])
        .map_err(DeepGpError::from)?;
    for t in trace {
        w.write_record([
            t.iteration.to_string(),
            t.objective.to_string(),
            t.grad_norm.to_string(),
            t.seconds.to_string(),
            t.batch_id.map_or(String::new(), |b| b.to_string()),
        ])
        .map_err(DeepGpError::from)?;
    }
    w.flush().map_err(DeepGpError::from)?;
    Ok(())
}

fn names(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

fn scale_in(s: &Option<deepgp::io::ColumnScaling>, m: DMatrix<f64>) -> CliResult<DMatrix<f64>> {
    Ok(match s {
        Some(s) => s.apply(&m)?,
        None => m,
    })
}

fn scale_out(
    s: &Option<deepgp::io::ColumnScaling>,
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
) -> CliResult<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(match s {
        Some(s) => (s.invert(mean)?, s.invert_variance(var)?),
        None => (mean.clone(), var.clone()),
    })
}

fn all_columns(path: &Path, no_header: bool) -> CliResult<Dataset> {
    Ok(load_csv(
        path,
        &CsvOptions {
            has_header: !no_header,
            x_cols: Some(Vec::<Column>::new()),
            y_cols: None,
            normalize: false,
        },
    )?)
}

fn run_predict(args: &PredictArgs) -> CliResult<()> {
    print_resolved("predict", args)?;
    let file = ModelFile::load(&args.model)?;
    let q_in = file.model.input_dim();
    let (raw, in_names) = match (&args.grid, &args.input) {
        (Some((lo, hi, count)), None) => {
            if q_in != 1 {
                return Err(
                    DeepGpError::Config(format!("--grid needs a 1-D input model, this one has {q_in} inputs")).into(),
                );
            }
            let step = (hi - lo) / (*count - 1) as f64;
            (
                DMatrix::from_fn(*count, 1, |i, _| lo + step * i as f64),
                vec!["x".to_string()],
            )
        }
        (None, Some(path)) => {
            let d = all_columns(path, args.no_header)?;
            (d.y, d.y_names)
        }
        _ => return Err(DeepGpError::Config("pass exactly one of --grid or --input".into()).into()),
    };
    let inputs = scale_in(&file.normalization.x, raw.clone())?;
    let message = predict(&file.model, &inputs)?;
    let (mean, var) = scale_out(&file.normalization.y, message.means(), message.variances())?;
    let q_out = mean.ncols();
    write_columns_to(
        &args.out,
        &[
            (&in_names, &raw),
            (&names("mean_", q_out), &mean),
            (&names("var_", q_out), &var),
        ],
    )?;
    Ok(())
}

fn run_encode(args: &EncodeArgs) -> CliResult<()> {
    print_resolved("encode", args)?;
    let file = ModelFile::load(&args.model)?;
    let d = all_columns(&args.data, args.no_header)?;
    let y = scale_in(&file.normalization.y, d.y)?;
    let message = encode(&file.model, &y, args.layer)?;
    let q = message.dim();
    write_columns_to(
        &args.out,
        &[
            (&names("mean_", q), message.means()),
            (&names("var_", q), message.variances()),
        ],
    )?;
    Ok(())
}

fn bound(args: &BoundArgs, workers: Option<usize>) -> CliResult<()> {
    print_resolved("bound", args)?;
    let file = ModelFile::load(&args.model)?;
    let model = &file.model;
    let options = CsvOptions {
        has_header: !args.no_header,
        x_cols: match model.mode {
            Mode::Regression => Some((0..model.input_dim()).map(Column::Index).collect()),
            Mode::Autoencoder => Some(Vec::new()),
        },
        y_cols: None,
        normalize: false,
    };
    let d = load_csv(&args.data, &options)?;
    let x = d.x.map(|x| scale_in(&file.normalization.x, x)).transpose()?;
    let y = scale_in(&file.normalization.y, d.y)?;
    let n = y.nrows();
    let exec = Executor::new(resolve_workers(workers))?;
    let plan = ChunkPlan::even(n, deepgp::optimizer::DEFAULT_CHUNKS.min(n))?;
    let report = exec.bound(&Objective::Deep, model, Data { x: x.as_ref(), y: &y }, &plan)?;
    for (name, value) in report.term_table() {
        println!("{name:<20} {value}");
    }
    Ok(())
}

fn check_grad(args: &CheckGradArgs, workers: Option<usize>) -> CliResult<()> {
    let (run, dataset) = load_run(&args.config, args.data.as_ref(), workers)?;
    print_resolved("check-grad", &run)?;
    let data = data_of(&dataset);
    let model = match &args.model {
        Some(p) => ModelFile::load(p)?.model,
        None => initialize(data, &run.architecture(), run.seed)?,
    };
    let report = finite_difference_check(&Objective::Deep, &pack(&model), data, args.step, args.tolerance)?;
    println!(
        "checked {} entries, worst relative error {:.3e} (tolerance {:.1e})",
        report.entries.len(),
        report.worst_rel_error,
        report.tolerance
    );
    for &i in &report.failing {
        let e = report
            .entries
            .iter()
            .find(|e| e.index == i)
            .expect("failing entries are listed");
        println!(
            "  {}: analytic {:.6e}, numeric {:.6e}, rel {:.2e}",
            e.name, e.analytic, e.numeric, e.rel_error
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: format!(
                "{} gradient entries disagree with finite differences",
                report.failing.len()
            ),
        })
    }
}

fn run_gen_step(args: &GenStepArgs) -> CliResult<()> {
    print_resolved("gen-step", args)?;
    let d = gen_step(args.n, args.noise_sd, args.seed)?;
    write_dataset(&args.out, &d)?;
    Ok(())
}
