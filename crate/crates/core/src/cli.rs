//! The `calibkit` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use crate::calibrator::{fit, Calibrator, FitOptions, Method};
use crate::error::{CalibError, Result};
use crate::experiments::{run_experiment, Experiment, ExperimentConfig, ExperimentData};
use crate::io::{load_model, probabilities_to_csv, read_logits, save_model, to_canonical_json, write_atomic, write_logits};
use crate::report::{evaluate, evaluate_base, Report};
use crate::scaling::LossKind;
use crate::synth::{generate, Regime, SynthConfig};

// Aliases keep clap from treating list-valued flags as repeated flags.
type Counts = Vec<usize>;
type Reals = Vec<f64>;
type Methods = Vec<Method>;
type Losses = Vec<LossKind>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Env var capping the number of worker threads.
pub const THREADS_ENV: &str = "CALIBKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "calibkit", version, about = "Post-hoc calibration of classifier logits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one calibrator on a validation file and save it as JSON.
    Fit(FitArgs),
    /// Write calibrated probabilities for a logits file.
    Apply(ApplyArgs),
    /// Evaluate a saved calibrator (or the raw softmax) on a test file.
    Eval(EvalArgs),
    /// Fit several calibrators on one file and evaluate them on another.
    Compare(CompareArgs),
    /// Run a seeded sweep and write CSV and JSON tables.
    Experiment(ExperimentArgs),
    /// Generate a synthetic logits file with a known miscalibration.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Bin count for histbin and pbmc.
    #[arg(long = "fit-bins", default_value_t = 10)]
    fit_bins: usize,
    /// Training loss for ets and pts (defaults: mse for ets, ece for pts).
    #[arg(long)]
    loss: Option<LossKind>,
    /// PTS optimizer steps.
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    #[arg(long = "batch-size", default_value_t = 1000)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Number of sorted logits fed to the PTS network.
    #[arg(long, default_value_t = 10)]
    topk: usize,
}

impl TrainArgs {
    fn options(&self, hidden: Option<Vec<usize>>) -> FitOptions {
        let mut o = FitOptions {
            bins: self.fit_bins,
            seed: self.seed,
            ..FitOptions::default()
        };
        o.pts.seed = self.seed;
        o.pts.steps = self.steps;
        o.pts.batch_size = self.batch_size;
        o.pts.learning_rate = self.lr;
        o.pts.topk = self.topk;
        o.pts.eval_every = o.pts.eval_every.min(self.steps.max(1));
        if let Some(h) = hidden {
            o.pts.hidden = h;
        }
        if let Some(loss) = self.loss {
            o.ets_loss = loss;
            o.pts.loss = loss;
        }
        o
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PTS hidden layer widths, e.g. `5,5`.
    #[arg(long, value_parser = parse_usize_list)]
    widths: Option<Counts>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Saved calibrator; the uncalibrated softmax is evaluated when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    /// Equal-width bin counts: `10`, `5,10,15`, `5:19:2` or `5,7,...,19`.
    #[arg(long, value_parser = parse_usize_list, default_value = "10")]
    bins: Counts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long, value_parser = parse_methods, default_value = "ts,ets,pts,histbin,irova,irm,irova_ts,pbmc")]
    methods: Methods,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_parser = parse_usize_list, default_value = "10")]
    bins: Counts,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_usize_list)]
    widths: Option<Counts>,
    /// Record fit wall-time in the report (makes reports run-dependent).
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegimeKind {
    GlobalTemp,
    Heteroscedastic,
    OverconfidentTail,
}

#[derive(Debug, Args)]
struct RegimeArgs {
    #[arg(long, value_enum)]
    regime: Option<RegimeKind>,
    /// Temperature of `global_temp`.
    #[arg(long, default_value_t = 2.5)]
    scale: f64,
    /// Base temperature of `heteroscedastic` and `overconfident_tail`.
    #[arg(long, default_value_t = 1.0)]
    base: f64,
    /// Gap slope of `heteroscedastic` and `overconfident_tail`.
    #[arg(long, default_value_t = 0.5)]
    slope: f64,
}

impl RegimeArgs {
    fn regime(&self) -> Option<Regime> {
        self.regime.map(|k| match k {
            RegimeKind::GlobalTemp => Regime::GlobalTemp { scale: self.scale },
            RegimeKind::Heteroscedastic => Regime::Heteroscedastic {
                base: self.base,
                slope: self.slope,
            },
            RegimeKind::OverconfidentTail => Regime::OverconfidentTail {
                base: self.base,
                slope: self.slope,
            },
        })
    }
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    name: Experiment,
    /// Output directory for `<name>.csv` and `<name>.json`; stdout JSON when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validation logits; a synthetic oracle is generated when omitted.
    #[arg(long, requires = "test")]
    val: Option<PathBuf>,
    #[arg(long, requires = "val")]
    test: Option<PathBuf>,
    #[command(flatten)]
    regime: RegimeArgs,
    /// Records per synthetic split.
    #[arg(long, default_value_t = 50_000)]
    samples: usize,
    #[arg(long, value_parser = parse_methods)]
    methods: Option<Methods>,
    /// Hidden widths for the capacity sweep.
    #[arg(long, value_parser = parse_usize_list, default_value = "1,2,5,10,20")]
    widths: Counts,
    /// Bin counts for the bin sweep.
    #[arg(long, value_parser = parse_usize_list, default_value = "5,7,...,19")]
    bins: Counts,
    /// Validation fractions for the data-efficiency sweep.
    #[arg(long, value_parser = parse_f64_list, default_value = "0.1:1.0:0.1")]
    fractions: Reals,
    #[arg(long, value_parser = parse_losses, default_value = "mse,ece")]
    losses: Losses,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    regime: RegimeArgs,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 50_000)]
    samples: usize,
    #[arg(long, default_value_t = SynthConfig::DEFAULT_CONCENTRATION)]
    concentration: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
}

/// Integer list: `a,b,c`, a range `start:stop:step` (inclusive), or
/// `a,b,...,z` extending the step `b - a` up to `z`.
pub fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let num = |t: &str| t.parse::<usize>().map_err(|_| format!("'{t}' is not a nonnegative integer"));
    let out = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let (start, stop, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(format!("bad range '{s}'")),
        };
        if step == 0 || stop < start {
            return Err(format!("bad range '{s}'"));
        }
        (start..=stop).step_by(step).collect()
    } else {
        let items = split_list(s);
        if let Some(pos) = items.iter().position(|t| *t == "...") {
            if pos == 0 || pos + 2 != items.len() {
                return Err(format!("'...' must sit between a prefix and a final value in '{s}'"));
            }
            let prefix = items[..pos].iter().map(|t| num(t)).collect::<std::result::Result<Vec<_>, _>>()?;
            let last = num(items[pos + 1])?;
            let step = if prefix.len() >= 2 { prefix[1].checked_sub(prefix[0]).unwrap_or(0) } else { 1 };
            if step == 0 || last < prefix[0] {
                return Err(format!("'{s}' must increase"));
            }
            (prefix[0]..=last).step_by(step).collect()
        } else {
            items.into_iter().map(num).collect::<std::result::Result<Vec<_>, _>>()?
        }
    };
    if out.is_empty() {
        return Err("empty list".to_string());
    }
    Ok(out)
}

/// Real list: `a,b,c` or an inclusive range `start:stop:step`.
pub fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let num = |t: &str| -> std::result::Result<f64, String> {
        t.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("'{t}' is not a number"))
    };
    let out: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(format!("bad range '{s}', expected start:stop:step"));
        };
        let (start, stop, step) = (num(a)?, num(b)?, num(c)?);
        if !(step > 0.0) || stop < start {
            return Err(format!("bad range '{s}'"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        // Round away accumulated binary noise so 0.1:1.0:0.1 gives 0.3, not 0.30000000000000004.
        (0..count).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect()
    } else {
        split_list(s).into_iter().map(num).collect::<std::result::Result<_, _>>()?
    };
    if out.is_empty() {
        return Err("empty list".to_string());
    }
    Ok(out)
}

fn parse_methods(s: &str) -> std::result::Result<Vec<Method>, String> {
    let out = split_list(s)
        .into_iter()
        .map(|t| t.parse::<Method>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err("empty method list".to_string());
    }
    Ok(out)
}

fn parse_losses(s: &str) -> std::result::Result<Vec<LossKind>, String> {
    let out = split_list(s)
        .into_iter()
        .map(|t| t.parse::<LossKind>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err("empty loss list".to_string());
    }
    Ok(out)
}

pub fn exit_code(err: &CalibError) -> i32 {
    match err {
        CalibError::InvalidArgument(_) => EXIT_USAGE,
        CalibError::Numerical(_) => EXIT_NUMERICAL,
        CalibError::InvalidInput(_) | CalibError::Parse { .. } | CalibError::Io(_) | CalibError::Json(_) | CalibError::Csv(_) => {
            EXIT_DATA
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let val = read_logits(&args.val)?;
    let start = Instant::now();
    let cal = fit(args.method, &val, &args.train.options(args.widths.clone()))?;
    info!("fitted {} in {:.3}s", args.method, start.elapsed().as_secs_f64());
    save_model(&cal, &args.out)
}

fn cmd_apply(args: &ApplyArgs) -> Result<()> {
    let cal = load_model(&args.model)?;
    let test = read_logits(&args.test)?;
    let probs = cal.calibrate(&test)?;
    emit(args.out.as_deref(), &probabilities_to_csv(&test, &probs)?)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let test = read_logits(&args.test)?;
    let block = match &args.model {
        Some(path) => {
            let cal = load_model(path)?;
            evaluate(cal.method().name(), &test, &cal.calibrate(&test)?, &args.bins)?
        }
        None => evaluate_base(&test, &args.bins)?,
    };
    let report = Report::new(&test, vec![block]);
    emit(args.out.as_deref(), to_canonical_json(&report)?.as_bytes())
}

/// Fits every method on `val` (concurrently) and evaluates base plus each
/// method on `test`, in the order given.
pub fn compare(
    methods: &[Method],
    val: &crate::types::Dataset,
    test: &crate::types::Dataset,
    bins: &[usize],
    options: &FitOptions,
    timings: bool,
) -> Result<Report> {
    let fitted: Vec<(Calibrator, f64)> = methods
        .par_iter()
        .map(|&m| {
            let start = Instant::now();
            let cal = fit(m, val, options)?;
            let secs = start.elapsed().as_secs_f64();
            info!("fitted {m} in {secs:.3}s");
            Ok((cal, secs))
        })
        .collect::<Result<_>>()?;
    let mut blocks = vec![evaluate_base(test, bins)?];
    for (cal, secs) in fitted {
        let mut block = evaluate(cal.method().name(), test, &cal.calibrate(test)?, bins)?;
        if timings {
            block.fit_seconds = Some(secs);
        }
        blocks.push(block);
    }
    Ok(Report::new(test, blocks))
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let val = read_logits(&args.val)?;
    let test = read_logits(&args.test)?;
    let report = compare(
        &args.methods,
        &val,
        &test,
        &args.bins,
        &args.train.options(args.widths.clone()),
        args.timings,
    )?;
    emit(args.out.as_deref(), to_canonical_json(&report)?.as_bytes())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let data = match (&args.val, &args.test) {
        (Some(val), Some(test)) => ExperimentData {
            val: read_logits(val)?,
            test: read_logits(test)?,
            regime: None,
        },
        _ => {
            let regime = args.regime.regime().unwrap_or_else(|| args.name.default_regime());
            ExperimentData::synthetic(regime, args.samples, args.samples, args.train.seed)?
        }
    };
    let config = ExperimentConfig {
        fit: args.train.options(None),
        widths: args.widths.clone(),
        bins: args.bins.clone(),
        fractions: args.fractions.clone(),
        losses: args.losses.clone(),
        methods: args.methods.clone(),
        seed: args.train.seed,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(args.name, &data, &config)?;
    let json = to_canonical_json(&report)?;
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_atomic(&dir.join(format!("{}.csv", args.name)), &report.to_csv()?)?;
            write_atomic(&dir.join(format!("{}.json", args.name)), json.as_bytes())
        }
        None => emit(None, json.as_bytes()),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let regime = args.regime.regime().unwrap_or(Regime::GlobalTemp { scale: args.regime.scale });
    let config = SynthConfig {
        num_classes: args.classes,
        num_samples: args.samples,
        regime,
        concentration: args.concentration,
        seed: args.seed,
    };
    write_logits(&generate(&config)?.dataset, &args.out)
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_lists() {
        assert_eq!(parse_usize_list("10").unwrap(), vec![10]);
        assert_eq!(parse_usize_list("5, 10,15").unwrap(), vec![5, 10, 15]);
        assert_eq!(parse_usize_list("5:19:2").unwrap(), vec![5, 7, 9, 11, 13, 15, 17, 19]);
        assert_eq!(parse_usize_list("5,7,...,19").unwrap(), parse_usize_list("5:19:2").unwrap());
        assert_eq!(parse_usize_list("3,...,6").unwrap(), vec![3, 4, 5, 6]);
        for bad in ["", "a", "5:1", "5:9:0", "...,4", "5,7,...", "7,5,...,19", "-1"] {
            assert!(parse_usize_list(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn real_lists() {
        let f = parse_f64_list("0.1:1.0:0.1").unwrap();
        assert_eq!(f.len(), 10);
        assert_eq!(f[2], 0.3);
        assert_eq!(f[9], 1.0);
        assert_eq!(parse_f64_list("0.25,0.5").unwrap(), vec![0.25, 0.5]);
        assert!(parse_f64_list("0.1:1.0").is_err());
        assert!(parse_f64_list("x").is_err());
        assert!(parse_f64_list("nan").is_err());
    }

    #[test]
    fn method_and_loss_lists() {
        assert_eq!(parse_methods("ts,irova_ts").unwrap(), vec![Method::Ts, Method::IrovaTs]);
        assert!(parse_methods("ts,platt").is_err());
        assert_eq!(parse_losses("mse,ece").unwrap(), vec![LossKind::Mse, LossKind::Ece]);
        assert!(parse_losses("nll").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["calibkit", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["calibkit", "fit", "--method", "platt", "--val", "v", "--out", "o"]), EXIT_USAGE);
        assert_eq!(run(["calibkit", "eval", "--test", "t", "--bins", "0:1:0"]), EXIT_USAGE);
        assert_eq!(run(["calibkit", "experiment", "sweep"]), EXIT_USAGE);
        assert_eq!(run(["calibkit", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        assert_eq!(run(["calibkit", "eval", "--test", "/nonexistent/test.csv"]), EXIT_DATA);
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&CalibError::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&CalibError::InvalidArgument("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&CalibError::InvalidInput("x".into())), EXIT_DATA);
    }
}
