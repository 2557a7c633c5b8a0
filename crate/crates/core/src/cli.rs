//! Command-line front end. Every command reads and writes JSON; reports go to
//! stdout, diagnostics to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::compiler::{compile_spline, CompileOptions, Mode, DEFAULT_ROW_CAP};
use crate::error::Error;
use crate::scalar::Rational;
use crate::spline::SplineGrid;
use crate::tensor::Mat;
use crate::transformer::{Activation, EncDecStack, EncoderBlock};
use crate::verifier::{
    encdec_degree_bound, encoder_degree_bound, estimate_degree, oracle_equiv, report_json, sample_matrices, smooth_convergence_table,
    smooth_swap, softmax_check, to_float, EncDecModel, EncoderModel, Evaluable,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "splineformer", version, about = "Compile piecewise-polynomial splines into ReLU transformers and check them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Faithful,
    Pruned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Rational,
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SmoothArg {
    Softplus,
    Softmax,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compile a spline file into encoder weights.
    Compile {
        spline: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Mask every head; the spline must be autoregressive.
        #[arg(long)]
        masked: bool,
        /// Add skip connections to shape-preserving blocks.
        #[arg(long)]
        residual: bool,
        #[arg(long, default_value_t = DEFAULT_ROW_CAP)]
        row_cap: usize,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Evaluate weights on an input matrix.
    Eval {
        weights: PathBuf,
        x: PathBuf,
        /// Decoder input for encoder–decoder weights.
        #[arg(long)]
        y: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BackendArg::Rational)]
        backend: BackendArg,
    },
    /// Check weights against a spline on random rational inputs.
    Verify {
        weights: PathBuf,
        spline: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, env = "SPLINEFORMER_SEED", default_value_t = 42)]
        seed: u64,
    },
    /// Estimate the polynomial degree along random lines.
    Degree {
        weights: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Defaults to 3^blocks.
        #[arg(long)]
        bound: Option<u64>,
        /// Defaults to bound + 2.
        #[arg(long)]
        max_deg: Option<u32>,
        #[arg(long, env = "SPLINEFORMER_SEED", default_value_t = 42)]
        seed: u64,
    },
    /// Swap attention to a smooth activation and measure the change.
    Smooth {
        weights: PathBuf,
        #[arg(long, value_enum)]
        activation: SmoothArg,
        /// Comma-separated; `inf` means ReLU.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        betas: Vec<String>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, env = "SPLINEFORMER_SEED", default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Contract(_) => EXIT_CONTRACT,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Contract(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::TooLarge(_)
            | Error::ResourceCap { .. }
            | Error::NotAutoregressive { .. }
            | Error::DegreeTooHigh { .. }
            | Error::UnsupportedProduct(_)
            | Error::HiddenLayers(_) => CliError::Contract(msg),
            _ => CliError::Input(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, v: &Value) -> CliResult<()> {
    fs::write(path, pretty(v)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values print");
    s.push('\n');
    s
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Loaded weight file: a plain encoder or an encoder–decoder stack.
pub enum Weights {
    Encoder(Vec<EncoderBlock<Rational>>),
    EncDec(EncDecStack<Rational>),
}

pub fn load_weights(path: &Path) -> CliResult<Weights> {
    let v = read_json(path)?;
    let w = if v.get("stages").is_some() {
        let stack: EncDecStack<Rational> = serde_json::from_value(v).map_err(|e| parse_err(path, e))?;
        for b in &stack.encoder {
            b.validate()?;
        }
        for s in &stack.stages {
            s.beta.validate()?;
            s.gamma.validate()?;
            s.phi.validate()?;
        }
        Weights::EncDec(stack)
    } else {
        let blocks = v
            .get("blocks")
            .cloned()
            .ok_or_else(|| parse_err(path, "weight file needs \"blocks\" or \"stages\""))?;
        let blocks: Vec<EncoderBlock<Rational>> = serde_json::from_value(blocks).map_err(|e| parse_err(path, e))?;
        for b in &blocks {
            b.validate()?;
        }
        Weights::Encoder(blocks)
    };
    Ok(w)
}

fn load_matrix(path: &Path) -> CliResult<Mat<Rational>> {
    serde_json::from_value(read_json(path)?).map_err(|e| parse_err(path, e))
}

fn load_spline(path: &Path) -> CliResult<SplineGrid> {
    Ok(SplineGrid::from_json(&read_json(path)?)?)
}

fn encoder_model(w: Weights) -> CliResult<EncoderModel<Rational>> {
    match w {
        Weights::Encoder(b) => Ok(EncoderModel::new(b)?),
        Weights::EncDec(_) => Err(CliError::Input("this command needs encoder weights".into())),
    }
}

fn layout_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.layout.json"))
}

#[derive(Serialize)]
struct CompileReport {
    kind: &'static str,
    mode: &'static str,
    stages: usize,
    masked: bool,
    blocks: usize,
    heads: Vec<usize>,
    rows: Vec<usize>,
    hidden_units: Vec<usize>,
    depth: usize,
}

fn cmd_compile(spline: &Path, mode: Option<ModeArg>, masked: bool, residual: bool, row_cap: usize, output: &Path) -> CliResult<(Value, i32)> {
    let grid = load_spline(spline)?;
    let opts = CompileOptions {
        mode: mode.map(|m| match m {
            ModeArg::Faithful => Mode::Faithful,
            ModeArg::Pruned => Mode::Pruned,
        }),
        masked,
        residual,
        row_cap,
    };
    let compiled = compile_spline(&grid, &opts)?;
    write_file(output, &compiled.weights_json())?;
    write_file(&layout_path(output), &compiled.layout_json())?;
    let stats = compiled.stats();
    let report = CompileReport {
        kind: "compile",
        mode: compiled.mode.name(),
        stages: compiled.stages,
        masked: compiled.masked,
        blocks: stats.blocks,
        heads: stats.heads,
        rows: stats.rows,
        hidden_units: stats.hidden_units,
        depth: stats.depth,
    };
    Ok((report_json(&report), EXIT_OK))
}

fn cmd_eval(weights: &Path, x: &Path, y: Option<&Path>, backend: BackendArg) -> CliResult<(Value, i32)> {
    let w = load_weights(weights)?;
    let x = load_matrix(x)?;
    let y = y.map(load_matrix).transpose()?;
    let out = match (&w, y) {
        (Weights::Encoder(_), Some(_)) => return Err(CliError::Input("--y only applies to encoder-decoder weights".into())),
        (Weights::EncDec(_), None) => return Err(CliError::Input("encoder-decoder weights need --y".into())),
        (Weights::Encoder(blocks), None) => match backend {
            BackendArg::Rational => serde_json::to_value(crate::transformer::eval_encoder(blocks, &x)?),
            BackendArg::Float => {
                let fb: Vec<EncoderBlock<f64>> = blocks.iter().map(EncoderBlock::convert).collect();
                serde_json::to_value(crate::transformer::eval_encoder(&fb, &x.convert::<f64>())?)
            }
        },
        (Weights::EncDec(stack), Some(y)) => match backend {
            BackendArg::Rational => serde_json::to_value(crate::transformer::eval_encdec(stack, &x, &y)?),
            BackendArg::Float => {
                let fs: EncDecStack<f64> = stack.convert();
                serde_json::to_value(crate::transformer::eval_encdec(&fs, &x.convert::<f64>(), &y.convert::<f64>())?)
            }
        },
    };
    Ok((out.expect("matrices serialize"), EXIT_OK))
}

fn cmd_verify(weights: &Path, spline: &Path, samples: usize, seed: u64) -> CliResult<(Value, i32)> {
    let model = encoder_model(load_weights(weights)?)?;
    let grid = load_spline(spline)?;
    let report = oracle_equiv(&model, &grid, samples, seed)?;
    let code = if report.exact { EXIT_OK } else { EXIT_FAIL };
    Ok((report_json(&report), code))
}

fn cmd_degree(weights: &Path, trials: usize, bound: Option<u64>, max_deg: Option<u32>, seed: u64) -> CliResult<(Value, i32)> {
    let run = |m: &dyn DegreeTarget, default_bound: u64| -> CliResult<(Value, i32)> {
        let bound = bound.unwrap_or(default_bound);
        let max_deg = match max_deg {
            Some(d) => d,
            None => u32::try_from(bound.saturating_add(2)).map_err(|_| CliError::Contract(format!("degree bound {bound} is too large to probe")))?,
        };
        let report = m.estimate(max_deg, trials, seed, bound)?;
        let code = if report.bound_satisfied { EXIT_OK } else { EXIT_FAIL };
        Ok((report_json(&report), code))
    };
    match load_weights(weights)? {
        Weights::Encoder(blocks) => {
            let t = blocks.len();
            run(&EncoderModel::new(blocks)?, encoder_degree_bound(t))
        }
        Weights::EncDec(stack) => {
            let (s, t) = (stack.encoder.len(), stack.stages.len());
            run(&EncDecModel::new(stack)?, encdec_degree_bound(s, t))
        }
    }
}

trait DegreeTarget {
    fn estimate(&self, max_deg: u32, trials: usize, seed: u64, bound: u64) -> crate::Result<crate::verifier::DegreeReport>;
}

impl<M: Evaluable<Rational>> DegreeTarget for M {
    fn estimate(&self, max_deg: u32, trials: usize, seed: u64, bound: u64) -> crate::Result<crate::verifier::DegreeReport> {
        estimate_degree(self, max_deg, trials, seed, bound)
    }
}

fn parse_beta(s: &str) -> CliResult<f64> {
    let s = s.trim();
    if s == "inf" || s == "∞" {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>().map_err(|_| CliError::Input(format!("bad beta {s:?}")))
}

fn cmd_smooth(weights: &Path, activation: SmoothArg, betas: &[String], samples: usize, seed: u64) -> CliResult<(Value, i32)> {
    let model = encoder_model(load_weights(weights)?)?;
    let xs = to_float(&sample_matrices(seed, samples, model.n, model.p));
    match activation {
        SmoothArg::Softplus => {
            let betas = betas.iter().filter(|b| !b.trim().is_empty()).map(|b| parse_beta(b)).collect::<CliResult<Vec<_>>>()?;
            let table = smooth_convergence_table(&model.blocks, &xs, &betas)?;
            let mut v = report_json(&table);
            v["monotone"] = json!(table.is_monotone());
            v["within_bounds"] = json!(table.within_bounds());
            Ok((v, EXIT_OK))
        }
        SmoothArg::Softmax => {
            let swapped = smooth_swap(&model.blocks, Activation::Softmax)?;
            let report = softmax_check(&swapped, &xs)?;
            let code = if report.well_formed() { EXIT_OK } else { EXIT_FAIL };
            Ok((report_json(&report), code))
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<(Value, i32)> {
    match &cli.command {
        Command::Compile {
            spline,
            mode,
            masked,
            residual,
            row_cap,
            output,
        } => cmd_compile(spline, *mode, *masked, *residual, *row_cap, output),
        Command::Eval { weights, x, y, backend } => cmd_eval(weights, x, y.as_deref(), *backend),
        Command::Verify {
            weights,
            spline,
            samples,
            seed,
        } => cmd_verify(weights, spline, *samples, *seed),
        Command::Degree {
            weights,
            trials,
            bound,
            max_deg,
            seed,
        } => cmd_degree(weights, *trials, *bound, *max_deg, *seed),
        Command::Smooth {
            weights,
            activation,
            betas,
            samples,
            seed,
        } => cmd_smooth(weights, *activation, betas, *samples, *seed),
    }
}

/// Runs the parsed command, printing the report; returns the exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match dispatch(cli) {
        Ok((v, code)) => {
            let _ = out.write_all(pretty(&v).as_bytes());
            code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    execute(&cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
