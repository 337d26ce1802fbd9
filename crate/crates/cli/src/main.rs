//! `sta`: scriptable front end for mask analysis, block-sparse attention,
//! recall profiling, mask search, and loss evaluation.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, invalid
//! configurations, tolerance failures), 2 on I/O errors (missing or
//! malformed files). Every command's stdout payload is a single
//! newline-terminated JSON document unless a CSV format is selected.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sta_core::grid::Dims3;

/// Validation failures exit 1, I/O failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => write!(f, "{m}"),
        }
    }
}

impl From<sta_core::Error> for CliError {
    fn from(e: sta_core::Error) -> Self {
        match &e {
            sta_core::Error::Io(_) | sta_core::Error::TensorFormat(_) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("invalid JSON: {e}"))
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sta", version, about = "Sliding-tile attention toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). Results
    /// are independent of this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Grid flags shared by the mask and attention commands.
#[derive(Debug, Args)]
struct GridArgs {
    /// Token grid extents as t,h,w.
    #[arg(long)]
    dims: Dims3,
    /// Tile extents as t,h,w; must divide the dims componentwise.
    #[arg(long)]
    tile: Dims3,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify attention blocks and report counts and sparsity.
    MaskStats {
        #[command(flatten)]
        grid: GridArgs,
        /// Mask spec: a JSON file path, or inline JSON starting with '{'.
        #[arg(long)]
        mask: String,
        /// Include analytic block counts and their delta from enumeration
        /// (sliding-tile and neighborhood families only).
        #[arg(long)]
        analytic: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Render the block map as a binary PGM image (dense=0, mixed=128,
    /// empty=255; one pixel per block).
    MaskRender {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        mask: String,
        /// Output path for the PGM file.
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Run block-sparse attention over tensors in the STAT file format.
    /// Inputs are zigzag-ordered; the tile permutation is applied
    /// internally as the mask family requires.
    Attn {
        #[arg(long)]
        q: std::path::PathBuf,
        #[arg(long)]
        k: std::path::PathBuf,
        #[arg(long)]
        v: std::path::PathBuf,
        #[arg(long)]
        mask: String,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: std::path::PathBuf,
        /// Also run the double-precision dense oracle and compare.
        #[arg(long)]
        check_oracle: bool,
        /// Max-abs tolerance for --check-oracle.
        #[arg(long, default_value = "1e-5")]
        tol: f64,
    },
    /// Fraction of softmax mass inside each query's clamped local window.
    Recall {
        #[arg(long)]
        q: std::path::PathBuf,
        #[arg(long)]
        k: std::path::PathBuf,
        /// Token grid extents as t,h,w (rows are zigzag-ordered).
        #[arg(long)]
        dims: Dims3,
        /// Token-level window extents as t,h,w; odd per axis.
        #[arg(long)]
        window: Dims3,
    },
    /// Per-head recall statistics of a toy model across seeded prompts.
    RecallStats {
        /// Toy model config JSON.
        #[arg(long)]
        model: std::path::PathBuf,
        #[arg(long)]
        window: Dims3,
        /// Number of seeded prompts (at least 2).
        #[arg(long, default_value = "2")]
        prompts: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Per-head mask search over a toy model.
    Search {
        #[arg(long)]
        model: std::path::PathBuf,
        /// JSON array of mask specs, sparsest first, ending with the full
        /// mask.
        #[arg(long)]
        patterns: std::path::PathBuf,
        /// Strict MSE acceptance threshold.
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value = "3")]
        steps: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        /// Where to write the chosen-mask dictionary JSON.
        #[arg(long)]
        out: std::path::PathBuf,
        #[arg(long, default_value = "1")]
        inputs_per_step: usize,
        /// Keep accepted sparse masks while searching later heads instead
        /// of restoring to full.
        #[arg(long)]
        cumulative: bool,
        /// Treat delta as an absolute MSE instead of relative to the
        /// reference output's mean square.
        #[arg(long)]
        absolute: bool,
    },
    /// Evaluate one fine-tuning loss term.
    Loss {
        /// attn: per-layer student/teacher stacks; final: student/teacher
        /// matrices; data: --student is the model output, with --f and
        /// --x0 required.
        #[arg(long, value_enum)]
        kind: LossKind,
        #[arg(long)]
        student: std::path::PathBuf,
        #[arg(long)]
        teacher: Option<std::path::PathBuf>,
        #[arg(long)]
        f: Option<std::path::PathBuf>,
        #[arg(long)]
        x0: Option<std::path::PathBuf>,
        /// Weights alpha,beta,gamma; adds the term's weighted value to the
        /// output (alpha for data, beta for final, gamma for attn).
        #[arg(long)]
        weights: Option<String>,
    },
    /// Classify, estimate FLOPs, and time the executor against the oracle
    /// on seeded inputs. Wall times are informational only.
    Bench {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        mask: String,
        #[arg(long, default_value = "1")]
        heads: usize,
        #[arg(long, default_value = "64")]
        d: usize,
        /// Executor repetitions; 0 reports static fields only.
        #[arg(long, default_value = "0")]
        repeats: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
    },
    /// Write seeded standard-normal Q/K/V tensors in the STAT format.
    GenTensors {
        #[arg(long)]
        seed: u64,
        /// Sequence length (rows per head).
        #[arg(long)]
        n: usize,
        /// Head dimension (columns).
        #[arg(long)]
        d: usize,
        #[arg(long, default_value = "1")]
        heads: usize,
        /// Output directory for q.stat, k.stat, v.stat.
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, clap::ValueEnum)]
pub enum LossKind {
    Attn,
    Final,
    Data,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap's rendering includes usage; send help to stdout and
            // errors to stderr.
            if code == 0 {
                print!("{e}");
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(code);
        }
    };

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::MaskStats {
            grid,
            mask,
            analytic,
            format,
        } => commands::mask_stats(&grid, &mask, analytic, format),
        Command::MaskRender { grid, mask, out } => commands::mask_render(&grid, &mask, &out),
        Command::Attn {
            q,
            k,
            v,
            mask,
            grid,
            out,
            check_oracle,
            tol,
        } => commands::attn(&q, &k, &v, &mask, &grid, &out, check_oracle, tol),
        Command::Recall { q, k, dims, window } => commands::recall(&q, &k, dims, window),
        Command::RecallStats {
            model,
            window,
            prompts,
            seed,
            format,
        } => commands::recall_stats(&model, window, prompts, seed, format),
        Command::Search {
            model,
            patterns,
            delta,
            steps,
            seed,
            out,
            inputs_per_step,
            cumulative,
            absolute,
        } => commands::search(
            &model,
            &patterns,
            delta,
            steps,
            seed,
            &out,
            inputs_per_step,
            cumulative,
            absolute,
        ),
        Command::Loss {
            kind,
            student,
            teacher,
            f,
            x0,
            weights,
        } => commands::loss(kind, &student, teacher.as_deref(), f.as_deref(), x0.as_deref(), weights.as_deref()),
        Command::Bench {
            grid,
            mask,
            heads,
            d,
            repeats,
            seed,
        } => commands::bench(&grid, &mask, heads, d, repeats, seed),
        Command::GenTensors {
            seed,
            n,
            d,
            heads,
            out,
        } => commands::gen_tensors(seed, n, d, heads, &out),
    }
}
