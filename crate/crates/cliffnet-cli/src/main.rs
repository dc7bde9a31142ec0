//! Command-line harness for training and auditing Clifford-equivariant
//! networks. Exit codes: 0 success, 1 validation/config error, 2 non-finite
//! numerics, 3 audit violation.

mod checkpoint;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AuditOpts, GenOpts};
use config::Task;

const CONFIG_HELP: &str = "\
TRAIN CONFIG FILE (key = value per line; '#' and ';' start comments;
[section] headers are allowed and ignored; unknown or duplicate keys
are rejected):

  task                regression | hull
  signature           p,q,r counts of generators squaring to +1, -1, 0
  train_csv           path to the training split (from `cliffnet gen`)
  test_csv            path to the held-out split
  seed                u64 controlling init and batch order     [default 0]
  epochs              passes over the training split           [required]
  batch_size          rows per optimizer step                  [default 32]
  lr                  Adam learning rate                       [default 0.003]
  lr_min              cosine-decay floor for the rate          [optional]
  channels            width of the hidden layers               [default 8]
  depth               mix/normalize/multiply blocks            [default 2]
  weight_decay        decoupled Adam weight decay              [default 0]
  scalar_gate_hidden  gate MLP width, 0 disables the gate      [default 16]
  stop_at_test_mse    stop early below this test MSE           [optional]
  baseline_hidden     coordinate-MLP baseline width, 0 skips   [default 0]
  out_dir             base directory for run outputs           [default runs]

Outputs land in {out_dir}/{config-hash}-s{seed}: manifest.txt,
metrics.jsonl, checkpoint.json, summary.json, and
baseline_metrics.jsonl when a baseline is trained. Identical config
and seed reproduce identical metrics.

EXIT CODES: 0 success, 1 validation error, 2 non-finite numerics,
3 audit violation.";

#[derive(Parser)]
#[command(
    name = "cliffnet",
    version,
    about = "Train and audit Clifford-equivariant networks over Cl(p,q,r)",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset: train.csv, test.csv, and a reproducibility manifest.
    Gen {
        /// Task family: regression | hull.
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 300)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Point dimension.
        #[arg(long, default_value_t = 5)]
        dim: usize,
        /// Points per hull sample (hull task only, must exceed dim).
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Monte-Carlo samples per hull volume when dim != 3.
        #[arg(long, default_value_t = 200_000)]
        n_mc: usize,
        /// Output directory [default: data/{task}-s{seed}].
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model described by a config file (see --help for the format).
    Train {
        /// Path to the run config.
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run; the config
        /// must match the checkpoint's architecture, and the metrics
        /// continue the earlier trace exactly.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Audit a checkpoint: equivariance under sampled group elements plus
    /// group-property spot checks. Exits 3 on any violation.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Group elements sampled per check.
        #[arg(long, default_value_t = 10)]
        n_trials: usize,
        /// Relative tolerance for every check.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Negative control: inject a symmetry-breaking constant after this
        /// layer index and expect the audit to localize it.
        #[arg(long)]
        break_layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rows in the random probe batch.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Report path [default: audit_report.json next to the checkpoint].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Factor a metric-preserving matrix into reflections and radical shears.
    Lift {
        /// Headerless CSV: n rows of n comma-separated entries.
        #[arg(long)]
        matrix: PathBuf,
        /// Algebra signature p,q,r; the matrix must be n x n with n = p+q+r.
        #[arg(long)]
        signature: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare parameter counts of type-grouped vs grade-wise layer stacks.
    BenchParams {
        #[arg(long)]
        signature: String,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        in_channels: usize,
        /// Scalar-gate hidden width for the type-grouped stack.
        #[arg(long, default_value_t = 0)]
        gate_hidden: usize,
    },
}

fn run(cmd: Cmd) -> cliffnet::Result<i32> {
    match cmd {
        Cmd::Gen { task, n_train, n_test, seed, dim, k, n_mc, out_dir } => {
            let task = Task::parse(&task)?;
            let out_dir = out_dir
                .unwrap_or_else(|| PathBuf::from(format!("data/{}-s{seed}", task.name())));
            commands::cmd_gen(&GenOpts { task, n_train, n_test, seed, dim, k, n_mc, out_dir })
        }
        Cmd::Train { config, resume } => commands::cmd_train(&config, resume.as_deref()),
        Cmd::Audit { checkpoint, n_trials, tol, break_layer, seed, batch, out } => {
            commands::cmd_audit(&AuditOpts { checkpoint, n_trials, tol, break_layer, seed, batch, out })
        }
        Cmd::Lift { matrix, signature, out } => {
            commands::cmd_lift(&matrix, &signature, out.as_deref())
        }
        Cmd::BenchParams { signature, channels, depth, in_channels, gate_hidden } => {
            commands::cmd_bench_params(&signature, in_channels, channels, depth, gate_hidden)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reserves 2 for usage errors; this tool uses 2 for
            // numerical failure, so usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                cliffnet::Error::NonFinite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
