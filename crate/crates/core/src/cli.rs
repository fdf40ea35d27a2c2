//! Command-line front end. The binary only forwards to [`run`].

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::sweep::checkpoint::EpochMetrics;
use crate::sweep::{self, ep_tool, report, ConfigFile, ResultsCsv, SweepOptions, TrialConfig, TrialData, TrialOptions, TrialStatus};

pub const DATA_DIR_ENV: &str = "ANALOG_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "analog-nn", version, about = "Train and sweep neural networks under simulated analog constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root (default: $ANALOG_DATA_DIR or ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Results CSV to append to.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Override a config field, e.g. `--set bits_w=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one trial.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint base path; resumes when a matching checkpoint exists.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every point of the config's [grid].
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Ask before running more than this many trials.
        #[arg(long, default_value_t = 64)]
        confirm_above: usize,
        /// Do not ask for confirmation.
        #[arg(long)]
        yes: bool,
        /// Print the grid size and exit.
        #[arg(long)]
        dry_run: bool,
        /// Directory for per-trial logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Convert between error probability and noise σ.
    EpTool {
        #[command(subcommand)]
        op: EpOp,
    },
    /// Summarize a results CSV.
    Report {
        csv: PathBuf,
        /// Config column to group by.
        #[arg(long)]
        by: Option<String>,
        /// Write plot data files here.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum EpOp {
    /// EP for a given σ.
    Ep {
        #[arg(long, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long)]
        bits: u32,
    },
    /// σ for a given EP.
    Sigma {
        #[arg(long, allow_negative_numbers = true)]
        ep: f64,
        #[arg(long)]
        bits: u32,
    },
    /// σ for each (bits, EP) pair.
    Table {
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        ep: Option<Vec<f64>>,
    },
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_config(common: &Common) -> Result<ConfigFile> {
    let mut file = ConfigFile::load(&common.config)?;
    file.override_base(&common.set)?;
    Ok(file)
}

fn print_epoch(cfg: &TrialConfig, epoch: u64, m: &EpochMetrics) {
    eprintln!(
        "[{}] epoch {}/{}: train_loss {:.4} eval_loss {:.4} eval_acc {:.2}",
        cfg.hash(),
        epoch + 1,
        cfg.epochs,
        m.train_loss,
        m.eval_loss,
        m.eval_acc
    );
}

fn train(common: Common, seed: Option<u64>, checkpoint: Option<PathBuf>, out: &mut dyn Write) -> Result<i32> {
    let file = load_config(&common)?;
    if file.trial_count() > 1 {
        return Err(Error::Config("config has a multi-point [grid]; use `sweep`".into()));
    }
    let mut cfg = file.expand()?.remove(0);
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let data = TrialData::for_config(&cfg, &data_dir(common.data_dir))?;
    let opts = TrialOptions {
        checkpoint,
        progress: Some(print_epoch),
        ..Default::default()
    };
    let r = sweep::run_trial(&cfg, &data, &opts)?;
    ResultsCsv::open(&common.out)?.append(&r)?;
    writeln!(
        out,
        "{} {}: max_eval_acc {:.2} official_test_acc {:.2} ({:.1}s)",
        r.config_hash,
        r.status.name(),
        r.max_eval_acc,
        r.official_test_acc,
        r.seconds
    )?;
    Ok(match r.status {
        TrialStatus::Ok => 0,
        TrialStatus::Diverged => 3,
        TrialStatus::Failed => 1,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    common: Common,
    jobs: usize,
    confirm_above: usize,
    yes: bool,
    dry_run: bool,
    log_dir: Option<PathBuf>,
    out: &mut dyn Write,
    input: &mut dyn BufRead,
) -> Result<i32> {
    let file = load_config(&common)?;
    let trials = file.expand()?;
    let axes: Vec<String> = file.grid().iter().map(|(k, v)| format!("{k}×{}", v.len())).collect();
    writeln!(out, "grid: {} trials ({})", trials.len(), if axes.is_empty() { "no axes".into() } else { axes.join(", ") })?;
    if dry_run {
        return Ok(0);
    }
    if trials.len() > confirm_above && !yes {
        write!(out, "run {} trials? [y/N] ", trials.len())?;
        out.flush()?;
        let mut answer = String::new();
        input.read_line(&mut answer)?;
        if !matches!(answer.trim(), "y" | "Y" | "yes") {
            writeln!(out, "aborted")?;
            return Ok(1);
        }
    }
    let opts = SweepOptions {
        jobs,
        data_dir: data_dir(common.data_dir),
        out: common.out,
        log_dir,
    };
    let s = sweep::run_sweep(&trials, &opts)?;
    writeln!(
        out,
        "done: {} ok, {} diverged, {} failed, {} already in {}",
        s.ok,
        s.diverged,
        s.failed,
        s.skipped,
        opts.out.display()
    )?;
    Ok(if s.diverged > 0 { 3 } else { 0 })
}

fn ep_tool_cmd(op: EpOp, out: &mut dyn Write) -> Result<i32> {
    let text = match op {
        EpOp::Ep { sigma, bits } => ep_tool::ep_text(sigma, bits)?,
        EpOp::Sigma { ep, bits } => ep_tool::sigma_text(ep, bits)?,
        EpOp::Table { bits, ep } => ep_tool::table_text(
            bits.as_deref().unwrap_or(&ep_tool::DEFAULT_TABLE_BITS),
            ep.as_deref().unwrap_or(&ep_tool::DEFAULT_TABLE_EPS),
        )?,
    };
    out.write_all(text.as_bytes())?;
    Ok(0)
}

fn report_cmd(csv: &Path, by: Option<&str>, plot_dir: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    out.write_all(report::report(csv, by, plot_dir)?.as_bytes())?;
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, input: &mut dyn BufRead) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                eprint!("{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { common, seed, checkpoint } => train(common, seed, checkpoint, out),
        Command::Sweep { common, jobs, confirm_above, yes, dry_run, log_dir } => {
            sweep_cmd(common, jobs, confirm_above, yes, dry_run, log_dir, out, input)
        }
        Command::EpTool { op } => ep_tool_cmd(op, out),
        Command::Report { csv, by, plot_dir } => report_cmd(&csv, by.as_deref(), plot_dir.as_deref(), out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
