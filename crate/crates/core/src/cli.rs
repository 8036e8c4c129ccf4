//! `molakd` command line.
//!
//! Exit codes: 0 success, 1 verification failure (gradcheck or selftest),
//! 2 invalid config or usage, 3 non-finite loss, 4 I/O or checkpoint error,
//! 5 internal error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::autograd::{with_corrupted_backward, CorruptRule};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_model, GRADCHECK_EPS};
use crate::io::write_atomic;
use crate::losses::export_score_map;
use crate::selftest::run_selftest;
use crate::trainer::Trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ROUTING_FILE: &str = "routing_stats.csv";
pub const SCORE_FILE: &str = "score_maps.csv";
pub const FINAL_CHECKPOINT: &str = "final.hkpt";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "molakd", version, about = "Multi-teacher distillation into a routed low-rank student encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorruptArg {
    Matmul,
    Gelu,
    SoftmaxRows,
    LayerNorm,
}

impl From<CorruptArg> for CorruptRule {
    fn from(a: CorruptArg) -> Self {
        match a {
            CorruptArg::Matmul => CorruptRule::MatMul,
            CorruptArg::Gelu => CorruptRule::Gelu,
            CorruptArg::SoftmaxRows => CorruptRule::SoftmaxRows,
            CorruptArg::LayerNorm => CorruptRule::LayerNorm,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics, checkpoints, routing statistics and score maps.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, hide = true)]
        corrupt_backward: Option<CorruptArg>,
    },
    /// Expert-usage histogram of a checkpoint over the first `n` samples.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) | Error::UnknownParameter(_) => EXIT_IO,
        Error::ShapeMismatch { .. } | Error::IndexOutOfRange { .. } | Error::NotScalar(_) | Error::TapeConsumed => {
            EXIT_INTERNAL
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { config, out: dir, resume } => cmd_train(&config, &dir, resume.as_deref(), out),
        Command::Gradcheck {
            config,
            corrupt_backward,
        } => cmd_gradcheck(&config, corrupt_backward.map(Into::into), out),
        Command::RouteStats {
            checkpoint,
            config,
            samples,
            out: csv,
        } => cmd_route_stats(&checkpoint, &config, samples, &csv, out),
        Command::Selftest => Ok(cmd_selftest(out)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    cfg.apply_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_metrics(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Metrics lines of an earlier run that precede `step`.
fn previous_metrics(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["step"].as_u64().is_some_and(|s| s < step) {
            kept.push(line.to_string());
        }
    }
    Ok(kept)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.hkpt"))
}

pub fn cmd_train(config: &Path, dir: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(config)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut lines = Vec::new();
    if let Some(ckpt) = resume {
        trainer.load_checkpoint(ckpt)?;
        lines = previous_metrics(&metrics_path, trainer.step)?;
        writeln!(out, "resumed at step {}", trainer.step)?;
    }
    while trainer.step < cfg.steps {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                write_metrics(&metrics_path, &lines)?;
                writeln!(out, "aborted at step {}", trainer.step)?;
                return Err(e);
            }
        };
        lines.push(trainer.metrics_line(&report));
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.steps {
            trainer.save_checkpoint(&checkpoint_path(dir, trainer.step))?;
            write_metrics(&metrics_path, &lines)?;
        }
    }
    write_metrics(&metrics_path, &lines)?;
    trainer.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    let stats = trainer.route_stats(cfg.dataset_size)?;
    write_atomic(&dir.join(ROUTING_FILE), stats.to_csv().as_bytes())?;
    export_score_map(&trainer.score_maps(0)?, &dir.join(SCORE_FILE))?;
    if let Some(last) = lines.last() {
        writeln!(out, "{last}")?;
    }
    writeln!(out, "wrote {} metrics lines to {}", lines.len(), dir.display())?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(config: &Path, corrupt: Option<CorruptRule>, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(config)?;
    let report = match corrupt {
        Some(rule) => with_corrupted_backward(rule, || gradcheck_model(&cfg, GRADCHECK_EPS))?,
        None => gradcheck_model(&cfg, GRADCHECK_EPS)?,
    };
    for g in &report.groups {
        writeln!(
            out,
            "{:<20} elements={:<6} max_rel_error={:.3e} worst={} max_element_error={:.3e}",
            g.group.name(),
            g.elements,
            g.max_rel_error,
            g.worst,
            g.max_element_error
        )?;
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    writeln!(out, "{verdict} max_rel_error={:.3e} tolerance={:e}", report.max_rel_error(), report.tolerance)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

pub fn cmd_route_stats(ckpt: &Path, config: &Path, samples: usize, csv: &Path, out: &mut dyn Write) -> Result<i32> {
    if samples == 0 {
        return Err(Error::config("samples", "must be positive"));
    }
    let cfg = load_config(config)?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.load_checkpoint(ckpt)?;
    let stats = trainer.route_stats(samples)?;
    write_atomic(csv, stats.to_csv().as_bytes())?;
    writeln!(
        out,
        "routed {samples} samples; mean usage entropy {:.6}",
        stats.mean_usage_entropy()
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_selftest(out: &mut dyn Write) -> i32 {
    let results = run_selftest();
    for r in &results {
        let _ = writeln!(out, "{}", r.line());
    }
    if results.iter().all(|r| r.passed()) {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    }
}
