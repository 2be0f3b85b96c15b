//! Command-line front end. Exit codes: 0 success, 1 operational failure,
//! 2 usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::KeyValues;
use crate::data::{generate_dataset, read_dataset, write_dataset, DatasetConfig, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{model_check, op_suite, CheckResult};
use crate::harness::{
    cross_validate, evaluate, load_model, read_trace_csv, summary_csv, train_to_dir, RunConfig,
    CHECKPOINT_FILE,
};
use crate::io_util::write_text;
use crate::metrics::{aggregate, metrics_csv, Summary};
use crate::model::ModelKind;
use crate::plot::loss_svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const GRADCHECK_CASES: usize = 20;
const GRADCHECK_SEED: u64 = 11;

#[derive(Debug, Parser)]
#[command(
    name = "tscnn",
    version,
    about = "Trident segmentation CNN with self-balancing focal loss"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads for folds and evaluation; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset (volume/mask pairs plus a manifest).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every volume of the configured dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset and write the metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-fold cross-validation with per-fold and pooled summaries.
    CrossValidate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference gradient checks of every op (and the full models with --full).
    Gradcheck {
        #[arg(long)]
        full: bool,
    },
    /// Render a trace CSV as an SVG loss chart.
    PlotLoss {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn thread_pool(jobs: Option<u16>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(usize::from(n));
    }
    b.build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))
}

fn print_summary(name: &str, s: &Summary) {
    println!(
        "{name}: dsc {:.4}  sensitivity {:.4}  specificity {:.4}  hausdorff {:.3} mm",
        s.dsc, s.sensitivity, s.specificity, s.hausdorff_mm
    );
}

fn print_checks(results: &[CheckResult]) -> bool {
    println!(
        "{:<32} {:>6} {:>12} {:>10}  status",
        "check", "cases", "max_abs_err", "tolerance"
    );
    for r in results {
        println!(
            "{:<32} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.cases,
            r.max_abs_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    results.iter().all(CheckResult::passed)
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    read_dataset(cfg.data_dir()?)
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = DatasetConfig::from_keys(KeyValues::read(&config)?)?;
            let samples = generate_dataset(&cfg)?;
            write_dataset(&out, &samples)?;
            println!(
                "wrote {} phantom volumes to {}",
                samples.len(),
                out.display()
            );
        }
        Command::Train { config } => {
            let cfg = RunConfig::read(&config)?;
            let out = cfg.out_dir()?.to_path_buf();
            let samples = load_samples(&cfg)?;
            let (_, trace) = train_to_dir(&cfg, &samples, &out)?;
            let last = trace
                .epoch_means()
                .last()
                .copied()
                .expect("at least one epoch");
            println!(
                "trained {} for {} steps; final epoch mean loss {:.6}; checkpoint {}",
                cfg.label(),
                trace.len(),
                last.total,
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let (cfg, model) = load_model(&checkpoint)?;
            let samples = read_dataset(&data)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let records =
                thread_pool(cli.jobs)?.install(|| evaluate(&model, &refs, cfg.image_size))?;
            write_text(&out, &metrics_csv(&records)?)?;
            print_summary(
                &format!("{} ({} slices)", cfg.label(), records.len()),
                &aggregate(&records)?,
            );
        }
        Command::CrossValidate { config } => {
            let cfg = RunConfig::read(&config)?;
            let out = cfg.out_dir()?.to_path_buf();
            let samples = load_samples(&cfg)?;
            let jobs = cli
                .jobs
                .map_or_else(rayon::current_num_threads, usize::from);
            let cv = cross_validate(&cfg, &samples, jobs)?;
            print!("{}", summary_csv(&cv.summary_rows(&cfg.label())));
            println!("wrote fold artifacts and summaries to {}", out.display());
        }
        Command::Gradcheck { full } => {
            let mut results = op_suite(GRADCHECK_CASES, GRADCHECK_SEED)?;
            if full {
                for kind in [ModelKind::ResidualUnet, ModelKind::TsCnn] {
                    results.push(model_check(kind, 2, 16, 3)?);
                }
            }
            if !print_checks(&results) {
                eprintln!("error: gradient check failed");
                return Ok(EXIT_FAILURE);
            }
        }
        Command::PlotLoss { trace, out, title } => {
            let rows = read_trace_csv(&trace)?;
            let title = title.unwrap_or_else(|| format!("Loss trace: {}", trace.display()));
            write_text(&out, &loss_svg(&rows, &title)?)?;
            println!("wrote {} ({} steps)", out.display(), rows.len());
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["tscnn"]), EXIT_USAGE);
        assert_eq!(main_with_args(["tscnn", "bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["tscnn", "train"]), EXIT_USAGE);
        assert_eq!(main_with_args(["tscnn", "gradcheck", "--fast"]), EXIT_USAGE);
        assert_eq!(
            main_with_args(["tscnn", "--jobs", "0", "gradcheck"]),
            EXIT_USAGE
        );
        assert_eq!(main_with_args(["tscnn", "--help"]), EXIT_OK);
    }

    #[test]
    fn operational_failures_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.cfg");
        let m = missing.to_str().unwrap();
        assert_eq!(
            main_with_args(["tscnn", "train", "--config", m]),
            EXIT_FAILURE
        );
        let bad = dir.path().join("bad.cfg");
        std::fs::write(&bad, "epochz = 3\n").unwrap();
        assert_eq!(
            main_with_args(["tscnn", "cross-validate", "--config", bad.to_str().unwrap()]),
            EXIT_FAILURE
        );
        let svg = dir.path().join("x.svg");
        assert_eq!(
            main_with_args([
                "tscnn",
                "plot-loss",
                "--trace",
                m,
                "--out",
                svg.to_str().unwrap()
            ]),
            EXIT_FAILURE
        );
        assert!(!svg.exists());
    }
}
