use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geodin::bench::{ScoreName, ShiftSpec};
use geodin::persistence::load_model;
use geodin_cli::commands::{
    cmd_calibrate, cmd_detect, cmd_report_merge, cmd_splits, cmd_train, config_from_checkpoint,
};
use geodin_cli::{CliError, RunConfig};

/// Train, probe and calibrate decomposed-logit classifiers on synthetic
/// shift benchmarks.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
/// failure.
#[derive(Parser)]
#[command(name = "geodin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured task and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path [default: <output.dir>/model.godn]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log CSV [default: <output.dir>/train_log.csv]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score shifted test sets and write AUROC / TNR reports (CSV and JSON)
    Detect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint from `train` or `calibrate`; its recorded config applies when --config is absent
        checkpoint: PathBuf,
        /// Shift cells as kind:severity, or `none`; replaces the [shifts] list
        #[arg(long = "shift", value_name = "KIND:SEVERITY")]
        shifts: Vec<ShiftSpec>,
        /// Scores to evaluate, comma separated; replaces shifts.scores
        #[arg(long, value_delimiter = ',')]
        scores: Vec<ScoreName>,
        /// Output stem; `.csv` and `.json` are appended [default: <output.dir>/detect]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for sweep cells
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-fit the alpha/beta heads on the validation split
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint from `train` or `calibrate`; its recorded config applies when --config is absent
        checkpoint: PathBuf,
        /// Corrupt the tuning split with this shift (kind:severity)
        #[arg(long, value_name = "KIND:SEVERITY")]
        tuning_shift: Option<ShiftSpec>,
        /// Also report k-fold cross-validated calibration
        #[arg(long)]
        cv: bool,
        /// Calibrated checkpoint [default: <output.dir>/calibrated.godn]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report stem [default: <output.dir>/calibration]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Group OOD class names by embedding similarity to the ID classes
    Splits {
        /// Whitespace-separated embedding file: token then components
        #[arg(long)]
        embeddings: PathBuf,
        /// ID class names, one per line
        #[arg(long)]
        id_names: PathBuf,
        /// OOD class names, one per line
        #[arg(long)]
        ood_names: PathBuf,
        #[arg(long, default_value_t = 10)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge detection reports from several runs
    ReportMerge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Merged report; JSON if the extension is .json, CSV otherwise
        #[arg(long)]
        out: PathBuf,
        /// Also write per-cell mean and std across seeds to this CSV
        #[arg(long)]
        aggregate: Option<PathBuf>,
    },
}

/// File config if given, else the one recorded in `checkpoint`, else the
/// defaults; then the seed override.
fn resolve(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match (&common.config, checkpoint) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ckpt)) => config_from_checkpoint(&load_model(ckpt)?).unwrap_or_default(),
        (None, None) => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, out, log } => {
            let cfg = resolve(&common, None)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join("model.godn"));
            let log = log.unwrap_or_else(|| cfg.output.dir.join("train_log.csv"));
            let history = cmd_train(&cfg, &out, &log)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs: loss {:.4}, train accuracy {:.4}; wrote {}",
                    history.len(),
                    last.mean_loss,
                    last.accuracy,
                    out.display()
                );
            }
        }
        Command::Detect {
            common,
            checkpoint,
            shifts,
            scores,
            out,
            jobs,
        } => {
            let mut cfg = resolve(&common, Some(&checkpoint))?;
            if !scores.is_empty() {
                cfg.shifts.scores = scores;
            }
            let out = out.unwrap_or_else(|| cfg.output.dir.join("detect"));
            let specs = (!shifts.is_empty()).then_some(shifts);
            let report = cmd_detect(&cfg, &checkpoint, specs, &out, jobs)?;
            println!("{} rows written to {}.{{csv,json}}", report.rows.len(), out.display());
        }
        Command::Calibrate {
            common,
            checkpoint,
            tuning_shift,
            cv,
            out,
            report,
        } => {
            let cfg = resolve(&common, Some(&checkpoint))?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join("calibrated.godn"));
            let report = report.unwrap_or_else(|| cfg.output.dir.join("calibration"));
            let result = cmd_calibrate(&cfg, &checkpoint, tuning_shift, cv, &out, &report)?;
            let t = &result.report.splits[0];
            println!(
                "tuning ECE {:.4} -> {:.4}, NLL {:.4} -> {:.4}; wrote {}",
                t.before.ece,
                t.after.ece,
                t.before.nll,
                t.after.nll,
                out.display()
            );
        }
        Command::Splits {
            embeddings,
            id_names,
            ood_names,
            groups,
            out,
        } => {
            let groups = cmd_splits(&embeddings, &id_names, &ood_names, groups, &out)?;
            for g in &groups {
                println!(
                    "group {}: {} classes, similarity {:.4} ± {:.4}",
                    g.index,
                    g.classes.len(),
                    g.mean_similarity,
                    g.std_similarity
                );
            }
        }
        Command::ReportMerge { inputs, out, aggregate } => {
            let merged = cmd_report_merge(&inputs, &out, aggregate.as_deref())?;
            println!("merged {} rows into {}", merged.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
