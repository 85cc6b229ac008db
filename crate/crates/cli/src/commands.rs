use std::fs;
use std::path::{Path, PathBuf};

use geodin::bench::{build_task, concept_split, corrupt, sweep, ClassGroup, DetectionReport, DetectionRow, ShiftSpec};
use geodin::calibration::{calibrate, calibrate_cv, CalibrationReport, CrossValidationReport, MeanStd};
use geodin::persistence::{
    fmt_sig6, load_model, parse_embeddings, read_report, save_model, write_report, ReportFormat,
};
use geodin::trainer::{train, EpochStats};
use geodin::Model;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// `<dir>/<stem>.config.toml` next to a CSV output.
pub fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.config.toml"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
    config: &RunConfig,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Data(format!("cannot encode {}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is UTF-8"))?;
    write_text(&sidecar(path), &config.to_toml())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        None => Ok(()),
    }
}

/// The configuration recorded in a checkpoint written by `train`, if any.
pub fn config_from_checkpoint(model: &Model) -> Option<RunConfig> {
    RunConfig::from_toml(&model.meta.provenance, "checkpoint").ok()
}

/// Trains on the configured task's training split and writes the
/// checkpoint and the per-epoch log.
pub fn cmd_train(config: &RunConfig, out: &Path, log: &Path) -> Result<Vec<EpochStats>, CliError> {
    let task = build_task(&config.task)?;
    let mut output = train(&config.train, &task.train)?;
    output.model.meta.provenance = config.to_toml();
    ensure_parent(out)?;
    save_model(&output.model, out)?;
    let rows = output.history.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            fmt_sig6(e.mean_loss),
            fmt_sig6(e.accuracy),
            fmt_sig6(e.lr),
        ]
    });
    write_csv(log, &["epoch", "mean_loss", "accuracy", "lr"], rows, config)?;
    Ok(output.history)
}

/// Runs the configured detection sweep and writes `<stem>.csv`,
/// `<stem>.json` and the CSV's config sidecar.
pub fn cmd_detect(
    config: &RunConfig,
    checkpoint: &Path,
    specs: Option<Vec<ShiftSpec>>,
    out_stem: &Path,
    jobs: usize,
) -> Result<DetectionReport, CliError> {
    let model = load_model(checkpoint)?;
    let task = build_task(&config.task)?;
    let specs = match specs {
        Some(s) => s,
        None => config.shifts.specs(&task)?,
    };
    let mut report = sweep(&model, &task, &config.shifts.scores, &specs, jobs)?;
    report.config = Some(config.to_json());
    ensure_parent(out_stem)?;
    write_report(&report, out_stem.with_extension("csv"), ReportFormat::Csv)?;
    write_report(&report, out_stem.with_extension("json"), ReportFormat::Json)?;
    write_text(&sidecar(&out_stem.with_extension("csv")), &config.to_toml())?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct CalibrationOutput {
    pub config: serde_json::Value,
    pub tuning_shift: Option<String>,
    #[serde(flatten)]
    pub report: CalibrationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_validation: Option<CrossValidationReport>,
}

/// Re-fits the alpha/beta heads on the validation split, optionally
/// corrupted by `tuning_shift`, and writes the new checkpoint plus
/// `<stem>.json` and `<stem>.csv` before/after reports.
pub fn cmd_calibrate(
    config: &RunConfig,
    checkpoint: &Path,
    tuning_shift: Option<ShiftSpec>,
    cross_validate: bool,
    out: &Path,
    report_stem: &Path,
) -> Result<CalibrationOutput, CliError> {
    let model = load_model(checkpoint)?;
    let task = build_task(&config.task)?;
    let tuning = match tuning_shift {
        Some(spec) => corrupt(&task.val, &spec)?,
        None => task.val.clone(),
    };
    let mut evals: Vec<(&str, &geodin::Dataset)> = Vec::new();
    if tuning_shift.is_some() {
        evals.push(("val", &task.val));
    }
    evals.push(("test", &task.test));
    let (mut calibrated, report) = calibrate(&model, &tuning, &evals, &config.calibrate)?;
    calibrated.meta.provenance = config.to_toml();
    let cross_validation = if cross_validate {
        Some(calibrate_cv(&model, &tuning, &config.calibrate)?)
    } else {
        None
    };
    ensure_parent(out)?;
    save_model(&calibrated, out)?;

    let rows = report.splits.iter().map(|s| {
        vec![
            s.split.clone(),
            fmt_sig6(s.before.accuracy),
            fmt_sig6(s.after.accuracy),
            fmt_sig6(s.before.ece),
            fmt_sig6(s.after.ece),
            fmt_sig6(s.before.nll),
            fmt_sig6(s.after.nll),
        ]
    });
    let header = [
        "split",
        "accuracy_before",
        "accuracy_after",
        "ece_before",
        "ece_after",
        "nll_before",
        "nll_after",
    ];
    write_csv(&report_stem.with_extension("csv"), &header, rows, config)?;
    let output = CalibrationOutput {
        config: config.to_json(),
        tuning_shift: tuning_shift.map(|s| s.to_string()),
        report,
        cross_validation,
    };
    let json = serde_json::to_string_pretty(&output).expect("calibration report serialises");
    write_text(&report_stem.with_extension("json"), &json)?;
    Ok(output)
}

/// One name per line; blank lines and lines starting with `#` are skipped.
pub fn read_names(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(CliError::Data(format!("{} lists no class names", path.display())));
    }
    Ok(names)
}

pub const SPLIT_HEADER: [&str; 7] = [
    "group",
    "mean_similarity",
    "std_similarity",
    "class",
    "token",
    "similarity",
    "nearest_id",
];

/// Groups OOD class names by their maximum embedding inner product with the ID
/// classes and writes one row per class with its group statistics.
pub fn cmd_splits(
    embeddings: &Path,
    id_names: &Path,
    ood_names: &Path,
    n_groups: usize,
    out: &Path,
) -> Result<Vec<ClassGroup>, CliError> {
    let emb = parse_embeddings(embeddings)?;
    let id = read_names(id_names)?;
    let ood = read_names(ood_names)?;
    let groups = concept_split(&id, &ood, &emb, n_groups)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(SPLIT_HEADER).map_err(fail)?;
    for g in &groups {
        for c in &g.classes {
            w.write_record([
                g.index.to_string(),
                fmt_sig6(g.mean_similarity),
                fmt_sig6(g.std_similarity),
                c.name.clone(),
                c.token.clone(),
                fmt_sig6(c.similarity),
                c.nearest_id.clone(),
            ])
            .map_err(fail)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_text(out, &String::from_utf8(bytes).expect("csv is UTF-8"))?;
    Ok(groups)
}

/// Concatenates detection reports, rejecting duplicate cells. With
/// `aggregate`, also writes per-cell mean and population std across seeds.
pub fn cmd_report_merge(inputs: &[PathBuf], out: &Path, aggregate: Option<&Path>) -> Result<DetectionReport, CliError> {
    let mut merged = DetectionReport::default();
    let mut configs = Vec::new();
    for path in inputs {
        let r = read_report(path)?;
        if let Some(c) = r.config {
            configs.push(c);
        }
        for row in r.rows {
            let dup = merged.rows.iter().any(|m| {
                m.score == row.score
                    && m.shift_kind == row.shift_kind
                    && m.severity == row.severity
                    && m.seed == row.seed
            });
            if dup {
                return Err(CliError::Data(format!(
                    "{} repeats the cell {} {}:{} seed {}",
                    path.display(),
                    row.score,
                    row.shift_kind,
                    row.severity,
                    row.seed
                )));
            }
            merged.rows.push(row);
        }
    }
    if !configs.is_empty() {
        merged.config = Some(serde_json::Value::Array(configs));
    }
    let format = if out.extension().is_some_and(|e| e == "json") {
        ReportFormat::Json
    } else {
        ReportFormat::Csv
    };
    ensure_parent(out)?;
    write_report(&merged, out, format)?;
    if let Some(path) = aggregate {
        write_aggregate(&merged.rows, path)?;
    }
    Ok(merged)
}

fn write_aggregate(rows: &[DetectionRow], path: &Path) -> Result<(), CliError> {
    let mut cells: Vec<(&DetectionRow, Vec<&DetectionRow>)> = Vec::new();
    for r in rows {
        match cells
            .iter_mut()
            .find(|(k, _)| k.score == r.score && k.shift_kind == r.shift_kind && k.severity == r.severity)
        {
            Some((_, members)) => members.push(r),
            None => cells.push((r, vec![r])),
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record([
        "score",
        "shift_kind",
        "severity",
        "auroc_mean",
        "auroc_std",
        "tnr_mean",
        "tnr_std",
        "n_seeds",
    ])
    .map_err(fail)?;
    for (key, members) in &cells {
        let auroc = MeanStd::of(&members.iter().map(|r| r.auroc).collect::<Vec<_>>());
        let tnr = MeanStd::of(&members.iter().map(|r| r.tnr_at_tpr95).collect::<Vec<_>>());
        w.write_record([
            key.score.to_string(),
            key.shift_kind.to_string(),
            key.severity.to_string(),
            fmt_sig6(auroc.mean),
            fmt_sig6(auroc.std),
            fmt_sig6(tnr.mean),
            fmt_sig6(tnr.std),
            members.len().to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is UTF-8"))
}
