use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use s2d_core::audit::audit_checkpoint;
use s2d_core::checkpoint::Checkpoint;
use s2d_core::config::ExperimentConfig;
use s2d_core::diagnostics::{AuditOptions, PcdrReport};
use s2d_core::quant::BitSetting;
use s2d_core::report::{compare as compare_reports, run_experiment, to_canonical_json, RunReport};
use s2d_core::sweep::{expand, run_cells, summary_csv, GridAxis};
use s2d_core::train::{quantized_eval_loss, Workbench};
use serde::Serialize;

use crate::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.s2d";
pub const REPORT_FILE: &str = "report.json";
pub const SERIES_FILE: &str = "series.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn load(config: Option<PathBuf>, set: &[String]) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(config.as_deref(), set)?)
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub struct AuditArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub k_max: usize,
    pub calib_seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub top_percent: Option<f64>,
    pub tensors: Vec<String>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct AuditReport {
    format: &'static str,
    checkpoint: String,
    calibration_seed: u64,
    batch_size: usize,
    k_max: usize,
    layers: Vec<PcdrReport>,
}

pub fn audit(args: AuditArgs) -> Result<(), Failure> {
    let mut cfg = load(args.config, &args.set)?;
    if let Some(s) = args.calib_seed {
        cfg.calibration.seed = Some(s);
    }
    if let Some(b) = args.batch_size {
        cfg.calibration.batch_size = b;
    }
    if args.k_max == 0 {
        return Err(Failure::Usage("--k-max must be at least 1".into()));
    }
    if let Some(p) = args.top_percent {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Failure::Usage("--top-percent must be in (0, 100]".into()));
        }
    }
    cfg.validate()?;
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let opts = AuditOptions {
        k_max: args.k_max,
        top_percent: args.top_percent,
    };
    let layers = audit_checkpoint(&ckpt, &cfg, opts, &args.tensors)?;
    let report = AuditReport {
        format: "s2d-audit-report",
        checkpoint: args.checkpoint.display().to_string(),
        calibration_seed: cfg.calibration_seed(),
        batch_size: cfg.calibration.batch_size,
        k_max: args.k_max,
        layers,
    };
    emit(&to_canonical_json(&report)?, args.out.as_deref())
}

pub fn train(config: Option<PathBuf>, set: &[String], out_dir: &Path) -> Result<(), Failure> {
    let cfg = load(config, set)?;
    let (outcome, report) = run_experiment(&cfg)?;
    report.check_finite()?;
    fs::create_dir_all(out_dir)?;
    Checkpoint::from_model(&outcome.model).write(&out_dir.join(CHECKPOINT_FILE))?;
    fs::write(out_dir.join(REPORT_FILE), report.to_json()?)?;
    fs::write(out_dir.join(SERIES_FILE), report.series_csv()?)?;
    eprintln!(
        "{} regime, {} steps: fp eval loss {:.6e}; wrote {}",
        serde_json_str(&cfg.regime),
        cfg.steps,
        report.final_metrics.fp_eval_loss,
        out_dir.display()
    );
    Ok(())
}

fn serde_json_str<T: Serialize>(v: &T) -> String {
    to_canonical_json(v)
        .map(|s| s.trim().trim_matches('"').to_string())
        .unwrap_or_default()
}

pub struct QuantizeArgs {
    pub checkpoint: PathBuf,
    pub bits: String,
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub calib_seed: Option<u64>,
    pub calib_samples: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct QuantizeReport {
    format: &'static str,
    checkpoint: String,
    bits: String,
    fp_eval_loss: f64,
    quant_eval_loss: f64,
    relative_gap: f64,
    eval_samples: usize,
    calibration_samples: usize,
    weight_mse: BTreeMap<String, f64>,
}

pub fn quantize(args: QuantizeArgs) -> Result<(), Failure> {
    let setting: BitSetting = args.bits.parse()?;
    let mut cfg = load(args.config, &args.set)?;
    if let Some(s) = args.calib_seed {
        cfg.calibration.seed = Some(s);
    }
    if let Some(n) = args.calib_samples {
        cfg.quant.calibration_samples = n;
    }
    cfg.validate()?;
    let model = Checkpoint::read(&args.checkpoint)?.to_model(cfg.model.hidden_activation)?;
    let bench = Workbench::new(&cfg)?;
    let fp = bench.fp_eval_loss(&model, &cfg)?;
    let (q, qm) = quantized_eval_loss(
        &model,
        &cfg.quant.schemes,
        setting,
        &bench.ptq_calibration,
        (&bench.eval_x, &bench.eval_y),
        cfg.loss,
    )?;
    let report = QuantizeReport {
        format: "s2d-quant-report",
        checkpoint: args.checkpoint.display().to_string(),
        bits: setting.to_string(),
        fp_eval_loss: fp,
        quant_eval_loss: q,
        relative_gap: if fp > 0.0 { q / fp - 1.0 } else { 0.0 },
        eval_samples: cfg.eval_samples,
        calibration_samples: cfg.quant.calibration_samples,
        weight_mse: qm.weight_mse,
    };
    emit(&to_canonical_json(&report)?, args.out.as_deref())
}

pub fn compare(a: &Path, b: &Path, json: Option<&Path>) -> Result<(), Failure> {
    let ra = RunReport::from_json(&fs::read_to_string(a)?)?;
    let rb = RunReport::from_json(&fs::read_to_string(b)?)?;
    let cmp = compare_reports(&ra, &rb)?;
    print!("{}", cmp.to_text());
    if let Some(p) = json {
        fs::write(p, to_canonical_json(&cmp)?)?;
    }
    if cmp.passed() {
        Ok(())
    } else {
        Err(Failure::Directions)
    }
}

pub fn sweep(
    config: Option<PathBuf>,
    set: &[String],
    grid: &[String],
    out_dir: &Path,
    jobs: usize,
) -> Result<(), Failure> {
    let base = load(config, set)?;
    let axes = grid
        .iter()
        .map(|g| g.parse::<GridAxis>())
        .collect::<Result<Vec<_>, _>>()?;
    let cells = expand(&base, &axes)?;
    let reports = run_cells(&cells, jobs)?;
    fs::create_dir_all(out_dir)?;
    for (cell, r) in cells.iter().zip(&reports) {
        r.check_finite()?;
        fs::write(out_dir.join(format!("cell-{:03}.json", cell.index)), r.to_json()?)?;
    }
    fs::write(out_dir.join(SUMMARY_FILE), summary_csv(&axes, &cells, &reports)?)?;
    eprintln!("{} cells; wrote {}", cells.len(), out_dir.display());
    Ok(())
}
