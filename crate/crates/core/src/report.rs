//! Run reports, their canonical JSON encoding, and pairwise comparison.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::config::{ExperimentConfig, Regime};
use crate::diagnostics::{audit_factored, pcdr_spectral, AuditOptions};
use crate::error::{Error, Result};
use crate::linalg::svd_labeled;
use crate::train::model::ToyModel;
use crate::train::trainer::{layer_inputs, train, LogEntry, StalenessPoint, TrainOutcome, Workbench};

pub const REPORT_FORMAT: &str = "s2d-run-report";

/// Checked-in JSON schema every [`RunReport`] validates against.
pub const RUN_REPORT_SCHEMA: &str = include_str!("../schema/run_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub fp_eval_loss: f64,
    /// PTQ eval loss keyed by `W{w}A{a}`.
    pub quant_eval_loss: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub sigma_max: f64,
    /// Spectral `PCDR_k` for `k = 1..=audit_k_max`.
    pub pcdr_spectral: BTreeMap<String, Option<f64>>,
    /// Activation `PCDR_k` at the calibration argmax.
    pub pcdr_activation: BTreeMap<String, Option<f64>>,
    pub max_abs_activation: f64,
    pub selected: bool,
    pub k_hat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub config: ExperimentConfig,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    pub layers: Vec<LayerSummary>,
    pub series: Vec<LogEntry>,
    pub staleness: Vec<StalenessPoint>,
    pub refreshes: usize,
}

/// Per-layer summary of `model` on the calibration batch.
pub fn summarize_layers(
    model: &ToyModel,
    bench: &Workbench,
    k_max: usize,
    k_hat: &BTreeMap<String, Option<usize>>,
    selected: &[String],
) -> Result<Vec<LayerSummary>> {
    let inputs = layer_inputs(model, &bench.calibration)?;
    let opts = AuditOptions {
        k_max,
        top_percent: None,
    };
    model
        .weight_matrices()
        .into_iter()
        .map(|(name, _, w)| {
            let f = svd_labeled(w, &name)?;
            let audit = audit_factored(&name, w, &f, &inputs[&name], opts)?;
            let mut spectral = BTreeMap::new();
            for k in 1..=k_max.min(f.rank_bound()) {
                spectral.insert(k.to_string(), pcdr_spectral(&f.sigma, k)?);
            }
            let final_k = k_hat.get(&name).copied().flatten();
            Ok(LayerSummary {
                sigma_max: f.sigma_max(),
                pcdr_spectral: spectral,
                pcdr_activation: audit.pcdr,
                max_abs_activation: audit.max_abs_activation,
                selected: selected.contains(&name),
                k_hat: final_k,
                layer: name,
            })
        })
        .collect()
}

impl RunReport {
    pub fn build(cfg: &ExperimentConfig, bench: &Workbench, outcome: &TrainOutcome) -> Result<Self> {
        let report = Self {
            format: REPORT_FORMAT.to_string(),
            config: cfg.clone(),
            final_metrics: FinalMetrics {
                fp_eval_loss: bench.fp_eval_loss(&outcome.model, cfg)?,
                quant_eval_loss: bench.quant_eval_losses(&outcome.model, cfg)?,
            },
            layers: summarize_layers(&outcome.model, bench, cfg.audit_k_max, &outcome.k_hat, &outcome.selected)?,
            series: outcome.log.clone(),
            staleness: outcome.staleness.clone(),
            refreshes: outcome.refreshes,
        };
        report.check_finite()?;
        Ok(report)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSummary> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn selected_layers(&self) -> impl Iterator<Item = &LayerSummary> {
        self.layers.iter().filter(|l| l.selected)
    }

    /// Smallest cached-vs-fresh cosine, if tracked.
    pub fn min_staleness(&self) -> Option<f64> {
        self.staleness.iter().map(|p| p.cosine).reduce(f64::min)
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |what: String, v: f64| {
            if !v.is_finite() {
                bad.push(what);
            }
        };
        check("final.fp_eval_loss".into(), self.final_metrics.fp_eval_loss);
        for (k, v) in &self.final_metrics.quant_eval_loss {
            check(format!("final.quant_eval_loss.{k}"), *v);
        }
        for l in &self.layers {
            check(format!("layers.{}.sigma_max", l.layer), l.sigma_max);
            check(format!("layers.{}.max_abs_activation", l.layer), l.max_abs_activation);
            for v in l.pcdr_spectral.values().chain(l.pcdr_activation.values()).flatten() {
                check(format!("layers.{}.pcdr", l.layer), *v);
            }
        }
        for e in &self.series {
            check(format!("series[{}].task_loss", e.step), e.task_loss);
            for l in &e.layers {
                for v in [l.sigma_max, l.max_abs_activation, l.penalty_norm, l.s2d_loss] {
                    check(format!("series[{}].{}", e.step, l.layer), v);
                }
            }
        }
        for p in &self.staleness {
            check(format!("staleness[{}].{}", p.step, p.layer), p.cosine);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Diverged {
                step: self.config.steps,
                reason: format!("non-finite report fields: {}", bad.join(", ")),
            })
        }
    }

    /// Canonical JSON: sorted keys, two-space indent, reals with 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Logged series in long form, one row per (step, layer), for plotting.
    pub fn series_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
        w.write_record([
            "step",
            "task_loss",
            "layer",
            "sigma_max",
            "pcdr1_spectral",
            "pcdr1_activation",
            "max_abs_activation",
            "penalty_norm",
            "s2d_loss",
            "k_hat",
        ])
        .map_err(csv_error)?;
        for e in &self.series {
            for l in &e.layers {
                w.write_record([
                    e.step.to_string(),
                    format!("{:.16e}", e.task_loss),
                    l.layer.clone(),
                    format!("{:.16e}", l.sigma_max),
                    opt(l.pcdr1_spectral),
                    opt(l.pcdr1_activation),
                    format!("{:.16e}", l.max_abs_activation),
                    format!("{:.16e}", l.penalty_norm),
                    format!("{:.16e}", l.s2d_loss),
                    l.k_hat.map(|k| k.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_error)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Trains `cfg` and assembles its report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(TrainOutcome, RunReport)> {
    let bench = Workbench::new(cfg)?;
    let outcome = train(cfg, &bench)?;
    let report = RunReport::build(cfg, &bench, &outcome)?;
    Ok((outcome, report))
}

/// Pretty formatter that prints every `f64` in `{:.16e}` form.
struct CanonicalFormatter<'a>(PrettyFormatter<'a>);

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(w $(, $arg)*)
            }
        )*
    };
}

impl Formatter for CanonicalFormatter<'_> {
    forward!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );

    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
}

/// Serializes any value through `serde_json::Value` (sorted maps) with the canonical formatter.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter(PrettyFormatter::new()));
    v.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// One compared metric; `delta = a − b`, so for these lower-is-better metrics a
/// positive delta means B is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub criterion: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub kind: String,
    pub deltas: Vec<MetricDelta>,
    pub checks: Vec<DirectionCheck>,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let width = self.deltas.iter().map(|d| d.metric.len()).max().unwrap_or(6).max(6);
        let mut s = format!("comparison: {}\n", self.kind);
        s += &format!("{:<width$}  {:>14}  {:>14}  {:>14}\n", "metric", "A", "B", "A-B");
        for d in &self.deltas {
            s += &format!("{:<width$}  {:>14.6e}  {:>14.6e}  {:>+14.6e}\n", d.metric, d.a, d.b, d.delta);
        }
        if self.checks.is_empty() {
            s += "no acceptance directions apply to this pair\n";
        }
        for c in &self.checks {
            s += &format!("[{}] {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.criterion, c.detail);
        }
        s
    }
}

fn metrics(r: &RunReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("final.fp_eval_loss".to_string(), r.final_metrics.fp_eval_loss);
    for (k, v) in &r.final_metrics.quant_eval_loss {
        m.insert(format!("final.quant_eval_loss.{k}"), *v);
    }
    for l in &r.layers {
        m.insert(format!("layers.{}.sigma_max", l.layer), l.sigma_max);
        m.insert(format!("layers.{}.max_abs_activation", l.layer), l.max_abs_activation);
        for (k, v) in &l.pcdr_spectral {
            if let Some(v) = v {
                m.insert(format!("layers.{}.pcdr_spectral.{k}", l.layer), *v);
            }
        }
        for (k, v) in &l.pcdr_activation {
            if let Some(v) = v {
                m.insert(format!("layers.{}.pcdr_activation.{k}", l.layer), *v);
            }
        }
    }
    m
}

/// Fields that must agree for two reports to be comparable.
fn compat_fields(r: &RunReport) -> Vec<(&'static str, String)> {
    let c = &r.config;
    vec![
        ("seed", c.seed.to_string()),
        ("steps", c.steps.to_string()),
        ("task", format!("{:?}", c.task)),
        ("task_seed", c.task_seed().to_string()),
        ("model", format!("{:?}", c.model)),
        ("batch_size", c.batch_size.to_string()),
        ("eval_samples", c.eval_samples.to_string()),
        ("loss", format!("{:?}", c.loss)),
        ("calibration", format!("{:?}", c.calibration)),
        ("quant.eval", format!("{:?}", c.quant.eval)),
    ]
}

/// The paired-run claim a (A, B) regime combination tests, if any.
fn pair_kind(a: &ExperimentConfig, b: &ExperimentConfig) -> &'static str {
    match (a.regime, b.regime) {
        (Regime::Baseline, Regime::S2d) if b.s2d.pcdr_enabled => "baseline_vs_s2d",
        (Regime::Qat, Regime::QatS2d) => "qat_vs_qat_s2d",
        (Regime::S2d, Regime::S2d) if !a.s2d.pcdr_enabled && b.s2d.pcdr_enabled => "uniform_vs_selective",
        _ => "unpaired",
    }
}

pub const SIGMA_REDUCTION: f64 = 0.20;
pub const FP_TOLERANCE: f64 = 0.05;
pub const W8A8_TOLERANCE: f64 = 0.01;

fn lower_w4a4(a: &RunReport, b: &RunReport) -> DirectionCheck {
    let key = "W4A4";
    match (a.final_metrics.quant_eval_loss.get(key), b.final_metrics.quant_eval_loss.get(key)) {
        (Some(x), Some(y)) => DirectionCheck {
            criterion: "w4a4_lower".into(),
            pass: y < x,
            detail: format!("B {y:.6e} vs A {x:.6e}"),
        },
        _ => DirectionCheck {
            criterion: "w4a4_lower".into(),
            pass: false,
            detail: "W4A4 not evaluated in both reports".into(),
        },
    }
}

/// Deltas plus the acceptance directions that apply to this regime pair.
pub fn compare(a: &RunReport, b: &RunReport) -> Result<Comparison> {
    let mismatched: Vec<String> = compat_fields(a)
        .into_iter()
        .zip(compat_fields(b))
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.to_string())
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Incompatible(mismatched));
    }
    let (ma, mb) = (metrics(a), metrics(b));
    let deltas = ma
        .iter()
        .filter_map(|(k, &x)| {
            mb.get(k).map(|&y| MetricDelta {
                metric: k.clone(),
                a: x,
                b: y,
                delta: x - y,
            })
        })
        .collect();

    let kind = pair_kind(&a.config, &b.config);
    let mut checks = Vec::new();
    match kind {
        "baseline_vs_s2d" => {
            for l in b.selected_layers() {
                let Some(base) = a.layer(&l.layer) else { continue };
                let ratio = l.sigma_max / base.sigma_max;
                checks.push(DirectionCheck {
                    criterion: format!("{}.sigma_max_reduced", l.layer),
                    pass: ratio <= 1.0 - SIGMA_REDUCTION,
                    detail: format!("ratio {ratio:.4} (need <= {:.2})", 1.0 - SIGMA_REDUCTION),
                });
                let (p, q) = (l.pcdr_spectral.get("1").copied().flatten(), base.pcdr_spectral.get("1").copied().flatten());
                checks.push(DirectionCheck {
                    criterion: format!("{}.pcdr1_lower", l.layer),
                    pass: matches!((p, q), (Some(p), Some(q)) if p < q),
                    detail: format!("B {p:?} vs A {q:?}"),
                });
            }
            let (x, y) = (a.final_metrics.fp_eval_loss, b.final_metrics.fp_eval_loss);
            checks.push(DirectionCheck {
                criterion: "fp_loss_preserved".into(),
                pass: (y - x).abs() <= FP_TOLERANCE * x,
                detail: format!("B {y:.6e} vs A {x:.6e} (tol {:.0}%)", FP_TOLERANCE * 100.0),
            });
            checks.push(lower_w4a4(a, b));
            for (name, r) in [("A", a), ("B", b)] {
                if let Some(w8) = r.final_metrics.quant_eval_loss.get("W8A8") {
                    let fp = r.final_metrics.fp_eval_loss;
                    checks.push(DirectionCheck {
                        criterion: format!("{name}.w8a8_near_fp"),
                        pass: (w8 - fp).abs() <= W8A8_TOLERANCE * fp,
                        detail: format!("W8A8 {w8:.6e} vs fp {fp:.6e}"),
                    });
                }
            }
        }
        "qat_vs_qat_s2d" | "uniform_vs_selective" => checks.push(lower_w4a4(a, b)),
        _ => {}
    }
    Ok(Comparison {
        kind: kind.to_string(),
        deltas,
        checks,
    })
}
