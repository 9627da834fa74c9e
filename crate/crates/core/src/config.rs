//! Experiment configuration: TOML with dotted keys, `key=value` overrides and
//! the `S2D_SEED` environment override.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BitSetting;
use crate::regularizer::S2DConfig;
use crate::train::adamw::AdamWConfig;
use crate::train::model::{Loss, ModelSpec};
use crate::train::ptq::QuantSchemes;
use crate::train::task::SyntheticTask;

pub const SEED_ENV: &str = "S2D_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Baseline,
    S2d,
    Qat,
    QatS2d,
}

impl Regime {
    pub fn uses_s2d(self) -> bool {
        matches!(self, Regime::S2d | Regime::QatS2d)
    }

    pub fn uses_qat(self) -> bool {
        matches!(self, Regime::Qat | Regime::QatS2d)
    }
}

/// Bit widths at or above this value disable the corresponding QAT quantizer.
pub const PASSTHROUGH_BITS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    /// QAT weight bits; `64` is a passthrough.
    pub w_bits: u32,
    /// QAT activation bits; `64` is a passthrough.
    pub a_bits: u32,
    pub schemes: QuantSchemes,
    /// Settings evaluated with PTQ at the end of every run.
    pub eval: Vec<BitSetting>,
    /// Full-precision steps before QAT kicks in.
    pub warmup_steps: usize,
    /// Rows drawn from the calibration stream for PTQ activation ranges.
    pub calibration_samples: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            w_bits: 4,
            a_bits: 4,
            schemes: QuantSchemes::default(),
            eval: vec![
                BitSetting { w_bits: 8, a_bits: 8 },
                BitSetting { w_bits: 4, a_bits: 4 },
            ],
            warmup_steps: 0,
            calibration_samples: 4096,
        }
    }
}

/// Calibration batch drawn from the task generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Defaults to the task seed.
    pub seed: Option<u64>,
    pub batch_size: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            seed: None,
            batch_size: 256,
        }
    }
}

/// Cached-vs-fresh penalty tracking over one refresh window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StalenessConfig {
    pub enabled: bool,
    /// Index of the tracked window (steps `[w·m, (w+1)·m)`); defaults to the middle one.
    pub window: Option<usize>,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub seed: u64,
    pub steps: usize,
    pub log_interval: usize,
    pub batch_size: usize,
    pub loss: Loss,
    /// Multiplier on the task gradient; `0` gives a pure-penalty phase.
    pub task_loss_weight: f64,
    pub eval_samples: usize,
    /// Largest `k` reported by audits.
    pub audit_k_max: usize,
    pub task: SyntheticTask,
    pub model: ModelSpec,
    pub optimizer: AdamWConfig,
    pub s2d: S2DConfig,
    pub quant: QuantConfig,
    pub calibration: CalibrationSpec,
    pub staleness: StalenessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Baseline,
            seed: 0,
            steps: 5000,
            log_interval: 100,
            batch_size: 64,
            loss: Loss::Mse,
            task_loss_weight: 1.0,
            eval_samples: 4096,
            audit_k_max: 3,
            task: SyntheticTask::default(),
            model: ModelSpec::default(),
            optimizer: AdamWConfig::default(),
            s2d: S2DConfig::default(),
            quant: QuantConfig::default(),
            calibration: CalibrationSpec::default(),
            staleness: StalenessConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval: must be >= 1".into()));
        }
        if self.batch_size == 0
            || self.eval_samples == 0
            || self.calibration.batch_size == 0
            || self.quant.calibration_samples == 0
        {
            return Err(Error::Config(
                "batch_size, eval_samples, calibration.batch_size and quant.calibration_samples must be >= 1".into(),
            ));
        }
        if self.audit_k_max == 0 {
            return Err(Error::Config("audit_k_max: must be >= 1".into()));
        }
        if !self.task_loss_weight.is_finite() || self.task_loss_weight < 0.0 {
            return Err(Error::Config("task_loss_weight: must be finite and >= 0".into()));
        }
        self.task.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.s2d.validate()?;
        let dims = &self.model.dims;
        if dims[0] != self.task.input_dim || dims[dims.len() - 1] != self.task.output_dim {
            return Err(Error::Config(format!(
                "model.dims: endpoints {:?} must match task.input_dim {} and task.output_dim {}",
                (dims[0], dims[dims.len() - 1]),
                self.task.input_dim,
                self.task.output_dim
            )));
        }
        for bits in [self.quant.w_bits, self.quant.a_bits] {
            if bits < PASSTHROUGH_BITS && !(2..=8).contains(&bits) {
                return Err(Error::Config(format!(
                    "quant.w_bits/a_bits: allowed 2..=8 or 64 (passthrough), got {bits}"
                )));
            }
        }
        for s in &self.quant.eval {
            self.quant.schemes.at(*s).map_err(|e| Error::Config(format!("quant.eval: {e}")))?;
        }
        Ok(())
    }

    pub fn task_seed(&self) -> u64 {
        self.task.resolved_seed(self.seed)
    }

    pub fn calibration_seed(&self) -> u64 {
        self.calibration.seed.unwrap_or_else(|| self.task_seed())
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or the defaults when `path` is `None`), then applies
    /// overrides and `S2D_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: expected an unsigned integer, got {v:?}")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to a
/// bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `key=value` override.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?}: expected key=value")))?;
    set_dotted(table, k.trim(), parse_value(v.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_runnable_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "regime = \"s2d\"\ns2d.tau = 0.9\n[optimizer]\nlr = 0.01\n";
        let cfg = ExperimentConfig::from_toml_str(text, &["s2d.k_max=5".into(), "steps = 7".into()]).unwrap();
        assert_eq!(cfg.regime, Regime::S2d);
        assert_eq!(cfg.s2d.tau, 0.9);
        assert_eq!(cfg.s2d.k_max, 5);
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.optimizer.lr, 0.01);
    }

    #[test]
    fn override_beats_file() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3", &["seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_toml_str("s2d.bogus = 1", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("tau"), "{msg}");
    }

    #[test]
    fn bad_regime_lists_allowed_values() {
        let msg = ExperimentConfig::from_toml_str("regime = \"fast\"", &[])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("qat_s2d") && msg.contains("fast"), "{msg}");
    }

    #[test]
    fn bit_settings_parse_from_strings() {
        let cfg = ExperimentConfig::from_toml_str("quant.eval = [\"W2A2\"]", &[]).unwrap();
        assert_eq!(cfg.quant.eval, vec![BitSetting::new(2, 2).unwrap()]);
    }

    #[test]
    fn rejects_bad_bits() {
        assert!(ExperimentConfig::from_toml_str("quant.w_bits = 12", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("quant.w_bits = 64", &[]).is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.task.seed = Some(4);
        cfg.regime = Regime::QatS2d;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }
}
