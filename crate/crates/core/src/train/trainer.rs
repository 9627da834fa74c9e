//! Training loop for the baseline, S²D, QAT and QAT+S²D regimes.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::AdamWState;
use super::model::{backward, forward, predict, ActQuant, QuantContext, ToyModel};
use super::ptq::quantized_eval_loss;
use super::task::{make_spiked_task, SpikedTask};
use crate::config::{ExperimentConfig, PASSTHROUGH_BITS};
use crate::diagnostics::{audit_factored, pcdr_spectral, AuditOptions};
use crate::error::{Error, Result};
use crate::linalg::{svd_labeled, Matrix};
use crate::quant::QuantScheme;
use crate::regularizer::{
    add_penalty_in_place, s2d_loss_from_sigma, staleness_similarity, LayerSnapshot, PenaltyCache,
    RefreshScheduler, SelectionMode,
};

/// Stream id of the model initialization RNG.
const INIT_STREAM: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLog {
    pub layer: String,
    pub sigma_max: f64,
    pub pcdr1_spectral: Option<f64>,
    pub pcdr1_activation: Option<f64>,
    pub max_abs_activation: f64,
    /// `λ ‖G_reg‖_F` of the installed cache entry.
    pub penalty_norm: f64,
    /// Truncated S²D loss at the cached `k̂`.
    pub s2d_loss: f64,
    pub k_hat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Completed optimizer steps.
    pub step: usize,
    pub task_loss: f64,
    pub layers: Vec<LayerLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessPoint {
    pub step: usize,
    pub layer: String,
    pub cosine: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub log: Vec<LogEntry>,
    pub staleness: Vec<StalenessPoint>,
    /// Layers selected by at least one installed cache, in layer order.
    pub selected: Vec<String>,
    /// `k̂` per weight matrix in the last installed cache (empty without S²D).
    pub k_hat: BTreeMap<String, Option<usize>>,
    pub refreshes: usize,
}

/// Everything a run needs besides the model: task, eval and calibration batches.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub task: SpikedTask,
    pub eval_x: Matrix,
    pub eval_y: Matrix,
    /// Audit batch.
    pub calibration: Matrix,
    /// PTQ range-calibration batch.
    pub ptq_calibration: Matrix,
}

impl Workbench {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let task = make_spiked_task(&cfg.task, cfg.task_seed())?;
        let (eval_x, eval_y) = task.sample(&mut task.eval_stream(), cfg.eval_samples)?;
        let stream = task.calibration_stream(cfg.calibration_seed());
        let calibration = task.sample_inputs(&mut stream.clone(), cfg.calibration.batch_size);
        let ptq_calibration = task.sample_inputs(&mut stream.clone(), cfg.quant.calibration_samples);
        Ok(Self {
            task,
            eval_x,
            eval_y,
            calibration,
            ptq_calibration,
        })
    }

    pub fn fp_eval_loss(&self, model: &ToyModel, cfg: &ExperimentConfig) -> Result<f64> {
        let pred = predict(model, &self.eval_x, &QuantContext::default())?;
        cfg.loss.value(&pred, &self.eval_y)
    }

    /// PTQ eval loss per configured bit setting, keyed by `W{w}A{a}`.
    pub fn quant_eval_losses(&self, model: &ToyModel, cfg: &ExperimentConfig) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for s in &cfg.quant.eval {
            let (loss, _) = quantized_eval_loss(
                model,
                &cfg.quant.schemes,
                *s,
                &self.ptq_calibration,
                (&self.eval_x, &self.eval_y),
                cfg.loss,
            )?;
            out.insert(s.to_string(), loss);
        }
        Ok(out)
    }
}

/// Initial model for `cfg`; depends only on the experiment seed and model spec.
pub fn init_model(cfg: &ExperimentConfig) -> Result<ToyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    ToyModel::init(&cfg.model, &mut rng)
}

/// Inputs seen by each weight matrix on `batch`, rows are samples.
pub fn layer_inputs(model: &ToyModel, batch: &Matrix) -> Result<BTreeMap<String, Matrix>> {
    let (_, cache) = forward(model, batch, &QuantContext::default())?;
    let mut out = BTreeMap::new();
    if let (Some(xin), Some(ctx)) = (cache.attention_input(), cache.attention_context()) {
        for n in ["attn.q", "attn.k", "attn.v"] {
            out.insert(n.to_string(), xin.clone());
        }
        out.insert("attn.o".to_string(), ctx);
    }
    for (l, input) in model.layers.iter().zip(cache.layer_inputs()) {
        out.insert(l.name.clone(), input.clone());
    }
    Ok(out)
}

fn qat_context(cfg: &ExperimentConfig) -> QuantContext<'static> {
    let on = |bits: u32| bits < PASSTHROUGH_BITS;
    QuantContext {
        weights: on(cfg.quant.w_bits).then(|| cfg.quant.schemes.weights.with_bits(cfg.quant.w_bits)),
        acts: if on(cfg.quant.a_bits) {
            ActQuant::Dynamic(cfg.quant.schemes.activations.with_bits(cfg.quant.a_bits))
        } else {
            ActQuant::Off
        },
    }
}

fn snapshot(model: &ToyModel, cfg: &ExperimentConfig, bench: &Workbench) -> Vec<LayerSnapshot> {
    let inputs = match cfg.s2d.selection_mode {
        SelectionMode::Activation => layer_inputs(model, &bench.calibration).ok(),
        SelectionMode::Spectral => None,
    };
    model
        .weight_matrices()
        .into_iter()
        .map(|(name, _, w)| LayerSnapshot {
            calibration: inputs.as_ref().and_then(|m| m.get(&name).cloned()),
            name,
            weight: w.clone(),
        })
        .collect()
}

fn log_entry(
    model: &ToyModel,
    cfg: &ExperimentConfig,
    bench: &Workbench,
    cache: Option<&PenaltyCache>,
    step: usize,
    task_loss: f64,
) -> Result<LogEntry> {
    let inputs = layer_inputs(model, &bench.calibration)?;
    let opts = AuditOptions {
        k_max: 1,
        top_percent: None,
    };
    let mut layers = Vec::new();
    for (name, _, w) in model.weight_matrices() {
        let f = svd_labeled(w, &name)?;
        let audit = audit_factored(&name, w, &f, &inputs[&name], opts)?;
        let entry = cache.and_then(|c| c.get(&name));
        let k_hat = entry.and_then(|e| e.k_hat);
        let (penalty_norm, s2d_loss) = match (entry, k_hat) {
            (Some(e), Some(k)) => (
                cfg.s2d.lambda * e.g_reg.frobenius(),
                s2d_loss_from_sigma(&f.sigma, cfg.s2d.n, cfg.s2d.lambda, Some(k)),
            ),
            _ => (0.0, 0.0),
        };
        layers.push(LayerLog {
            sigma_max: f.sigma_max(),
            pcdr1_spectral: pcdr_spectral(&f.sigma, 1)?,
            pcdr1_activation: audit.pcdr_at(1),
            max_abs_activation: audit.max_abs_activation,
            penalty_norm,
            s2d_loss,
            k_hat,
            layer: name,
        });
    }
    Ok(LogEntry {
        step,
        task_loss,
        layers,
    })
}

fn staleness_window(cfg: &ExperimentConfig) -> Option<std::ops::Range<usize>> {
    if !cfg.staleness.enabled || !cfg.regime.uses_s2d() {
        return None;
    }
    let m = cfg.s2d.refresh_interval;
    let windows = cfg.steps / m;
    if windows == 0 {
        return None;
    }
    let w = cfg.staleness.window.unwrap_or(windows / 2).min(windows - 1);
    Some(w * m..(w + 1) * m)
}

fn record_staleness(
    model: &ToyModel,
    cfg: &ExperimentConfig,
    cache: &PenaltyCache,
    step: usize,
    out: &mut Vec<StalenessPoint>,
) -> Result<()> {
    for (name, _, w) in model.weight_matrices() {
        let Some(entry) = cache.get(&name) else { continue };
        let Some(k) = entry.k_hat else { continue };
        let fresh = svd_labeled(w, &name)?.truncated_reconstruct(k, cfg.s2d.n)?;
        if let Some(cosine) = staleness_similarity(&entry.g_reg, &fresh)? {
            out.push(StalenessPoint {
                step,
                layer: name,
                cosine,
            });
        }
    }
    Ok(())
}

/// Runs training and calls `observe` after every logged step with the current model.
pub fn train_with_observer(
    cfg: &ExperimentConfig,
    bench: &Workbench,
    mut observe: impl FnMut(&LogEntry, &ToyModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(cfg)?;
    let mut opt = AdamWState::new(cfg.optimizer.clone(), &model.params());
    let mut stream = bench.task.train_stream();
    let mut scheduler = cfg.regime.uses_s2d().then(|| {
        let w = model.weight_matrices();
        let layers: Vec<(&str, &Matrix)> = w.iter().map(|(n, _, m)| (n.as_str(), *m)).collect();
        RefreshScheduler::new(cfg.s2d.clone(), PenaltyCache::zeros(&layers))
    });
    let qat = qat_context(cfg);
    let fp = QuantContext::default();
    let window = staleness_window(cfg);
    let weight_slots: Vec<(String, usize)> = model
        .weight_matrices()
        .into_iter()
        .map(|(n, i, _)| (n, i))
        .collect();

    let mut log = Vec::new();
    let mut staleness = Vec::new();
    let mut ever_selected = BTreeSet::new();
    for step in 0..cfg.steps {
        if let Some(s) = scheduler.as_mut() {
            s.on_step_start(step, || snapshot(&model, cfg, bench));
            ever_selected.extend(s.cache().selected().map(|e| e.name.clone()));
        }
        let (x, y) = bench.task.sample(&mut stream, cfg.batch_size)?;
        let ctx = if cfg.regime.uses_qat() && step >= cfg.quant.warmup_steps {
            &qat
        } else {
            &fp
        };
        let (pred, cache) = forward(&model, &x, ctx)?;
        let task_loss = cfg.loss.value(&pred, &y)?;
        if !task_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("task loss is {task_loss}"),
            });
        }
        let mut lg = cfg.loss.gradient(&pred, &y)?;
        if cfg.task_loss_weight != 1.0 {
            lg = lg.scale(cfg.task_loss_weight);
        }
        let mut grads = backward(&model, &cache, &lg)?.grads;
        if let Some(s) = scheduler.as_ref() {
            for (name, idx) in &weight_slots {
                if let Some(entry) = s.cache().get(name) {
                    add_penalty_in_place(&mut grads[*idx], entry, cfg.s2d.lambda);
                }
            }
            if window.as_ref().is_some_and(|w| w.contains(&step)) {
                record_staleness(&model, cfg, s.cache(), step, &mut staleness)?;
            }
        }
        opt.step(&mut model.params_mut(), &grads)?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
        if (step + 1) % cfg.log_interval == 0 {
            let entry = log_entry(
                &model,
                cfg,
                bench,
                scheduler.as_ref().map(|s| s.cache()),
                step + 1,
                task_loss,
            )?;
            observe(&entry, &model);
            log.push(entry);
        }
    }
    let selected = weight_slots
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| ever_selected.contains(n))
        .collect();
    let (k_hat, refreshes) = match &scheduler {
        Some(s) => (
            s.cache().entries.iter().map(|e| (e.name.clone(), e.k_hat)).collect(),
            s.refresh_count(),
        ),
        None => (BTreeMap::new(), 0),
    };
    Ok(TrainOutcome {
        model,
        log,
        staleness,
        selected,
        k_hat,
        refreshes,
    })
}

pub fn train(cfg: &ExperimentConfig, bench: &Workbench) -> Result<TrainOutcome> {
    train_with_observer(cfg, bench, |_, _| {})
}

/// Activation scheme used by QAT at the configured bit width, if any.
pub fn qat_act_scheme(cfg: &ExperimentConfig) -> Option<QuantScheme> {
    match qat_context(cfg).acts {
        ActQuant::Dynamic(s) => Some(s),
        _ => None,
    }
}
