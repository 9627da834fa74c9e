//! Selective spectral decay.
//!
//! The penalty `λ/(n+1) · Σ σ_i^{n+1}` has gradient `λ · U Σⁿ Vᵀ`, which bears down
//! hardest on the largest singular values. During training the gradient is cached
//! per layer and refreshed every `refresh_interval` steps; only the top `k̂`
//! components picked by the dominance-ratio test are penalized, and layers whose
//! spectrum is not concentrated receive nothing.

use std::thread::JoinHandle;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{pcdr_activation, pcdr_spectral};
use crate::error::{Error, Result};
use crate::linalg::{dot, svd_labeled, Matrix, SvdFactors};

/// Singular values within this relative distance of `σ_k̂` are pulled into the selection.
pub const TIE_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Dominance ratio of the singular values alone.
    #[default]
    Spectral,
    /// Dominance ratio of the largest calibration activation.
    Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S2DConfig {
    /// Power `n` applied to the singular values in the gradient.
    pub n: f64,
    /// Strength `λ`.
    pub lambda: f64,
    /// Dominance threshold `τ`.
    pub tau: f64,
    pub k_max: usize,
    /// Steps between spectral refreshes (`m`).
    pub refresh_interval: usize,
    /// How many steps ahead of a due refresh its computation starts.
    pub lookahead: usize,
    pub selection_mode: SelectionMode,
    /// `false` regularizes every component of every layer uniformly.
    pub pcdr_enabled: bool,
    /// Compute lookahead refreshes on a worker thread.
    pub background: bool,
}

impl Default for S2DConfig {
    fn default() -> Self {
        Self {
            n: 2.0,
            lambda: 5e-4,
            tau: 0.95,
            k_max: 3,
            refresh_interval: 100,
            lookahead: 3,
            selection_mode: SelectionMode::Spectral,
            pcdr_enabled: true,
            background: false,
        }
    }
}

impl S2DConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("s2d.{field}: {msg}")));
        if !(self.n > 1.0) || !self.n.is_finite() {
            return bad("n", "must be a finite real > 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", "must be a finite real >= 0");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if self.k_max == 0 {
            return bad("k_max", "must be a positive integer");
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval", "must be a positive integer");
        }
        if self.lookahead >= self.refresh_interval {
            return bad("lookahead", "must be smaller than refresh_interval");
        }
        Ok(())
    }
}

/// `(λ/2)·‖W‖_F²`.
pub fn l2_loss(w: &Matrix, lambda: f64) -> f64 {
    0.5 * lambda * w.frobenius_sq()
}

/// `λ/(n+1) · Σ_i σ_i^{n+1}` over all singular values.
pub fn s2d_loss(w: &Matrix, n: f64, lambda: f64) -> Result<f64> {
    let f = svd_labeled(w, "s2d loss")?;
    Ok(s2d_loss_from_sigma(&f.sigma, n, lambda, None))
}

/// Penalty value from a spectrum, optionally restricted to the top `k` values.
pub fn s2d_loss_from_sigma(sigma: &[f64], n: f64, lambda: f64, k: Option<usize>) -> f64 {
    let k = k.unwrap_or(sigma.len()).min(sigma.len());
    lambda / (n + 1.0) * sigma[..k].iter().map(|s| s.powf(n + 1.0)).sum::<f64>()
}

/// `tr((U Σⁿ Vᵀ)ᵀ W)`, the trace form of the unscaled penalty.
pub fn trace_form(w: &Matrix, f: &SvdFactors, n: f64) -> Result<f64> {
    let wn = f.truncated_reconstruct(f.rank_bound(), n)?;
    // tr(AᵀB) = Σ_ij A_ij B_ij
    if wn.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "trace_form",
            lhs: format!("{:?}", wn.shape()),
            rhs: format!("{:?}", w.shape()),
        });
    }
    Ok(dot(wn.data(), w.data()))
}

/// `λ · Σ_{r<k} σ_r^n u_r v_rᵀ`; all components when `k` is `None`.
pub fn s2d_gradient(f: &SvdFactors, n: f64, lambda: f64, k: Option<usize>) -> Result<Matrix> {
    let k = k.unwrap_or(f.rank_bound());
    Ok(f.truncated_reconstruct(k, n)?.scale(lambda))
}

/// Input to [`select_rank`].
#[derive(Debug, Clone, Copy)]
pub enum SelectionInput<'a> {
    Spectrum(&'a [f64]),
    /// Factors of the layer weight plus a calibration batch (rows are samples).
    Activations {
        factors: &'a SvdFactors,
        calibration: &'a Matrix,
    },
}

impl SelectionInput<'_> {
    fn sigma(&self) -> &[f64] {
        match self {
            SelectionInput::Spectrum(s) => s,
            SelectionInput::Activations { factors, .. } => &factors.sigma,
        }
    }
}

/// Smallest `k ≤ k_max` whose dominance ratio reaches `τ`, widened over ties at
/// the boundary. `None` marks a healthy layer.
pub fn select_rank(input: SelectionInput<'_>, cfg: &S2DConfig) -> Result<Option<usize>> {
    let sigma = input.sigma();
    let big_n = sigma.len();
    if big_n == 0 {
        return Ok(None);
    }
    if !cfg.pcdr_enabled {
        return Ok(Some(big_n));
    }
    let k_top = cfg.k_max.min(big_n);
    let ratios: Vec<Option<f64>> = match input {
        SelectionInput::Spectrum(s) => (1..=k_top)
            .map(|k| pcdr_spectral(s, k))
            .collect::<Result<_>>()?,
        SelectionInput::Activations {
            factors,
            calibration,
        } => {
            let Some((i, j)) = argmax_activation(factors, calibration)? else {
                return Ok(None);
            };
            (1..=k_top)
                .map(|k| pcdr_activation(factors, calibration.row(j), i, k))
                .collect::<Result<_>>()?
        }
    };
    if ratios.iter().any(Option::is_none) {
        warn!("undefined dominance ratio; treating layer as healthy");
        return Ok(None);
    }
    let Some(k) = ratios
        .iter()
        .position(|r| r.is_some_and(|v| v >= cfg.tau))
        .map(|p| p + 1)
    else {
        return Ok(None);
    };
    Ok(Some(expand_ties(sigma, k)))
}

fn expand_ties(sigma: &[f64], k: usize) -> usize {
    let boundary = sigma[k - 1];
    let mut k = k;
    while k < sigma.len() && (boundary - sigma[k]).abs() <= TIE_RTOL * boundary {
        k += 1;
    }
    k
}

fn argmax_activation(f: &SvdFactors, calibration: &Matrix) -> Result<Option<(usize, usize)>> {
    if calibration.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let w = f.reconstruct();
    let acts = calibration.matmul_t(&w)?;
    let mut best = (0.0f64, None);
    for j in 0..acts.rows() {
        for (i, a) in acts.row(j).iter().enumerate() {
            if a.abs() > best.0 {
                best = (a.abs(), Some((i, j)));
            }
        }
    }
    Ok(best.1)
}

/// One layer's cached penalty matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub name: String,
    pub g_reg: Matrix,
    pub k_hat: Option<usize>,
    pub computed_at_step: usize,
}

impl CacheEntry {
    pub fn empty(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            g_reg: Matrix::zeros(rows, cols),
            k_hat: None,
            computed_at_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PenaltyCache {
    pub entries: Vec<CacheEntry>,
}

impl PenaltyCache {
    /// All-zero cache shaped like `layers`.
    pub fn zeros(layers: &[(&str, &Matrix)]) -> Self {
        Self {
            entries: layers
                .iter()
                .map(|(name, w)| CacheEntry::empty(*name, w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CacheEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn selected(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter().filter(|e| e.k_hat.is_some())
    }
}

/// Weight snapshot of one layer for a refresh.
#[derive(Debug, Clone)]
pub struct LayerSnapshot {
    pub name: String,
    pub weight: Matrix,
    /// Layer inputs (rows are samples); required in activation selection mode.
    pub calibration: Option<Matrix>,
}

/// Self-contained refresh computation over owned snapshots.
#[derive(Debug, Clone)]
pub struct RefreshJob {
    pub layers: Vec<LayerSnapshot>,
    pub cfg: S2DConfig,
    pub step: usize,
}

/// Result of one layer's refresh; `Err` keeps the previous entry at install time.
pub type LayerOutcome = std::result::Result<CacheEntry, String>;

impl RefreshJob {
    pub fn run(&self) -> Vec<LayerOutcome> {
        self.layers
            .iter()
            .map(|l| refresh_layer(l, &self.cfg, self.step).map_err(|e| e.to_string()))
            .collect()
    }
}

fn refresh_layer(layer: &LayerSnapshot, cfg: &S2DConfig, step: usize) -> Result<CacheEntry> {
    let f = svd_labeled(&layer.weight, &layer.name)?;
    let input = match (cfg.selection_mode, &layer.calibration) {
        (SelectionMode::Activation, Some(c)) => SelectionInput::Activations {
            factors: &f,
            calibration: c,
        },
        (SelectionMode::Activation, None) => {
            return Err(Error::MissingCalibration(layer.name.clone()))
        }
        (SelectionMode::Spectral, _) => SelectionInput::Spectrum(&f.sigma),
    };
    let k_hat = select_rank(input, cfg)?;
    let g_reg = match k_hat {
        Some(k) => f.truncated_reconstruct(k, cfg.n)?,
        None => Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
    };
    Ok(CacheEntry {
        name: layer.name.clone(),
        g_reg,
        k_hat,
        computed_at_step: step,
    })
}

/// Merges refresh outcomes into a new cache; failed layers keep their previous entry.
pub fn install(previous: &PenaltyCache, outcomes: Vec<LayerOutcome>) -> PenaltyCache {
    let entries = outcomes
        .into_iter()
        .enumerate()
        .map(|(idx, outcome)| match outcome {
            Ok(entry) => entry,
            Err(msg) => {
                warn!("spectral refresh failed, keeping stale penalty: {msg}");
                previous.entries[idx].clone()
            }
        })
        .collect();
    PenaltyCache { entries }
}

/// Recomputes every layer's penalty from the current weights.
pub fn refresh_cache(
    layers: &[(&str, &Matrix)],
    cfg: &S2DConfig,
    step: usize,
    previous: Option<&PenaltyCache>,
) -> PenaltyCache {
    let job = RefreshJob {
        layers: layers
            .iter()
            .map(|(name, w)| LayerSnapshot {
                name: name.to_string(),
                weight: (*w).clone(),
                calibration: None,
            })
            .collect(),
        cfg: cfg.clone(),
        step,
    };
    let zeros;
    let previous = match previous {
        Some(p) => p,
        None => {
            zeros = PenaltyCache::zeros(layers);
            &zeros
        }
    };
    install(previous, job.run())
}

/// `task_gradient + λ · g_reg`.
pub fn apply_penalty(task_gradient: &Matrix, entry: &CacheEntry, lambda: f64) -> Result<Matrix> {
    if task_gradient.shape() != entry.g_reg.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_penalty",
            lhs: format!("{:?}", task_gradient.shape()),
            rhs: format!("{:?}", entry.g_reg.shape()),
        });
    }
    let mut out = task_gradient.clone();
    add_penalty_in_place(&mut out, entry, lambda);
    Ok(out)
}

/// In-place form of [`apply_penalty`]; leaves the gradient bit-for-bit untouched when
/// nothing is selected or `λ = 0`.
pub fn add_penalty_in_place(gradient: &mut Matrix, entry: &CacheEntry, lambda: f64) {
    if entry.k_hat.is_none() || lambda == 0.0 {
        return;
    }
    for (g, p) in gradient.data_mut().iter_mut().zip(entry.g_reg.data()) {
        *g += lambda * p;
    }
}

/// Cosine similarity of the flattened matrices; `None` when both are zero.
pub fn staleness_similarity(cached: &Matrix, fresh: &Matrix) -> Result<Option<f64>> {
    if cached.shape() != fresh.shape() {
        return Err(Error::ShapeMismatch {
            op: "staleness_similarity",
            lhs: format!("{:?}", cached.shape()),
            rhs: format!("{:?}", fresh.shape()),
        });
    }
    let na = cached.frobenius();
    let nb = fresh.frobenius();
    if na == 0.0 && nb == 0.0 {
        return Ok(None);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Some(0.0));
    }
    Ok(Some((dot(cached.data(), fresh.data()) / (na * nb)).clamp(-1.0, 1.0)))
}

enum Pending {
    Ready(Vec<LayerOutcome>),
    Running(JoinHandle<Vec<LayerOutcome>>),
}

/// Drives refreshes on the `step mod m == 0` grid with optional lookahead.
///
/// A refresh due at step `d` is computed from the weights seen at step `d - lookahead`
/// and installed at the start of step `d`. Step 0 always refreshes inline. In
/// background mode the computation runs on a worker thread; the result is identical
/// to inline mode because the job only sees its own snapshot.
pub struct RefreshScheduler {
    cfg: S2DConfig,
    cache: PenaltyCache,
    pending: Option<(usize, Pending)>,
    refreshes: usize,
}

impl RefreshScheduler {
    pub fn new(cfg: S2DConfig, initial: PenaltyCache) -> Self {
        Self {
            cfg,
            cache: initial,
            pending: None,
            refreshes: 0,
        }
    }

    pub fn cache(&self) -> &PenaltyCache {
        &self.cache
    }

    pub fn refresh_count(&self) -> usize {
        self.refreshes
    }

    pub fn is_due(&self, step: usize) -> bool {
        step % self.cfg.refresh_interval == 0
    }

    /// Whether a snapshot for a future refresh must be taken at `step`.
    pub fn wants_snapshot(&self, step: usize) -> bool {
        let m = self.cfg.refresh_interval;
        let l = self.cfg.lookahead;
        if self.is_due(step) && (l == 0 || step == 0) {
            return true;
        }
        l > 0 && (step + l) % m == 0
    }

    /// Runs the scheduler at the start of `step`. `snapshot` is only invoked when the
    /// current weights are needed. Returns `true` when a new cache was installed.
    pub fn on_step_start(
        &mut self,
        step: usize,
        snapshot: impl FnOnce() -> Vec<LayerSnapshot>,
    ) -> bool {
        let m = self.cfg.refresh_interval;
        let l = self.cfg.lookahead;
        let inline_now = self.is_due(step) && (l == 0 || step == 0);
        let launch_for = if l > 0 && (step + l) % m == 0 {
            Some(step + l)
        } else {
            None
        };

        let mut snapshot = Some(snapshot);
        let mut take = || snapshot.take().map(|f| f()).expect("one snapshot per step");

        let mut installed = false;
        if inline_now {
            let job = RefreshJob {
                layers: take(),
                cfg: self.cfg.clone(),
                step,
            };
            self.cache = install(&self.cache, job.run());
            self.pending = None;
            self.refreshes += 1;
            installed = true;
        } else if self.is_due(step) {
            if let Some((due, pending)) = self.pending.take() {
                debug_assert_eq!(due, step);
                let outcomes = match pending {
                    Pending::Ready(o) => o,
                    Pending::Running(handle) => handle.join().unwrap_or_else(|_| {
                        vec![Err("refresh worker panicked".to_string()); self.cache.entries.len()]
                    }),
                };
                self.cache = install(&self.cache, outcomes);
                self.refreshes += 1;
                installed = true;
            }
        }

        // lookahead < m keeps launch points off the inline refresh steps
        if let Some(due) = launch_for {
            let job = RefreshJob {
                layers: take(),
                cfg: self.cfg.clone(),
                step: due,
            };
            let pending = if self.cfg.background {
                Pending::Running(std::thread::spawn(move || job.run()))
            } else {
                Pending::Ready(job.run())
            };
            self.pending = Some((due, pending));
        }
        installed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> S2DConfig {
        S2DConfig::default()
    }

    #[test]
    fn defaults() {
        let c = cfg();
        assert_eq!((c.n, c.lambda, c.tau, c.k_max), (2.0, 5e-4, 0.95, 3));
        assert_eq!((c.refresh_interval, c.lookahead), (100, 3));
        assert_eq!(c.selection_mode, SelectionMode::Spectral);
        assert!(c.pcdr_enabled);
        c.validate().unwrap();
        assert!(S2DConfig { n: 1.0, ..cfg() }.validate().is_err());
        assert!(S2DConfig { tau: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn l2_cases() {
        assert_eq!(l2_loss(&Matrix::zeros(3, 2), 1.0), 0.0);
        assert_eq!(l2_loss(&Matrix::diag(&[3.0, 1.0]), 2.0), 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let direct: f64 = w.data().iter().map(|v| v * v).sum::<f64>() * 0.5 * 0.3;
        let via_sigma: f64 = svd(&w).unwrap().sigma.iter().map(|s| s * s).sum::<f64>() * 0.5 * 0.3;
        assert!((l2_loss(&w, 0.3) - direct).abs() < 1e-10);
        assert!((via_sigma - direct).abs() < 1e-10);
    }

    #[test]
    fn s2d_loss_cases() {
        assert_eq!(s2d_loss(&Matrix::zeros(2, 2), 2.0, 1.0).unwrap(), 0.0);
        let v = s2d_loss(&Matrix::diag(&[3.0, 1.0]), 2.0, 0.003).unwrap();
        assert!((v - 0.028).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Matrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let f = svd(&w).unwrap();
        let via_trace = 0.01 / 3.0 * trace_form(&w, &f, 2.0).unwrap();
        let via_sigma = s2d_loss(&w, 2.0, 0.01).unwrap();
        assert!((via_trace - via_sigma).abs() <= 1e-9 * via_sigma);
    }

    #[test]
    fn gradient_cases() {
        let f = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s2d_gradient(&f, 2.0, 1.0, None).unwrap(), Matrix::diag(&[9.0, 1.0]));
        assert_eq!(s2d_gradient(&f, 2.0, 1.0, Some(1)).unwrap(), Matrix::diag(&[9.0, 0.0]));
        assert!(s2d_gradient(&f, 2.0, 1.0, Some(3)).is_err());
    }

    #[test]
    fn selection_examples() {
        let c = cfg();
        assert_eq!(select_rank(SelectionInput::Spectrum(&[5.0, 0.0, 0.0]), &c).unwrap(), Some(1));
        assert_eq!(select_rank(SelectionInput::Spectrum(&[1.0; 4]), &c).unwrap(), None);
        assert_eq!(
            select_rank(SelectionInput::Spectrum(&[10.0, 9.0, 0.5, 0.5]), &c).unwrap(),
            Some(2)
        );
        assert_eq!(select_rank(SelectionInput::Spectrum(&[0.0; 3]), &c).unwrap(), None);
        let uniform = S2DConfig {
            pcdr_enabled: false,
            ..c
        };
        assert_eq!(select_rank(SelectionInput::Spectrum(&[1.0; 4]), &uniform).unwrap(), Some(4));
    }

    #[test]
    fn selection_expands_over_ties() {
        let c = cfg();
        // PCDR_1 = 40/41.5 ≥ 0.95 would pick k = 1, but σ_2 ties σ_1
        let s = [20.0, 20.0, 1.0, 0.5];
        assert_eq!(select_rank(SelectionInput::Spectrum(&s), &c).unwrap(), Some(2));
        let s = [40.0, 40.0 * (1.0 - 1e-9), 1.0, 0.5];
        assert_eq!(select_rank(SelectionInput::Spectrum(&s), &c).unwrap(), Some(2));
    }

    #[test]
    fn activation_selection() {
        let f = svd(&Matrix::diag(&[10.0, 0.1])).unwrap();
        let calib = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let input = SelectionInput::Activations {
            factors: &f,
            calibration: &calib,
        };
        let c = S2DConfig {
            selection_mode: SelectionMode::Activation,
            ..cfg()
        };
        assert_eq!(select_rank(input, &c).unwrap(), Some(1));
    }

    #[test]
    fn refresh_cache_spiked_diag() {
        let w = Matrix::diag(&[10.0, 0.1, 0.1]);
        let cache = refresh_cache(&[("l", &w)], &cfg(), 0, None);
        let e = &cache.entries[0];
        assert_eq!(e.k_hat, Some(1));
        assert!(e.g_reg.max_abs_diff(&Matrix::diag(&[100.0, 0.0, 0.0])).unwrap() < 1e-12);
    }

    #[test]
    fn refresh_cache_uniform_layers_are_zero() {
        // N > k_max; with N <= k_max the top-k_max ratio is always 1
        let a = Matrix::identity(5);
        let b = Matrix::from_fn(6, 4, |i, j| if i == j { 2.0 } else { 0.0 });
        let cache = refresh_cache(&[("a", &a), ("b", &b)], &cfg(), 7, None);
        for e in &cache.entries {
            assert_eq!(e.k_hat, None);
            assert_eq!(e.g_reg.max_abs(), 0.0);
            assert_eq!(e.computed_at_step, 7);
        }
    }

    #[test]
    fn failed_layer_keeps_previous_entry() {
        let prev = PenaltyCache {
            entries: vec![CacheEntry {
                name: "l".into(),
                g_reg: Matrix::diag(&[1.0, 0.0]),
                k_hat: Some(1),
                computed_at_step: 0,
            }],
        };
        let next = install(&prev, vec![Err("svd failed".into())]);
        assert_eq!(next, prev);
    }

    #[test]
    fn penalty_application() {
        let g = Matrix::diag(&[1.0, 2.0]);
        let zero = CacheEntry::empty("l", 2, 2);
        assert_eq!(apply_penalty(&g, &zero, 5e-4).unwrap(), g);
        let e = CacheEntry {
            name: "l".into(),
            g_reg: Matrix::diag(&[9.0, 0.0]),
            k_hat: Some(1),
            computed_at_step: 0,
        };
        let out = apply_penalty(&Matrix::zeros(2, 2), &e, 5e-4).unwrap();
        assert!(out.max_abs_diff(&Matrix::diag(&[0.0045, 0.0])).unwrap() < 1e-18);
        assert!(apply_penalty(&Matrix::zeros(3, 2), &e, 1.0).is_err());
    }

    #[test]
    fn penalty_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let p = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let e = CacheEntry {
            name: "l".into(),
            g_reg: p.clone(),
            k_hat: Some(2),
            computed_at_step: 0,
        };
        let out = apply_penalty(&g, &e, 0.37).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert!((out.get(i, j) - (g.get(i, j) + 0.37 * p.get(i, j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_cases() {
        let m = Matrix::diag(&[1.0, -2.0]);
        assert!((staleness_similarity(&m, &m).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert!((staleness_similarity(&m, &m.scale(-1.0)).unwrap().unwrap() + 1.0).abs() < 1e-15);
        let z = Matrix::zeros(2, 2);
        assert_eq!(staleness_similarity(&z, &z).unwrap(), None);
    }

    fn snapshot_of(w: &Matrix) -> Vec<LayerSnapshot> {
        vec![LayerSnapshot {
            name: "l".into(),
            weight: w.clone(),
            calibration: None,
        }]
    }

    #[test]
    fn scheduler_lookahead_timing() {
        let c = S2DConfig {
            refresh_interval: 10,
            lookahead: 3,
            ..cfg()
        };
        let w0 = Matrix::identity(3);
        let mut sched = RefreshScheduler::new(c, PenaltyCache::zeros(&[("l", &w0)]));
        let mut installs = vec![];
        let mut snapshots = vec![];
        for step in 0..25 {
            // weight at step t is diag(t+10, 1, 1): spiked enough to select
            let w = Matrix::diag(&[step as f64 + 10.0, 0.01, 0.01]);
            let mut took = false;
            if sched.on_step_start(step, || {
                took = true;
                snapshot_of(&w)
            }) {
                installs.push((step, sched.cache().entries[0].g_reg.get(0, 0)));
            }
            if took {
                snapshots.push(step);
            }
        }
        assert_eq!(snapshots, vec![0, 7, 17]);
        // the refresh installed at step 10 used the weights of step 7
        assert_eq!(installs, vec![(0, 100.0), (10, 17.0 * 17.0), (20, 27.0 * 27.0)]);
        assert_eq!(sched.cache().entries[0].computed_at_step, 20);
    }

    #[test]
    fn background_matches_inline_bitwise() {
        let run = |background: bool| {
            let c = S2DConfig {
                refresh_interval: 5,
                lookahead: 2,
                background,
                ..cfg()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let w0 = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
            let mut sched = RefreshScheduler::new(c, PenaltyCache::zeros(&[("l", &w0)]));
            let mut seen = vec![];
            for step in 0..20 {
                let mut w = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
                w.set(0, 0, 30.0);
                sched.on_step_start(step, || snapshot_of(&w));
                seen.push(sched.cache().clone());
            }
            seen
        };
        let a = run(false);
        let b = run(true);
        for (x, y) in a.iter().zip(&b) {
            for (ex, ey) in x.entries.iter().zip(&y.entries) {
                assert_eq!(ex.k_hat, ey.k_hat);
                let bits_x: Vec<u64> = ex.g_reg.data().iter().map(|v| v.to_bits()).collect();
                let bits_y: Vec<u64> = ey.g_reg.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_x, bits_y);
            }
        }
    }
}
