//! Principal component dominance ratios and the spectral-norm amplification bound.
//!
//! For a layer `y = W x` with `W = U Σ Vᵀ`, the activation of neuron `i` on sample
//! `x_j` splits into one term per singular triplet:
//! `A_ij = Σ_r σ_r · u_ir · (v_rᵀ x_j)`. The dominance ratio `PCDR_k` is the share of
//! the absolute term mass carried by the top `k` triplets.
//!
//! A zero denominator yields `None` ("undefined"), never a coerced number.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, svd_labeled, Matrix, SvdFactors};

/// Slack used when checking `‖Wx‖ ≤ σ_max ‖x‖`.
pub const BOUND_SLACK: f64 = 1e-9;

/// Per-triplet split of one activation entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDecomposition {
    pub neuron: usize,
    pub sample: usize,
    pub terms: Vec<f64>,
}

impl ActivationDecomposition {
    pub fn total(&self) -> f64 {
        self.terms.iter().sum()
    }

    /// Dominance ratio of the first `k` terms; `None` when every term is zero.
    pub fn pcdr(&self, k: usize) -> Result<Option<f64>> {
        let abs: Vec<f64> = self.terms.iter().map(|t| t.abs()).collect();
        prefix_ratio(&abs, k)
    }
}

fn prefix_ratio(mass: &[f64], k: usize) -> Result<Option<f64>> {
    if k == 0 || k > mass.len() {
        return Err(Error::OutOfRange {
            what: "pcdr rank k",
            value: k,
            lo: 1,
            hi: mass.len(),
        });
    }
    // numerator and denominator share the summation order, so k = N gives exactly 1
    let top: f64 = mass[..k].iter().sum();
    let denom: f64 = mass.iter().sum();
    if denom <= 0.0 {
        return Ok(None);
    }
    Ok(Some((top / denom).min(1.0)))
}

/// Splits `(W x)_i` into its per-triplet contributions.
pub fn decompose_activation(f: &SvdFactors, x: &[f64], i: usize) -> Result<ActivationDecomposition> {
    if x.len() != f.n() {
        return Err(Error::ShapeMismatch {
            op: "decompose_activation",
            lhs: format!("input dim {}", f.n()),
            rhs: format!("vector of length {}", x.len()),
        });
    }
    if i >= f.m() {
        return Err(Error::OutOfRange {
            what: "neuron index",
            value: i,
            lo: 0,
            hi: f.m() - 1,
        });
    }
    let terms = (0..f.rank_bound())
        .map(|r| {
            let proj: f64 = (0..f.n()).map(|c| f.v.get(c, r) * x[c]).sum();
            f.sigma[r] * f.u.get(i, r) * proj
        })
        .collect();
    Ok(ActivationDecomposition {
        neuron: i,
        sample: 0,
        terms,
    })
}

/// Activation-based `PCDR_k` at neuron `i` for input `x`.
pub fn pcdr_activation(f: &SvdFactors, x: &[f64], i: usize, k: usize) -> Result<Option<f64>> {
    decompose_activation(f, x, i)?.pcdr(k)
}

/// Activation-free proxy `Σ_{r≤k} σ_r / Σ_r σ_r`.
pub fn pcdr_spectral(sigma: &[f64], k: usize) -> Result<Option<f64>> {
    prefix_ratio(sigma, k)
}

/// Per-layer spectral audit result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcdrReport {
    #[serde(rename = "layer")]
    pub layer_name: String,
    /// `k` (as a decimal string) to `PCDR_k`; `null` when undefined.
    pub pcdr: BTreeMap<String, Option<f64>>,
    pub sigma_max: f64,
    pub max_abs_activation: f64,
    pub argmax_neuron: usize,
    pub argmax_sample: usize,
    /// Mean `PCDR_1` over the largest activations, present when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_fraction_mean_pcdr: Option<f64>,
}

impl PcdrReport {
    pub fn pcdr_at(&self, k: usize) -> Option<f64> {
        self.pcdr.get(&k.to_string()).copied().flatten()
    }
}

/// Options for [`audit_layer_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    pub k_max: usize,
    /// Percentage (e.g. `0.1` = 0.1%) of largest-magnitude activations whose mean
    /// `PCDR_1` is also reported.
    pub top_percent: Option<f64>,
}

/// Audits one layer against a calibration batch whose rows are input samples.
pub fn audit_layer(name: &str, w: &Matrix, calibration: &Matrix, k_max: usize) -> Result<PcdrReport> {
    audit_layer_with(
        name,
        w,
        calibration,
        AuditOptions {
            k_max,
            top_percent: None,
        },
    )
}

pub fn audit_layer_with(
    name: &str,
    w: &Matrix,
    calibration: &Matrix,
    opts: AuditOptions,
) -> Result<PcdrReport> {
    let f = svd_labeled(w, name)?;
    audit_factored(name, w, &f, calibration, opts)
}

/// Same as [`audit_layer_with`] with precomputed factors of `w`.
pub fn audit_factored(
    name: &str,
    w: &Matrix,
    f: &SvdFactors,
    calibration: &Matrix,
    opts: AuditOptions,
) -> Result<PcdrReport> {
    if calibration.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if opts.k_max == 0 {
        return Err(Error::OutOfRange {
            what: "k_max",
            value: 0,
            lo: 1,
            hi: f.rank_bound(),
        });
    }
    // rows: samples, cols: neurons
    let acts = calibration.matmul_t(w)?;
    let (mut best, mut bi, mut bj) = (-1.0f64, 0, 0);
    for j in 0..acts.rows() {
        for (i, a) in acts.row(j).iter().enumerate() {
            if a.abs() > best {
                best = a.abs();
                bi = i;
                bj = j;
            }
        }
    }
    let mut dec = decompose_activation(f, calibration.row(bj), bi)?;
    dec.sample = bj;
    let k_top = opts.k_max.min(f.rank_bound());
    let mut pcdr = BTreeMap::new();
    for k in 1..=k_top {
        pcdr.insert(k.to_string(), dec.pcdr(k)?);
    }

    let top_fraction_mean_pcdr = match opts.top_percent {
        Some(p) => top_mean_pcdr(f, calibration, &acts, p)?,
        None => None,
    };

    Ok(PcdrReport {
        layer_name: name.to_string(),
        pcdr,
        sigma_max: f.sigma_max(),
        max_abs_activation: best.max(0.0),
        argmax_neuron: bi,
        argmax_sample: bj,
        top_fraction_mean_pcdr,
    })
}

fn top_mean_pcdr(f: &SvdFactors, calib: &Matrix, acts: &Matrix, percent: f64) -> Result<Option<f64>> {
    let total = acts.rows() * acts.cols();
    let count = ((total as f64 * percent / 100.0).ceil() as usize).clamp(1, total);
    let mut idx: Vec<usize> = (0..total).collect();
    let vals = acts.data();
    idx.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()).then(a.cmp(&b)));
    let mut sum = 0.0;
    let mut n = 0usize;
    for &flat in &idx[..count] {
        let (j, i) = (flat / acts.cols(), flat % acts.cols());
        if let Some(p) = pcdr_activation(f, calib.row(j), i, 1)? {
            sum += p;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Outcome of checking `‖Wx‖₂ ≤ σ_max(W) ‖x‖₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn verify_bound(w: &Matrix, x: &[f64]) -> Result<BoundCheck> {
    let sigma_max = svd_labeled(w, "bound check")?.sigma_max();
    verify_bound_with(w, sigma_max, x)
}

/// Bound check reusing a known spectral norm.
pub fn verify_bound_with(w: &Matrix, sigma_max: f64, x: &[f64]) -> Result<BoundCheck> {
    let wx = w.matvec(x)?;
    let lhs = norm2(&wx);
    let rhs = sigma_max * norm2(x);
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
    })
}

/// `‖W v₁‖₂`, which equals `σ_max` when the factors are exact.
pub fn saturation_gap(w: &Matrix, f: &SvdFactors) -> Result<f64> {
    let v1 = f.right_vector(0);
    let wv = w.matvec(&v1)?;
    Ok((dot(&wv, &wv).sqrt() - f.sigma_max()).abs())
}
