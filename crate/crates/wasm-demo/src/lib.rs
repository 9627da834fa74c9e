//! Three interactive operations for the static page in `www/`. Each takes plain
//! numbers and returns a JSON string; the `*_json` functions are the wasm exports.

use s2d_core::diagnostics::pcdr_spectral;
use s2d_core::linalg::{svd, Matrix};
use s2d_core::quant::{fake_quant, calibrate, QuantScheme};
use s2d_core::regularizer::{s2d_gradient, select_rank, S2DConfig, SelectionInput};
use s2d_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Spectrum {
    pub sigma: Vec<f64>,
    /// `PCDR_k` of the spectrum for k = 1..=N; `null` when undefined.
    pub pcdr: Vec<Option<f64>>,
    pub k_hat: Option<usize>,
}

/// Singular values, spectral dominance ratios and the rank S²D would select.
pub fn audit(rows: usize, cols: usize, data: &[f64], tau: f64, k_max: usize) -> Result<Spectrum> {
    let w = Matrix::from_vec(rows, cols, data.to_vec())?;
    let f = svd(&w)?;
    let pcdr = (1..=f.sigma.len())
        .map(|k| pcdr_spectral(&f.sigma, k))
        .collect::<Result<Vec<_>>>()?;
    let cfg = S2DConfig {
        tau,
        k_max,
        ..S2DConfig::default()
    };
    cfg.validate()?;
    let k_hat = select_rank(SelectionInput::Spectrum(&f.sigma), &cfg)?;
    Ok(Spectrum {
        sigma: f.sigma,
        pcdr,
        k_hat,
    })
}

#[derive(Debug, Serialize)]
pub struct Collapse {
    pub scale: f64,
    pub dequantized: Vec<f64>,
    /// Entries other than the largest that dequantize to exactly zero.
    pub zeroed: usize,
    pub mse: f64,
}

/// Per-tensor asymmetric fake quantization of `values`, showing how one outlier
/// stretches the range until small entries collapse.
pub fn collapse(values: &[f64], bits: u32) -> Result<Collapse> {
    let x = Matrix::from_vec(1, values.len(), values.to_vec())?;
    let scheme = QuantScheme::activations(bits);
    scheme.validate()?;
    let params = calibrate(&x, &scheme)?;
    let q = fake_quant(&x, &params, &scheme);
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i);
    let zeroed = q
        .data()
        .iter()
        .zip(values)
        .enumerate()
        .filter(|(i, (d, v))| Some(*i) != peak && **d == 0.0 && **v != 0.0)
        .count();
    let mse = q.data().iter().zip(values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(Collapse {
        scale: params.scales[0],
        dequantized: q.into_data(),
        zeroed,
        mse,
    })
}

#[derive(Debug, Serialize)]
pub struct Descent {
    /// Singular values after each step, starting with the input.
    pub sigma: Vec<Vec<f64>>,
    pub k_hat: Vec<Option<usize>>,
}

/// Pure S²D gradient descent `W ← W − lr·λ·U_k Σ_kⁿ V_kᵀ`, reselecting `k̂` each step.
#[allow(clippy::too_many_arguments)]
pub fn descend(
    rows: usize,
    cols: usize,
    data: &[f64],
    n: f64,
    lambda: f64,
    lr: f64,
    tau: f64,
    steps: usize,
) -> Result<Descent> {
    let cfg = S2DConfig {
        n,
        lambda,
        tau,
        ..S2DConfig::default()
    };
    cfg.validate()?;
    let mut w = Matrix::from_vec(rows, cols, data.to_vec())?;
    let mut out = Descent {
        sigma: Vec::with_capacity(steps + 1),
        k_hat: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let f = svd(&w)?;
        let k = select_rank(SelectionInput::Spectrum(&f.sigma), &cfg)?;
        out.sigma.push(f.sigma.clone());
        out.k_hat.push(k);
        let Some(k) = k else { continue };
        let g = s2d_gradient(&f, n, lambda, Some(k))?;
        for (p, d) in w.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    out.sigma.push(svd(&w)?.sigma);
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn audit_json(rows: usize, cols: usize, data: &[f64], tau: f64, k_max: usize) -> std::result::Result<String, JsError> {
    to_js(audit(rows, cols, data, tau, k_max))
}

#[wasm_bindgen]
pub fn collapse_json(values: &[f64], bits: u32) -> std::result::Result<String, JsError> {
    to_js(collapse(values, bits))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn descend_json(
    rows: usize,
    cols: usize,
    data: &[f64],
    n: f64,
    lambda: f64,
    lr: f64,
    tau: f64,
    steps: usize,
) -> std::result::Result<String, JsError> {
    to_js(descend(rows, cols, data, n, lambda, lr, tau, steps))
}
