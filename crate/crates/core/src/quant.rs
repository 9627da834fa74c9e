//! Uniform affine fake quantization.
//!
//! `q = clamp(round(v / scale) + zero_point, qmin, qmax)`, dequantized as
//! `(q - zero_point) · scale`. Rounding is half-to-even. Symmetric schemes use the
//! code range `[-(2^{b-1}-1), 2^{b-1}-1]` with a zero offset; asymmetric schemes use
//! `[0, 2^b - 1]`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Smallest scale produced by calibration.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per weight row, or per feature column for activations.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weights,
    Activations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub bits: u32,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub target: QuantTarget,
    /// Clip the calibration range to this percentile of `|v|` (symmetric) or of
    /// the values (asymmetric). Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
}

impl QuantScheme {
    /// Symmetric per-channel weights.
    pub fn weights(bits: u32) -> Self {
        Self {
            bits,
            symmetric: true,
            granularity: Granularity::PerChannel,
            target: QuantTarget::Weights,
            percentile: None,
        }
    }

    /// Asymmetric per-tensor activations.
    pub fn activations(bits: u32) -> Self {
        Self {
            bits,
            symmetric: false,
            granularity: Granularity::PerTensor,
            target: QuantTarget::Activations,
            percentile: None,
        }
    }

    pub fn with_bits(self, bits: u32) -> Self {
        Self { bits, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::OutOfRange {
                what: "quantization bits",
                value: self.bits as usize,
                lo: 2,
                hi: 8,
            });
        }
        if let Some(p) = self.percentile {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::InvalidArgument(format!("percentile {p} not in (0, 100]")));
            }
        }
        Ok(())
    }

    /// Integer code range `(qmin, qmax)`.
    pub fn code_range(&self) -> (i64, i64) {
        if self.symmetric {
            let q = (1i64 << (self.bits - 1)) - 1;
            (-q, q)
        } else {
            (0, (1i64 << self.bits) - 1)
        }
    }
}

/// Scale and zero point per calibration group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f64>,
    pub zero_points: Vec<i64>,
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero_point: i64) -> Self {
        Self {
            scales: vec![scale],
            zero_points: vec![zero_point],
        }
    }

    fn group(&self, g: usize) -> (f64, i64) {
        let idx = if self.scales.len() == 1 { 0 } else { g };
        (self.scales[idx], self.zero_points[idx])
    }
}

/// Group index of entry `(r, c)`.
fn group_of(scheme: &QuantScheme, r: usize, c: usize) -> usize {
    match (scheme.granularity, scheme.target) {
        (Granularity::PerTensor, _) => 0,
        (Granularity::PerChannel, QuantTarget::Weights) => r,
        (Granularity::PerChannel, QuantTarget::Activations) => c,
    }
}

fn groups(values: &Matrix, scheme: &QuantScheme) -> Vec<Vec<f64>> {
    let n = match (scheme.granularity, scheme.target) {
        (Granularity::PerTensor, _) => 1,
        (Granularity::PerChannel, QuantTarget::Weights) => values.rows(),
        (Granularity::PerChannel, QuantTarget::Activations) => values.cols(),
    };
    let mut out = vec![Vec::new(); n];
    for r in 0..values.rows() {
        for (c, &v) in values.row(r).iter().enumerate() {
            out[group_of(scheme, r, c)].push(v);
        }
    }
    out
}

fn percentile_of(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Min-max (or percentile-clipped) calibration.
pub fn calibrate(values: &Matrix, scheme: &QuantScheme) -> Result<QuantParams> {
    scheme.validate()?;
    if !values.is_finite() {
        return Err(Error::InvalidArgument("non-finite calibration values".into()));
    }
    let (qmin, qmax) = scheme.code_range();
    let mut scales = Vec::new();
    let mut zero_points = Vec::new();
    for group in groups(values, scheme) {
        if group.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if scheme.symmetric {
            let amax = match scheme.percentile {
                Some(p) => {
                    let mut a: Vec<f64> = group.iter().map(|v| v.abs()).collect();
                    a.sort_by(f64::total_cmp);
                    percentile_of(&a, p)
                }
                None => group.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            };
            scales.push((amax / qmax as f64).max(MIN_SCALE));
            zero_points.push(0);
        } else {
            let (lo, hi) = match scheme.percentile {
                Some(p) => {
                    let mut s = group.clone();
                    s.sort_by(f64::total_cmp);
                    (percentile_of(&s, 100.0 - p), percentile_of(&s, p))
                }
                None => group
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
            };
            let mut scale = (hi - lo) / (qmax - qmin) as f64;
            if scale < MIN_SCALE {
                warn!("constant calibration group; flooring scale at {MIN_SCALE:e}");
                scale = MIN_SCALE;
            }
            let zp = (-lo / scale).round_ties_even().clamp(qmin as f64, qmax as f64) as i64;
            scales.push(scale);
            zero_points.push(zp);
        }
    }
    Ok(QuantParams {
        scales,
        zero_points,
    })
}

#[inline]
fn quantize_one(v: f64, scale: f64, zp: i64, qmin: i64, qmax: i64) -> f64 {
    let q = ((v / scale).round_ties_even() + zp as f64).clamp(qmin as f64, qmax as f64);
    (q - zp as f64) * scale
}

/// Quantize-dequantize every entry.
pub fn fake_quant(values: &Matrix, params: &QuantParams, scheme: &QuantScheme) -> Matrix {
    let (qmin, qmax) = scheme.code_range();
    let mut out = values.clone();
    let cols = values.cols();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let (scale, zp) = params.group(group_of(scheme, idx / cols, idx % cols));
        *v = quantize_one(*v, scale, zp, qmin, qmax);
    }
    out
}

/// Straight-through gradient: upstream passes where the input lies in the
/// representable range `[(qmin - zp)·s, (qmax - zp)·s]` (inclusive), zero elsewhere.
pub fn ste_backward(
    upstream: &Matrix,
    values: &Matrix,
    params: &QuantParams,
    scheme: &QuantScheme,
) -> Result<Matrix> {
    if upstream.shape() != values.shape() {
        return Err(Error::ShapeMismatch {
            op: "ste_backward",
            lhs: format!("{:?}", upstream.shape()),
            rhs: format!("{:?}", values.shape()),
        });
    }
    let (qmin, qmax) = scheme.code_range();
    let cols = values.cols();
    let mut out = upstream.clone();
    for (idx, (g, &v)) in out.data_mut().iter_mut().zip(values.data()).enumerate() {
        let (scale, zp) = params.group(group_of(scheme, idx / cols, idx % cols));
        let lo = (qmin - zp) as f64 * scale;
        let hi = (qmax - zp) as f64 * scale;
        if !(v >= lo && v <= hi) {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Calibrate and fake-quantize in one go.
pub fn quantize_dequantize(values: &Matrix, scheme: &QuantScheme) -> Result<Matrix> {
    let p = calibrate(values, scheme)?;
    Ok(fake_quant(values, &p, scheme))
}

/// Mean squared quantization error of `values` under `scheme`.
pub fn quant_mse(values: &Matrix, scheme: &QuantScheme) -> Result<f64> {
    let q = quantize_dequantize(values, scheme)?;
    let diff = values.sub(&q)?;
    Ok(diff.frobenius_sq() / (values.rows() * values.cols()) as f64)
}

/// A `W{w}A{a}` bit setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitSetting {
    pub w_bits: u32,
    pub a_bits: u32,
}

impl BitSetting {
    pub fn new(w_bits: u32, a_bits: u32) -> Result<Self> {
        let s = Self { w_bits, a_bits };
        if !(2..=8).contains(&w_bits) || !(2..=8).contains(&a_bits) {
            return Err(Error::BitString(s.to_string()));
        }
        Ok(s)
    }
}

impl fmt::Display for BitSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}A{}", self.w_bits, self.a_bits)
    }
}

impl FromStr for BitSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BitString(s.to_string());
        let rest = s.trim().strip_prefix(['W', 'w']).ok_or_else(bad)?;
        let (w, a) = rest.split_once(['A', 'a']).ok_or_else(bad)?;
        let w: u32 = w.parse().map_err(|_| bad())?;
        let a: u32 = a.parse().map_err(|_| bad())?;
        Self::new(w, a).map_err(|_| bad())
    }
}

impl Serialize for BitSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BitSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
