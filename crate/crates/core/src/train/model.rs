//! Small dense models with hand-written reverse-mode gradients.
//!
//! Batches are row-major with one sample per row. A linear layer computes
//! `z = h Wᵀ + b` with `W` stored `out × in`. The optional attention block treats
//! each sample as `tokens` rows of width `dim` and adds its output back onto the
//! input (residual) before the linear stack.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{calibrate, fake_quant, ste_backward, QuantParams, QuantScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    None,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::None => x,
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::None => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: Matrix,
    /// `1 × out`.
    pub bias: Matrix,
    pub activation: Activation,
}

impl Linear {
    pub fn new(name: impl Into<String>, weight: Matrix, bias: Vec<f64>, activation: Activation) -> Self {
        let out = weight.rows();
        assert_eq!(bias.len(), out, "bias length must match output dimension");
        Self {
            name: name.into(),
            weight,
            bias: Matrix::from_raw(1, out, bias),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Single-head self-attention over `tokens × dim` samples with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub tokens: usize,
    pub dim: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

pub const ATTN_NAMES: [&str; 4] = ["attn.q", "attn.k", "attn.v", "attn.o"];

impl Attention {
    fn weights(&self) -> [&Matrix; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn weights_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Architecture description used to build and validate models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer widths including input and output, e.g. `[32, 128, 128, 8]`.
    pub dims: Vec<usize>,
    pub hidden_activation: Activation,
    /// Token count of the attention block; `0` disables it.
    pub attention_tokens: usize,
    /// Weights are drawn from `N(0, (init_gain² / fan_in))`.
    pub init_gain: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            dims: vec![32, 128, 128, 8],
            hidden_activation: Activation::Gelu,
            attention_tokens: 0,
            init_gain: 1e-4,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "model.dims: need at least two positive widths, got {:?}",
                self.dims
            )));
        }
        if self.attention_tokens > 0 && self.dims[0] % self.attention_tokens != 0 {
            return Err(Error::Config(format!(
                "model.attention_tokens: {} does not divide input width {}",
                self.attention_tokens, self.dims[0]
            )));
        }
        if !(self.init_gain >= 0.0) {
            return Err(Error::Config("model.init_gain: must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub attention: Option<Attention>,
    pub layers: Vec<Linear>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl ToyModel {
    pub fn new(attention: Option<Attention>, layers: Vec<Linear>) -> Result<Self> {
        let m = Self { attention, layers };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one linear layer".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "model layers",
                    lhs: format!("{} out {}", pair[0].name, pair[0].out_dim()),
                    rhs: format!("{} in {}", pair[1].name, pair[1].in_dim()),
                });
            }
        }
        if let Some(a) = &self.attention {
            if a.tokens * a.dim != self.layers[0].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: format!("{}x{} tokens", a.tokens, a.dim),
                    rhs: format!("input width {}", self.layers[0].in_dim()),
                });
            }
        }
        Ok(())
    }

    /// Random initialization; layers are named `fc1`, `fc2`, ...
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let attention = if spec.attention_tokens > 0 {
            let dim = spec.dims[0] / spec.attention_tokens;
            let std = spec.init_gain / (dim as f64).sqrt();
            Some(Attention {
                tokens: spec.attention_tokens,
                dim,
                wq: gaussian(rng, dim, dim, std),
                wk: gaussian(rng, dim, dim, std),
                wv: gaussian(rng, dim, dim, std),
                wo: gaussian(rng, dim, dim, std),
            })
        } else {
            None
        };
        let n = spec.dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (spec.dims[i], spec.dims[i + 1]);
                let std = spec.init_gain / (fan_in as f64).sqrt();
                let act = if i + 1 == n {
                    Activation::None
                } else {
                    spec.hidden_activation
                };
                Linear::new(
                    format!("fc{}", i + 1),
                    gaussian(rng, fan_out, fan_in, std),
                    vec![0.0; fan_out],
                    act,
                )
            })
            .collect();
        Self::new(attention, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    /// Names of every parameter tensor in canonical order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.attention.is_some() {
            names.extend(ATTN_NAMES.iter().map(|n| format!("{n}.weight")));
        }
        for l in &self.layers {
            names.push(format!("{}.weight", l.name));
            names.push(format!("{}.bias", l.name));
        }
        names
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        if let Some(a) = &self.attention {
            out.extend(a.weights());
        }
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(a) = &mut self.attention {
            out.extend(a.weights_mut());
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Weight matrices addressable for auditing and regularization, with their
    /// index into [`ToyModel::params`].
    pub fn weight_matrices(&self) -> Vec<(String, usize, &Matrix)> {
        let mut out = Vec::new();
        let mut idx = 0;
        if let Some(a) = &self.attention {
            for (n, w) in ATTN_NAMES.iter().zip(a.weights()) {
                out.push((n.to_string(), idx, w));
                idx += 1;
            }
        }
        for l in &self.layers {
            out.push((l.name.clone(), idx, &l.weight));
            idx += 2;
        }
        out
    }

    /// Name of the activation quantization site feeding each weight.
    pub fn input_site(weight_name: &str) -> String {
        match weight_name {
            "attn.q" | "attn.k" | "attn.v" => "attn.input".to_string(),
            "attn.o" => "attn.o.input".to_string(),
            other => format!("{other}.input"),
        }
    }

    /// Every activation quantization site in forward order.
    pub fn quant_sites(&self) -> Vec<String> {
        let mut sites = Vec::new();
        if self.attention.is_some() {
            sites.push("attn.input".to_string());
            sites.push("attn.o.input".to_string());
        }
        for l in &self.layers {
            sites.push(format!("{}.input", l.name));
        }
        sites.push("output".to_string());
        sites
    }

    /// Copy with every weight matrix replaced by `f(name, weight)`.
    pub fn map_weights(&self, mut f: impl FnMut(&str, &Matrix) -> Result<Matrix>) -> Result<Self> {
        let mut out = self.clone();
        if let Some(a) = &mut out.attention {
            for (n, w) in ATTN_NAMES.iter().zip(a.weights_mut()) {
                *w = f(n, w)?;
            }
        }
        for l in &mut out.layers {
            l.weight = f(&l.name, &l.weight)?;
        }
        Ok(out)
    }
}

/// Activation quantization applied during a forward pass.
#[derive(Debug, Clone, Default)]
pub enum ActQuant<'a> {
    #[default]
    Off,
    /// Calibrate each site on the current batch (QAT).
    Dynamic(QuantScheme),
    /// Frozen per-site parameters (PTQ).
    Frozen {
        scheme: QuantScheme,
        params: &'a BTreeMap<String, QuantParams>,
    },
}

/// Fake quantization inserted into the forward pass.
#[derive(Debug, Clone, Default)]
pub struct QuantContext<'a> {
    /// Quantize weights on the fly with per-call calibration (QAT).
    pub weights: Option<QuantScheme>,
    pub acts: ActQuant<'a>,
}

impl QuantContext<'_> {
    pub fn is_off(&self) -> bool {
        self.weights.is_none() && matches!(self.acts, ActQuant::Off)
    }
}

/// Record of one quantized site, kept for the STE mask.
#[derive(Debug, Clone)]
struct SiteQuant {
    raw: Matrix,
    params: QuantParams,
    scheme: QuantScheme,
}

#[derive(Debug, Clone)]
struct WeightQuant {
    params: QuantParams,
    scheme: QuantScheme,
}

#[derive(Debug, Clone)]
struct LinearCache {
    input: Matrix,
    pre: Matrix,
    site: Option<SiteQuant>,
    weight_used: Option<Matrix>,
    weight_quant: Option<WeightQuant>,
}

#[derive(Debug, Clone)]
struct AttnSample {
    xq: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    p: Matrix,
    ctx: Matrix,
}

#[derive(Debug, Clone)]
struct AttnCache {
    samples: Vec<AttnSample>,
    ctx_site: Option<SiteQuant>,
    weights_used: Vec<Matrix>,
    weight_quant: Vec<Option<WeightQuant>>,
}

/// Intermediate activations saved by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    attention: Option<AttnCache>,
    linears: Vec<LinearCache>,
    output_site: Option<SiteQuant>,
    batch: usize,
}

impl ForwardCache {
    /// Input seen by each linear layer (after any quantization), by layer name order.
    pub fn layer_inputs(&self) -> impl Iterator<Item = &Matrix> {
        self.linears.iter().map(|c| &c.input)
    }

    /// Pre-activations `h Wᵀ + b` of each linear layer.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Matrix> {
        self.linears.iter().map(|c| &c.pre)
    }

    /// Input to the attention block's projections, if present.
    pub fn attention_input(&self) -> Option<Matrix> {
        let a = self.attention.as_ref()?;
        let rows: Vec<f64> = a.samples.iter().flat_map(|s| s.xq.data().to_vec()).collect();
        let d = a.samples.first()?.xq.cols();
        Some(Matrix::from_raw(rows.len() / d, d, rows))
    }

    /// Attention context (input of the output projection), tokens stacked as rows.
    pub fn attention_context(&self) -> Option<Matrix> {
        let a = self.attention.as_ref()?;
        let rows: Vec<f64> = a.samples.iter().flat_map(|s| s.ctx.data().to_vec()).collect();
        let d = a.samples.first()?.ctx.cols();
        Some(Matrix::from_raw(rows.len() / d, d, rows))
    }
}

fn quantize_site(
    name: &str,
    x: Matrix,
    acts: &ActQuant<'_>,
) -> Result<(Matrix, Option<SiteQuant>)> {
    let (scheme, params) = match acts {
        ActQuant::Off => return Ok((x, None)),
        ActQuant::Dynamic(s) => (*s, calibrate(&x, s)?),
        ActQuant::Frozen { scheme, params } => (
            *scheme,
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingCalibration(name.to_string()))?,
        ),
    };
    let q = fake_quant(&x, &params, &scheme);
    Ok((
        q,
        Some(SiteQuant {
            raw: x,
            params,
            scheme,
        }),
    ))
}

fn quantize_weight(w: &Matrix, scheme: Option<QuantScheme>) -> Result<(Option<Matrix>, Option<WeightQuant>)> {
    match scheme {
        None => Ok((None, None)),
        Some(s) => {
            let params = calibrate(w, &s)?;
            let q = fake_quant(w, &params, &s);
            Ok((Some(q), Some(WeightQuant { params, scheme: s })))
        }
    }
}

fn softmax_rows(s: &mut Matrix) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn add_bias(z: &mut Matrix, bias: &Matrix) {
    let b = bias.data();
    for r in 0..z.rows() {
        for (v, bv) in z.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// Runs the model; returns predictions and the cache needed by [`backward`].
pub fn forward(model: &ToyModel, batch: &Matrix, quant: &QuantContext<'_>) -> Result<(Matrix, ForwardCache)> {
    if batch.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: format!("batch width {}", batch.cols()),
            rhs: format!("model input {}", model.input_dim()),
        });
    }
    let bsz = batch.rows();
    let mut h = batch.clone();

    let attention = match &model.attention {
        None => None,
        Some(a) => {
            let (xin, _) = quantize_site("attn.input", h.clone(), &quant.acts)?;
            let mut weights_used = Vec::with_capacity(4);
            let mut weight_quant = Vec::with_capacity(4);
            for w in a.weights() {
                let (q, wq) = quantize_weight(w, quant.weights)?;
                weights_used.push(q.unwrap_or_else(|| w.clone()));
                weight_quant.push(wq);
            }
            let (wq, wk, wv, wo) = (&weights_used[0], &weights_used[1], &weights_used[2], &weights_used[3]);
            let scale = 1.0 / (a.dim as f64).sqrt();
            let mut samples = Vec::with_capacity(bsz);
            let mut ctx_rows = Vec::with_capacity(bsz * a.tokens * a.dim);
            for s in 0..bsz {
                let xs = Matrix::from_raw(a.tokens, a.dim, xin.row(s).to_vec());
                let q = xs.matmul_t(wq)?;
                let k = xs.matmul_t(wk)?;
                let v = xs.matmul_t(wv)?;
                let mut p = q.matmul_t(&k)?.scale(scale);
                softmax_rows(&mut p);
                let ctx = p.matmul(&v)?;
                ctx_rows.extend_from_slice(ctx.data());
                samples.push(AttnSample { xq: xs, q, k, v, p, ctx });
            }
            let ctx_all = Matrix::from_raw(bsz * a.tokens, a.dim, ctx_rows);
            let (ctx_q, ctx_site) = quantize_site("attn.o.input", ctx_all, &quant.acts)?;
            let out = ctx_q.matmul_t(wo)?;
            // residual: h += reshape(out)
            for (hv, ov) in h.data_mut().iter_mut().zip(out.data()) {
                *hv += ov;
            }
            // keep the quantized context for the Wo gradient
            for (s, sample) in samples.iter_mut().enumerate() {
                let start = s * a.tokens * a.dim;
                sample.ctx = Matrix::from_raw(
                    a.tokens,
                    a.dim,
                    ctx_q.data()[start..start + a.tokens * a.dim].to_vec(),
                );
            }
            Some(AttnCache {
                samples,
                ctx_site,
                weights_used,
                weight_quant,
            })
        }
    };

    let mut linears = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let site_name = format!("{}.input", layer.name);
        let (input, site) = quantize_site(&site_name, h, &quant.acts)?;
        let (weight_used, weight_quant) = quantize_weight(&layer.weight, quant.weights)?;
        let w = weight_used.as_ref().unwrap_or(&layer.weight);
        let mut pre = input.matmul_t(w)?;
        add_bias(&mut pre, &layer.bias);
        h = pre.map(|v| layer.activation.apply(v));
        linears.push(LinearCache {
            input,
            pre,
            site,
            weight_used,
            weight_quant,
        });
    }
    let (out, output_site) = quantize_site("output", h, &quant.acts)?;
    Ok((
        out,
        ForwardCache {
            attention,
            linears,
            output_site,
            batch: bsz,
        },
    ))
}

/// Predictions only.
pub fn predict(model: &ToyModel, batch: &Matrix, quant: &QuantContext<'_>) -> Result<Matrix> {
    Ok(forward(model, batch, quant)?.0)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(1/B) Σ_b ‖ŷ_b − y_b‖²`.
    #[default]
    Mse,
    /// `−(1/B) Σ_b Σ_c y_bc log softmax(ŷ_b)_c` with probability targets.
    CrossEntropy,
}

impl Loss {
    pub fn value(self, pred: &Matrix, target: &Matrix) -> Result<f64> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss",
                lhs: format!("{:?}", pred.shape()),
                rhs: format!("{:?}", target.shape()),
            });
        }
        let b = pred.rows() as f64;
        match self {
            Loss::Mse => Ok(pred.sub(target)?.frobenius_sq() / b),
            Loss::CrossEntropy => {
                let mut total = 0.0;
                for r in 0..pred.rows() {
                    let row = pred.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for (p, y) in row.iter().zip(target.row(r)) {
                        total -= y * (p - lse);
                    }
                }
                Ok(total / b)
            }
        }
    }

    /// `∂loss/∂pred`.
    pub fn gradient(self, pred: &Matrix, target: &Matrix) -> Result<Matrix> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss gradient",
                lhs: format!("{:?}", pred.shape()),
                rhs: format!("{:?}", target.shape()),
            });
        }
        let b = pred.rows() as f64;
        match self {
            Loss::Mse => Ok(pred.sub(target)?.scale(2.0 / b)),
            Loss::CrossEntropy => {
                let mut g = pred.clone();
                softmax_rows(&mut g);
                for r in 0..g.rows() {
                    let y = target.row(r).to_vec();
                    let ysum: f64 = y.iter().sum();
                    for (gv, yv) in g.row_mut(r).iter_mut().zip(&y) {
                        *gv = (*gv * ysum - yv) / b;
                    }
                }
                Ok(g)
            }
        }
    }
}

/// Gradients aligned with [`ToyModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Matrix>,
}

fn mask(upstream: Matrix, site: &Option<SiteQuant>) -> Result<Matrix> {
    match site {
        None => Ok(upstream),
        Some(s) => ste_backward(&upstream, &s.raw, &s.params, &s.scheme),
    }
}

fn mask_weight(grad: Matrix, w: &Matrix, wq: &Option<WeightQuant>) -> Result<Matrix> {
    match wq {
        None => Ok(grad),
        Some(q) => ste_backward(&grad, w, &q.params, &q.scheme),
    }
}

/// Reverse-mode gradients of the loss given `∂loss/∂predictions`.
pub fn backward(model: &ToyModel, cache: &ForwardCache, loss_grad: &Matrix) -> Result<Gradients> {
    if cache.linears.len() != model.layers.len() {
        return Err(Error::InvalidArgument("forward cache does not match model".into()));
    }
    if loss_grad.shape() != (cache.batch, model.output_dim()) {
        return Err(Error::ShapeMismatch {
            op: "backward",
            lhs: format!("loss gradient {:?}", loss_grad.shape()),
            rhs: format!("output {}x{}", cache.batch, model.output_dim()),
        });
    }
    let mut layer_grads: Vec<(Matrix, Matrix)> = Vec::with_capacity(model.layers.len());
    let mut dh = mask(loss_grad.clone(), &cache.output_site)?;
    for (layer, lc) in model.layers.iter().zip(&cache.linears).rev() {
        let mut dz = dh;
        for (g, &z) in dz.data_mut().iter_mut().zip(lc.pre.data()) {
            *g *= layer.activation.grad(z);
        }
        let dw = dz.t_matmul(&lc.input)?;
        let dw = mask_weight(dw, &layer.weight, &lc.weight_quant)?;
        let mut db = vec![0.0; layer.out_dim()];
        for r in 0..dz.rows() {
            for (acc, v) in db.iter_mut().zip(dz.row(r)) {
                *acc += v;
            }
        }
        let w = lc.weight_used.as_ref().unwrap_or(&layer.weight);
        let dinput = dz.matmul(w)?;
        dh = mask(dinput, &lc.site)?;
        layer_grads.push((dw, Matrix::from_raw(1, layer.out_dim(), db)));
    }
    layer_grads.reverse();

    let mut grads = Vec::new();
    if let (Some(a), Some(ac)) = (&model.attention, &cache.attention) {
        grads.extend(attention_backward(a, ac, &dh)?);
    }
    for (dw, db) in layer_grads {
        grads.push(dw);
        grads.push(db);
    }
    Ok(Gradients { grads })
}

/// Returns `[dWq, dWk, dWv, dWo]`.
fn attention_backward(a: &Attention, ac: &AttnCache, dh: &Matrix) -> Result<Vec<Matrix>> {
    let (t, d) = (a.tokens, a.dim);
    let scale = 1.0 / (d as f64).sqrt();
    let bsz = ac.samples.len();
    let wo = &ac.weights_used[3];

    // output projection over all tokens at once
    let dout = Matrix::from_raw(bsz * t, d, dh.data().to_vec());
    let ctx_all = Matrix::from_raw(
        bsz * t,
        d,
        ac.samples.iter().flat_map(|s| s.ctx.data().to_vec()).collect(),
    );
    let dwo = dout.t_matmul(&ctx_all)?;
    let dctx_all = mask(dout.matmul(wo)?, &ac.ctx_site)?;

    let mut dwq = Matrix::zeros(d, d);
    let mut dwk = Matrix::zeros(d, d);
    let mut dwv = Matrix::zeros(d, d);
    for (s, smp) in ac.samples.iter().enumerate() {
        let dctx = Matrix::from_raw(t, d, dctx_all.data()[s * t * d..(s + 1) * t * d].to_vec());
        let dp = dctx.matmul_t(&smp.v)?;
        let dv = smp.p.t_matmul(&dctx)?;
        let mut ds = Matrix::zeros(t, t);
        for r in 0..t {
            let prow = smp.p.row(r);
            let dprow = dp.row(r);
            let inner: f64 = prow.iter().zip(dprow).map(|(p, g)| p * g).sum();
            for c in 0..t {
                ds.set(r, c, prow[c] * (dprow[c] - inner) * scale);
            }
        }
        let dq = ds.matmul(&smp.k)?;
        let dk = ds.t_matmul(&smp.q)?;
        dwq.axpy(1.0, &dq.t_matmul(&smp.xq)?)?;
        dwk.axpy(1.0, &dk.t_matmul(&smp.xq)?)?;
        dwv.axpy(1.0, &dv.t_matmul(&smp.xq)?)?;
    }
    // the block sits on the raw input, so no input gradient is propagated

    Ok(vec![
        mask_weight(dwq, &a.wq, &ac.weight_quant[0])?,
        mask_weight(dwk, &a.wk, &ac.weight_quant[1])?,
        mask_weight(dwv, &a.wv, &ac.weight_quant[2])?,
        mask_weight(dwo, &a.wo, &ac.weight_quant[3])?,
    ])
}
