//! Min-max round-to-nearest post-training quantization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{forward, predict, ActQuant, Loss, QuantContext, ToyModel};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::quant::{calibrate, quant_mse, quantize_dequantize, BitSetting, QuantParams, QuantScheme};

/// Weight and activation schemes before bit widths are applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSchemes {
    pub weights: QuantScheme,
    pub activations: QuantScheme,
}

impl Default for QuantSchemes {
    fn default() -> Self {
        Self {
            weights: QuantScheme::weights(8),
            activations: QuantScheme::activations(8),
        }
    }
}

impl QuantSchemes {
    pub fn at(&self, setting: BitSetting) -> Result<(QuantScheme, QuantScheme)> {
        let w = self.weights.with_bits(setting.w_bits);
        let a = self.activations.with_bits(setting.a_bits);
        w.validate()?;
        a.validate()?;
        Ok((w, a))
    }
}

/// Model with fake-quantized weights plus frozen activation parameters per site.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: ToyModel,
    pub act_scheme: QuantScheme,
    pub act_params: BTreeMap<String, QuantParams>,
    /// Per-weight quantization MSE.
    pub weight_mse: BTreeMap<String, f64>,
}

impl QuantizedModel {
    pub fn context(&self) -> QuantContext<'_> {
        QuantContext {
            weights: None,
            acts: ActQuant::Frozen {
                scheme: self.act_scheme,
                params: &self.act_params,
            },
        }
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        predict(&self.model, batch, &self.context())
    }
}

/// Quantizes weights, then calibrates every activation site on `calibration`
/// using the weight-quantized model.
pub fn ptq_model(
    model: &ToyModel,
    calibration: &Matrix,
    w_scheme: &QuantScheme,
    a_scheme: &QuantScheme,
) -> Result<QuantizedModel> {
    w_scheme.validate()?;
    a_scheme.validate()?;
    let mut weight_mse = BTreeMap::new();
    let qmodel = model.map_weights(|name, w| {
        weight_mse.insert(name.to_string(), quant_mse(w, w_scheme)?);
        quantize_dequantize(w, w_scheme)
    })?;
    let (out, cache) = forward(&qmodel, calibration, &QuantContext::default())?;
    let mut act_params = BTreeMap::new();
    if let (Some(xin), Some(ctx)) = (cache.attention_input(), cache.attention_context()) {
        act_params.insert("attn.input".to_string(), calibrate(&xin, a_scheme)?);
        act_params.insert("attn.o.input".to_string(), calibrate(&ctx, a_scheme)?);
    }
    for (layer, input) in qmodel.layers.iter().zip(cache.layer_inputs()) {
        act_params.insert(format!("{}.input", layer.name), calibrate(input, a_scheme)?);
    }
    act_params.insert("output".to_string(), calibrate(&out, a_scheme)?);
    Ok(QuantizedModel {
        model: qmodel,
        act_scheme: *a_scheme,
        act_params,
        weight_mse,
    })
}

/// Eval loss of a PTQ model at one bit setting.
pub fn quantized_eval_loss(
    model: &ToyModel,
    schemes: &QuantSchemes,
    setting: BitSetting,
    calibration: &Matrix,
    eval: (&Matrix, &Matrix),
    loss: Loss,
) -> Result<(f64, QuantizedModel)> {
    let (w, a) = schemes.at(setting)?;
    let q = ptq_model(model, calibration, &w, &a)?;
    let pred = q.predict(eval.0)?;
    Ok((loss.value(&pred, eval.1)?, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::model::{Activation, Linear};
    use crate::Error;

    fn mlp() -> ToyModel {
        let w1 = Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let w2 = Matrix::from_fn(2, 4, |i, j| ((i * 4 + j) as f64 * 0.53).cos());
        ToyModel::new(
            None,
            vec![
                Linear::new("fc1", w1, vec![0.1, -0.2, 0.0, 0.3], Activation::Gelu),
                Linear::new("fc2", w2, vec![0.0, 0.05], Activation::None),
            ],
        )
        .unwrap()
    }

    fn batch() -> Matrix {
        Matrix::from_fn(16, 3, |i, j| ((i * 7 + j * 3) as f64 * 0.19).sin() * 2.0)
    }

    #[test]
    fn all_zero_model_is_unchanged() {
        let m = mlp().map_weights(|_, w| Ok(Matrix::zeros(w.rows(), w.cols()))).unwrap();
        let m = ToyModel {
            layers: m
                .layers
                .into_iter()
                .map(|mut l| {
                    l.bias = Matrix::zeros(1, l.out_dim());
                    l
                })
                .collect(),
            ..m
        };
        let x = batch();
        let q = ptq_model(&m, &x, &QuantScheme::weights(4), &QuantScheme::activations(4)).unwrap();
        let fp = predict(&m, &x, &QuantContext::default()).unwrap();
        assert_eq!(q.predict(&x).unwrap(), fp);
    }

    #[test]
    fn calibrates_every_site() {
        let m = mlp();
        let q = ptq_model(&m, &batch(), &QuantScheme::weights(8), &QuantScheme::activations(8)).unwrap();
        let sites: Vec<_> = q.act_params.keys().cloned().collect();
        let mut expect = m.quant_sites();
        expect.sort();
        assert_eq!(sites, expect);
    }

    #[test]
    fn missing_site_names_the_site() {
        let m = mlp();
        let mut q = ptq_model(&m, &batch(), &QuantScheme::weights(8), &QuantScheme::activations(8)).unwrap();
        q.act_params.remove("fc2.input");
        match q.predict(&batch()) {
            Err(Error::MissingCalibration(s)) => assert_eq!(s, "fc2.input"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn more_bits_track_fp_more_closely() {
        let m = mlp();
        let x = batch();
        let fp = predict(&m, &x, &QuantContext::default()).unwrap();
        let err = |b: u32| {
            let q = ptq_model(&m, &x, &QuantScheme::weights(b), &QuantScheme::activations(b)).unwrap();
            q.predict(&x).unwrap().sub(&fp).unwrap().frobenius()
        };
        assert!(err(8) < err(4));
        assert!(err(4) < err(2));
    }
}
