//! Checkpoint-level spectral audits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::diagnostics::{audit_layer_with, AuditOptions, PcdrReport};
use crate::error::Result;
use crate::train::task::{gaussian, CALIB_STREAM};
use crate::train::trainer::layer_inputs;
use crate::train::make_spiked_task;

/// Audits a checkpoint. A checkpoint that rebuilds into a model under `cfg` is
/// audited layer by layer on the task's calibration stream, each weight seeing its
/// real inputs. Any other container is audited tensor by tensor on standard
/// Gaussian inputs of matching width. `only` restricts the audit to named tensors.
pub fn audit_checkpoint(
    ckpt: &Checkpoint,
    cfg: &ExperimentConfig,
    opts: AuditOptions,
    only: &[String],
) -> Result<Vec<PcdrReport>> {
    ckpt.require(only)?;
    let wanted = |name: &str| only.is_empty() || only.iter().any(|o| o == name);
    let seed = cfg.calibration_seed();
    let batch = cfg.calibration.batch_size;

    if let Ok(model) = ckpt.to_model(cfg.model.hidden_activation) {
        if model.input_dim() == cfg.task.input_dim {
            let task = make_spiked_task(&cfg.task, cfg.task_seed())?;
            let calib = task.sample_inputs(&mut task.calibration_stream(seed), batch);
            let inputs = layer_inputs(&model, &calib)?;
            return model
                .weight_matrices()
                .into_iter()
                .filter(|(name, _, _)| wanted(&format!("{name}.weight")))
                .map(|(name, _, w)| audit_layer_with(&format!("{name}.weight"), w, &inputs[&name], opts))
                .collect();
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CALIB_STREAM);
    ckpt.names()
        .filter(|n| wanted(n))
        .map(|name| {
            let w = ckpt.get(name).expect("listed name");
            let calib = gaussian(&mut rng, batch, w.cols(), 1.0);
            audit_layer_with(name, w, &calib, opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::train::init_model;

    fn opts() -> AuditOptions {
        AuditOptions {
            k_max: 3,
            top_percent: None,
        }
    }

    #[test]
    fn identity_tensors_have_unit_sigma() {
        let ck = Checkpoint::new(vec![
            ("a".into(), Matrix::identity(4)),
            ("b".into(), Matrix::identity(7)),
        ])
        .unwrap();
        let reps = audit_checkpoint(&ck, &ExperimentConfig::default(), opts(), &[]).unwrap();
        assert_eq!(reps.len(), 2);
        for r in reps {
            assert!((r.sigma_max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_layer_has_unit_pcdr1() {
        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 1.0, -1.0, 2.0];
        let w = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let ck = Checkpoint::new(vec![("spike".into(), w), ("eye".into(), Matrix::identity(3))]).unwrap();
        let reps = audit_checkpoint(&ck, &ExperimentConfig::default(), opts(), &["spike".into()]).unwrap();
        assert_eq!(reps.len(), 1);
        assert!((reps[0].pcdr_at(1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_checkpoint_audits_every_weight() {
        let cfg = ExperimentConfig::default();
        let ck = Checkpoint::from_model(&init_model(&cfg).unwrap());
        let reps = audit_checkpoint(&ck, &cfg, opts(), &[]).unwrap();
        let names: Vec<&str> = reps.iter().map(|r| r.layer_name.as_str()).collect();
        assert_eq!(names, ["fc1.weight", "fc2.weight", "fc3.weight"]);
        let again = audit_checkpoint(&ck, &cfg, opts(), &[]).unwrap();
        assert_eq!(reps, again);
    }

    #[test]
    fn missing_tensor_is_named() {
        let ck = Checkpoint::new(vec![("a".into(), Matrix::identity(2))]).unwrap();
        let err = audit_checkpoint(&ck, &ExperimentConfig::default(), opts(), &["zz".into()]).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }
}
