//! Synthetic regression tasks with a spectrally spiked teacher.
//!
//! The teacher is a two-layer GELU network. Its first-layer weight is built as
//! `U diag(s) Vᵀ` with random orthonormal `U`, `V` and a geometrically decaying
//! spectrum `s_r = scale · decay^r`; the leading value is then multiplied by
//! `spike_gain`. With `align_spike` the spiked output direction is a single
//! teacher hidden unit. Students fitting this teacher are pushed toward one
//! dominant singular direction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{predict, Activation, Linear, QuantContext, ToyModel};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Regression,
    /// One-hot targets at the argmax of the teacher output.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub input_dim: usize,
    pub output_dim: usize,
    pub teacher_hidden: usize,
    /// Seed of the teacher and the training stream; falls back to the experiment seed.
    pub seed: Option<u64>,
    pub spike_gain: f64,
    /// Leading singular value of the unspiked teacher layer.
    pub spectrum_scale: f64,
    /// Ratio between consecutive teacher singular values.
    pub spectrum_decay: f64,
    pub noise_std: f64,
    /// Route the spike through teacher hidden unit 0 instead of a dense direction.
    pub align_spike: bool,
    pub kind: TaskKind,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            input_dim: 32,
            output_dim: 8,
            teacher_hidden: 64,
            seed: None,
            spike_gain: 20.0,
            spectrum_scale: 1.0,
            spectrum_decay: 0.1,
            noise_std: 0.5,
            align_spike: true,
            kind: TaskKind::Regression,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.output_dim == 0 || self.teacher_hidden == 0 {
            return bad("task: input_dim, output_dim and teacher_hidden must be positive".into());
        }
        if !(self.spike_gain >= 1.0) {
            return bad(format!("task.spike_gain: must be >= 1, got {}", self.spike_gain));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("task.noise_std: must be >= 0, got {}", self.noise_std));
        }
        if !(self.spectrum_decay > 0.0 && self.spectrum_decay <= 1.0) {
            return bad(format!("task.spectrum_decay: must lie in (0, 1], got {}", self.spectrum_decay));
        }
        if !(self.spectrum_scale > 0.0) {
            return bad("task.spectrum_scale: must be > 0".into());
        }
        Ok(())
    }

    pub fn resolved_seed(&self, experiment_seed: u64) -> u64 {
        self.seed.unwrap_or(experiment_seed)
    }
}

/// Frozen teacher plus the seeded sample stream.
#[derive(Debug, Clone)]
pub struct SpikedTask {
    pub cfg: SyntheticTask,
    pub teacher: ToyModel,
    /// Singular values of the teacher's first layer (after the spike).
    pub teacher_sigma: Vec<f64>,
    seed: u64,
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Stream ids used with [`ChaCha8Rng::set_stream`].
const TEACHER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
pub(crate) const CALIB_STREAM: u64 = 3;

/// Builds the spiked teacher for `cfg` with the given seed.
pub fn make_spiked_task(cfg: &SyntheticTask, seed: u64) -> Result<SpikedTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TEACHER_STREAM);
    let (h, d) = (cfg.teacher_hidden, cfg.input_dim);
    let rank = h.min(d);
    let mut left = svd(&gaussian(&mut rng, h, rank, 1.0))?.u;
    if cfg.align_spike {
        left = axis_align_first(&left);
    }
    let right = svd(&gaussian(&mut rng, d, rank, 1.0))?.u;
    let mut sigma: Vec<f64> = (0..rank)
        .map(|r| cfg.spectrum_scale * cfg.spectrum_decay.powi(r as i32))
        .collect();
    sigma[0] *= cfg.spike_gain;
    let w1 = Matrix::from_fn(h, d, |i, j| {
        (0..rank).map(|r| left.get(i, r) * sigma[r] * right.get(j, r)).sum()
    });
    let w2 = gaussian(&mut rng, cfg.output_dim, h, 1.0 / (h as f64).sqrt());
    let teacher = ToyModel::new(
        None,
        vec![
            Linear::new("teacher1", w1, vec![0.0; h], Activation::Gelu),
            Linear::new("teacher2", w2, vec![0.0; cfg.output_dim], Activation::None),
        ],
    )?;
    Ok(SpikedTask {
        cfg: cfg.clone(),
        teacher,
        teacher_sigma: sigma,
        seed,
    })
}

/// Householder reflection of `q` mapping its first column onto `e_0`.
fn axis_align_first(q: &Matrix) -> Matrix {
    let mut w: Vec<f64> = q.col(0);
    w[0] -= 1.0;
    let nn: f64 = w.iter().map(|v| v * v).sum();
    if nn < 1e-24 {
        return q.clone();
    }
    let mut out = q.clone();
    for c in 0..q.cols() {
        let col = q.col(c);
        let d: f64 = col.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * 2.0 / nn;
        for r in 0..q.rows() {
            out.set(r, c, col[r] - d * w[r]);
        }
    }
    out
}

/// Deterministic batch source.
#[derive(Debug, Clone)]
pub struct DataStream {
    rng: ChaCha8Rng,
}

impl SpikedTask {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn teacher_first_layer(&self) -> &Matrix {
        &self.teacher.layers[0].weight
    }

    /// Training stream.
    pub fn train_stream(&self) -> DataStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(TRAIN_STREAM);
        DataStream { rng }
    }

    /// Held-out stream drawn from `seed + 1`.
    pub fn eval_stream(&self) -> DataStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        rng.set_stream(EVAL_STREAM);
        DataStream { rng }
    }

    /// Calibration stream for audits and PTQ.
    pub fn calibration_stream(&self, calib_seed: u64) -> DataStream {
        let mut rng = ChaCha8Rng::seed_from_u64(calib_seed);
        rng.set_stream(CALIB_STREAM);
        DataStream { rng }
    }

    /// Draws `n` samples: inputs `N(0, I)`, targets from the teacher.
    pub fn sample(&self, stream: &mut DataStream, n: usize) -> Result<(Matrix, Matrix)> {
        let x = gaussian(&mut stream.rng, n, self.cfg.input_dim, 1.0);
        let mut y = predict(&self.teacher, &x, &QuantContext::default())?;
        if self.cfg.noise_std > 0.0 {
            let noise = gaussian(&mut stream.rng, n, self.cfg.output_dim, self.cfg.noise_std);
            y.axpy(1.0, &noise)?;
        }
        if self.cfg.kind == TaskKind::Classification {
            y = one_hot_argmax(&y);
        }
        Ok((x, y))
    }

    /// Inputs only.
    pub fn sample_inputs(&self, stream: &mut DataStream, n: usize) -> Matrix {
        gaussian(&mut stream.rng, n, self.cfg.input_dim, 1.0)
    }
}

fn one_hot_argmax(y: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let row = y.row(r);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        out.set(r, best, 1.0);
    }
    out
}
