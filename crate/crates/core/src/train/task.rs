//! Covariate-shift regression stream.
//!
//! Inputs at step `t` are Gaussian with mean `mu(t) = mu_0 + (t / T)(mu_T - mu_0)`
//! (clamped at `T`) and a shared standard deviation; targets come from a
//! fixed teacher network. This stands in for a data distribution that drifts
//! while the learner trains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::NetworkMask;
use crate::network::{init_params, NetworkSpec};
use crate::rng::Rng;
use crate::train::mlp::{Activation, Batch, Mlp};

#[derive(Debug, Clone)]
pub struct DriftTask {
    pub teacher: Mlp,
    teacher_mask: NetworkMask,
    pub mean_start: Vec<f64>,
    pub mean_end: Vec<f64>,
    pub input_std: f64,
    pub horizon: usize,
    pub batch: usize,
}

impl DriftTask {
    pub fn new(
        teacher: Mlp,
        mean_start: Vec<f64>,
        mean_end: Vec<f64>,
        input_std: f64,
        horizon: usize,
        batch: usize,
    ) -> Result<Self> {
        let dim = teacher.input_dim();
        if mean_start.len() != dim || mean_end.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "drift means must have length {dim}"
            )));
        }
        if !(input_std > 0.0 && input_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("input_std {input_std} must be positive")));
        }
        if horizon == 0 || batch == 0 {
            return Err(Error::InvalidConfig("horizon and batch must be at least 1".into()));
        }
        let teacher_mask = NetworkMask::dense(teacher.spec());
        Ok(Self {
            teacher,
            teacher_mask,
            mean_start,
            mean_end,
            input_std,
            horizon,
            batch,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.teacher.input_dim()
    }

    pub fn mean_at(&self, step: usize) -> Vec<f64> {
        let frac = step.min(self.horizon) as f64 / self.horizon as f64;
        self.mean_start
            .iter()
            .zip(&self.mean_end)
            .map(|(a, b)| a + frac * (b - a))
            .collect()
    }

    pub fn sample_inputs(&self, step: usize, rows: usize, rng: &mut Rng) -> Batch {
        let mean = self.mean_at(step);
        let data = (0..rows)
            .flat_map(|_| mean.iter().map(|m| m + self.input_std * rng.normal()).collect::<Vec<_>>())
            .collect();
        Batch {
            rows,
            cols: mean.len(),
            data,
        }
    }

    pub fn targets(&self, inputs: &Batch) -> Result<Batch> {
        self.teacher.forward(&self.teacher_mask, inputs)
    }

    /// `(inputs, targets)` drawn from the distribution at `step`.
    pub fn sample(&self, step: usize, rows: usize, rng: &mut Rng) -> Result<(Batch, Batch)> {
        let x = self.sample_inputs(step, rows, rng);
        let y = self.targets(&x)?;
        Ok((x, y))
    }
}

/// Declarative description of a [`DriftTask`] whose teacher shares the
/// student's layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Distance between the start and end input means.
    pub drift: f64,
    pub input_std: f64,
    pub batch: usize,
    /// Steps over which the mean moves; defaults to the training length.
    pub horizon: Option<usize>,
    pub teacher_seed: u64,
    /// Multiplier on the teacher's fan-in initialization.
    pub teacher_gain: f64,
    pub teacher_activation: Activation,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            drift: 3.0,
            input_std: 1.0,
            batch: 32,
            horizon: None,
            teacher_seed: 1234,
            teacher_gain: 2.0,
            teacher_activation: Activation::Tanh,
        }
    }
}

impl TaskConfig {
    /// Teacher: the student layout re-initialized from `teacher_seed` and
    /// scaled by `teacher_gain`. The drift direction is a unit vector drawn
    /// from the same seed; the stream starts at the origin.
    pub fn build(&self, spec: &NetworkSpec, steps: usize) -> Result<DriftTask> {
        let teacher_spec = spec.with_seed(self.teacher_seed);
        let params = init_params(&teacher_spec)
            .into_iter()
            .map(|p| p.into_iter().map(|w| w * self.teacher_gain).collect())
            .collect();
        let teacher = Mlp::new(teacher_spec, params, self.teacher_activation)?;
        let dim = teacher.input_dim();
        let mut rng = Rng::new(self.teacher_seed).split(u64::MAX);
        let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let mean_end = dir.iter().map(|v| self.drift * v / norm).collect();
        DriftTask::new(
            teacher,
            vec![0.0; dim],
            mean_end,
            self.input_std,
            self.horizon.unwrap_or(steps).max(1),
            self.batch,
        )
    }
}
