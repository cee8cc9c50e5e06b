//! Masked training runs: static masks and SET/RigL dynamic masks.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{apply_mask, floor_count, zero_pruned, NetworkMask};
use crate::network::Params;
use crate::rng::Rng;
use crate::train::mlp::{Batch, Mlp};
use crate::train::optim::{Optimizer, OptimizerConfig};
use crate::train::task::DriftTask;

/// Optimization settings. The loss is always mean squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            eval_every: 100,
            eval_batch: 256,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.steps == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::InvalidConfig(
                "steps, eval_every and eval_batch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DstMethod {
    Set,
    Rigl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DstConfig {
    pub method: DstMethod,
    pub update_every: usize,
    /// Fraction of each layer's kept weights replaced at the first update;
    /// it decays along a half cosine to zero at `cosine_decay_end`.
    pub drop_fraction: f64,
    /// Last step at which the mask may change. Defaults to 3/4 of training.
    pub cosine_decay_end: Option<usize>,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            method: DstMethod::Set,
            update_every: 100,
            drop_fraction: 0.3,
            cosine_decay_end: None,
        }
    }
}

impl DstConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_fraction > 0.0 && self.drop_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "drop_fraction {} must be in (0, 1)",
                self.drop_fraction
            )));
        }
        if self.update_every == 0 {
            return Err(Error::InvalidConfig("update_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn decay_end(&self, steps: usize) -> usize {
        self.cosine_decay_end.unwrap_or(steps * 3 / 4)
    }

    /// Drop fraction in effect at `step` (1-based, after that many optimizer
    /// steps), or `None` when no update happens there.
    pub fn fraction_at(&self, step: usize, steps: usize) -> Option<f64> {
        let end = self.decay_end(steps);
        if step == 0 || !step.is_multiple_of(self.update_every) || step > end || end == 0 {
            return None;
        }
        Some(self.drop_fraction * 0.5 * (1.0 + (PI * step as f64 / end as f64).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub eval_loss_current: f64,
    pub eval_loss_final: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn last(&self) -> &RunRow {
        self.rows.last().expect("a run record has at least one row")
    }

    /// Loss on the end-of-drift distribution at the end of training.
    pub fn final_loss(&self) -> f64 {
        self.last().eval_loss_final
    }

    /// CSV with header `step,eval_loss_current,eval_loss_final,density`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let rows = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<std::result::Result<Vec<RunRow>, _>>()?;
        if rows.is_empty() {
            return Err(Error::Format {
                offset: 0,
                reason: "run record has no rows".into(),
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Step-by-step access to a masked training run.
///
/// Parameters at pruned positions are zeroed at construction and again
/// after every optimizer step. Batches for step `t` come from
/// `Rng::new(seed).split(0).split(t)`; evaluation batches for step `t` from
/// `Rng::new(seed).split(1).split(t)`, and the end-of-drift evaluation batch
/// is fixed for the whole run.
pub struct Session<'a> {
    mlp: Mlp,
    mask: NetworkMask,
    task: &'a DriftTask,
    cfg: TrainerConfig,
    opt: Optimizer,
    step: usize,
    stream: Rng,
    eval_root: Rng,
    final_eval: (Batch, Batch),
    last_grads: Option<Params>,
}

impl<'a> Session<'a> {
    pub fn new(mlp: &Mlp, mask: &NetworkMask, task: &'a DriftTask, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        mask.check_spec(mlp.spec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        if mlp.input_dim() != task.input_dim() || mlp.output_dim() != task.teacher.output_dim() {
            return Err(Error::ShapeMismatch("network and task dimensions differ".into()));
        }
        let mut mlp = mlp.clone();
        zero_pruned(&mut mlp.params, mask);
        let root = Rng::new(cfg.seed);
        let eval_root = root.split(1);
        let final_eval = task.sample(task.horizon, cfg.eval_batch, &mut eval_root.split(u64::MAX))?;
        let opt = Optimizer::new(cfg.optimizer, &mlp.params);
        Ok(Self {
            mlp,
            mask: mask.clone(),
            task,
            cfg: *cfg,
            opt,
            step: 0,
            stream: root.split(0),
            eval_root,
            final_eval,
            last_grads: None,
        })
    }

    pub fn params(&self) -> &Params {
        &self.mlp.params
    }

    pub fn mask(&self) -> &NetworkMask {
        &self.mask
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Dense gradient from the most recent step.
    pub fn last_grads(&self) -> Option<&Params> {
        self.last_grads.as_ref()
    }

    /// One optimizer step on a fresh batch; returns the training loss.
    pub fn step(&mut self) -> Result<f64> {
        let (x, y) = self
            .task
            .sample(self.step, self.task.batch, &mut self.stream.split(self.step as u64))?;
        let effective = apply_mask(&self.mlp.params, &self.mask)?;
        let (loss, grads) = self
            .mlp
            .loss_and_grad_effective(&effective, &x, &y)
            .map_err(|_| Error::Diverged { step: self.step })?;
        self.opt.step(&mut self.mlp.params, &grads);
        zero_pruned(&mut self.mlp.params, &self.mask);
        if self.mlp.params.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { step: self.step });
        }
        self.last_grads = Some(grads);
        self.step += 1;
        Ok(loss)
    }

    pub fn evaluate(&self) -> Result<RunRow> {
        let (x, y) = self.task.sample(
            self.step,
            self.cfg.eval_batch,
            &mut self.eval_root.split(self.step as u64),
        )?;
        let effective = apply_mask(&self.mlp.params, &self.mask)?;
        let current = self.mlp.loss_effective(&effective, &x, &y);
        let end = self.mlp.loss_effective(&effective, &self.final_eval.0, &self.final_eval.1);
        if !current.is_finite() || !end.is_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        Ok(RunRow {
            step: self.step,
            eval_loss_current: current,
            eval_loss_final: end,
            density: self.mask.kept() as f64 / self.mask.total() as f64,
        })
    }

    /// Prune-and-regrow on every matrix layer with `fraction` of its kept
    /// weights: drop the smallest magnitudes (ties by index), regrow the same
    /// number among positions that were pruned before this update, either
    /// uniformly (SET, from `rng.split(layer)`) or by largest dense gradient
    /// magnitude (RigL, ties by index). Regrown weights start at zero.
    /// Returns the number of positions moved.
    pub fn prune_and_regrow(&mut self, method: DstMethod, fraction: f64, rng: &Rng) -> Result<usize> {
        let grads = self
            .last_grads
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("mask update before the first step".into()))?;
        let mut moved = 0;
        for l in 0..self.mask.masks.len() {
            if !self.mask.masks[l].spec.is_matrix() {
                continue;
            }
            let kept = self.mask.masks[l].kept_indices();
            let pruned = self.mask.masks[l].pruned_indices();
            let n = floor_count(fraction * kept.len() as f64).min(pruned.len());
            if n == 0 {
                continue;
            }
            let w = &self.mlp.params[l];
            let mut by_magnitude = kept;
            by_magnitude.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
            let dropped = &by_magnitude[..n];

            let grown = match method {
                DstMethod::Set => rng.split(l as u64).sample_from(&pruned, n),
                DstMethod::Rigl => {
                    let g = &grads[l];
                    let mut ranked = pruned;
                    ranked.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
                    ranked.truncate(n);
                    ranked
                }
            };
            for &i in dropped {
                self.mask.masks[l].set(i, false);
                self.mlp.params[l][i] = 0.0;
                self.opt.reset(l, i);
            }
            for &i in &grown {
                self.mask.masks[l].set(i, true);
                self.mlp.params[l][i] = 0.0;
                self.opt.reset(l, i);
            }
            moved += n;
        }
        Ok(moved)
    }

    fn should_eval(&self) -> bool {
        self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps
    }
}

fn run(mut session: Session<'_>, dst: Option<(&DstConfig, &Rng)>) -> Result<RunRecord> {
    let steps = session.cfg.steps;
    let mut rows = vec![session.evaluate()?];
    while session.step < steps {
        session.step()?;
        if let Some((cfg, rng)) = dst {
            if let Some(fraction) = cfg.fraction_at(session.step, steps) {
                session.prune_and_regrow(cfg.method, fraction, &rng.split(session.step as u64))?;
            }
        }
        if session.should_eval() {
            rows.push(session.evaluate()?);
        }
    }
    Ok(RunRecord { rows })
}

/// Trains with a fixed mask on the drifting stream.
pub fn train_static(mlp: &Mlp, mask: &NetworkMask, task: &DriftTask, cfg: &TrainerConfig) -> Result<RunRecord> {
    run(Session::new(mlp, mask, task, cfg)?, None)
}

/// Trains while periodically replacing part of each matrix layer's mask.
pub fn train_dst(
    mlp: &Mlp,
    mask: &NetworkMask,
    task: &DriftTask,
    cfg: &TrainerConfig,
    dst: &DstConfig,
    rng: &Rng,
) -> Result<RunRecord> {
    dst.validate()?;
    run(Session::new(mlp, mask, task, cfg)?, Some((dst, rng)))
}
