use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::NetworkMask;
use crate::network::{check_params, init_params, NetworkSpec, Params, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Row-major `rows x cols` block of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} batch",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    stages: Vec<Stage>,
    pub params: Params,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(spec: NetworkSpec, params: Params, activation: Activation) -> Result<Self> {
        let stages = spec.stages()?;
        check_params(&spec, &params)?;
        for (l, p) in params.iter().enumerate() {
            if let Some(i) = p.iter().position(|w| !w.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter {i} of layer `{}`",
                    spec.layers[l].name
                )));
            }
        }
        Ok(Self {
            spec,
            stages,
            params,
            activation,
        })
    }

    /// Network with fan-in uniform initial parameters.
    pub fn init(spec: NetworkSpec, activation: Activation) -> Result<Self> {
        let params = init_params(&spec);
        Self::new(spec, params, activation)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.stages[self.stages.len() - 1].n_out
    }

    fn check_mask(&self, mask: &NetworkMask) -> Result<()> {
        mask.check_spec(&self.spec).map_err(|e| match e {
            Error::StructuralMismatch(m) => Error::ShapeMismatch(m),
            other => other,
        })
    }

    fn check_inputs(&self, inputs: &Batch) -> Result<()> {
        if inputs.cols != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} columns, network expects {}",
                inputs.cols,
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Outputs of `theta ⊙ mask` on `inputs`.
    pub fn forward(&self, mask: &NetworkMask, inputs: &Batch) -> Result<Batch> {
        self.check_mask(mask)?;
        self.check_inputs(inputs)?;
        let effective = crate::mask::apply_mask(&self.params, mask)?;
        Ok(self.forward_effective(&effective, inputs).pop().expect("at least one stage"))
    }

    /// Forward pass with already-masked parameters; returns every stage's
    /// activations (the last one is the output, left linear).
    pub(crate) fn forward_effective(&self, params: &Params, inputs: &Batch) -> Vec<Batch> {
        let mut acts: Vec<Batch> = Vec::with_capacity(self.stages.len());
        let last = self.stages.len() - 1;
        for (k, stage) in self.stages.iter().enumerate() {
            let input = if k == 0 { inputs } else { &acts[k - 1] };
            let w = &params[stage.weight];
            let mut out = vec![0.0; input.rows * stage.n_out];
            for r in 0..input.rows {
                let x = input.row(r);
                let o = &mut out[r * stage.n_out..(r + 1) * stage.n_out];
                for (i, oi) in o.iter_mut().enumerate() {
                    let row = &w[i * stage.n_in..(i + 1) * stage.n_in];
                    let mut z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    if let Some(b) = stage.bias {
                        z += params[b][i];
                    }
                    *oi = if k == last { z } else { self.activation.apply(z) };
                }
            }
            acts.push(Batch {
                rows: input.rows,
                cols: stage.n_out,
                data: out,
            });
        }
        acts
    }

    /// Mean squared error over all outputs, and its gradient with respect to
    /// every effective parameter `theta ⊙ mask`, pruned positions included.
    pub fn loss_and_grad(
        &self,
        mask: &NetworkMask,
        inputs: &Batch,
        targets: &Batch,
    ) -> Result<(f64, Params)> {
        self.check_mask(mask)?;
        self.check_inputs(inputs)?;
        let effective = crate::mask::apply_mask(&self.params, mask)?;
        self.loss_and_grad_effective(&effective, inputs, targets)
    }

    pub(crate) fn loss_and_grad_effective(
        &self,
        params: &Params,
        inputs: &Batch,
        targets: &Batch,
    ) -> Result<(f64, Params)> {
        if targets.rows != inputs.rows || targets.cols != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "targets are {}x{}, expected {}x{}",
                targets.rows,
                targets.cols,
                inputs.rows,
                self.output_dim()
            )));
        }
        let acts = self.forward_effective(params, inputs);
        let output = acts.last().expect("at least one stage");
        let scale = 1.0 / (output.data.len().max(1)) as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = output
            .data
            .iter()
            .zip(&targets.data)
            .map(|(y, t)| {
                let e = y - t;
                loss += e * e;
                2.0 * e * scale
            })
            .collect();
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut grads: Params = params.iter().map(|p| vec![0.0; p.len()]).collect();
        for k in (0..self.stages.len()).rev() {
            let stage = self.stages[k];
            let input = if k == 0 { inputs } else { &acts[k - 1] };
            let gw = &mut grads[stage.weight];
            for r in 0..input.rows {
                let x = input.row(r);
                let d = &delta[r * stage.n_out..(r + 1) * stage.n_out];
                for (i, &di) in d.iter().enumerate() {
                    if di == 0.0 {
                        continue;
                    }
                    let g = &mut gw[i * stage.n_in..(i + 1) * stage.n_in];
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += di * xj;
                    }
                }
            }
            if let Some(b) = stage.bias {
                let gb = &mut grads[b];
                for r in 0..input.rows {
                    for (i, gbi) in gb.iter_mut().enumerate() {
                        *gbi += delta[r * stage.n_out + i];
                    }
                }
            }
            if k > 0 {
                let w = &params[stage.weight];
                let mut prev = vec![0.0; input.rows * stage.n_in];
                for r in 0..input.rows {
                    let d = &delta[r * stage.n_out..(r + 1) * stage.n_out];
                    let p = &mut prev[r * stage.n_in..(r + 1) * stage.n_in];
                    for (i, &di) in d.iter().enumerate() {
                        if di == 0.0 {
                            continue;
                        }
                        let row = &w[i * stage.n_in..(i + 1) * stage.n_in];
                        for (pj, wj) in p.iter_mut().zip(row) {
                            *pj += di * wj;
                        }
                    }
                    for (pj, aj) in p.iter_mut().zip(input.row(r)) {
                        *pj *= self.activation.slope(*aj);
                    }
                }
                delta = prev;
            }
        }
        Ok((loss, grads))
    }

    pub(crate) fn loss_effective(&self, params: &Params, inputs: &Batch, targets: &Batch) -> f64 {
        let acts = self.forward_effective(params, inputs);
        let out = acts.last().expect("at least one stage");
        let n = out.data.len().max(1) as f64;
        out.data
            .iter()
            .zip(&targets.data)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>()
            / n
    }
}
