//! Network layout and parameter initialization.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-layer parameter values, aligned with a [`NetworkSpec`].
/// Matrix layers are stored row-major (`index = row * n_in + col`).
pub type Params = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Matrix { n_out: usize, n_in: usize },
    Vector { n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayerSpec", into = "RawLayerSpec")]
pub struct LayerSpec {
    pub name: String,
    pub shape: LayerShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Matrix,
    Vector,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayerSpec {
    name: String,
    kind: RawKind,
    shape: Vec<usize>,
}

impl TryFrom<RawLayerSpec> for LayerSpec {
    type Error = String;

    fn try_from(raw: RawLayerSpec) -> std::result::Result<Self, String> {
        let shape = match (raw.kind, raw.shape.as_slice()) {
            (RawKind::Matrix, &[n_out, n_in]) => LayerShape::Matrix { n_out, n_in },
            (RawKind::Vector, &[n]) => LayerShape::Vector { n },
            (kind, dims) => {
                return Err(format!(
                    "layer `{}`: kind {:?} cannot have shape {:?}",
                    raw.name, kind, dims
                ))
            }
        };
        Ok(LayerSpec {
            name: raw.name,
            shape,
        })
    }
}

impl From<LayerSpec> for RawLayerSpec {
    fn from(spec: LayerSpec) -> Self {
        let (kind, shape) = match spec.shape {
            LayerShape::Matrix { n_out, n_in } => (RawKind::Matrix, vec![n_out, n_in]),
            LayerShape::Vector { n } => (RawKind::Vector, vec![n]),
        };
        RawLayerSpec {
            name: spec.name,
            kind,
            shape,
        }
    }
}

impl LayerSpec {
    pub fn matrix(name: impl Into<String>, n_out: usize, n_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: LayerShape::Matrix { n_out, n_in },
        }
    }

    pub fn vector(name: impl Into<String>, n: usize) -> Self {
        Self {
            name: name.into(),
            shape: LayerShape::Vector { n },
        }
    }

    /// Parameter count `d`.
    pub fn len(&self) -> usize {
        match self.shape {
            LayerShape::Matrix { n_out, n_in } => n_out * n_in,
            LayerShape::Vector { n } => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self.shape, LayerShape::Matrix { .. })
    }

    /// `(n_out, n_in)` for matrix layers.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self.shape {
            LayerShape::Matrix { n_out, n_in } => Some((n_out, n_in)),
            LayerShape::Vector { .. } => None,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self.shape {
            LayerShape::Matrix { .. } => "matrix",
            LayerShape::Vector { .. } => "vector",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.shape {
            LayerShape::Matrix { n_out, n_in } => n_out >= 1 && n_in >= 1,
            LayerShape::Vector { n } => n >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "layer `{}` has a zero dimension",
                self.name
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub init_seed: u64,
}

/// One affine stage of an MLP: a weight matrix and its optional bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub weight: usize,
    pub bias: Option<usize>,
    pub n_out: usize,
    pub n_in: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, init_seed: u64) -> Result<Self> {
        let spec = Self { layers, init_seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Fully connected layout `widths[0] -> widths[1] -> ...`, with a bias
    /// vector after every weight matrix when `bias` is set.
    pub fn mlp(widths: &[usize], bias: bool, init_seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec("an MLP needs at least two widths".into()));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::matrix(format!("fc{}.weight", i + 1), pair[1], pair[0]));
            if bias {
                layers.push(LayerSpec::vector(format!("fc{}.bias", i + 1), pair[1]));
            }
        }
        Self::new(layers, init_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            layer.validate()?;
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::len).sum()
    }

    /// Indices of matrix layers in order.
    pub fn matrix_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_matrix())
            .collect()
    }

    /// Checks that matrix layers chain (`n_in` of each equals `n_out` of
    /// the previous) and returns them in order. Vector layers are ignored.
    pub fn matrix_chain(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut chain = Vec::new();
        let mut prev_out: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((n_out, n_in)) = layer.dims() {
                if let Some(p) = prev_out {
                    if p != n_in {
                        return Err(Error::ShapeMismatch(format!(
                            "layer `{}` expects {} inputs but the previous matrix emits {}",
                            layer.name, n_in, p
                        )));
                    }
                }
                prev_out = Some(n_out);
                chain.push((i, n_out, n_in));
            }
        }
        if chain.is_empty() {
            return Err(Error::ShapeMismatch("no matrix layers".into()));
        }
        Ok(chain)
    }

    /// MLP interpretation: every matrix starts a stage, and a vector layer
    /// directly after it with length `n_out` is that stage's bias.
    pub fn stages(&self) -> Result<Vec<Stage>> {
        self.matrix_chain()?;
        let mut stages: Vec<Stage> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.shape {
                LayerShape::Matrix { n_out, n_in } => stages.push(Stage {
                    weight: i,
                    bias: None,
                    n_out,
                    n_in,
                }),
                LayerShape::Vector { n } => match stages.last_mut() {
                    Some(stage) if stage.bias.is_none() && stage.weight + 1 == i && stage.n_out == n => {
                        stage.bias = Some(i)
                    }
                    _ => {
                        return Err(Error::ShapeMismatch(format!(
                            "vector layer `{}` is not the bias of the preceding matrix",
                            layer.name
                        )))
                    }
                },
            }
        }
        Ok(stages)
    }

    pub fn input_dim(&self) -> Result<usize> {
        Ok(self.matrix_chain()?[0].2)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.matrix_chain()?.last().map(|c| c.1).unwrap_or(0))
    }

    pub fn with_seed(&self, init_seed: u64) -> Self {
        Self {
            layers: self.layers.clone(),
            init_seed,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: Self = serde_json::from_slice(bytes).map_err(|e| json_format_error(bytes, &e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("spec serializes");
        out.push(b'\n');
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }
}

/// Fan-in uniform initialization: matrix weights in `[-1/sqrt(n_in), 1/sqrt(n_in)]`,
/// vectors zero. Layer `i` draws from `Rng::new(init_seed).split(i)`.
pub fn init_params(spec: &NetworkSpec) -> Params {
    let root = Rng::new(spec.init_seed);
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer.shape {
            LayerShape::Matrix { n_out, n_in } => {
                let bound = 1.0 / (n_in as f64).sqrt();
                let mut rng = root.split(i as u64);
                (0..n_out * n_in)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect()
            }
            LayerShape::Vector { n } => vec![0.0; n],
        })
        .collect()
}

pub(crate) fn check_params(spec: &NetworkSpec, params: &Params) -> Result<()> {
    if params.len() != spec.layers.len() {
        return Err(Error::StructuralMismatch(format!(
            "{} parameter blocks for {} layers",
            params.len(),
            spec.layers.len()
        )));
    }
    for (layer, p) in spec.layers.iter().zip(params) {
        if p.len() != layer.len() {
            return Err(Error::StructuralMismatch(format!(
                "layer `{}` has {} values, expected {}",
                layer.name,
                p.len(),
                layer.len()
            )));
        }
    }
    Ok(())
}

/// Maps a serde_json error to a [`Error::Format`] with a byte offset.
pub(crate) fn json_format_error(bytes: &[u8], err: &serde_json::Error) -> Error {
    Error::Format {
        offset: line_col_to_offset(bytes, err.line(), err.column()),
        reason: err.to_string(),
    }
}

fn line_col_to_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len())
}
