//! Initial static masks: magnitude, SynFlow, ERK and uniform random.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_sparsity, floor_count, kept_for, LayerMask, NetworkMask, Provenance};
use crate::network::{check_params, NetworkSpec, Params};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Magnitude,
    Synflow,
    Erk,
    Random,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Synflow => "synflow",
            Criterion::Erk => "erk",
            Criterion::Random => "random",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "magnitude" => Ok(Criterion::Magnitude),
            "synflow" => Ok(Criterion::Synflow),
            "erk" => Ok(Criterion::Erk),
            "random" => Ok(Criterion::Random),
            other => Err(format!("unknown criterion `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneOptions {
    pub scope: Scope,
    /// Exclude vector layers from pruning and keep them dense.
    pub keep_vectors_dense: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            scope: Scope::Global,
            keep_vectors_dense: true,
        }
    }
}

/// Per-parameter saliency, aligned with the layers of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub criterion: Criterion,
    pub per_layer: Vec<Vec<f64>>,
}

impl ScoreTable {
    /// CSV with columns `layer,index,score`.
    pub fn write_csv<W: Write>(&self, spec: &NetworkSpec, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "index", "score"])?;
        for (layer, scores) in spec.layers.iter().zip(&self.per_layer) {
            for (i, s) in scores.iter().enumerate() {
                w.write_record([layer.name.clone(), i.to_string(), s.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_finite(params: &Params) -> Result<()> {
    for (layer, values) in params.iter().enumerate() {
        if let Some(index) = values.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFiniteWeight { layer, index });
        }
    }
    Ok(())
}

pub fn magnitude_scores(params: &Params) -> Result<ScoreTable> {
    check_finite(params)?;
    Ok(ScoreTable {
        criterion: Criterion::Magnitude,
        per_layer: params
            .iter()
            .map(|p| p.iter().map(|w| w.abs()).collect())
            .collect(),
    })
}

/// Data-free synaptic-flow scores for a chain of matrix layers.
///
/// With `R = 1ᵀ|W_L|···|W_1|1`, the score of `W_l[i][j]` is
/// `|W_l[i][j]| * suffix_l[i] * prefix_l[j]` where `prefix_l` is the all-ones
/// input pushed through the layers below and `suffix_l` the all-ones output
/// pulled back through the layers above. Vector layers score zero.
pub fn synflow_scores(spec: &NetworkSpec, params: &Params) -> Result<ScoreTable> {
    let chain = spec.matrix_chain()?;
    check_params(spec, params)?;
    check_finite(params)?;

    let abs: Vec<Vec<f64>> = chain
        .iter()
        .map(|&(i, _, _)| params[i].iter().map(|w| w.abs()).collect())
        .collect();

    let mut prefix: Vec<Vec<f64>> = Vec::with_capacity(chain.len());
    prefix.push(vec![1.0; chain[0].2]);
    for (k, &(_, n_out, n_in)) in chain.iter().enumerate().take(chain.len() - 1) {
        let below = &prefix[k];
        let next = (0..n_out)
            .map(|r| {
                abs[k][r * n_in..(r + 1) * n_in]
                    .iter()
                    .zip(below)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        prefix.push(next);
    }

    let mut suffix: Vec<Vec<f64>> = vec![Vec::new(); chain.len()];
    suffix[chain.len() - 1] = vec![1.0; chain[chain.len() - 1].1];
    for k in (1..chain.len()).rev() {
        let (_, n_out, n_in) = chain[k];
        let mut next = vec![0.0; n_in];
        for r in 0..n_out {
            let s = suffix[k][r];
            for (c, acc) in next.iter_mut().enumerate() {
                *acc += abs[k][r * n_in + c] * s;
            }
        }
        suffix[k - 1] = next;
    }

    let mut per_layer: Vec<Vec<f64>> = spec.layers.iter().map(|l| vec![0.0; l.len()]).collect();
    for (k, &(layer, n_out, n_in)) in chain.iter().enumerate() {
        let out = &mut per_layer[layer];
        for r in 0..n_out {
            for c in 0..n_in {
                out[r * n_in + c] = abs[k][r * n_in + c] * suffix[k][r] * prefix[k][c];
            }
        }
    }
    Ok(ScoreTable {
        criterion: Criterion::Synflow,
        per_layer,
    })
}

fn in_pool(spec: &NetworkSpec, layer: usize, scores: Option<&[f64]>, opts: PruneOptions) -> bool {
    if spec.layers[layer].is_matrix() {
        return true;
    }
    !opts.keep_vectors_dense && scores.is_none_or(|s| s.iter().any(|&x| x != 0.0))
}

/// Highest score first; ties by (layer, index) ascending.
fn by_rank(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Keeps the highest-scoring parameters. Layers outside the pruning pool stay
/// dense: vector layers under `keep_vectors_dense`, and vector layers whose
/// scores are all zero under Global scope. Global scope keeps
/// `ceil((1 - alpha) * total)` parameters over the whole network, dense layers
/// included; PerLayer keeps `ceil((1 - alpha) * d_l)` in each pool layer.
pub fn prune_by_scores(
    spec: &NetworkSpec,
    scores: &ScoreTable,
    alpha: f64,
    opts: PruneOptions,
) -> Result<NetworkMask> {
    check_sparsity(alpha)?;
    if scores.per_layer.len() != spec.layers.len()
        || scores
            .per_layer
            .iter()
            .zip(&spec.layers)
            .any(|(s, l)| s.len() != l.len())
    {
        return Err(Error::StructuralMismatch(
            "score table does not match network".into(),
        ));
    }
    let pool: Vec<usize> = (0..spec.layers.len())
        .filter(|&l| {
            let s = match opts.scope {
                Scope::Global => Some(scores.per_layer[l].as_slice()),
                Scope::PerLayer => None,
            };
            in_pool(spec, l, s, opts)
        })
        .collect();

    let mut masks: Vec<LayerMask> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerMask::filled(layer.clone(), !pool.contains(&l)))
        .collect();

    let ranked = |layers: &[usize]| {
        let mut entries: Vec<(f64, usize, usize)> = layers
            .iter()
            .flat_map(|&l| {
                scores.per_layer[l]
                    .iter()
                    .enumerate()
                    .map(move |(i, &s)| (s, l, i))
            })
            .collect();
        entries.sort_by(by_rank);
        entries
    };

    match opts.scope {
        Scope::Global => {
            let dense: usize = masks.iter().filter(|m| m.kept() == m.len()).map(|m| m.len()).sum();
            let keep = pool_budget(spec, alpha, dense)?;
            for &(_, l, i) in ranked(&pool).iter().take(keep) {
                masks[l].set(i, true);
            }
        }
        Scope::PerLayer => {
            for &l in &pool {
                let keep = kept_for(alpha, spec.layers[l].len());
                for &(_, _, i) in ranked(&[l]).iter().take(keep) {
                    masks[l].set(i, true);
                }
            }
        }
    }

    Ok(NetworkMask {
        masks,
        provenance: Provenance::new(scores.criterion.as_str(), alpha, spec.init_seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErkLayer {
    pub name: String,
    pub layer: usize,
    /// `(n_in + n_out) / (n_in * n_out)`
    pub scale: f64,
    pub density: f64,
    pub kept: usize,
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErkAllocation {
    pub per_layer: Vec<ErkLayer>,
    pub normalizer: f64,
    pub target: usize,
}

impl ErkAllocation {
    /// CSV with columns `layer,s,rho,kept`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "s", "rho", "kept"])?;
        for l in &self.per_layer {
            w.write_record([
                l.name.clone(),
                l.scale.to_string(),
                l.density.to_string(),
                l.kept.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Kept budget left for the pool when `dense` parameters stay dense and the
/// whole network keeps `ceil((1 - alpha) * total)`.
fn pool_budget(spec: &NetworkSpec, alpha: f64, dense: usize) -> Result<usize> {
    let target = kept_for(alpha, spec.total_params());
    target.checked_sub(dense).ok_or_else(|| {
        Error::Infeasible(format!(
            "{dense} parameters kept dense exceed the budget of {target} at sparsity {alpha}"
        ))
    })
}

/// Erdős–Rényi-kernel layer densities over the matrix layers; vector layers
/// stay dense and count against the budget.
///
/// Solves `sum(min(1, C s_l) d_l) = ceil((1 - alpha) total) - vectors` by capping any
/// layer with `C s_l > 1` and re-solving over the rest, then rounds with
/// floor plus largest remainder (ties to the lower layer index).
pub fn erk_allocation(spec: &NetworkSpec, alpha: f64) -> Result<ErkAllocation> {
    if alpha < 0.0 {
        return Err(Error::Infeasible(format!("negative sparsity {alpha}")));
    }
    check_sparsity(alpha)?;
    let layers: Vec<(usize, usize, f64)> = spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.dims()
                .map(|(o, n)| (i, o * n, (o + n) as f64 / (o * n) as f64))
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::Infeasible("no matrix layers".into()));
    }
    let total: usize = layers.iter().map(|l| l.1).sum();
    let target = pool_budget(spec, alpha, spec.total_params() - total)?;

    let mut capped = vec![false; layers.len()];
    let mut normalizer = f64::INFINITY;
    loop {
        let fixed: usize = layers
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| c)
            .map(|(l, _)| l.1)
            .sum();
        let weight: f64 = layers
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| !c)
            .map(|(l, _)| l.2 * l.1 as f64)
            .sum();
        if weight == 0.0 {
            break;
        }
        normalizer = (target - fixed) as f64 / weight;
        let mut changed = false;
        for (k, l) in layers.iter().enumerate() {
            if !capped[k] && normalizer * l.2 >= 1.0 - 1e-12 {
                capped[k] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let densities: Vec<f64> = layers
        .iter()
        .zip(&capped)
        .map(|(l, &c)| if c { 1.0 } else { normalizer * l.2 })
        .collect();
    let exact: Vec<f64> = densities
        .iter()
        .zip(&layers)
        .map(|(rho, l)| rho * l.1 as f64)
        .collect();
    let mut kept: Vec<usize> = exact
        .iter()
        .zip(&layers)
        .map(|(&x, l)| floor_count(x).min(l.1))
        .collect();
    let assigned: usize = kept.iter().sum();
    let mut order: Vec<usize> = (0..layers.len()).filter(|&k| kept[k] < layers[k].1).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - kept[a] as f64;
        let rb = exact[b] - kept[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let deficit = target.saturating_sub(assigned);
    if deficit > order.len() {
        return Err(Error::Infeasible(format!(
            "cannot place {deficit} remaining parameters"
        )));
    }
    for &k in order.iter().take(deficit) {
        kept[k] += 1;
    }

    Ok(ErkAllocation {
        per_layer: layers
            .iter()
            .enumerate()
            .map(|(k, l)| ErkLayer {
                name: spec.layers[l.0].name.clone(),
                layer: l.0,
                scale: l.2,
                density: densities[k],
                kept: kept[k],
                capped: capped[k],
            })
            .collect(),
        normalizer,
        target,
    })
}

/// ERK mask: allocation per [`erk_allocation`], positions sampled uniformly
/// within each layer from `rng.split(layer_index)`. Vector layers stay dense.
pub fn erk_mask(spec: &NetworkSpec, alpha: f64, rng: &Rng) -> Result<(ErkAllocation, NetworkMask)> {
    let alloc = erk_allocation(spec, alpha)?;
    let mut masks: Vec<LayerMask> = spec
        .layers
        .iter()
        .map(|l| LayerMask::filled(l.clone(), true))
        .collect();
    for l in &alloc.per_layer {
        let d = spec.layers[l.layer].len();
        let picked = rng.split(l.layer as u64).sample_indices(d, l.kept);
        masks[l.layer] = LayerMask::from_kept(spec.layers[l.layer].clone(), &picked)?;
    }
    let mask = NetworkMask {
        masks,
        provenance: Provenance::new(Criterion::Erk.as_str(), alpha, rng.seed()),
    };
    Ok((alloc, mask))
}

/// Uniform control. Under Global scope the network budget left after dense
/// layers is split across pool layers in proportion to their size (floor
/// plus largest remainder, ties to the lower index); under PerLayer each pool
/// layer keeps `ceil((1 - alpha) d_l)`. Positions are drawn from
/// `rng.split(layer_index)`.
pub fn random_mask(
    spec: &NetworkSpec,
    alpha: f64,
    rng: &Rng,
    opts: PruneOptions,
) -> Result<NetworkMask> {
    check_sparsity(alpha)?;
    let pool: Vec<usize> = (0..spec.layers.len())
        .filter(|&l| in_pool(spec, l, None, opts))
        .collect();
    let mut counts = vec![0usize; spec.layers.len()];
    match opts.scope {
        Scope::PerLayer => {
            for &l in &pool {
                counts[l] = kept_for(alpha, spec.layers[l].len());
            }
        }
        Scope::Global => {
            let pooled: usize = pool.iter().map(|&l| spec.layers[l].len()).sum();
            let budget = pool_budget(spec, alpha, spec.total_params() - pooled)?;
            let exact: Vec<f64> = pool
                .iter()
                .map(|&l| budget as f64 * spec.layers[l].len() as f64 / pooled as f64)
                .collect();
            for (k, &l) in pool.iter().enumerate() {
                counts[l] = floor_count(exact[k]).min(spec.layers[l].len());
            }
            let mut order: Vec<usize> = (0..pool.len())
                .filter(|&k| counts[pool[k]] < spec.layers[pool[k]].len())
                .collect();
            order.sort_by(|&a, &b| {
                let ra = exact[a] - counts[pool[a]] as f64;
                let rb = exact[b] - counts[pool[b]] as f64;
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            let deficit = budget.saturating_sub(counts.iter().sum());
            for &k in order.iter().take(deficit) {
                counts[pool[k]] += 1;
            }
        }
    }
    let masks = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            if !pool.contains(&l) {
                return Ok(LayerMask::filled(layer.clone(), true));
            }
            let picked = rng.split(l as u64).sample_indices(layer.len(), counts[l]);
            LayerMask::from_kept(layer.clone(), &picked)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkMask {
        masks,
        provenance: Provenance::new(Criterion::Random.as_str(), alpha, rng.seed()),
    })
}

/// Builds a mask with any criterion. Magnitude and SynFlow score the
/// network's initial parameters; ERK and random draw from `seed`.
pub fn build_mask(
    spec: &NetworkSpec,
    criterion: Criterion,
    alpha: f64,
    seed: u64,
    opts: PruneOptions,
) -> Result<NetworkMask> {
    check_sparsity(alpha)?;
    let rng = Rng::new(seed);
    match criterion {
        Criterion::Magnitude => {
            let params = crate::network::init_params(spec);
            prune_by_scores(spec, &magnitude_scores(&params)?, alpha, opts)
        }
        Criterion::Synflow => {
            let params = crate::network::init_params(spec);
            prune_by_scores(spec, &synflow_scores(spec, &params)?, alpha, opts)
        }
        Criterion::Erk => erk_mask(spec, alpha, &rng).map(|(_, m)| m),
        Criterion::Random => random_mask(spec, alpha, &rng, opts),
    }
}
