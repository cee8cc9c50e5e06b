//! Experiment grids: criterion x sparsity x recovery ratio x mode x seed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_sparsity, NetworkMask, RevivalMode};
use crate::network::NetworkSpec;
use crate::prune::{build_mask, Criterion, PruneOptions};
use crate::revival::{check_ratio, density_matched_mask, revive};
use crate::rng::Rng;
use crate::train::mlp::{Activation, Mlp};
use crate::train::optim::OptimizerConfig;
use crate::train::session::{train_dst, train_static, DstConfig, DstMethod, RunRecord, TrainerConfig};
use crate::train::task::{DriftTask, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Static mask straight from the criterion.
    Original,
    /// Static mask after uniform revival.
    Ur,
    /// Static mask after topology-aware revival.
    Tar,
    Set,
    Rigl,
    /// Static mask pruned directly to `alpha (1 - rr)`.
    Matched,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Original => "original",
            Mode::Ur => "ur",
            Mode::Tar => "tar",
            Mode::Set => "set",
            Mode::Rigl => "rigl",
            Mode::Matched => "matched",
        }
    }

    /// Whether the recovery ratio changes what this mode does.
    pub fn uses_rr(self) -> bool {
        matches!(self, Mode::Ur | Mode::Tar | Mode::Matched)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A network spec given inline or as a path relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetRef {
    Path(PathBuf),
    Inline(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetRef,
    pub activation: Activation,
    pub task: TaskConfig,
    pub criteria: Vec<Criterion>,
    pub alphas: Vec<f64>,
    pub rrs: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub dst: DstConfig,
    pub prune: PruneOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let trainer = TrainerConfig::default();
        Self {
            net: NetRef::Inline(default_net()),
            activation: Activation::default(),
            task: TaskConfig::default(),
            criteria: vec![Criterion::Magnitude],
            alphas: vec![0.70, 0.80, 0.85, 0.90, 0.95],
            rrs: vec![0.0, 0.005, 0.01, 0.02],
            modes: vec![Mode::Original, Mode::Ur, Mode::Tar, Mode::Set, Mode::Rigl],
            seeds: (0..10).collect(),
            optimizer: trainer.optimizer,
            steps: trainer.steps,
            eval_every: trainer.eval_every,
            eval_batch: trainer.eval_batch,
            dst: DstConfig::default(),
            prune: PruneOptions::default(),
        }
    }
}

/// 8 -> 64 -> 64 -> 4 with biases.
pub fn default_net() -> NetworkSpec {
    NetworkSpec::mlp(&[8, 64, 64, 4], true, 0).expect("valid default network")
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// One cell of the grid for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunKey {
    pub criterion: Criterion,
    pub alpha: f64,
    pub rr: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl RunKey {
    /// `{criterion}_a{alpha}_rr{rr}_{mode}_s{seed}.csv`
    pub fn file_name(&self) -> String {
        format!(
            "{}_a{}_rr{}_{}_s{}.csv",
            self.criterion, self.alpha, self.rr, self.mode, self.seed
        )
    }

    /// Key of the run that produces the same record: modes that ignore the
    /// recovery ratio share one run across all ratios.
    fn canonical(&self) -> (Criterion, u64, u64, Mode, u64) {
        let rr = if self.mode.uses_rr() { self.rr.to_bits() } else { 0 };
        (self.criterion, self.alpha.to_bits(), rr, self.mode, self.seed)
    }
}

/// Seeds derived from a run seed. Every mode of one seed shares the student
/// initialization, base mask and data stream, so comparisons are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub mask: u64,
    pub revive: u64,
    pub dst: u64,
    pub train: u64,
}

impl RunSeeds {
    pub fn derive(spec_seed: u64, seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            init: Rng::new(spec_seed).split(seed).seed(),
            mask: root.split(1).seed(),
            revive: root.split(2).seed(),
            dst: root.split(3).seed(),
            train: root.split(4).seed(),
        }
    }
}

/// A validated config with its network and task resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: NetworkSpec,
    pub task: DriftTask,
}

impl Experiment {
    /// Resolves a path-valued `net` against `base_dir`.
    pub fn new(config: ExperimentConfig, base_dir: Option<&Path>) -> Result<Self> {
        let spec = match &config.net {
            NetRef::Inline(spec) => {
                spec.validate()?;
                spec.clone()
            }
            NetRef::Path(p) => {
                let path = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                NetworkSpec::load(path)?
            }
        };
        spec.matrix_chain()?;
        for &a in &config.alphas {
            check_sparsity(a)?;
        }
        for &rr in &config.rrs {
            check_ratio(rr)?;
        }
        for (name, empty) in [
            ("criteria", config.criteria.is_empty()),
            ("alphas", config.alphas.is_empty()),
            ("rrs", config.rrs.is_empty()),
            ("modes", config.modes.is_empty()),
            ("seeds", config.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidConfig(format!("{name} must not be empty")));
            }
        }
        let keys = grid(&config);
        let mut names = HashSet::new();
        for k in &keys {
            if !names.insert(k.file_name()) {
                return Err(Error::InvalidConfig(format!("duplicate run {}", k.file_name())));
            }
        }
        config.dst.validate()?;
        let trainer = trainer_config(&config, 0);
        trainer.validate()?;
        let task = config.task.build(&spec, config.steps)?;
        Ok(Self { config, spec, task })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config = ExperimentConfig::from_json(&fs::read(path)?)?;
        Self::new(config, path.parent())
    }

    /// Every run of the grid, in config order.
    pub fn runs(&self) -> Vec<RunKey> {
        grid(&self.config)
    }

    pub fn trainer_config(&self, seed: u64) -> TrainerConfig {
        trainer_config(&self.config, RunSeeds::derive(self.spec.init_seed, seed).train)
    }

    pub fn student(&self, seed: u64) -> Result<Mlp> {
        let seeds = RunSeeds::derive(self.spec.init_seed, seed);
        Mlp::init(self.spec.with_seed(seeds.init), self.config.activation)
    }

    /// The mask a run starts training from.
    pub fn mask(&self, key: &RunKey) -> Result<NetworkMask> {
        let seeds = RunSeeds::derive(self.spec.init_seed, key.seed);
        let spec = self.spec.with_seed(seeds.init);
        let opts = self.config.prune;
        match key.mode {
            Mode::Matched => density_matched_mask(&spec, key.criterion, key.alpha, key.rr, seeds.mask, opts),
            _ => {
                let base = build_mask(&spec, key.criterion, key.alpha, seeds.mask, opts)?;
                let mode = match key.mode {
                    Mode::Tar => RevivalMode::Tar,
                    Mode::Ur => RevivalMode::Ur,
                    _ => return Ok(base),
                };
                Ok(revive(&base, key.rr, mode, seeds.revive)?.1)
            }
        }
    }

    pub fn run(&self, key: &RunKey) -> Result<RunRecord> {
        let mlp = self.student(key.seed)?;
        let mask = self.mask(key)?;
        let cfg = self.trainer_config(key.seed);
        let method = match key.mode {
            Mode::Set => DstMethod::Set,
            Mode::Rigl => DstMethod::Rigl,
            _ => return train_static(&mlp, &mask, &self.task, &cfg),
        };
        let dst = DstConfig { method, ..self.config.dst };
        let rng = Rng::new(RunSeeds::derive(self.spec.init_seed, key.seed).dst);
        train_dst(&mlp, &mask, &self.task, &cfg, &dst, &rng)
    }
}

fn trainer_config(config: &ExperimentConfig, seed: u64) -> TrainerConfig {
    TrainerConfig {
        optimizer: config.optimizer,
        steps: config.steps,
        eval_every: config.eval_every,
        eval_batch: config.eval_batch,
        seed,
    }
}

fn grid(config: &ExperimentConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &criterion in &config.criteria {
        for &alpha in &config.alphas {
            for &rr in &config.rrs {
                for &mode in &config.modes {
                    for &seed in &config.seeds {
                        keys.push(RunKey { criterion, alpha, rr, mode, seed });
                    }
                }
            }
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub criterion: Criterion,
    pub alpha: f64,
    pub rr: f64,
    pub mode: Mode,
    /// Runs of this cell that finished.
    pub seeds: usize,
    pub final_loss_mean: f64,
    /// Sample standard deviation; 0 for a single run, NaN for none.
    pub final_loss_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub criterion: Criterion,
    pub alpha: f64,
    pub rr: f64,
    pub mode: Mode,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<RunFailure>,
    pub run_files: Vec<PathBuf>,
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs every cell of the grid and writes one CSV per run, `summary.csv`
/// and, when some runs failed, `failures.csv`. Failed runs are recorded and
/// never stop the sweep. Output bytes do not depend on `parallel`.
pub fn run_matrix(exp: &Experiment, out_dir: &Path, parallel: bool) -> Result<SweepReport> {
    fs::create_dir_all(out_dir)?;
    let keys = exp.runs();
    let mut jobs: Vec<RunKey> = Vec::new();
    let mut job_of = Vec::with_capacity(keys.len());
    let mut index = BTreeMap::new();
    for k in &keys {
        let j = *index.entry(k.canonical()).or_insert_with(|| {
            jobs.push(*k);
            jobs.len() - 1
        });
        job_of.push(j);
    }
    let results: Vec<Result<RunRecord>> = if parallel {
        jobs.par_iter().map(|k| exp.run(k)).collect()
    } else {
        jobs.iter().map(|k| exp.run(k)).collect()
    };

    let mut run_files = Vec::new();
    let mut failures = Vec::new();
    let mut cells: BTreeMap<usize, (RunKey, Vec<f64>)> = BTreeMap::new();
    let cell_count = keys.len() / exp.config.seeds.len();
    for (n, (k, &j)) in keys.iter().zip(&job_of).enumerate() {
        let cell = cells.entry(n / exp.config.seeds.len()).or_insert((*k, Vec::new()));
        match &results[j] {
            Ok(record) => {
                let path = out_dir.join(k.file_name());
                let mut w = BufWriter::new(File::create(&path)?);
                record.write_csv(&mut w)?;
                w.flush()?;
                run_files.push(path);
                cell.1.push(record.final_loss());
            }
            Err(e) => failures.push(RunFailure {
                criterion: k.criterion,
                alpha: k.alpha,
                rr: k.rr,
                mode: k.mode,
                seed: k.seed,
                error: e.to_string(),
            }),
        }
    }
    debug_assert_eq!(cells.len(), cell_count);

    let summary: Vec<SummaryRow> = cells
        .into_values()
        .map(|(k, losses)| {
            let (mean, std) = mean_std(&losses);
            SummaryRow {
                criterion: k.criterion,
                alpha: k.alpha,
                rr: k.rr,
                mode: k.mode,
                seeds: losses.len(),
                final_loss_mean: mean,
                final_loss_std: std,
            }
        })
        .collect();
    write_rows(&out_dir.join("summary.csv"), &summary)?;
    let failures_path = out_dir.join("failures.csv");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        write_rows(&failures_path, &failures)?;
    }
    Ok(SweepReport { summary, failures, run_files })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    Ok(csv::Reader::from_path(path)?
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()?)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
