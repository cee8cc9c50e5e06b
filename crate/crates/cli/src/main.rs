//! `tarctl`: masks, revival, analysis, bounds and training sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numeric failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tar_core::coverage::{connectivity_stats, zero_recovery_mc, CoverageReport};
use tar_core::format::{load_mask, save_mask};
use tar_core::prune::{build_mask, erk_allocation, magnitude_scores, synflow_scores, Criterion, PruneOptions, Scope};
use tar_core::revival::{plan_revival, revive};
use tar_core::train::{prepare_out_dir, run_matrix, Experiment};
use tar_core::{init_params, ErrorClass, NetworkSpec, RevivalMode, Rng};

#[derive(Parser)]
#[command(name = "tarctl", version, about = "Sparse masks with topology-aware revival")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mask from a network spec and print its density report as JSON.
    ///
    /// The spec is JSON: {"layers": [{"name", "kind": "matrix"|"vector",
    /// "shape": [n_out, n_in] | [n]}], "init_seed"}. The mask is written as a
    /// TARMASK v1 JSON file.
    Prune(PruneArgs),
    /// Revive pruned weights and write the new mask and the revival plan.
    ///
    /// The plan CSV has columns layer,d,K,D,N,E_topo,G,Q,R.
    Revive(ReviveArgs),
    /// Report density and per-layer connectivity of a mask as JSON.
    Analyze(AnalyzeArgs),
    /// Probability that R uniform revivals out of D miss all w targets.
    Bound(BoundArgs),
    /// Run an experiment config sequentially.
    ///
    /// Writes one CSV per run (step,eval_loss_current,eval_loss_final,density)
    /// and summary.csv (criterion,alpha,rr,mode,seeds,final_loss_mean,
    /// final_loss_std); failures.csv lists runs that failed.
    Train(RunArgs),
    /// Run an experiment config with independent runs in parallel.
    ///
    /// Outputs are identical to `train`.
    Sweep(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Magnitude,
    Synflow,
    Erk,
    Random,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Magnitude => Criterion::Magnitude,
            CriterionArg::Synflow => Criterion::Synflow,
            CriterionArg::Erk => Criterion::Erk,
            CriterionArg::Random => Criterion::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    PerLayer,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tar,
    Ur,
}

#[derive(Args)]
struct PruneArgs {
    /// Network spec JSON.
    #[arg(long)]
    net: PathBuf,
    #[arg(long, value_enum)]
    criterion: CriterionArg,
    /// Fraction of parameters to prune, in [0, 1).
    #[arg(long)]
    sparsity: f64,
    #[arg(long, value_enum, default_value = "global")]
    scope: ScopeArg,
    /// Seed for the random and ERK criteria.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Let vector layers (biases) be pruned too.
    #[arg(long)]
    prune_vectors: bool,
    /// Output mask file.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-parameter scores (magnitude, synflow) or the layer
    /// allocation (erk) as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct ReviveArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Recovery ratio in [0, 1].
    #[arg(long)]
    rr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Revival plan CSV.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Report file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-layer connectivity summary as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    /// Pruned positions in the layer.
    #[arg(long = "D")]
    d: u64,
    /// Positions that must be revived.
    #[arg(long)]
    w: u64,
    /// Positions revived uniformly without replacement.
    #[arg(long = "R")]
    r: u64,
    /// Monte Carlo trials.
    #[arg(long)]
    mc: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; a relative "net" path is resolved against its
    /// directory. Omitted fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Reuse a non-empty output directory, overwriting files.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let class = e.downcast_ref::<tar_core::Error>().map(|e| e.class());
            match class {
                Some(ErrorClass::Usage) => {
                    eprintln!("see `tarctl <command> --help` for valid arguments");
                    ExitCode::from(1)
                }
                Some(ErrorClass::Numeric) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Prune(a) => prune(a)?,
        Command::Revive(a) => revive_cmd(a)?,
        Command::Analyze(a) => analyze(a)?,
        Command::Bound(a) => bound(a)?,
        Command::Train(a) => return sweep(a, false),
        Command::Sweep(a) => return sweep(a, true),
    }
    Ok(ExitCode::SUCCESS)
}

fn print_json(value: &Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn prune(a: PruneArgs) -> Result<()> {
    let spec = NetworkSpec::load(&a.net).with_context(|| format!("reading {}", a.net.display()))?;
    let criterion = Criterion::from(a.criterion);
    let opts = PruneOptions {
        scope: match a.scope {
            ScopeArg::Global => Scope::Global,
            ScopeArg::PerLayer => Scope::PerLayer,
        },
        keep_vectors_dense: !a.prune_vectors,
    };
    let mask = build_mask(&spec, criterion, a.sparsity, a.seed, opts)?;
    if let Some(path) = &a.scores {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        match criterion {
            Criterion::Magnitude => magnitude_scores(&init_params(&spec))?.write_csv(&spec, file)?,
            Criterion::Synflow => synflow_scores(&spec, &init_params(&spec))?.write_csv(&spec, file)?,
            Criterion::Erk => erk_allocation(&spec, a.sparsity)?.write_csv(file)?,
            Criterion::Random => anyhow::bail!(tar_core::Error::InvalidConfig(
                "the random criterion has no scores".into()
            )),
        }
    }
    save_mask(&mask, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&serde_json::to_value(mask.density_report()?)?)
}

fn revive_cmd(a: ReviveArgs) -> Result<()> {
    let mask = load_mask(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    let mode = match a.mode {
        ModeArg::Tar => RevivalMode::Tar,
        ModeArg::Ur => RevivalMode::Ur,
    };
    let (plan, revived) = revive(&mask, a.rr, mode, a.seed)?;
    if let Some(path) = &a.plan {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        plan.write_csv(file)?;
    }
    save_mask(&revived, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&serde_json::to_value(revived.density_report()?)?)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mask = load_mask(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    let connectivity = connectivity_stats(&mask);
    let gaps = plan_revival(&mask, 0.0, RevivalMode::Tar)?;
    let report = json!({
        "density": mask.density_report()?,
        "isolated_fraction": connectivity.isolated_fraction(),
        "gap_total": gaps.total_revived(),
        "connectivity": connectivity,
    });
    if let Some(path) = &a.csv {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        connectivity.write_csv(file)?;
    }
    match &a.out {
        Some(path) => write_json(path, &report),
        None => print_json(&report),
    }
}

fn bound(a: BoundArgs) -> Result<()> {
    let mut report = CoverageReport::new("", a.d, a.w, a.r)?;
    if let Some(trials) = a.mc {
        report.p_mc = Some(zero_recovery_mc(a.d, a.w, a.r, trials, &Rng::new(a.seed))?);
    }
    print_json(&json!({
        "D": report.d,
        "w": report.w,
        "R": report.r,
        "p_exact": report.p_exact,
        "p_bound": report.p_bound,
        "p_mc": report.p_mc.map(|m| m.p),
        "se": report.p_mc.map(|m| m.se),
        "trials": report.p_mc.map(|m| m.trials),
    }))
}

/// Exits 3 when any run failed; all outputs are still written.
fn sweep(a: RunArgs, parallel: bool) -> Result<ExitCode> {
    let exp = Experiment::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    prepare_out_dir(&a.out_dir, a.force)?;
    let report = run_matrix(&exp, &a.out_dir, parallel)?;
    print_json(&json!({
        "runs": report.run_files.len(),
        "failures": report.failures.len(),
        "summary": a.out_dir.join("summary.csv"),
    }))?;
    for f in &report.failures {
        eprintln!(
            "run {}_a{}_rr{}_{}_s{} failed: {}",
            f.criterion, f.alpha, f.rr, f.mode, f.seed, f.error
        );
    }
    Ok(if report.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
