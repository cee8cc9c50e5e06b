//! Zero-recovery probabilities and layer connectivity.
//!
//! If `R` of the `D` pruned positions of a layer are revived uniformly
//! without replacement, and `w` of those `D` would be needed later, the
//! number of needed positions recovered is hypergeometric and
//!
//! ```text
//! P(X = 0) = C(D - w, R) / C(D, R) = prod_{j<R} (1 - w / (D - j)) <= exp(-R w / D)
//! ```
//!
//! The needed set is never observable, so callers plant one ([`OracleSet`]).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::mask::NetworkMask;
use crate::revival::{sample_layer, topology_floor, RevivalPlan};
use crate::rng::Rng;

const SHARD: u64 = 4096;

fn check_counts(d: u64, w: u64, r: u64) -> Result<()> {
    if w > d || r > d {
        return Err(Error::InvalidCounts(format!(
            "need w <= D and R <= D, got D={d} w={w} R={r}"
        )));
    }
    Ok(())
}

/// `C(D - w, R) / C(D, R)`, evaluated in log space.
pub fn zero_recovery_exact(d: u64, w: u64, r: u64) -> Result<f64> {
    check_counts(d, w, r)?;
    if w == 0 || r == 0 {
        return Ok(1.0);
    }
    if r > d - w {
        return Ok(0.0);
    }
    let log_p = ln_binomial(d - w, r) - ln_binomial(d, r);
    Ok(log_p.exp().clamp(0.0, 1.0))
}

/// `exp(-R w / D)`
pub fn zero_recovery_bound(d: u64, w: u64, r: u64) -> Result<f64> {
    check_counts(d, w, r)?;
    if d == 0 {
        return Err(Error::InvalidCounts("D must be at least 1".into()));
    }
    Ok((-(r as f64) * (w as f64) / d as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trials: u64,
    pub zero_hits: u64,
    pub p: f64,
    /// `sqrt(p (1 - p) / trials)`
    pub se: f64,
}

impl McEstimate {
    fn from_counts(trials: u64, zero_hits: u64) -> Self {
        let p = zero_hits as f64 / trials as f64;
        Self {
            trials,
            zero_hits,
            p,
            se: (p * (1.0 - p) / trials as f64).sqrt(),
        }
    }
}

/// Simulates `trials` uniform draws of `R` out of `D` against the planted
/// subset `0..w`. Trials run in shards of 4096 seeded by `rng.split(shard)`,
/// so the result does not depend on scheduling.
pub fn zero_recovery_mc(d: u64, w: u64, r: u64, trials: u64, rng: &Rng) -> Result<McEstimate> {
    check_counts(d, w, r)?;
    if trials == 0 {
        return Err(Error::InvalidCounts("trials must be at least 1".into()));
    }
    let (d, w, r) = (d as usize, w as usize, r as usize);
    let shards = trials.div_ceil(SHARD);
    let zero_hits: u64 = (0..shards)
        .into_par_iter()
        .map(|s| {
            let n = SHARD.min(trials - s * SHARD);
            let mut shard_rng = rng.split(s);
            let mut scratch: Vec<usize> = (0..d).collect();
            let mut zeros = 0u64;
            for _ in 0..n {
                shard_rng.partial_shuffle(&mut scratch, r);
                if scratch[..r].iter().all(|&i| i >= w) {
                    zeros += 1;
                }
            }
            zeros
        })
        .sum();
    Ok(McEstimate::from_counts(trials, zero_hits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub layer: String,
    #[serde(rename = "D")]
    pub d: u64,
    pub w: u64,
    #[serde(rename = "R")]
    pub r: u64,
    pub p_exact: f64,
    pub p_bound: f64,
    pub p_mc: Option<McEstimate>,
}

impl CoverageReport {
    pub fn new(layer: impl Into<String>, d: u64, w: u64, r: u64) -> Result<Self> {
        let p_bound = if d == 0 { 1.0 } else { zero_recovery_bound(d, w, r)? };
        Ok(Self {
            layer: layer.into(),
            d,
            w,
            r,
            p_exact: zero_recovery_exact(d, w, r)?,
            p_bound,
            p_mc: None,
        })
    }
}

pub fn write_coverage_csv<W: Write>(reports: &[CoverageReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "D", "w", "R", "p_exact", "p_bound", "p_mc", "se", "trials"])?;
    for r in reports {
        let (p, se, t) = match r.p_mc {
            Some(mc) => (mc.p.to_string(), mc.se.to_string(), mc.trials.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            r.layer.clone(),
            r.d.to_string(),
            r.w.to_string(),
            r.r.to_string(),
            r.p_exact.to_string(),
            r.p_bound.to_string(),
            p,
            se,
            t,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Planted "needed later" positions per layer; each must be pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSet {
    pub per_layer: Vec<Vec<usize>>,
}

impl OracleSet {
    /// Plants `counts[l]` pruned positions of layer `l`, drawn uniformly.
    pub fn plant(mask: &NetworkMask, counts: &[usize], rng: &Rng) -> Result<Self> {
        if counts.len() != mask.masks.len() {
            return Err(Error::StructuralMismatch(format!(
                "{} counts for {} layers",
                counts.len(),
                mask.masks.len()
            )));
        }
        let per_layer = mask
            .masks
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(l, (m, &w))| {
                let pruned = m.pruned_indices();
                if w > pruned.len() {
                    return Err(Error::InvalidCounts(format!(
                        "layer `{}`: w={w} exceeds D={}",
                        m.spec.name,
                        pruned.len()
                    )));
                }
                Ok(rng.split(l as u64).sample_from(&pruned, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_layer })
    }

    pub fn check(&self, mask: &NetworkMask) -> Result<()> {
        if self.per_layer.len() != mask.masks.len() {
            return Err(Error::PlanMismatch("oracle layer count differs from mask".into()));
        }
        for (set, m) in self.per_layer.iter().zip(&mask.masks) {
            let mut seen = vec![false; m.len()];
            for &i in set {
                if i >= m.len() || m.get(i) || seen[i] {
                    return Err(Error::PlanMismatch(format!(
                        "oracle index {i} in layer `{}` is not a distinct pruned position",
                        m.spec.name
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Repeats the revival draw `trials` times (trial `t` uses the same stream as
/// `sample_revival(mask, plan, &rng.split(t))`) and reports how often each
/// layer recovers none of its planted set.
pub fn coverage_experiment(
    mask: &NetworkMask,
    plan: &RevivalPlan,
    oracle: &OracleSet,
    trials: u64,
    rng: &Rng,
) -> Result<Vec<CoverageReport>> {
    plan.check_mask(mask)?;
    oracle.check(mask)?;
    if trials == 0 {
        return Err(Error::InvalidCounts("trials must be at least 1".into()));
    }
    mask.masks
        .iter()
        .zip(&plan.per_layer)
        .zip(&oracle.per_layer)
        .enumerate()
        .map(|(l, ((m, p), gold))| {
            let pruned = m.pruned_indices();
            let mut is_gold = vec![false; m.len()];
            for &i in gold {
                is_gold[i] = true;
            }
            let zero_hits: u64 = (0..trials)
                .into_par_iter()
                .filter(|&t| {
                    let mut child = rng.split(t).split(l as u64);
                    sample_layer(&pruned, p.revive, &mut child)
                        .iter()
                        .all(|&i| !is_gold[i])
                })
                .count() as u64;
            let mut report =
                CoverageReport::new(&m.spec.name, pruned.len() as u64, gold.len() as u64, p.revive as u64)?;
            report.p_mc = Some(McEstimate::from_counts(trials, zero_hits));
            Ok(report)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConnectivity {
    pub layer: String,
    pub n_out: usize,
    pub n_in: usize,
    #[serde(rename = "K")]
    pub kept: usize,
    #[serde(rename = "E_topo")]
    pub floor: f64,
    #[serde(rename = "G")]
    pub gap: usize,
    /// Kept connections per output unit (row sums).
    pub out_degrees: Vec<usize>,
    /// Kept connections per input unit (column sums).
    pub in_degrees: Vec<usize>,
    /// `hist[k]` = number of output units with degree `k`.
    pub out_degree_hist: Vec<usize>,
    pub in_degree_hist: Vec<usize>,
    pub isolated_out: usize,
    pub isolated_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityStats {
    pub per_layer: Vec<LayerConnectivity>,
}

fn histogram(degrees: &[usize], max: usize) -> Vec<usize> {
    let mut hist = vec![0; max + 1];
    for &k in degrees {
        hist[k] += 1;
    }
    hist
}

/// Bipartite degree structure of every matrix layer.
pub fn connectivity_stats(mask: &NetworkMask) -> ConnectivityStats {
    let per_layer = mask
        .masks
        .iter()
        .filter_map(|m| {
            let (n_out, n_in) = m.spec.dims()?;
            let mut out_degrees = vec![0usize; n_out];
            let mut in_degrees = vec![0usize; n_in];
            for i in m.bits().iter_ones() {
                out_degrees[i / n_in] += 1;
                in_degrees[i % n_in] += 1;
            }
            let kept = m.kept();
            let floor = topology_floor(n_out + n_in);
            Some(LayerConnectivity {
                layer: m.spec.name.clone(),
                n_out,
                n_in,
                kept,
                floor,
                gap: (floor.ceil() as usize).saturating_sub(kept),
                out_degree_hist: histogram(&out_degrees, n_in),
                in_degree_hist: histogram(&in_degrees, n_out),
                isolated_out: out_degrees.iter().filter(|&&k| k == 0).count(),
                isolated_in: in_degrees.iter().filter(|&&k| k == 0).count(),
                out_degrees,
                in_degrees,
            })
        })
        .collect();
    ConnectivityStats { per_layer }
}

impl ConnectivityStats {
    /// Per-layer summary CSV (degree vectors are only in the JSON form).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer", "n_out", "n_in", "K", "E_topo", "G", "isolated_out", "isolated_in",
        ])?;
        for l in &self.per_layer {
            w.write_record([
                l.layer.clone(),
                l.n_out.to_string(),
                l.n_in.to_string(),
                l.kept.to_string(),
                l.floor.to_string(),
                l.gap.to_string(),
                l.isolated_out.to_string(),
                l.isolated_in.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn isolated_fraction(&self) -> f64 {
        let units: usize = self.per_layer.iter().map(|l| l.n_out + l.n_in).sum();
        let isolated: usize = self
            .per_layer
            .iter()
            .map(|l| l.isolated_out + l.isolated_in)
            .sum();
        if units == 0 {
            0.0
        } else {
            isolated as f64 / units as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{LayerMask, Provenance, RevivalMode};
    use crate::network::LayerSpec;
    use crate::revival::plan_revival;
    use num_bigint::BigUint;
    use num_rational::BigRational;
    use num_traits::ToPrimitive;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn binom(n: u64, k: u64) -> BigUint {
        if k > n {
            return BigUint::from(0u32);
        }
        let mut acc = BigUint::from(1u32);
        for i in 0..k {
            acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
        }
        acc
    }

    fn exact_rational(d: u64, w: u64, r: u64) -> f64 {
        let num = binom(d - w, r);
        let den = binom(d, r);
        BigRational::new(num.into(), den.into()).to_f64().unwrap()
    }

    #[test]
    fn worked_values() {
        let p = zero_recovery_exact(10, 2, 3).unwrap();
        assert!((p - 56.0 / 120.0).abs() < 1e-12);
        let b = zero_recovery_bound(10, 2, 3).unwrap();
        assert!((b - (-0.6f64).exp()).abs() < 1e-15);
        assert!(p <= b);
        assert!((b - 0.548812).abs() < 1e-6);
    }

    #[test]
    fn edge_cases() {
        for r in 0..=10 {
            assert_eq!(zero_recovery_exact(10, 0, r).unwrap(), 1.0);
        }
        assert_eq!(zero_recovery_exact(10, 1, 10).unwrap(), 0.0);
        assert_eq!(zero_recovery_exact(10, 4, 7).unwrap(), 0.0);
        assert_eq!(zero_recovery_bound(10, 3, 0).unwrap(), 1.0);
        assert!(matches!(zero_recovery_exact(5, 6, 1), Err(Error::InvalidCounts(_))));
        assert!(matches!(zero_recovery_exact(5, 1, 6), Err(Error::InvalidCounts(_))));
        assert!(matches!(zero_recovery_bound(0, 0, 0), Err(Error::InvalidCounts(_))));
    }

    #[test]
    fn matches_exact_rationals_up_to_thirty() {
        for d in 1..=30u64 {
            for w in 0..=d {
                for r in 0..=d {
                    let got = zero_recovery_exact(d, w, r).unwrap();
                    let want = exact_rational(d, w, r);
                    assert!((got - want).abs() < 1e-12, "D={d} w={w} R={r}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn bound_is_monotone() {
        let mut prev = 2.0;
        for r in 0..=50 {
            let b = zero_recovery_bound(50, 3, r).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        let mut prev = 2.0;
        for w in 0..=50 {
            let b = zero_recovery_bound(50, w, 4).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        // doubling R doubles the exponent
        let a = zero_recovery_bound(40, 3, 5).unwrap().ln();
        let b = zero_recovery_bound(40, 3, 10).unwrap().ln();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_trivial_cases() {
        let rng = Rng::new(1);
        assert_eq!(zero_recovery_mc(10, 0, 3, 1000, &rng).unwrap().p, 1.0);
        assert_eq!(zero_recovery_mc(10, 1, 10, 1000, &rng).unwrap().p, 0.0);
        assert!(matches!(zero_recovery_mc(10, 1, 1, 0, &rng), Err(Error::InvalidCounts(_))));
    }

    #[test]
    fn monte_carlo_within_three_se() {
        let mc = zero_recovery_mc(10, 2, 3, 100_000, &Rng::new(31)).unwrap();
        assert!((mc.p - 56.0 / 120.0).abs() <= 3.0 * mc.se, "{mc:?}");
    }

    #[test]
    fn monte_carlo_converges_in_repeated_experiments() {
        let exact = zero_recovery_exact(40, 5, 6).unwrap();
        let root = Rng::new(4242);
        let runs = 300;
        let within = (0..runs)
            .filter(|&k| {
                let mc = zero_recovery_mc(40, 5, 6, 2000, &root.split(k)).unwrap();
                (mc.p - exact).abs() <= 4.0 * mc.se
            })
            .count();
        assert!(within as f64 >= 0.99 * runs as f64, "{within}/{runs}");
    }

    #[test]
    fn connectivity_examples() {
        let full = NetworkMask {
            masks: vec![LayerMask::filled(LayerSpec::matrix("w", 4, 4), true)],
            provenance: Provenance::new("t", 0.0, 0),
        };
        let s = connectivity_stats(&full);
        assert_eq!(s.per_layer[0].isolated_in + s.per_layer[0].isolated_out, 0);
        assert!(s.per_layer[0].in_degrees.iter().all(|&k| k == 4));
        assert_eq!(s.per_layer[0].out_degree_hist, vec![0, 0, 0, 0, 4]);

        let col0 = NetworkMask {
            masks: vec![LayerMask::from_kept(LayerSpec::matrix("w", 4, 4), &[0, 4, 8, 12]).unwrap()],
            provenance: Provenance::new("t", 0.0, 0),
        };
        let s = connectivity_stats(&col0);
        assert_eq!(s.per_layer[0].isolated_in, 3);
        assert_eq!(s.per_layer[0].isolated_out, 0);
        assert_eq!(s.per_layer[0].gap, 5);
    }

    #[test]
    fn isolated_units_drop_above_the_floor() {
        // N = 64 + 64, floor K = ceil(N ln N / 2) = 311 versus K = N = 128
        let spec = LayerSpec::matrix("w", 64, 64);
        let k_floor = topology_floor(128).ceil() as usize;
        assert_eq!(k_floor, 311);
        let mean_isolated = |k: usize, seed: u64| {
            let root = Rng::new(seed);
            (0..200)
                .map(|s| {
                    let kept = root.split(s).sample_indices(spec.len(), k);
                    let mask = NetworkMask {
                        masks: vec![LayerMask::from_kept(spec.clone(), &kept).unwrap()],
                        provenance: Provenance::new("t", 0.0, 0),
                    };
                    connectivity_stats(&mask).isolated_fraction()
                })
                .sum::<f64>()
                / 200.0
        };
        let sparse = mean_isolated(128, 1);
        let at_floor = mean_isolated(k_floor, 2);
        assert!(at_floor < sparse, "{at_floor} vs {sparse}");
    }

    #[test]
    fn experiment_matches_exact_value() {
        let spec = LayerSpec::matrix("w", 4, 4);
        let mask = NetworkMask {
            masks: vec![
                LayerMask::from_kept(spec, &[0, 5, 10, 15]).unwrap(),
                LayerMask::filled(LayerSpec::vector("b", 4), true),
            ],
            provenance: Provenance::new("t", 0.0, 0),
        };
        let plan = plan_revival(&mask, 0.01, RevivalMode::Tar).unwrap();
        assert_eq!(plan.per_layer[0].revive, 5);
        let oracle = OracleSet::plant(&mask, &[2, 0], &Rng::new(9)).unwrap();
        let reports = coverage_experiment(&mask, &plan, &oracle, 20_000, &Rng::new(10)).unwrap();
        let r = &reports[0];
        assert!((r.p_exact - 252.0 / 792.0).abs() < 1e-12);
        let mc = r.p_mc.unwrap();
        assert!((mc.p - r.p_exact).abs() <= 3.0 * mc.se, "{mc:?}");
        assert_eq!(reports[1].p_exact, 1.0);
        assert_eq!(reports[1].p_mc.unwrap().p, 1.0);

        let bad = OracleSet { per_layer: vec![vec![0], vec![]] };
        assert!(matches!(
            coverage_experiment(&mask, &plan, &bad, 10, &Rng::new(0)),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_coverage_csv(&[CoverageReport::new("w", 10, 2, 3).unwrap()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,D,w,R,p_exact,p_bound,p_mc,se,trials\n"));
    }

    proptest! {
        #[test]
        fn degree_sums_equal_kept(seed in any::<u64>(), n_out in 1usize..20, n_in in 1usize..20, frac in 0.0f64..1.0) {
            let spec = LayerSpec::matrix("w", n_out, n_in);
            let k = (frac * spec.len() as f64) as usize;
            let kept = Rng::new(seed).sample_indices(spec.len(), k);
            let mask = NetworkMask {
                masks: vec![LayerMask::from_kept(spec, &kept).unwrap()],
                provenance: Provenance::new("t", 0.0, 0),
            };
            let s = &connectivity_stats(&mask).per_layer[0];
            prop_assert_eq!(s.in_degrees.iter().sum::<usize>(), k);
            prop_assert_eq!(s.out_degrees.iter().sum::<usize>(), k);
            prop_assert_eq!(s.isolated_in, s.in_degrees.iter().filter(|&&x| x == 0).count());
        }
    }
}
