//! Topology-aware one-shot revival and the uniform-revival baseline.
//!
//! For each layer with `K` kept and `D` pruned parameters:
//!
//! ```text
//! N      = n_in + n_out                 (matrix layers; 0 for vectors)
//! E_topo = N ln N / 2
//! G      = max(ceil(E_topo) - K, 0)     (0 for vectors and under UR)
//! Q      = floor(rr * D)
//! R      = min(D, max(G, Q))            (R = Q under UR)
//! ```
//!
//! `R` positions are then drawn uniformly without replacement from the
//! sorted pruned set and switched on. The result is final: nothing in this
//! crate clears a bit of a revived mask afterwards.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{floor_count, NetworkMask, RevivalMode, RevivalRecord};
use crate::network::NetworkSpec;
use crate::prune::{build_mask, Criterion, PruneOptions};
use crate::rng::Rng;

/// One row of a revival plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: String,
    pub d: usize,
    #[serde(rename = "K")]
    pub kept: usize,
    #[serde(rename = "D")]
    pub pruned: usize,
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "E_topo")]
    pub floor: f64,
    #[serde(rename = "G")]
    pub gap: usize,
    #[serde(rename = "Q")]
    pub quota: usize,
    #[serde(rename = "R")]
    pub revive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevivalPlan {
    pub per_layer: Vec<LayerPlan>,
    pub rr: f64,
    pub mode: RevivalMode,
}

pub fn check_ratio(rr: f64) -> Result<()> {
    if rr.is_finite() && (0.0..=1.0).contains(&rr) {
        Ok(())
    } else {
        Err(Error::InvalidRatio(rr))
    }
}

/// `N ln N / 2`
pub fn topology_floor(nodes: usize) -> f64 {
    if nodes == 0 {
        return 0.0;
    }
    let n = nodes as f64;
    n * n.ln() / 2.0
}

pub fn plan_revival(mask: &NetworkMask, rr: f64, mode: RevivalMode) -> Result<RevivalPlan> {
    check_ratio(rr)?;
    let per_layer = mask
        .masks
        .iter()
        .map(|m| {
            let d = m.spec.len();
            if m.len() != d {
                return Err(Error::StructuralMismatch(format!(
                    "layer `{}` has {} bits, expected {d}",
                    m.spec.name,
                    m.len()
                )));
            }
            let kept = m.kept();
            let pruned = d - kept;
            let nodes = m.spec.dims().map_or(0, |(o, i)| o + i);
            let floor = topology_floor(nodes);
            let quota = floor_count(rr * pruned as f64).min(pruned);
            let gap = match mode {
                RevivalMode::Tar if m.spec.is_matrix() => (floor.ceil() as usize).saturating_sub(kept),
                _ => 0,
            };
            let revive = match mode {
                RevivalMode::Tar => pruned.min(gap.max(quota)),
                RevivalMode::Ur => quota,
            };
            Ok(LayerPlan {
                layer: m.spec.name.clone(),
                d,
                kept,
                pruned,
                nodes,
                floor,
                gap,
                quota,
                revive,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RevivalPlan { per_layer, rr, mode })
}

impl RevivalPlan {
    pub fn total_revived(&self) -> usize {
        self.per_layer.iter().map(|p| p.revive).sum()
    }

    pub(crate) fn check_mask(&self, mask: &NetworkMask) -> Result<()> {
        if self.per_layer.len() != mask.masks.len() {
            return Err(Error::PlanMismatch(format!(
                "plan has {} layers, mask has {}",
                self.per_layer.len(),
                mask.masks.len()
            )));
        }
        for (p, m) in self.per_layer.iter().zip(&mask.masks) {
            if p.layer != m.spec.name || p.d != m.len() || p.kept != m.kept() || p.pruned != m.pruned() {
                return Err(Error::PlanMismatch(format!("layer `{}` counts differ", p.layer)));
            }
            if p.revive > p.pruned {
                return Err(Error::PlanMismatch(format!(
                    "layer `{}` revives {} of {} pruned",
                    p.layer, p.revive, p.pruned
                )));
            }
        }
        Ok(())
    }

    /// CSV with columns `layer,d,K,D,N,E_topo,G,Q,R`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.per_layer {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<LayerPlan>> {
        let mut r = csv::Reader::from_reader(input);
        Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
    }
}

/// Draws `R_l` pruned positions per layer, uniformly without replacement,
/// using a partial Fisher-Yates shuffle of the ascending pruned indices
/// driven by `rng.split(l)`.
pub fn sample_revival(mask: &NetworkMask, plan: &RevivalPlan, rng: &Rng) -> Result<Vec<Vec<usize>>> {
    plan.check_mask(mask)?;
    Ok(mask
        .masks
        .iter()
        .zip(&plan.per_layer)
        .enumerate()
        .map(|(l, (m, p))| sample_layer(&m.pruned_indices(), p.revive, &mut rng.split(l as u64)))
        .collect())
}

pub(crate) fn sample_layer(pruned: &[usize], count: usize, rng: &mut Rng) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    rng.sample_from(pruned, count)
}

/// Switches the given pruned positions on. The input mask is left untouched.
pub fn apply_revival(
    mask: &NetworkMask,
    revived: &[Vec<usize>],
    record: Option<RevivalRecord>,
) -> Result<NetworkMask> {
    if revived.len() != mask.masks.len() {
        return Err(Error::PlanMismatch(format!(
            "{} revival sets for {} layers",
            revived.len(),
            mask.masks.len()
        )));
    }
    let mut out = mask.clone();
    for (l, (m, indices)) in out.masks.iter_mut().zip(revived).enumerate() {
        for &i in indices {
            if i >= m.len() {
                return Err(Error::PlanMismatch(format!(
                    "index {i} out of range in layer `{}`",
                    m.spec.name
                )));
            }
            if m.get(i) {
                return Err(Error::AlreadyAlive { layer: l, index: i });
            }
            m.set(i, true);
        }
    }
    if record.is_some() {
        out.provenance.revival = record;
    }
    Ok(out)
}

/// Plans, samples and applies revival in one step.
pub fn revive(
    mask: &NetworkMask,
    rr: f64,
    mode: RevivalMode,
    seed: u64,
) -> Result<(RevivalPlan, NetworkMask)> {
    let plan = plan_revival(mask, rr, mode)?;
    let revived = sample_revival(mask, &plan, &Rng::new(seed))?;
    let record = RevivalRecord {
        mode,
        rr,
        seed,
        revived: plan.per_layer.iter().map(|p| p.revive).collect(),
    };
    let out = apply_revival(mask, &revived, Some(record))?;
    Ok((plan, out))
}

/// Sparsity that quota-dominated revival reaches from `alpha`: `alpha (1 - rr)`.
pub fn matched_sparsity(alpha: f64, rr: f64) -> f64 {
    alpha * (1.0 - rr)
}

/// Static control built directly at the sparsity revival would reach,
/// with no revival step.
pub fn density_matched_mask(
    spec: &NetworkSpec,
    criterion: Criterion,
    alpha: f64,
    rr: f64,
    seed: u64,
    opts: PruneOptions,
) -> Result<NetworkMask> {
    check_ratio(rr)?;
    build_mask(spec, criterion, matched_sparsity(alpha, rr), seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{LayerMask, Provenance};
    use crate::network::LayerSpec;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn one_layer(n_out: usize, n_in: usize, kept: &[usize]) -> NetworkMask {
        NetworkMask {
            masks: vec![LayerMask::from_kept(LayerSpec::matrix("w", n_out, n_in), kept).unwrap()],
            provenance: Provenance::new("test", 0.0, 0),
        }
    }

    #[test]
    fn worked_layer() {
        let mask = one_layer(4, 4, &[0, 5, 10, 15]);
        let plan = plan_revival(&mask, 0.01, RevivalMode::Tar).unwrap();
        let p = &plan.per_layer[0];
        assert_eq!((p.d, p.kept, p.pruned, p.nodes), (16, 4, 12, 8));
        assert!((p.floor - 8.0 * 8f64.ln() / 2.0).abs() < 1e-12);
        assert!((p.floor - 8.3178).abs() < 1e-4);
        assert_eq!((p.gap, p.quota, p.revive), (5, 0, 5));

        let ur = plan_revival(&mask, 0.01, RevivalMode::Ur).unwrap();
        assert_eq!((ur.per_layer[0].gap, ur.per_layer[0].revive), (0, 0));
    }

    #[test]
    fn no_gap_no_quota_no_revival() {
        let kept: Vec<usize> = (0..10).collect();
        let mask = one_layer(4, 4, &kept);
        let plan = plan_revival(&mask, 0.0, RevivalMode::Tar).unwrap();
        assert_eq!(plan.per_layer[0].revive, 0);
        let (_, out) = revive(&mask, 0.0, RevivalMode::Tar, 1).unwrap();
        assert_eq!(out.masks, mask.masks);
    }

    #[test]
    fn vectors_get_quota_but_no_gap() {
        let mask = NetworkMask {
            masks: vec![LayerMask::from_kept(LayerSpec::vector("b", 200), &[0]).unwrap()],
            provenance: Provenance::new("t", 0.0, 0),
        };
        let plan = plan_revival(&mask, 0.02, RevivalMode::Tar).unwrap();
        let p = &plan.per_layer[0];
        assert_eq!((p.nodes, p.floor, p.gap, p.quota, p.revive), (0, 0.0, 0, 3, 3));
    }

    #[test]
    fn bad_ratio() {
        let mask = one_layer(2, 2, &[0]);
        for rr in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                plan_revival(&mask, rr, RevivalMode::Tar),
                Err(Error::InvalidRatio(_))
            ));
        }
    }

    #[test]
    fn exhaustive_and_empty_draws() {
        let mask = one_layer(3, 3, &[4]);
        let mut plan = plan_revival(&mask, 1.0, RevivalMode::Ur).unwrap();
        let sets = sample_revival(&mask, &plan, &Rng::new(0)).unwrap();
        let mut all = sets[0].clone();
        all.sort_unstable();
        assert_eq!(all, mask.masks[0].pruned_indices());

        plan.per_layer[0].revive = 0;
        assert!(sample_revival(&mask, &plan, &Rng::new(0)).unwrap()[0].is_empty());

        plan.per_layer[0].kept = 3;
        assert!(matches!(
            sample_revival(&mask, &plan, &Rng::new(0)),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn revival_is_uniform_over_pruned_set() {
        // D = 10, R = 3
        let mask = NetworkMask {
            masks: vec![LayerMask::from_kept(LayerSpec::vector("v", 12), &[3, 7]).unwrap()],
            provenance: Provenance::new("t", 0.0, 0),
        };
        let mut plan = plan_revival(&mask, 0.0, RevivalMode::Ur).unwrap();
        plan.per_layer[0].revive = 3;
        let trials = 10_000u64;
        let mut freq = vec![0usize; 12];
        let root = Rng::new(5);
        for t in 0..trials {
            for i in &sample_revival(&mask, &plan, &root.split(t)).unwrap()[0] {
                freq[*i] += 1;
            }
        }
        assert_eq!(freq[3] + freq[7], 0);
        for (i, f) in freq.iter().enumerate() {
            if i == 3 || i == 7 {
                continue;
            }
            let p = *f as f64 / trials as f64;
            assert!((p - 0.3).abs() <= 0.02, "index {i}: {p}");
        }
    }

    #[test]
    fn apply_revival_rules() {
        let mask = one_layer(2, 3, &[0, 1]);
        let same = apply_revival(&mask, &[vec![]], None).unwrap();
        assert_eq!(same, mask);
        let out = apply_revival(&mask, &[vec![4, 5]], None).unwrap();
        assert_eq!(out.masks[0].kept_indices(), vec![0, 1, 4, 5]);
        assert_eq!(mask.masks[0].kept(), 2);
        assert!(matches!(
            apply_revival(&mask, &[vec![1]], None),
            Err(Error::AlreadyAlive { layer: 0, index: 1 })
        ));
        assert!(matches!(
            apply_revival(&mask, &[vec![3, 3]], None),
            Err(Error::AlreadyAlive { .. })
        ));
    }

    #[test]
    fn plan_csv_roundtrip() {
        let mask = one_layer(4, 4, &[0, 5, 10, 15]);
        let plan = plan_revival(&mask, 0.01, RevivalMode::Tar).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,d,K,D,N,E_topo,G,Q,R\n"));
        assert_eq!(RevivalPlan::read_csv(buf.as_slice()).unwrap(), plan.per_layer);
    }

    #[test]
    fn density_matched_sparsity() {
        assert!((matched_sparsity(0.70, 0.01) - 0.693).abs() < 1e-12);
        assert_eq!(matched_sparsity(0.8, 0.0), 0.8);
        let spec = NetworkSpec::mlp(&[16, 32, 4], true, 4).unwrap();
        let m = density_matched_mask(&spec, Criterion::Magnitude, 0.7, 0.0, 0, PruneOptions::default()).unwrap();
        let direct = build_mask(&spec, Criterion::Magnitude, 0.7, 0, PruneOptions::default()).unwrap();
        assert_eq!(m, direct);
    }

    fn random_mask_with(rng: &mut Rng, n_out: usize, n_in: usize) -> NetworkMask {
        let d = n_out * n_in;
        let k = rng.below(d as u64 + 1) as usize;
        let kept = rng.sample_indices(d, k);
        one_layer(n_out, n_in, &kept)
    }

    proptest! {
        #[test]
        fn revival_is_monotone_and_one_shot(
            seed in any::<u64>(),
            n_out in 1usize..24,
            n_in in 1usize..24,
            rr_lo in 0.0f64..1.0,
            rr_hi in 0.0f64..1.0,
        ) {
            let mut rng = Rng::new(seed);
            let mask = random_mask_with(&mut rng, n_out, n_in);
            let (lo, hi) = if rr_lo <= rr_hi { (rr_lo, rr_hi) } else { (rr_hi, rr_lo) };
            let a = plan_revival(&mask, lo, RevivalMode::Tar).unwrap();
            let b = plan_revival(&mask, hi, RevivalMode::Tar).unwrap();
            prop_assert!(a.per_layer[0].revive <= b.per_layer[0].revive);

            let (plan, out) = revive(&mask, hi, RevivalMode::Tar, seed).unwrap();
            for i in mask.masks[0].kept_indices() {
                prop_assert!(out.masks[0].get(i));
            }
            prop_assert_eq!(out.masks[0].kept(), mask.masks[0].kept() + plan.per_layer[0].revive);

            let ur = plan_revival(&mask, hi, RevivalMode::Ur).unwrap();
            let p = &plan.per_layer[0];
            if p.gap <= p.quota {
                prop_assert_eq!(ur.per_layer[0].revive, p.revive);
            }
        }

        #[test]
        fn revival_shrinks_with_more_kept(
            n_out in 1usize..20,
            n_in in 1usize..20,
            k_lo in 0usize..400,
            k_hi in 0usize..400,
            rr in 0.0f64..0.1,
        ) {
            let d = n_out * n_in;
            let (a, b) = (k_lo.min(k_hi).min(d), k_lo.max(k_hi).min(d));
            let lo = one_layer(n_out, n_in, &(0..a).collect::<Vec<_>>());
            let hi = one_layer(n_out, n_in, &(0..b).collect::<Vec<_>>());
            let r_lo = plan_revival(&lo, rr, RevivalMode::Tar).unwrap().per_layer[0].revive;
            let r_hi = plan_revival(&hi, rr, RevivalMode::Tar).unwrap().per_layer[0].revive;
            prop_assert!(r_hi <= r_lo);
        }
    }
}
