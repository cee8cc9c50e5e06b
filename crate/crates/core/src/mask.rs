//! Binary parameter masks and density accounting.

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{check_params, LayerSpec, NetworkSpec, Params};

/// Relative slack used when turning real-valued counts into integers, so
/// that e.g. `(1 - 0.7) * 100 = 30.000000000000004` counts as 30.
const SNAP: f64 = 1e-9;

fn snapped(x: f64) -> Option<f64> {
    let r = x.round();
    ((x - r).abs() <= SNAP * x.abs().max(1.0)).then_some(r)
}

/// `ceil(x)` for a non-negative count, ignoring representation error.
pub fn ceil_count(x: f64) -> usize {
    snapped(x).unwrap_or_else(|| x.ceil()).max(0.0) as usize
}

/// `floor(x)` for a non-negative count, ignoring representation error.
pub fn floor_count(x: f64) -> usize {
    snapped(x).unwrap_or_else(|| x.floor()).max(0.0) as usize
}

/// Number of parameters kept out of `d` at sparsity `alpha`: `ceil((1 - alpha) d)`.
pub fn kept_for(alpha: f64, d: usize) -> usize {
    ceil_count((1.0 - alpha) * d as f64).min(d)
}

pub fn check_sparsity(alpha: f64) -> Result<()> {
    if alpha.is_finite() && (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidSparsity(alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RevivalMode {
    Tar,
    Ur,
}

impl RevivalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RevivalMode::Tar => "tar",
            RevivalMode::Ur => "ur",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevivalRecord {
    pub mode: RevivalMode,
    pub rr: f64,
    pub seed: u64,
    /// Revived count per layer.
    pub revived: Vec<usize>,
}

/// How a mask was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub criterion: String,
    pub sparsity: f64,
    pub seed: u64,
    pub revival: Option<RevivalRecord>,
}

impl Provenance {
    pub fn new(criterion: impl Into<String>, sparsity: f64, seed: u64) -> Self {
        Self {
            criterion: criterion.into(),
            sparsity,
            seed,
            revival: None,
        }
    }
}

pub type Bits = BitVec<u8, Lsb0>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub spec: LayerSpec,
    bits: Bits,
}

impl LayerMask {
    pub fn filled(spec: LayerSpec, keep: bool) -> Self {
        let bits = BitVec::repeat(keep, spec.len());
        Self { spec, bits }
    }

    pub fn from_bits(spec: LayerSpec, bits: Bits) -> Result<Self> {
        if bits.len() != spec.len() {
            return Err(Error::StructuralMismatch(format!(
                "layer `{}` has {} bits, expected {}",
                spec.name,
                bits.len(),
                spec.len()
            )));
        }
        Ok(Self { spec, bits })
    }

    pub fn from_bools(spec: LayerSpec, bools: &[bool]) -> Result<Self> {
        Self::from_bits(spec, bools.iter().copied().collect())
    }

    /// Mask keeping exactly `indices`.
    pub fn from_kept(spec: LayerSpec, indices: &[usize]) -> Result<Self> {
        let mut mask = Self::filled(spec, false);
        for &i in indices {
            if i >= mask.len() {
                return Err(Error::StructuralMismatch(format!(
                    "index {i} out of range for layer `{}`",
                    mask.spec.name
                )));
            }
            mask.bits.set(i, true);
        }
        Ok(mask)
    }

    pub fn bits(&self) -> &BitSlice<u8, Lsb0> {
        &self.bits
    }

    /// `d`
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `K`
    pub fn kept(&self) -> usize {
        self.bits.count_ones()
    }

    /// `D`
    pub fn pruned(&self) -> usize {
        self.bits.count_zeros()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn set(&mut self, index: usize, keep: bool) {
        self.bits.set(index, keep);
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits.iter_ones().collect()
    }

    /// Pruned positions in ascending order.
    pub fn pruned_indices(&self) -> Vec<usize> {
        self.bits.iter_zeros().collect()
    }

    /// Packed payload: 8 bits per byte, least significant first, final
    /// byte zero-padded.
    pub fn packed(&self) -> Vec<u8> {
        let mut copy = self.bits.clone();
        copy.set_uninitialized(false);
        copy.into_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMask {
    pub masks: Vec<LayerMask>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub name: String,
    pub d: usize,
    pub kept: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDensity {
    pub d: usize,
    pub kept: usize,
    pub density: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub per_layer: Vec<LayerDensity>,
    pub global: GlobalDensity,
}

impl NetworkMask {
    pub fn dense(spec: &NetworkSpec) -> Self {
        Self::filled(spec, true, Provenance::new("dense", 0.0, 0))
    }

    pub fn filled(spec: &NetworkSpec, keep: bool, provenance: Provenance) -> Self {
        Self {
            masks: spec
                .layers
                .iter()
                .map(|l| LayerMask::filled(l.clone(), keep))
                .collect(),
            provenance,
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.masks.iter().map(|m| m.spec.clone()).collect()
    }

    /// Errors unless this mask has exactly one layer per entry of `spec`,
    /// with matching names and shapes.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        if self.masks.len() != spec.layers.len() {
            return Err(Error::StructuralMismatch(format!(
                "mask has {} layers, network has {}",
                self.masks.len(),
                spec.layers.len()
            )));
        }
        for (m, l) in self.masks.iter().zip(&spec.layers) {
            if m.spec != *l {
                return Err(Error::StructuralMismatch(format!(
                    "mask layer `{}` does not match network layer `{}`",
                    m.spec.name, l.name
                )));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(LayerMask::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.masks.iter().map(LayerMask::kept).sum()
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.masks.iter().map(LayerMask::kept).collect()
    }

    pub fn density_report(&self) -> Result<DensityReport> {
        let mut per_layer = Vec::with_capacity(self.masks.len());
        for m in &self.masks {
            let d = m.spec.len();
            if m.len() != d {
                return Err(Error::StructuralMismatch(format!(
                    "layer `{}` has {} bits, expected {}",
                    m.spec.name,
                    m.len(),
                    d
                )));
            }
            let kept = m.kept();
            per_layer.push(LayerDensity {
                name: m.spec.name.clone(),
                d,
                kept,
                density: kept as f64 / d as f64,
            });
        }
        let d: usize = per_layer.iter().map(|l| l.d).sum();
        let kept: usize = per_layer.iter().map(|l| l.kept).sum();
        let density = if d == 0 { 0.0 } else { kept as f64 / d as f64 };
        Ok(DensityReport {
            per_layer,
            global: GlobalDensity {
                d,
                kept,
                density,
                sparsity: 1.0 - density,
            },
        })
    }
}

/// Element-wise product of parameters and mask: kept values pass through,
/// pruned values become exactly zero.
pub fn apply_mask(params: &Params, mask: &NetworkMask) -> Result<Params> {
    let spec = NetworkSpec {
        layers: mask.layer_specs(),
        init_seed: 0,
    };
    check_params(&spec, params)?;
    Ok(params
        .iter()
        .zip(&mask.masks)
        .map(|(p, m)| {
            p.iter()
                .zip(m.bits().iter().by_vals())
                .map(|(&w, keep)| if keep { w } else { 0.0 })
                .collect()
        })
        .collect())
}

/// In-place variant of [`apply_mask`]; shapes must already agree.
pub(crate) fn zero_pruned(params: &mut Params, mask: &NetworkMask) {
    for (p, m) in params.iter_mut().zip(&mask.masks) {
        for i in m.bits().iter_zeros() {
            p[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_layer(kept: (usize, usize)) -> NetworkMask {
        let a = LayerSpec::matrix("a", 4, 8);
        let b = LayerSpec::matrix("b", 8, 2);
        let ka: Vec<usize> = (0..kept.0).collect();
        let kb: Vec<usize> = (0..kept.1).collect();
        NetworkMask {
            masks: vec![
                LayerMask::from_kept(a, &ka).unwrap(),
                LayerMask::from_kept(b, &kb).unwrap(),
            ],
            provenance: Provenance::new("test", 0.5, 0),
        }
    }

    #[test]
    fn density_identity_and_empty() {
        let spec = NetworkSpec::mlp(&[8, 4, 2], false, 0).unwrap();
        assert_eq!(spec.total_params(), 40);
        let spec = NetworkSpec::new(
            vec![LayerSpec::matrix("a", 4, 8), LayerSpec::matrix("b", 8, 2)],
            0,
        )
        .unwrap();
        let full = NetworkMask::dense(&spec).density_report().unwrap();
        assert_eq!(full.global.d, 48);
        assert_eq!(full.global.density, 1.0);
        assert_eq!(full.global.sparsity, 0.0);
        let empty = NetworkMask::filled(&spec, false, Provenance::new("x", 1.0, 0))
            .density_report()
            .unwrap();
        assert_eq!(empty.global.density, 0.0);
        assert_eq!(empty.global.sparsity, 1.0);
    }

    #[test]
    fn density_two_layers() {
        let r = two_layer((13, 11)).density_report().unwrap();
        assert_eq!(r.global.kept, 24);
        assert_eq!(r.global.d, 48);
        assert_eq!(r.global.density, 0.5);
        assert_eq!(r.global.sparsity, 0.5);
        assert_eq!(r.per_layer[0].kept, 13);
        assert_eq!(r.per_layer[1].d, 16);
    }

    #[test]
    fn apply_mask_cases() {
        let spec = LayerSpec::vector("v", 3);
        let mask = NetworkMask {
            masks: vec![LayerMask::from_bools(spec.clone(), &[true, false, true]).unwrap()],
            provenance: Provenance::new("t", 0.0, 0),
        };
        let w = vec![vec![1.5, -2.0, 3.0]];
        assert_eq!(apply_mask(&w, &mask).unwrap(), vec![vec![1.5, 0.0, 3.0]]);

        let ones = NetworkMask {
            masks: vec![LayerMask::filled(spec.clone(), true)],
            provenance: Provenance::new("t", 0.0, 0),
        };
        assert_eq!(apply_mask(&w, &ones).unwrap(), w);

        let zeros = NetworkMask {
            masks: vec![LayerMask::filled(spec, false)],
            provenance: Provenance::new("t", 0.0, 0),
        };
        assert_eq!(apply_mask(&w, &zeros).unwrap(), vec![vec![0.0; 3]]);

        let short = vec![vec![1.0, 2.0]];
        assert!(matches!(
            apply_mask(&short, &mask),
            Err(Error::StructuralMismatch(_))
        ));
    }

    #[test]
    fn packing_is_lsb_first() {
        let spec = LayerSpec::vector("v", 8);
        let m = LayerMask::from_bools(
            spec,
            &[true, false, true, true, false, false, false, false],
        )
        .unwrap();
        assert_eq!(m.packed(), vec![0x0D]);

        let spec = LayerSpec::vector("w", 10);
        let mut m = LayerMask::filled(spec, true);
        m.set(1, false);
        assert_eq!(m.packed(), vec![0xFD, 0x03]);
    }

    #[test]
    fn count_rounding_ignores_representation_error() {
        assert_eq!(kept_for(0.7, 100), 30);
        assert_eq!(kept_for(0.5, 7), 4);
        assert_eq!(kept_for(0.0, 9), 9);
        assert_eq!(floor_count(0.29 * 100.0), 29);
        assert_eq!(floor_count(0.12), 0);
        assert_eq!(ceil_count(4.3178), 5);
    }

    proptest! {
        #[test]
        fn counts_partition_and_apply_is_idempotent(
            bools in prop::collection::vec(any::<bool>(), 1..200),
            seed in any::<u64>(),
        ) {
            let spec = LayerSpec::vector("v", bools.len());
            let layer = LayerMask::from_bools(spec, &bools).unwrap();
            prop_assert_eq!(layer.kept() + layer.pruned(), layer.len());
            let mask = NetworkMask { masks: vec![layer], provenance: Provenance::new("p", 0.0, seed) };
            let r = mask.density_report().unwrap();
            prop_assert_eq!(r.global.kept + (r.global.d - r.global.kept), r.global.d);

            let mut rng = crate::rng::Rng::new(seed);
            let w = vec![(0..bools.len()).map(|_| rng.normal()).collect::<Vec<_>>()];
            let once = apply_mask(&w, &mask).unwrap();
            let twice = apply_mask(&once, &mask).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
