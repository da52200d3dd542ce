//! Binary masks, magnitude pruning and mask permutation baselines.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("pruning rate {0} outside the open interval (0, 1)")]
    RateOutOfRange(f64),
    #[error("mask layer `{0}` has no matching parameter")]
    MissingParam(String),
    #[error("mask layer `{name}` has shape {mask:?}, parameter has {param:?}")]
    ShapeMismatch {
        name: String,
        mask: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("non-finite weight in `{0}`")]
    NonFinite(String),
    #[error("unknown permutation mode `{0}` (expected preserved, local or global)")]
    UnknownMode(String),
    #[error("masks cover different layers: {0}")]
    LayerMismatch(String),
    #[error("mask bits for `{name}`: expected {expected}, got {actual}")]
    BitCount {
        name: String,
        expected: usize,
        actual: usize,
    },
}

/// Keep (`true`) / drop (`false`) flags for one prunable tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Mask as 0/1 scalars for multiplicative application.
    pub fn values<T: Scalar>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

/// Binary mask over the prunable tensors of a model. Counts are cached and
/// kept consistent by every constructor and mutator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    layers: IndexMap<String, LayerMask>,
    total_ones: usize,
    total_size: usize,
}

impl Mask {
    /// All-ones mask over the prunable tensors of `params`.
    pub fn dense<T: Scalar>(params: &ParamStore<T>) -> Self {
        Self::dense_with(params, false)
    }

    /// All-ones mask; `include_biases` also covers conv/linear biases.
    pub fn dense_with<T: Scalar>(params: &ParamStore<T>, include_biases: bool) -> Self {
        let layers = params
            .iter()
            .filter(|(_, p)| {
                p.kind.is_prunable() || (include_biases && p.kind == crate::model::ParamKind::Bias)
            })
            .map(|(name, p)| {
                (
                    name.to_string(),
                    LayerMask {
                        shape: p.tensor.shape().to_vec(),
                        bits: vec![true; p.tensor.len()],
                    },
                )
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Builds a mask from explicit per-layer bits.
    pub fn from_bits(layers: Vec<(String, Vec<usize>, Vec<bool>)>) -> Result<Self, PruneError> {
        let mut map = IndexMap::new();
        for (name, shape, bits) in layers {
            let expected: usize = shape.iter().product();
            if expected != bits.len() {
                return Err(PruneError::BitCount {
                    name,
                    expected,
                    actual: bits.len(),
                });
            }
            map.insert(name, LayerMask { shape, bits });
        }
        Ok(Self::from_layers(map))
    }

    fn from_layers(layers: IndexMap<String, LayerMask>) -> Self {
        let total_ones = layers.values().map(LayerMask::ones).sum();
        let total_size = layers.values().map(LayerMask::len).sum();
        Self {
            layers,
            total_ones,
            total_size,
        }
    }

    pub fn total_ones(&self) -> usize {
        self.total_ones
    }

    pub fn total_size(&self) -> usize {
        self.total_size
    }

    /// Kept fraction `total_ones / total_size`.
    pub fn remaining_fraction(&self) -> f64 {
        if self.total_size == 0 {
            1.0
        } else {
            self.total_ones as f64 / self.total_size as f64
        }
    }

    pub fn get(&self, name: &str) -> Option<&LayerMask> {
        self.layers.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerMask)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Replaces one layer with an all-ones mask of `shape` (used when a layer
    /// is reinitialized and resized).
    pub fn set_dense(&mut self, name: &str, shape: Vec<usize>) {
        let n = shape.iter().product();
        self.layers.insert(
            name.to_string(),
            LayerMask {
                shape,
                bits: vec![true; n],
            },
        );
        *self = Self::from_layers(std::mem::take(&mut self.layers));
    }

    /// `true` when every kept entry of `self` is also kept in `previous`.
    pub fn is_subset_of(&self, previous: &Mask) -> bool {
        self.layers.len() == previous.layers.len()
            && self.layers.iter().all(|(name, m)| {
                previous.layers.get(name).is_some_and(|p| {
                    p.bits.len() == m.bits.len() && m.bits.iter().zip(&p.bits).all(|(&a, &b)| !a || b)
                })
            })
    }

    /// Checks every layer against a parameter of the same shape.
    pub fn check_aligned<T: Scalar>(&self, params: &ParamStore<T>) -> Result<(), PruneError> {
        for (name, m) in &self.layers {
            let p = params
                .get(name)
                .ok_or_else(|| PruneError::MissingParam(name.clone()))?;
            if p.tensor.shape() != m.shape.as_slice() {
                return Err(PruneError::ShapeMismatch {
                    name: name.clone(),
                    mask: m.shape.clone(),
                    param: p.tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Zeroes every masked coordinate of `params` in place.
    pub fn apply<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<(), PruneError> {
        self.check_aligned(params)?;
        for (name, m) in &self.layers {
            let t = &mut params.get_mut(name).expect("checked above").tensor;
            for (v, &keep) in t.data_mut().iter_mut().zip(&m.bits) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        Ok(())
    }
}

/// Per-layer accounting of one pruning step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPruneStat {
    pub name: String,
    pub size: usize,
    pub remaining_before: usize,
    pub pruned_now: usize,
    pub remaining_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerPruneStat>,
    pub remaining_fraction: f64,
}

impl PruneReport {
    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(|l| l.pruned_now).sum()
    }

    pub fn total_remaining(&self) -> usize {
        self.layers.iter().map(|l| l.remaining_after).sum()
    }
}

fn check_rate(rate: f64) -> Result<(), PruneError> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(PruneError::RateOutOfRange(rate))
    }
}

/// Number of weights removed from `remaining` at `rate`: `floor(rate · remaining)`.
pub fn prune_count(rate: f64, remaining: usize) -> usize {
    (rate * remaining as f64).floor() as usize
}

fn weight_slices<'a, T: Scalar>(params: &'a ParamStore<T>, mask: &Mask) -> Result<Vec<&'a [T]>, PruneError> {
    mask.check_aligned(params)?;
    mask.layers
        .keys()
        .map(|name| {
            let data = params.get(name).expect("aligned").tensor.data();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(PruneError::NonFinite(name.clone()));
            }
            Ok(data)
        })
        .collect()
}

/// Marks the `count` smallest-magnitude kept entries across `groups` as
/// pruned. Ties are broken by group order, then flat index.
fn prune_smallest<T: Scalar>(groups: &[&[T]], bits: &mut [Vec<bool>], count: usize) {
    if count == 0 {
        return;
    }
    let mut mags: Vec<T> = groups
        .iter()
        .zip(bits.iter())
        .flat_map(|(data, bits)| {
            data.iter()
                .zip(bits.iter())
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| v.abs())
        })
        .collect();
    debug_assert!(count <= mags.len());
    let (_, threshold, _) = mags.select_nth_unstable_by(count - 1, |a, b| a.partial_cmp(b).expect("finite"));
    let threshold = *threshold;
    let below = mags.iter().filter(|&&m| m < threshold).count();
    let mut ties = count - below;
    for (data, bits) in groups.iter().zip(bits.iter_mut()) {
        for (v, keep) in data.iter().zip(bits.iter_mut()) {
            if !*keep {
                continue;
            }
            let m = v.abs();
            if m < threshold {
                *keep = false;
            } else if m == threshold && ties > 0 {
                *keep = false;
                ties -= 1;
            }
        }
    }
}

fn report(before: &Mask, after: &Mask) -> PruneReport {
    let layers = before
        .layers
        .iter()
        .map(|(name, m)| {
            let remaining_after = after.layers[name].ones();
            let remaining_before = m.ones();
            LayerPruneStat {
                name: name.clone(),
                size: m.len(),
                remaining_before,
                pruned_now: remaining_before - remaining_after,
                remaining_after,
            }
        })
        .collect();
    PruneReport {
        layers,
        remaining_fraction: after.remaining_fraction(),
    }
}

/// Global magnitude pruning: all prunable tensors are pooled and the
/// `floor(rate · total_ones)` smallest-magnitude kept weights are removed.
/// Previously pruned entries stay pruned.
pub fn prune_global<T: Scalar>(params: &ParamStore<T>, mask: &Mask, rate: f64) -> Result<(Mask, PruneReport), PruneError> {
    check_rate(rate)?;
    let data = weight_slices(params, mask)?;
    let mut bits: Vec<Vec<bool>> = mask.layers.values().map(|m| m.bits.clone()).collect();
    prune_smallest(&data, &mut bits, prune_count(rate, mask.total_ones));
    let layers = mask
        .layers
        .iter()
        .zip(bits)
        .map(|((name, m), bits)| {
            (
                name.clone(),
                LayerMask {
                    shape: m.shape.clone(),
                    bits,
                },
            )
        })
        .collect();
    let next = Mask::from_layers(layers);
    let rep = report(mask, &next);
    Ok((next, rep))
}

/// Layerwise magnitude pruning: each tensor independently loses
/// `floor(rate · layer_ones)` of its smallest-magnitude kept weights.
pub fn prune_layerwise<T: Scalar>(
    params: &ParamStore<T>,
    mask: &Mask,
    rate: f64,
) -> Result<(Mask, PruneReport), PruneError> {
    check_rate(rate)?;
    let groups = weight_slices(params, mask)?;
    let layers = mask
        .layers
        .iter()
        .zip(&groups)
        .map(|((name, m), data)| {
            let mut bits = vec![m.bits.clone()];
            prune_smallest(&[*data], &mut bits, prune_count(rate, m.ones()));
            (
                name.clone(),
                LayerMask {
                    shape: m.shape.clone(),
                    bits: bits.pop().expect("one group"),
                },
            )
        })
        .collect();
    let next = Mask::from_layers(layers);
    let rep = report(mask, &next);
    Ok((next, rep))
}

/// Per layer, the pruned fraction of that layer divided by the overall pruned
/// fraction. Layerwise pruning gives 1.0 everywhere; a value below 1 means
/// the layer was spared relative to uniform pruning. A mask with nothing
/// pruned reports 1.0 for every layer.
pub fn layer_ratio_diagnostic(mask: &Mask) -> Vec<(String, f64)> {
    let overall = 1.0 - mask.remaining_fraction();
    mask.layers
        .iter()
        .map(|(name, m)| {
            let layer = 1.0 - m.ones() as f64 / m.len() as f64;
            let ratio = if overall > 0.0 { layer / overall } else { 1.0 };
            (name.clone(), ratio)
        })
        .collect()
}

/// How a mask is scrambled when building a random-ticket baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermuteMode {
    /// Mask kept exactly.
    Preserved,
    /// Kept entries shuffled within each layer; per-layer counts survive.
    Local,
    /// Kept entries shuffled across all layers; only the total survives.
    Global,
}

impl PermuteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PermuteMode::Preserved => "preserved",
            PermuteMode::Local => "local",
            PermuteMode::Global => "global",
        }
    }
}

impl fmt::Display for PermuteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PermuteMode {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "preserved" => Ok(PermuteMode::Preserved),
            "local" => Ok(PermuteMode::Local),
            "global" => Ok(PermuteMode::Global),
            other => Err(PruneError::UnknownMode(other.to_string())),
        }
    }
}

/// Uniformly shuffles the kept positions of `mask` according to `mode`.
pub fn permute_mask(mask: &Mask, mode: PermuteMode, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PermuteMode::Preserved => mask.clone(),
        PermuteMode::Local => {
            let layers = mask
                .layers
                .iter()
                .map(|(name, m)| {
                    let mut bits = m.bits.clone();
                    bits.shuffle(&mut rng);
                    (
                        name.clone(),
                        LayerMask {
                            shape: m.shape.clone(),
                            bits,
                        },
                    )
                })
                .collect();
            Mask::from_layers(layers)
        }
        PermuteMode::Global => {
            let mut all: Vec<bool> = mask.layers.values().flat_map(|m| m.bits.iter().copied()).collect();
            all.shuffle(&mut rng);
            let mut offset = 0;
            let layers = mask
                .layers
                .iter()
                .map(|(name, m)| {
                    let bits = all[offset..offset + m.len()].to_vec();
                    offset += m.len();
                    (
                        name.clone(),
                        LayerMask {
                            shape: m.shape.clone(),
                            bits,
                        },
                    )
                })
                .collect();
            Mask::from_layers(layers)
        }
    }
}
