//! Instance mask volumes, optimal channel matching, and training losses.
//!
//! Masks hold a per-voxel probability simplex over `k` channels: `k-1` object
//! channels plus one background/empty channel at the last index. Matching
//! between predicted and ground-truth object channels is exact: all `(k-1)!`
//! permutations are enumerated (the background is a fixed point), which is
//! why `k` is capped at [`crate::MAX_CHANNELS`].

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{require_same_grid, GridSpec};
use crate::MAX_CHANNELS;

/// Numerical floor added inside logarithms.
pub const LOG_EPSILON: f64 = 1e-8;

/// Per-voxel probability distribution over `k` instance channels.
///
/// Storage is voxel-major: `probs[v * k + c]` is channel `c` at voxel `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskVolume {
    pub spec: GridSpec,
    k: usize,
    probs: Vec<f64>,
}

impl InstanceMaskVolume {
    /// All-background volume: every voxel is one-hot on the last channel.
    pub fn background(spec: GridSpec, k: usize) -> Self {
        assert!(k >= 2, "need at least one object channel plus background");
        let n = spec.voxel_count();
        let mut probs = vec![0.0; n * k];
        for v in 0..n {
            probs[v * k + k - 1] = 1.0;
        }
        InstanceMaskVolume { spec, k, probs }
    }

    /// One-hot volume from per-voxel channel indices.
    pub fn from_channel_indices(spec: GridSpec, k: usize, indices: &[u8]) -> Result<Self> {
        if indices.len() != spec.voxel_count() {
            return Err(Error::Invalid {
                what: "mask volume",
                why: format!(
                    "expected {} channel indices, got {}",
                    spec.voxel_count(),
                    indices.len()
                ),
            });
        }
        let mut m = InstanceMaskVolume::background(spec, k);
        for (v, &c) in indices.iter().enumerate() {
            if c as usize >= k {
                return Err(Error::Invalid {
                    what: "mask volume",
                    why: format!("channel index {c} out of range for k={k}"),
                });
            }
            m.set_one_hot(v, c as usize);
        }
        Ok(m)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn background_channel(&self) -> usize {
        self.k - 1
    }

    #[inline]
    pub fn voxel_probs(&self, v: usize) -> &[f64] {
        &self.probs[v * self.k..(v + 1) * self.k]
    }

    #[inline]
    pub fn set_voxel_probs(&mut self, v: usize, probs: &[f64]) {
        debug_assert_eq!(probs.len(), self.k);
        self.probs[v * self.k..(v + 1) * self.k].copy_from_slice(probs);
    }

    #[inline]
    pub fn set_one_hot(&mut self, v: usize, channel: usize) {
        let row = &mut self.probs[v * self.k..(v + 1) * self.k];
        row.fill(0.0);
        row[channel] = 1.0;
    }

    pub fn raw(&self) -> &[f64] {
        &self.probs
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    pub fn from_raw(spec: GridSpec, k: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != spec.voxel_count() * k {
            return Err(Error::Invalid {
                what: "mask volume",
                why: format!(
                    "expected {} probabilities, got {}",
                    spec.voxel_count() * k,
                    probs.len()
                ),
            });
        }
        Ok(InstanceMaskVolume { spec, k, probs })
    }

    /// Per-voxel argmax channel; ties resolve to the lowest index.
    pub fn harden(&self) -> Vec<u8> {
        let n = self.spec.voxel_count();
        let mut out = vec![0u8; n];
        for v in 0..n {
            let row = self.voxel_probs(v);
            let mut best = 0usize;
            for c in 1..self.k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out[v] = best as u8;
        }
        out
    }

    /// Integrated probability mass of one channel.
    pub fn channel_mass(&self, channel: usize) -> f64 {
        (0..self.spec.voxel_count())
            .map(|v| self.probs[v * self.k + channel])
            .sum()
    }

    /// Probability that the voxel belongs to any object (one minus the
    /// background probability).
    #[inline]
    pub fn object_mass_at(&self, v: usize) -> f64 {
        let row = self.voxel_probs(v);
        row[..self.k - 1].iter().sum()
    }

    /// Checks the per-voxel simplex invariant to the stated tolerance.
    pub fn validate_simplex(&self, tol: f64) -> Result<()> {
        for v in 0..self.spec.voxel_count() {
            let row = self.voxel_probs(v);
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0 + tol).contains(&p) {
                    return Err(Error::Invalid {
                        what: "mask volume",
                        why: format!("probability {p} at voxel {v} outside [0, 1]"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invalid {
                    what: "mask volume",
                    why: format!("voxel {v} sums to {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// Bijection on the object channels; the background channel is a fixed point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPermutation {
    /// Full-length mapping; `mapping[k-1] == k-1`.
    mapping: Vec<usize>,
}

impl ChannelPermutation {
    pub fn identity(k: usize) -> Self {
        ChannelPermutation {
            mapping: (0..k).collect(),
        }
    }

    /// Builds from an object-channel mapping (length `k-1`); the background
    /// fixed point is appended.
    pub fn from_object_mapping(object_mapping: Vec<usize>) -> Result<Self> {
        let k = object_mapping.len() + 1;
        let mut seen = vec![false; k - 1];
        for &m in &object_mapping {
            if m >= k - 1 || seen[m] {
                return Err(Error::Invalid {
                    what: "channel permutation",
                    why: format!("{object_mapping:?} is not a bijection on the object channels"),
                });
            }
            seen[m] = true;
        }
        let mut mapping = object_mapping;
        mapping.push(k - 1);
        Ok(ChannelPermutation { mapping })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    #[inline]
    pub fn apply(&self, channel: usize) -> usize {
        self.mapping[channel]
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> ChannelPermutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        ChannelPermutation { mapping: inv }
    }

    /// Composition `self` then `other`: `(self.then(other))(c) = other(self(c))`.
    pub fn then(&self, other: &ChannelPermutation) -> ChannelPermutation {
        ChannelPermutation {
            mapping: self.mapping.iter().map(|&m| other.apply(m)).collect(),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }
}

/// Dense `k x k` channel-to-channel cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    k: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn zeros(k: usize) -> Self {
        CostMatrix {
            k,
            data: vec![0.0; k * k],
        }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.k + j] = v;
    }

    /// Reorders rows so that row `perm(g)` of the result is row `g` of `self`;
    /// used to carry an accepted labeling into the next matching step.
    pub fn relabel_rows(&self, perm: &ChannelPermutation) -> CostMatrix {
        let mut out = CostMatrix::zeros(self.k);
        for g in 0..self.k {
            let target = perm.apply(g);
            for j in 0..self.k {
                out.set(target, j, self.at(g, j));
            }
        }
        out
    }
}

/// Weighting between the motion and mask losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Mask-loss weight.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 5.0 }
    }
}

/// Negative log-likelihood cost between every (ground-truth, predicted)
/// channel pair: `W(i, j) = -sum_v gt[v, i] * ln(pred[v, j] + eps)`.
pub fn pairwise_nll(gt: &InstanceMaskVolume, pred: &InstanceMaskVolume) -> Result<CostMatrix> {
    require_same_grid(&gt.spec, &pred.spec)?;
    if gt.channels() != pred.channels() {
        return Err(Error::ChannelMismatch {
            expected: gt.channels(),
            got: pred.channels(),
        });
    }
    let k = gt.channels();
    let mut w = CostMatrix::zeros(k);
    let mut logs = vec![0.0; k];
    // Fixed voxel iteration order keeps the accumulation bit-reproducible.
    for v in 0..gt.spec.voxel_count() {
        let g = gt.voxel_probs(v);
        let p = pred.voxel_probs(v);
        for (j, &pj) in p.iter().enumerate() {
            logs[j] = (pj + LOG_EPSILON).ln();
        }
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (j, &lj) in logs.iter().enumerate() {
                w.data[i * k + j] -= gi * lj;
            }
        }
    }
    Ok(w)
}

/// Total cost of a permutation: `sum_i W(i, p(i))`, summed in ascending
/// channel order (callers comparing against independent solvers rely on the
/// fixed summation order).
pub fn matching_cost(w: &CostMatrix, p: &ChannelPermutation) -> f64 {
    (0..w.k()).map(|i| w.at(i, p.apply(i))).sum()
}

/// Exhaustive optimal matching over the object channels (background fixed).
/// Ties resolve to the lexicographically smallest permutation.
pub fn optimal_matching(w: &CostMatrix) -> Result<ChannelPermutation> {
    let k = w.k();
    if k > MAX_CHANNELS {
        return Err(Error::KTooLarge {
            k,
            max: MAX_CHANNELS,
        });
    }
    if k < 2 {
        return Err(Error::Invalid {
            what: "cost matrix",
            why: format!("k={k} has no object channel"),
        });
    }
    let mut best: Option<(f64, ChannelPermutation)> = None;
    for perm in (0..k - 1).permutations(k - 1) {
        let candidate = ChannelPermutation::from_object_mapping(perm)?;
        let cost = matching_cost(w, &candidate);
        let better = match &best {
            None => true,
            Some((c, _)) => cost < *c,
        };
        if better {
            best = Some((cost, candidate));
        }
    }
    Ok(best.expect("at least one permutation").1)
}

/// Cross-entropy mask loss under a fixed channel matching: mean over voxels
/// of `-sum_i gt[i] * ln(pred[p(i)] + eps)`.
pub fn mask_loss(
    pred: &InstanceMaskVolume,
    gt: &InstanceMaskVolume,
    p: &ChannelPermutation,
) -> Result<f64> {
    require_same_grid(&gt.spec, &pred.spec)?;
    if gt.channels() != pred.channels() {
        return Err(Error::ChannelMismatch {
            expected: gt.channels(),
            got: pred.channels(),
        });
    }
    let k = gt.channels();
    let n = gt.spec.voxel_count();
    let mut acc = 0.0;
    for v in 0..n {
        let g = gt.voxel_probs(v);
        let q = pred.voxel_probs(v);
        for i in 0..k {
            if g[i] == 0.0 {
                continue;
            }
            acc -= g[i] * (q[p.apply(i)] + LOG_EPSILON).ln();
        }
    }
    Ok(acc / n as f64)
}

/// Combined training loss: `l_motion + alpha * l_mask`.
pub fn total_loss(l_motion: f64, l_mask: f64, cfg: &LossConfig) -> f64 {
    l_motion + cfg.alpha * l_mask
}

/// Chains per-step matchings through a sequence: step 0's optimal matching
/// relabels the ground truth and seeds step 1; each later step matches the
/// ground truth under the previously accepted labeling and composes the
/// result. Returns the accumulated ground-truth channel order per step.
pub fn sequence_matching(step_costs: &[CostMatrix]) -> Result<Vec<ChannelPermutation>> {
    let mut orders = Vec::with_capacity(step_costs.len());
    let mut carried: Option<ChannelPermutation> = None;
    for w in step_costs {
        let effective = match &carried {
            None => w.clone(),
            Some(acc) => w.relabel_rows(acc),
        };
        let step_match = optimal_matching(&effective)?;
        let order = match &carried {
            None => step_match,
            Some(acc) => acc.then(&step_match),
        };
        orders.push(order.clone());
        carried = Some(order);
    }
    Ok(orders)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_voxel() -> GridSpec {
        GridSpec::new([1, 1, 1], 0.004, [0.0; 3]).unwrap()
    }

    #[test]
    fn pairwise_nll_single_voxel_example() {
        let spec = single_voxel();
        let mut gt = InstanceMaskVolume::background(spec, 2);
        gt.set_one_hot(0, 0);
        let mut pred = InstanceMaskVolume::background(spec, 2);
        pred.set_voxel_probs(0, &[0.9, 0.1]);
        let w = pairwise_nll(&gt, &pred).unwrap();
        assert!((w.at(0, 0) - (-(0.9f64 + LOG_EPSILON).ln())).abs() < 1e-15);
        assert!((w.at(0, 0) - 0.1054).abs() < 1e-4);
        assert!((w.at(0, 1) - 2.3026).abs() < 1e-4);
        // gt channel 1 is empty here, so its row is all zeros.
        assert_eq!(w.at(1, 0), 0.0);
        assert_eq!(w.at(1, 1), 0.0);
    }

    #[test]
    fn pairwise_nll_perfect_prediction() {
        let spec = GridSpec::new([2, 2, 2], 0.004, [0.0; 3]).unwrap();
        let mut gt = InstanceMaskVolume::background(spec, 3);
        for v in 0..spec.voxel_count() {
            gt.set_one_hot(v, v % 3);
        }
        let w = pairwise_nll(&gt, &gt).unwrap();
        for i in 0..3 {
            assert!(w.at(i, i).abs() < 1e-6, "diagonal ~0");
            for j in 0..3 {
                if i != j {
                    assert!(w.at(i, j) > 1.0, "off-diagonal large");
                }
            }
        }
    }

    #[test]
    fn optimal_matching_examples() {
        // Diagonal-dominant-low: identity.
        let mut w = CostMatrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                w.set(i, j, if i == j { 0.1 } else { 2.3 });
            }
        }
        assert!(optimal_matching(&w).unwrap().is_identity());

        // Cheap anti-diagonal on channels {0, 1}: swap.
        let mut w = CostMatrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                w.set(i, j, 2.3);
            }
        }
        w.set(0, 1, 0.1);
        w.set(1, 0, 0.1);
        let p = optimal_matching(&w).unwrap();
        assert_eq!(p.as_slice(), &[1, 0, 2]);
    }

    #[test]
    fn optimal_matching_tie_breaks_lexicographically() {
        // All-equal costs: every permutation ties; the identity is the
        // lexicographically smallest.
        let mut w = CostMatrix::zeros(4);
        for i in 0..4 {
            for j in 0..4 {
                w.set(i, j, 1.0);
            }
        }
        assert!(optimal_matching(&w).unwrap().is_identity());
    }

    #[test]
    fn optimal_matching_row_offset_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let mut w = CostMatrix::zeros(5);
            for i in 0..5 {
                for j in 0..5 {
                    w.set(i, j, rng.random_range(0.0..10.0));
                }
            }
            let base = optimal_matching(&w).unwrap();
            let mut shifted = w.clone();
            let row = rng.random_range(0..5);
            let offset = rng.random_range(-5.0..5.0);
            for j in 0..5 {
                shifted.set(row, j, w.at(row, j) + offset);
            }
            assert_eq!(optimal_matching(&shifted).unwrap(), base);
        }
    }

    #[test]
    fn optimal_matching_k_too_large() {
        let w = CostMatrix::zeros(7);
        assert!(matches!(
            optimal_matching(&w),
            Err(Error::KTooLarge { k: 7, .. })
        ));
    }

    #[test]
    fn mask_loss_perfect_and_uniform() {
        let spec = GridSpec::new([3, 3, 2], 0.004, [0.0; 3]).unwrap();
        let mut gt = InstanceMaskVolume::background(spec, 5);
        for v in 0..spec.voxel_count() {
            gt.set_one_hot(v, v % 5);
        }
        let id = ChannelPermutation::identity(5);
        assert!(mask_loss(&gt, &gt, &id).unwrap() <= 1e-6);

        let mut uniform = InstanceMaskVolume::background(spec, 5);
        for v in 0..spec.voxel_count() {
            uniform.set_voxel_probs(v, &[0.2; 5]);
        }
        let loss = mask_loss(&uniform, &gt, &id).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-6, "ln 5 per voxel");
    }

    #[test]
    fn mask_loss_relabeling_symmetry() {
        let spec = GridSpec::new([3, 3, 2], 0.004, [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 4;
        let mut gt = InstanceMaskVolume::background(spec, k);
        let mut pred = InstanceMaskVolume::background(spec, k);
        for v in 0..spec.voxel_count() {
            gt.set_one_hot(v, rng.random_range(0..k));
            let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            pred.set_voxel_probs(v, &w);
        }
        let id = ChannelPermutation::identity(k);
        let base = mask_loss(&pred, &gt, &id).unwrap();

        // Swap prediction channels 0 and 2, then compose the swap into p.
        let swap = ChannelPermutation::from_object_mapping(vec![2, 1, 0]).unwrap();
        let mut swapped = InstanceMaskVolume::background(spec, k);
        for v in 0..spec.voxel_count() {
            let row = pred.voxel_probs(v);
            let mut new = vec![0.0; k];
            for c in 0..k {
                new[swap.apply(c)] = row[c];
            }
            swapped.set_voxel_probs(v, &new);
        }
        let relabeled = mask_loss(&swapped, &gt, &swap).unwrap();
        assert!((base - relabeled).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(0.0, 0.0, &cfg), 0.0);
        assert_eq!(total_loss(1.0, 2.0, &cfg), 11.0);
        assert_eq!(total_loss(0.5, 0.0, &LossConfig { alpha: 9.0 }), 0.5);
    }

    /// Cost matrix whose optimum is the given permutation.
    fn matrix_preferring(k: usize, p: &ChannelPermutation) -> CostMatrix {
        let mut w = CostMatrix::zeros(k);
        for i in 0..k {
            for j in 0..k {
                w.set(i, j, if p.apply(i) == j { 0.1 } else { 3.0 });
            }
        }
        w
    }

    #[test]
    fn sequence_matching_single_step_equals_optimal() {
        let swap = ChannelPermutation::from_object_mapping(vec![1, 0, 2]).unwrap();
        let w = matrix_preferring(4, &swap);
        let orders = sequence_matching(std::slice::from_ref(&w)).unwrap();
        assert_eq!(orders.len(), 1);
        assert_eq!(orders[0], optimal_matching(&w).unwrap());
    }

    #[test]
    fn sequence_matching_constant_scene_is_stationary() {
        let swap = ChannelPermutation::from_object_mapping(vec![2, 0, 1]).unwrap();
        let w = matrix_preferring(4, &swap);
        let orders = sequence_matching(&[w.clone(), w.clone(), w]).unwrap();
        assert_eq!(orders[0], swap);
        assert_eq!(orders[1], swap);
        assert_eq!(orders[2], swap);
    }

    #[test]
    fn sequence_matching_step_local_swap() {
        // Step 0 prefers identity; step 1's prediction swaps channels 0 and 1.
        let id = ChannelPermutation::identity(4);
        let swap = ChannelPermutation::from_object_mapping(vec![1, 0, 2]).unwrap();
        let w0 = matrix_preferring(4, &id);
        let w1 = matrix_preferring(4, &swap);
        let orders = sequence_matching(&[w0, w1]).unwrap();
        assert_eq!(orders[0], id);
        assert_eq!(orders[1], swap);
        // Exhaustive check: the step-1 order differs from step 0 exactly by
        // the swap.
        assert_eq!(orders[0].then(&swap), orders[1]);
    }

    #[test]
    fn simplex_validation() {
        let spec = single_voxel();
        let mut m = InstanceMaskVolume::background(spec, 3);
        assert!(m.validate_simplex(1e-6).is_ok());
        m.set_voxel_probs(0, &[0.5, 0.2, 0.2]);
        assert!(m.validate_simplex(1e-6).is_err());
    }

    #[test]
    fn harden_breaks_ties_low() {
        let spec = single_voxel();
        let mut m = InstanceMaskVolume::background(spec, 3);
        m.set_voxel_probs(0, &[0.4, 0.4, 0.2]);
        assert_eq!(m.harden(), vec![0]);
    }
}
