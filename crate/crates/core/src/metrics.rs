//! Evaluation metrics: flow error and ordered/unordered instance IoU.
//!
//! IoU is computed on hardened (per-voxel argmax) masks over the object
//! channels only. Channels empty in the ground truth score 1 when the
//! prediction is also empty and 0 otherwise, which rewards correctly
//! predicting absence on scenes with fewer objects than channels.
//!
//! Unordered IoU optimizes the channel permutation per step; ordered IoU
//! picks one permutation for the whole sequence. Their gap measures identity
//! tracking failure: per-step optimization always dominates a single global
//! permutation.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{ChannelPermutation, InstanceMaskVolume};
use crate::voxel::{require_same_grid, VectorVolume};
use crate::MAX_CHANNELS;

/// Which voxels enter the flow error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowRegion {
    /// Voxels flagged visible (near observed object surfaces).
    Visible,
    /// All voxels.
    Full,
}

/// Flow error over a voxel selection: mean endpoint error in cm (primary)
/// plus the mean squared error in cm^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowError {
    pub endpoint_cm: f64,
    pub mse_cm2: f64,
}

/// Computes the flow error between prediction and ground truth over the
/// requested region; `visible` flags are required for [`FlowRegion::Visible`].
pub fn flow_error(
    pred: &VectorVolume,
    gt: &VectorVolume,
    region: FlowRegion,
    visible: Option<&[bool]>,
) -> Result<FlowError> {
    require_same_grid(&pred.spec, &gt.spec)?;
    let n = pred.values.len();
    let select = |v: usize| match region {
        FlowRegion::Full => true,
        FlowRegion::Visible => visible.map_or(false, |m| m[v]),
    };
    if region == FlowRegion::Visible {
        match visible {
            Some(m) if m.len() == n => {}
            _ => {
                return Err(Error::Invalid {
                    what: "visible mask",
                    why: "missing or wrong length for the visible region".to_string(),
                })
            }
        }
    }
    let mut count = 0usize;
    let mut sum_norm = 0.0;
    let mut sum_sq = 0.0;
    for v in 0..n {
        if !select(v) {
            continue;
        }
        let p = pred.values[v];
        let g = gt.values[v];
        let dx = (p[0] - g[0]) * 100.0;
        let dy = (p[1] - g[1]) * 100.0;
        let dz = (p[2] - g[2]) * 100.0;
        let sq = dx * dx + dy * dy + dz * dz;
        sum_sq += sq;
        sum_norm += sq.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(FlowError {
        endpoint_cm: sum_norm / count as f64,
        mse_cm2: sum_sq / count as f64,
    })
}

/// Builds the visible-region flags: voxels observed within the truncation
/// band of a surface (|tsdf| < 1) that belong to a ground-truth object.
pub fn visible_object_mask(tsdf: &crate::voxel::TsdfVolume, gt_masks: &InstanceMaskVolume) -> Vec<bool> {
    let k = gt_masks.channels();
    (0..tsdf.values.len())
        .map(|v| {
            tsdf.known[v]
                && tsdf.values[v].abs() < 1.0
                && gt_masks.voxel_probs(v)[k - 1] < 0.5
        })
        .collect()
}

/// Per-channel-pair IoU table over hardened masks, with the empty-channel
/// convention baked in.
fn iou_table(gt: &InstanceMaskVolume, pred: &InstanceMaskVolume) -> Result<Vec<Vec<f64>>> {
    require_same_grid(&gt.spec, &pred.spec)?;
    if gt.channels() != pred.channels() {
        return Err(Error::ChannelMismatch {
            expected: gt.channels(),
            got: pred.channels(),
        });
    }
    let k = gt.channels();
    if k > MAX_CHANNELS {
        return Err(Error::KTooLarge {
            k,
            max: MAX_CHANNELS,
        });
    }
    let hg = gt.harden();
    let hp = pred.harden();
    let m = k - 1;
    let mut inter = vec![vec![0usize; m]; m];
    let mut count_g = vec![0usize; m];
    let mut count_p = vec![0usize; m];
    for v in 0..hg.len() {
        let g = hg[v] as usize;
        let p = hp[v] as usize;
        if g < m {
            count_g[g] += 1;
        }
        if p < m {
            count_p[p] += 1;
        }
        if g < m && p < m {
            inter[g][p] += 1;
        }
    }
    let mut table = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            table[i][j] = if count_g[i] == 0 {
                // Empty ground-truth channel: reward predicting absence.
                if count_p[j] == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                let union = count_g[i] + count_p[j] - inter[i][j];
                inter[i][j] as f64 / union as f64
            };
        }
    }
    Ok(table)
}

fn mean_under_perm(table: &[Vec<f64>], perm: &[usize]) -> f64 {
    let m = perm.len();
    let sum: f64 = (0..m).map(|i| table[i][perm[i]]).sum();
    sum / m as f64
}

/// Per-step instance IoU maximized over object-channel permutations of the
/// prediction. Returns the best mean IoU and the permutation attaining it
/// (ties broken lexicographically).
pub fn unordered_iou(
    gt: &InstanceMaskVolume,
    pred: &InstanceMaskVolume,
) -> Result<(f64, ChannelPermutation)> {
    let table = iou_table(gt, pred)?;
    let m = table.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..m).permutations(m) {
        let score = mean_under_perm(&table, &perm);
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, perm));
        }
    }
    let (score, perm) = best.expect("at least one permutation");
    Ok((score, ChannelPermutation::from_object_mapping(perm)?))
}

/// Sequence instance IoU under a single permutation chosen to maximize the
/// summed per-step mean IoU. Returns the mean over steps under that
/// permutation.
pub fn ordered_iou(sequence: &[(&InstanceMaskVolume, &InstanceMaskVolume)]) -> Result<f64> {
    if sequence.is_empty() {
        return Err(Error::Invalid {
            what: "iou sequence",
            why: "need at least one step".to_string(),
        });
    }
    let tables: Vec<Vec<Vec<f64>>> = sequence
        .iter()
        .map(|(gt, pred)| iou_table(gt, pred))
        .collect::<Result<_>>()?;
    let m = tables[0].len();
    if tables.iter().any(|t| t.len() != m) {
        return Err(Error::ChannelMismatch {
            expected: m + 1,
            got: 0,
        });
    }
    let mut best: Option<f64> = None;
    for perm in (0..m).permutations(m) {
        let total: f64 = tables.iter().map(|t| mean_under_perm(t, &perm)).sum();
        if best.map_or(true, |b| total > b) {
            best = Some(total);
        }
    }
    Ok(best.unwrap() / sequence.len() as f64)
}

/// One structured metrics record per episode rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: String,
    pub flow_visible_cm: f64,
    pub flow_full_cm: f64,
    pub iou_unordered: f64,
    pub iou_ordered: f64,
}
