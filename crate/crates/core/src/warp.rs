//! Forward warping of the scene representation and history aggregation.
//!
//! The persistent state is a k-channel instance probability volume. Each
//! step, the previous state is warped along the blended scene flow (so that
//! history lines up spatially with the next observation), the new TSDF
//! observation is segmented into amodal object evidence, segments are matched
//! to state channels, and the two are fused voxel by voxel. Occluded regions
//! keep the (warped) prior, which is what gives the representation object
//! permanence under both static and dynamic occlusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{optimal_matching, CostMatrix, InstanceMaskVolume};
use crate::motion::{blended_flow, TransformSet};
use crate::voxel::{require_same_grid, trilinear_corners, TsdfVolume, VectorVolume};

/// How history is carried into each aggregation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Warp the previous state with predicted motion, then aggregate.
    Dsr,
    /// Aggregate the previous state without warping it.
    NoWarp,
    /// No history aggregation at all.
    SingleStep,
    /// Warp the previous state with ground-truth motion (performance ceiling).
    GtWarp,
}

impl AggregationMode {
    pub fn uses_warp(self) -> bool {
        matches!(self, AggregationMode::Dsr | AggregationMode::GtWarp)
    }

    pub fn uses_history(self) -> bool {
        !matches!(self, AggregationMode::SingleStep)
    }

    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Dsr => "dsr",
            AggregationMode::NoWarp => "nowarp",
            AggregationMode::SingleStep => "singlestep",
            AggregationMode::GtWarp => "gtwarp",
        }
    }
}

/// The aggregated amodal scene representation carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DsrState {
    /// Amodal per-instance probability volume (the persistent state).
    pub masks: InstanceMaskVolume,
    /// Interaction index of the observation this state incorporates.
    pub step: usize,
    /// Stable instance labels for the object channels; `None` marks an empty
    /// channel. Labels are unique within an episode and never reused.
    pub identities: Vec<Option<u64>>,
    /// Next unissued instance label.
    pub next_identity: u64,
}

impl DsrState {
    /// Builds the initial state from the first observation. Every mode starts
    /// the same way: there is no history yet.
    pub fn from_observation(obs: &TsdfVolume, cfg: &AggregateConfig) -> Result<DsrState> {
        aggregate(None, None, obs, AggregationMode::SingleStep, cfg)
    }

    /// Channels currently holding an instance.
    pub fn live_channels(&self) -> Vec<usize> {
        self.identities
            .iter()
            .enumerate()
            .filter_map(|(c, id)| id.map(|_| c))
            .collect()
    }
}

/// Scatters each source voxel's channel vector to its flow-displaced position
/// with trilinear weights, scaled by the voxel's predicted object mass
/// `m_i = 1 - background`, then normalizes every target by its accumulated
/// weight. Targets that receive (almost) nothing become pure background.
pub fn forward_warp(
    source: &InstanceMaskVolume,
    flow: &VectorVolume,
    masks: &InstanceMaskVolume,
) -> Result<InstanceMaskVolume> {
    require_same_grid(&source.spec, &flow.spec)?;
    require_same_grid(&source.spec, &masks.spec)?;
    if !flow.is_finite() {
        return Err(Error::NonFiniteFlow);
    }
    let spec = source.spec;
    let k = source.channels();
    let inv_vs = 1.0 / spec.voxel_size;
    let [nx, ny, nz] = spec.dims;

    // Pass 1: active sources (nonzero object mass) with their displaced
    // coordinates, plus the voxel bounding box of every in-grid target.
    // Background voxels scatter nothing, so the accumulators only need to
    // cover that box.
    let mut active: Vec<(u32, f64, nalgebra::Vector3<f64>)> = Vec::new();
    let mut corners = [([0usize; 3], 0f64); 8];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut v = 0usize;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let m = masks.object_mass_at(v);
                if m > 0.0 {
                    let f = &flow.values[v];
                    let c = nalgebra::Vector3::new(
                        ix as f64 + f[0] * inv_vs,
                        iy as f64 + f[1] * inv_vs,
                        iz as f64 + f[2] * inv_vs,
                    );
                    let nc = trilinear_corners(spec.dims, c, &mut corners);
                    for &(idx, _) in &corners[..nc] {
                        for a in 0..3 {
                            lo[a] = lo[a].min(idx[a]);
                            hi[a] = hi[a].max(idx[a]);
                        }
                    }
                    active.push((v as u32, m, c));
                }
                v += 1;
            }
        }
    }

    let mut out = InstanceMaskVolume::background(spec, k);
    if active.is_empty() || lo[0] == usize::MAX {
        return Ok(out);
    }

    // Pass 2: scatter into region-local accumulators (source order fixed for
    // bit-reproducibility), then normalize. Targets with (almost) no
    // accumulated weight are undefined under the warp equation and stay pure
    // background.
    let rd = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let region_index =
        |idx: [usize; 3]| ((idx[0] - lo[0]) * rd[1] + (idx[1] - lo[1])) * rd[2] + (idx[2] - lo[2]);
    let rn = rd[0] * rd[1] * rd[2];
    let mut acc = vec![0.0f64; rn * k];
    let mut wsum = vec![0.0f64; rn];
    for &(v, m, c) in &active {
        let nc = trilinear_corners(spec.dims, c, &mut corners);
        let src = source.voxel_probs(v as usize);
        for &(idx, w) in &corners[..nc] {
            let t = region_index(idx);
            let wm = w * m;
            wsum[t] += wm;
            let dst = &mut acc[t * k..(t + 1) * k];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wm * s;
            }
        }
    }
    let mut row = vec![0.0f64; k];
    for rx in 0..rd[0] {
        for ry in 0..rd[1] {
            for rz in 0..rd[2] {
                let t = (rx * rd[1] + ry) * rd[2] + rz;
                if wsum[t] > 1e-12 {
                    for (r, &a) in row.iter_mut().zip(&acc[t * k..(t + 1) * k]) {
                        *r = a / wsum[t];
                    }
                    let global = spec.flat_index(rx + lo[0], ry + lo[1], rz + lo[2]);
                    out.set_voxel_probs(global, &row);
                }
            }
        }
    }
    Ok(out)
}

/// Voxel classification extracted from a TSDF observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelClass {
    /// Observed empty space in front of a surface.
    Free,
    /// Within the surface band of an observed surface.
    Surface,
    /// Behind observed surfaces or outside the camera frustum.
    Occluded,
}

/// Thresholds for turning a TSDF into occupancy evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceiveConfig {
    /// Normalized TSDF above this is observed free space.
    pub surface_band_outer: f64,
    /// Normalized TSDF below the negative of this is occluded interior.
    pub surface_band_inner: f64,
    /// Bottom voxel layers excluded from surface evidence (the table's own
    /// surface band would otherwise merge every object).
    pub table_layers: usize,
    /// Connected components smaller than this are discarded as noise.
    pub min_segment_voxels: usize,
}

impl Default for PerceiveConfig {
    fn default() -> Self {
        PerceiveConfig {
            surface_band_outer: 0.1,
            surface_band_inner: 0.5,
            table_layers: 1,
            min_segment_voxels: 5,
        }
    }
}

/// One connected piece of occupancy evidence with its occluded shadow.
#[derive(Debug, Clone)]
pub struct Segment {
    /// Flat voxel indices, ascending.
    pub voxels: Vec<u32>,
}

/// Labeled occupancy evidence extracted from one observation.
#[derive(Debug, Clone)]
pub struct Perception {
    pub classes: Vec<VoxelClass>,
    /// Per-voxel segment id, `u32::MAX` where unsegmented.
    pub segment_of: Vec<u32>,
    pub segments: Vec<Segment>,
}

const NO_SEGMENT: u32 = u32::MAX;

/// Classifies each voxel as free / surface / occluded and groups surface
/// evidence (plus the occluded shadow column under it, down to the table)
/// into 26-connected segments. The shadow completion is what makes the
/// segments an amodal guess rather than a visible shell.
pub fn perceive(obs: &TsdfVolume, cfg: &PerceiveConfig) -> Perception {
    let spec = obs.spec;
    let [nx, ny, nz] = spec.dims;
    let n = spec.voxel_count();

    let mut classes = vec![VoxelClass::Occluded; n];
    let mut v = 0usize;
    for _ix in 0..nx {
        for _iy in 0..ny {
            for iz in 0..nz {
                classes[v] = if !obs.known[v] {
                    VoxelClass::Occluded
                } else if obs.values[v] > cfg.surface_band_outer {
                    VoxelClass::Free
                } else if obs.values[v] < -cfg.surface_band_inner {
                    VoxelClass::Occluded
                } else if iz < cfg.table_layers {
                    // The table's own surface band reads as background.
                    VoxelClass::Free
                } else {
                    VoxelClass::Surface
                };
                v += 1;
            }
        }
    }

    // Candidate set: surface voxels plus occluded voxels lying under surface
    // evidence in their column (the object's occluded shadow).
    let mut candidate = vec![false; n];
    for ix in 0..nx {
        for iy in 0..ny {
            let base = (ix * ny + iy) * nz;
            let mut under_surface = false;
            for iz in (0..nz).rev() {
                let v = base + iz;
                match classes[v] {
                    VoxelClass::Surface => {
                        candidate[v] = true;
                        under_surface = true;
                    }
                    VoxelClass::Free => under_surface = false,
                    VoxelClass::Occluded => {
                        if under_surface {
                            candidate[v] = true;
                        }
                    }
                }
            }
        }
    }

    // 26-connected components in ascending seed order.
    let mut segment_of = vec![NO_SEGMENT; n];
    let mut segments: Vec<Segment> = Vec::new();
    let mut stack: Vec<u32> = Vec::new();
    for seed in 0..n {
        if !candidate[seed] || segment_of[seed] != NO_SEGMENT {
            continue;
        }
        let label = segments.len() as u32;
        let mut voxels = Vec::new();
        segment_of[seed] = label;
        stack.push(seed as u32);
        while let Some(v) = stack.pop() {
            voxels.push(v);
            let [ix, iy, iz] = spec.unflatten(v as usize);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (jx, jy, jz) = (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                        if jx < 0
                            || jy < 0
                            || jz < 0
                            || jx >= nx as i64
                            || jy >= ny as i64
                            || jz >= nz as i64
                        {
                            continue;
                        }
                        let u = spec.flat_index(jx as usize, jy as usize, jz as usize);
                        if candidate[u] && segment_of[u] == NO_SEGMENT {
                            segment_of[u] = label;
                            stack.push(u as u32);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        segments.push(Segment { voxels });
    }

    // Drop noise components, keeping ids dense and order stable.
    let mut kept: Vec<Segment> = Vec::new();
    let mut remap = vec![NO_SEGMENT; segments.len()];
    for (i, seg) in segments.into_iter().enumerate() {
        if seg.voxels.len() >= cfg.min_segment_voxels {
            remap[i] = kept.len() as u32;
            kept.push(seg);
        }
    }
    for s in segment_of.iter_mut() {
        if *s != NO_SEGMENT {
            *s = remap[*s as usize];
        }
    }

    Perception {
        classes,
        segment_of,
        segments: kept,
    }
}

/// Fusion parameters for history aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    /// Channel count (object channels + background).
    pub k: usize,
    /// Label smoothing toward background on observed-occupied voxels.
    pub eta: f64,
    /// Channels whose fused mass falls below this lose their identity.
    pub empty_mass_threshold: f64,
    /// Segments at least this many voxels count as live objects. When the
    /// segment count exceeds the channel capacity, smaller fragments (usually
    /// occlusion slivers cut off a real object) are discarded first; only
    /// live segments can trigger the capacity error.
    pub live_segment_voxels: usize,
    pub perceive: PerceiveConfig,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            k: crate::DEFAULT_CHANNELS,
            eta: 0.05,
            empty_mass_threshold: 0.5,
            live_segment_voxels: 120,
            perceive: PerceiveConfig::default(),
        }
    }
}

/// Fuses one observation with (possibly warped) history into a new state.
///
/// Segments are assigned to channels by maximizing voxel overlap against the
/// hardened prior; unmatched segments take the lowest-index empty channel.
/// Observed-free voxels become background, segment voxels take their channel
/// with probability `1 - eta`, and occluded voxels retain the prior, which is
/// the warped prior in warp modes and the stale prior in NoWarp.
pub fn aggregate(
    prior: Option<&DsrState>,
    warped_prior: Option<&InstanceMaskVolume>,
    obs: &TsdfVolume,
    mode: AggregationMode,
    cfg: &AggregateConfig,
) -> Result<DsrState> {
    let k = cfg.k;
    match (prior, warped_prior, mode) {
        (Some(_), None, m) if m.uses_warp() => {
            return Err(Error::Invalid {
                what: "aggregate inputs",
                why: format!("mode {} requires a warped prior", m.name()),
            })
        }
        (_, Some(_), m) if !m.uses_warp() => {
            return Err(Error::Invalid {
                what: "aggregate inputs",
                why: format!("mode {} does not take a warped prior", m.name()),
            })
        }
        (Some(_), _, AggregationMode::SingleStep) => {
            return Err(Error::Invalid {
                what: "aggregate inputs",
                why: "singlestep mode ignores history; pass no prior".to_string(),
            })
        }
        _ => {}
    }
    if let Some(p) = prior {
        require_same_grid(&p.masks.spec, &obs.spec)?;
        if p.masks.channels() != k {
            return Err(Error::ChannelMismatch {
                expected: k,
                got: p.masks.channels(),
            });
        }
    }
    if let Some(w) = warped_prior {
        require_same_grid(&w.spec, &obs.spec)?;
    }

    let perception = perceive(obs, &cfg.perceive);
    let n_segs = perception.segments.len();
    if n_segs > k - 1 {
        return Err(Error::TooManyObjects {
            found: n_segs,
            max: k - 1,
        });
    }

    // The prior volume used both for matching and occluded retention.
    let history: Option<&InstanceMaskVolume> = match mode {
        AggregationMode::Dsr | AggregationMode::GtWarp => warped_prior,
        AggregationMode::NoWarp => prior.map(|p| &p.masks),
        AggregationMode::SingleStep => None,
    };

    // Segment -> channel assignment by maximal voxel overlap with the
    // hardened prior; exhaustive matching with the background pinned.
    let mut overlap = vec![vec![0usize; n_segs]; k - 1];
    if let Some(h) = history {
        let hard = h.harden();
        for (j, seg) in perception.segments.iter().enumerate() {
            for &v in &seg.voxels {
                let c = hard[v as usize] as usize;
                if c < k - 1 {
                    overlap[c][j] += 1;
                }
            }
        }
    }
    let mut w = CostMatrix::zeros(k);
    for (i, row) in overlap.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            w.set(i, j, -(count as f64));
        }
    }
    let p = optimal_matching(&w)?;

    let empty_channel = |c: usize| prior.map_or(true, |pr| pr.identities[c].is_none());
    let mut seg_channel = vec![usize::MAX; n_segs];
    let mut claimed = vec![false; k - 1];
    let mut pending: Vec<usize> = Vec::new();
    for c in 0..k - 1 {
        let j = p.apply(c);
        if j < n_segs {
            if overlap[c][j] > 0 || history.is_none() {
                seg_channel[j] = c;
                claimed[c] = true;
            } else {
                pending.push(j);
            }
        }
    }
    pending.sort_unstable();
    for j in pending {
        // Unmatched segment: lowest-index empty unclaimed channel, falling
        // back to any unclaimed channel if none is empty.
        let slot = (0..k - 1)
            .find(|&c| !claimed[c] && empty_channel(c))
            .or_else(|| (0..k - 1).find(|&c| !claimed[c]));
        let c = slot.expect("segment count is bounded by the channel count");
        seg_channel[j] = c;
        claimed[c] = true;
    }

    // Per-voxel fusion.
    let spec = obs.spec;
    let mut fused = InstanceMaskVolume::background(spec, k);
    let mut row = vec![0.0f64; k];
    for v in 0..spec.voxel_count() {
        let seg = perception.segment_of[v];
        if seg != NO_SEGMENT {
            let c = seg_channel[seg as usize];
            row.fill(0.0);
            row[c] = 1.0 - cfg.eta;
            row[k - 1] = cfg.eta;
            fused.set_voxel_probs(v, &row);
        } else {
            match perception.classes[v] {
                VoxelClass::Occluded => {
                    if let Some(h) = history {
                        fused.set_voxel_probs(v, h.voxel_probs(v));
                    }
                    // No history: stays background.
                }
                VoxelClass::Free | VoxelClass::Surface => {
                    // Observed empty, or surface evidence discarded as noise:
                    // background (already one-hot).
                }
            }
        }
    }

    // Identity propagation. A channel keeps its label while it keeps mass;
    // channels claimed by a segment with zero prior overlap hold a newly
    // observed object and get a fresh label. Labels are never reused.
    let mut fresh = vec![false; k - 1];
    for j in 0..n_segs {
        let c = seg_channel[j];
        if overlap[c][j] == 0 {
            fresh[c] = true;
        }
    }
    let mut identities = vec![None; k - 1];
    let mut next_identity = prior.map_or(0, |p| p.next_identity);
    for c in 0..k - 1 {
        let mass = fused.channel_mass(c);
        if mass < cfg.empty_mass_threshold {
            continue;
        }
        let carried = if fresh[c] {
            None
        } else {
            prior.and_then(|p| p.identities[c])
        };
        identities[c] = Some(carried.unwrap_or_else(|| {
            let id = next_identity;
            next_identity += 1;
            id
        }));
    }

    Ok(DsrState {
        masks: fused,
        step: prior.map_or(0, |p| p.step + 1),
        identities,
        next_identity,
    })
}

/// Advances the state through one interaction: computes the blended flow from
/// the predicted masks and transforms, forward-warps the state (in warp
/// modes), and aggregates the next observation.
pub fn step(
    state: &DsrState,
    predicted_masks: &InstanceMaskVolume,
    predicted_transforms: &TransformSet,
    obs_next: &TsdfVolume,
    mode: AggregationMode,
    cfg: &AggregateConfig,
) -> Result<DsrState> {
    match mode {
        AggregationMode::SingleStep => aggregate(None, None, obs_next, mode, cfg),
        AggregationMode::NoWarp => aggregate(Some(state), None, obs_next, mode, cfg),
        AggregationMode::Dsr | AggregationMode::GtWarp => {
            let flow = blended_flow(predicted_masks, predicted_transforms)?;
            let warped = forward_warp(&state.masks, &flow, predicted_masks)?;
            aggregate(Some(state), Some(&warped), obs_next, mode, cfg)
        }
    }
}

/// Prediction-only state advance used by the planner: warps the state along
/// the predicted motion without fusing an observation (there is none during
/// planning rollouts).
pub fn predict_step(
    state: &DsrState,
    predicted_masks: &InstanceMaskVolume,
    predicted_transforms: &TransformSet,
) -> Result<DsrState> {
    let flow = blended_flow(predicted_masks, predicted_transforms)?;
    let warped = forward_warp(&state.masks, &flow, predicted_masks)?;
    Ok(DsrState {
        masks: warped,
        step: state.step + 1,
        identities: state.identities.clone(),
        next_identity: state.next_identity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::InstanceMaskVolume;
    use crate::voxel::{GridSpec, TsdfVolume, VectorVolume};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec8() -> GridSpec {
        GridSpec::new([8, 8, 8], 0.004, [0.0; 3]).unwrap()
    }

    /// Random mask with zero background everywhere (m_i = 1).
    fn random_object_mask(spec: GridSpec, k: usize, seed: u64) -> InstanceMaskVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = InstanceMaskVolume::background(spec, k);
        for v in 0..spec.voxel_count() {
            let mut w: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            w.push(0.0);
            m.set_voxel_probs(v, &w);
        }
        m
    }

    #[test]
    fn zero_flow_full_object_mass_is_identity() {
        let spec = spec8();
        let m = random_object_mask(spec, 4, 3);
        let flow = VectorVolume::zeros(spec);
        let out = forward_warp(&m, &flow, &m).unwrap();
        assert_eq!(out.raw(), m.raw(), "bit-exact identity");
    }

    #[test]
    fn unit_shift_moves_content_and_vacates_background() {
        let spec = spec8();
        let m = random_object_mask(spec, 3, 17);
        let mut flow = VectorVolume::zeros(spec);
        for v in flow.values.iter_mut() {
            v[0] = spec.voxel_size; // +1 voxel in x, exactly
        }
        let out = forward_warp(&m, &flow, &m).unwrap();
        for ix in 1..8 {
            for iy in 0..8 {
                for iz in 0..8 {
                    let src = spec.flat_index(ix - 1, iy, iz);
                    let dst = spec.flat_index(ix, iy, iz);
                    assert_eq!(out.voxel_probs(dst), m.voxel_probs(src));
                }
            }
        }
        // Vacated slab is pure background.
        for iy in 0..8 {
            for iz in 0..8 {
                let v = spec.flat_index(0, iy, iz);
                assert_eq!(out.voxel_probs(v), &[0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn half_voxel_shift_splits_then_normalizes_one_hot() {
        let spec = spec8();
        let mut m = InstanceMaskVolume::background(spec, 3);
        let src = spec.flat_index(3, 4, 4);
        m.set_one_hot(src, 0);
        let mut flow = VectorVolume::zeros(spec);
        flow.values[src][0] = 0.5 * spec.voxel_size;
        let out = forward_warp(&m, &flow, &m).unwrap();
        let a = spec.flat_index(3, 4, 4);
        let b = spec.flat_index(4, 4, 4);
        // Both halves renormalize back to the one-hot source vector.
        assert_eq!(out.voxel_probs(a), &[1.0, 0.0, 0.0]);
        assert_eq!(out.voxel_probs(b), &[1.0, 0.0, 0.0]);
        // Everything else stays background.
        for v in 0..spec.voxel_count() {
            if v != a && v != b {
                assert_eq!(out.voxel_probs(v), &[0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn scatter_weights_scale_with_object_mass() {
        // Two sources land on the same lattice target; the blend ratio must
        // be proportional to their object masses (pre-normalization weights).
        let spec = spec8();
        let mut src = InstanceMaskVolume::background(spec, 3);
        let a = spec.flat_index(2, 2, 2);
        let b = spec.flat_index(4, 2, 2);
        src.set_one_hot(a, 0);
        src.set_one_hot(b, 1);
        let mut masks = InstanceMaskVolume::background(spec, 3);
        masks.set_voxel_probs(a, &[0.8, 0.0, 0.2]);
        masks.set_voxel_probs(b, &[0.0, 0.4, 0.6]);
        let mut flow = VectorVolume::zeros(spec);
        flow.values[a][0] = spec.voxel_size; // 2 -> 3
        flow.values[b][0] = -spec.voxel_size; // 4 -> 3
        let out = forward_warp(&src, &flow, &masks).unwrap();
        let t = spec.flat_index(3, 2, 2);
        let probs = out.voxel_probs(t);
        assert!((probs[0] - 0.8 / 1.2).abs() < 1e-15);
        assert!((probs[1] - 0.4 / 1.2).abs() < 1e-15);
    }

    #[test]
    fn warp_preserves_simplex() {
        let spec = spec8();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for trial in 0..5 {
            let mut m = InstanceMaskVolume::background(spec, 4);
            for v in 0..spec.voxel_count() {
                let mut w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= s);
                m.set_voxel_probs(v, &w);
            }
            let mut flow = VectorVolume::zeros(spec);
            for v in flow.values.iter_mut() {
                for c in 0..3 {
                    v[c] = rng.random_range(-2.0..2.0) * spec.voxel_size;
                }
            }
            let out = forward_warp(&m, &flow, &m).unwrap();
            out.validate_simplex(1e-6)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        }
    }

    #[test]
    fn non_finite_flow_is_rejected() {
        let spec = spec8();
        let m = InstanceMaskVolume::background(spec, 3);
        let mut flow = VectorVolume::zeros(spec);
        flow.values[10][1] = f64::NAN;
        assert!(matches!(
            forward_warp(&m, &flow, &m),
            Err(Error::NonFiniteFlow)
        ));
    }

    /// Builds a TSDF whose values mark a solid axis-aligned box resting on
    /// the table: surface band at the box top, occluded interior below it,
    /// free elsewhere.
    fn synthetic_box_tsdf(spec: GridSpec, x0: usize, x1: usize, y0: usize, y1: usize, top: usize) -> TsdfVolume {
        let mut t = TsdfVolume::filled(spec, 1.0, true);
        for ix in x0..x1 {
            for iy in y0..y1 {
                for iz in 0..top {
                    let v = spec.flat_index(ix, iy, iz);
                    t.values[v] = if iz == top - 1 { 0.0 } else { -1.0 };
                }
            }
        }
        t
    }

    #[test]
    fn perceive_empty_free_and_two_boxes() {
        let spec = GridSpec::new([16, 16, 8], 0.004, [0.0; 3]).unwrap();
        let free = TsdfVolume::filled(spec, 1.0, true);
        assert!(perceive(&free, &PerceiveConfig::default()).segments.is_empty());

        let one = synthetic_box_tsdf(spec, 2, 6, 2, 6, 4);
        let p = perceive(&one, &PerceiveConfig::default());
        assert_eq!(p.segments.len(), 1);
        // Shadow completion fills the column below the top surface.
        assert_eq!(p.segments[0].voxels.len(), 4 * 4 * 4);

        let mut two = synthetic_box_tsdf(spec, 2, 6, 2, 6, 4);
        for ix in 10..14 {
            for iy in 9..13 {
                for iz in 0..3 {
                    let v = spec.flat_index(ix, iy, iz);
                    two.values[v] = if iz == 2 { 0.0 } else { -1.0 };
                }
            }
        }
        let p = perceive(&two, &PerceiveConfig::default());
        assert_eq!(p.segments.len(), 2);
    }

    fn test_cfg(k: usize) -> AggregateConfig {
        AggregateConfig {
            k,
            ..AggregateConfig::default()
        }
    }

    #[test]
    fn single_step_matches_perception() {
        let spec = GridSpec::new([16, 16, 8], 0.004, [0.0; 3]).unwrap();
        let obs = synthetic_box_tsdf(spec, 2, 6, 2, 6, 4);
        let cfg = test_cfg(3);
        let state = aggregate(None, None, &obs, AggregationMode::SingleStep, &cfg).unwrap();
        let p = perceive(&obs, &cfg.perceive);
        let hard = state.masks.harden();
        for v in 0..spec.voxel_count() {
            if p.segment_of[v] == 0 {
                assert_eq!(hard[v], 0, "segment voxels take channel 0");
            } else {
                assert_eq!(hard[v], 2, "everything else is background");
            }
        }
        assert_eq!(state.identities, vec![Some(0), None]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn aggregate_rejects_too_many_objects() {
        let spec = GridSpec::new([32, 8, 8], 0.004, [0.0; 3]).unwrap();
        let mut obs = TsdfVolume::filled(spec, 1.0, true);
        // Three separated blocks with only two object channels available.
        for (j, x0) in [2usize, 12, 22].iter().enumerate() {
            let _ = j;
            for ix in *x0..*x0 + 4 {
                for iy in 2..6 {
                    for iz in 0..3 {
                        let v = spec.flat_index(ix, iy, iz);
                        obs.values[v] = if iz == 2 { 0.0 } else { -1.0 };
                    }
                }
            }
        }
        let cfg = test_cfg(3);
        assert!(matches!(
            aggregate(None, None, &obs, AggregationMode::SingleStep, &cfg),
            Err(Error::TooManyObjects { found: 3, max: 2 })
        ));
    }

    #[test]
    fn occluded_region_retains_history() {
        let spec = GridSpec::new([16, 16, 8], 0.004, [0.0; 3]).unwrap();
        let cfg = test_cfg(3);
        let obs0 = synthetic_box_tsdf(spec, 2, 6, 2, 6, 4);
        let state0 = DsrState::from_observation(&obs0, &cfg).unwrap();
        let id0 = state0.identities[0].unwrap();

        // Next observation: the box region is now fully occluded (unknown).
        let mut obs1 = TsdfVolume::filled(spec, 1.0, true);
        for ix in 0..8 {
            for iy in 0..8 {
                for iz in 0..8 {
                    let v = spec.flat_index(ix, iy, iz);
                    obs1.values[v] = -1.0;
                }
            }
        }
        let state1 = step(
            &state0,
            &state0.masks,
            &TransformSet::identity(3),
            &obs1,
            AggregationMode::Dsr,
            &cfg,
        )
        .unwrap();
        assert_eq!(state1.identities[0], Some(id0), "identity persists");
        assert!(
            state1.masks.channel_mass(0) > 0.9 * state0.masks.channel_mass(0),
            "occluded mass is retained"
        );
        assert_eq!(state1.step, 1);
    }

    #[test]
    fn moved_prior_observed_free_is_cleared_in_nowarp() {
        let spec = GridSpec::new([16, 16, 8], 0.004, [0.0; 3]).unwrap();
        let cfg = test_cfg(3);
        let obs0 = synthetic_box_tsdf(spec, 2, 6, 2, 6, 4);
        let state0 = DsrState::from_observation(&obs0, &cfg).unwrap();

        // The whole grid is now observed free: stale mass must vanish.
        let obs1 = TsdfVolume::filled(spec, 1.0, true);
        let state1 = step(
            &state0,
            &state0.masks,
            &TransformSet::identity(3),
            &obs1,
            AggregationMode::NoWarp,
            &cfg,
        )
        .unwrap();
        assert!(state1.masks.channel_mass(0) < 1e-9);
        assert_eq!(state1.identities[0], None);
    }
}
