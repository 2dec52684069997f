//! Heuristic interaction policy for benchmark generation.
//!
//! Encourages changes of spatial order and keeps objects inside the
//! workspace: objects are chosen by a softmax over per-object scores with a
//! cyclic update rule, and directions by a softmax over alignment with the
//! object's net and recent motion, with a -10 punishment for directions that
//! push an already-far object further from the workspace center.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{PushAction, SceneState, SimConfig};
use crate::voxel::GridSpec;

/// Per-object policy bookkeeping across an episode.
#[derive(Debug, Clone)]
pub struct PolicyState {
    /// Scores stay in {-2, -1, 0, 1, 2} under the update rule.
    pub scores: Vec<i32>,
    initial: Vec<Vector2<f64>>,
    last: Vec<Vector2<f64>>,
    current: Vec<Vector2<f64>>,
}

impl PolicyState {
    pub fn new(scene: &SceneState) -> Self {
        let pos: Vec<Vector2<f64>> = scene.objects.iter().map(|o| o.center_xy()).collect();
        PolicyState {
            scores: vec![0; scene.objects.len()],
            initial: pos.clone(),
            last: pos.clone(),
            current: pos,
        }
    }

    /// Records the scene's positions at the start of a step: the previous
    /// current positions become the "last" positions.
    pub fn observe(&mut self, scene: &SceneState) {
        self.last = std::mem::take(&mut self.current);
        self.current = scene.objects.iter().map(|o| o.center_xy()).collect();
    }
}

fn softmax_sample(rng: &mut ChaCha8Rng, scores: &[f64]) -> usize {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            return i;
        }
        pick -= w;
    }
    weights.len() - 1
}

const DIRECTIONS: usize = 8;
/// Distance from the workspace center beyond which outward pushes are
/// punished.
const FAR_DISTANCE: f64 = 0.2;
const PUNISHMENT: f64 = -10.0;

fn unit_dir(d: usize) -> Vector2<f64> {
    let a = d as f64 * std::f64::consts::FRAC_PI_4;
    Vector2::new(a.cos(), a.sin())
}

fn normalized_or_zero(v: Vector2<f64>) -> Vector2<f64> {
    let n = v.norm();
    if n > 1e-12 {
        v / n
    } else {
        Vector2::zeros()
    }
}

/// Samples one push: choose an object (softmax over scores, then the cyclic
/// score update 0 -> 1 -> 2 -> -2), choose a direction (softmax over
/// `Q(v) = 1.5 v.norm(p_t - p_0) + 2 v.norm(p_t - p_{t-1})` with the
/// out-of-workspace punishment), and place the start cell behind the object
/// footprint at two voxels clearance.
pub fn interaction_policy(
    scene: &SceneState,
    pstate: &mut PolicyState,
    rng: &mut ChaCha8Rng,
    grid: &GridSpec,
    cfg: &SimConfig,
) -> PushAction {
    assert!(!scene.objects.is_empty(), "policy needs at least one object");

    let obj_scores: Vec<f64> = pstate.scores.iter().map(|&s| s as f64).collect();
    let chosen = softmax_sample(rng, &obj_scores);
    pstate.scores[chosen] += 1;
    if pstate.scores[chosen] > 2 {
        pstate.scores[chosen] = -2;
    }

    let p0 = pstate.initial[chosen];
    let p_last = pstate.last[chosen];
    let p_now = pstate.current[chosen];
    let net = normalized_or_zero(p_now - p0);
    let recent = normalized_or_zero(p_now - p_last);

    let mut q = [0.0f64; DIRECTIONS];
    let far = p_now.norm() >= FAR_DISTANCE;
    for (d, qd) in q.iter_mut().enumerate() {
        let v = unit_dir(d);
        *qd = 1.5 * v.dot(&net) + 2.0 * v.dot(&recent);
        if far && v.dot(&p_now) > 0.0 {
            *qd += PUNISHMENT;
        }
    }
    let d = softmax_sample(rng, &q);
    let dir = unit_dir(d);

    // Start behind the footprint along -d with two voxels of clearance
    // between the pusher surface and the footprint.
    let obj = &scene.objects[chosen];
    let standoff =
        obj.shape.footprint_radius() + cfg.pusher_radius + 2.0 * grid.voxel_size;
    let start = p_now - dir * standoff;
    let cell = grid.world_to_voxel(Vector3::new(start.x, start.y, 0.0));
    PushAction {
        px: cell.x.round().clamp(0.0, (grid.dims[0] - 1) as f64) as u32,
        py: cell.y.round().clamp(0.0, (grid.dims[1] - 1) as f64) as u32,
        d: d as u8,
    }
}
