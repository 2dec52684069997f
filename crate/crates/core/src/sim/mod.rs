//! Deterministic quasi-static tabletop pushing simulator.
//!
//! Objects are upright primitives on a square workspace with the table at
//! z = 0 and the world origin at the workspace center. A push sweeps a
//! vertical cylindrical pusher along one of eight directions; at every
//! substep, penetrated objects are translated out along the minimal
//! horizontal separation vector (with a capped lever-arm yaw for boxes) and
//! any objects they run into are separated recursively. The contact
//! projection is exact per substep, so final poses are substep-count stable
//! for head-on pushes and every returned transform reproduces the object's
//! next-step geometry exactly.

mod camera;
mod episode;
mod policy;
mod tsdf;

pub use camera::{render_depth, CameraConfig, CameraModel, DepthImage};
pub use episode::{
    generate_episode, load_episode, save_episode, transform_set_for, Episode, EpisodeConfig,
    StepRecord,
};
pub use policy::{interaction_policy, PolicyState};
pub use tsdf::fuse_tsdf;

use nalgebra::{Rotation2, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::InstanceMaskVolume;
use crate::motion::SE3Transform;
use crate::voxel::GridSpec;

/// Upright primitive solid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned box (before yaw); full edge lengths in meters.
    Box { extents: [f64; 3] },
    /// Vertical cylinder.
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    /// Height of the shape's center above the table when resting on it.
    pub fn resting_height(&self) -> f64 {
        match self {
            Shape::Box { extents } => extents[2] / 2.0,
            Shape::Cylinder { height, .. } => *height / 2.0,
            Shape::Sphere { radius } => *radius,
        }
    }

    /// Radius of the smallest circle containing the horizontal footprint.
    pub fn footprint_radius(&self) -> f64 {
        match self {
            Shape::Box { extents } => extents[0].hypot(extents[1]) / 2.0,
            Shape::Cylinder { radius, .. } => *radius,
            Shape::Sphere { radius } => *radius,
        }
    }

    pub fn top_height(&self) -> f64 {
        match self {
            Shape::Box { extents } => extents[2],
            Shape::Cylinder { height, .. } => *height,
            Shape::Sphere { radius } => 2.0 * radius,
        }
    }
}

/// One rigid object: stable id, shape, and world pose (center + yaw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidObject {
    pub id: u64,
    pub shape: Shape,
    /// Local-to-world map: a point `p` of the shape (centered at the origin)
    /// sits at `R p + t` in the world. The simulator only produces planar
    /// poses (yaw plus horizontal translation at resting height).
    pub pose: SE3Transform,
}

impl RigidObject {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            self.pose.translation[0],
            self.pose.translation[1],
            self.pose.translation[2],
        )
    }

    pub fn center_xy(&self) -> Vector2<f64> {
        Vector2::new(self.pose.translation[0], self.pose.translation[1])
    }

    pub fn yaw(&self) -> f64 {
        self.pose.euler[2]
    }

    fn footprint(&self) -> Footprint {
        match self.shape {
            Shape::Box { extents } => Footprint::Rect {
                center: self.center_xy(),
                half: Vector2::new(extents[0] / 2.0, extents[1] / 2.0),
                yaw: self.yaw(),
            },
            Shape::Cylinder { radius, .. } | Shape::Sphere { radius } => Footprint::Circle {
                center: self.center_xy(),
                radius,
            },
        }
    }

    /// World-space point-in-solid test.
    pub fn contains(&self, p: Vector3<f64>) -> bool {
        let c = self.center();
        match self.shape {
            Shape::Sphere { radius } => (p - c).norm_squared() <= radius * radius,
            Shape::Cylinder { radius, height } => {
                let d = Vector2::new(p.x - c.x, p.y - c.y);
                d.norm_squared() <= radius * radius && (p.z - c.z).abs() <= height / 2.0
            }
            Shape::Box { extents } => {
                let rot = Rotation2::new(-self.yaw());
                let l = rot * Vector2::new(p.x - c.x, p.y - c.y);
                l.x.abs() <= extents[0] / 2.0
                    && l.y.abs() <= extents[1] / 2.0
                    && (p.z - c.z).abs() <= extents[2] / 2.0
            }
        }
    }
}

/// Horizontal footprint used by the planar contact model.
#[derive(Debug, Clone, Copy)]
enum Footprint {
    Circle {
        center: Vector2<f64>,
        radius: f64,
    },
    Rect {
        center: Vector2<f64>,
        half: Vector2<f64>,
        yaw: f64,
    },
}

/// A resolved penetration of footprint `b` against `a`: translating `b` by
/// `depth * dir` separates the pair. `contact` is the world contact point
/// used for lever arms.
#[derive(Debug, Clone, Copy)]
struct Contact {
    depth: f64,
    dir: Vector2<f64>,
    contact: Vector2<f64>,
}

fn circle_circle(ca: Vector2<f64>, ra: f64, cb: Vector2<f64>, rb: f64) -> Option<Contact> {
    let d = cb - ca;
    let dist = d.norm();
    let depth = ra + rb - dist;
    if depth <= 0.0 {
        return None;
    }
    let dir = if dist > 1e-12 {
        d / dist
    } else {
        Vector2::new(1.0, 0.0)
    };
    Some(Contact {
        depth,
        dir,
        contact: ca + dir * ra,
    })
}

/// Circle `a` against oriented rectangle `b`; `dir` moves the rectangle away.
fn circle_rect(
    ca: Vector2<f64>,
    ra: f64,
    cb: Vector2<f64>,
    half: Vector2<f64>,
    yaw: f64,
) -> Option<Contact> {
    let rot = Rotation2::new(-yaw);
    let back = Rotation2::new(yaw);
    let l = rot * (ca - cb);
    let clamped = Vector2::new(l.x.clamp(-half.x, half.x), l.y.clamp(-half.y, half.y));
    let diff = l - clamped;
    let dist = diff.norm();
    if dist > 1e-12 {
        // Circle center outside the rectangle.
        let depth = ra - dist;
        if depth <= 0.0 {
            return None;
        }
        let dir_local = -diff / dist;
        Some(Contact {
            depth,
            dir: back * dir_local,
            contact: cb + back * clamped,
        })
    } else {
        // Circle center inside: escape through the nearest face.
        let px = half.x - l.x.abs();
        let py = half.y - l.y.abs();
        let (depth, dir_local, contact_local) = if px <= py {
            let s = if l.x >= 0.0 { 1.0 } else { -1.0 };
            (px + ra, Vector2::new(-s, 0.0), Vector2::new(s * half.x, l.y))
        } else {
            let s = if l.y >= 0.0 { 1.0 } else { -1.0 };
            (py + ra, Vector2::new(0.0, -s), Vector2::new(l.x, s * half.y))
        };
        Some(Contact {
            depth,
            dir: back * dir_local,
            contact: cb + back * contact_local,
        })
    }
}

/// Separating-axis minimal translation for two oriented rectangles; `dir`
/// moves `b` away from `a`.
fn rect_rect(
    ca: Vector2<f64>,
    half_a: Vector2<f64>,
    yaw_a: f64,
    cb: Vector2<f64>,
    half_b: Vector2<f64>,
    yaw_b: f64,
) -> Option<Contact> {
    let ax = Rotation2::new(yaw_a) * Vector2::new(1.0, 0.0);
    let ay = Rotation2::new(yaw_a) * Vector2::new(0.0, 1.0);
    let bx = Rotation2::new(yaw_b) * Vector2::new(1.0, 0.0);
    let by = Rotation2::new(yaw_b) * Vector2::new(0.0, 1.0);
    let d = cb - ca;
    let mut best: Option<(f64, Vector2<f64>)> = None;
    for axis in [ax, ay, bx, by] {
        let ra = half_a.x * axis.dot(&ax).abs() + half_a.y * axis.dot(&ay).abs();
        let rb = half_b.x * axis.dot(&bx).abs() + half_b.y * axis.dot(&by).abs();
        let dist = d.dot(&axis);
        let overlap = ra + rb - dist.abs();
        if overlap <= 0.0 {
            return None;
        }
        let dir = if dist >= 0.0 { axis } else { -axis };
        if best.map_or(true, |(o, _)| overlap < o) {
            best = Some((overlap, dir));
        }
    }
    let (depth, dir) = best.unwrap();
    Some(Contact {
        depth,
        dir,
        contact: ca + d / 2.0,
    })
}

fn penetration(a: &Footprint, b: &Footprint) -> Option<Contact> {
    match (*a, *b) {
        (Footprint::Circle { center: ca, radius: ra }, Footprint::Circle { center: cb, radius: rb }) => {
            circle_circle(ca, ra, cb, rb)
        }
        (Footprint::Circle { center: ca, radius: ra }, Footprint::Rect { center, half, yaw }) => {
            circle_rect(ca, ra, center, half, yaw)
        }
        (Footprint::Rect { center, half, yaw }, Footprint::Circle { center: cb, radius: rb }) => {
            // The circle/rect case moves the rectangle; negate to move the
            // circle instead.
            circle_rect(cb, rb, center, half, yaw).map(|c| Contact {
                depth: c.depth,
                dir: -c.dir,
                contact: c.contact,
            })
        }
        (
            Footprint::Rect { center: ca, half: ha, yaw: ya },
            Footprint::Rect { center: cb, half: hb, yaw: yb },
        ) => rect_rect(ca, ha, ya, cb, hb, yb),
    }
}

/// Tabletop scene: rigid objects inside the square workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<RigidObject>,
    /// Half-extent of the square workspace, meters.
    pub workspace_half: f64,
}

impl SceneState {
    pub fn poses(&self) -> Vec<SE3Transform> {
        self.objects.iter().map(|o| o.pose).collect()
    }
}

/// Discrete push: start cell on the horizontal action grid plus one of eight
/// directions (`d * 45` degrees).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushAction {
    pub px: u32,
    pub py: u32,
    pub d: u8,
}

impl PushAction {
    pub fn direction(&self) -> Vector2<f64> {
        let angle = self.d as f64 * std::f64::consts::FRAC_PI_4;
        Vector2::new(angle.cos(), angle.sin())
    }

    /// World position of the action cell's center (the cell grid is the
    /// voxel grid's horizontal footprint).
    pub fn start_world(&self, grid: &GridSpec) -> Vector2<f64> {
        let c = grid.voxel_center(self.px as usize, self.py as usize, 0);
        Vector2::new(c.x, c.y)
    }
}

/// Pushing and placement parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Push stroke length, meters.
    pub stroke: f64,
    /// Pusher cylinder radius, meters.
    pub pusher_radius: f64,
    /// Sweep substeps per push.
    pub substeps: usize,
    /// Total yaw magnitude cap per object per push, radians.
    pub yaw_cap: f64,
    /// Half-extent of the square workspace, meters.
    pub workspace_half: f64,
    /// Minimum footprint clearance enforced when dropping objects, meters.
    pub placement_gap: f64,
    /// TSDF truncation distance in voxels.
    pub tau_voxels: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            stroke: 0.12,
            pusher_radius: 0.01,
            substeps: 120,
            yaw_cap: 0.3,
            workspace_half: 0.256,
            placement_gap: 0.012,
            tau_voxels: 5.0,
        }
    }
}

/// Shape family used when sampling scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Cubes with edge length in [0.02, 0.04] m (training-style scenes).
    Cubes,
    /// Boxes, cylinders, and spheres.
    Mixed,
}

fn sample_shape(rng: &mut ChaCha8Rng, family: ShapeFamily) -> Shape {
    match family {
        ShapeFamily::Cubes => {
            let s = rng.random_range(0.02..0.04);
            Shape::Box { extents: [s, s, s] }
        }
        ShapeFamily::Mixed => {
            let roll: f64 = rng.random_range(0.0..1.0);
            if roll < 0.6 {
                Shape::Box {
                    extents: [
                        rng.random_range(0.03..0.08),
                        rng.random_range(0.03..0.08),
                        rng.random_range(0.03..0.08),
                    ],
                }
            } else if roll < 0.85 {
                Shape::Cylinder {
                    radius: rng.random_range(0.015..0.035),
                    height: rng.random_range(0.03..0.08),
                }
            } else {
                Shape::Sphere {
                    radius: rng.random_range(0.015..0.03),
                }
            }
        }
    }
}

/// Drops `n_objects` sampled primitives onto the workspace and resolves
/// overlaps by iterative horizontal separation until every pair clears the
/// placement gap. Deterministic per seed.
pub fn drop_objects(
    seed: u64,
    n_objects: usize,
    family: ShapeFamily,
    cfg: &SimConfig,
) -> Result<SceneState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    drop_objects_with_rng(&mut rng, n_objects, family, cfg)
}

/// Same as [`drop_objects`] but drawing from an existing generator, so one
/// per-episode stream covers placement and policy randomness.
pub fn drop_objects_with_rng(
    rng: &mut ChaCha8Rng,
    n_objects: usize,
    family: ShapeFamily,
    cfg: &SimConfig,
) -> Result<SceneState> {
    assert!(n_objects >= 1, "need at least one object");
    let mut objects = Vec::with_capacity(n_objects);
    for id in 0..n_objects {
        let shape = sample_shape(rng, family);
        let fr = shape.footprint_radius();
        let margin = cfg.workspace_half - fr - 0.05;
        let x = rng.random_range(-margin..margin);
        let y = rng.random_range(-margin..margin);
        let yaw = match shape {
            Shape::Box { .. } => rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
            _ => 0.0,
        };
        objects.push(RigidObject {
            id: id as u64,
            shape,
            pose: SE3Transform::planar(yaw, [x, y, shape.resting_height()]),
        });
    }

    // Iterative separation on conservative bounding circles.
    const MAX_ITERS: usize = 1000;
    for _ in 0..MAX_ITERS {
        let mut any = false;
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                let ci = objects[i].center_xy();
                let cj = objects[j].center_xy();
                let need = objects[i].shape.footprint_radius()
                    + objects[j].shape.footprint_radius()
                    + cfg.placement_gap;
                let d = cj - ci;
                let dist = d.norm();
                if dist < need {
                    any = true;
                    let dir = if dist > 1e-9 {
                        d / dist
                    } else {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        Vector2::new(a.cos(), a.sin())
                    };
                    let shift = (need - dist) / 2.0 + 1e-4;
                    let pi = ci - dir * shift;
                    let pj = cj + dir * shift;
                    set_center_xy(&mut objects[i], pi, cfg);
                    set_center_xy(&mut objects[j], pj, cfg);
                }
            }
        }
        if !any {
            return Ok(SceneState {
                objects,
                workspace_half: cfg.workspace_half,
            });
        }
    }
    Err(Error::PlacementFailure {
        n: n_objects,
        attempts: MAX_ITERS,
    })
}

fn set_center_xy(obj: &mut RigidObject, c: Vector2<f64>, cfg: &SimConfig) {
    let fr = obj.shape.footprint_radius();
    let bound = (cfg.workspace_half - fr).max(0.0);
    obj.pose.translation[0] = c.x.clamp(-bound, bound);
    obj.pose.translation[1] = c.y.clamp(-bound, bound);
}

/// Result of executing one push.
#[derive(Debug, Clone)]
pub struct PushOutcome {
    pub scene: SceneState,
    /// World-frame rigid transform per object, mapping step-t geometry to
    /// step t+1; exactly identity for untouched objects.
    pub transforms: Vec<SE3Transform>,
    /// Whether the object was contacted, directly or through another object.
    pub touched: Vec<bool>,
}

/// Sweeps the pusher from the action cell along direction `d` and resolves
/// quasi-static contacts at every substep.
pub fn step_push(
    scene: &SceneState,
    action: &PushAction,
    grid: &GridSpec,
    cfg: &SimConfig,
) -> Result<PushOutcome> {
    if (action.px as usize) >= grid.dims[0] || (action.py as usize) >= grid.dims[1] {
        return Err(Error::ActionOutOfGrid {
            px: action.px,
            py: action.py,
            nx: grid.dims[0],
            ny: grid.dims[1],
        });
    }
    if action.d >= 8 {
        return Err(Error::Invalid {
            what: "push direction",
            why: format!("{} is not in 0..8", action.d),
        });
    }

    let start = action.start_world(grid);
    let dir = action.direction();
    let n = scene.objects.len();
    let initial: Vec<(Vector2<f64>, f64)> = scene
        .objects
        .iter()
        .map(|o| (o.center_xy(), o.yaw()))
        .collect();

    let mut objects = scene.objects.clone();
    let mut touched = vec![false; n];
    let mut accumulated_yaw = vec![0.0f64; n];

    for s in 1..=cfg.substeps {
        let t = cfg.stroke * s as f64 / cfg.substeps as f64;
        let pusher = Footprint::Circle {
            center: start + dir * t,
            radius: cfg.pusher_radius,
        };
        let mut queue: Vec<usize> = Vec::new();
        for (i, obj) in objects.iter_mut().enumerate() {
            if let Some(contact) = penetration(&pusher, &obj.footprint()) {
                apply_push_contact(obj, &contact, &mut accumulated_yaw[i], cfg);
                touched[i] = true;
                queue.push(i);
            }
        }
        // Pushed objects recursively separate from the rest (translation
        // only; the yaw heuristic applies to pusher contacts).
        let mut guard = 0;
        while let Some(i) = queue.pop() {
            guard += 1;
            if guard > 64 * n.max(1) {
                break;
            }
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (fi, fj) = (objects[i].footprint(), objects[j].footprint());
                if let Some(contact) = penetration(&fi, &fj) {
                    let c = objects[j].center_xy() + contact.dir * contact.depth;
                    set_center_xy(&mut objects[j], c, cfg);
                    touched[j] = true;
                    queue.push(j);
                }
            }
        }
    }

    // Net world-frame transform per object: yaw about the object center
    // expressed as a rotation about the world origin with an absorbing
    // translation.
    let mut transforms = Vec::with_capacity(n);
    for (i, obj) in objects.iter().enumerate() {
        let (c0, yaw0) = initial[i];
        let c1 = obj.center_xy();
        let dyaw = obj.yaw() - yaw0;
        if c1 == c0 && dyaw == 0.0 {
            transforms.push(SE3Transform::identity());
            continue;
        }
        let rc0 = Rotation2::new(dyaw) * c0;
        transforms.push(SE3Transform::planar(dyaw, [c1.x - rc0.x, c1.y - rc0.y, 0.0]));
    }

    Ok(PushOutcome {
        scene: SceneState {
            objects,
            workspace_half: scene.workspace_half,
        },
        transforms,
        touched,
    })
}

fn apply_push_contact(
    obj: &mut RigidObject,
    contact: &Contact,
    accumulated_yaw: &mut f64,
    cfg: &SimConfig,
) {
    let center = obj.center_xy();
    let c = center + contact.dir * contact.depth;
    set_center_xy(obj, c, cfg);

    // Lever-arm yaw: offset of the contact point from the center, crossed
    // with the push direction, scaled by penetration over footprint radius.
    if let Shape::Box { .. } = obj.shape {
        let arm = contact.contact - center;
        let lever = arm.x * contact.dir.y - arm.y * contact.dir.x;
        let dyaw = lever * contact.depth / obj.shape.footprint_radius();
        let applied = dyaw.clamp(-cfg.yaw_cap - *accumulated_yaw, cfg.yaw_cap - *accumulated_yaw);
        *accumulated_yaw += applied;
        obj.pose.euler[2] += applied;
    }
}

/// One-hot amodal instance masks: each voxel whose center lies inside object
/// `i` takes channel `i` (episode-stable object order); everything else is
/// background.
pub fn gt_masks(scene: &SceneState, grid: &GridSpec, k: usize) -> Result<InstanceMaskVolume> {
    if scene.objects.len() > k - 1 {
        return Err(Error::TooManyObjects {
            found: scene.objects.len(),
            max: k - 1,
        });
    }
    let mut masks = InstanceMaskVolume::background(*grid, k);
    for (channel, obj) in scene.objects.iter().enumerate() {
        // Conservative voxel AABB around the object.
        let c = obj.center();
        let fr = obj.shape.footprint_radius();
        let lo = grid.world_to_voxel(Vector3::new(c.x - fr, c.y - fr, 0.0));
        let hi = grid.world_to_voxel(Vector3::new(c.x + fr, c.y + fr, obj.shape.top_height()));
        let x0 = lo.x.floor().max(0.0) as usize;
        let y0 = lo.y.floor().max(0.0) as usize;
        let z0 = lo.z.floor().max(0.0) as usize;
        let x1 = (hi.x.ceil() as i64 + 1).clamp(0, grid.dims[0] as i64) as usize;
        let y1 = (hi.y.ceil() as i64 + 1).clamp(0, grid.dims[1] as i64) as usize;
        let z1 = (hi.z.ceil() as i64 + 1).clamp(0, grid.dims[2] as i64) as usize;
        for ix in x0..x1 {
            for iy in y0..y1 {
                for iz in z0..z1 {
                    let v = grid.flat_index(ix, iy, iz);
                    // Earlier (lower) channels win where solids touch.
                    if masks.voxel_probs(v)[k - 1] == 1.0
                        && obj.contains(grid.voxel_center(ix, iy, iz))
                    {
                        masks.set_one_hot(v, channel);
                    }
                }
            }
        }
    }
    Ok(masks)
}
