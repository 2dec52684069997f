//! Benchmark episode generation and the on-disk episode format.
//!
//! One episode is a dropped scene followed by `n_steps` policy pushes. Each
//! step records the pre-push observation (depth + TSDF), the action, and the
//! exact ground truth: per-object world transforms, one-hot instance masks,
//! and the scene flow computed by blending those transforms through the
//! masks. Everything is driven by a single counter-based generator, so an
//! episode is a pure function of its seed.

use std::path::Path;

use nalgebra::Rotation2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{render_depth, CameraConfig, CameraModel, DepthImage};
use super::policy::{interaction_policy, PolicyState};
use super::tsdf::fuse_tsdf;
use super::{
    drop_objects_with_rng, gt_masks, step_push, PushAction, RigidObject, SceneState, ShapeFamily,
    SimConfig,
};
use crate::error::{Error, Result};
use crate::io;
use crate::matching::InstanceMaskVolume;
use crate::motion::{blended_flow, SE3Transform, TransformSet};
use crate::voxel::{GridSpec, TsdfVolume, VectorVolume};
use crate::SCHEMA_VERSION;

/// Everything needed to generate one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_objects: usize,
    pub n_steps: usize,
    pub k: usize,
    pub family: ShapeFamily,
    pub grid: GridSpec,
    pub camera: CameraConfig,
    pub sim: SimConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_objects: 4,
            n_steps: 10,
            k: crate::DEFAULT_CHANNELS,
            family: ShapeFamily::Mixed,
            grid: GridSpec::benchmark(),
            camera: CameraConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

/// One interaction step: observation before the push, the push, and ground
/// truth for the motion it causes.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub depth: DepthImage,
    pub tsdf: TsdfVolume,
    pub action: PushAction,
    /// Object poses at this step (before the push).
    pub poses: Vec<SE3Transform>,
    /// World-frame transform per object caused by the push.
    pub gt_transforms: Vec<SE3Transform>,
    /// One-hot masks stored as per-voxel channel indices (k-1 = background).
    pub gt_mask_indices: Vec<u8>,
    /// Ground-truth scene flow, f32 per component as stored on disk.
    pub gt_flow: Vec<[f32; 3]>,
}

impl StepRecord {
    pub fn gt_mask_volume(&self, grid: &GridSpec, k: usize) -> Result<InstanceMaskVolume> {
        InstanceMaskVolume::from_channel_indices(*grid, k, &self.gt_mask_indices)
    }

    pub fn gt_flow_volume(&self, grid: &GridSpec) -> Result<VectorVolume> {
        let values = self
            .gt_flow
            .iter()
            .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
            .collect();
        VectorVolume::from_values(*grid, values)
    }
}

/// A generated benchmark episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub seed: u64,
    pub grid: GridSpec,
    pub camera: CameraConfig,
    pub k: usize,
    /// Objects with their initial poses (channel order = vector order).
    pub objects: Vec<RigidObject>,
    pub workspace_half: f64,
    pub steps: Vec<StepRecord>,
}

impl Episode {
    /// Reconstructs the true scene at the given step.
    pub fn scene_at(&self, step: usize) -> SceneState {
        let mut objects = self.objects.clone();
        for (obj, pose) in objects.iter_mut().zip(&self.steps[step].poses) {
            obj.pose = *pose;
        }
        SceneState {
            objects,
            workspace_half: self.workspace_half,
        }
    }
}

/// Pads per-object transforms to a full channel set: unused object channels
/// and the background are identities.
pub fn transform_set_for(object_transforms: &[SE3Transform], k: usize) -> TransformSet {
    let mut objs = object_transforms.to_vec();
    objs.resize(k - 1, SE3Transform::identity());
    TransformSet::from_object_transforms(objs)
}

/// Generates one episode: drop, then loop render -> fuse -> policy -> push,
/// recording exact ground truth at every step. Fully deterministic per seed.
pub fn generate_episode(seed: u64, cfg: &EpisodeConfig) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = drop_objects_with_rng(&mut rng, cfg.n_objects, cfg.family, &cfg.sim)?;
    let cam = CameraModel::new(&cfg.camera);
    let mut pstate = PolicyState::new(&scene);
    let objects = scene.objects.clone();

    let mut steps = Vec::with_capacity(cfg.n_steps);
    for _ in 0..cfg.n_steps {
        let depth = render_depth(&scene, &cam);
        let tsdf = fuse_tsdf(&depth, &cam, &cfg.grid, cfg.sim.tau_voxels);
        let masks = gt_masks(&scene, &cfg.grid, cfg.k)?;
        let poses = scene.poses();

        pstate.observe(&scene);
        let action = interaction_policy(&scene, &mut pstate, &mut rng, &cfg.grid, &cfg.sim);
        let outcome = step_push(&scene, &action, &cfg.grid, &cfg.sim)?;

        let tset = transform_set_for(&outcome.transforms, cfg.k);
        let flow = blended_flow(&masks, &tset)?;
        steps.push(StepRecord {
            depth,
            tsdf,
            action,
            poses,
            gt_transforms: outcome.transforms,
            gt_mask_indices: masks.harden(),
            gt_flow: flow
                .values
                .iter()
                .map(|v| [v[0] as f32, v[1] as f32, v[2] as f32])
                .collect(),
        });
        scene = outcome.scene;
    }

    Ok(Episode {
        seed,
        grid: cfg.grid,
        camera: cfg.camera,
        k: cfg.k,
        objects,
        workspace_half: cfg.sim.workspace_half,
        steps,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    schema_version: u32,
    seed: u64,
    grid: GridSpec,
    camera: CameraConfig,
    k: usize,
    n_steps: usize,
    workspace_half: f64,
    objects: Vec<RigidObject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActionFile {
    schema_version: u32,
    px: u32,
    py: u32,
    d: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    schema_version: u32,
    transforms: Vec<SE3Transform>,
}

/// The action map companion dump: a one-hot 8 x nx x ny volume with a 1 at
/// (d, px, py).
fn action_map(action: &PushAction, grid: &GridSpec) -> crate::voxel::ScalarVolume {
    let (nx, ny) = (grid.dims[0], grid.dims[1]);
    let spec = GridSpec::new([8, nx, ny], grid.voxel_size, [0.0; 3]).expect("valid map dims");
    let mut vol = crate::voxel::ScalarVolume::filled(spec, 0.0);
    let idx = spec.flat_index(action.d as usize, action.px as usize, action.py as usize);
    vol.values[idx] = 1.0;
    vol
}

/// Writes an episode directory: `meta.json` plus per-step `depth_XX.bin`,
/// `tsdf_XX.vol`, `action_XX.json`, `gt_masks_XX.vol`, `gt_transforms_XX.json`,
/// `gt_flow_XX.vol`, and `action_map_XX.vol`.
pub fn save_episode(ep: &Episode, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(
        &dir.join("meta.json"),
        &MetaFile {
            schema_version: SCHEMA_VERSION,
            seed: ep.seed,
            grid: ep.grid,
            camera: ep.camera,
            k: ep.k,
            n_steps: ep.steps.len(),
            workspace_half: ep.workspace_half,
            objects: ep.objects.clone(),
        },
    )?;
    for (t, step) in ep.steps.iter().enumerate() {
        io::write_depth(&dir.join(format!("depth_{t:02}.bin")), &step.depth)?;
        io::write_tsdf(&dir.join(format!("tsdf_{t:02}.vol")), &step.tsdf)?;
        io::write_json(
            &dir.join(format!("action_{t:02}.json")),
            &ActionFile {
                schema_version: SCHEMA_VERSION,
                px: step.action.px,
                py: step.action.py,
                d: step.action.d,
            },
        )?;
        io::write_mask_indices(
            &dir.join(format!("gt_masks_{t:02}.vol")),
            &ep.grid,
            ep.k,
            &step.gt_mask_indices,
        )?;
        io::write_json(
            &dir.join(format!("gt_transforms_{t:02}.json")),
            &TransformsFile {
                schema_version: SCHEMA_VERSION,
                transforms: step.gt_transforms.clone(),
            },
        )?;
        io::write_vector_volume_f32(
            &dir.join(format!("gt_flow_{t:02}.vol")),
            &ep.grid,
            &step.gt_flow,
        )?;
        io::write_scalar_volume(
            &dir.join(format!("action_map_{t:02}.vol")),
            &action_map(&step.action, &ep.grid),
        )?;
    }
    Ok(())
}

/// Applies a planar world-frame delta to a planar pose (the only kind this
/// simulator produces).
fn compose_planar(pose: &SE3Transform, delta: &SE3Transform) -> SE3Transform {
    let rot = Rotation2::new(delta.euler[2]);
    let c = rot * nalgebra::Vector2::new(pose.translation[0], pose.translation[1]);
    SE3Transform::planar(
        pose.euler[2] + delta.euler[2],
        [
            c.x + delta.translation[0],
            c.y + delta.translation[1],
            pose.translation[2] + delta.translation[2],
        ],
    )
}

/// Reads an episode directory written by [`save_episode`]. Per-step poses
/// are reconstructed by composing the recorded deltas onto the initial poses.
pub fn load_episode(dir: &Path) -> Result<Episode> {
    let meta: MetaFile = io::read_json(&dir.join("meta.json"))?;
    io::check_schema_version(meta.schema_version)?;

    let mut poses: Vec<SE3Transform> = meta.objects.iter().map(|o| o.pose).collect();
    let mut steps = Vec::with_capacity(meta.n_steps);
    for t in 0..meta.n_steps {
        let depth = io::read_depth(&dir.join(format!("depth_{t:02}.bin")))?;
        let tsdf = io::read_tsdf(&dir.join(format!("tsdf_{t:02}.vol")))?;
        let action: ActionFile = io::read_json(&dir.join(format!("action_{t:02}.json")))?;
        io::check_schema_version(action.schema_version)?;
        let (mask_spec, mask_k, gt_mask_indices) =
            io::read_mask_indices(&dir.join(format!("gt_masks_{t:02}.vol")))?;
        if mask_spec != meta.grid || mask_k != meta.k {
            return Err(Error::Format {
                what: "episode",
                why: format!("step {t}: mask grid or channel count disagrees with meta"),
            });
        }
        let transforms: TransformsFile =
            io::read_json(&dir.join(format!("gt_transforms_{t:02}.json")))?;
        io::check_schema_version(transforms.schema_version)?;
        let (flow_spec, gt_flow) =
            io::read_vector_volume_f32(&dir.join(format!("gt_flow_{t:02}.vol")))?;
        if flow_spec != meta.grid {
            return Err(Error::Format {
                what: "episode",
                why: format!("step {t}: flow grid disagrees with meta"),
            });
        }

        let step_poses = poses.clone();
        for (pose, delta) in poses.iter_mut().zip(&transforms.transforms) {
            *pose = compose_planar(pose, delta);
        }
        steps.push(StepRecord {
            depth,
            tsdf,
            action: PushAction {
                px: action.px,
                py: action.py,
                d: action.d,
            },
            poses: step_poses,
            gt_transforms: transforms.transforms,
            gt_mask_indices,
            gt_flow,
        });
    }

    Ok(Episode {
        seed: meta.seed,
        grid: meta.grid,
        camera: meta.camera,
        k: meta.k,
        objects: meta.objects,
        workspace_half: meta.workspace_half,
        steps,
    })
}
