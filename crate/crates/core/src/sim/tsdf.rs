//! TSDF fusion: projecting the voxel grid into a depth image.

use super::camera::{CameraModel, DepthImage};
use crate::voxel::{GridSpec, TsdfVolume};

/// Fuses one depth image into a truncated signed distance volume.
///
/// Each voxel center projects into the image; the signed distance is the
/// observed depth minus the voxel's camera z-depth, scaled by the truncation
/// distance `tau = tau_voxels * voxel_size` and clamped to [-1, 1]. Voxels
/// more than `tau` behind the observed surface read -1 (occluded). Voxels
/// that do not project into the image, or whose pixel has no depth, are
/// flagged unknown.
pub fn fuse_tsdf(
    depth: &DepthImage,
    cam: &CameraModel,
    spec: &GridSpec,
    tau_voxels: f64,
) -> TsdfVolume {
    let tau = tau_voxels * spec.voxel_size;
    let mut out = TsdfVolume::filled(*spec, 1.0, false);
    let [nx, ny, nz] = spec.dims;
    let mut v = 0usize;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let p = spec.voxel_center(ix, iy, iz);
                if let Some((u, vv, z_c)) = cam.project(p) {
                    let d = depth.at(u, vv);
                    if d > 0.0 {
                        let sd = d - z_c;
                        out.values[v] = (sd / tau).clamp(-1.0, 1.0);
                        out.known[v] = true;
                    }
                }
                v += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::SE3Transform;
    use crate::sim::camera::{render_depth, CameraConfig};
    use crate::sim::{RigidObject, SceneState, Shape};
    use nalgebra::Vector3;

    fn benchmark_setup() -> (GridSpec, CameraModel) {
        (
            GridSpec::benchmark(),
            CameraModel::new(&CameraConfig::default()),
        )
    }

    #[test]
    fn surface_free_and_occluded_values() {
        let (grid, cam) = benchmark_setup();
        let scene = SceneState {
            objects: vec![RigidObject {
                id: 0,
                shape: Shape::Box {
                    extents: [0.08, 0.08, 0.08],
                },
                pose: SE3Transform::planar(0.0, [0.0, 0.0, 0.04]),
            }],
            workspace_half: 0.256,
        };
        let depth = render_depth(&scene, &cam);
        let tsdf = fuse_tsdf(&depth, &cam, &grid, 5.0);

        // A voxel on the box's top surface reads approximately zero.
        let top = grid.world_to_voxel(Vector3::new(0.0, 0.0, 0.08));
        let vi = grid.flat_index(
            top.x.round() as usize,
            top.y.round() as usize,
            top.z.round() as usize,
        );
        assert!(tsdf.known[vi]);
        assert!(tsdf.values[vi].abs() < 0.55, "surface band, got {}", tsdf.values[vi]);

        // Free space one truncation distance above the box tops +1.
        let free = grid.world_to_voxel(Vector3::new(0.0, 0.0, 0.13));
        let vf = grid.flat_index(
            free.x.round() as usize,
            free.y.round() as usize,
            free.z.round() as usize,
        );
        assert!(tsdf.known[vf]);
        assert!((tsdf.values[vf] - 1.0).abs() < 1e-12);

        // Deep inside the box: occluded, clamped to -1.
        let inside = grid.world_to_voxel(Vector3::new(0.0, 0.01, 0.01));
        let vo = grid.flat_index(
            inside.x.round() as usize,
            inside.y.round() as usize,
            inside.z.round() as usize,
        );
        assert!((tsdf.values[vo] + 1.0).abs() < 1e-12);
    }

    /// The TSDF must change sign within one voxel of the analytic surface
    /// along camera rays hitting the box.
    #[test]
    fn zero_crossing_within_one_voxel_of_surface() {
        let (grid, cam) = benchmark_setup();
        let half = 0.04;
        let scene = SceneState {
            objects: vec![RigidObject {
                id: 0,
                shape: Shape::Box {
                    extents: [2.0 * half, 2.0 * half, 2.0 * half],
                },
                pose: SE3Transform::planar(0.0, [0.0, 0.0, half]),
            }],
            workspace_half: 0.256,
        };
        let depth = render_depth(&scene, &cam);
        let tsdf = fuse_tsdf(&depth, &cam, &grid, 5.0);

        // Walk down columns over the box interior: the sign change must
        // bracket the analytic top surface z = 0.08 within a voxel.
        let mut checked = 0;
        for (wx, wy) in [(0.0, 0.0), (0.02, -0.02), (-0.025, 0.015)] {
            let c = grid.world_to_voxel(Vector3::new(wx, wy, 0.0));
            let (ix, iy) = (c.x.round() as usize, c.y.round() as usize);
            let mut crossing = None;
            for iz in (1..grid.dims[2]).rev() {
                let hi = grid.flat_index(ix, iy, iz);
                let lo = grid.flat_index(ix, iy, iz - 1);
                if tsdf.known[hi]
                    && tsdf.known[lo]
                    && tsdf.values[hi] > 0.0
                    && tsdf.values[lo] <= 0.0
                {
                    crossing = Some(grid.voxel_center(ix, iy, iz).z);
                    break;
                }
            }
            let z = crossing.expect("found a sign change over the box");
            assert!(
                (z - 2.0 * half).abs() <= grid.voxel_size + 1e-9,
                "crossing at z={z}, surface at {}",
                2.0 * half
            );
            checked += 1;
        }
        assert_eq!(checked, 3);
    }
}
