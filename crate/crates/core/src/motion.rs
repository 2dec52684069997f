//! SE(3) transforms, the mask-blended scene-flow layer, its analytic
//! Jacobians, and the motion loss.
//!
//! Rotations are parameterized by an Euler vector in intrinsic X-Y-Z order
//! (`R = Rx * Ry * Rz`) and act about the world origin, which sits at the
//! workspace center at table height. A point moves as `x' = R x + t`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::InstanceMaskVolume;
use crate::voxel::{require_same_grid, VectorVolume};

/// Rigid-body transform: Euler rotation vector plus translation, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE3Transform {
    /// Rotation angles in radians, intrinsic X-Y-Z convention.
    pub euler: [f64; 3],
    /// Translation in meters.
    pub translation: [f64; 3],
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl SE3Transform {
    pub fn identity() -> Self {
        SE3Transform {
            euler: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn from_parts(euler: [f64; 3], translation: [f64; 3]) -> Self {
        SE3Transform { euler, translation }
    }

    /// Pure translation.
    pub fn translation_only(t: [f64; 3]) -> Self {
        SE3Transform {
            euler: [0.0; 3],
            translation: t,
        }
    }

    /// Planar motion: yaw about the world z axis plus translation.
    pub fn planar(yaw: f64, t: [f64; 3]) -> Self {
        SE3Transform {
            euler: [0.0, 0.0, yaw],
            translation: t,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.euler == [0.0; 3] && self.translation == [0.0; 3]
    }

    pub fn is_finite(&self) -> bool {
        self.euler.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Rotation matrix `Rx(euler[0]) * Ry(euler[1]) * Rz(euler[2])`.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rot_x(self.euler[0]) * rot_y(self.euler[1]) * rot_z(self.euler[2])
    }

    /// Derivative of the rotation matrix with respect to `euler[axis]`.
    pub fn rotation_derivative(&self, axis: usize) -> Matrix3<f64> {
        match axis {
            0 => d_rot_x(self.euler[0]) * rot_y(self.euler[1]) * rot_z(self.euler[2]),
            1 => rot_x(self.euler[0]) * d_rot_y(self.euler[1]) * rot_z(self.euler[2]),
            2 => rot_x(self.euler[0]) * rot_y(self.euler[1]) * d_rot_z(self.euler[2]),
            _ => panic!("euler axis out of range: {axis}"),
        }
    }

    #[inline]
    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.translation[0], self.translation[1], self.translation[2])
    }

    /// Applies the transform to a world point: `R x + t`.
    pub fn apply(&self, x: Vector3<f64>) -> Vector3<f64> {
        if self.is_identity() {
            return x;
        }
        self.rotation_matrix() * x + self.translation_vector()
    }
}

/// Applies `T` to a world point; rotation acts about the world origin.
pub fn apply_se3(t: &SE3Transform, x: Vector3<f64>) -> Vector3<f64> {
    t.apply(x)
}

/// One transform per mask channel. The last channel is the static background
/// and is pinned to the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    transforms: Vec<SE3Transform>,
}

impl TransformSet {
    /// Wraps a full per-channel list; the last entry must be the identity.
    pub fn new(transforms: Vec<SE3Transform>) -> Result<Self> {
        match transforms.last() {
            Some(last) if last.is_identity() => Ok(TransformSet { transforms }),
            Some(_) => Err(Error::NonIdentityBackground),
            None => Err(Error::Invalid {
                what: "transform set",
                why: "must contain at least the background channel".to_string(),
            }),
        }
    }

    /// Object-channel transforms with the background identity appended.
    pub fn from_object_transforms(mut objects: Vec<SE3Transform>) -> Self {
        objects.push(SE3Transform::identity());
        TransformSet {
            transforms: objects,
        }
    }

    /// All-identity set with `k` channels.
    pub fn identity(k: usize) -> Self {
        TransformSet {
            transforms: vec![SE3Transform::identity(); k],
        }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn get(&self, i: usize) -> &SE3Transform {
        &self.transforms[i]
    }

    pub fn as_slice(&self) -> &[SE3Transform] {
        &self.transforms
    }

    /// Transforms for the object channels (everything but the background).
    pub fn object_transforms(&self) -> &[SE3Transform] {
        &self.transforms[..self.transforms.len() - 1]
    }
}

/// Blends per-channel rigid motion through the instance masks into a voxel
/// scene flow: at voxel j with world center `x_j`,
/// `F(j) = sum_i M_ij (R_i x_j + t_i) - x_j`.
pub fn blended_flow(masks: &InstanceMaskVolume, transforms: &TransformSet) -> Result<VectorVolume> {
    let k = masks.channels();
    if transforms.len() != k {
        return Err(Error::ChannelMismatch {
            expected: k,
            got: transforms.len(),
        });
    }
    let spec = masks.spec;
    let rotations: Vec<Matrix3<f64>> = transforms
        .as_slice()
        .iter()
        .map(|t| t.rotation_matrix())
        .collect();
    let translations: Vec<Vector3<f64>> = transforms
        .as_slice()
        .iter()
        .map(|t| t.translation_vector())
        .collect();

    let mut flow = VectorVolume::zeros(spec);
    let [nx, ny, nz] = spec.dims;
    let mut v = 0usize;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let probs = masks.voxel_probs(v);
                // Voxels that are pure background keep zero flow: the
                // background transform is the identity.
                if probs[k - 1] == 1.0 && probs[..k - 1].iter().all(|&m| m == 0.0) {
                    v += 1;
                    continue;
                }
                let x = spec.voxel_center(ix, iy, iz);
                let mut y = Vector3::zeros();
                for (i, &m) in probs.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    y += m * (rotations[i] * x + translations[i]);
                }
                let f = y - x;
                flow.values[v] = [f.x, f.y, f.z];
                v += 1;
            }
        }
    }
    Ok(flow)
}

/// Partial derivatives of one voxel's blended flow with respect to one
/// transform's six parameters. Column `j` of each matrix is the derivative of
/// the flow vector with respect to parameter `j`.
#[derive(Debug, Clone, Copy)]
pub struct FlowJacobian {
    pub d_euler: Matrix3<f64>,
    pub d_translation: Matrix3<f64>,
}

/// Analytic derivative of the blended flow at a single voxel with per-channel
/// mask weights `mask` and world position `x`:
/// `dF/dt_i = M_i * I` and `dF/d(euler_i[j]) = M_i * dR_i/d(euler_i[j]) * x`.
pub fn flow_jacobian(
    mask: &[f64],
    transforms: &TransformSet,
    x: Vector3<f64>,
) -> Result<Vec<FlowJacobian>> {
    if transforms.len() != mask.len() {
        return Err(Error::ChannelMismatch {
            expected: mask.len(),
            got: transforms.len(),
        });
    }
    let mut out = Vec::with_capacity(mask.len());
    for (i, &m) in mask.iter().enumerate() {
        let t = transforms.get(i);
        let mut d_euler = Matrix3::zeros();
        for axis in 0..3 {
            let col = m * (t.rotation_derivative(axis) * x);
            d_euler.set_column(axis, &col);
        }
        let d_translation = Matrix3::identity() * m;
        out.push(FlowJacobian {
            d_euler,
            d_translation,
        });
    }
    Ok(out)
}

/// Mean squared flow error, averaged over voxels and components (m^2).
pub fn motion_loss(pred: &VectorVolume, gt: &VectorVolume) -> Result<f64> {
    require_same_grid(&pred.spec, &gt.spec)?;
    let mut acc = 0.0;
    for (p, g) in pred.values.iter().zip(&gt.values) {
        for c in 0..3 {
            let d = p[c] - g[c];
            acc += d * d;
        }
    }
    Ok(acc / (3.0 * pred.values.len() as f64))
}
