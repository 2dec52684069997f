//! Voxel grid geometry and trilinear interpolation kernels.
//!
//! Conventions fixed here and relied on everywhere else:
//! - Dense volumes are stored row-major with z fastest: flat index
//!   `(ix * ny + iy) * nz + iz`.
//! - Integer voxel coordinates lie at voxel centers. The grid `origin` is the
//!   world position of the *corner* of voxel (0,0,0), so the center of that
//!   voxel sits at `origin + 0.5 * voxel_size`.
//! - Out-of-grid neighbors are dropped from interpolation stencils; gathers
//!   renormalize over the in-grid weight so boundary samples are not darkened.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a dense voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Voxel counts along x, y, z.
    pub dims: [usize; 3],
    /// Edge length of a cubic voxel, meters.
    pub voxel_size: f64,
    /// World position of the corner of voxel (0,0,0), meters.
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid {
                what: "grid dims",
                why: format!("{dims:?} has a zero axis"),
            });
        }
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::Invalid {
                what: "voxel size",
                why: format!("{voxel_size} must be finite and positive"),
            });
        }
        Ok(GridSpec {
            dims,
            voxel_size,
            origin,
        })
    }

    /// Benchmark grid: 128x128x48 voxels of 0.004 m spanning the
    /// 0.512 m x 0.512 m workspace centered on the world origin, table at z=0.
    pub fn benchmark() -> Self {
        GridSpec {
            dims: [128, 128, 48],
            voxel_size: 0.004,
            origin: [-0.256, -0.256, 0.0],
        }
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.dims[0] && iy < self.dims[1] && iz < self.dims[2]);
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    #[inline]
    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let nz = self.dims[2];
        let ny = self.dims[1];
        let iz = idx % nz;
        let iy = (idx / nz) % ny;
        let ix = idx / (nz * ny);
        [ix, iy, iz]
    }

    /// World point to continuous voxel coordinates. Integer outputs land on
    /// voxel centers; the grid corner maps to (-0.5, -0.5, -0.5).
    #[inline]
    pub fn world_to_voxel(&self, p: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.origin[0]) / self.voxel_size - 0.5,
            (p.y - self.origin[1]) / self.voxel_size - 0.5,
            (p.z - self.origin[2]) / self.voxel_size - 0.5,
        )
    }

    /// Continuous voxel coordinates to world point; inverse of
    /// [`GridSpec::world_to_voxel`].
    #[inline]
    pub fn voxel_to_world(&self, c: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (c.x + 0.5) * self.voxel_size,
            self.origin[1] + (c.y + 0.5) * self.voxel_size,
            self.origin[2] + (c.z + 0.5) * self.voxel_size,
        )
    }

    /// World center of the voxel at integer indices.
    #[inline]
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.voxel_to_world(Vector3::new(ix as f64, iy as f64, iz as f64))
    }
}

/// Up to eight (voxel, weight) pairs around a continuous coordinate.
///
/// Weights follow the separable tent kernel `max(0, 1-|dx|) * max(0, 1-|dy|)
/// * max(0, 1-|dz|)`; zero-weight and out-of-grid corners are dropped. For a
/// coordinate whose surrounding corners are all in-grid the weights sum to 1.
pub fn trilinear_weights(dims: [usize; 3], c: Vector3<f64>) -> Vec<([usize; 3], f64)> {
    let mut out = Vec::with_capacity(8);
    let mut corners = [([0usize; 3], 0f64); 8];
    let n = trilinear_corners(dims, c, &mut corners);
    out.extend_from_slice(&corners[..n]);
    out
}

/// Allocation-free stencil used by the hot gather/scatter paths.
/// Returns the number of valid entries written into `out`.
#[inline]
pub(crate) fn trilinear_corners(
    dims: [usize; 3],
    c: Vector3<f64>,
    out: &mut [([usize; 3], f64); 8],
) -> usize {
    let base = [c.x.floor(), c.y.floor(), c.z.floor()];
    let mut n = 0;
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let corner = [base[0] + dx as f64, base[1] + dy as f64, base[2] + dz as f64];
                let w = (1.0 - (c.x - corner[0]).abs()).max(0.0)
                    * (1.0 - (c.y - corner[1]).abs()).max(0.0)
                    * (1.0 - (c.z - corner[2]).abs()).max(0.0);
                if w <= 0.0 {
                    continue;
                }
                if corner[0] < 0.0 || corner[1] < 0.0 || corner[2] < 0.0 {
                    continue;
                }
                let idx = [corner[0] as usize, corner[1] as usize, corner[2] as usize];
                if idx[0] >= dims[0] || idx[1] >= dims[1] || idx[2] >= dims[2] {
                    continue;
                }
                out[n] = (idx, w);
                n += 1;
            }
        }
    }
    n
}

/// Dense per-voxel scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarVolume {
    pub fn filled(spec: GridSpec, value: f64) -> Self {
        ScalarVolume {
            spec,
            values: vec![value; spec.voxel_count()],
        }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.voxel_count() {
            return Err(Error::Invalid {
                what: "scalar volume",
                why: format!(
                    "expected {} values, got {}",
                    spec.voxel_count(),
                    values.len()
                ),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid {
                what: "scalar volume",
                why: "non-finite value".to_string(),
            });
        }
        Ok(ScalarVolume { spec, values })
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.spec.flat_index(ix, iy, iz)]
    }

    /// Trilinear sample at continuous voxel coordinates. Out-of-grid corners
    /// contribute nothing and the result is renormalized over the in-grid
    /// weight; a coordinate with no in-grid corner samples to 0.
    pub fn gather_trilinear(&self, c: Vector3<f64>) -> f64 {
        let mut corners = [([0usize; 3], 0f64); 8];
        let n = trilinear_corners(self.spec.dims, c, &mut corners);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for &(idx, w) in &corners[..n] {
            acc += w * self.values[self.spec.flat_index(idx[0], idx[1], idx[2])];
            wsum += w;
        }
        if wsum > 0.0 {
            acc / wsum
        } else {
            0.0
        }
    }
}

/// Dense per-voxel 3-vector field (meters); houses scene flow.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorVolume {
    pub spec: GridSpec,
    pub values: Vec<[f64; 3]>,
}

impl VectorVolume {
    pub fn zeros(spec: GridSpec) -> Self {
        VectorVolume {
            spec,
            values: vec![[0.0; 3]; spec.voxel_count()],
        }
    }

    pub fn from_values(spec: GridSpec, values: Vec<[f64; 3]>) -> Result<Self> {
        if values.len() != spec.voxel_count() {
            return Err(Error::Invalid {
                what: "vector volume",
                why: format!(
                    "expected {} values, got {}",
                    spec.voxel_count(),
                    values.len()
                ),
            });
        }
        Ok(VectorVolume { spec, values })
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let v = self.values[self.spec.flat_index(ix, iy, iz)];
        Vector3::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Truncated signed distance observation plus per-voxel visibility.
///
/// `values` are clamped to [-1, 1] after division by the truncation distance;
/// `known[i]` is false for voxels that did not project into the depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub known: Vec<bool>,
}

impl TsdfVolume {
    pub fn filled(spec: GridSpec, value: f64, known: bool) -> Self {
        let n = spec.voxel_count();
        TsdfVolume {
            spec,
            values: vec![value; n],
            known: vec![known; n],
        }
    }
}

/// Checks that two grids are identical; most pairwise volume operations
/// require it.
pub fn require_same_grid(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> GridSpec {
        GridSpec::new([8, 8, 8], 0.004, [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn world_to_voxel_center_convention() {
        let spec = small_spec();
        let c = spec.world_to_voxel(Vector3::new(0.002, 0.002, 0.002));
        assert!((c - Vector3::new(0.0, 0.0, 0.0)).norm() < 1e-12);

        // The grid corner maps to -0.5 along every axis.
        let corner = spec.world_to_voxel(Vector3::new(0.0, 0.0, 0.0));
        assert!((corner - Vector3::new(-0.5, -0.5, -0.5)).norm() < 1e-12);

        let step = spec.world_to_voxel(Vector3::new(0.006, 0.002, 0.002));
        assert!((step - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn voxel_world_round_trip() {
        let spec = GridSpec::benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let c = Vector3::new(
                rng.random_range(-1.0..128.0),
                rng.random_range(-1.0..128.0),
                rng.random_range(-1.0..48.0),
            );
            let back = spec.world_to_voxel(spec.voxel_to_world(c));
            assert!((back - c).norm() < 1e-12);
        }
    }

    #[test]
    fn trilinear_lattice_point_is_single_pair() {
        let w = trilinear_weights([8, 8, 8], Vector3::new(3.0, 4.0, 5.0));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].0, [3, 4, 5]);
        assert_eq!(w[0].1, 1.0);
    }

    #[test]
    fn trilinear_axis_midpoint_splits_half_half() {
        let w = trilinear_weights([8, 8, 8], Vector3::new(3.5, 4.0, 5.0));
        assert_eq!(w.len(), 2);
        let mut w = w;
        w.sort_by_key(|(idx, _)| *idx);
        assert_eq!(w[0], ([3, 4, 5], 0.5));
        assert_eq!(w[1], ([4, 4, 5], 0.5));
    }

    #[test]
    fn trilinear_matches_hand_expanded_product_kernel() {
        // c = (3.25, 4.75, 5.5): weights are products of (0.75,0.25),
        // (0.25,0.75), (0.5,0.5) along x, y, z.
        let c = Vector3::new(3.25, 4.75, 5.5);
        let w = trilinear_weights([16, 16, 16], c);
        assert_eq!(w.len(), 8);
        let wx = [0.75, 0.25];
        let wy = [0.25, 0.75];
        let wz = [0.5, 0.5];
        let mut total = 0.0;
        for (idx, weight) in &w {
            let expect = wx[idx[0] - 3] * wy[idx[1] - 4] * wz[idx[2] - 5];
            assert!((weight - expect).abs() < 1e-15, "corner {idx:?}");
            total += weight;
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trilinear_weights_sum_to_one_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let c = Vector3::new(
                rng.random_range(0.0..6.9),
                rng.random_range(0.0..6.9),
                rng.random_range(0.0..6.9),
            );
            let w = trilinear_weights([8, 8, 8], c);
            let sum: f64 = w.iter().map(|(_, w)| w).sum();
            assert!(w.iter().all(|(_, w)| *w >= 0.0));
            assert!((sum - 1.0).abs() < 1e-12, "c={c:?} sum={sum}");
        }
    }

    #[test]
    fn gather_constant_and_lattice() {
        let spec = small_spec();
        let v = ScalarVolume::filled(spec, 7.0);
        assert!((v.gather_trilinear(Vector3::new(2.3, 4.1, 5.9)) - 7.0).abs() < 1e-12);

        let mut v = ScalarVolume::filled(spec, 0.0);
        let i = spec.flat_index(3, 4, 5);
        v.values[i] = 3.0;
        assert_eq!(v.gather_trilinear(Vector3::new(3.0, 4.0, 5.0)), 3.0);
    }

    #[test]
    fn gather_reproduces_linear_ramp() {
        let spec = small_spec();
        let mut v = ScalarVolume::filled(spec, 0.0);
        for ix in 0..8 {
            for iy in 0..8 {
                for iz in 0..8 {
                    v.values[spec.flat_index(ix, iy, iz)] = ix as f64;
                }
            }
        }
        assert!((v.gather_trilinear(Vector3::new(2.5, 0.0, 0.0)) - 2.5).abs() < 1e-12);

        // Trilinear interpolation reproduces any field linear in (x,y,z)
        // at interior points.
        let mut v = ScalarVolume::filled(spec, 0.0);
        for ix in 0..8 {
            for iy in 0..8 {
                for iz in 0..8 {
                    v.values[spec.flat_index(ix, iy, iz)] =
                        1.5 * ix as f64 - 2.0 * iy as f64 + 0.25 * iz as f64 + 3.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = Vector3::new(
                rng.random_range(0.0..6.9),
                rng.random_range(0.0..6.9),
                rng.random_range(0.0..6.9),
            );
            let expect = 1.5 * c.x - 2.0 * c.y + 0.25 * c.z + 3.0;
            assert!((v.gather_trilinear(c) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn gather_out_of_grid_renormalizes() {
        let spec = small_spec();
        let v = ScalarVolume::filled(spec, 5.0);
        // Half the stencil hangs off the -x face; renormalization keeps the
        // constant field constant.
        assert!((v.gather_trilinear(Vector3::new(-0.5, 3.0, 3.0)) - 5.0).abs() < 1e-12);
        // Entirely outside: zero.
        assert_eq!(v.gather_trilinear(Vector3::new(-3.0, 3.0, 3.0)), 0.0);
    }
}
