//! Pinhole camera and analytic ray-cast depth rendering.
//!
//! Camera convention: x right, y down, z forward (optical axis). Depth
//! images store z-depth (distance along the optical axis) in meters with 0
//! meaning no hit. Pixel (u, v) looks along `((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1)`.

use nalgebra::{Matrix3, Rotation2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{SceneState, Shape};

/// Serializable camera description; the benchmark uses a fixed elevated
/// front view covering the whole workspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 320,
            height: 240,
            fx: 300.0,
            fy: 300.0,
            eye: [0.0, -0.65, 0.55],
            target: [0.0, 0.0, 0.05],
        }
    }
}

/// Pinhole model with precomputed world-from-camera rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub config: CameraConfig,
    pub cx: f64,
    pub cy: f64,
    /// Columns are the camera x (right), y (down), z (forward) axes in world
    /// coordinates.
    r_wc: Matrix3<f64>,
    center: Vector3<f64>,
}

impl CameraModel {
    pub fn new(config: &CameraConfig) -> Self {
        let eye = Vector3::from(config.eye);
        let target = Vector3::from(config.target);
        let forward = (target - eye).normalize();
        let up = Vector3::new(0.0, 0.0, 1.0);
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let mut r_wc = Matrix3::zeros();
        r_wc.set_column(0, &right);
        r_wc.set_column(1, &down);
        r_wc.set_column(2, &forward);
        CameraModel {
            config: *config,
            cx: config.width as f64 / 2.0,
            cy: config.height as f64 / 2.0,
            r_wc,
            center: eye,
        }
    }

    /// Projects a world point; returns (pixel u, pixel v, z-depth) when the
    /// point lies in front of the camera and inside the image.
    pub fn project(&self, p: Vector3<f64>) -> Option<(usize, usize, f64)> {
        let rel = p - self.center;
        let pc = self.r_wc.transpose() * rel;
        if pc.z <= 1e-9 {
            return None;
        }
        let u = pc.x / pc.z * self.config.fx + self.cx;
        let v = pc.y / pc.z * self.config.fy + self.cy;
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (ui, vi) = (u as usize, v as usize);
        if ui >= self.config.width || vi >= self.config.height {
            return None;
        }
        Some((ui, vi, pc.z))
    }

    /// World-space ray through the center of pixel (u, v): (origin, unit
    /// direction, direction z-depth factor).
    pub fn pixel_ray(&self, u: usize, v: usize) -> (Vector3<f64>, Vector3<f64>, f64) {
        let dc = Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.config.fx,
            (v as f64 + 0.5 - self.cy) / self.config.fy,
            1.0,
        );
        let norm = dc.norm();
        let dir = self.r_wc * (dc / norm);
        // z-depth per unit ray length.
        (self.center, dir, 1.0 / norm)
    }
}

/// Depth image in meters (z-depth); 0 marks pixels with no hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthImage {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }
}

fn ray_sphere(o: Vector3<f64>, d: Vector3<f64>, c: Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(&d);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = -b - s;
    if t0 > 1e-9 {
        return Some(t0);
    }
    let t1 = -b + s;
    (t1 > 1e-9).then_some(t1)
}

fn ray_cylinder(
    o: Vector3<f64>,
    d: Vector3<f64>,
    c: Vector3<f64>,
    r: f64,
    half_h: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    // Side surface.
    let ox = o.x - c.x;
    let oy = o.y - c.y;
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = ox * d.x + oy * d.y;
        let disc = b * b - a * (ox * ox + oy * oy - r * r);
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let z = o.z + t * d.z;
                if (z - c.z).abs() <= half_h {
                    consider(t);
                }
            }
        }
    }
    // Caps.
    if d.z.abs() > 1e-15 {
        for zc in [c.z - half_h, c.z + half_h] {
            let t = (zc - o.z) / d.z;
            let x = o.x + t * d.x - c.x;
            let y = o.y + t * d.y - c.y;
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

fn ray_box(
    o: Vector3<f64>,
    d: Vector3<f64>,
    c: Vector3<f64>,
    yaw: f64,
    half: Vector3<f64>,
) -> Option<f64> {
    // Slab method in the box's local frame.
    let rot = Rotation2::new(-yaw);
    let ol = rot * Vector2::new(o.x - c.x, o.y - c.y);
    let dl = rot * Vector2::new(d.x, d.y);
    let o_local = Vector3::new(ol.x, ol.y, o.z - c.z);
    let d_local = Vector3::new(dl.x, dl.y, d.z);
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for axis in 0..3 {
        let (oa, da, h) = (o_local[axis], d_local[axis], half[axis]);
        if da.abs() < 1e-15 {
            if oa.abs() > h {
                return None;
            }
            continue;
        }
        let mut t0 = (-h - oa) / da;
        let mut t1 = (h - oa) / da;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin > 1e-9 {
        Some(tmin)
    } else if tmax > 1e-9 {
        Some(tmax)
    } else {
        None
    }
}

/// Renders the scene to a depth image by nearest analytic ray-primitive
/// intersection, including the table plane at z = 0.
pub fn render_depth(scene: &SceneState, cam: &CameraModel) -> DepthImage {
    let (w, h) = (cam.config.width, cam.config.height);
    let mut values = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let (o, d, depth_per_t) = cam.pixel_ray(u, v);
            let mut t_hit = f64::INFINITY;
            // The table plane fills everything below the horizon.
            if d.z < -1e-15 {
                let t = -o.z / d.z;
                if t > 1e-9 {
                    t_hit = t;
                }
            }
            for obj in &scene.objects {
                let c = obj.center();
                let t = match obj.shape {
                    Shape::Sphere { radius } => ray_sphere(o, d, c, radius),
                    Shape::Cylinder { radius, height } => {
                        ray_cylinder(o, d, c, radius, height / 2.0)
                    }
                    Shape::Box { extents } => ray_box(
                        o,
                        d,
                        c,
                        obj.yaw(),
                        Vector3::new(extents[0] / 2.0, extents[1] / 2.0, extents[2] / 2.0),
                    ),
                };
                if let Some(t) = t {
                    if t < t_hit {
                        t_hit = t;
                    }
                }
            }
            if t_hit.is_finite() {
                values[v * w + u] = t_hit * depth_per_t;
            }
        }
    }
    DepthImage {
        width: w,
        height: h,
        values,
    }
}
