use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Pinhole camera. Screen space has its origin at the top-left corner,
/// x to the right and y down; pixel `(i, j)` has its center at
/// `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fov_y: f64,
    pub aspect: f64,
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub near: f64,
    pub far: f64,
}

/// Vertical field of view of the fixed front camera, in degrees. A unit
/// sphere seen from distance 3 subtends about 39 degrees.
pub const FRONT_FOV_DEG: f64 = 45.0;
pub const FRONT_DISTANCE: f64 = 3.0;

impl Camera {
    /// Front view: on +z at distance 3, looking at the origin, +y up.
    pub fn front(aspect: f64) -> Self {
        Self {
            fov_y: FRONT_FOV_DEG.to_radians(),
            aspect,
            position: [0.0, 0.0, FRONT_DISTANCE],
            target: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            near: 0.1,
            far: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::BadConfig(format!("camera near {} / far {}", self.near, self.far)));
        }
        if !(self.fov_y > 0.0 && self.fov_y < core::f64::consts::PI) || !(self.aspect > 0.0) {
            return Err(Error::BadConfig(format!("camera fov {} aspect {}", self.fov_y, self.aspect)));
        }
        self.basis().map(|_| ())
    }

    /// Right, true-up and forward unit vectors.
    pub fn basis(&self) -> Result<[Vec3; 3]> {
        let f = math::normalize(math::sub(self.target, self.position))
            .ok_or_else(|| Error::BadConfig("camera target equals position".into()))?;
        let r = math::normalize(math::cross(f, self.up))
            .ok_or_else(|| Error::BadConfig("camera up is parallel to the view direction".into()))?;
        let u = math::cross(r, f);
        Ok([r, u, f])
    }

    fn focal(&self) -> f64 {
        1.0 / (0.5 * self.fov_y).tan()
    }
}

/// One projected vertex: pixel coordinates and view depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenVertex {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    /// Closer than the near plane (or behind); excluded from rasterization.
    pub behind: bool,
}

/// Perspective projection of `verts` into a `width x height` image.
pub fn project_screen(verts: &[Vec3], cam: &Camera, width: usize, height: usize) -> Result<Vec<ScreenVertex>> {
    let [r, u, f] = cam.basis()?;
    let fy = cam.focal();
    let fx = fy / cam.aspect;
    let (w, h) = (width as f64, height as f64);
    Ok(verts
        .iter()
        .map(|&p| {
            let d = math::sub(p, cam.position);
            let (xc, yc, z) = (math::dot(d, r), math::dot(d, u), math::dot(d, f));
            ScreenVertex {
                x: 0.5 * w * (1.0 + fx * xc / z),
                y: 0.5 * h * (1.0 - fy * yc / z),
                depth: z,
                behind: !(z > cam.near),
            }
        })
        .collect())
}

/// Differentiable projection of an `n x 3` position tensor to `n x 3`
/// `(x_px, y_px, depth)`.
pub fn project_var<'a>(tape: &mut Tape<'a>, verts: Var, cam: &Camera, width: usize, height: usize) -> Result<Var> {
    let [r, u, f] = cam.basis()?;
    let rot = Tensor::matrix(3, 3, alloc::vec![r[0], u[0], f[0], r[1], u[1], f[1], r[2], u[2], f[2]])?;
    let e = cam.position;
    let shift = Tensor::vector(alloc::vec![
        -math::dot(e, r),
        -math::dot(e, u),
        -math::dot(e, f)
    ]);
    let rot = tape.constant(rot);
    let shift = tape.constant(shift);
    let c = tape.matmul(verts, rot)?;
    let c = tape.add_row(c, shift)?;
    let xc = tape.slice_cols(c, 0, 1)?;
    let yc = tape.slice_cols(c, 1, 2)?;
    let z = tape.slice_cols(c, 2, 3)?;
    let fy = cam.focal();
    let fx = fy / cam.aspect;
    let (w, h) = (width as f64, height as f64);
    let xs = tape.div(xc, z)?;
    let xs = tape.scale(xs, 0.5 * w * fx)?;
    let xs = tape.add_scalar(xs, 0.5 * w)?;
    let ys = tape.div(yc, z)?;
    let ys = tape.scale(ys, -0.5 * h * fy)?;
    let ys = tape.add_scalar(ys, 0.5 * h)?;
    tape.concat(&[xs, ys, z])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_point_hits_center() {
        let cam = Camera::front(1.0);
        let s = project_screen(&[[0.0; 3]], &cam, 64, 48).unwrap();
        assert!((s[0].x - 32.0).abs() < 1e-6 && (s[0].y - 24.0).abs() < 1e-6);
        assert!((s[0].depth - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mirrored_pair() {
        let cam = Camera::front(1.0);
        let s = project_screen(&[[0.3, 0.1, 0.2], [-0.3, 0.1, 0.2]], &cam, 100, 100).unwrap();
        assert!((s[0].x - 50.0 + (s[1].x - 50.0)).abs() < 1e-9);
        assert!((s[0].y - s[1].y).abs() < 1e-12);
        // +x is to the right, +y is up (smaller row index)
        assert!(s[0].x > 50.0 && s[0].y < 50.0);
    }

    /// Independent homogeneous pipeline: 4x4 view and projection matrices.
    fn oracle(p: Vec3, cam: &Camera, w: f64, h: f64) -> [f64; 2] {
        let zaxis = math::normalize(math::sub(cam.position, cam.target)).unwrap();
        let xaxis = math::normalize(math::cross(cam.up, zaxis)).unwrap();
        let yaxis = math::cross(zaxis, xaxis);
        let e = cam.position;
        let view = [
            [xaxis[0], xaxis[1], xaxis[2], -math::dot(xaxis, e)],
            [yaxis[0], yaxis[1], yaxis[2], -math::dot(yaxis, e)],
            [zaxis[0], zaxis[1], zaxis[2], -math::dot(zaxis, e)],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let t = 1.0 / (cam.fov_y / 2.0).tan();
        let (n, f) = (cam.near, cam.far);
        let proj = [
            [t / cam.aspect, 0.0, 0.0, 0.0],
            [0.0, t, 0.0, 0.0],
            [0.0, 0.0, (f + n) / (n - f), 2.0 * f * n / (n - f)],
            [0.0, 0.0, -1.0, 0.0],
        ];
        let ph = [p[0], p[1], p[2], 1.0];
        let mul = |m: &[[f64; 4]; 4], v: [f64; 4]| {
            let mut o = [0.0; 4];
            for i in 0..4 {
                o[i] = (0..4).map(|j| m[i][j] * v[j]).sum();
            }
            o
        };
        let clip = mul(&proj, mul(&view, ph));
        let ndc = [clip[0] / clip[3], clip[1] / clip[3]];
        [(ndc[0] + 1.0) * 0.5 * w, (1.0 - ndc[1]) * 0.5 * h]
    }

    #[test]
    fn matches_homogeneous_oracle() {
        let mut cam = Camera::front(1.5);
        cam.position = [0.4, -0.3, 2.5];
        cam.target = [0.1, 0.05, 0.0];
        let pts = [[0.2, 0.3, -0.1], [-0.5, 0.1, 0.4], [0.05, -0.6, 0.2]];
        let s = project_screen(&pts, &cam, 300, 200).unwrap();
        for (p, sv) in pts.iter().zip(&s) {
            let o = oracle(*p, &cam, 300.0, 200.0);
            assert!((sv.x - o[0]).abs() < 1e-8 && (sv.y - o[1]).abs() < 1e-8);
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(3, 3, pts.iter().flatten().copied().collect()).unwrap());
        let sv = project_var(&mut tape, v, &cam, 300, 200).unwrap();
        let d = tape.value(sv).data();
        for (i, s) in s.iter().enumerate() {
            assert!((d[i * 3] - s.x).abs() < 1e-9 && (d[i * 3 + 1] - s.y).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = Camera::front(1.0);
        let s = project_screen(&[[0.0, 0.0, 3.5], [0.0, 0.0, 2.95]], &cam, 8, 8).unwrap();
        assert!(s[0].behind && s[1].behind);
    }

    #[test]
    fn degenerate_cameras_rejected() {
        let mut c = Camera::front(1.0);
        c.up = [0.0, 0.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = Camera::front(1.0);
        c.near = 20.0;
        assert!(c.validate().is_err());
    }
}
