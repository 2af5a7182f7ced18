//! Front-view rendering: shaded image, soft silhouette and the screen-space
//! displacement map used as 2D supervision.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};

pub mod camera;
pub mod losses;
pub mod raster;

pub use camera::{project_screen, project_var, Camera, ScreenVertex};
pub use losses::{LossTerms, Stage1Weights, Stage2Weights};
pub use raster::{rasterize_hard, rasterize_var, soft_mask, Fragments, RasterSettings};

pub const DEFAULT_SIGMA: f64 = 1e-5;
pub const ALBEDO: f64 = 0.7;
pub const AMBIENT: f64 = 0.3;
/// Flow value of a pixel that does not move.
pub const FLOW_ZERO: f64 = 0.5;

/// Unnormalized direction towards the light, in world space.
pub const LIGHT_DIR: Vec3 = [0.3, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub camera: Camera,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self::square(512)
    }
}

impl RenderSettings {
    pub fn square(res: usize) -> Self {
        Self { width: res, height: res, sigma: DEFAULT_SIGMA, camera: Camera::front(1.0) }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.sigma > 0.0) {
            return Err(Error::BadConfig(format!("render {}x{} sigma {}", self.width, self.height, self.sigma)));
        }
        self.camera.validate()
    }

    fn raster(&self, mask: bool, bary_grad: bool) -> RasterSettings {
        RasterSettings {
            width: self.width,
            height: self.height,
            sigma: self.sigma,
            near: self.camera.near,
            mask,
            bary_grad,
        }
    }
}

/// Rendered buffers, row-major by pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTargets {
    pub width: usize,
    pub height: usize,
    /// `H*W x 3` in `[0, 1]`.
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
    /// `H*W x 2`, zero motion encoded as 0.5.
    pub flow: Vec<f64>,
    /// View depth of the front-most surface, `far` on background.
    pub depth: Vec<f64>,
}

/// Ground truth for the image-space losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision2D {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
    pub flow: Vec<f64>,
    /// Landmark positions in pixels.
    pub landmarks: Option<Vec<[f64; 2]>>,
}

impl Supervision2D {
    pub fn check(&self, s: &RenderSettings) -> Result<()> {
        let p = s.pixels();
        if self.width != s.width || self.height != s.height {
            return Err(Error::ShapeMismatch(format!(
                "supervision {}x{} vs render {}x{}",
                self.width, self.height, s.width, s.height
            )));
        }
        if self.image.len() != 3 * p || self.mask.len() != p || self.flow.len() != 2 * p {
            return Err(Error::ShapeMismatch("supervision buffer sizes".into()));
        }
        Ok(())
    }
}

/// `n x 3` tensor of positions.
pub fn vec3_tensor(v: &[Vec3]) -> Tensor {
    Tensor::new(&[v.len(), 3], v.iter().flatten().copied().collect()).expect("n x 3")
}

fn cross_var(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let col = |tape: &mut Tape<'_>, x, i| tape.slice_cols(x, i, i + 1);
    let (a0, a1, a2) = (col(tape, a, 0)?, col(tape, a, 1)?, col(tape, a, 2)?);
    let (b0, b1, b2) = (col(tape, b, 0)?, col(tape, b, 1)?, col(tape, b, 2)?);
    let mut comp = |p: Var, q: Var, r: Var, s: Var| -> Result<Var> {
        let l = tape.mul(p, q)?;
        let rr = tape.mul(r, s)?;
        tape.sub(l, rr)
    };
    let x = comp(a1, b2, a2, b1)?;
    let y = comp(a2, b0, a0, b2)?;
    let z = comp(a0, b1, a1, b0)?;
    tape.concat(&[x, y, z])
}

/// Area-weighted unit vertex normals of `verts` (`n x 3`).
pub fn vertex_normals_var(tape: &mut Tape<'_>, verts: Var, faces: &[[usize; 3]]) -> Result<Var> {
    let n = tape.value(verts).rows();
    let idx: [Vec<usize>; 3] = core::array::from_fn(|k| faces.iter().map(|f| f[k]).collect());
    let p0 = tape.gather_rows(verts, &idx[0])?;
    let p1 = tape.gather_rows(verts, &idx[1])?;
    let p2 = tape.gather_rows(verts, &idx[2])?;
    let e1 = tape.sub(p1, p0)?;
    let e2 = tape.sub(p2, p0)?;
    let fnrm = cross_var(tape, e1, e2)?;
    let mut acc = tape.scatter_add_rows(fnrm, &idx[0], n)?;
    for k in 1..3 {
        let s = tape.scatter_add_rows(fnrm, &idx[k], n)?;
        acc = tape.add(acc, s)?;
    }
    let sq = tape.square(acc)?;
    let len2 = tape.sum_cols(sq)?;
    let len2 = tape.add_scalar(len2, 1e-20)?;
    let len = tape.sqrt(len2)?;
    let len = tape.broadcast_cols(len, 3)?;
    tape.div(acc, len)
}

/// Gray Lambertian vertex colors from unit normals.
pub fn shade_var(tape: &mut Tape<'_>, normals: Var) -> Result<Var> {
    let l = math::normalize(LIGHT_DIR).expect("light direction");
    let l = tape.constant(Tensor::new(&[3, 1], l.to_vec())?);
    let ndl = tape.matmul(normals, l)?;
    let ndl = tape.relu(ndl)?;
    let i = tape.scale(ndl, ALBEDO * (1.0 - AMBIENT))?;
    let i = tape.add_scalar(i, ALBEDO * AMBIENT)?;
    tape.broadcast_cols(i, 3)
}

/// Differentiable image (`H*W x 3`) and soft mask (`H*W x 1`) of a mesh.
pub fn render_image_var<'a>(
    tape: &mut Tape<'a>,
    verts: Var,
    faces: &'a [[usize; 3]],
    s: &RenderSettings,
) -> Result<(Var, Var)> {
    let screen = project_var(tape, verts, &s.camera, s.width, s.height)?;
    let nrm = vertex_normals_var(tape, verts, faces)?;
    let col = shade_var(tape, nrm)?;
    let out = rasterize_var(tape, screen, col, faces, &[1.0; 3], &s.raster(true, true))?;
    let image = tape.slice_cols(out, 0, 3)?;
    let mask = tape.slice_cols(out, 3, 4)?;
    Ok((image, mask))
}

/// Per-vertex flow attribute `(s1 - s0) / (W, H) * 0.5 + 0.5`, `n x 2`.
pub fn flow_attributes_var(tape: &mut Tape<'_>, v0: Var, v1: Var, s: &RenderSettings) -> Result<Var> {
    let s0 = project_var(tape, v0, &s.camera, s.width, s.height)?;
    let s1 = project_var(tape, v1, &s.camera, s.width, s.height)?;
    let d = tape.sub(s1, s0)?;
    let d = tape.slice_cols(d, 0, 2)?;
    let inv = tape.constant(Tensor::vector(vec![0.5 / s.width as f64, 0.5 / s.height as f64]));
    let inv = tape.broadcast_rows(inv, tape.value(d).rows())?;
    let d = tape.mul(d, inv)?;
    tape.add_scalar(d, FLOW_ZERO)
}

/// Displacement map rasterized over the neutral geometry `v0`; gradients
/// reach `v0` and `v1` only through the attribute values.
pub fn render_flow_var<'a>(tape: &mut Tape<'a>, v0: Var, v1: Var, faces: &'a [[usize; 3]], s: &RenderSettings) -> Result<Var> {
    let attr = flow_attributes_var(tape, v0, v1, s)?;
    let screen = project_screen(&tensor_vec3(tape.value(v0))?, &s.camera, s.width, s.height)?;
    let screen = tape.constant(screen_tensor(&screen));
    rasterize_var(tape, screen, attr, faces, &[FLOW_ZERO; 2], &s.raster(false, false))
}

fn screen_tensor(s: &[ScreenVertex]) -> Tensor {
    Tensor::new(&[s.len(), 3], s.iter().flat_map(|v| [v.x, v.y, v.depth]).collect()).expect("n x 3")
}

fn tensor_vec3(t: &Tensor) -> Result<Vec<Vec3>> {
    if t.cols() != 3 || t.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("expected n x 3, got {:?}", t.shape())));
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Pixels covered by the hard raster of `verts`.
pub fn coverage(verts: &[Vec3], faces: &[[usize; 3]], s: &RenderSettings) -> Result<Vec<bool>> {
    let screen = project_screen(verts, &s.camera, s.width, s.height)?;
    let st = screen_tensor(&screen);
    let frags = rasterize_hard(st.data(), faces, &s.raster(false, false));
    Ok((0..s.pixels()).map(|p| frags.covered(p)).collect())
}

/// Landmark positions in pixels, `L x 2`.
pub fn landmarks_var(tape: &mut Tape<'_>, verts: Var, landmarks: &[usize], s: &RenderSettings) -> Result<Var> {
    let p = tape.gather_rows(verts, landmarks)?;
    let sc = project_var(tape, p, &s.camera, s.width, s.height)?;
    tape.slice_cols(sc, 0, 2)
}

pub fn project_landmarks(verts: &[Vec3], landmarks: &[usize], s: &RenderSettings) -> Result<Vec<[f64; 2]>> {
    // same arithmetic as the differentiable path, so identical geometry
    // gives a landmark loss of exactly zero
    let mut tape = Tape::new();
    let v = tape.constant(vec3_tensor(verts));
    let p = landmarks_var(&mut tape, v, landmarks, s)?;
    Ok(tape.value(p).data().chunks(2).map(|c| [c[0], c[1]]).collect())
}

fn check_faces(n: usize, faces: &[[usize; 3]]) -> Result<()> {
    if faces.iter().flatten().any(|&v| v >= n) {
        return Err(Error::InvalidMesh("face index out of range".into()));
    }
    Ok(())
}

/// All render targets of `verts`, with the flow measured from `neutral`.
/// Pass `neutral = verts` for a still frame.
pub fn render_targets(neutral: &[Vec3], verts: &[Vec3], faces: &[[usize; 3]], s: &RenderSettings) -> Result<RenderTargets> {
    s.validate()?;
    if neutral.len() != verts.len() {
        return Err(Error::LengthMismatch { expected: neutral.len(), got: verts.len() });
    }
    check_faces(verts.len(), faces)?;
    let mut tape = Tape::new();
    let v = tape.constant(vec3_tensor(verts));
    let v0 = tape.constant(vec3_tensor(neutral));
    let (image, mask) = render_image_var(&mut tape, v, faces, s)?;
    let flow = render_flow_var(&mut tape, v0, v, faces, s)?;
    let screen = project_screen(verts, &s.camera, s.width, s.height)?;
    let frags = rasterize_hard(screen_tensor(&screen).data(), faces, &s.raster(false, false));
    let depth = frags.depth.iter().map(|&d| if d.is_finite() { d } else { s.camera.far }).collect();
    Ok(RenderTargets {
        width: s.width,
        height: s.height,
        image: tape.value(image).data().to_vec(),
        mask: tape.value(mask).data().to_vec(),
        flow: tape.value(flow).data().to_vec(),
        depth,
    })
}
