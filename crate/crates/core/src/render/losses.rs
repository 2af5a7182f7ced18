//! Loss terms for the two training stages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{render_flow_var, render_image_var, landmarks_var, vec3_tensor, RenderSettings, Supervision2D};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Weights {
    pub img: f64,
    pub mask: f64,
    pub dis2d: f64,
    pub reg: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self { img: 10.0, mask: 1.0, dis2d: 1.0, reg: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Weights {
    pub img: f64,
    pub mask: f64,
    pub mse3d: f64,
    pub lmk: f64,
    pub ec: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self { img: 10.0, mask: 1.0, mse3d: 100.0, lmk: 0.5, ec: 0.5 }
    }
}

/// Weighted total plus the unweighted terms that went into it.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape<'_>) -> Vec<(&'static str, f64)> {
        self.terms.iter().map(|&(n, v)| (n, tape.value(v).item())).collect()
    }

    fn combine(tape: &mut Tape<'_>, weighted: Vec<(&'static str, f64, Var)>) -> Result<Self> {
        let mut total = tape.constant(Tensor::scalar(0.0));
        let mut terms = Vec::with_capacity(weighted.len());
        for (name, w, v) in weighted {
            let s = tape.scale(v, w)?;
            total = tape.add(total, s)?;
            terms.push((name, v));
        }
        Ok(Self { total, terms })
    }
}

fn target(tape: &mut Tape<'_>, like: Var, data: &[f64]) -> Result<Var> {
    let shape = tape.value(like).shape().to_vec();
    Ok(tape.constant(Tensor::new(&shape, data.to_vec())?))
}

/// Mean absolute difference.
pub fn l1_mean(tape: &mut Tape<'_>, pred: Var, gt: &[f64]) -> Result<Var> {
    let t = target(tape, pred, gt)?;
    let d = tape.sub(pred, t)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Mean squared row distance between `pred` and `gt` over the rows flagged
/// in `valid`; zero when none are.
pub fn masked_row_mse(tape: &mut Tape<'_>, pred: Var, gt: &[f64], valid: &[bool]) -> Result<Var> {
    let (rows, c) = (tape.value(pred).rows(), tape.value(pred).cols());
    if valid.len() != rows || gt.len() != rows * c {
        return Err(Error::ShapeMismatch(format!("masked_row_mse: {rows} rows, {} flags, {} targets", valid.len(), gt.len())));
    }
    let idx: Vec<usize> = (0..rows).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = tape.gather_rows(pred, &idx)?;
    let g: Vec<f64> = idx.iter().flat_map(|&i| gt[i * c..(i + 1) * c].iter().copied()).collect();
    let g = tape.constant(Tensor::new(&[idx.len(), c], g)?);
    let d = tape.sub(p, g)?;
    let d = tape.square(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, 1.0 / idx.len() as f64)
}

/// Mean squared row norm.
pub fn mean_sq_norm(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let n = tape.value(x).rows().max(1);
    let sq = tape.square(x)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Mean squared vertex error.
pub fn mse3d(tape: &mut Tape<'_>, verts: Var, gt: &[Vec3]) -> Result<Var> {
    let g = tape.constant(vec3_tensor(gt));
    if tape.value(g).shape() != tape.value(verts).shape() {
        return Err(Error::LengthMismatch { expected: tape.value(verts).rows(), got: gt.len() });
    }
    let d = tape.sub(verts, g)?;
    mean_sq_norm(tape, d)
}

fn normalizer(tape: &mut Tape<'_>, rows: usize, s: &RenderSettings) -> Result<Var> {
    let inv = tape.constant(Tensor::vector(vec![1.0 / s.width as f64, 1.0 / s.height as f64]));
    tape.broadcast_rows(inv, rows)
}

/// Mean l1 distance of landmarks (pixels, `L x 2`) in normalized coordinates.
pub fn landmark_l1(tape: &mut Tape<'_>, pred_px: Var, gt_px: &[[f64; 2]], s: &RenderSettings) -> Result<Var> {
    let rows = tape.value(pred_px).rows();
    if gt_px.len() != rows {
        return Err(Error::LengthMismatch { expected: rows, got: gt_px.len() });
    }
    let inv = normalizer(tape, rows, s)?;
    let p = tape.mul(pred_px, inv)?;
    let g: Vec<f64> = gt_px.iter().flat_map(|p| [p[0] / s.width as f64, p[1] / s.height as f64]).collect();
    l1_mean(tape, p, &g)
}

/// Mean l1 between predicted and ground-truth vertical gaps of eyelid
/// landmark pairs `(upper, lower)`, in normalized coordinates.
pub fn eye_close(tape: &mut Tape<'_>, pred_px: Var, gt_px: &[[f64; 2]], pairs: &[(usize, usize)], s: &RenderSettings) -> Result<Var> {
    let rows = tape.value(pred_px).rows();
    if pairs.is_empty() || pairs.iter().any(|&(u, l)| u >= rows || l >= rows || u >= gt_px.len() || l >= gt_px.len()) {
        return Err(Error::MissingLandmarks);
    }
    let up: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let lo: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let y = tape.slice_cols(pred_px, 1, 2)?;
    let yu = tape.gather_rows(y, &up)?;
    let yl = tape.gather_rows(y, &lo)?;
    let gap = tape.sub(yu, yl)?;
    let gap = tape.scale(gap, 1.0 / s.height as f64)?;
    let g: Vec<f64> = pairs.iter().map(|&(u, l)| (gt_px[u][1] - gt_px[l][1]) / s.height as f64).collect();
    l1_mean(tape, gap, &g)
}

/// Landmark annotation of a mesh: landmark vertices and eyelid pairs given
/// as positions in that list.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkSpec<'b> {
    pub vertices: &'b [usize],
    pub eyelid_pairs: &'b [(usize, usize)],
}

/// Stage-1 objective for predicted displacements `disp` of the neutral
/// `v0`. `valid` flags pixels that carry flow supervision.
pub fn stage1<'a>(
    tape: &mut Tape<'a>,
    v0: &[Vec3],
    disp: Var,
    faces: &'a [[usize; 3]],
    gt: &Supervision2D,
    valid: &[bool],
    s: &RenderSettings,
    w: &Stage1Weights,
) -> Result<LossTerms> {
    gt.check(s)?;
    let v0 = tape.constant(vec3_tensor(v0));
    let v = tape.add(v0, disp)?;
    let mut terms = Vec::new();
    if w.img != 0.0 || w.mask != 0.0 {
        let (image, mask) = render_image_var(tape, v, faces, s)?;
        if w.img != 0.0 {
            terms.push(("img", w.img, l1_mean(tape, image, &gt.image)?));
        }
        if w.mask != 0.0 {
            terms.push(("mask", w.mask, l1_mean(tape, mask, &gt.mask)?));
        }
    }
    if w.dis2d != 0.0 {
        let flow = render_flow_var(tape, v0, v, faces, s)?;
        terms.push(("dis2d", w.dis2d, masked_row_mse(tape, flow, &gt.flow, valid)?));
    }
    if w.reg != 0.0 {
        terms.push(("reg", w.reg, mean_sq_norm(tape, disp)?));
    }
    LossTerms::combine(tape, terms)
}

/// Stage-2 objective against 3D ground truth `gt_verts`.
#[allow(clippy::too_many_arguments)]
pub fn stage2<'a>(
    tape: &mut Tape<'a>,
    v0: &[Vec3],
    disp: Var,
    faces: &'a [[usize; 3]],
    gt: &Supervision2D,
    gt_verts: &[Vec3],
    landmarks: Option<LandmarkSpec<'_>>,
    s: &RenderSettings,
    w: &Stage2Weights,
) -> Result<LossTerms> {
    gt.check(s)?;
    let v0 = tape.constant(vec3_tensor(v0));
    let v = tape.add(v0, disp)?;
    let mut terms = Vec::new();
    if w.img != 0.0 || w.mask != 0.0 {
        let (image, mask) = render_image_var(tape, v, faces, s)?;
        if w.img != 0.0 {
            terms.push(("img", w.img, l1_mean(tape, image, &gt.image)?));
        }
        if w.mask != 0.0 {
            terms.push(("mask", w.mask, l1_mean(tape, mask, &gt.mask)?));
        }
    }
    if w.mse3d != 0.0 {
        terms.push(("mse3d", w.mse3d, mse3d(tape, v, gt_verts)?));
    }
    if w.lmk != 0.0 || w.ec != 0.0 {
        let (spec, gl) = match (landmarks, gt.landmarks.as_deref()) {
            (Some(spec), Some(gl)) if !spec.vertices.is_empty() => (spec, gl),
            _ => return Err(Error::MissingLandmarks),
        };
        let lp = landmarks_var(tape, v, spec.vertices, s)?;
        if w.lmk != 0.0 {
            terms.push(("lmk", w.lmk, landmark_l1(tape, lp, gl, s)?));
        }
        if w.ec != 0.0 {
            terms.push(("ec", w.ec, eye_close(tape, lp, gl, spec.eyelid_pairs, s)?));
        }
    }
    LossTerms::combine(tape, terms)
}
