//! Linear blendshape rigs, their assembly from the network, and the error
//! metrics used to judge them.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::facs::FacsVector;
use crate::math::{self, Vec3};
use crate::mesh::{NormalizationTransform, TriMesh};
use crate::network::{self, MeshInput, ModelParams};
use crate::operators::SurfaceOperators;

/// One rig entry: display name, activation vector, per-vertex offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RigPose {
    pub name: String,
    pub facs: FacsVector,
    pub delta: Vec<Vec3>,
}

/// Neutral mesh plus `N` displacement fields. Posed vertices are
/// `V0 + sum_i w_i d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeRig {
    pub neutral: TriMesh,
    pub poses: Vec<RigPose>,
    /// Maps the original mesh into the normalized frame the rig lives in.
    pub transform: NormalizationTransform,
}

/// Blend weights, one per pose; clamped to `[0, 1]` when applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RigWeights(pub Vec<f64>);

impl RigWeights {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn one_hot(n: usize, j: usize) -> Self {
        let mut w = vec![0.0; n];
        w[j] = 1.0;
        Self(w)
    }
}

impl BlendshapeRig {
    pub fn new(neutral: TriMesh, poses: Vec<RigPose>, transform: NormalizationTransform) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::BadConfig("a rig needs at least one pose".into()));
        }
        let n = neutral.vertex_count();
        let mut names = BTreeSet::new();
        for p in &poses {
            if p.delta.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: p.delta.len() });
            }
            if !names.insert(p.name.as_str()) {
                return Err(Error::BadConfig(format!("duplicate pose name {:?}", p.name)));
            }
        }
        Ok(Self { neutral, poses, transform })
    }

    pub fn pose_count(&self) -> usize {
        self.poses.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.poses.iter().position(|p| p.name == name)
    }

    /// Blended vertex positions.
    pub fn evaluate_vertices(&self, w: &RigWeights) -> Result<Vec<Vec3>> {
        if w.0.len() != self.poses.len() {
            return Err(Error::LengthMismatch { expected: self.poses.len(), got: w.0.len() });
        }
        let mut v = self.neutral.vertices.clone();
        for (p, &wi) in self.poses.iter().zip(&w.0) {
            let wi = if wi.is_nan() { 0.0 } else { wi.clamp(0.0, 1.0) };
            if wi == 0.0 {
                continue;
            }
            for (x, d) in v.iter_mut().zip(&p.delta) {
                for c in 0..3 {
                    x[c] += wi * d[c];
                }
            }
        }
        Ok(v)
    }

    /// Blended mesh; faces and labels are those of the neutral.
    pub fn evaluate(&self, w: &RigWeights) -> Result<TriMesh> {
        self.neutral.with_vertices(self.evaluate_vertices(w)?)
    }

    /// Pose `j` at full weight.
    pub fn posed(&self, j: usize) -> Vec<Vec3> {
        self.neutral.vertices.iter().zip(&self.poses[j].delta).map(|(a, b)| math::add(*a, *b)).collect()
    }
}

/// One forward pass per pose on a normalized mesh.
pub fn build_rig(
    mesh: &TriMesh,
    ops: &SurfaceOperators,
    params: &ModelParams,
    poses: &[(String, FacsVector)],
    transform: NormalizationTransform,
) -> Result<BlendshapeRig> {
    let input = MeshInput::new(mesh, ops)?;
    let facs: Vec<FacsVector> = poses.iter().map(|p| p.1.clone()).collect();
    let deltas = network::forward_many(params, &input, &facs)?;
    let poses = poses
        .iter()
        .zip(deltas)
        .map(|((name, f), delta)| RigPose { name: name.clone(), facs: f.clone(), delta })
        .collect();
    BlendshapeRig::new(mesh.clone(), poses, transform)
}

/// Normalized-space meters to millimetres (the unit sphere has radius 1 m).
pub const MM_PER_UNIT: f64 = 1000.0;

/// Mean and 95th percentile of per-vertex errors, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeStats {
    pub mae: f64,
    pub q95: f64,
}

/// Per-vertex Euclidean errors of one pose, in millimetres.
pub fn vertex_errors_mm(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::TopologyMismatch(format!("{} vs {} vertices", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| MM_PER_UNIT * math::norm(math::sub(*a, *b))).collect())
}

/// Errors pooled over all poses and vertices. Q95 interpolates linearly
/// between order statistics.
pub fn metric_mae(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<MaeStats> {
    if pred.len() != gt.len() {
        return Err(Error::TopologyMismatch(format!("{} vs {} poses", pred.len(), gt.len())));
    }
    let mut all = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        all.extend(vertex_errors_mm(p, g)?);
    }
    Ok(stats_of(all))
}

pub fn stats_of(mut errors: Vec<f64>) -> MaeStats {
    if errors.is_empty() {
        return MaeStats { mae: 0.0, q95: 0.0 };
    }
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    errors.sort_by(|a, b| a.total_cmp(b));
    MaeStats { mae, q95: math::percentile_sorted(&errors, 0.95) }
}

/// Signed solid angle of triangle `abc` seen from `p`.
fn solid_angle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let (a, b, c) = (math::sub(a, p), math::sub(b, p), math::sub(c, p));
    let (la, lb, lc) = (math::norm(a), math::norm(b), math::norm(c));
    let num = math::dot(a, math::cross(b, c));
    let den = la * lb * lc + math::dot(a, b) * lc + math::dot(b, c) * la + math::dot(c, a) * lb;
    2.0 * num.atan2(den)
}

/// Generalized winding number of `p` with respect to a triangle soup.
pub fn winding_number(p: Vec3, verts: &[Vec3], faces: &[[usize; 3]]) -> f64 {
    let s: f64 = faces.iter().map(|f| solid_angle(p, verts[f[0]], verts[f[1]], verts[f[2]])).sum();
    s / (4.0 * core::f64::consts::PI)
}

/// Index of the component with the largest surface area.
pub fn outer_component(mesh: &TriMesh) -> usize {
    let areas = mesh.face_areas();
    let mut per = vec![0.0; mesh.component_count()];
    for (f, a) in mesh.faces.iter().zip(areas) {
        per[mesh.component_id[f[0]]] += a;
    }
    // first maximum wins ties
    let mut best = 0;
    for (i, &a) in per.iter().enumerate() {
        if a > per[best] {
            best = i;
        }
    }
    best
}

/// Fraction of vertices of the inner components that lie outside the
/// outer (largest-area) component, by winding number below one half.
pub fn metric_penetration(mesh: &TriMesh) -> Result<f64> {
    if mesh.component_count() < 2 {
        return Err(Error::SingleComponent);
    }
    let outer = outer_component(mesh);
    let faces: Vec<[usize; 3]> = mesh.faces.iter().filter(|f| mesh.component_id[f[0]] == outer).copied().collect();
    let inner: Vec<usize> = (0..mesh.vertex_count()).filter(|&i| mesh.component_id[i] != outer).collect();
    if inner.is_empty() {
        return Ok(0.0);
    }
    let out = inner.iter().filter(|&&i| winding_number(mesh.vertices[i], &mesh.vertices, &faces) < 0.5).count();
    Ok(out as f64 / inner.len() as f64)
}
