//! Procedural heads with eyeball components and exact analytic blendshapes.
//!
//! A head is a warped ellipsoid (the face component) with two spherical
//! eyeballs inside it. Around each eye the face surface is pulled onto a
//! shell concentric with the eyeball; eyelids slide along that shell, so
//! every pose keeps the eyeballs enclosed. All heads of one tessellation
//! level share topology, uv layout and landmark indices, which is what makes
//! linear interpolation between heads meaningful.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facs::{self, FacsVector, DESK_AUS};
use crate::math::{self, smoothstep, Vec3};
use crate::mesh::primitives::icosphere_directions;
use crate::mesh::{NormalizationTransform, TriMesh};
use crate::render::{self, RenderSettings, Supervision2D};
use crate::rig::{BlendshapeRig, RigPose};

pub const JAW_ANGLE_DEG: f64 = 15.0;
pub const LOOK_ANGLE_DEG: f64 = 20.0;
/// Lid-to-eyeball clearance of a fully closed lid.
pub const CLOSED_GAP: f64 = 0.015;
/// Pushes icosphere directions towards +z so the face gets more vertices
/// than the back of the head.
pub const FRONT_WARP: f64 = 0.6;

const UPPER_LID: f64 = 0.15;
const LOWER_LID: f64 = -0.25;
const LID_TOP: f64 = 1.1;
const LID_BOTTOM: f64 = -0.9;
/// Fraction of the lid opening that closes.
const LID_CLOSURE: f64 = 0.85;

/// Shape parameters, in pre-normalization units (head radius about 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub seed: u64,
    pub level: u32,
    pub eye_level: u32,
    pub radii: Vec3,
    pub jaw: f64,
    pub brow: f64,
    pub nose: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_radius: f64,
    /// Shell radius minus eyeball radius at rest.
    pub lid_gap: f64,
    /// Recess of the eye shell below the ellipsoid surface.
    pub socket_depth: f64,
    pub noise: f64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self {
            seed: 0,
            level: 3,
            eye_level: 1,
            radii: [0.82, 1.0, 0.88],
            jaw: 0.04,
            brow: 0.03,
            nose: 0.1,
            eye_spacing: 0.32,
            eye_height: 0.18,
            eye_radius: 0.16,
            lid_gap: 0.04,
            socket_depth: 0.02,
            noise: 0.01,
        }
    }
}

/// Parameter ranges to draw heads from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadDistribution {
    pub radii: [(f64, f64); 3],
    pub jaw: (f64, f64),
    pub brow: (f64, f64),
    pub nose: (f64, f64),
    pub eye_spacing: (f64, f64),
    pub eye_height: (f64, f64),
    pub eye_radius: (f64, f64),
    pub lid_gap: (f64, f64),
    pub socket_depth: (f64, f64),
    pub noise: (f64, f64),
}

impl HeadDistribution {
    /// Heads with full rigs.
    pub const RIGGED: Self = Self {
        radii: [(0.76, 0.88), (0.95, 1.05), (0.82, 0.94)],
        jaw: (0.0, 0.08),
        brow: (0.0, 0.06),
        nose: (0.05, 0.15),
        eye_spacing: (0.29, 0.35),
        eye_height: (0.13, 0.23),
        eye_radius: (0.14, 0.18),
        lid_gap: (0.025, 0.055),
        socket_depth: (0.0, 0.04),
        noise: (0.0, 0.02),
    };

    /// A wider spread, standing in for in-the-wild meshes without rigs.
    pub const BROAD: Self = Self {
        radii: [(0.68, 0.95), (0.9, 1.12), (0.75, 1.0)],
        jaw: (0.0, 0.12),
        brow: (0.0, 0.09),
        nose: (0.02, 0.2),
        eye_spacing: (0.27, 0.38),
        eye_height: (0.1, 0.26),
        eye_radius: (0.12, 0.2),
        lid_gap: (0.02, 0.07),
        socket_depth: (0.0, 0.05),
        noise: (0.0, 0.035),
    };

    /// Draws until the head validates; deterministic per seed.
    pub fn sample(&self, seed: u64, level: u32) -> HeadParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut u = |r: (f64, f64)| if r.1 > r.0 { rng.random_range(r.0..r.1) } else { r.0 };
            let p = HeadParams {
                seed,
                level,
                eye_level: 1,
                radii: [u(self.radii[0]), u(self.radii[1]), u(self.radii[2])],
                jaw: u(self.jaw),
                brow: u(self.brow),
                nose: u(self.nose),
                eye_spacing: u(self.eye_spacing),
                eye_height: u(self.eye_height),
                eye_radius: u(self.eye_radius),
                lid_gap: u(self.lid_gap),
                socket_depth: u(self.socket_depth),
                noise: u(self.noise),
            };
            if p.validate().is_ok() && build_geometry(&p).is_ok() {
                return p;
            }
        }
    }
}

impl HeadParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.radii[0], self.radii[1], self.radii[2], self.eye_radius, self.lid_gap, self.eye_spacing];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::BadParams(format!("radii and eye sizes must be positive: {self:?}")));
        }
        if self.lid_gap <= CLOSED_GAP {
            return Err(Error::BadParams(format!("lid gap {} must exceed {CLOSED_GAP}", self.lid_gap)));
        }
        if self.socket_depth < 0.0 || self.level > 6 || self.eye_level > 4 {
            return Err(Error::BadParams("socket depth or tessellation level out of range".into()));
        }
        Ok(())
    }
}

/// Geometric anchors of the analytic poses, in the head's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadAnchors {
    /// Left eye (+x) first.
    pub eye_centers: [Vec3; 2],
    pub eye_radius: f64,
    pub shell_radius: f64,
    pub hinge: Vec3,
    pub mouth: Vec3,
    /// Mouth-corner height relative to which the jaw region is cut.
    pub mouth_line: f64,
    pub corners: [Vec3; 2],
    pub brows: [Vec3; 2],
    pub chin: Vec3,
    pub nose_tip: Vec3,
}

impl HeadAnchors {
    fn map(&self, t: &NormalizationTransform) -> Self {
        let p = |v: Vec3| t.apply(v);
        Self {
            eye_centers: [p(self.eye_centers[0]), p(self.eye_centers[1])],
            eye_radius: self.eye_radius * t.scale,
            shell_radius: self.shell_radius * t.scale,
            hinge: p(self.hinge),
            mouth: p(self.mouth),
            mouth_line: p([0.0, self.mouth_line, 0.0])[1],
            corners: [p(self.corners[0]), p(self.corners[1])],
            brows: [p(self.brows[0]), p(self.brows[1])],
            chin: p(self.chin),
            nose_tip: p(self.nose_tip),
        }
    }

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let l = |x: Vec3, y: Vec3| math::lerp(x, y, t);
        let s = |x: f64, y: f64| x + (y - x) * t;
        Self {
            eye_centers: [l(a.eye_centers[0], b.eye_centers[0]), l(a.eye_centers[1], b.eye_centers[1])],
            eye_radius: s(a.eye_radius, b.eye_radius),
            shell_radius: s(a.shell_radius, b.shell_radius),
            hinge: l(a.hinge, b.hinge),
            mouth: l(a.mouth, b.mouth),
            mouth_line: s(a.mouth_line, b.mouth_line),
            corners: [l(a.corners[0], b.corners[0]), l(a.corners[1], b.corners[1])],
            brows: [l(a.brows[0], b.brows[0]), l(a.brows[1], b.brows[1])],
            chin: l(a.chin, b.chin),
            nose_tip: l(a.nose_tip, b.nose_tip),
        }
    }
}

/// A generated head: mesh (face, left eye, right eye), its analytic rig and
/// landmark annotation. Landmarks are ordered
/// `[left upper lid, left lower lid, right upper lid, right lower lid,
/// left mouth corner, right mouth corner, chin, nose tip]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHead {
    pub params: HeadParams,
    pub rig: BlendshapeRig,
    pub anchors: HeadAnchors,
    /// `(upper, lower)` positions in the landmark list.
    pub eyelid_pairs: Vec<(usize, usize)>,
    /// Vertices belonging to the face component are `0..face_vertices`.
    pub face_vertices: usize,
}

pub const EYELID_PAIRS: [(usize, usize); 2] = [(0, 1), (2, 3)];

impl SyntheticHead {
    pub fn mesh(&self) -> &TriMesh {
        &self.rig.neutral
    }

    pub fn landmarks(&self) -> &[usize] {
        self.rig.neutral.landmark_indices.as_deref().unwrap_or(&[])
    }

    /// Displacement for an activation vector: a stored pose when one has
    /// exactly this activation, otherwise the weighted sum of base poses.
    pub fn displacement(&self, f: &FacsVector) -> Result<Vec<Vec3>> {
        if let Some(p) = self.rig.poses.iter().find(|p| p.facs.as_slice() == f.as_slice()) {
            return Ok(p.delta.clone());
        }
        let d = DESK_AUS.len();
        if f.dim() != d {
            return Err(Error::ShapeMismatch(format!("activation of length {} for a {d}-unit rig", f.dim())));
        }
        let mut out = vec![[0.0; 3]; self.rig.neutral.vertex_count()];
        for (i, &w) in f.as_slice().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, dd) in out.iter_mut().zip(&self.rig.poses[i].delta) {
                *o = math::add(*o, math::scale(*dd, w));
            }
        }
        Ok(out)
    }

    /// Poses as `(name, activation)` pairs in rig order.
    pub fn pose_set(&self) -> Vec<(String, FacsVector)> {
        self.rig.poses.iter().map(|p| (p.name.clone(), p.facs.clone())).collect()
    }

    /// Rescales into the unit sphere; displacements scale along.
    pub fn normalized(&self) -> Result<Self> {
        let (mesh, t) = self.rig.neutral.normalize_unit_sphere()?;
        let poses = self
            .rig
            .poses
            .iter()
            .map(|p| RigPose { name: p.name.clone(), facs: p.facs.clone(), delta: p.delta.iter().map(|d| t.apply_vector(*d)).collect() })
            .collect();
        let total = NormalizationTransform {
            center: self.rig.transform.inverse(t.center),
            scale: self.rig.transform.scale * t.scale,
        };
        Ok(Self {
            params: self.params.clone(),
            rig: BlendshapeRig::new(mesh, poses, total)?,
            anchors: self.anchors.map(&t),
            eyelid_pairs: self.eyelid_pairs.clone(),
            face_vertices: self.face_vertices,
        })
    }
}

fn front(u: Vec3) -> f64 {
    smoothstep(0.0, 0.5, u[2])
}

fn gauss(x: f64, w: f64) -> f64 {
    (-(x / w) * (x / w)).exp()
}

/// Warped unit direction for a canonical icosphere direction.
fn warp(d: Vec3) -> Vec3 {
    math::normalize(math::add(d, [0.0, 0.0, FRONT_WARP])).unwrap_or([0.0, 0.0, -1.0])
}

struct Geometry {
    face: Vec<Vec3>,
    face_faces: Vec<[usize; 3]>,
    dirs: Vec<Vec3>,
    eye_dirs: Vec<Vec3>,
    eye_faces: Vec<[usize; 3]>,
    anchors: HeadAnchors,
    /// Per face vertex: weight of the pull onto the eye shell, per eye.
    shell_w: Vec<[f64; 2]>,
}

/// Brow, nose and chin offsets along z, plus smooth radial noise.
fn surface(p: &HeadParams, u: Vec3, noise: &[(Vec3, f64, f64)]) -> Vec3 {
    let r = p.radii;
    let mut x = [r[0] * u[0], r[1] * u[1], r[2] * u[2]];
    let f = front(u);
    let brow_y = (p.eye_height + p.eye_radius + p.lid_gap) / r[1] + 0.1;
    x[2] += f * p.brow * gauss(u[1] - brow_y, 0.08) * gauss(u[0], 0.45);
    x[2] += f * p.nose * gauss(u[0], 0.1) * gauss(u[1] + 0.05, 0.16);
    x[2] += f * p.jaw * gauss(u[1] + 0.72, 0.16) * gauss(u[0], 0.35);
    let n: f64 = noise.iter().map(|(k, a, ph)| a * (math::dot(*k, u) + ph).sin()).sum();
    math::add(x, math::scale(u, p.noise * n))
}

fn build_geometry(p: &HeadParams) -> Result<Geometry> {
    p.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(p.seed ^ 0x6865_6164);
    let noise: Vec<(Vec3, f64, f64)> = (0..4)
        .map(|_| {
            let k = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            (k, rng.random_range(0.3..1.0), rng.random_range(0.0..core::f64::consts::TAU))
        })
        .collect();
    let (dirs, face_faces) = icosphere_directions(p.level);
    let mut face: Vec<Vec3> = dirs.iter().map(|&d| surface(p, warp(d), &noise)).collect();

    let r = p.radii;
    let shell = p.eye_radius + p.lid_gap;
    let mut eye_centers = [[0.0; 3]; 2];
    for (k, sx) in [1.0, -1.0].into_iter().enumerate() {
        let (ex, ey) = (sx * p.eye_spacing, p.eye_height);
        let q = 1.0 - (ex / r[0]).powi(2) - (ey / r[1]).powi(2);
        if q <= 0.05 {
            return Err(Error::BadParams("eye lies outside the head outline".into()));
        }
        let u = [ex / r[0], ey / r[1], q.sqrt()];
        let zs = surface(p, u, &noise)[2];
        eye_centers[k] = [ex, ey, zs - p.socket_depth - shell];
    }
    // pull the surface around each eye onto its shell
    let mut shell_w = vec![[0.0; 2]; face.len()];
    for (i, x) in face.iter_mut().enumerate() {
        for (k, c) in eye_centers.iter().enumerate() {
            let v = math::sub(*x, *c);
            let rho = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let w = (1.0 - smoothstep(0.8 * shell, 1.7 * shell, rho)) * smoothstep(0.0, 0.4 * shell, v[2]);
            if w > 0.0 {
                let len = math::norm(v);
                // never leave a vertex inside the shell, which a partial
                // pull can do on fine tessellations
                let nl = ((1.0 - w) * len + w * shell).max(shell);
                *x = math::add(*c, math::scale(v, nl / len));
            }
            shell_w[i][k] = w;
        }
    }
    for c in &eye_centers {
        let closest = face.iter().map(|x| math::norm(math::sub(*x, *c))).fold(f64::INFINITY, f64::min);
        if closest < shell - 1e-9 {
            return Err(Error::BadParams(format!("face surface passes {closest:.4} from an eye centre, inside the shell {shell:.4}")));
        }
    }
    let (eye_dirs, eye_faces) = icosphere_directions(p.eye_level);

    let mouth_line = -0.38 * r[1];
    let mouth_u = [0.0, mouth_line / r[1], (1.0 - (mouth_line / r[1]).powi(2)).sqrt()];
    let mouth = surface(p, mouth_u, &noise);
    let corner = |sx: f64| {
        let x = sx * 0.24 * r[0];
        let u = [x / r[0], mouth_u[1], (1.0 - (x / r[0]).powi(2) - mouth_u[1].powi(2)).sqrt()];
        surface(p, u, &noise)
    };
    let brow = |c: Vec3| {
        let x = c[0] * 0.55;
        let y = c[1] + shell + 0.1;
        let u = [x / r[0], y / r[1], (1.0 - (x / r[0]).powi(2) - (y / r[1]).powi(2)).max(0.0).sqrt()];
        surface(p, u, &noise)
    };
    let chin_u = [0.0, -0.8, 0.6];
    let nose_u = [0.0, -0.05, 1.0];
    let anchors = HeadAnchors {
        eye_centers,
        eye_radius: p.eye_radius,
        shell_radius: shell,
        hinge: [0.0, mouth_line + 0.12 * r[1], -0.15 * r[2]],
        mouth,
        mouth_line,
        corners: [corner(1.0), corner(-1.0)],
        brows: [brow(eye_centers[0]), brow(eye_centers[1])],
        chin: surface(p, chin_u, &noise),
        nose_tip: surface(p, nose_u, &noise),
    };
    Ok(Geometry { face, face_faces, dirs, eye_dirs, eye_faces, anchors, shell_w })
}

/// Lid rotation profile over shell elevation: the upper lid comes down, the
/// lower lid comes up a little, and the opening between them folds shut
/// without overlap.
fn lid_angle(psi: f64) -> f64 {
    let open = UPPER_LID - LOWER_LID;
    let total = LID_CLOSURE * open;
    let (down, up) = (0.8 * total, 0.2 * total);
    if psi >= UPPER_LID {
        -down * (1.0 - smoothstep(UPPER_LID, LID_TOP, psi))
    } else if psi >= LOWER_LID {
        up + (psi - LOWER_LID) / open * (-down - up)
    } else {
        up * smoothstep(LID_BOTTOM, LOWER_LID, psi)
    }
}

/// How much of the lid tightening a vertex at elevation `psi` takes.
fn lid_tighten(psi: f64) -> f64 {
    smoothstep(LID_BOTTOM, LOWER_LID, psi) * (1.0 - smoothstep(UPPER_LID, LID_TOP, psi))
}

/// One base deformation applied to `x`, with region weights taken from the
/// neutral position `p0`. `sx` selects the side for lateral units.
#[derive(Debug, Clone, Copy)]
enum Motion {
    Jaw,
    Pucker,
    EyeClose(usize),
    Look(Vec3, f64),
    Brow(usize),
    Corner(usize),
}

fn motion_of(au: usize) -> Motion {
    let look = LOOK_ANGLE_DEG.to_radians();
    match au {
        facs::JAW_DROP => Motion::Jaw,
        facs::PUCKER => Motion::Pucker,
        facs::LEFT_EYE_CLOSED => Motion::EyeClose(0),
        facs::RIGHT_EYE_CLOSED => Motion::EyeClose(1),
        // the subject's left is +x; turning the front (+z) towards +x is a
        // positive rotation about +y
        facs::EYES_LOOK_LEFT => Motion::Look([0.0, 1.0, 0.0], look),
        facs::EYES_LOOK_RIGHT => Motion::Look([0.0, 1.0, 0.0], -look),
        facs::EYES_LOOK_UP => Motion::Look([1.0, 0.0, 0.0], -look),
        facs::EYES_LOOK_DOWN => Motion::Look([1.0, 0.0, 0.0], look),
        facs::LEFT_INNER_BROW_RAISER => Motion::Brow(0),
        facs::RIGHT_INNER_BROW_RAISER => Motion::Brow(1),
        facs::LEFT_LIP_CORNER_PULLER => Motion::Corner(0),
        _ => Motion::Corner(1),
    }
}

/// Vertex context for the motions.
#[derive(Clone, Copy)]
struct Site {
    p0: Vec3,
    /// Face component or eye `0` / `1`.
    part: Part,
    shell_w: [f64; 2],
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Face,
    Eye(usize),
}

fn apply(m: Motion, a: &HeadAnchors, s: &Site, x: Vec3) -> Vec3 {
    let p0 = s.p0;
    match (m, s.part) {
        (Motion::Look(axis, angle), Part::Eye(k)) => math::rotate_about(x, a.eye_centers[k], axis, angle),
        (Motion::Look(..), Part::Face) => x,
        (_, Part::Eye(_)) => x,
        (Motion::Jaw, Part::Face) => {
            let w = smoothstep(a.mouth_line + 0.06, a.mouth_line - 0.06, p0[1]) * smoothstep(a.hinge[2] - 0.15, a.hinge[2] + 0.25, p0[2]);
            if w == 0.0 {
                return x;
            }
            math::rotate_about(x, a.hinge, [1.0, 0.0, 0.0], w * JAW_ANGLE_DEG.to_radians())
        }
        (Motion::Pucker, Part::Face) => {
            let dx = p0[0] - a.mouth[0];
            let dy = p0[1] - a.mouth[1];
            let w = gauss((dx * dx + dy * dy).sqrt(), 0.22) * smoothstep(a.mouth[2] - 0.35, a.mouth[2] - 0.1, p0[2]);
            math::add(x, math::scale([-0.35 * dx, -0.35 * dy, 0.06], w))
        }
        (Motion::Corner(k), Part::Face) => {
            let c = a.corners[k];
            let sx = if k == 0 { 1.0 } else { -1.0 };
            let d = math::norm(math::sub(p0, c));
            let w = gauss(d, 0.14) * smoothstep(c[2] - 0.3, c[2] - 0.05, p0[2]);
            math::add(x, math::scale([0.04 * sx, 0.06, -0.015], w))
        }
        (Motion::Brow(k), Part::Face) => {
            let b = a.brows[k];
            let dx = p0[0] - b[0];
            let dy = p0[1] - b[1];
            let w = gauss((dx * dx + dy * dy).sqrt(), 0.16) * smoothstep(b[2] - 0.3, b[2] - 0.05, p0[2]) * (1.0 - s.shell_w[0]) * (1.0 - s.shell_w[1]);
            math::add(x, [0.0, 0.05 * w, 0.0])
        }
        (Motion::EyeClose(k), Part::Face) => {
            let c = a.eye_centers[k];
            let rs = a.shell_radius;
            let v0 = math::sub(p0, c);
            let r0 = math::norm(v0);
            let w = (1.0 - smoothstep(0.55 * rs, 1.15 * rs, v0[0].abs()))
                * smoothstep(0.0, 0.3 * rs, v0[2])
                * (1.0 - smoothstep(1.15 * rs, 1.7 * rs, r0));
            if w == 0.0 {
                return x;
            }
            let psi = v0[1].atan2(v0[2]);
            // rotation about the eye's x axis raises the elevation; the
            // radial pull stops CLOSED_GAP short of the eyeball
            let y = math::rotate_about(x, c, [1.0, 0.0, 0.0], -w * lid_angle(psi));
            let v = math::sub(y, c);
            let r = math::norm(v);
            let pull = w * lid_tighten(psi) * (rs - a.eye_radius - CLOSED_GAP);
            math::add(c, math::scale(v, (r - pull) / r))
        }
    }
}

/// Pairs of base units combined into corrective poses.
pub const CORRECTIVES: [(usize, usize); 8] = [
    (facs::JAW_DROP, facs::PUCKER),
    (facs::JAW_DROP, facs::LEFT_LIP_CORNER_PULLER),
    (facs::JAW_DROP, facs::RIGHT_LIP_CORNER_PULLER),
    (facs::LEFT_EYE_CLOSED, facs::RIGHT_EYE_CLOSED),
    (facs::EYES_LOOK_LEFT, facs::EYES_LOOK_UP),
    (facs::EYES_LOOK_RIGHT, facs::EYES_LOOK_DOWN),
    (facs::LEFT_INNER_BROW_RAISER, facs::RIGHT_INNER_BROW_RAISER),
    (facs::LEFT_LIP_CORNER_PULLER, facs::RIGHT_LIP_CORNER_PULLER),
];

/// Rig pose names: the base units, then `"<a>+<b>"` correctives.
pub fn pose_names() -> Vec<String> {
    let mut v: Vec<String> = DESK_AUS.iter().map(facs::display_name).collect();
    v.extend(CORRECTIVES.iter().map(|&(a, b)| format!("{}+{}", DESK_AUS[a].short, DESK_AUS[b].short)));
    v
}

/// Activation vectors of the rig poses, in rig order.
pub fn pose_activations() -> Vec<FacsVector> {
    let d = DESK_AUS.len();
    let mut v: Vec<FacsVector> = (0..d).map(|i| FacsVector::multi_hot(d, &[i]).expect("in range")).collect();
    v.extend(CORRECTIVES.iter().map(|&(a, b)| FacsVector::multi_hot(d, &[a, b]).expect("in range")));
    v
}

fn eyelid_targets(a: &HeadAnchors) -> [Vec3; 4] {
    let t = |k: usize, psi: f64| math::add(a.eye_centers[k], math::scale([0.0, psi.sin(), psi.cos()], a.shell_radius));
    [t(0, UPPER_LID), t(0, LOWER_LID), t(1, UPPER_LID), t(1, LOWER_LID)]
}

/// Landmark indices shared by every head of a tessellation level, picked on
/// the default head.
pub fn canonical_landmarks(level: u32) -> Result<Vec<usize>> {
    let p = HeadParams { level, ..Default::default() };
    let g = build_geometry(&p)?;
    let a = &g.anchors;
    let lids = eyelid_targets(a);
    let targets = [lids[0], lids[1], lids[2], lids[3], a.corners[0], a.corners[1], a.chin, a.nose_tip];
    let face = TriMesh::new(g.face.clone(), g.face_faces.clone())?;
    let idx = face.nearest_vertices(&targets);
    for i in 0..idx.len() {
        if idx[..i].contains(&idx[i]) {
            return Err(Error::BadParams(format!("landmarks collapse at level {level}")));
        }
    }
    Ok(idx)
}

fn sphere_uv(d: Vec3) -> [f64; 2] {
    [0.5 + d[0].atan2(d[2]) / core::f64::consts::TAU, 0.5 + d[1].clamp(-1.0, 1.0).asin() / core::f64::consts::PI]
}

/// Builds a head and its analytic rig, normalized into the unit sphere.
pub fn make_head(p: &HeadParams) -> Result<SyntheticHead> {
    let g = build_geometry(p)?;
    let a = g.anchors;
    let nf = g.face.len();
    let mut verts = g.face.clone();
    let mut faces = g.face_faces.clone();
    let mut uv: Vec<[f64; 2]> = g.dirs.iter().map(|&d| sphere_uv(d)).map(|[u, v]| [0.1 + 0.8 * u, 0.1 + 0.8 * v]).collect();
    let mut sites: Vec<Site> = g.face.iter().zip(&g.shell_w).map(|(&p0, &w)| Site { p0, part: Part::Face, shell_w: w }).collect();
    for k in 0..2 {
        let off = verts.len();
        for &d in &g.eye_dirs {
            let x = math::add(a.eye_centers[k], math::scale(d, a.eye_radius));
            verts.push(x);
            let [u, v] = sphere_uv(d);
            uv.push([0.1 * u + if k == 0 { 0.0 } else { 0.9 }, 0.1 * v]);
            sites.push(Site { p0: x, part: Part::Eye(k), shell_w: [0.0; 2] });
        }
        faces.extend(g.eye_faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }
    let lmk = canonical_landmarks(p.level)?;
    let mesh = TriMesh::new(verts, faces)?.with_uv(uv)?.with_landmarks(lmk)?;
    if mesh.component_count() != 3 {
        return Err(Error::BadParams(format!("expected 3 components, got {}", mesh.component_count())));
    }

    let names = pose_names();
    let acts = pose_activations();
    let mut poses = Vec::with_capacity(names.len());
    for (name, f) in names.into_iter().zip(acts) {
        let active = f.active();
        let delta = sites
            .iter()
            .map(|s| {
                // correctives compose their units; later units act on the
                // result of earlier ones
                let mut x = s.p0;
                for &u in active.iter().rev() {
                    x = apply(motion_of(u), &a, s, x);
                }
                math::sub(x, s.p0)
            })
            .collect();
        poses.push(RigPose { name, facs: f, delta });
    }
    let rig = BlendshapeRig::new(mesh, poses, NormalizationTransform::IDENTITY)?;
    let head = SyntheticHead { params: p.clone(), rig, anchors: a, eyelid_pairs: EYELID_PAIRS.to_vec(), face_vertices: nf };
    head.normalized()
}

/// Linear blend of two heads of equal topology: vertices, displacement
/// fields and anchors. Landmark indices must agree.
pub fn interpolate_heads(a: &SyntheticHead, b: &SyntheticHead, alpha: f64) -> Result<SyntheticHead> {
    let (ma, mb) = (&a.rig.neutral, &b.rig.neutral);
    if ma.faces != mb.faces || ma.vertex_count() != mb.vertex_count() {
        return Err(Error::TopologyMismatch("heads differ in connectivity".into()));
    }
    if ma.landmark_indices != mb.landmark_indices || a.rig.pose_count() != b.rig.pose_count() {
        return Err(Error::TopologyMismatch("heads differ in landmarks or pose tables".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::BadConfig(format!("interpolation weight {alpha} outside [0, 1]")));
    }
    let l = |x: &[Vec3], y: &[Vec3]| -> Vec<Vec3> { x.iter().zip(y).map(|(p, q)| math::lerp(*p, *q, alpha)).collect() };
    let mesh = ma.with_vertices(l(&ma.vertices, &mb.vertices))?;
    let mut poses = Vec::with_capacity(a.rig.pose_count());
    for (pa, pb) in a.rig.poses.iter().zip(&b.rig.poses) {
        if pa.facs != pb.facs {
            return Err(Error::TopologyMismatch(format!("pose {} vs {}", pa.name, pb.name)));
        }
        poses.push(RigPose { name: pa.name.clone(), facs: pa.facs.clone(), delta: l(&pa.delta, &pb.delta) });
    }
    let mut params = a.params.clone();
    params.seed = a.params.seed ^ b.params.seed.rotate_left(17);
    Ok(SyntheticHead {
        params,
        rig: BlendshapeRig::new(mesh, poses, NormalizationTransform::IDENTITY)?,
        anchors: HeadAnchors::lerp(&a.anchors, &b.anchors, alpha),
        eyelid_pairs: a.eyelid_pairs.clone(),
        face_vertices: a.face_vertices,
    })
}

/// Image, mask, flow and landmarks of one rig pose, rendered from the exact
/// posed geometry.
pub fn render_supervision(head: &SyntheticHead, pose: usize, s: &RenderSettings) -> Result<Supervision2D> {
    let m = head.mesh();
    let posed = head.rig.posed(pose);
    supervision_for(m, &posed, s)
}

/// Supervision of `posed` against the neutral of `m`.
pub fn supervision_for(m: &TriMesh, posed: &[Vec3], s: &RenderSettings) -> Result<Supervision2D> {
    let t = render::render_targets(&m.vertices, posed, &m.faces, s)?;
    let landmarks = match &m.landmark_indices {
        Some(l) => Some(render::project_landmarks(posed, l, s)?),
        None => None,
    };
    Ok(Supervision2D { width: t.width, height: t.height, image: t.image, mask: t.mask, flow: t.flow, landmarks })
}
