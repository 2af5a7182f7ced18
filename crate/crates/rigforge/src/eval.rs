//! Held-out evaluation against the analytic rigs.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use rigforge_core::facs;
use rigforge_core::math::{self, Vec3};
use rigforge_core::network::{self, MeshInput, ModelParams};
use rigforge_core::rig::{self, MaeStats};
use rigforge_core::synth::SyntheticHead;
use rigforge_core::{FacsVector, TriMesh};
use serde::{Deserialize, Serialize};

use crate::dataset::{head_dir, Dataset, Role, Split};
use crate::error::{Error, Result};
use crate::formats;

/// Training variants compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoGlobal,
    #[serde(rename = "no-2d", alias = "no2d")]
    No2d,
    NoUnrigged,
    NoFlow,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoGlobal, Ablation::No2d, Ablation::NoUnrigged, Ablation::NoFlow];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGlobal => "no-global",
            Ablation::No2d => "no-2d",
            Ablation::NoUnrigged => "no-unrigged",
            Ablation::NoFlow => "no-flow",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| Error::BadConfig(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub name: String,
    pub mae: f64,
    pub q95: f64,
    pub penetration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub id: String,
    pub role: Role,
    pub mae: f64,
    pub q95: f64,
    pub penetration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub split: Split,
    pub heads: usize,
    pub poses: usize,
    /// Millimetres in the unit-sphere frame.
    pub mae: f64,
    pub q95: f64,
    /// Mean fraction of inner-component vertices outside the face, over
    /// heads and poses.
    pub penetration: f64,
    pub mae_rigged: Option<f64>,
    pub mae_unrigged: Option<f64>,
    /// Mean eyeball displacement over mean face displacement under the gaze
    /// poses.
    pub gaze_eye_to_face: f64,
    /// Mean predicted displacement for the all-zero activation relative to
    /// the mean ground-truth pose displacement.
    pub neutral_ratio: f64,
    pub per_pose: Vec<PoseMetrics>,
    pub per_head: Vec<HeadMetrics>,
}

impl EvalReport {
    /// Structural checks on a report read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(format!("eval report: {m}")));
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if !nonneg(self.mae) || !nonneg(self.q95) || !frac(self.penetration) {
            return bad("metrics out of range");
        }
        if self.per_pose.len() != self.poses || self.per_head.len() != self.heads {
            return bad("breakdown sizes disagree with counts");
        }
        if self.per_pose.iter().any(|p| !nonneg(p.mae) || !nonneg(p.q95) || !frac(p.penetration)) {
            return bad("per-pose metrics out of range");
        }
        if self.per_head.iter().any(|h| !nonneg(h.mae) || !nonneg(h.q95) || !frac(h.penetration)) {
            return bad("per-head metrics out of range");
        }
        if [self.mae_rigged, self.mae_unrigged].iter().flatten().any(|x| !nonneg(*x)) || !self.gaze_eye_to_face.is_finite() || !nonneg(self.neutral_ratio) {
            return bad("summary ratios out of range");
        }
        Ok(())
    }
}

/// Per-head predictions and ground truth, `poses x vertices`.
pub struct HeadEval<'a> {
    pub id: String,
    pub role: Role,
    pub mesh: &'a TriMesh,
    pub pred: Vec<Vec<Vec3>>,
    pub gt: Vec<Vec<Vec3>>,
    pub pred_neutral: Vec<Vec3>,
}

fn mean_norm(v: impl Iterator<Item = Vec3>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), d| (s + math::norm(d), n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores predictions against ground truth. Pose names and activations
/// come from `poses`.
pub fn score(ablation: Ablation, split: Split, poses: &[(String, FacsVector)], heads: &[HeadEval<'_>]) -> Result<EvalReport> {
    let np = poses.len();
    let mut all = Vec::new();
    let mut by_role: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut by_pose: Vec<Vec<f64>> = vec![Vec::new(); np];
    let mut pen_pose = vec![0.0; np];
    let mut per_head = Vec::with_capacity(heads.len());
    let mut gaze = (0.0, 0.0);
    let mut neutral = (0.0, 0.0);
    let gaze_units = [facs::EYES_LOOK_LEFT, facs::EYES_LOOK_RIGHT, facs::EYES_LOOK_UP, facs::EYES_LOOK_DOWN];
    let pens: Vec<Vec<f64>> = heads
        .par_iter()
        .map(|h| {
            h.pred
                .iter()
                .map(|d| {
                    let posed: Vec<Vec3> = h.mesh.vertices.iter().zip(d).map(|(v, d)| math::add(*v, *d)).collect();
                    rig::metric_penetration(&h.mesh.with_vertices(posed)?)
                })
                .collect::<rigforge_core::Result<Vec<f64>>>()
        })
        .collect::<rigforge_core::Result<_>>()?;
    for (h, pen) in heads.iter().zip(&pens) {
        if h.pred.len() != np || h.gt.len() != np {
            return Err(Error::Core(rigforge_core::Error::TopologyMismatch(format!("{}: {} predicted, {} true, {np} poses", h.id, h.pred.len(), h.gt.len()))));
        }
        let mut errs = Vec::new();
        for j in 0..np {
            let e = rig::vertex_errors_mm(&h.pred[j], &h.gt[j])?;
            by_pose[j].extend_from_slice(&e);
            errs.extend_from_slice(&e);
            pen_pose[j] += pen[j];
        }
        let outer = rig::outer_component(h.mesh);
        let is_face = |i: usize| h.mesh.component_id[i] == outer;
        for (j, (_, f)) in poses.iter().enumerate() {
            let act = f.active();
            if act.len() == 1 && gaze_units.contains(&act[0]) && f.dim() == facs::DESK_AUS.len() {
                let d = &h.pred[j];
                gaze.0 += mean_norm((0..d.len()).filter(|&i| !is_face(i)).map(|i| d[i]));
                gaze.1 += mean_norm((0..d.len()).filter(|&i| is_face(i)).map(|i| d[i]));
            }
        }
        neutral.0 += mean_norm(h.pred_neutral.iter().copied());
        neutral.1 += mean_norm(h.gt.iter().flatten().copied());
        let st = rig::stats_of(errs.clone());
        per_head.push(HeadMetrics { id: h.id.clone(), role: h.role, mae: st.mae, q95: st.q95, penetration: pen.iter().sum::<f64>() / np.max(1) as f64 });
        by_role[(h.role == Role::Unrigged) as usize].extend_from_slice(&errs);
        all.extend(errs);
    }
    let nh = heads.len().max(1) as f64;
    let MaeStats { mae, q95 } = rig::stats_of(all);
    let role_mae = |e: &Vec<f64>| (!e.is_empty()).then(|| rig::stats_of(e.clone()).mae);
    let per_pose = poses
        .iter()
        .zip(by_pose)
        .zip(&pen_pose)
        .map(|(((name, _), e), p)| {
            let st = rig::stats_of(e);
            PoseMetrics { name: name.clone(), mae: st.mae, q95: st.q95, penetration: p / nh }
        })
        .collect();
    Ok(EvalReport {
        ablation,
        split,
        heads: heads.len(),
        poses: np,
        mae,
        q95,
        penetration: pen_pose.iter().sum::<f64>() / (nh * np.max(1) as f64),
        mae_rigged: role_mae(&by_role[0]),
        mae_unrigged: role_mae(&by_role[1]),
        gaze_eye_to_face: if gaze.1 > 0.0 { gaze.0 / gaze.1 } else if gaze.0 > 0.0 { f64::MAX } else { 0.0 },
        neutral_ratio: if neutral.1 > 0.0 { neutral.0 / neutral.1 } else { 0.0 },
        per_pose,
        per_head,
    })
}

/// Predicted displacements for every pose, plus the all-zero activation.
pub fn predict(params: &ModelParams, mesh: &TriMesh, ops: &rigforge_core::SurfaceOperators, poses: &[FacsVector]) -> Result<(Vec<Vec<Vec3>>, Vec<Vec3>)> {
    let input = MeshInput::new(mesh, ops)?;
    let mut all: Vec<FacsVector> = poses.to_vec();
    all.push(FacsVector::zeros(params.config.facs_dim));
    let mut out = network::forward_many(params, &input, &all)?;
    let neutral = out.pop().expect("zero pose");
    Ok((out, neutral))
}

/// Evaluates `params` on one split of a dataset. Ground truth is rebuilt
/// from each head's recipe, never read from training files.
pub fn evaluate(params: &ModelParams, ds: &Dataset, split: Split, ablation: Ablation) -> Result<EvalReport> {
    let m = &ds.manifest;
    let poses: Vec<(String, FacsVector)> = m.poses.iter().map(|p| Ok((p.name.clone(), p.facs_vector()?))).collect::<Result<_>>()?;
    let facs: Vec<FacsVector> = poses.iter().map(|p| p.1.clone()).collect();
    let entries = m.select(None, split);
    let built: Vec<(SyntheticHead, rigforge_core::SurfaceOperators)> = entries
        .iter()
        .map(|e| {
            let head = e.recipe.build()?;
            let cache = head_dir(&ds.root, &e.id).join("operators.rfop");
            let ops = formats::operators_cached(Some(&cache), head.mesh(), params.config.k)?;
            Ok((head, ops))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<(Vec<Vec<Vec3>>, Vec<Vec3>)> = built.par_iter().map(|(h, ops)| predict(params, h.mesh(), ops, &facs)).collect::<Result<_>>()?;
    let heads: Vec<HeadEval<'_>> = entries
        .iter()
        .zip(&built)
        .zip(preds)
        .map(|((e, (h, _)), (pred, pred_neutral))| HeadEval {
            id: e.id.clone(),
            role: e.role,
            mesh: h.mesh(),
            pred,
            gt: h.rig.poses.iter().map(|p| p.delta.clone()).collect(),
            pred_neutral,
        })
        .collect();
    score(ablation, split, &poses, &heads)
}

pub fn evaluate_checkpoint(ckpt: &Path, data: &Path, split: Split, ablation: Ablation) -> Result<EvalReport> {
    let ck = formats::load_checkpoint(ckpt)?;
    if (ablation == Ablation::NoGlobal) == ck.params.config.use_global {
        return Err(Error::CheckpointMismatch(format!(
            "ablation {ablation} does not match a model with use_global = {}",
            ck.params.config.use_global
        )));
    }
    let ds = Dataset::open(data)?;
    evaluate(&ck.params, &ds, split, ablation)
}
