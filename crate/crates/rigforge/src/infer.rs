//! Rig export from a trained checkpoint, and posing of exported rigs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rigforge_core::rig::{build_rig, BlendshapeRig, RigWeights};
use rigforge_core::{FacsVector, SurfaceOperators};
use serde::{Deserialize, Serialize};

use crate::dataset::pose_table;
use crate::error::{Error, Result};
use crate::{formats, fsutil, obj, rigfile};

/// Entry of a pose-set file: a JSON array of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub name: String,
    pub facs: Vec<f64>,
}

/// The synthetic pose table for 12-unit models, one-hot units otherwise.
pub fn default_poses(facs_dim: usize) -> Vec<(String, FacsVector)> {
    if facs_dim == rigforge_core::facs::DESK_AUS.len() {
        return pose_table().into_iter().map(|p| (p.name, FacsVector::new(p.facs).expect("table activations in range"))).collect();
    }
    (0..facs_dim).map(|i| (format!("au{i:02}"), FacsVector::multi_hot(facs_dim, &[i]).expect("in range"))).collect()
}

pub fn load_pose_set(path: &Path, facs_dim: usize) -> Result<Vec<(String, FacsVector)>> {
    let specs: Vec<PoseSpec> = fsutil::read_json(path)?;
    if specs.is_empty() {
        return Err(Error::BadConfig(format!("{}: empty pose set", path.display())));
    }
    specs
        .into_iter()
        .map(|p| {
            if p.facs.len() != facs_dim {
                return Err(Error::CheckpointMismatch(format!("pose {} has {} activations, model takes {facs_dim}", p.name, p.facs.len())));
            }
            Ok((p.name, FacsVector::new(p.facs)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferTiming {
    pub load: Duration,
    pub precompute: Duration,
    pub forward: Duration,
    pub save: Duration,
}

/// OBJ in, `.rfrig` out: normalize, build operators, one forward pass per
/// pose. Output bytes depend only on the inputs.
pub fn infer(ckpt: &Path, mesh_path: &Path, pose_set: Option<&Path>, out: &Path) -> Result<(BlendshapeRig, InferTiming)> {
    let t0 = Instant::now();
    let ck = formats::load_checkpoint(ckpt)?;
    let (mesh, _) = obj::load_mesh_with_landmarks(mesh_path)?;
    let poses = match pose_set {
        Some(p) => load_pose_set(p, ck.params.config.facs_dim)?,
        None => default_poses(ck.params.config.facs_dim),
    };
    let t1 = Instant::now();
    let (norm, transform) = mesh.normalize_unit_sphere()?;
    let ops = SurfaceOperators::precompute(&norm, ck.params.config.k)?;
    let t2 = Instant::now();
    let rig = build_rig(&norm, &ops, &ck.params, &poses, transform)?;
    let t3 = Instant::now();
    rigfile::save_rig(out, &rig)?;
    let t4 = Instant::now();
    Ok((rig, InferTiming { load: t1 - t0, precompute: t2 - t1, forward: t3 - t2, save: t4 - t3 }))
}

/// Blend weights by pose name. Names missing from the map weigh zero.
pub fn weights_from_map(rig: &BlendshapeRig, map: &BTreeMap<String, f64>) -> Result<RigWeights> {
    let mut w = RigWeights::zeros(rig.pose_count());
    for (name, &v) in map {
        let j = rig.index_of(name).ok_or_else(|| Error::BadConfig(format!("rig has no pose named {name:?}")))?;
        if !v.is_finite() {
            return Err(Error::BadConfig(format!("weight of {name:?} is not finite")));
        }
        w.0[j] = v;
    }
    Ok(w)
}

/// Evaluates a saved rig under a `{name: weight}` file and writes the posed
/// mesh as OBJ, in the rig's normalized frame.
pub fn pose(rig_path: &Path, weights: &Path, out: &Path) -> Result<()> {
    let rig = rigfile::load_rig(rig_path)?;
    let map: BTreeMap<String, f64> = fsutil::read_json(weights)?;
    let w = weights_from_map(&rig, &map)?;
    let posed = rig.evaluate(&w)?;
    obj::save_obj(out, &posed)
}

/// Computes and caches operators for a mesh, after normalization.
pub fn precompute(mesh_path: &Path, k: Option<usize>, out: &Path) -> Result<SurfaceOperators> {
    let mesh = obj::load_obj(mesh_path)?;
    let (norm, _) = mesh.normalize_unit_sphere()?;
    let ops = SurfaceOperators::precompute(&norm, k)?;
    formats::save_operators(out, &ops, &norm)?;
    Ok(ops)
}
