//! `.rfrig`: a JSON manifest followed by one little-endian blob of f32
//! vertex data and u32 faces, sealed with a CRC32. Byte layout is described
//! in `docs/rfrig.md`.

use std::path::Path;

use rigforge_core::math::Vec3;
use rigforge_core::rig::{BlendshapeRig, RigPose};
use rigforge_core::{FacsVector, NormalizationTransform, TriMesh};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"RFRG";
pub const VERSION: u32 = 1;
/// Bytes before the manifest: magic, version, manifest length.
pub const HEADER_BYTES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub name: String,
    pub facs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    /// Byte offset from the start of the blob.
    pub offset: usize,
    /// Number of scalars (f32 or u32).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub neutral: Section,
    pub faces: Section,
    pub deltas: Section,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uv: Option<Section>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub vertex_count: usize,
    pub face_count: usize,
    pub pose_count: usize,
    pub poses: Vec<PoseEntry>,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<usize>>,
    pub blob_bytes: usize,
    pub layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

/// Rounds every stored quantity to what the file can hold.
pub fn quantize(rig: &BlendshapeRig) -> Result<BlendshapeRig> {
    let q = |v: &[Vec3]| -> Vec<Vec3> { v.iter().map(|p| p.map(|x| x as f32 as f64)).collect() };
    let mut neutral = rig.neutral.with_vertices(q(&rig.neutral.vertices))?;
    if let Some(uv) = &neutral.uv {
        neutral.uv = Some(uv.iter().map(|t| t.map(|x| x as f32 as f64)).collect());
    }
    let poses = rig.poses.iter().map(|p| RigPose { name: p.name.clone(), facs: p.facs.clone(), delta: q(&p.delta) }).collect();
    Ok(BlendshapeRig::new(neutral, poses, rig.transform)?)
}

pub fn encode_rig(rig: &BlendshapeRig) -> Result<Vec<u8>> {
    let n = rig.neutral.vertex_count();
    let m = rig.neutral.face_count();
    let np = rig.poses.len();
    if np == 0 {
        return Err(Error::Core(rigforge_core::Error::BadConfig("a rig needs at least one pose".into())));
    }
    let mut layout = Layout {
        neutral: Section { offset: 0, count: 3 * n },
        faces: Section { offset: 12 * n, count: 3 * m },
        deltas: Section { offset: 12 * n + 12 * m, count: 3 * n * np },
        uv: None,
    };
    let mut blob_bytes = layout.deltas.offset + 12 * n * np;
    if rig.neutral.uv.is_some() {
        layout.uv = Some(Section { offset: blob_bytes, count: 2 * n });
        blob_bytes += 8 * n;
    }
    let manifest = Manifest {
        format: "rfrig".into(),
        version: VERSION,
        vertex_count: n,
        face_count: m,
        pose_count: np,
        poses: rig.poses.iter().map(|p| PoseEntry { name: p.name.clone(), facs: p.facs.as_slice().to_vec() }).collect(),
        normalization: Normalization { center: rig.transform.center, scale: rig.transform.scale },
        landmarks: rig.neutral.landmark_indices.clone(),
        blob_bytes,
        layout,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(json.len() as u32);
    w.bytes(&json);
    w.pad_to(4);
    let flat = |v: &[Vec3]| v.iter().flat_map(|p| p.map(|x| x as f32)).collect::<Vec<f32>>();
    w.f32s(flat(&rig.neutral.vertices));
    for f in &rig.neutral.faces {
        for &i in f {
            w.u32(i as u32);
        }
    }
    for p in &rig.poses {
        w.f32s(flat(&p.delta));
    }
    if let Some(uv) = &rig.neutral.uv {
        w.f32s(uv.iter().flat_map(|t| t.map(|x| x as f32)));
    }
    Ok(w.finish())
}

fn section_f32(blob: &[u8], s: Section, path: &Path) -> Result<Vec<f32>> {
    let end = s.offset.checked_add(s.count * 4).filter(|&e| e <= blob.len() && s.offset % 4 == 0);
    let end = end.ok_or_else(|| Error::Malformed { path: path.to_path_buf(), msg: "section outside blob".into() })?;
    Ok(blob[s.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn vec3s(v: &[f32]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()
}

pub fn decode_manifest(bytes: &[u8], path: &Path) -> Result<(Manifest, usize)> {
    let body = binio::open(bytes, path, MAGIC, "rfrig", VERSION)?;
    let mut r = Reader::new(body, path);
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| r.malformed(e.to_string()))?;
    r.skip_to(4, 8)?;
    Ok((manifest, 8 + r.position()))
}

pub fn decode_rig(bytes: &[u8], path: &Path) -> Result<BlendshapeRig> {
    let (man, blob_start) = decode_manifest(bytes, path)?;
    let bad = |msg: &str| Error::Malformed { path: path.to_path_buf(), msg: msg.into() };
    let blob = &bytes[blob_start..bytes.len() - 4];
    if blob.len() != man.blob_bytes {
        return Err(bad("blob size disagrees with manifest"));
    }
    let (n, m, np) = (man.vertex_count, man.face_count, man.pose_count);
    if man.poses.len() != np || man.layout.neutral.count != 3 * n || man.layout.faces.count != 3 * m || man.layout.deltas.count != 3 * n * np {
        return Err(bad("section counts disagree with manifest"));
    }
    let neutral = vec3s(&section_f32(blob, man.layout.neutral, path)?);
    let fs = &blob[man.layout.faces.offset..];
    if fs.len() < 12 * m {
        return Err(bad("face section outside blob"));
    }
    let faces: Vec<[usize; 3]> = fs[..12 * m]
        .chunks_exact(12)
        .map(|c| {
            let i = |k: usize| u32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
            [i(0), i(1), i(2)]
        })
        .collect();
    let deltas = section_f32(blob, man.layout.deltas, path)?;
    let mut mesh = TriMesh::new(neutral, faces)?;
    if let Some(s) = man.layout.uv {
        let uv = section_f32(blob, s, path)?;
        mesh = mesh.with_uv(uv.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect())?;
    }
    if let Some(l) = man.landmarks.clone() {
        mesh = mesh.with_landmarks(l)?;
    }
    let poses = man
        .poses
        .iter()
        .enumerate()
        .map(|(j, p)| {
            Ok(RigPose { name: p.name.clone(), facs: FacsVector::new(p.facs.clone())?, delta: vec3s(&deltas[3 * n * j..3 * n * (j + 1)]) })
        })
        .collect::<Result<Vec<_>>>()?;
    let t = NormalizationTransform { center: man.normalization.center, scale: man.normalization.scale };
    Ok(BlendshapeRig::new(mesh, poses, t)?)
}

pub fn save_rig(path: &Path, rig: &BlendshapeRig) -> Result<()> {
    fsutil::write_atomic(path, &encode_rig(rig)?)
}

pub fn load_rig(path: &Path) -> Result<BlendshapeRig> {
    decode_rig(&fsutil::read(path)?, path)
}
