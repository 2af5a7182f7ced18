//! Wavefront OBJ subset: `v`, `vt` and `f` records. Everything else is
//! skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rigforge_core::math::Vec3;
use rigforge_core::TriMesh;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    parse_obj(&text, path)
}

fn resolve(tok: &str, count: usize, path: &Path, line: usize, what: &str) -> Result<usize> {
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let i: i64 = tok.parse().map_err(|_| bad(format!("bad {what} index {tok:?}")))?;
    let idx = match i {
        0 => return Err(bad(format!("{what} index 0; OBJ indices start at 1"))),
        i if i > 0 => i as usize - 1,
        i => count.checked_sub(i.unsigned_abs() as usize).ok_or_else(|| bad(format!("relative {what} index {i} out of range")))?,
    };
    if idx >= count {
        return Err(bad(format!("{what} index {i} out of range ({count} defined)")));
    }
    Ok(idx)
}

/// Parses OBJ text. Polygons are fan-triangulated around their first corner.
/// Texture coordinates are kept when every vertex is referenced with exactly
/// one `vt`.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let mut verts: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut corner_uv: Vec<Option<usize>> = Vec::new();
    let mut uv_ok = true;
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let body = raw.split('#').next().unwrap_or("");
        let mut it = body.split_whitespace();
        let Some(tag) = it.next() else { continue };
        match tag {
            "v" => {
                let c: Vec<f64> = it.take(3).map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("bad vertex: {e}")))?;
                if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
                    return Err(bad("vertex needs three finite coordinates".into()));
                }
                verts.push([c[0], c[1], c[2]]);
            }
            "vt" => {
                let c: Vec<f64> = it.take(2).map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("bad texture coordinate: {e}")))?;
                if c.is_empty() {
                    return Err(bad("empty texture coordinate".into()));
                }
                uvs.push([c[0], c.get(1).copied().unwrap_or(0.0)]);
            }
            "f" => {
                let mut poly = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let v = resolve(parts.next().unwrap_or(""), verts.len(), path, line, "vertex")?;
                    let t = match parts.next() {
                        Some(t) if !t.is_empty() => Some(resolve(t, uvs.len(), path, line, "texture")?),
                        _ => None,
                    };
                    poly.push((v, t));
                }
                if poly.len() < 3 {
                    return Err(bad(format!("face with {} corners", poly.len())));
                }
                for &(v, t) in &poly {
                    if corner_uv.len() < verts.len() {
                        corner_uv.resize(verts.len(), None);
                    }
                    match (corner_uv[v], t) {
                        (_, None) => uv_ok = false,
                        (None, Some(t)) => corner_uv[v] = Some(t),
                        (Some(a), Some(t)) if a != t && uvs[a] != uvs[t] => uv_ok = false,
                        _ => {}
                    }
                }
                for k in 1..poly.len() - 1 {
                    faces.push([poly[0].0, poly[k].0, poly[k + 1].0]);
                }
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    corner_uv.resize(verts.len(), None);
    let uv: Option<Vec<[f64; 2]>> = if uv_ok && !uvs.is_empty() { corner_uv.iter().map(|t| t.map(|t| uvs[t])).collect() } else { None };
    let mesh = TriMesh::new(verts, faces)?;
    Ok(match uv {
        Some(uv) => mesh.with_uv(uv)?,
        None => mesh,
    })
}

/// OBJ text of `mesh` with `vertices` in place of its own positions.
/// Coordinates are written in shortest round-trip form.
pub fn write_obj_with(mesh: &TriMesh, vertices: &[Vec3]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + mesh.faces.len() * 24);
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    if let Some(uv) = &mesh.uv {
        for t in uv {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
        for f in &mesh.faces {
            let _ = writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    } else {
        for f in &mesh.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    s
}

pub fn write_obj(mesh: &TriMesh) -> String {
    write_obj_with(mesh, &mesh.vertices)
}

pub fn save_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    fsutil::write_atomic(path, write_obj(mesh).as_bytes())
}

/// Landmark sidecar: `{"landmarks": [...]}`, optionally with eyelid pairs
/// given as positions in that list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkFile {
    pub landmarks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eyelid_pairs: Vec<(usize, usize)>,
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkFile> {
    fsutil::read_json(path)
}

/// `foo.obj` -> `foo.landmarks.json`, also accepting `landmarks.json` next
/// to the mesh.
pub fn landmark_sidecar(mesh: &Path) -> Option<PathBuf> {
    let own = mesh.with_extension("landmarks.json");
    if own.exists() {
        return Some(own);
    }
    let shared = mesh.parent()?.join("landmarks.json");
    shared.exists().then_some(shared)
}

/// Loads a mesh and attaches landmarks from its sidecar, when there is one.
pub fn load_mesh_with_landmarks(path: &Path) -> Result<(TriMesh, Option<LandmarkFile>)> {
    let mesh = load_obj(path)?;
    match landmark_sidecar(path) {
        Some(side) => {
            let lf = load_landmarks(&side)?;
            let mesh = mesh.with_landmarks(lf.landmarks.clone())?;
            Ok((mesh, Some(lf)))
        }
        None => Ok((mesh, None)),
    }
}
