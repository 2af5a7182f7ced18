//! Indexed triangle meshes with first-class disconnected components.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::error::{Error, Result};
use crate::math::{self, Vec3};

pub mod primitives;

/// Triangle surface, possibly made of several disconnected pieces
/// (a face plus eyeballs, say). Positions are in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-vertex component label, consistent with edge connectivity.
    pub component_id: Vec<usize>,
    pub landmark_indices: Option<Vec<usize>>,
    /// Per-vertex texture coordinates in `[0, 1]^2`.
    pub uv: Option<Vec<[f64; 2]>>,
}

/// Similarity transform `p -> (p - center) * scale` mapping a mesh into the
/// unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub const IDENTITY: Self = Self { center: [0.0; 3], scale: 1.0 };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        math::scale(math::sub(p, self.center), self.scale)
    }

    pub fn inverse(&self, p: Vec3) -> Vec3 {
        math::add(math::scale(p, 1.0 / self.scale), self.center)
    }

    /// Displacements only scale; they do not translate.
    pub fn apply_vector(&self, d: Vec3) -> Vec3 {
        math::scale(d, self.scale)
    }
}

impl TriMesh {
    /// Validates indices and computes component labels.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!("face {fi} references a vertex >= {n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex index")));
            }
        }
        let mut mesh = Self { vertices, faces, component_id: Vec::new(), landmark_indices: None, uv: None };
        mesh.component_id = mesh.connected_components().1;
        Ok(mesh)
    }

    pub fn with_uv(mut self, uv: Vec<[f64; 2]>) -> Result<Self> {
        if uv.len() != self.vertices.len() {
            return Err(Error::LengthMismatch { expected: self.vertices.len(), got: uv.len() });
        }
        self.uv = Some(uv);
        Ok(self)
    }

    pub fn with_landmarks(mut self, landmarks: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = landmarks.iter().find(|&&i| i >= self.vertices.len()) {
            return Err(Error::InvalidMesh(format!("landmark index {bad} out of range")));
        }
        self.landmark_indices = Some(landmarks);
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn component_count(&self) -> usize {
        self.component_id.iter().max().map_or(0, |m| m + 1)
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::LengthMismatch { expected: self.vertices.len(), got: vertices.len() });
        }
        let mut out = self.clone();
        out.vertices = vertices;
        Ok(out)
    }

    /// Union-find over mesh edges. Labels are assigned in order of each
    /// component's smallest vertex index.
    pub fn connected_components(&self) -> (usize, Vec<usize>) {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for k in 0..3 {
                let a = find(&mut parent, f[k]);
                let b = find(&mut parent, f[(k + 1) % 3]);
                if a != b {
                    // Keep the smaller index as root.
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi] = lo;
                }
            }
        }
        let mut label_of_root = vec![usize::MAX; n];
        let mut labels = vec![0; n];
        let mut count = 0;
        for v in 0..n {
            let r = find(&mut parent, v);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = count;
                count += 1;
            }
            labels[v] = label_of_root[r];
        }
        (count, labels)
    }

    /// Vertex indices of every component, in label order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.component_count()];
        for (v, &c) in self.component_id.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    /// Faces grouped by the component of their first vertex.
    pub fn component_faces(&self) -> Vec<Vec<[usize; 3]>> {
        let mut out = vec![Vec::new(); self.component_count()];
        for f in &self.faces {
            out[self.component_id[f[0]]].push(*f);
        }
        out
    }

    /// Centers the vertex bounding box at the origin and scales so the
    /// farthest vertex has norm one. Components share a single transform.
    pub fn normalize_unit_sphere(&self) -> Result<(TriMesh, NormalizationTransform)> {
        if self.vertices.is_empty() {
            return Err(Error::DegenerateMesh("no vertices".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let radius = self
            .vertices
            .iter()
            .map(|&p| math::norm(math::sub(p, center)))
            .fold(0.0, f64::max);
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::DegenerateMesh("all vertices coincide".into()));
        }
        let transform = NormalizationTransform { center, scale: 1.0 / radius };
        let mut out = self.clone();
        for p in &mut out.vertices {
            *p = transform.apply(*p);
        }
        Ok((out, transform))
    }

    /// Twice-area-weighted face normals; zero-area faces contribute zero.
    pub fn face_normals_unnormalized(&self) -> Vec<Vec3> {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]];
                math::cross(math::sub(b, a), math::sub(c, a))
            })
            .collect()
    }

    pub fn face_areas(&self) -> Vec<f64> {
        self.face_normals_unnormalized().into_iter().map(|n| 0.5 * math::norm(n)).collect()
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    /// Area-weighted vertex normals. Vertices without incident area get +z.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for (f, n) in self.faces.iter().zip(self.face_normals_unnormalized()) {
            if !(n[0].is_finite() && n[1].is_finite() && n[2].is_finite()) {
                continue;
            }
            for &v in f {
                acc[v] = math::add(acc[v], n);
            }
        }
        acc.into_iter().map(|n| math::normalize(n).unwrap_or([0.0, 0.0, 1.0])).collect()
    }

    /// Unique undirected edges `(lo, hi)` in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)), ());
            }
        }
        set.into_keys().collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        edges
            .iter()
            .map(|&(a, b)| math::norm(math::sub(self.vertices[a], self.vertices[b])))
            .sum::<f64>()
            / edges.len() as f64
    }

    /// Relabels vertices so that old vertex `i` becomes `perm[i]`.
    pub fn permute_vertices(&self, perm: &[usize]) -> Result<TriMesh> {
        let n = self.vertices.len();
        if perm.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: perm.len() });
        }
        let mut vertices = vec![[0.0; 3]; n];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let faces = self.faces.iter().map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]]).collect();
        let mut out = TriMesh::new(vertices, faces)?;
        if let Some(uv) = &self.uv {
            let mut nuv = vec![[0.0; 2]; n];
            for (old, &new) in perm.iter().enumerate() {
                nuv[new] = uv[old];
            }
            out.uv = Some(nuv);
        }
        out.landmark_indices = self.landmark_indices.as_ref().map(|l| l.iter().map(|&i| perm[i]).collect());
        Ok(out)
    }

    /// Disjoint union; `other`'s indices are shifted past `self`'s.
    pub fn merge(&self, other: &TriMesh) -> Result<TriMesh> {
        let off = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        let mut out = TriMesh::new(vertices, faces)?;
        if let (Some(a), Some(b)) = (&self.uv, &other.uv) {
            let mut uv = a.clone();
            uv.extend_from_slice(b);
            out.uv = Some(uv);
        }
        Ok(out)
    }

    /// Nearest vertex of `self` for each query point (brute force).
    pub fn nearest_vertices(&self, queries: &[Vec3]) -> Vec<usize> {
        queries
            .iter()
            .map(|&q| {
                let mut best = (f64::INFINITY, 0);
                for (i, &p) in self.vertices.iter().enumerate() {
                    let d = math::dot(math::sub(p, q), math::sub(p, q));
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best.1
            })
            .collect()
    }
}
