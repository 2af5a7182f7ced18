//! Analytic test shapes.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;


use super::TriMesh;
use crate::math::{self, Vec3};

/// Regular tetrahedron inscribed in the unit sphere, outward CCW faces.
pub fn tetrahedron() -> TriMesh {
    let s = 1.0 / 3f64.sqrt();
    let v = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
    let f = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    TriMesh::new(v, f).expect("static tetrahedron")
}

/// Axis-aligned cube with corners at `±half`, two triangles per side.
pub fn cube(half: f64) -> TriMesh {
    let h = half;
    let v = vec![
        [-h, -h, -h],
        [h, -h, -h],
        [h, h, -h],
        [-h, h, -h],
        [-h, -h, h],
        [h, -h, h],
        [h, h, h],
        [-h, h, h],
    ];
    let f = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriMesh::new(v, f).expect("static cube")
}

/// Subdivided icosahedron projected onto a sphere. Level `l` has
/// `10 * 4^l + 2` vertices.
pub fn icosphere(level: u32, radius: f64) -> TriMesh {
    let (dirs, faces) = icosphere_directions(level);
    let v = dirs.into_iter().map(|d| math::scale(d, radius)).collect();
    TriMesh::new(v, faces).expect("icosphere topology")
}

/// Unit directions and faces of a level-`level` icosphere.
pub fn icosphere_directions(level: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&p| math::normalize(p).unwrap())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let m = math::normalize(math::add(verts[a], verts[b])).unwrap();
                verts.push(m);
                verts.len() - 1
            })
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for l in 0..4 {
            let m = icosphere(l, 1.0);
            assert_eq!(m.vertex_count(), 10 * 4usize.pow(l) + 2);
            assert_eq!(m.face_count(), 20 * 4usize.pow(l));
            assert_eq!(m.component_count(), 1);
        }
    }

    #[test]
    fn icosphere_faces_point_outward() {
        let m = icosphere(2, 1.0);
        for (f, n) in m.faces.iter().zip(m.face_normals_unnormalized()) {
            let c = math::add(math::add(m.vertices[f[0]], m.vertices[f[1]]), m.vertices[f[2]]);
            assert!(math::dot(c, n) > 0.0);
        }
    }
}
