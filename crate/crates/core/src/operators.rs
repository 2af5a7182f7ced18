//! Intrinsic surface operators: cotangent Laplacian, lumped mass, the
//! truncated generalized eigenbasis and heat diffusion in that basis.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::linalg::dense::{gemm, symmetric_eigen, DenseMatrix};
use crate::linalg::{Csr, EnvelopeCholesky};
use crate::math;
use crate::mesh::TriMesh;

/// Magnitude bound applied to every cotangent weight.
pub const COTAN_CLAMP: f64 = 1e4;
/// Mass floor, relative to the total surface area.
pub const MASS_FLOOR_REL: f64 = 1e-10;
/// Default truncation of the eigenbasis.
pub const DEFAULT_K: usize = 128;

/// Symmetric sparse matrix (the cotangent Laplacian).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric(pub Csr);

impl Deref for SparseSymmetric {
    type Target = Csr;
    fn deref(&self) -> &Csr {
        &self.0
    }
}

impl SparseSymmetric {
    /// `x^T L x`
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| a * b).sum()
    }
}

/// Lumped (diagonal) mass matrix, one positive area per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct MassDiagonal(pub Vec<f64>);

impl Deref for MassDiagonal {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl MassDiagonal {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Smallest `k` generalized eigenpairs of `L phi = lambda M phi`,
/// M-orthonormal, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenbasis {
    pub n: usize,
    pub k: usize,
    pub values: Vec<f64>,
    /// Row-major `n x k`; column `j` is the j-th eigenvector.
    pub vectors: Vec<f64>,
}

impl Eigenbasis {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.vectors[i * self.k + j]).collect()
    }
}

/// Which heat-flow filter is applied to spectral coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionKind {
    /// Exact heat flow, `exp(-lambda t)`.
    #[default]
    Spectral,
    /// One implicit Euler step, `1 / (1 + lambda t)`; equals
    /// `(M + tL)^{-1} M u` when the basis is complete.
    Implicit,
}

impl DiffusionKind {
    #[inline]
    pub fn filter(self, lambda: f64, t: f64) -> f64 {
        match self {
            DiffusionKind::Spectral => (-lambda * t).exp(),
            DiffusionKind::Implicit => 1.0 / (1.0 + lambda * t),
        }
    }

    /// Derivative of [`Self::filter`] with respect to `t`.
    #[inline]
    pub fn filter_dt(self, lambda: f64, t: f64) -> f64 {
        match self {
            DiffusionKind::Spectral => -lambda * (-lambda * t).exp(),
            DiffusionKind::Implicit => {
                let d = 1.0 + lambda * t;
                -lambda / (d * d)
            }
        }
    }
}

/// Everything the network needs about one mesh's intrinsic geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceOperators {
    pub laplacian: SparseSymmetric,
    pub mass: MassDiagonal,
    pub basis: Eigenbasis,
    pub face_count: usize,
}

impl SurfaceOperators {
    /// Assembles L and M and solves for `k` eigenpairs
    /// (`None` means `min(DEFAULT_K, n - 1)`).
    pub fn precompute(mesh: &TriMesh, k: Option<usize>) -> Result<Self> {
        let n = mesh.vertex_count();
        if n < 2 {
            return Err(Error::DegenerateMesh("need at least two vertices".into()));
        }
        let k = k.unwrap_or(DEFAULT_K.min(n - 1)).min(n);
        let laplacian = cotan_laplacian(mesh);
        let mass = lumped_mass(mesh);
        let basis = eigenbasis(&laplacian, &mass, k)?;
        Ok(Self { laplacian, mass, basis, face_count: mesh.face_count() })
    }

    pub fn vertex_count(&self) -> usize {
        self.mass.len()
    }

    pub fn check_matches(&self, mesh: &TriMesh) -> Result<()> {
        if self.vertex_count() != mesh.vertex_count() || self.face_count != mesh.face_count() {
            return Err(Error::OperatorMismatch(format!(
                "operators built for {} vertices / {} faces, mesh has {} / {}",
                self.vertex_count(),
                self.face_count,
                mesh.vertex_count(),
                mesh.face_count()
            )));
        }
        Ok(())
    }
}

#[inline]
fn clamped_cot(u: math::Vec3, v: math::Vec3) -> f64 {
    let c = math::dot(u, v) / math::norm(math::cross(u, v));
    if c.is_nan() {
        0.0
    } else {
        c.clamp(-COTAN_CLAMP, COTAN_CLAMP)
    }
}

/// Cotangent Laplacian with the positive-semidefinite sign convention:
/// `L_ij = -(cot a + cot b) / 2` off the diagonal and zero row sums.
pub fn cotan_laplacian(mesh: &TriMesh) -> SparseSymmetric {
    let n = mesh.vertex_count();
    let mut trip = Vec::with_capacity(mesh.face_count() * 12);
    for f in &mesh.faces {
        for k in 0..3 {
            let o = f[k];
            let i = f[(k + 1) % 3];
            let j = f[(k + 2) % 3];
            let p = mesh.vertices[o];
            let w = 0.5 * clamped_cot(math::sub(mesh.vertices[i], p), math::sub(mesh.vertices[j], p));
            trip.push((i, j, -w));
            trip.push((j, i, -w));
            trip.push((i, i, w));
            trip.push((j, j, w));
        }
    }
    // Isolated vertices still get an explicit (zero) diagonal entry.
    for v in 0..n {
        trip.push((v, v, 0.0));
    }
    SparseSymmetric(Csr::from_triplets(n, &trip))
}

/// One third of the incident face area per vertex, floored at
/// `MASS_FLOOR_REL * total_area`.
pub fn lumped_mass(mesh: &TriMesh) -> MassDiagonal {
    let mut m = vec![0.0; mesh.vertex_count()];
    let areas = mesh.face_areas();
    let total: f64 = areas.iter().filter(|a| a.is_finite()).sum();
    for (f, a) in mesh.faces.iter().zip(&areas) {
        if !a.is_finite() {
            continue;
        }
        for &v in f {
            m[v] += a / 3.0;
        }
    }
    let floor = MASS_FLOOR_REL * if total > 0.0 { total } else { 1.0 };
    for x in &mut m {
        if *x < floor {
            *x = floor;
        }
    }
    MassDiagonal(m)
}

/// Meshes up to this size use the dense solver directly.
const DENSE_LIMIT: usize = 400;
const SUBSPACE_TOL: f64 = 1e-10;
const SUBSPACE_MAX_ITERS: usize = 600;

/// Smallest `k` eigenpairs of `L phi = lambda M phi`.
pub fn eigenbasis(l: &SparseSymmetric, m: &MassDiagonal, k: usize) -> Result<Eigenbasis> {
    let n = l.n;
    if m.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: m.len() });
    }
    if k > n {
        return Err(Error::BadConfig(format!("k = {k} exceeds vertex count {n}")));
    }
    if m.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::BadConfig("mass must be positive".into()));
    }
    let guard = (2 * k).max(k + 16).min(n);
    let (values, vectors) = if n <= DENSE_LIMIT || 2 * guard >= n {
        dense_eigenpairs(l, m, k)?
    } else {
        subspace_eigenpairs(l, m, k, guard)?
    };
    let mut basis = Eigenbasis { n, k, values, vectors };
    fix_signs(&mut basis);
    Ok(basis)
}

fn dense_eigenpairs(l: &SparseSymmetric, m: &MassDiagonal, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = l.n;
    let inv_sqrt: Vec<f64> = m.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut c = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for (col, v) in l.row(r) {
            c.set(r, col, v * inv_sqrt[r] * inv_sqrt[col]);
        }
    }
    // Symmetrize against round-off in the assembly.
    for r in 0..n {
        for col in (r + 1)..n {
            let avg = 0.5 * (c.get(r, col) + c.get(col, r));
            c.set(r, col, avg);
            c.set(col, r, avg);
        }
    }
    let (d, v) = symmetric_eigen(&c)?;
    let mut vectors = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            vectors[i * k + j] = v.get(i, j) * inv_sqrt[i];
        }
    }
    Ok((d[..k].to_vec(), vectors))
}

/// Shift-invert block subspace iteration with Rayleigh-Ritz in the
/// M-inner product. Columns are stored contiguously (`p` vectors of length
/// `n`).
fn subspace_eigenpairs(
    l: &SparseSymmetric,
    m: &MassDiagonal,
    k: usize,
    p: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = l.n;
    let total_mass = m.total();
    // Spectrum scales like 1/area; the shift keeps L + sM positive definite.
    let shift = 0.05 / total_mass;
    let chol = EnvelopeCholesky::factor(&l.add_diagonal(m, shift))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    // Column-major block: x[j * n + i]
    let mut x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut y = vec![0.0; n * p];
    let mut ly = vec![0.0; n];
    let mut a_r = DenseMatrix::zeros(p, p);
    let mut b_r = DenseMatrix::zeros(p, p);
    let mut lyt = vec![0.0; n * p];
    let mut myt = vec![0.0; n * p];
    for _iter in 0..SUBSPACE_MAX_ITERS {
        for j in 0..p {
            let col = &mut y[j * n..(j + 1) * n];
            for i in 0..n {
                col[i] = m[i] * x[j * n + i];
            }
            chol.solve_in_place(col);
        }
        for j in 0..p {
            let col = &y[j * n..(j + 1) * n];
            l.matvec(col, &mut ly);
            lyt[j * n..(j + 1) * n].copy_from_slice(&ly);
            for i in 0..n {
                myt[j * n + i] = m[i] * col[i];
            }
        }
        // Y^T L Y and Y^T M Y with Y stored as p x n row-major.
        gemm(p, n, p, 1.0, &y, false, &lyt, true, 0.0, &mut a_r.data);
        gemm(p, n, p, 1.0, &y, false, &myt, true, 0.0, &mut b_r.data);
        symmetrize(&mut a_r);
        symmetrize(&mut b_r);
        let (beta, u) = symmetric_eigen(&b_r)?;
        let beta_max = beta.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..p).filter(|&j| beta[j] > 1e-13 * beta_max).collect();
        let r = keep.len();
        if r < k {
            return Err(Error::SolverFailure(format!("subspace collapsed to rank {r} < {k}")));
        }
        let mut w = DenseMatrix::zeros(p, r);
        for (c, &j) in keep.iter().enumerate() {
            let s = 1.0 / beta[j].sqrt();
            for i in 0..p {
                w.set(i, c, u.get(i, j) * s);
            }
        }
        let cw = w.transpose().matmul(&a_r).matmul(&w);
        let mut cw = cw;
        symmetrize(&mut cw);
        let (mu, z) = symmetric_eigen(&cw)?;
        let s = w.matmul(&z); // p x r
        // X = Y S, written column-major: X^T (r x n) = S^T (r x p) * Y^T (p x n)
        let mut xt = vec![0.0; r * n];
        gemm(r, p, n, 1.0, &s.data, true, &y, false, 0.0, &mut xt);
        // Residuals of the leading k Ritz pairs.
        let lam_scale = mu[k - 1].abs().max(mu.iter().take(k).fold(0.0, |a: f64, b| a.max(b.abs()))).max(1e-300);
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let col = &xt[j * n..(j + 1) * n];
            l.matvec(col, &mut ly);
            let mut rr = 0.0;
            let mut mm = 0.0;
            for i in 0..n {
                let mx = m[i] * col[i];
                let d = ly[i] - mu[j] * mx;
                rr += d * d;
                mm += mx * mx;
            }
            worst = worst.max(rr.sqrt() / (lam_scale * mm.sqrt()));
        }
        x[..r * n].copy_from_slice(&xt);
        for v in x[r * n..].iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        if worst < SUBSPACE_TOL {
            let mut vectors = vec![0.0; n * k];
            for j in 0..k {
                for i in 0..n {
                    vectors[i * k + j] = xt[j * n + i];
                }
            }
            return Ok((mu[..k].to_vec(), vectors));
        }
    }
    Err(Error::SolverFailure(format!(
        "subspace iteration did not converge in {SUBSPACE_MAX_ITERS} iterations (n = {n}, k = {k})"
    )))
}

fn symmetrize(a: &mut DenseMatrix) {
    let n = a.rows;
    for r in 0..n {
        for c in (r + 1)..n {
            let avg = 0.5 * (a.get(r, c) + a.get(c, r));
            a.set(r, c, avg);
            a.set(c, r, avg);
        }
    }
}

/// First coefficient that is not negligible is made positive.
fn fix_signs(b: &mut Eigenbasis) {
    for j in 0..b.k {
        let mut max_abs: f64 = 0.0;
        for i in 0..b.n {
            max_abs = max_abs.max(b.vectors[i * b.k + j].abs());
        }
        let first = (0..b.n).map(|i| b.vectors[i * b.k + j]).find(|v| v.abs() > 1e-8 * max_abs);
        if let Some(v) = first {
            if v < 0.0 {
                for i in 0..b.n {
                    b.vectors[i * b.k + j] = -b.vectors[i * b.k + j];
                }
            }
        }
    }
}

/// Projects `u` (row-major `n x c`) onto the basis: `Phi^T M u`, `k x c`.
pub fn project(basis: &Eigenbasis, mass: &[f64], u: &[f64], c: usize) -> Vec<f64> {
    let n = basis.n;
    let mu: Vec<f64> = (0..n * c).map(|idx| u[idx] * mass[idx / c]).collect();
    let mut coef = vec![0.0; basis.k * c];
    gemm(basis.k, n, c, 1.0, &basis.vectors, true, &mu, false, 0.0, &mut coef);
    coef
}

/// `Phi coef`, `n x c`.
pub fn reconstruct(basis: &Eigenbasis, coef: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; basis.n * c];
    gemm(basis.n, basis.k, c, 1.0, &basis.vectors, false, coef, false, 0.0, &mut out);
    out
}

/// Heat flow of each channel of `u` (`n x c`, row-major) for its own time
/// `times[ch] >= 0`, computed in the truncated eigenbasis.
pub fn spectral_diffuse(
    u: &[f64],
    c: usize,
    times: &[f64],
    basis: &Eigenbasis,
    mass: &[f64],
    kind: DiffusionKind,
) -> Result<Vec<f64>> {
    if times.len() != c || u.len() != basis.n * c || mass.len() != basis.n {
        return Err(Error::ShapeMismatch(format!(
            "diffuse: u has {} values for {} channels, {} times, basis n = {}",
            u.len(),
            c,
            times.len(),
            basis.n
        )));
    }
    let mut coef = project(basis, mass, u, c);
    for j in 0..basis.k {
        for ch in 0..c {
            coef[j * c + ch] *= kind.filter(basis.values[j], times[ch]);
        }
    }
    Ok(reconstruct(basis, &coef, c))
}

/// `(M + tL)^{-1} M u` by a direct sparse solve, one channel at a time.
pub fn implicit_diffuse_direct(
    l: &SparseSymmetric,
    m: &MassDiagonal,
    u: &[f64],
    c: usize,
    times: &[f64],
) -> Result<Vec<f64>> {
    let n = l.n;
    if u.len() != n * c || times.len() != c {
        return Err(Error::ShapeMismatch("implicit diffusion input".into()));
    }
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        // (M + tL) = t (L + M / t); scale to reuse add_diagonal.
        let t = times[ch];
        let mut rhs: Vec<f64> = (0..n).map(|i| m[i] * u[i * c + ch]).collect();
        if t == 0.0 {
            for i in 0..n {
                out[i * c + ch] = u[i * c + ch];
            }
            continue;
        }
        let sys = l.add_diagonal(m, 1.0 / t);
        let chol = EnvelopeCholesky::factor(&sys)?;
        chol.solve_in_place(&mut rhs);
        for i in 0..n {
            out[i * c + ch] = rhs[i] / t;
        }
    }
    Ok(out)
}
