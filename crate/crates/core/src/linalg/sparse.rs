//! Compressed sparse rows plus a reverse Cuthill-McKee envelope Cholesky.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::error::{Error, Result};

/// Square CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Sums duplicate entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut s = 0.0;
            for (c, v) in self.row(r) {
                s += v * x[c];
            }
            y[r] = s;
        }
    }

    /// `Y = A X` for a row-major `n x cols` block.
    pub fn matmul_dense(&self, x: &[f64], cols: usize, y: &mut [f64]) {
        for r in 0..self.n {
            let out = &mut y[r * cols..(r + 1) * cols];
            out.iter_mut().for_each(|o| *o = 0.0);
            for (c, v) in self.row(r) {
                let xr = &x[c * cols..(c + 1) * cols];
                for (o, &xi) in out.iter_mut().zip(xr) {
                    *o += v * xi;
                }
            }
        }
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// `A + s * diag(d)`.
    pub fn add_diagonal(&self, d: &[f64], s: f64) -> Self {
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz() + self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                trip.push((r, c, v));
            }
            trip.push((r, r, s * d[r]));
        }
        Self::from_triplets(self.n, &trip)
    }

    pub fn to_dense(&self) -> super::DenseMatrix {
        let mut m = super::DenseMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m.set(r, c, v);
            }
        }
        m
    }
}

/// Reverse Cuthill-McKee ordering over the sparsity graph. Returns
/// `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &Csr) -> Vec<usize> {
    let n = a.n;
    let degree: Vec<usize> = (0..n).map(|r| a.row(r).filter(|&(c, _)| c != r).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(a, seed, &degree);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.row(v).map(|(c, _)| c).filter(|&c| c != v && !visited[c]).collect();
            nbrs.sort_by_key(|&c| (degree[c], c));
            for c in nbrs {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &Csr, seed: usize, degree: &[usize]) -> usize {
    let mut current = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(a, current);
        let max_level = levels.iter().filter_map(|l| *l).max().unwrap_or(0);
        if max_level <= ecc && ecc > 0 {
            break;
        }
        ecc = max_level;
        let far = (0..a.n)
            .filter(|&v| levels[v] == Some(max_level))
            .min_by_key(|&v| (degree[v], v))
            .unwrap_or(current);
        if far == current {
            break;
        }
        current = far;
    }
    current
}

fn bfs_levels(a: &Csr, start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; a.n];
    let mut queue = VecDeque::new();
    level[start] = Some(0);
    queue.push_back(start);
    while let Some(v) = queue.pop_front() {
        let lv = level[v].unwrap();
        for (c, _) in a.row(v) {
            if level[c].is_none() {
                level[c] = Some(lv + 1);
                queue.push_back(c);
            }
        }
    }
    level
}

/// Cholesky factor of a sparse SPD matrix stored over its RCM envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// First stored column of each (permuted) row.
    first: Vec<usize>,
    /// Offsets of each row's slice `first[i]..=i` in `data`.
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &Csr) -> Result<Self> {
        let n = a.n;
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for new in 0..n {
            for (c, _) in a.row(perm[new]) {
                let nc = inv[c];
                if nc < first[new] {
                    first[new] = nc;
                }
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            start.push(total);
            total += i - first[i] + 1;
        }
        start.push(total);
        let mut data = vec![0.0; total];
        for new in 0..n {
            for (c, v) in a.row(perm[new]) {
                let nc = inv[c];
                if nc <= new {
                    data[start[new] + nc - first[new]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = data[start[i] + j - fi];
                let ri = &data[start[i] + k0 - fi..start[i] + j - fi];
                let rj = &data[start[j] + k0 - fj..start[j] + j - fj];
                for (x, y) in ri.iter().zip(rj) {
                    s -= x * y;
                }
                let ljj = data[start[j] + j - fj];
                data[start[i] + j - fi] = s / ljj;
            }
            let row = &data[start[i]..start[i] + i - fi];
            let s = data[start[i] + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::SolverFailure(format!("envelope Cholesky pivot {i} is {s}")));
            }
            data[start[i] + i - fi] = s.sqrt();
        }
        Ok(Self { n, perm, first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i] + i - fi];
            let mut s = y[i];
            for (x, yk) in row.iter().zip(&y[fi..i]) {
                s -= x * yk;
            }
            y[i] = s / self.data[self.start[i] + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let xi = y[i] / self.data[self.start[i] + i - fi];
            y[i] = xi;
            let row = &self.data[self.start[i]..self.start[i] + i - fi];
            for (x, yk) in row.iter().zip(&mut y[fi..i]) {
                *yk -= x * xi;
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }
}
