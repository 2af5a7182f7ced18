//! Raw tensors (RFTN), parameter checkpoints (RFCK) and operator caches
//! (RFOP).

use std::path::Path;

use rigforge_core::autodiff::{Adam, AdamConfig, Tensor};
use rigforge_core::linalg::sparse::Csr;
use rigforge_core::network::{ModelConfig, ModelParams};
use rigforge_core::operators::{Eigenbasis, MassDiagonal, SparseSymmetric, SurfaceOperators};
use rigforge_core::TriMesh;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::fsutil;

pub const TENSOR_MAGIC: &[u8; 4] = b"RFTN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const OPERATOR_MAGIC: &[u8; 4] = b"RFOP";
pub const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = Writer::new(TENSOR_MAGIC, VERSION);
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
    w.finish()
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let body = binio::open(bytes, path, TENSOR_MAGIC, "RFTN tensor", VERSION)?;
    let mut r = Reader::new(body, path);
    let t = read_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > rigforge_core::autodiff::MAX_RANK {
        return Err(r.malformed(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.count(0)?);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.malformed("shape overflow"))?;
    let data = r.f64s(n)?;
    Ok(Tensor::new(&shape, data)?)
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fsutil::write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fsutil::read(path)?, path)
}

/// Training provenance stored with the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stage: u32,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    #[serde(default)]
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, stage: u32, seed: u64) -> Self {
        let meta = CheckpointMeta { model: params.config.clone(), stage, step: 0, epoch: 0, seed, tag: String::new() };
        Self { meta, params, adam: None }
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, VERSION);
    w.str(&serde_json::to_string(&c.meta)?);
    w.u32(c.params.tensors.len() as u32);
    for (name, t) in c.params.names.iter().zip(&c.params.tensors) {
        w.str(name);
        write_tensor(&mut w, t);
    }
    match &c.adam {
        None => w.u32(0),
        Some(a) => {
            w.u32(1);
            w.f64s(&[a.config.beta1, a.config.beta2, a.config.eps]);
            w.u64(a.step);
            for (m, v) in a.m.iter().zip(&a.v) {
                w.u64(m.len() as u64);
                w.f64s(m);
                w.f64s(v);
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let body = binio::open(bytes, path, CHECKPOINT_MAGIC, "RFCK checkpoint", VERSION)?;
    let mut r = Reader::new(body, path);
    let meta: CheckpointMeta = serde_json::from_str(&r.str()?).map_err(|e| r.malformed(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        names.push(r.str()?);
        tensors.push(read_tensor(&mut r)?);
    }
    let params = ModelParams { config: meta.model.clone(), names, tensors };
    params.validate().map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", path.display())))?;
    let adam = match r.u32()? {
        0 => None,
        1 => {
            let c = r.f64s(3)?;
            let step = r.u64()?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for t in &params.tensors {
                let n = r.count(16)?;
                if n != t.numel() {
                    return Err(r.malformed("optimizer state does not match parameters"));
                }
                m.push(r.f64s(n)?);
                v.push(r.f64s(n)?);
            }
            Some(Adam { config: AdamConfig { beta1: c[0], beta2: c[1], eps: c[2] }, step, m, v })
        }
        f => return Err(r.malformed(format!("optimizer flag {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint { meta, params, adam })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &encode_checkpoint(c)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fsutil::read(path)?, path)
}

/// CRC32 over vertex coordinates and face indices; ties a cached operator
/// file to the exact mesh it was built from.
pub fn mesh_fingerprint(mesh: &TriMesh) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in &mesh.vertices {
        for c in v {
            h.update(&c.to_le_bytes());
        }
    }
    for f in &mesh.faces {
        for i in f {
            h.update(&(*i as u64).to_le_bytes());
        }
    }
    h.finalize()
}

pub fn encode_operators(ops: &SurfaceOperators, fingerprint: u32) -> Vec<u8> {
    let b = &ops.basis;
    let l = &ops.laplacian.0;
    let mut w = Writer::new(OPERATOR_MAGIC, VERSION);
    w.u32(fingerprint);
    w.u64(b.n as u64);
    w.u64(b.k as u64);
    w.u64(ops.face_count as u64);
    w.f64s(&b.values);
    w.f64s(&b.vectors);
    w.f64s(&ops.mass.0);
    w.u64(l.values.len() as u64);
    for &p in &l.row_ptr {
        w.u64(p as u64);
    }
    for &c in &l.col_idx {
        w.u64(c as u64);
    }
    w.f64s(&l.values);
    w.finish()
}

/// Returns the operators and the fingerprint they were stored with.
pub fn decode_operators(bytes: &[u8], path: &Path) -> Result<(SurfaceOperators, u32)> {
    let body = binio::open(bytes, path, OPERATOR_MAGIC, "RFOP operator", VERSION)?;
    let mut r = Reader::new(body, path);
    let fp = r.u32()?;
    let n = r.count(8)?;
    let k = r.count(0)?;
    let face_count = r.count(0)?;
    if k > n {
        return Err(r.malformed(format!("k = {k} exceeds n = {n}")));
    }
    let values = r.f64s(k)?;
    let vectors = r.f64s(n * k)?;
    let mass = r.f64s(n)?;
    let nnz = r.count(16)?;
    let mut row_ptr = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        row_ptr.push(r.u64()? as usize);
    }
    let mut col_idx = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        col_idx.push(r.u64()? as usize);
    }
    let lv = r.f64s(nnz)?;
    r.finish()?;
    if row_ptr.first() != Some(&0) || row_ptr.last() != Some(&nnz) || row_ptr.windows(2).any(|w| w[0] > w[1]) || col_idx.iter().any(|&c| c >= n) {
        return Err(Error::Malformed { path: path.to_path_buf(), msg: "inconsistent sparse structure".into() });
    }
    let ops = SurfaceOperators {
        laplacian: SparseSymmetric(Csr { n, row_ptr, col_idx, values: lv }),
        mass: MassDiagonal(mass),
        basis: Eigenbasis { n, k, values, vectors },
        face_count,
    };
    Ok((ops, fp))
}

pub fn save_operators(path: &Path, ops: &SurfaceOperators, mesh: &TriMesh) -> Result<()> {
    fsutil::write_atomic(path, &encode_operators(ops, mesh_fingerprint(mesh)))
}

/// Loads a cache built for exactly this mesh.
pub fn load_operators(path: &Path, mesh: &TriMesh) -> Result<SurfaceOperators> {
    let (ops, fp) = decode_operators(&fsutil::read(path)?, path)?;
    if fp != mesh_fingerprint(mesh) {
        return Err(Error::Core(rigforge_core::Error::OperatorMismatch(format!("{} was built for a different mesh", path.display()))));
    }
    ops.check_matches(mesh)?;
    Ok(ops)
}

/// Cached operators when `cache` holds a matching file, otherwise a fresh
/// solve that is written back to `cache`.
pub fn operators_cached(cache: Option<&Path>, mesh: &TriMesh, k: Option<usize>) -> Result<SurfaceOperators> {
    if let Some(p) = cache {
        if p.exists() {
            if let Ok(ops) = load_operators(p, mesh) {
                if k.is_none_or(|k| k.min(mesh.vertex_count()) == ops.basis.k) {
                    return Ok(ops);
                }
            }
        }
    }
    let ops = SurfaceOperators::precompute(mesh, k)?;
    if let Some(p) = cache {
        save_operators(p, &ops, mesh)?;
    }
    Ok(ops)
}
