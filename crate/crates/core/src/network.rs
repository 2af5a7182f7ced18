//! FACS-conditioned displacement network.
//!
//! A small diffusion encoder pools one global vector per mesh. The trunk
//! lifts per-vertex position and normal to `width` channels, runs `blocks`
//! conditional diffusion blocks that each fuse the replicated latent
//! (global vector and FACS activations), and a zero-initialized linear head
//! emits one displacement per vertex.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::facs::FacsVector;
use crate::math::{self, Vec3};
use crate::mesh::TriMesh;
use crate::operators::{DiffusionKind, SurfaceOperators};

/// Number of global-encoder diffusion blocks.
pub const GLOBAL_BLOCKS: usize = 2;
/// Per-vertex input channels: position and normal.
pub const INPUT_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    MassWeighted,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub global_width: usize,
    pub global_dim: usize,
    pub facs_dim: usize,
    /// Eigenbasis size; `None` means `min(128, n - 1)`.
    pub k: Option<usize>,
    /// When false the latent is the FACS vector alone.
    pub use_global: bool,
    pub pooling: Pooling,
    pub diffusion: DiffusionKind,
    /// Initial effective diffusion time.
    pub t_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            global_width: 32,
            global_dim: 64,
            facs_dim: 12,
            k: None,
            use_global: true,
            pooling: Pooling::MassWeighted,
            diffusion: DiffusionKind::Spectral,
            t_init: 4e-3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("width", self.width),
            ("global_width", self.global_width),
            ("global_dim", self.global_dim),
            ("facs_dim", self.facs_dim),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(self.t_init > 0.0 && self.t_init.is_finite()) {
            return Err(Error::BadConfig(format!("t_init must be positive, got {}", self.t_init)));
        }
        if self.k == Some(0) {
            return Err(Error::BadConfig("k must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.facs_dim + if self.use_global { self.global_dim } else { 0 }
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        fn linear(out: &mut Vec<(String, Vec<usize>)>, name: &str, a: usize, b: usize) {
            out.push((format!("{name}.w"), vec![a, b]));
            out.push((format!("{name}.b"), vec![b]));
        }
        fn plain(out: &mut Vec<(String, Vec<usize>)>, p: &str, w: usize) {
            out.push((format!("{p}.t"), vec![w]));
            linear(out, &format!("{p}.mlp0"), 2 * w, w);
            linear(out, &format!("{p}.mlp1"), w, w);
        }
        let mut out = Vec::new();
        if self.use_global {
            let wg = self.global_width;
            linear(&mut out, "g.in", INPUT_DIM, wg);
            for b in 0..GLOBAL_BLOCKS {
                plain(&mut out, &format!("g.b{b}"), wg);
            }
            linear(&mut out, "g.out", wg, self.global_dim);
        }
        let w = self.width;
        linear(&mut out, "in", INPUT_DIM, w);
        for b in 0..self.blocks {
            plain(&mut out, &format!("b{b}"), w);
            linear(&mut out, &format!("b{b}.fuse0"), w + self.latent_dim(), w);
            linear(&mut out, &format!("b{b}.fuse1"), w, w);
        }
        linear(&mut out, "head", w, 3);
        out
    }
}

/// All learnable tensors, stored in [`ModelConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Deterministic initialization: weights and biases uniform in
/// `+-1/sqrt(fan_in)`, diffusion times at `t_init`, head zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t_raw = math::softplus_inv(config.t_init);
    let layout = config.layout();
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    let mut fan_in = 1usize;
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".t") {
            vec![t_raw; n]
        } else if name.starts_with("head.") {
            vec![0.0; n]
        } else {
            if name.ends_with(".w") {
                fan_in = shape[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        tensors.push(Tensor::new(&shape, data)?);
        names.push(name);
    }
    Ok(ModelParams { config: config.clone(), names, tensors })
}

impl ModelParams {
    pub fn count_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Checks names and shapes against the config layout.
    pub fn validate(&self) -> Result<()> {
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::BadParams(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::BadParams(format!("{n} {:?} does not match {name} {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Places every tensor on the tape; `trainable` controls whether
    /// gradients are tracked.
    pub fn on_tape<'a>(&self, tape: &mut Tape<'a>, trainable: bool) -> ParamVars {
        ParamVars {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Binds tape values built elsewhere, one per tensor in order, to the
    /// parameter names.
    pub fn bind(&self, vars: Vec<Var>) -> Result<ParamVars> {
        if vars.len() != self.tensors.len() {
            return Err(Error::LengthMismatch { expected: self.tensors.len(), got: vars.len() });
        }
        Ok(ParamVars { names: self.names.clone(), vars })
    }
}

/// Tape handles of a [`ModelParams`], same order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::BadParams(format!("missing parameter {name}")))
    }
}

/// Per-mesh network input: features and precomputed operators.
#[derive(Debug, Clone)]
pub struct MeshInput<'a> {
    pub ops: &'a SurfaceOperators,
    /// `n x 6`: position then unit normal.
    pub features: Tensor,
    /// Pooling weights (sum to one).
    mass_weights: Tensor,
    mean_weights: Tensor,
}

impl<'a> MeshInput<'a> {
    pub fn new(mesh: &TriMesh, ops: &'a SurfaceOperators) -> Result<Self> {
        ops.check_matches(mesh)?;
        Self::from_positions(&mesh.vertices, &mesh.vertex_normals(), ops)
    }

    pub fn from_positions(positions: &[Vec3], normals: &[Vec3], ops: &'a SurfaceOperators) -> Result<Self> {
        let n = positions.len();
        if n != ops.vertex_count() || normals.len() != n {
            return Err(Error::OperatorMismatch(format!(
                "operators built for {} vertices, input has {n}",
                ops.vertex_count()
            )));
        }
        let mut f = Vec::with_capacity(n * INPUT_DIM);
        for (p, q) in positions.iter().zip(normals) {
            f.extend_from_slice(p);
            f.extend_from_slice(q);
        }
        let total = ops.mass.total();
        let mw = ops.mass.iter().map(|m| m / total).collect();
        Ok(Self {
            ops,
            features: Tensor::new(&[n, INPUT_DIM], f)?,
            mass_weights: Tensor::new(&[1, n], mw)?,
            mean_weights: Tensor::full(&[1, n], 1.0 / n as f64),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.features.rows()
    }
}

fn linear<'a>(tape: &mut Tape<'a>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `x + MLP([x, diffuse(x)])`
fn plain_block<'a>(tape: &mut Tape<'a>, p: &ParamVars, prefix: &str, x: Var, input: &MeshInput<'a>, kind: DiffusionKind) -> Result<Var> {
    let raw = p.get(&format!("{prefix}.t"))?;
    let t = tape.softplus(raw)?;
    let h = tape.spectral_diffuse(x, t, &input.ops.basis, &input.ops.mass.0, kind)?;
    let c = tape.concat(&[x, h])?;
    let a = linear(tape, p, &format!("{prefix}.mlp0"), c)?;
    let a = tape.relu(a)?;
    let a = linear(tape, p, &format!("{prefix}.mlp1"), a)?;
    tape.add(x, a)
}

/// Plain block followed by fusion with the replicated latent:
/// `y + MLP([y, latent])`. The first fusion layer is evaluated as
/// `y W_y + (latent W_l + b)` so the latent product is formed once.
pub fn conditional_block<'a>(
    tape: &mut Tape<'a>,
    p: &ParamVars,
    block: usize,
    x: Var,
    latent: Var,
    input: &MeshInput<'a>,
    config: &ModelConfig,
) -> Result<Var> {
    let prefix = format!("b{block}");
    let n = input.vertex_count();
    let w = config.width;
    if tape.value(x).cols() != w || tape.value(latent).numel() != config.latent_dim() {
        return Err(Error::ShapeMismatch(format!(
            "block {block}: features {:?}, latent {:?}",
            tape.value(x).shape(),
            tape.value(latent).shape()
        )));
    }
    let y = plain_block(tape, p, &prefix, x, input, config.diffusion)?;
    let fw = p.get(&format!("{prefix}.fuse0.w"))?;
    let fb = p.get(&format!("{prefix}.fuse0.b"))?;
    let w_y = tape.slice_rows(fw, 0, w)?;
    let w_l = tape.slice_rows(fw, w, w + config.latent_dim())?;
    let lat = tape.reshape(latent, &[1, config.latent_dim()])?;
    let lw = tape.matmul(lat, w_l)?;
    let lw = tape.add_row(lw, fb)?;
    let lw = tape.broadcast_rows(lw, n)?;
    let a = tape.matmul(y, w_y)?;
    let a = tape.add(a, lw)?;
    let a = tape.relu(a)?;
    let a = linear(tape, p, &format!("{prefix}.fuse1"), a)?;
    tape.add(y, a)
}

/// Global vector `G0` as a `[global_dim]` tape value.
pub fn global_encode_var<'a>(tape: &mut Tape<'a>, p: &ParamVars, input: &MeshInput<'a>, config: &ModelConfig) -> Result<Var> {
    let x = tape.constant(input.features.clone());
    let mut h = linear(tape, p, "g.in", x)?;
    for b in 0..GLOBAL_BLOCKS {
        h = plain_block(tape, p, &format!("g.b{b}"), h, input, config.diffusion)?;
    }
    let weights = match config.pooling {
        Pooling::MassWeighted => &input.mass_weights,
        Pooling::Mean => &input.mean_weights,
    };
    let wv = tape.constant(weights.clone());
    let pooled = tape.matmul(wv, h)?;
    let g = linear(tape, p, "g.out", pooled)?;
    tape.reshape(g, &[config.global_dim])
}

/// Displacements `n x 3` on the tape.
pub fn forward_var<'a>(
    tape: &mut Tape<'a>,
    p: &ParamVars,
    input: &MeshInput<'a>,
    facs: &FacsVector,
    config: &ModelConfig,
) -> Result<Var> {
    let g = if config.use_global { Some(global_encode_var(tape, p, input, config)?) } else { None };
    forward_with_global(tape, p, input, facs, g, config)
}

/// As [`forward_var`] but with a precomputed global vector on the tape.
pub fn forward_with_global<'a>(
    tape: &mut Tape<'a>,
    p: &ParamVars,
    input: &MeshInput<'a>,
    facs: &FacsVector,
    global: Option<Var>,
    config: &ModelConfig,
) -> Result<Var> {
    if facs.dim() != config.facs_dim {
        return Err(Error::ShapeMismatch(format!(
            "FACS vector has {} entries, model expects {}",
            facs.dim(),
            config.facs_dim
        )));
    }
    let a = tape.constant(Tensor::vector(facs.as_slice().to_vec()));
    let latent = match (config.use_global, global) {
        (true, Some(g)) => tape.concat(&[g, a])?,
        (false, _) => a,
        (true, None) => return Err(Error::BadConfig("global feature required".into())),
    };
    let x = tape.constant(input.features.clone());
    let mut h = linear(tape, p, "in", x)?;
    for b in 0..config.blocks {
        h = conditional_block(tape, p, b, h, latent, input, config)?;
    }
    linear(tape, p, "head", h)
}

/// Global feature without gradient tracking.
pub fn global_encode(params: &ModelParams, input: &MeshInput<'_>) -> Result<Vec<f64>> {
    if !params.config.use_global {
        return Err(Error::BadConfig("model has no global encoder".into()));
    }
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, false);
    let g = global_encode_var(&mut tape, &p, input, &params.config)?;
    Ok(tape.value(g).data().to_vec())
}

/// Predicted displacements without gradient tracking.
pub fn forward(params: &ModelParams, input: &MeshInput<'_>, facs: &FacsVector) -> Result<Vec<Vec3>> {
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, false);
    let d = forward_var(&mut tape, &p, input, facs, &params.config)?;
    Ok(to_vec3(tape.value(d)))
}

/// Displacements for several FACS vectors sharing one global encoding.
pub fn forward_many(params: &ModelParams, input: &MeshInput<'_>, poses: &[FacsVector]) -> Result<Vec<Vec<Vec3>>> {
    let g = if params.config.use_global { Some(global_encode(params, input)?) } else { None };
    let mut out = Vec::with_capacity(poses.len());
    for f in poses {
        let mut tape = Tape::new();
        let p = params.on_tape(&mut tape, false);
        let gv = g.as_ref().map(|g| tape.constant(Tensor::vector(g.clone())));
        let d = forward_with_global(&mut tape, &p, input, f, gv, &params.config)?;
        out.push(to_vec3(tape.value(d)));
    }
    Ok(out)
}

pub fn to_vec3(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}
