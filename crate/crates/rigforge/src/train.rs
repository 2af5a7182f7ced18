//! Two-stage training driver.
//!
//! Stage 1 fits image, mask and flow supervision on rigged and unrigged
//! heads alike. Stage 2 fine-tunes on rigged heads only, adding 3D vertex,
//! landmark and eye-closure terms. Each optimizer step averages the
//! gradients of `accumulate` samples; samples of a window are evaluated in
//! parallel and reduced in a fixed order, so results do not depend on the
//! thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rigforge_core::autodiff::{Adam, AdamConfig, Tape, Tensor};
use rigforge_core::math::{self, Vec3};
use rigforge_core::network::{self, init_model, MeshInput, ModelConfig, ModelParams};
use rigforge_core::render::losses::{self, LandmarkSpec};
use rigforge_core::render::{self, RenderSettings, Stage1Weights, Stage2Weights, Supervision2D};
use rigforge_core::schedule::Schedule;
use rigforge_core::FacsVector;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, HeadData, Role, Split};
use crate::error::{Error, Result};
use crate::formats::{self, Checkpoint};
use crate::fsutil;

pub const STAGE1_TERMS: [&str; 4] = ["img", "mask", "dis2d", "reg"];
pub const STAGE2_TERMS: [&str; 5] = ["img", "mask", "mse3d", "lmk", "ec"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u32,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Architecture for a fresh model. With `init` set it must match the
    /// checkpoint or be left out.
    pub model: Option<ModelConfig>,
    pub init: Option<PathBuf>,
    pub seed: u64,
    pub lr: f64,
    /// Defaults to 5% of the run.
    pub warmup: Option<usize>,
    pub restart_period: Option<usize>,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub accumulate: usize,
    pub stage1: Stage1Weights,
    pub stage2: Stage2Weights,
    /// Stage 1 only: train on unrigged-role heads as well.
    pub include_unrigged: bool,
    /// Train on these manifest pose names only.
    pub poses: Option<Vec<String>>,
    pub checkpoint_every_epoch: bool,
    /// Progress line on stderr every this many steps; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/stage1"),
            model: None,
            init: None,
            seed: 0,
            lr: 1e-4,
            warmup: None,
            restart_period: None,
            epochs: 1,
            max_steps: None,
            accumulate: 1,
            stage1: Stage1Weights::default(),
            stage2: Stage2Weights::default(),
            include_unrigged: true,
            poses: None,
            checkpoint_every_epoch: true,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.accumulate == 0 || self.max_steps == Some(0) {
            return bad("accumulate and max_steps must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        let w1 = [self.stage1.img, self.stage1.mask, self.stage1.dis2d, self.stage1.reg];
        let w2 = [self.stage2.img, self.stage2.mask, self.stage2.mse3d, self.stage2.lmk, self.stage2.ec];
        if w1.iter().chain(&w2).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Everything one (head, pose) sample needs, loaded once.
struct Sample {
    head: usize,
    pose: usize,
    sup: Supervision2D,
    /// Flow supervision mask: neutral coverage and target silhouette.
    valid: Vec<bool>,
    gt: Option<Vec<Vec3>>,
}

struct Loaded {
    heads: Vec<HeadData>,
    facs: Vec<FacsVector>,
    samples: Vec<Sample>,
}

fn load(ds: &Dataset, cfg: &TrainConfig, k: Option<usize>) -> Result<Loaded> {
    let m = &ds.manifest;
    let s = ds.render_settings();
    let ids: Vec<&str> = m
        .select(None, Split::Train)
        .into_iter()
        .filter(|e| match (cfg.stage, e.role) {
            (_, Role::Rigged) => true,
            (1, Role::Unrigged) => cfg.include_unrigged,
            _ => false,
        })
        .map(|e| e.id.as_str())
        .collect();
    if ids.is_empty() {
        let what = if cfg.stage == 2 { "no rigged training heads" } else { "no training heads" };
        return Err(Error::DatasetMissing(format!("{what} in {}", ds.root.display())));
    }
    let heads: Vec<HeadData> = ids.par_iter().map(|id| ds.load_head(id, k)).collect::<Result<_>>()?;
    let facs: Vec<FacsVector> = m.poses.iter().map(|p| p.facs_vector()).collect::<Result<_>>()?;
    let selected: Vec<usize> = match &cfg.poses {
        None => (0..facs.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| m.poses.iter().position(|p| &p.name == n).ok_or_else(|| Error::BadConfig(format!("dataset has no pose named {n:?}"))))
            .collect::<Result<_>>()?,
    };
    let mut samples = Vec::with_capacity(heads.len() * facs.len());
    for (hi, h) in heads.iter().enumerate() {
        let cover = render::coverage(&h.mesh.vertices, &h.mesh.faces, &s)?;
        let rig = if cfg.stage == 2 { Some(ds.load_rig(&h.id)?) } else { None };
        for &pose in &selected {
            let sup = ds.load_sup2d(&h.id, pose)?;
            sup.check(&s)?;
            let valid = cover.iter().zip(&sup.mask).map(|(&c, &m)| c && m >= 0.5).collect();
            let gt = rig.as_ref().map(|r| h.mesh.vertices.iter().zip(&r[pose]).map(|(v, d)| math::add(*v, *d)).collect());
            samples.push(Sample { head: hi, pose, sup, valid, gt });
        }
    }
    Ok(Loaded { heads, facs, samples })
}

/// Loss value, per-term values and parameter gradients of one sample.
pub struct SampleGrad {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub grads: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn sample_grad(
    params: &ModelParams,
    head: &HeadData,
    facs: &FacsVector,
    sample: &Sample,
    stage: u32,
    cfg: &TrainConfig,
    s: &RenderSettings,
) -> Result<SampleGrad> {
    let input = MeshInput::new(&head.mesh, &head.ops)?;
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, true);
    let d = network::forward_var(&mut tape, &p, &input, facs, &params.config)?;
    let mesh = &head.mesh;
    let lt = if stage == 1 {
        losses::stage1(&mut tape, &mesh.vertices, d, &mesh.faces, &sample.sup, &sample.valid, s, &cfg.stage1)?
    } else {
        let gt = sample.gt.as_deref().ok_or_else(|| Error::DatasetMissing(format!("3D ground truth for {}", head.id)))?;
        let spec = mesh.landmark_indices.as_deref().map(|v| LandmarkSpec { vertices: v, eyelid_pairs: &head.landmarks.eyelid_pairs });
        losses::stage2(&mut tape, &mesh.vertices, d, &mesh.faces, &sample.sup, gt, spec, s, &cfg.stage2)?
    };
    let total = tape.value(lt.total).item();
    let terms = lt.values(&tape);
    let mut g = tape.backward(lt.total)?;
    let grads = p.vars.iter().zip(&params.tensors).map(|(v, t)| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    Ok(SampleGrad { total, terms, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: u32,
    pub steps: usize,
    pub samples: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

fn resolve_model(cfg: &TrainConfig, facs_dim: usize) -> Result<Checkpoint> {
    let ck = match &cfg.init {
        Some(path) => {
            let mut ck = formats::load_checkpoint(path)?;
            if let Some(m) = &cfg.model {
                if *m != ck.params.config {
                    return Err(Error::CheckpointMismatch(format!("{} was trained with a different model config", path.display())));
                }
            }
            ck.adam = None;
            ck.meta.stage = cfg.stage;
            ck
        }
        None => {
            let model = cfg.model.clone().unwrap_or_else(|| ModelConfig { facs_dim, ..Default::default() });
            Checkpoint::new(init_model(&model, cfg.seed)?, cfg.stage, cfg.seed)
        }
    };
    if ck.params.config.facs_dim != facs_dim {
        return Err(Error::CheckpointMismatch(format!("model takes {} action units, dataset has {facs_dim}", ck.params.config.facs_dim)));
    }
    Ok(ck)
}

fn dump_nonfinite(cfg: &TrainConfig, step: usize, detail: &str, ck: &Checkpoint) -> Error {
    let dump = cfg.out.join("nonfinite.json");
    let info = serde_json::json!({ "step": step, "detail": detail, "params_finite": ck.params.is_finite() });
    let _ = fsutil::write_json(&dump, &info);
    let _ = formats::save_checkpoint(&cfg.out.join("nonfinite.rfck"), ck);
    Error::NonFiniteLoss { step, detail: detail.to_string(), dump }
}

/// Runs one training stage as configured and returns where the final
/// checkpoint went.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data)?;
    train_on(&ds, cfg)
}

pub fn train_on(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let facs_dim = ds.manifest.poses.first().map(|p| p.facs.len()).ok_or_else(|| Error::DatasetMissing("empty pose table".into()))?;
    let mut ck = resolve_model(cfg, facs_dim)?;
    let loaded = load(ds, cfg, ck.params.config.k)?;
    let s = ds.render_settings();
    let per_epoch = loaded.samples.len().div_ceil(cfg.accumulate);
    let total = per_epoch.saturating_mul(cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));
    let schedule = Schedule {
        lr: cfg.lr,
        warmup: cfg.warmup.unwrap_or(total / 20),
        total,
        restart_period: cfg.restart_period,
    };
    let mut adam = Adam::new(AdamConfig::default(), &ck.params.tensors);
    let names: &[&str] = if cfg.stage == 1 { &STAGE1_TERMS } else { &STAGE2_TERMS };
    let mut csv = format!("step,epoch,lr,loss,{}\n", names.join(","));
    fsutil::write_json(&cfg.out.join("config.json"), cfg)?;
    let mut step = 0;
    let mut last = f64::NAN;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..loaded.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64 + 1) << 32) ^ cfg.stage as u64));
        for window in order.chunks(cfg.accumulate) {
            if step >= total {
                break 'epochs;
            }
            let results: Vec<Result<SampleGrad>> = window
                .par_iter()
                .map(|&i| {
                    let smp = &loaded.samples[i];
                    sample_grad(&ck.params, &loaded.heads[smp.head], &loaded.facs[smp.pose], smp, cfg.stage, cfg, &s)
                })
                .collect();
            let mut grads: Option<Vec<Tensor>> = None;
            let mut loss = 0.0;
            let mut terms = vec![0.0; names.len()];
            for (r, &i) in results.into_iter().zip(window) {
                let g = r?;
                if !g.total.is_finite() || g.grads.iter().any(|t| !t.is_finite()) {
                    let smp = &loaded.samples[i];
                    let detail = format!("head {} pose {}: loss {} terms {:?}", loaded.heads[smp.head].id, smp.pose, g.total, g.terms);
                    return Err(dump_nonfinite(cfg, step, &detail, &ck));
                }
                loss += g.total;
                for (n, v) in &g.terms {
                    if let Some(k) = names.iter().position(|x| x == n) {
                        terms[k] += v;
                    }
                }
                grads = Some(match grads {
                    None => g.grads,
                    Some(mut acc) => {
                        for (a, b) in acc.iter_mut().zip(&g.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            let inv = 1.0 / window.len() as f64;
            let mut grads = grads.expect("non-empty window");
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            let lr = schedule.lr_at(step);
            adam.update(&mut ck.params.tensors, &grads, lr)?;
            last = loss * inv;
            let _ = write!(csv, "{step},{epoch},{lr:e},{:e}", last);
            for t in &terms {
                let _ = write!(csv, ",{:e}", t * inv);
            }
            csv.push('\n');
            step += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                eprintln!("stage {} step {step}/{total} loss {last:.4e} lr {lr:.2e} {:.0}s", cfg.stage, start.elapsed().as_secs_f64());
            }
        }
        ck.meta.step = step as u64;
        ck.meta.epoch = epoch as u64 + 1;
        if cfg.checkpoint_every_epoch {
            ck.adam = Some(adam.clone());
            formats::save_checkpoint(&cfg.out.join(format!("epoch-{:03}.rfck", epoch + 1)), &ck)?;
        }
    }
    ck.meta.step = step as u64;
    ck.adam = Some(adam);
    let final_path = cfg.out.join("final.rfck");
    formats::save_checkpoint(&final_path, &ck)?;
    fsutil::write_atomic(&cfg.out.join("loss.csv"), csv.as_bytes())?;
    ds.write_audit(&cfg.out.join("audit.log"))?;
    Ok(TrainSummary {
        stage: cfg.stage,
        steps: step,
        samples: loaded.samples.len(),
        final_loss: last,
        checkpoint: final_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Reads a loss log back as `(step, loss)` pairs.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = String::from_utf8_lossy(&fsutil::read(path)?).into_owned();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut f = line.split(',');
        let parse = || Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "bad loss row".into() };
        let step = f.next().and_then(|x| x.parse().ok()).ok_or_else(parse)?;
        let loss = f.nth(2).and_then(|x| x.parse().ok()).ok_or_else(parse)?;
        out.push((step, loss));
    }
    Ok(out)
}
