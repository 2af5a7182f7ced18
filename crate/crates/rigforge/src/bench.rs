//! The ablation benchmark: one dataset, one training run per variant, one
//! report per run, and a summary of the orderings the variants should show.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rigforge_core::network::ModelConfig;
use rigforge_core::render::{Stage1Weights, Stage2Weights};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataConfig, Dataset, Split};
use crate::error::Result;
use crate::eval::{self, Ablation, EvalReport};
use crate::formats;
use crate::fsutil;
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBudget {
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub accumulate: usize,
    pub stage1: StageBudget,
    pub stage2: StageBudget,
    pub ablations: Vec<Ablation>,
    pub log_every: usize,
}

impl Default for StageBudget {
    fn default() -> Self {
        Self { epochs: 1, max_steps: None, lr: 1e-3 }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            accumulate: 1,
            stage1: StageBudget::default(),
            stage2: StageBudget::default(),
            ablations: Ablation::ALL.to_vec(),
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ablation: Ablation,
    pub mae: f64,
    pub q95: f64,
    pub mae_rigged: Option<f64>,
    pub mae_unrigged: Option<f64>,
    pub penetration: f64,
    pub gaze_eye_to_face: f64,
    pub neutral_ratio: f64,
    pub train_steps: usize,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchSummary {
    pub fn row(&self, a: Ablation) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }
}

/// Training recipe of an ablation: optional stage 1, then stage 2.
pub fn stage_configs(cfg: &BenchConfig, a: Ablation, data: &Path, out: &Path) -> (Option<TrainConfig>, TrainConfig) {
    let model = ModelConfig { use_global: a != Ablation::NoGlobal, ..cfg.model.clone() };
    let base = TrainConfig {
        data: data.to_path_buf(),
        seed: cfg.seed,
        accumulate: cfg.accumulate,
        checkpoint_every_epoch: false,
        log_every: cfg.log_every,
        ..Default::default()
    };
    let s1 = (a != Ablation::No2d).then(|| TrainConfig {
        stage: 1,
        out: out.join("stage1"),
        model: Some(model.clone()),
        lr: cfg.stage1.lr,
        epochs: cfg.stage1.epochs,
        max_steps: cfg.stage1.max_steps,
        include_unrigged: a != Ablation::NoUnrigged,
        stage1: Stage1Weights { dis2d: if a == Ablation::NoFlow { 0.0 } else { Stage1Weights::default().dis2d }, ..Default::default() },
        ..base.clone()
    });
    let stage2 = if a == Ablation::No2d { Stage2Weights { img: 0.0, mask: 0.0, lmk: 0.0, ec: 0.0, ..Default::default() } } else { Stage2Weights::default() };
    let s2 = TrainConfig {
        stage: 2,
        out: out.join("stage2"),
        model: Some(model),
        init: s1.as_ref().map(|c| c.out.join("final.rfck")),
        lr: cfg.stage2.lr,
        epochs: cfg.stage2.epochs,
        max_steps: cfg.stage2.max_steps,
        stage2,
        ..base
    };
    (s1, s2)
}

/// Trains and evaluates one ablation; returns the report and the final
/// checkpoint path.
pub fn run_ablation(cfg: &BenchConfig, a: Ablation, ds: &Dataset, out: &Path) -> Result<(EvalReport, PathBuf, usize, f64)> {
    let start = Instant::now();
    let (s1, s2) = stage_configs(cfg, a, &ds.root, out);
    let mut steps = 0;
    if let Some(c) = &s1 {
        steps += train::train_on(ds, c)?.steps;
    }
    let fresh = Dataset::open(&ds.root)?;
    let sum = train::train_on(&fresh, &s2)?;
    steps += sum.steps;
    let ck = formats::load_checkpoint(&sum.checkpoint)?;
    let report = eval::evaluate(&ck.params, ds, Split::Test, a)?;
    fsutil::write_json(&out.join("report.json"), &report)?;
    Ok((report, sum.checkpoint, steps, start.elapsed().as_secs_f64()))
}

/// Runs the whole benchmark under `out`. The archive directory receives the
/// summary, the manifest, every report and parameter-only checkpoints.
pub fn run_bench(cfg: &BenchConfig, out: &Path) -> Result<BenchSummary> {
    let data = out.join("data");
    if !data.join(dataset::MANIFEST).exists() {
        dataset::generate_dataset(&cfg.data, &data)?;
    }
    let ds = Dataset::open(&data)?;
    let archive = out.join("archive");
    fsutil::write_json(&archive.join("manifest.json"), &ds.manifest)?;
    let mut rows = Vec::new();
    for &a in &cfg.ablations {
        let dir = out.join(a.as_str());
        let (r, ck, steps, secs) = run_ablation(cfg, a, &ds, &dir)?;
        let mut c = formats::load_checkpoint(&ck)?;
        c.adam = None;
        formats::save_checkpoint(&archive.join(format!("{a}.rfck")), &c)?;
        fsutil::write_json(&archive.join(format!("{a}.report.json")), &r)?;
        rows.push(BenchRow {
            ablation: a,
            mae: r.mae,
            q95: r.q95,
            mae_rigged: r.mae_rigged,
            mae_unrigged: r.mae_unrigged,
            penetration: r.penetration,
            gaze_eye_to_face: r.gaze_eye_to_face,
            neutral_ratio: r.neutral_ratio,
            train_steps: steps,
            train_seconds: secs,
        });
        let summary = BenchSummary { config: cfg.clone(), rows: rows.clone() };
        fsutil::write_json(&archive.join("summary.json"), &summary)?;
    }
    Ok(BenchSummary { config: cfg.clone(), rows })
}
