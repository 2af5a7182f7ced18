use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rigforge::core::facs::FacsVector;
use rigforge::core::math;
use rigforge::core::network::{init_model, ModelConfig};
use rigforge::core::render::{self, FLOW_ZERO};
use rigforge::core::rig::MM_PER_UNIT;
use rigforge::core::synth;
use rigforge::dataset::{self, head_dir, DataConfig, Dataset, Role, Split};
use rigforge::eval::{self, Ablation, EvalReport, HeadEval};
use rigforge::formats::{self, Checkpoint};
use rigforge::train::{self, TrainConfig};
use rigforge::{fsutil, infer, rigfile, Error};

fn tiny_data(noise: f64) -> DataConfig {
    DataConfig {
        seed: 5,
        rigged: 2,
        unrigged: 2,
        test_rigged: 1,
        test_unrigged: 1,
        interp_factor: 1,
        level: 2,
        resolution: 24,
        k: Some(16),
        flow_noise_px: noise,
        ..Default::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig { width: 8, blocks: 1, global_width: 8, global_dim: 8, k: Some(16), ..Default::default() }
}

struct Shared {
    _dir: tempfile::TempDir,
    noisy: PathBuf,
    clean: PathBuf,
    /// Wider soft edges, for optimization checks on a coarse raster.
    smooth: PathBuf,
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let noisy = dir.path().join("noisy");
        let clean = dir.path().join("clean");
        dataset::generate_dataset(&tiny_data(0.5), &noisy).unwrap();
        dataset::generate_dataset(&tiny_data(0.0), &clean).unwrap();
        let smooth = dir.path().join("smooth");
        dataset::generate_dataset(&DataConfig { sigma: 3e-3, ..tiny_data(0.0) }, &smooth).unwrap();
        Shared { _dir: dir, noisy, clean, smooth }
    })
}

fn stage_cfg(stage: u32, data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        stage,
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        model: Some(tiny_model()),
        lr: 1e-3,
        max_steps: Some(4),
        ..Default::default()
    }
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn planned_counts() {
    let m = dataset::plan(&DataConfig::default()).unwrap();
    let count = |r, s| m.select(Some(r), s).len();
    assert_eq!(count(Role::Rigged, Split::Train), 12);
    assert_eq!(count(Role::Unrigged, Split::Train), 18);
    assert_eq!(count(Role::Rigged, Split::Test), 2);
    assert_eq!(count(Role::Unrigged, Split::Test), 2);
    // test heads never take part in a blend
    let test: Vec<_> = m.select(None, Split::Test).iter().map(|e| e.recipe.base.clone()).collect();
    for e in m.select(None, Split::Train) {
        assert!(!test.contains(&e.recipe.base));
        assert!(e.recipe.partner.as_ref().is_none_or(|p| !test.contains(p)));
    }
}

#[test]
fn bad_data_configs() {
    for c in [
        DataConfig { rigged: 0, ..Default::default() },
        DataConfig { test_rigged: 6, ..Default::default() },
        DataConfig { interp_factor: 0, ..Default::default() },
        DataConfig { alpha_range: (0.5, 0.2), ..Default::default() },
    ] {
        assert!(matches!(dataset::plan(&c), Err(Error::BadConfig(_))));
    }
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    dataset::generate_dataset(&tiny_data(0.5), &dir.path().join("a")).unwrap();
    let a = files_under(&dir.path().join("a"));
    let b = files_under(&shared().noisy);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs", k.display());
    }
}

#[test]
fn unrigged_heads_carry_no_3d_ground_truth() {
    let ds = Dataset::open(&shared().noisy).unwrap();
    for e in &ds.manifest.samples {
        let rig = head_dir(&ds.root, &e.id).join("rig");
        assert_eq!(rig.exists(), e.role == Role::Rigged, "{}", e.id);
        let sup = head_dir(&ds.root, &e.id).join("sup2d");
        assert_eq!(sup.exists(), e.split == Split::Train, "{}", e.id);
        if e.role == Role::Unrigged {
            assert!(matches!(ds.load_rig(&e.id), Err(Error::Firewall(_))));
        }
    }
}

#[test]
fn stored_flow_matches_the_renderer_without_noise() {
    let ds = Dataset::open(&shared().clean).unwrap();
    let s = ds.render_settings();
    let e = ds.manifest.select(Some(Role::Unrigged), Split::Train)[0];
    let head = e.recipe.build().unwrap();
    let covered = render::coverage(&head.mesh().vertices, &head.mesh().faces, &s).unwrap();
    for pose in [0, 3, 12] {
        let want = synth::render_supervision(&head, pose, &s).unwrap();
        let got = ds.load_sup2d(&e.id, pose).unwrap();
        assert_eq!(got.flow, want.flow);
        assert_eq!(got.landmarks, want.landmarks);
    }
    let noisy = Dataset::open(&shared().noisy).unwrap().load_sup2d(&e.id, 0).unwrap();
    let clean = ds.load_sup2d(&e.id, 0).unwrap();
    for (p, &c) in covered.iter().enumerate() {
        if !c {
            assert_eq!(noisy.flow[2 * p..2 * p + 2], clean.flow[2 * p..2 * p + 2]);
        }
    }
    // the still neutral renders as zero motion wherever the head is
    let still = synth::supervision_for(head.mesh(), &head.mesh().vertices, &s).unwrap();
    for (p, &c) in covered.iter().enumerate() {
        if c {
            assert_eq!(still.flow[2 * p..2 * p + 2], [FLOW_ZERO, FLOW_ZERO]);
        }
    }
    assert_ne!(noisy.flow, clean.flow);
}

#[test]
fn flow_noise_has_the_requested_spread() {
    let s = render::RenderSettings::square(100);
    let covered = vec![true; s.pixels()];
    let mut flow = vec![FLOW_ZERO; 2 * s.pixels()];
    dataset::add_flow_noise(&mut flow, &covered, &s, 2.0, 9);
    let px: Vec<f64> = flow.iter().map(|f| (f - FLOW_ZERO) * 2.0 * s.width as f64).collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let sd = (px.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / px.len() as f64).sqrt();
    assert!(mean.abs() < 0.05, "{mean}");
    assert!((sd - 2.0).abs() < 0.05, "{sd}");
}

#[test]
fn stage1_smoke_loss_keeps_falling() {
    let dir = tempfile::tempdir().unwrap();
    let names = dataset::pose_table();
    let cfg = TrainConfig {
        stage: 1,
        data: shared().smooth.clone(),
        out: dir.path().to_path_buf(),
        model: Some(tiny_model()),
        lr: 1e-2,
        warmup: Some(0),
        epochs: 50,
        accumulate: 2,
        include_unrigged: false,
        poses: Some(vec![names[0].name.clone(), names[2].name.clone()]),
        ..Default::default()
    };
    let s = train::train(&cfg).unwrap();
    assert_eq!((s.steps, s.samples), (50, 2));
    let rows = train::read_loss_csv(&dir.path().join("loss.csv")).unwrap();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().enumerate().all(|(i, r)| r.0 == i));
    let mean = |w: &[(usize, f64)]| w.iter().map(|r| r.1).sum::<f64>() / w.len() as f64;
    for t in 0..=rows.len() - 20 {
        let (a, b) = (mean(&rows[t..t + 10]), mean(&rows[t + 10..t + 20]));
        assert!(b <= 0.99 * a, "window at step {t}: {a} -> {b}");
    }
    assert!(dir.path().join("epoch-050.rfck").exists());
    assert!(dir.path().join("final.rfck").exists());
}

#[test]
fn training_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = &shared().noisy;
    let zero = TrainConfig { epochs: 0, ..stage_cfg(1, data, dir.path()) };
    assert!(matches!(train::train(&zero), Err(Error::BadConfig(_))));
    let unknown = TrainConfig { poses: Some(vec!["nope".into()]), ..stage_cfg(1, data, dir.path()) };
    assert!(matches!(train::train(&unknown), Err(Error::BadConfig(_))));
    assert!(matches!(train::train(&stage_cfg(1, &dir.path().join("none"), dir.path())), Err(Error::DatasetMissing(_))));

    // stage 2 on a dataset whose rigged heads are all held out
    let copy = dir.path().join("norig");
    for (rel, bytes) in files_under(data) {
        fsutil::write_atomic(&copy.join(rel), &bytes).unwrap();
    }
    let mut m = Dataset::open(&copy).unwrap().manifest;
    for e in m.samples.iter_mut().filter(|e| e.role == Role::Rigged) {
        e.split = Split::Test;
    }
    fsutil::write_json(&copy.join(dataset::MANIFEST), &m).unwrap();
    assert!(matches!(train::train(&stage_cfg(2, &copy, &dir.path().join("o"))), Err(Error::DatasetMissing(_))));

    let s1 = train::train(&stage_cfg(1, data, &dir.path().join("s1"))).unwrap();
    let other = TrainConfig {
        init: Some(s1.checkpoint.clone()),
        model: Some(ModelConfig { width: 12, ..tiny_model() }),
        ..stage_cfg(2, data, &dir.path().join("s2"))
    };
    assert!(matches!(train::train(&other), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn step_budget_caps_unbounded_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: usize::MAX, max_steps: Some(3), ..stage_cfg(1, &shared().clean, dir.path()) };
    assert_eq!(train::train(&cfg).unwrap().steps, 3);
}

#[test]
fn stage2_never_reads_unrigged_supervision() {
    let dir = tempfile::tempdir().unwrap();
    let data = &shared().noisy;
    let s1 = train::train(&stage_cfg(1, data, &dir.path().join("s1"))).unwrap();
    let log1 = std::fs::read_to_string(dir.path().join("s1/audit.log")).unwrap();
    assert!(log1.lines().any(|l| l.starts_with("sup2d heads/unr-")));
    let cfg = TrainConfig { init: Some(s1.checkpoint), max_steps: Some(30), epochs: 2, ..stage_cfg(2, data, &dir.path().join("s2")) };
    let s2 = train::train(&cfg).unwrap();
    assert_eq!(s2.samples, dataset::pose_table().len());
    let log = std::fs::read_to_string(dir.path().join("s2/audit.log")).unwrap();
    assert!(!log.is_empty());
    assert!(log.lines().all(|l| !l.contains("unr-")), "{log}");
    let rows = train::read_loss_csv(&dir.path().join("s2/loss.csv")).unwrap();
    assert_eq!(rows.len(), 30);
    let header = std::fs::read_to_string(dir.path().join("s2/loss.csv")).unwrap();
    assert!(header.starts_with("step,epoch,lr,loss,img,mask,mse3d,lmk,ec\n"));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = &shared().noisy;
    let a = train::train(&stage_cfg(1, data, &dir.path().join("a"))).unwrap();
    let b = train::train(&stage_cfg(1, data, &dir.path().join("b"))).unwrap();
    assert_eq!(std::fs::read(a.checkpoint).unwrap(), std::fs::read(b.checkpoint).unwrap());
}

#[test]
fn zero_prediction_scores_the_mean_ground_truth_norm() {
    let ds = Dataset::open(&shared().noisy).unwrap();
    let params = init_model(&tiny_model(), 1).unwrap();
    let r = eval::evaluate(&params, &ds, Split::Test, Ablation::Full).unwrap();
    let mut norms = Vec::new();
    for e in ds.manifest.select(None, Split::Test) {
        let head = e.recipe.build().unwrap();
        for p in &head.rig.poses {
            norms.extend(p.delta.iter().map(|d| math::norm(*d) * MM_PER_UNIT));
        }
    }
    let want = norms.iter().sum::<f64>() / norms.len() as f64;
    assert!(want > 1.0);
    assert!((r.mae - want).abs() < 1e-9 * want, "{} vs {want}", r.mae);
    assert_eq!(r.neutral_ratio, 0.0);
    assert_eq!(r.heads, 2);
    assert_eq!(r.poses, 20);
    r.validate().unwrap();
}

#[test]
fn ground_truth_scores_perfectly_and_round_trips() {
    let ds = Dataset::open(&shared().noisy).unwrap();
    let poses: Vec<(String, FacsVector)> = ds.manifest.poses.iter().map(|p| (p.name.clone(), p.facs_vector().unwrap())).collect();
    let built: Vec<_> = ds.manifest.select(None, Split::Test).into_iter().map(|e| (e.clone(), e.recipe.build().unwrap())).collect();
    let heads: Vec<HeadEval<'_>> = built
        .iter()
        .map(|(e, h)| {
            let gt: Vec<_> = h.rig.poses.iter().map(|p| p.delta.clone()).collect();
            HeadEval { id: e.id.clone(), role: e.role, mesh: h.mesh(), pred: gt.clone(), gt, pred_neutral: vec![[0.0; 3]; h.mesh().vertex_count()] }
        })
        .collect();
    let r = eval::score(Ablation::NoFlow, Split::Test, &poses, &heads).unwrap();
    assert_eq!(r.mae, 0.0);
    assert_eq!(r.q95, 0.0);
    assert_eq!(r.penetration, 0.0);
    assert!(r.gaze_eye_to_face > 1e6);
    r.validate().unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    back.validate().unwrap();
    let mut broken = back;
    broken.per_pose.pop();
    assert!(broken.validate().is_err());
}

#[test]
fn eval_checks_the_ablation_against_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.rfck");
    formats::save_checkpoint(&p, &Checkpoint::new(init_model(&tiny_model(), 0).unwrap(), 2, 0)).unwrap();
    let data = &shared().noisy;
    assert!(matches!(eval::evaluate_checkpoint(&p, data, Split::Test, Ablation::NoGlobal), Err(Error::CheckpointMismatch(_))));
    let r = eval::evaluate_checkpoint(&p, data, Split::Test, Ablation::Full).unwrap();
    let again = eval::evaluate_checkpoint(&p, data, Split::Test, Ablation::Full).unwrap();
    assert_eq!(serde_json::to_vec(&r).unwrap(), serde_json::to_vec(&again).unwrap());
    for a in Ablation::ALL {
        assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
    }
}

#[test]
fn infer_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.rfck");
    let mut params = init_model(&tiny_model(), 4).unwrap();
    // a nonzero head so the rig is not trivially the neutral
    for (n, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        if n.starts_with("head.") {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = 1e-3 * ((i % 7) as f64 - 3.0);
            }
        }
    }
    formats::save_checkpoint(&ck, &Checkpoint::new(params, 2, 0)).unwrap();
    let mesh = head_dir(&shared().noisy, "test-rig-00").join("neutral.obj");
    let (a, b) = (dir.path().join("a.rfrig"), dir.path().join("b.rfrig"));
    let (rig, t) = infer::infer(&ck, &mesh, None, &a).unwrap();
    infer::infer(&ck, &mesh, None, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(t.precompute.as_nanos() > 0 && t.forward.as_nanos() > 0);
    let back = rigfile::load_rig(&a).unwrap();
    assert_eq!(back, rigfile::quantize(&rig).unwrap());
    assert_eq!(back.pose_count(), 20);
    assert_eq!(back.poses[0].name, "c_JD JawDrop");
    assert!(back.poses.iter().any(|p| p.delta.iter().any(|d| math::norm(*d) > 0.0)));

    let missing = dir.path().join("missing.obj");
    let e = infer::infer(&ck, &missing, None, &b).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert!(e.to_string().contains("missing.obj"), "{e}");
}

#[test]
fn infer_accepts_a_custom_pose_set() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.rfck");
    formats::save_checkpoint(&ck, &Checkpoint::new(init_model(&tiny_model(), 0).unwrap(), 2, 0)).unwrap();
    let mut facs = vec![0.0; 12];
    facs[0] = 0.5;
    let poses = dir.path().join("poses.json");
    fsutil::write_json(&poses, &vec![infer::PoseSpec { name: "half jaw".into(), facs }]).unwrap();
    let mesh = dir.path().join("ico.obj");
    rigforge::obj::save_obj(&mesh, &rigforge::core::mesh::primitives::icosphere(2, 3.0)).unwrap();
    let out = dir.path().join("r.rfrig");
    let (rig, _) = infer::infer(&ck, &mesh, Some(&poses), &out).unwrap();
    assert_eq!(rig.pose_count(), 1);
    assert_eq!(rig.poses[0].name, "half jaw");
    assert!((rig.transform.scale - 1.0 / 3.0).abs() < 1e-12);
    let bad = dir.path().join("bad.json");
    fsutil::write_json(&bad, &vec![infer::PoseSpec { name: "x".into(), facs: vec![0.0; 3] }]).unwrap();
    assert!(infer::infer(&ck, &mesh, Some(&bad), &out).is_err());
}
