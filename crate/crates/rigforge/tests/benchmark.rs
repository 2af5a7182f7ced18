//! Properties of the committed benchmark run under `bench/`.

use std::path::{Path, PathBuf};

use rigforge::bench::BenchSummary;
use rigforge::dataset::{self, Dataset, DatasetManifest, Role, Split};
use rigforge::eval::{self, Ablation, EvalReport};
use rigforge::{formats, fsutil};

fn bench_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../bench")
}

#[test]
fn archive_is_complete_and_consistent() {
    let s: BenchSummary = fsutil::read_json(&bench_dir().join("summary.json")).unwrap();
    assert_eq!(s.rows.len(), Ablation::ALL.len());
    for a in Ablation::ALL {
        let row = s.row(a).unwrap();
        let rep: EvalReport = fsutil::read_json(&bench_dir().join(format!("{a}.report.json"))).unwrap();
        rep.validate().unwrap();
        assert_eq!(rep.ablation, a);
        assert_eq!((rep.mae, rep.q95, rep.penetration), (row.mae, row.q95, row.penetration));
        let ck = formats::load_checkpoint(&bench_dir().join(format!("{a}.rfck"))).unwrap();
        assert_eq!(ck.params.config.use_global, a != Ablation::NoGlobal);
    }
}

#[test]
fn trained_model_is_near_neutral_for_zero_activation() {
    // a few training heads suffice; rebuilding each one costs an eigensolve
    let mut m: DatasetManifest = fsutil::read_json(&bench_dir().join("manifest.json")).unwrap();
    let keep: Vec<String> = m.select(Some(Role::Rigged), Split::Train).iter().take(3).map(|s| s.id.clone()).collect();
    assert_eq!(keep.len(), 3);
    m.samples.retain(|s| keep.contains(&s.id));
    m.train.retain(|id| keep.contains(id));
    m.test.clear();
    m.rigged.retain(|id| keep.contains(id));
    m.unrigged.clear();
    let dir = tempfile::tempdir().unwrap();
    fsutil::write_json(&dir.path().join(dataset::MANIFEST), &m).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let ck = formats::load_checkpoint(&bench_dir().join("full.rfck")).unwrap();
    let r = eval::evaluate(&ck.params, &ds, Split::Train, Ablation::Full).unwrap();
    assert_eq!(r.heads, 3);
    assert!(r.neutral_ratio < 0.1, "neutral ratio {}", r.neutral_ratio);
}
