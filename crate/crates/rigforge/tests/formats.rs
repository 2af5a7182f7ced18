use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rigforge::core::autodiff::Tensor;
use rigforge::core::mesh::primitives;
use rigforge::core::network::{init_model, ModelConfig};
use rigforge::core::rig::{BlendshapeRig, RigPose, RigWeights};
use rigforge::core::synth::{make_head, HeadParams};
use rigforge::core::{FacsVector, NormalizationTransform, SurfaceOperators, TriMesh};
use rigforge::formats::{self, Checkpoint};
use rigforge::image::{self, Image};
use rigforge::{infer, obj, rigfile, Error};

fn small_config() -> ModelConfig {
    ModelConfig { width: 8, blocks: 1, global_width: 8, global_dim: 8, ..Default::default() }
}

fn toy_rig() -> BlendshapeRig {
    let mesh = primitives::icosphere(1, 1.0);
    let n = mesh.vertex_count();
    let poses = (0..3)
        .map(|j| {
            let delta = (0..n).map(|i| [0.01 * j as f64, 0.001 * i as f64, -0.02]).collect();
            RigPose { name: format!("pose{j}"), facs: FacsVector::multi_hot(12, &[j]).unwrap(), delta }
        })
        .collect();
    BlendshapeRig::new(mesh, poses, NormalizationTransform { center: [0.1, -0.2, 0.3], scale: 2.5 }).unwrap()
}

#[test]
fn obj_fans_quads_and_uses_relative_indices() {
    let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -2 -1\n";
    let m = obj::parse_obj(text, Path::new("q.obj")).unwrap();
    assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3], [0, 2, 3]]);
}

#[test]
fn obj_rejects_index_zero_and_empty() {
    let e = obj::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n", Path::new("z.obj")).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
    let e = obj::parse_obj("v 0 0 0\n", Path::new("e.obj")).unwrap_err();
    assert!(matches!(e, Error::EmptyMesh { .. }), "{e}");
}

#[test]
fn obj_round_trip_is_exact() {
    let head = make_head(&HeadParams { level: 2, ..Default::default() }).unwrap();
    let text = obj::write_obj(head.mesh());
    let back = obj::parse_obj(&text, Path::new("h.obj")).unwrap();
    assert_eq!(back.vertices, head.mesh().vertices);
    assert_eq!(back.faces, head.mesh().faces);
    assert_eq!(back.uv, head.mesh().uv);
}

#[test]
fn missing_obj_names_the_path() {
    let e = obj::load_obj(Path::new("/nonexistent/face.obj")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert!(e.to_string().contains("/nonexistent/face.obj"));
}

#[test]
fn tensor_round_trip_and_corruption() {
    let t = Tensor::new(&[2, 3, 2], (0..12).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
    let bytes = formats::encode_tensor(&t);
    assert_eq!(formats::decode_tensor(&bytes, Path::new("t")).unwrap(), t);
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(matches!(formats::decode_tensor(&bad, Path::new("t")), Err(Error::ChecksumMismatch { .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(formats::decode_tensor(&magic, Path::new("t")), Err(Error::BadMagic { .. })));
}

#[test]
fn checkpoint_round_trip_with_optimizer_state() {
    let params = init_model(&small_config(), 3).unwrap();
    let mut c = Checkpoint::new(params.clone(), 2, 3);
    c.meta.step = 17;
    c.meta.tag = "x".into();
    c.adam = Some(rigforge::core::autodiff::Adam::new(Default::default(), &params.tensors));
    let bytes = formats::encode_checkpoint(&c).unwrap();
    let back = formats::decode_checkpoint(&bytes, Path::new("c")).unwrap();
    assert_eq!(back, c);
}

#[test]
fn operators_cache_checks_the_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ops.rfop");
    let mesh = primitives::icosphere(1, 1.0);
    let ops = SurfaceOperators::precompute(&mesh, Some(8)).unwrap();
    formats::save_operators(&p, &ops, &mesh).unwrap();
    let back = formats::load_operators(&p, &mesh).unwrap();
    assert_eq!(back.laplacian, ops.laplacian);
    assert_eq!(back.basis, ops.basis);
    let moved = mesh.with_vertices(mesh.vertices.iter().map(|v| [v[0] * 1.1, v[1], v[2]]).collect()).unwrap();
    let e = formats::load_operators(&p, &moved).unwrap_err();
    assert!(matches!(e, Error::Core(rigforge::core::Error::OperatorMismatch(_))), "{e}");
    let again = formats::operators_cached(Some(&p), &moved, Some(8)).unwrap();
    assert_eq!(formats::load_operators(&p, &moved).unwrap().basis, again.basis);
}

#[test]
fn rig_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.rfrig");
    let rig = toy_rig();
    rigfile::save_rig(&p, &rig).unwrap();
    let back = rigfile::load_rig(&p).unwrap();
    assert_eq!(back, rigfile::quantize(&rig).unwrap());
    assert_eq!(back.transform, rig.transform);
    let (m, start) = rigfile::decode_manifest(&std::fs::read(&p).unwrap(), &p).unwrap();
    assert_eq!(start % 4, 0);
    assert_eq!(m.pose_count, 3);
    assert_eq!(m.poses[1].name, "pose1");
}

#[test]
fn rig_file_truncation_and_empty_pose_table() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = rigfile::encode_rig(&toy_rig()).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
        let e = rigfile::decode_rig(&bytes[..cut], dir.path()).unwrap_err();
        assert!(matches!(e, Error::ChecksumMismatch { .. }), "cut {cut}: {e}");
    }
    let rig = toy_rig();
    let empty = BlendshapeRig { poses: Vec::new(), ..rig };
    assert!(rigfile::encode_rig(&empty).is_err());
}

#[test]
fn pose_command_blends_named_weights() {
    let dir = tempfile::tempdir().unwrap();
    let rp = dir.path().join("r.rfrig");
    let rig = toy_rig();
    rigfile::save_rig(&rp, &rig).unwrap();
    let q = rigfile::quantize(&rig).unwrap();
    let wp = dir.path().join("w.json");
    std::fs::write(&wp, r#"{"pose1": 1.0, "pose2": 0.5}"#).unwrap();
    let out = dir.path().join("p.obj");
    infer::pose(&rp, &wp, &out).unwrap();
    let got = obj::load_obj(&out).unwrap();
    let want = q.evaluate(&RigWeights(vec![0.0, 1.0, 0.5])).unwrap();
    assert_eq!(got.vertices, want.vertices);
    let single = q.evaluate_vertices(&RigWeights::one_hot(3, 1)).unwrap();
    let expect: Vec<_> = q.neutral.vertices.iter().zip(&q.poses[1].delta).map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]).collect();
    assert_eq!(single, expect);
    let zero = q.evaluate(&RigWeights::zeros(3)).unwrap();
    assert_eq!(zero.vertices, q.neutral.vertices);
    std::fs::write(&wp, r#"{"nope": 1.0}"#).unwrap();
    assert!(matches!(infer::pose(&rp, &wp, &out), Err(Error::BadConfig(_))));
    let mut map = BTreeMap::new();
    map.insert("pose0".to_string(), f64::NAN);
    assert!(infer::weights_from_map(&q, &map).is_err());
}

#[test]
fn png_round_trip_is_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.png");
    let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i as f64 / 35.0).min(1.0)).collect();
    let img = Image { width: 4, height: 3, channels: 3, data: data.clone() };
    image::save_png(&p, &img).unwrap();
    let back = image::load_png(&p).unwrap();
    assert_eq!((back.width, back.height, back.channels), (4, 3, 3));
    for (a, b) in back.data.iter().zip(&data) {
        assert_eq!(*a, image::quantize(*b));
    }
}

#[test]
fn zero_flow_is_white() {
    let img = image::flow_to_color(&[0.5; 8], 2, 2);
    assert!(img.data.iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn obj_round_trips_arbitrary_coordinates(coords in prop::collection::vec(-1e3f64..1e3, 9)) {
        let verts: Vec<[f64; 3]> = coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let m = TriMesh::new(verts, vec![[0, 1, 2]]).unwrap();
        let back = obj::parse_obj(&obj::write_obj(&m), Path::new("p.obj")).unwrap();
        prop_assert_eq!(back.vertices, m.vertices);
    }

    #[test]
    fn tensor_round_trips(data in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..40)) {
        let t = Tensor::new(&[data.len()], data).unwrap();
        prop_assert_eq!(formats::decode_tensor(&formats::encode_tensor(&t), Path::new("t")).unwrap(), t);
    }
}

#[test]
fn ablation_names_agree_everywhere() {
    use rigforge::eval::Ablation;
    for a in Ablation::ALL {
        assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
    }
    assert_eq!(serde_json::from_str::<Ablation>("\"no2d\"").unwrap(), Ablation::No2d);
}
