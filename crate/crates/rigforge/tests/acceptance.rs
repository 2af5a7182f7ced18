//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion does.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rigforge::bench::BenchSummary;
use rigforge::core::autodiff::{grad_check, GradCheckMode, Tape, Tensor, Var};
use rigforge::core::facs::{self, FacsVector};
use rigforge::core::math::{self, Vec3};
use rigforge::core::mesh::primitives::{icosphere, tetrahedron};
use rigforge::core::network::{forward_var, init_model, ModelConfig, MeshInput};
use rigforge::core::operators::{self, implicit_diffuse_direct, spectral_diffuse, DiffusionKind};
use rigforge::core::render::camera::FRONT_DISTANCE;
use rigforge::core::render::losses::{self, LandmarkSpec, Stage1Weights, Stage2Weights};
use rigforge::core::render::{self, render_targets, RenderSettings, Supervision2D, FLOW_ZERO};
use rigforge::core::rig::{metric_mae, MM_PER_UNIT};
use rigforge::core::synth::HeadParams;
use rigforge::core::{Result as CoreResult, SurfaceOperators, TriMesh};
use rigforge::dataset::{self, DataConfig, Dataset, DatasetManifest, Split};
use rigforge::eval::{self, Ablation, EvalReport};
use rigforge::train::{self, TrainConfig};
use rigforge::{formats, fsutil};

/// Optimizer settings of the overfit run.
const OVERFIT_LR: f64 = 2e-3;
const OVERFIT_ACCUMULATE: usize = 4;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_MAE_MM: f64 = 2.0;
const OVERFIT_MINUTES: f64 = 30.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bench_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../bench")
}

// ---- independent oracles -------------------------------------------------

fn angle_at(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let (u, v) = (math::sub(b, a), math::sub(c, a));
    (math::dot(u, v) / (math::norm(u) * math::norm(v))).clamp(-1.0, 1.0).acos()
}

/// Dense cotangent Laplacian from interior angles, and lumped mass from
/// Heron's formula.
fn dense_oracle(m: &TriMesh) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = m.vertex_count();
    let mut l = vec![vec![0.0; n]; n];
    let mut mass = vec![0.0; n];
    for f in &m.faces {
        let p = [m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]];
        for k in 0..3 {
            let (i, j, o) = (f[(k + 1) % 3], f[(k + 2) % 3], k);
            let theta = angle_at(p[o], p[(o + 1) % 3], p[(o + 2) % 3]);
            let w = 0.5 / theta.tan();
            l[i][j] -= w;
            l[j][i] -= w;
            l[i][i] += w;
            l[j][j] += w;
        }
        let e: Vec<f64> = (0..3).map(|k| math::norm(math::sub(p[k], p[(k + 1) % 3]))).collect();
        let s = 0.5 * (e[0] + e[1] + e[2]);
        let area = (s * (s - e[0]) * (s - e[1]) * (s - e[2])).max(0.0).sqrt();
        for &v in f {
            mass[v] += area / 3.0;
        }
    }
    (l, mass)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- criteria ----------------------------------------------------------

fn operator_correctness() -> Outcome {
    let tri = TriMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.3, 0.8, 0.1]], vec![[0, 1, 2]]).unwrap();
    let mut worst_entry = 0.0f64;
    let mut worst_mass = 0.0f64;
    for m in [tri, tetrahedron(), icosphere(2, 1.0)] {
        let (l, mass) = dense_oracle(&m);
        let lap = operators::cotan_laplacian(&m);
        let lm = operators::lumped_mass(&m);
        for (i, row) in l.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst_entry = worst_entry.max((lap.get(i, j) - v).abs());
            }
        }
        worst_mass = worst_mass.max(max_abs_diff(&lm, &mass));
    }
    // generalized spectrum against a dense symmetric solve of M^-1/2 L M^-1/2
    let s = icosphere(1, 1.0);
    let n = s.vertex_count();
    let (l, mass) = dense_oracle(&s);
    let sym: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| l[i][j] / (mass[i] * mass[j]).sqrt()).collect()).collect();
    let dense = jacobi_eigenvalues(sym);
    let ops = SurfaceOperators::precompute(&s, Some(n)).unwrap();
    let worst_eig = max_abs_diff(&ops.basis.values, &dense);
    let mut sphere = Vec::new();
    for level in [2, 3, 4] {
        let ops = SurfaceOperators::precompute(&icosphere(level, 1.0), Some(10)).unwrap();
        let rel = |j: usize, exact: f64| (ops.basis.values[j] - exact).abs() / exact;
        let l1 = (1..4).map(|j| rel(j, 2.0)).fold(0.0, f64::max);
        let l2 = (4..9).map(|j| rel(j, 6.0)).fold(0.0, f64::max);
        sphere.push(l1.max(l2));
    }
    let pass = worst_entry < 1e-8 && worst_mass < 1e-8 && worst_eig < 1e-8 && sphere[2] <= 0.15 && sphere[0] >= sphere[1] && sphere[1] >= sphere[2];
    outcome(
        pass,
        format!(
            "laplacian {worst_entry:.1e}, mass {worst_mass:.1e}, spectrum {worst_eig:.1e} (tol 1e-8); sphere l(l+1) rel err by level 2/3/4: {:.3}/{:.3}/{:.3} (tol 0.15)",
            sphere[0], sphere[1], sphere[2]
        ),
    )
}

fn diffusion_invariants() -> Outcome {
    let s = icosphere(1, 1.0);
    let n = s.vertex_count();
    let full = SurfaceOperators::precompute(&s, Some(n)).unwrap();
    let field = |p: Vec3| [p[0] * p[1] + 0.5 * p[2], (2.0 * p[0]).sin()];
    let u: Vec<f64> = s.vertices.iter().flat_map(|&p| field(p)).collect();
    let (b, m) = (&full.basis, &full.mass);
    let run = |x: &[f64], t: [f64; 2], kind| spectral_diffuse(x, 2, &t, b, m, kind).unwrap();
    let identity = max_abs_diff(&run(&u, [0.0, 0.0], DiffusionKind::Spectral), &u);
    let mean = |x: &[f64], ch: usize| (0..n).map(|i| m[i] * x[i * 2 + ch]).sum::<f64>() / m.total();
    let mut conservation = 0.0f64;
    for t in [0.01, 0.3, 5.0] {
        let h = run(&u, [t, 2.0 * t], DiffusionKind::Spectral);
        for ch in 0..2 {
            conservation = conservation.max((mean(&h, ch) - mean(&u, ch)).abs());
        }
    }
    let ab = run(&run(&u, [0.02, 0.1], DiffusionKind::Spectral), [0.05, 0.03], DiffusionKind::Spectral);
    let semigroup = max_abs_diff(&ab, &run(&u, [0.07, 0.13], DiffusionKind::Spectral));
    let trunc = SurfaceOperators::precompute(&icosphere(2, 1.0), Some(30)).unwrap();
    let mut decay = 0.0f64;
    for j in [1, 7, 25] {
        let phi = trunc.basis.vector(j);
        let t = 0.04;
        let h = spectral_diffuse(&phi, 1, &[t], &trunc.basis, &trunc.mass, DiffusionKind::Spectral).unwrap();
        let f = (-trunc.basis.values[j] * t).exp();
        decay = decay.max(h.iter().zip(&phi).map(|(a, b)| (a - f * b).abs()).fold(0.0, f64::max));
    }
    let implicit = run(&u, [0.05, 0.4], DiffusionKind::Implicit);
    let direct = implicit_diffuse_direct(&full.laplacian, &full.mass, &u, 2, &[0.05, 0.4]).unwrap();
    let solve = max_abs_diff(&implicit, &direct);
    let pass = identity < 1e-8 && conservation < 1e-8 && semigroup < 1e-8 && decay < 1e-8 && solve < 1e-6;
    outcome(
        pass,
        format!("identity {identity:.1e}, mean {conservation:.1e}, semigroup {semigroup:.1e}, eigen decay {decay:.1e} (tol 1e-8); implicit vs direct {solve:.1e} (tol 1e-6)"),
    )
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            // keep away from the kinks of relu, abs and clamp
            if v.abs() < 0.05 { v + 0.1 } else { v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn reduce<'a>(t: &mut Tape<'a>, y: Var) -> CoreResult<Var> {
    let y = t.scale(y, 0.3)?;
    let y = t.exp(y)?;
    t.sum(y)
}

type Case<'c> = (&'static str, &'c Tensor, Box<dyn Fn(&mut Tape<'c>, Var) -> CoreResult<Var> + 'c>);

fn head_sample() -> TriMesh {
    let mut head = icosphere(1, 0.8);
    for p in &mut head.vertices {
        p[2] *= 0.8;
        p[1] += 0.05 * (3.0 * p[0]).sin();
    }
    let mut eye = icosphere(0, 0.15);
    for p in &mut eye.vertices {
        *p = math::add(*p, [0.25, 0.2, 0.55]);
    }
    head.merge(&eye).unwrap()
}

fn supervision(neutral: &[Vec3], posed: &[Vec3], faces: &[[usize; 3]], s: &RenderSettings, lmk: Option<&[usize]>) -> Supervision2D {
    let t = render_targets(neutral, posed, faces, s).unwrap();
    Supervision2D {
        width: s.width,
        height: s.height,
        image: t.image,
        mask: t.mask,
        flow: t.flow,
        landmarks: lmk.map(|l| render::project_landmarks(posed, l, s).unwrap()),
    }
}

fn gradient_fidelity() -> Outcome {
    let x = rand_tensor(&[4, 3], 11, -2.0, 2.0);
    let pos = rand_tensor(&[4, 3], 12, 0.2, 2.0);
    let other = rand_tensor(&[4, 3], 13, 0.5, 1.5);
    let row = rand_tensor(&[3], 14, -1.0, 1.0);
    let sq = rand_tensor(&[3, 5], 15, -1.0, 1.0);
    let small = icosphere(0, 1.0);
    let ops = SurfaceOperators::precompute(&small, Some(8)).unwrap();
    let u = rand_tensor(&[12, 2], 16, -1.0, 1.0);
    let times = Tensor::vector(vec![0.05, 0.2]);
    let (x, pos, other, row, sq, u, times) = (&x, &pos, &other, &row, &sq, &u, &times);
    let ops = &ops;
    let cases: Vec<Case> = vec![
        ("add", x, Box::new(move |t, v| { let o = t.constant(other.clone()); let y = t.add(v, o)?; reduce(t, y) })),
        ("sub", x, Box::new(move |t, v| { let o = t.constant(other.clone()); let y = t.sub(o, v)?; reduce(t, y) })),
        ("mul", x, Box::new(|t, v| { let y = t.mul(v, v)?; reduce(t, y) })),
        ("div", x, Box::new(move |t, v| { let o = t.constant(other.clone()); let y = t.div(o, v)?; reduce(t, y) })),
        ("neg", x, Box::new(|t, v| { let y = t.neg(v)?; reduce(t, y) })),
        ("scale", x, Box::new(|t, v| { let y = t.scale(v, -1.7)?; reduce(t, y) })),
        ("add_scalar", x, Box::new(|t, v| { let y = t.add_scalar(v, 0.3)?; let y = t.square(y)?; reduce(t, y) })),
        ("square", x, Box::new(|t, v| { let y = t.square(v)?; reduce(t, y) })),
        ("relu", x, Box::new(|t, v| { let y = t.relu(v)?; let y = t.square(y)?; reduce(t, y) })),
        ("sigmoid", x, Box::new(|t, v| { let y = t.sigmoid(v)?; reduce(t, y) })),
        ("softplus", x, Box::new(|t, v| { let y = t.softplus(v)?; reduce(t, y) })),
        ("exp", x, Box::new(|t, v| { let y = t.exp(v)?; reduce(t, y) })),
        ("abs", x, Box::new(|t, v| { let y = t.abs(v)?; reduce(t, y) })),
        ("sqrt", pos, Box::new(|t, v| { let y = t.sqrt(v)?; reduce(t, y) })),
        ("clamp", x, Box::new(|t, v| { let y = t.clamp(v, -1.0, 1.3)?; reduce(t, y) })),
        ("matmul", x, Box::new(move |t, v| { let b = t.constant(sq.clone()); let y = t.matmul(v, b)?; reduce(t, y) })),
        ("transpose", x, Box::new(move |t, v| { let y = t.transpose(v)?; let b = t.constant(other.clone()); let y = t.matmul(y, b)?; reduce(t, y) })),
        ("concat", x, Box::new(|t, v| { let y = t.square(v)?; let y = t.concat(&[v, y])?; reduce(t, y) })),
        ("concat_rows", x, Box::new(|t, v| { let y = t.square(v)?; let y = t.concat_rows(&[y, v])?; reduce(t, y) })),
        ("slice_cols", x, Box::new(|t, v| { let y = t.slice_cols(v, 1, 3)?; reduce(t, y) })),
        ("slice_rows", x, Box::new(|t, v| { let y = t.slice_rows(v, 1, 3)?; reduce(t, y) })),
        ("broadcast_rows", row, Box::new(|t, v| { let y = t.broadcast_rows(v, 4)?; let y = t.square(y)?; reduce(t, y) })),
        ("broadcast_cols", x, Box::new(|t, v| { let c = t.slice_cols(v, 0, 1)?; let y = t.broadcast_cols(c, 3)?; let y = t.mul(y, v)?; reduce(t, y) })),
        ("add_row", row, Box::new(move |t, v| { let a = t.constant(x.clone()); let y = t.add_row(a, v)?; let y = t.square(y)?; reduce(t, y) })),
        ("sum", x, Box::new(|t, v| { let y = t.square(v)?; let s = t.sum(y)?; reduce(t, s) })),
        ("mean", x, Box::new(|t, v| { let y = t.square(v)?; let s = t.mean(y)?; reduce(t, s) })),
        ("sum_rows", x, Box::new(|t, v| { let y = t.sum_rows(v)?; let y = t.square(y)?; reduce(t, y) })),
        ("sum_cols", x, Box::new(|t, v| { let y = t.sum_cols(v)?; let y = t.square(y)?; reduce(t, y) })),
        ("gather_rows", x, Box::new(|t, v| { let y = t.gather_rows(v, &[3, 0, 3, 1])?; reduce(t, y) })),
        ("scatter_add_rows", x, Box::new(|t, v| { let y = t.scatter_add_rows(v, &[2, 0, 2, 5], 6)?; let y = t.square(y)?; reduce(t, y) })),
        ("reshape", x, Box::new(|t, v| { let y = t.reshape(v, &[2, 6])?; let y = t.sum_rows(y)?; let y = t.square(y)?; reduce(t, y) })),
        ("spectral_diffuse.u", u, Box::new(move |t, v| { let tt = t.constant(times.clone()); let y = t.spectral_diffuse(v, tt, &ops.basis, &ops.mass, DiffusionKind::Spectral)?; let y = t.square(y)?; reduce(t, y) })),
        ("spectral_diffuse.t", times, Box::new(move |t, v| { let uu = t.constant(u.clone()); let y = t.spectral_diffuse(uu, v, &ops.basis, &ops.mass, DiffusionKind::Implicit)?; let y = t.square(y)?; reduce(t, y) })),
    ];
    let mut worst_prim = (0.0f64, "");
    for (name, input, f) in &cases {
        let e = grad_check(|t, v| f(t, v), input, 1e-5, GradCheckMode::Coordinates).unwrap();
        if e > worst_prim.0 {
            worst_prim = (e, name);
        }
    }

    // the rasterizer is a custom op; check it through the shaded image
    let m = head_sample();
    let n = m.vertex_count();
    let s = RenderSettings { sigma: 2e-3, ..RenderSettings::square(24) };
    let disp = Tensor::new(&[n, 3], (0..n * 3).map(|i| 0.02 * (((i * 2654435761 + 1) % 1000) as f64 / 1000.0 - 0.5)).collect()).unwrap();
    let v0 = render::vec3_tensor(&m.vertices);
    let raster = grad_check(
        |t, d| {
            let base = t.constant(v0.clone());
            let v = t.add(base, d)?;
            let (img, mask) = render::render_image_var(t, v, &m.faces, &s)?;
            let a = reduce(t, img)?;
            let b = reduce(t, mask)?;
            t.add(a, b)
        },
        &disp,
        1e-6,
        GradCheckMode::Subset { count: 25, seed: 5 },
    )
    .unwrap();

    let gt_v: Vec<Vec3> = m.vertices.iter().map(|p| [p[0] * 1.05, p[1] - 0.04 * p[0].max(0.0), p[2] + 0.01]).collect();
    let lmk = [3usize, 10, 30, 31, 44, 50];
    let pairs = [(0usize, 1usize), (2, 3)];
    let gt = supervision(&m.vertices, &gt_v, &m.faces, &s, Some(&lmk));
    let valid = render::coverage(&m.vertices, &m.faces, &s).unwrap();
    let e1 = grad_check(
        |t, d| Ok(losses::stage1(t, &m.vertices, d, &m.faces, &gt, &valid, &s, &Stage1Weights::default())?.total),
        &disp,
        1e-6,
        GradCheckMode::Subset { count: 25, seed: 6 },
    )
    .unwrap();
    let e2 = grad_check(
        |t, d| {
            let spec = LandmarkSpec { vertices: &lmk, eyelid_pairs: &pairs };
            Ok(losses::stage2(t, &m.vertices, d, &m.faces, &gt, &gt_v, Some(spec), &s, &Stage2Weights::default())?.total)
        },
        &disp,
        1e-6,
        GradCheckMode::Subset { count: 25, seed: 7 },
    )
    .unwrap();

    // whole network, all parameters flattened into one input
    let cfg = ModelConfig { width: 8, blocks: 2, global_width: 6, global_dim: 5, k: Some(16), t_init: 0.01, ..Default::default() };
    let mut p = init_model(&cfg, 12).unwrap();
    for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
        if name.starts_with("head.") {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = 0.1 * (((i * 7919) % 13) as f64 / 13.0 - 0.5);
            }
        }
    }
    let mops = SurfaceOperators::precompute(&m, Some(16)).unwrap();
    let input = MeshInput::new(&m, &mops).unwrap();
    let f = FacsVector::multi_hot(12, &[facs::JAW_DROP, facs::LEFT_EYE_CLOSED]).unwrap();
    let sizes: Vec<usize> = p.tensors.iter().map(|t| t.numel()).collect();
    let flat = Tensor::vector(p.tensors.iter().flat_map(|t| t.data().to_vec()).collect());
    let e_net = grad_check(
        |tape, v| {
            let mut off = 0;
            let mut vars = Vec::new();
            for (t, &s) in p.tensors.iter().zip(&sizes) {
                let sl = tape.slice_cols(v, off, off + s)?;
                vars.push(tape.reshape(sl, t.shape())?);
                off += s;
            }
            let pv = p.bind(vars)?;
            let d = forward_var(tape, &pv, &input, &f, &p.config)?;
            Ok(losses::stage2(tape, &m.vertices, d, &m.faces, &gt, &gt_v, Some(LandmarkSpec { vertices: &lmk, eyelid_pairs: &pairs }), &s, &Stage2Weights::default())?.total)
        },
        &flat,
        1e-5,
        GradCheckMode::Subset { count: 30, seed: 8 },
    )
    .unwrap();
    let pass = worst_prim.0 < 1e-6 && raster < 1e-4 && e1 < 1e-4 && e2 < 1e-4 && e_net < 1e-4;
    outcome(
        pass,
        format!(
            "{} primitives worst {:.1e} ({}) (tol 1e-6); rasterizer {raster:.1e}, stage-1 {e1:.1e}, stage-2 {e2:.1e}, network+stage-2 {e_net:.1e} on {n} vertices (tol 1e-4)",
            cases.len(),
            worst_prim.0,
            worst_prim.1
        ),
    )
}

fn flow_oracle() -> Outcome {
    let head = icosphere(2, 0.8);
    let s = RenderSettings::square(64);
    let still = render_targets(&head.vertices, &head.vertices, &head.faces, &s).unwrap();
    let zero_ok = still.flow.iter().all(|&v| v == FLOW_ZERO);
    // a fronto-parallel plane at depth FRONT_DISTANCE translated in x and y
    let k = 8;
    let mut verts = Vec::new();
    for j in 0..=k {
        for i in 0..=k {
            verts.push([-0.5 + i as f64 / k as f64, -0.5 + j as f64 / k as f64, 0.0]);
        }
    }
    let mut faces = Vec::new();
    for j in 0..k {
        for i in 0..k {
            let a = j * (k + 1) + i;
            faces.push([a, a + 1, a + k + 2]);
            faces.push([a, a + k + 2, a + k + 1]);
        }
    }
    let s = RenderSettings::square(128);
    let (dx, dy) = (0.03, -0.02);
    let moved: Vec<Vec3> = verts.iter().map(|p| [p[0] + dx, p[1] + dy, p[2]]).collect();
    let t = render_targets(&verts, &moved, &faces, &s).unwrap();
    let focal = 1.0 / (0.5 * s.camera.fov_y).tan();
    let (w, h) = (s.width as f64, s.height as f64);
    // screen y grows downwards
    let px = 0.5 * w * focal * dx / FRONT_DISTANCE;
    let py = -0.5 * h * focal * dy / FRONT_DISTANCE;
    let want = [px / w * 0.5 + 0.5, py / h * 0.5 + 0.5];
    let cov = render::coverage(&verts, &faces, &s).unwrap();
    let mut worst = 0.0f64;
    let mut covered = 0;
    for (i, &c) in cov.iter().enumerate() {
        if c {
            covered += 1;
            worst = worst.max((t.flow[2 * i] - want[0]).abs()).max((t.flow[2 * i + 1] - want[1]).abs());
        }
    }
    let pass = zero_ok && covered > 1000 && worst < 1e-4;
    outcome(pass, format!("still mesh all {FLOW_ZERO}: {zero_ok}; translation worst {worst:.1e} over {covered} pixels (tol 1e-4)"))
}

fn overfit(scratch: &Path) -> Outcome {
    let data = scratch.join("overfit-data");
    let cfg = DataConfig { seed: 11, rigged: 2, unrigged: 0, test_rigged: 1, test_unrigged: 0, interp_factor: 1, flow_noise_px: 0.0, ..Default::default() };
    dataset::generate_dataset(&cfg, &data).unwrap();
    let start = Instant::now();
    let tc = TrainConfig {
        stage: 2,
        data: data.clone(),
        out: scratch.join("overfit-run"),
        lr: OVERFIT_LR,
        accumulate: OVERFIT_ACCUMULATE,
        epochs: usize::MAX,
        max_steps: Some(OVERFIT_STEPS),
        checkpoint_every_epoch: false,
        ..Default::default()
    };
    let sum = train::train(&tc).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let ck = formats::load_checkpoint(&sum.checkpoint).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let r = eval::evaluate(&ck.params, &ds, Split::Train, Ablation::Full).unwrap();
    let pass = sum.steps <= OVERFIT_STEPS && r.mae < OVERFIT_MAE_MM && minutes < OVERFIT_MINUTES;
    outcome(
        pass,
        format!(
            "MAE {:.3} mm (Q95 {:.2}) on {} training poses after {} steps in {minutes:.1} min (tol < {OVERFIT_MAE_MM} mm, <= {OVERFIT_STEPS} steps, < {OVERFIT_MINUTES} min)",
            r.mae, r.q95, r.poses, sum.steps
        ),
    )
}

fn load_summary() -> Option<BenchSummary> {
    fsutil::read_json(&bench_dir().join("summary.json")).ok()
}

fn ablation_ordering() -> Outcome {
    let Some(s) = load_summary() else {
        return outcome(false, format!("no benchmark summary under {}", bench_dir().display()));
    };
    let get = |a| s.row(a).cloned();
    let (Some(full), Some(noflow), Some(nounr), Some(noglob)) = (get(Ablation::Full), get(Ablation::NoFlow), get(Ablation::NoUnrigged), get(Ablation::NoGlobal)) else {
        return outcome(false, "benchmark summary lacks a required ablation".into());
    };
    // the archived reports must agree with the summary
    let mut consistent = true;
    for r in &s.rows {
        match fsutil::read_json::<EvalReport>(&bench_dir().join(format!("{}.report.json", r.ablation))) {
            Ok(rep) => consistent &= rep.mae == r.mae && rep.penetration == r.penetration && rep.validate().is_ok(),
            Err(_) => consistent = false,
        }
    }
    let unr = |r: &rigforge::bench::BenchRow| r.mae_unrigged.unwrap_or(f64::NAN);
    let order = full.mae <= noflow.mae && noflow.mae <= nounr.mae;
    let unrigged = unr(&nounr) > unr(&full);
    let pen = noglob.penetration > full.penetration;
    let pass = consistent && order && pen;
    let no2d = get(Ablation::No2d).map(|r| format!(", no-2d {:.3}", r.mae)).unwrap_or_default();
    outcome(
        pass,
        format!(
            "test MAE full {:.3} <= no-flow {:.3} <= no-unrigged {:.3}: {order}{no2d}; unrigged-head MAE full {:.3} vs no-unrigged {:.3} (lower for full: {unrigged}); penetration no-global {:.5} > full {:.5}: {pen}; reports consistent: {consistent}",
            full.mae, noflow.mae, nounr.mae, unr(&full), unr(&nounr), noglob.penetration, full.penetration
        ),
    )
}

/// Rebuilds the benchmark's test heads from the archived manifest and
/// re-evaluates the archived full model.
fn reevaluate_full(scratch: &Path) -> std::result::Result<(EvalReport, EvalReport), String> {
    let manifest: DatasetManifest = fsutil::read_json(&bench_dir().join("manifest.json")).map_err(|e| e.to_string())?;
    let root = scratch.join("bench-eval");
    fsutil::write_json(&root.join(dataset::MANIFEST), &manifest).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&root).map_err(|e| e.to_string())?;
    let ck = formats::load_checkpoint(&bench_dir().join("full.rfck")).map_err(|e| e.to_string())?;
    let fresh = eval::evaluate(&ck.params, &ds, Split::Test, Ablation::Full).map_err(|e| e.to_string())?;
    let archived: EvalReport = fsutil::read_json(&bench_dir().join("full.report.json")).map_err(|e| e.to_string())?;
    Ok((fresh, archived))
}

fn disconnected_components(scratch: &Path) -> Outcome {
    match reevaluate_full(scratch) {
        Err(e) => outcome(false, format!("cannot evaluate the archived full model: {e}")),
        Ok((r, archived)) => {
            let same = r == archived;
            let pass = r.gaze_eye_to_face >= 5.0 && r.penetration < 0.05 && same;
            outcome(
                pass,
                format!(
                    "gaze poses move eyeballs {:.2}x face (tol >= 5); penetration {:.4} on {} held-out heads (tol < 0.05); matches archived report: {same}",
                    r.gaze_eye_to_face, r.penetration, r.heads
                ),
            )
        }
    }
}

fn triangulation_agnosticism() -> Outcome {
    let ck = match formats::load_checkpoint(&bench_dir().join("full.rfck")) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("no archived model: {e}")),
    };
    let manifest: DatasetManifest = match fsutil::read_json(&bench_dir().join("manifest.json")) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("no archived manifest: {e}")),
    };
    let poses: Vec<FacsVector> = manifest.poses.iter().map(|p| p.facs_vector().unwrap()).collect();
    let base: HeadParams = manifest.select(None, Split::Test)[0].recipe.base.clone();
    let predict = |level: u32| {
        let head = rigforge::core::synth::make_head(&HeadParams { level, ..base.clone() }).unwrap();
        let ops = SurfaceOperators::precompute(head.mesh(), ck.params.config.k).unwrap();
        let (pred, _) = eval::predict(&ck.params, head.mesh(), &ops, &poses).unwrap();
        (head, pred)
    };
    let (coarse, pc) = predict(3);
    let (fine, pf) = predict(4);
    let nn = fine.mesh().nearest_vertices(&coarse.mesh().vertices);
    let transferred: Vec<Vec<Vec3>> = pf.iter().map(|d| nn.iter().map(|&j| d[j]).collect()).collect();
    let diff = metric_mae(&transferred, &pc).unwrap().mae;
    let zero: Vec<Vec<Vec3>> = pc.iter().map(|d| vec![[0.0; 3]; d.len()]).collect();
    let scale = metric_mae(&zero, &pc).unwrap().mae;
    let rel = diff / scale;
    let snap = nn.iter().zip(&coarse.mesh().vertices).map(|(&j, p)| math::norm(math::sub(fine.mesh().vertices[j], *p))).fold(0.0, f64::max);
    outcome(
        rel <= 0.2,
        format!(
            "{} vs {} vertices: relative MAE {rel:.3} ({diff:.3} mm over mean |d| {scale:.3} mm, tol 0.2); nearest-vertex snap {:.1e} mm",
            coarse.mesh().vertex_count(),
            fine.mesh().vertex_count(),
            snap * MM_PER_UNIT
        ),
    )
}

fn determinism(scratch: &Path) -> Outcome {
    let run = |dir: &Path| -> Vec<u8> {
        let data = dir.join("data");
        let cfg = DataConfig { seed: 3, rigged: 3, unrigged: 3, test_rigged: 1, test_unrigged: 1, interp_factor: 2, level: 2, resolution: 24, k: Some(16), ..Default::default() };
        dataset::generate_dataset(&cfg, &data).unwrap();
        let model = ModelConfig { width: 8, blocks: 1, global_width: 8, global_dim: 8, k: Some(16), ..Default::default() };
        let s1 = TrainConfig { stage: 1, data: data.clone(), out: dir.join("s1"), model: Some(model), lr: 1e-3, max_steps: Some(20), accumulate: 2, ..Default::default() };
        let c1 = train::train(&s1).unwrap();
        let s2 = TrainConfig { stage: 2, init: Some(c1.checkpoint), out: dir.join("s2"), max_steps: Some(20), ..s1 };
        let c2 = train::train(&s2).unwrap();
        let r = eval::evaluate_checkpoint(&c2.checkpoint, &data, Split::Test, Ablation::Full).unwrap();
        serde_json::to_vec_pretty(&r).unwrap()
    };
    let a = run(&scratch.join("det-a"));
    let b = run(&scratch.join("det-b"));
    outcome(a == b, format!("two fixed-seed runs of gen-data, stage 1, stage 2 and eval: {} and {} report bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // bare arguments select criteria by substring, like a libtest filter
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    rigforge::init_threads();
    let scratch = tempfile::tempdir().unwrap();
    let dir = scratch.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("operator correctness", Box::new(operator_correctness)),
        ("diffusion invariants", Box::new(diffusion_invariants)),
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("flow oracle", Box::new(flow_oracle)),
        ("overfit single head", Box::new(|| overfit(dir))),
        ("ablation ordering", Box::new(ablation_ordering)),
        ("disconnected components", Box::new(|| disconnected_components(dir))),
        ("triangulation agnosticism", Box::new(triangulation_agnosticism)),
        ("determinism", Box::new(|| determinism(dir))),
    ];
    let criteria: Vec<_> = criteria.into_iter().filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))).collect();
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !r.pass {
            failed += 1;
        }
        println!("{} {name}: {} [{:.1}s]", if r.pass { "PASS" } else { "FAIL" }, r.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
