//! Synthetic dataset on disk, and the reader that enforces the supervision
//! firewall.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! heads/<id>/neutral.obj
//! heads/<id>/landmarks.json
//! heads/<id>/operators.rfop
//! heads/<id>/rig/{poses.json,deltas.rftn}      rigged role only
//! heads/<id>/sup2d/<pose>/{image.png,mask.png,flow.rftn,lmk.json}
//! ```
//!
//! Unrigged-role heads are generated with full analytic rigs like any other
//! head, but only their neutral mesh and 2D files are written. Evaluation
//! rebuilds their rigs from the recipe in the manifest.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rigforge_core::autodiff::Tensor;
use rigforge_core::math::Vec3;
use rigforge_core::render::{self, RenderSettings, Supervision2D};
use rigforge_core::synth::{self, HeadDistribution, HeadParams, SyntheticHead};
use rigforge_core::{FacsVector, SurfaceOperators, TriMesh};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::obj::{self, LandmarkFile};
use crate::{formats, fsutil};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Base heads per role, test heads included.
    pub rigged: usize,
    pub unrigged: usize,
    pub test_rigged: usize,
    pub test_unrigged: usize,
    /// Training samples per training base head: the head itself plus
    /// `interp_factor - 1` blends with other heads of its role.
    pub interp_factor: usize,
    pub alpha_range: (f64, f64),
    pub level: u32,
    pub resolution: usize,
    pub sigma: f64,
    /// Standard deviation of the noise added to rendered flow, in pixels.
    pub flow_noise_px: f64,
    /// Eigenbasis size of the cached operators.
    pub k: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rigged: 6,
            unrigged: 8,
            test_rigged: 2,
            test_unrigged: 2,
            interp_factor: 3,
            alpha_range: (0.25, 0.75),
            level: 3,
            resolution: 64,
            sigma: 1e-4,
            flow_noise_px: 0.5,
            k: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.rigged == 0 {
            return bad("at least one rigged head is required".into());
        }
        if self.test_rigged >= self.rigged {
            return bad(format!("{} test heads leave no rigged training head out of {}", self.test_rigged, self.rigged));
        }
        if self.test_unrigged > self.unrigged {
            return bad(format!("{} unrigged test heads out of {}", self.test_unrigged, self.unrigged));
        }
        if self.interp_factor == 0 {
            return bad("interp_factor must be at least 1".into());
        }
        for (role, n) in [("rigged", self.rigged - self.test_rigged), ("unrigged", self.unrigged - self.test_unrigged)] {
            if self.interp_factor > 1 && n == 1 {
                return bad(format!("interpolation needs two {role} training heads"));
            }
        }
        let (a, b) = self.alpha_range;
        if !(0.0 < a && a <= b && b < 1.0) {
            return bad(format!("alpha range {a}..{b} must lie inside (0, 1)"));
        }
        if self.resolution == 0 || !(self.sigma > 0.0) || !(self.flow_noise_px >= 0.0) {
            return bad("resolution, sigma and flow noise must be positive".into());
        }
        Ok(())
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { sigma: self.sigma, ..RenderSettings::square(self.resolution) }
    }

    pub fn train_counts(&self) -> (usize, usize) {
        ((self.rigged - self.test_rigged) * self.interp_factor, (self.unrigged - self.test_unrigged) * self.interp_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Rigged,
    Unrigged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How to rebuild a head: a base head, optionally blended towards a
/// partner with weight `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub base: HeadParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<HeadParams>,
    #[serde(default)]
    pub alpha: f64,
}

impl Recipe {
    pub fn build(&self) -> Result<SyntheticHead> {
        let a = synth::make_head(&self.base)?;
        match &self.partner {
            None => Ok(a),
            Some(p) => Ok(synth::interpolate_heads(&a, &synth::make_head(p)?, self.alpha)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub role: Role,
    pub split: Split,
    pub recipe: Recipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInfo {
    pub name: String,
    /// Directory name under `sup2d/`.
    pub dir: String,
    pub facs: Vec<f64>,
}

impl PoseInfo {
    pub fn facs_vector(&self) -> Result<FacsVector> {
        Ok(FacsVector::new(self.facs.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DataConfig,
    pub poses: Vec<PoseInfo>,
    pub rigged: Vec<String>,
    pub unrigged: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn sample(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn select(&self, role: Option<Role>, split: Split) -> Vec<&SampleEntry> {
        self.samples.iter().filter(|s| s.split == split && role.is_none_or(|r| s.role == r)).collect()
    }
}

/// The synthetic pose table: base units then correctives.
pub fn pose_table() -> Vec<PoseInfo> {
    let dirs = synth::CORRECTIVES.iter().map(|&(a, b)| format!("{}+{}", rigforge_core::facs::DESK_AUS[a].short, rigforge_core::facs::DESK_AUS[b].short));
    let base = rigforge_core::facs::DESK_AUS.iter().map(|a| a.short.to_string());
    synth::pose_names()
        .into_iter()
        .zip(base.chain(dirs))
        .zip(synth::pose_activations())
        .map(|((name, dir), f)| PoseInfo { name, dir, facs: f.as_slice().to_vec() })
        .collect()
}

/// Builds the manifest without touching the disk.
pub fn plan(config: &DataConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    for (role, count, tests, dist, tag) in [
        (Role::Rigged, config.rigged, config.test_rigged, HeadDistribution::RIGGED, "rig"),
        (Role::Unrigged, config.unrigged, config.test_unrigged, HeadDistribution::BROAD, "unr"),
    ] {
        let bases: Vec<HeadParams> = (0..count).map(|_| dist.sample(rng.random(), config.level)).collect();
        let n_train = count - tests;
        for (i, base) in bases.iter().enumerate() {
            let split = if i < n_train { Split::Train } else { Split::Test };
            let id = match split {
                Split::Train => format!("{tag}-{i:02}"),
                Split::Test => format!("test-{tag}-{:02}", i - n_train),
            };
            samples.push(SampleEntry { id, role, split, recipe: Recipe { base: base.clone(), partner: None, alpha: 0.0 } });
            if split == Split::Test {
                continue;
            }
            for j in 1..config.interp_factor {
                let partner = (i + j) % n_train;
                let alpha = rng.random_range(config.alpha_range.0..=config.alpha_range.1);
                samples.push(SampleEntry {
                    id: format!("{tag}-{i:02}-x{j}"),
                    role,
                    split,
                    recipe: Recipe { base: base.clone(), partner: Some(bases[partner].clone()), alpha },
                });
            }
        }
    }
    let ids = |f: &dyn Fn(&SampleEntry) -> bool| samples.iter().filter(|s| f(s)).map(|s| s.id.clone()).collect::<Vec<_>>();
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        poses: pose_table(),
        rigged: ids(&|s| s.role == Role::Rigged),
        unrigged: ids(&|s| s.role == Role::Unrigged),
        train: ids(&|s| s.split == Split::Train),
        test: ids(&|s| s.split == Split::Test),
        samples,
    })
}

fn noise_seed(seed: u64, sample: usize, pose: usize) -> u64 {
    seed ^ (sample as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (pose as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(29)
}

/// Adds pixel-space gaussian noise to the covered part of an encoded flow
/// map. `sigma_px = 0` leaves it untouched.
pub fn add_flow_noise(flow: &mut [f64], covered: &[bool], s: &RenderSettings, sigma_px: f64, seed: u64) {
    if sigma_px == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_px).expect("finite sigma");
    // one pixel of motion is 0.5 / res in the encoding
    let (sx, sy) = (0.5 / s.width as f64, 0.5 / s.height as f64);
    for (p, f) in flow.chunks_exact_mut(2).enumerate() {
        if covered[p] {
            f[0] += normal.sample(&mut rng) * sx;
            f[1] += normal.sample(&mut rng) * sy;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPixels {
    pub landmarks: Vec<[f64; 2]>,
}

pub fn head_dir(root: &Path, id: &str) -> PathBuf {
    root.join("heads").join(id)
}

fn write_head(root: &Path, m: &DatasetManifest, index: usize) -> Result<()> {
    let e = &m.samples[index];
    let head = e.recipe.build()?;
    let dir = head_dir(root, &e.id);
    let mesh = head.mesh();
    obj::save_obj(&dir.join("neutral.obj"), mesh)?;
    let lf = LandmarkFile { landmarks: head.landmarks().to_vec(), eyelid_pairs: head.eyelid_pairs.clone() };
    fsutil::write_json(&dir.join("landmarks.json"), &lf)?;
    formats::operators_cached(Some(&dir.join("operators.rfop")), mesh, m.config.k)?;
    if e.role == Role::Rigged {
        let n = mesh.vertex_count();
        let data: Vec<f64> = head.rig.poses.iter().flat_map(|p| p.delta.iter().flatten().copied()).collect();
        formats::save_tensor(&dir.join("rig").join("deltas.rftn"), &Tensor::new(&[head.rig.pose_count(), n, 3], data)?)?;
        let names: Vec<PoseInfo> = m.poses.clone();
        fsutil::write_json(&dir.join("rig").join("poses.json"), &names)?;
    }
    if e.split == Split::Test {
        return Ok(());
    }
    let s = m.config.render_settings();
    let covered = render::coverage(&mesh.vertices, &mesh.faces, &s)?;
    for (j, pose) in m.poses.iter().enumerate() {
        let mut sup = synth::render_supervision(&head, j, &s)?;
        add_flow_noise(&mut sup.flow, &covered, &s, m.config.flow_noise_px, noise_seed(m.config.seed, index, j));
        write_supervision(&dir.join("sup2d").join(&pose.dir), &sup)?;
    }
    Ok(())
}

pub fn write_supervision(dir: &Path, sup: &Supervision2D) -> Result<()> {
    let (w, h) = (sup.width, sup.height);
    image::save_png(&dir.join("image.png"), &Image { width: w, height: h, channels: 3, data: sup.image.clone() })?;
    image::save_png(&dir.join("mask.png"), &Image { width: w, height: h, channels: 1, data: sup.mask.clone() })?;
    formats::save_tensor(&dir.join("flow.rftn"), &Tensor::new(&[h, w, 2], sup.flow.clone())?)?;
    if let Some(l) = &sup.landmarks {
        fsutil::write_json(&dir.join("lmk.json"), &LandmarkPixels { landmarks: l.clone() })?;
    }
    Ok(())
}

/// Generates every head in parallel and writes the manifest last.
pub fn generate_dataset(config: &DataConfig, root: &Path) -> Result<DatasetManifest> {
    let m = plan(config)?;
    (0..m.samples.len()).into_par_iter().try_for_each(|i| write_head(root, &m, i))?;
    fsutil::write_json(&root.join(MANIFEST), &m)?;
    Ok(m)
}

/// Read access to a dataset. Every file read is appended to an audit log,
/// and 3D ground truth of unrigged-role heads cannot be read at all.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    audit: Mutex<Vec<String>>,
}

/// One head as training sees it.
#[derive(Debug, Clone)]
pub struct HeadData {
    pub id: String,
    pub role: Role,
    pub mesh: TriMesh,
    pub landmarks: LandmarkFile,
    pub ops: SurfaceOperators,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Err(Error::DatasetMissing(format!("no {} in {}", MANIFEST, root.display())));
        }
        let manifest: DatasetManifest = fsutil::read_json(&path)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch { path, found: manifest.version, supported: MANIFEST_VERSION });
        }
        Ok(Self { root: root.to_path_buf(), manifest, audit: Mutex::new(Vec::new()) })
    }

    fn log(&self, what: &str, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.audit.lock().expect("audit lock").push(format!("{what} {}", rel.display()));
    }

    fn entry(&self, id: &str) -> Result<&SampleEntry> {
        self.manifest.sample(id).ok_or_else(|| Error::DatasetMissing(format!("sample {id} is not in the manifest")))
    }

    pub fn render_settings(&self) -> RenderSettings {
        self.manifest.config.render_settings()
    }

    pub fn load_head(&self, id: &str, k: Option<usize>) -> Result<HeadData> {
        let e = self.entry(id)?;
        let dir = head_dir(&self.root, id);
        let mp = dir.join("neutral.obj");
        let lp = dir.join("landmarks.json");
        let op = dir.join("operators.rfop");
        self.log("mesh", &mp);
        let mesh = obj::load_obj(&mp)?;
        self.log("landmarks", &lp);
        let landmarks = obj::load_landmarks(&lp)?;
        let mesh = mesh.with_landmarks(landmarks.landmarks.clone())?;
        self.log("operators", &op);
        let ops = formats::operators_cached(Some(&op), &mesh, k)?;
        Ok(HeadData { id: id.to_string(), role: e.role, mesh, landmarks, ops })
    }

    pub fn load_sup2d(&self, id: &str, pose: usize) -> Result<Supervision2D> {
        self.entry(id)?;
        let info = self.manifest.poses.get(pose).ok_or_else(|| Error::DatasetMissing(format!("pose {pose}")))?;
        let dir = head_dir(&self.root, id).join("sup2d").join(&info.dir);
        self.log("sup2d", &dir);
        let img = image::load_png(&dir.join("image.png"))?;
        let mask = image::load_png(&dir.join("mask.png"))?;
        let flow = formats::load_tensor(&dir.join("flow.rftn"))?;
        let lp = dir.join("lmk.json");
        let landmarks = if lp.exists() { Some(fsutil::read_json::<LandmarkPixels>(&lp)?.landmarks) } else { None };
        if img.channels != 3 || mask.channels != 1 || flow.numel() != 2 * img.width * img.height {
            return Err(Error::Malformed { path: dir, msg: "supervision channels or sizes".into() });
        }
        Ok(Supervision2D { width: img.width, height: img.height, image: img.data, mask: mask.data, flow: flow.into_data(), landmarks })
    }

    /// Ground-truth displacement fields, one per manifest pose.
    pub fn load_rig(&self, id: &str) -> Result<Vec<Vec<Vec3>>> {
        let e = self.entry(id)?;
        if e.role != Role::Rigged {
            return Err(Error::Firewall(format!("3D ground truth of unrigged head {id} requested")));
        }
        let p = head_dir(&self.root, id).join("rig").join("deltas.rftn");
        self.log("rig", &p);
        let t = formats::load_tensor(&p)?;
        let n = t.shape().get(1).copied().unwrap_or(0);
        if t.shape().len() != 3 || t.shape()[0] != self.manifest.poses.len() || t.shape()[2] != 3 {
            return Err(Error::Malformed { path: p, msg: format!("deltas shape {:?}", t.shape()) });
        }
        Ok(t.data().chunks(3 * n).map(|c| c.chunks(3).map(|v| [v[0], v[1], v[2]]).collect()).collect())
    }

    pub fn audit_log(&self) -> Vec<String> {
        self.audit.lock().expect("audit lock").clone()
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        let mut s = self.audit_log().join("\n");
        s.push('\n');
        fsutil::write_atomic(path, s.as_bytes())
    }
}
