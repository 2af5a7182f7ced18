use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rigforge::bench::{self, BenchConfig};
use rigforge::dataset::{self, DataConfig, Split};
use rigforge::eval::{self, Ablation};
use rigforge::fsutil;
use rigforge::infer;
use rigforge::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "rigforge", version, about = "Blendshape rigs for arbitrary face meshes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and cache surface operators for a mesh.
    Precompute {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Defaults to the mesh path with an `.rfop` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: u32,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a rig for an OBJ mesh.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON list of `{name, facs}`; the built-in table otherwise.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Blend a rig with named weights and write the posed OBJ.
    Pose {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation benchmark end to end.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_or_default<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(fsutil::read_json(p)?),
        None => Ok(T::default()),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split {s:?}, expected train or test"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg: DataConfig = config_or_default(config.as_deref())?;
            let m = dataset::generate_dataset(&cfg, &out).with_context(|| format!("generating into {}", out.display()))?;
            println!("{} heads, {} poses -> {}", m.samples.len(), m.poses.len(), out.display());
        }
        Cmd::Precompute { mesh, k, out } => {
            let out = out.unwrap_or_else(|| mesh.with_extension("rfop"));
            let ops = infer::precompute(&mesh, k, &out)?;
            println!("{} vertices, {} eigenpairs -> {}", ops.basis.n, ops.basis.k, out.display());
        }
        Cmd::Train { stage, config } => {
            let mut cfg: TrainConfig = config_or_default(config.as_deref())?;
            cfg.stage = stage;
            let s = train::train(&cfg)?;
            println!(
                "stage {} done: {} steps, {} samples, final loss {:.6e}, {:.1}s -> {}",
                s.stage,
                s.steps,
                s.samples,
                s.final_loss,
                s.seconds,
                s.checkpoint.display()
            );
        }
        Cmd::Eval { ckpt, data, split, ablation, out } => {
            let report = eval::evaluate_checkpoint(&ckpt, &data, parse_split(&split)?, ablation)?;
            match out {
                Some(p) => {
                    fsutil::write_json(&p, &report)?;
                    println!("MAE {:.3} mm, Q95 {:.3} mm, penetration {:.4} -> {}", report.mae, report.q95, report.penetration, p.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Cmd::Infer { ckpt, mesh, out, poses } => {
            let (rig, t) = infer::infer(&ckpt, &mesh, poses.as_deref(), &out)?;
            println!("{} poses, {} vertices -> {}", rig.pose_count(), rig.neutral.vertex_count(), out.display());
            println!(
                "load {:.3}s  precompute {:.3}s  forward {:.3}s  save {:.3}s",
                t.load.as_secs_f64(),
                t.precompute.as_secs_f64(),
                t.forward.as_secs_f64(),
                t.save.as_secs_f64()
            );
        }
        Cmd::Pose { rig, weights, out } => {
            infer::pose(&rig, &weights, &out)?;
            println!("-> {}", out.display());
        }
        Cmd::Bench { config, out } => {
            let cfg: BenchConfig = config_or_default(config.as_deref())?;
            let s = bench::run_bench(&cfg, &out)?;
            for r in &s.rows {
                println!("{:<12} MAE {:.3} mm  Q95 {:.3} mm  penetration {:.4}  gaze {:.2}", r.ablation, r.mae, r.q95, r.penetration, r.gaze_eye_to_face);
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    rigforge::init_threads();
    run(Cli::parse())
}
