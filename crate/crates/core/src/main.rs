//! Command-line entry point: reconstruct, synth, colorize, evaluate.

use clap::{Parser, Subcommand};
use lidar_sfm::geometry::CameraIntrinsics;
use lidar_sfm::map::{load_ply, write_ply_ascii, SplatParams};
use lidar_sfm::pipeline::config::{Overrides, PipelineConfig};
use lidar_sfm::pipeline::{colorize, evaluate, run_pipeline, synthetic};
use lidar_sfm::scene::read_pose_file;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lidar-sfm", about = "Incremental SfM localized against a LiDAR map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full reconstruction pipeline.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        matches: Option<PathBuf>,
        #[arg(long)]
        known_poses: Option<PathBuf>,
        #[arg(long)]
        init_image: Option<String>,
        /// "qw qx qy qz tx ty tz"
        #[arg(long)]
        init_pose: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Back-project image colors onto a LiDAR map.
    Colorize {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Config file supplying intrinsics and rendering knobs.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimated poses against ground truth.
    Evaluate {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        init_image: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAS_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Reconstruct {
            config,
            map,
            features,
            matches,
            known_poses,
            init_image,
            init_pose,
            seed,
            out,
        } => {
            let over = Overrides {
                map,
                features_dir: features,
                matches,
                known_poses,
                init_image,
                init_pose,
                seed,
                out,
            };
            let cfg = match PipelineConfig::load(&config, &over) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run_pipeline(&cfg) {
                Ok(summary) => {
                    println!(
                        "registered {}/{} images, {} points, {} adjustments",
                        summary.registered,
                        summary.images,
                        summary.live_points,
                        summary.rows.len()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Synth { spec, seed, out } => {
            let run = || -> Result<usize, synthetic::SpecError> {
                let spec = synthetic::SyntheticSpec::from_file(&spec)?;
                let scene = synthetic::generate(&spec, seed)?;
                synthetic::write_dataset(&scene, &out)?;
                Ok(scene.poses.len())
            };
            match run() {
                Ok(cameras) => {
                    println!("wrote {cameras}-camera dataset to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Colorize {
            map,
            poses,
            images,
            config,
            out,
        } => {
            let run = || -> Result<(), Box<dyn std::error::Error>> {
                let kv = lidar_sfm::pipeline::config::read_kv_file(&config)?;
                let need = |key: &str| -> Result<f64, Box<dyn std::error::Error>> {
                    Ok(kv
                        .get(key)
                        .ok_or_else(|| format!("config key '{key}' required"))?
                        .parse()?)
                };
                let intr = CameraIntrinsics::new(
                    need("fx")?,
                    need("fy")?,
                    need("cx")?,
                    need("cy")?,
                    need("width")? as u32,
                    need("height")? as u32,
                );
                let frustum_height: f64 = kv
                    .get("frustum_height")
                    .map(|v| v.parse())
                    .transpose()?
                    .unwrap_or(30.0);
                let map = load_ply(&map, &Default::default())?;
                let poses = read_pose_file(&poses)?;
                let (colors, warnings) = colorize::colorize_map(
                    &map,
                    &intr,
                    &poses,
                    &images,
                    frustum_height,
                    &SplatParams::default(),
                );
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                write_ply_ascii(&out, &map.points, Some(&colors))?;
                Ok(())
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Evaluate {
            poses,
            truth,
            init_image,
        } => {
            let run = || -> Result<String, Box<dyn std::error::Error>> {
                let est = read_pose_file(&poses)?;
                let gt = read_pose_file(&truth)?;
                let eval = evaluate::evaluate_against_truth(&est, &gt, init_image.as_deref())?;
                Ok(evaluate::format_evaluation(&eval))
            };
            match run() {
                Ok(table) => {
                    print!("{table}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
