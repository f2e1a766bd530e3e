//! Flat `key = value` pipeline configuration with CLI overrides.

use crate::association::AssociationConfig;
use crate::ba::BaConfig;
use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::map::{PlyOptions, SplatParams};
use crate::sfm::{InitDepthMode, SfmConfig};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing required config key '{0}'")]
    Missing(String),
    #[error("config key '{key}': {msg}")]
    Invalid { key: String, msg: String },
}

/// CLI flags that take precedence over file values.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub map: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub matches: Option<PathBuf>,
    pub known_poses: Option<PathBuf>,
    pub init_image: Option<String>,
    pub init_pose: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub map: PathBuf,
    pub features_dir: PathBuf,
    pub matches: PathBuf,
    pub known_poses: Option<PathBuf>,
    pub images_dir: Option<PathBuf>,
    pub truth_poses: Option<PathBuf>,
    pub out: PathBuf,
    pub init_image: String,
    pub init_pose: CameraPose,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub voxel_size: f64,
    pub estimate_normals_k: usize,
    pub frustum_height: f64,
    pub splat: SplatParams,
    pub association: AssociationConfig,
    pub sfm: SfmConfig,
    pub ba: BaConfig,
    /// Run a batch-sphere adjustment every this many registrations.
    pub batch_every: usize,
    /// Extra whole-map adjustment when the live point count grows by
    /// this factor since the last one.
    pub whole_map_growth: f64,
    /// Disabling point-to-plane factors leaves pure bundle adjustment.
    pub plane_constraints: bool,
    /// Points whose mean reprojection error exceeds this are dropped
    /// after each adjustment.
    pub filter_max_px: f64,
    pub write_depth: bool,
}

/// Parse `qw qx qy qz tx ty tz` into a world-to-camera pose.
pub fn parse_pose_string(s: &str) -> Result<CameraPose, String> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    if vals.len() != 7 {
        return Err(format!("expected 7 numbers, got {}", vals.len()));
    }
    Ok(CameraPose::from_wxyz_t(
        vals[0],
        vals[1],
        vals[2],
        vals[3],
        Vec3::new(vals[4], vals[5], vals[6]),
    ))
}

/// Read a flat `key = value` file; `#` starts a comment.
pub fn read_kv_file(path: &Path) -> Result<HashMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: lineno + 1,
                msg: format!("expected `key = value`, got '{line}'"),
            });
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn get<T: std::str::FromStr>(
    kv: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| ConfigError::Invalid {
            key: key.to_string(),
            msg: format!("cannot parse '{v}'"),
        }),
    }
}

fn required<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &str) -> Result<T, ConfigError> {
    let v = kv.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))?;
    v.parse().map_err(|_| ConfigError::Invalid {
        key: key.to_string(),
        msg: format!("cannot parse '{v}'"),
    })
}

impl PipelineConfig {
    /// Load a config file and apply CLI overrides. Relative paths in the
    /// file resolve against the file's directory; override paths are
    /// taken as given.
    pub fn load(path: &Path, over: &Overrides) -> Result<Self, ConfigError> {
        let kv = read_kv_file(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let resolve = |s: &str| -> PathBuf {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let path_key = |key: &str, over: &Option<PathBuf>| -> Result<PathBuf, ConfigError> {
            if let Some(p) = over {
                return Ok(p.clone());
            }
            kv.get(key)
                .map(|s| resolve(s))
                .ok_or_else(|| ConfigError::Missing(key.to_string()))
        };
        let opt_path_key = |key: &str, over: &Option<PathBuf>| -> Option<PathBuf> {
            over.clone().or_else(|| kv.get(key).map(|s| resolve(s)))
        };

        let fx: f64 = required(&kv, "fx")?;
        let fy: f64 = required(&kv, "fy")?;
        let cx: f64 = required(&kv, "cx")?;
        let cy: f64 = required(&kv, "cy")?;
        let width: u32 = required(&kv, "width")?;
        let height: u32 = required(&kv, "height")?;
        if fx <= 0.0 || fy <= 0.0 || width == 0 || height == 0 {
            return Err(ConfigError::Invalid {
                key: "fx".into(),
                msg: "intrinsics must be positive".into(),
            });
        }

        let init_image = over
            .init_image
            .clone()
            .or_else(|| kv.get("init_image").cloned())
            .ok_or_else(|| ConfigError::Missing("init_image".into()))?;
        let init_pose_str = over
            .init_pose
            .clone()
            .or_else(|| kv.get("init_pose").cloned())
            .ok_or_else(|| ConfigError::Missing("init_pose".into()))?;
        let init_pose = parse_pose_string(&init_pose_str).map_err(|msg| ConfigError::Invalid {
            key: "init_pose".into(),
            msg,
        })?;

        let defaults_assoc = AssociationConfig::default();
        let ground_angle_deg: f64 = get(&kv, "ground_angle_deg", 15.0)?;
        let association = AssociationConfig {
            r0: get(&kv, "r0", defaults_assoc.r0)?,
            r_min: get(&kv, "r_min", defaults_assoc.r_min)?,
            delta: get(&kv, "delta", defaults_assoc.delta)?,
            ground_cos_threshold: ground_angle_deg.to_radians().cos(),
            match_threshold: get(&kv, "match_threshold", defaults_assoc.match_threshold)?,
            w_p: get(&kv, "w_p", defaults_assoc.w_p)?,
            w_n: get(&kv, "w_n", defaults_assoc.w_n)?,
            w_g: get(&kv, "w_g", defaults_assoc.w_g)?,
        };

        let splat = SplatParams {
            beta: get(&kv, "splat_beta", SplatParams::default().beta)?,
            r_max: get(&kv, "splat_r_max", SplatParams::default().r_max)?,
        };
        let ds = SfmConfig::default();
        let init_depth_mode = match kv.get("init_depth_mode").map(String::as_str) {
            None | Some("ray_plane") => InitDepthMode::RayPlane,
            Some("point_depth") => InitDepthMode::PointDepth,
            Some(other) => {
                return Err(ConfigError::Invalid {
                    key: "init_depth_mode".into(),
                    msg: format!("unknown mode '{other}'"),
                })
            }
        };
        let frustum_height: f64 = get(&kv, "frustum_height", ds.frustum_height)?;
        let sfm = SfmConfig {
            ransac_px: get(&kv, "ransac_px", ds.ransac_px)?,
            min_pnp_inliers: get(&kv, "min_pnp_inliers", ds.min_pnp_inliers)?,
            min_tri_angle_deg: get(&kv, "min_tri_angle_deg", ds.min_tri_angle_deg)?,
            min_init_points: get(&kv, "min_init_points", ds.min_init_points)?,
            min_visible: get(&kv, "min_visible", ds.min_visible)?,
            frustum_height,
            splat,
            init_depth_mode,
            init_depth_scale: get(&kv, "init_depth_scale", 1.0)?,
        };
        let db = BaConfig::default();
        let ba = BaConfig {
            const_track_threshold: get(&kv, "const_track_threshold", db.const_track_threshold)?,
            sphere_radius: get(&kv, "sphere_radius", db.sphere_radius)?,
            loss_scale_px: get(&kv, "loss_scale_px", db.loss_scale_px)?,
            tol_rel: get(&kv, "tol_rel", db.tol_rel)?,
            tol_step: get(&kv, "tol_step", db.tol_step)?,
            max_iters: get(&kv, "max_iters", db.max_iters)?,
        };
        let ransac_px = sfm.ransac_px;

        Ok(Self {
            map: path_key("map", &over.map)?,
            features_dir: path_key("features_dir", &over.features_dir)?,
            matches: path_key("matches", &over.matches)?,
            known_poses: opt_path_key("known_poses", &over.known_poses),
            images_dir: opt_path_key("images_dir", &None),
            truth_poses: opt_path_key("truth_poses", &None),
            out: path_key("out", &over.out)?,
            init_image,
            init_pose,
            seed: match over.seed {
                Some(s) => s,
                None => get(&kv, "seed", 7u64)?,
            },
            intrinsics: CameraIntrinsics::new(fx, fy, cx, cy, width, height),
            voxel_size: get(&kv, "voxel_size", 1.0)?,
            estimate_normals_k: get(&kv, "estimate_normals_k", 8usize)?,
            frustum_height,
            splat,
            association,
            sfm,
            ba,
            batch_every: get(&kv, "batch_every", 5usize)?,
            whole_map_growth: get(&kv, "whole_map_growth", 1.1)?,
            plane_constraints: get(&kv, "plane_constraints", true)?,
            filter_max_px: get(&kv, "filter_max_px", 2.0 * ransac_px)?,
            write_depth: get(&kv, "write_depth", true)?,
        })
    }

    pub fn ply_options(&self) -> PlyOptions {
        PlyOptions {
            voxel_size: self.voxel_size,
            estimate_normals_k: Some(self.estimate_normals_k),
        }
    }
}
