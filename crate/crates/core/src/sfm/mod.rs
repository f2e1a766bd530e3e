//! Incremental reconstruction control: LiDAR-depth initialization,
//! next-image selection, PnP registration and triangulation.

pub mod pnp;
pub mod triangulate;

use crate::geometry::{backproject_ray, transform_to_camera, CameraPose, Vec3, DEPTH_EPSILON};
use crate::map::{render_depth, LidarMap, SplatParams};
use crate::scene::{read_pose_file, SceneError, SceneStore};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;
use triangulate::Measurement;

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("initialization failed: only {got} features obtained LiDAR depth, {required} required")]
    InitializationFailed { got: usize, required: usize },
    #[error(transparent)]
    Registration(#[from] pnp::PnpError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// How initialization turns a splat hit into feature depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitDepthMode {
    /// Intersect the viewing ray with the source point's plane.
    RayPlane,
    /// Use the source point's camera-frame depth directly.
    PointDepth,
}

#[derive(Debug, Clone, Copy)]
pub struct SfmConfig {
    pub ransac_px: f64,
    pub min_pnp_inliers: usize,
    pub min_tri_angle_deg: f64,
    pub min_init_points: usize,
    pub min_visible: usize,
    pub frustum_height: f64,
    pub splat: SplatParams,
    pub init_depth_mode: InitDepthMode,
    /// Scales initialization depths; 1.0 in normal operation, used by
    /// scale-ablation experiments.
    pub init_depth_scale: f64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            ransac_px: 4.0,
            min_pnp_inliers: 15,
            min_tri_angle_deg: 1.5,
            min_init_points: 50,
            min_visible: 20,
            frustum_height: 30.0,
            splat: SplatParams::default(),
            init_depth_mode: InitDepthMode::RayPlane,
            init_depth_scale: 1.0,
        }
    }
}

/// Seed the reconstruction from a single image with a manually supplied
/// approximate pose: every feature covered by a LiDAR splat receives a
/// depth from the map and becomes a world point. Returns the number of
/// seeded points.
pub fn initialize(
    scene: &mut SceneStore,
    map: &LidarMap,
    initial_image: usize,
    initial_pose: &CameraPose,
    cfg: &SfmConfig,
) -> Result<usize, SfmError> {
    let depth = render_depth(
        map,
        initial_pose,
        &scene.intrinsics,
        cfg.frustum_height,
        &cfg.splat,
    );
    let inv = initial_pose.inverse();
    let center = initial_pose.center();
    let mut seeded = Vec::new();
    for f in 0..scene.features[initial_image].len() {
        let feat = scene.features[initial_image][f];
        let Some(src) = depth.source_at_pixel(feat.px.x, feat.px.y) else {
            continue;
        };
        let lidar = &map.points[src as usize];
        let ray_cam = backproject_ray(&scene.intrinsics, &feat.px);
        let ray_world = inv.rotation * ray_cam;
        let world = match cfg.init_depth_mode {
            InitDepthMode::RayPlane => {
                if !lidar.has_normal() {
                    continue;
                }
                let denom = lidar.normal.dot(&ray_world);
                if denom.abs() < 1e-6 {
                    continue;
                }
                let t = (lidar.plane_offset() - lidar.normal.dot(&center)) / denom;
                if t <= DEPTH_EPSILON {
                    continue;
                }
                center + ray_world * (t * cfg.init_depth_scale)
            }
            InitDepthMode::PointDepth => {
                let z = transform_to_camera(initial_pose, &lidar.position).z;
                if z <= DEPTH_EPSILON {
                    continue;
                }
                let cam = ray_cam * (z * cfg.init_depth_scale / ray_cam.z);
                inv.rotation * cam + inv.translation
            }
        };
        seeded.push((world, f));
    }
    if seeded.len() < cfg.min_init_points {
        return Err(SfmError::InitializationFailed {
            got: seeded.len(),
            required: cfg.min_init_points,
        });
    }
    scene.images[initial_image].pose = *initial_pose;
    scene.images[initial_image].registered = true;
    let count = seeded.len();
    for (world, f) in seeded {
        scene.add_point(world, vec![(initial_image, f)]);
    }
    Ok(count)
}

/// Distinct live model points visible in an unregistered image, with
/// the observing feature index per point.
fn visible_points(scene: &SceneStore, image_id: usize) -> HashMap<u32, usize> {
    let mut out: HashMap<u32, usize> = HashMap::new();
    for r in scene.registered_ids() {
        for (f, g) in scene.matches_between(image_id, r) {
            if let Some(pid) = scene.point_of_feature(r, g as usize) {
                if scene.points[pid as usize].alive {
                    out.entry(pid).or_insert(f as usize);
                }
            }
        }
    }
    out
}

/// Multi-level occupancy of the visible features' pixels: mean occupied
/// cell fraction over 2x2, 4x4 and 8x8 grids.
fn grid_coverage(scene: &SceneStore, image_id: usize, feature_idxs: &[usize]) -> f64 {
    if feature_idxs.is_empty() {
        return 0.0;
    }
    let w = scene.intrinsics.width as f64;
    let h = scene.intrinsics.height as f64;
    let mut total = 0.0;
    for level in 1..=3u32 {
        let cells = 1usize << level;
        let mut occupied = vec![false; cells * cells];
        for &f in feature_idxs {
            let px = scene.features[image_id][f].px;
            let cx = ((px.x / w * cells as f64) as usize).min(cells - 1);
            let cy = ((px.y / h * cells as f64) as usize).min(cells - 1);
            occupied[cy * cells + cx] = true;
        }
        let frac = occupied.iter().filter(|&&o| o).count() as f64 / (cells * cells) as f64;
        total += frac;
    }
    total / 3.0
}

/// Next image to register: the unregistered image maximizing
/// visible-point count times feature-distribution coverage. None when
/// no candidate sees enough model points.
pub fn select_next_image(scene: &SceneStore, cfg: &SfmConfig) -> Option<usize> {
    select_next_image_excluding(scene, cfg, &[])
}

/// Like [`select_next_image`], skipping images that already failed
/// registration this run.
pub fn select_next_image_excluding(
    scene: &SceneStore,
    cfg: &SfmConfig,
    excluded: &[usize],
) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for image_id in 0..scene.images.len() {
        if scene.images[image_id].registered || excluded.contains(&image_id) {
            continue;
        }
        let visible = visible_points(scene, image_id);
        if visible.len() < cfg.min_visible {
            continue;
        }
        let feats: Vec<usize> = visible.values().copied().collect();
        let score = visible.len() as f64 * grid_coverage(scene, image_id, &feats);
        if best.is_none_or(|(bs, _)| score > bs) {
            best = Some((score, image_id));
        }
    }
    best.map(|(_, id)| id)
}

/// 2D-3D correspondences of an unregistered image: feature index and the
/// model point it observes through matches to registered images. When
/// several points claim one feature, majority vote, ties to the smaller
/// point id.
fn correspondences_2d3d(scene: &SceneStore, image_id: usize) -> Vec<(usize, u32)> {
    let mut votes: HashMap<usize, HashMap<u32, usize>> = HashMap::new();
    for r in scene.registered_ids() {
        for (f, g) in scene.matches_between(image_id, r) {
            if let Some(pid) = scene.point_of_feature(r, g as usize) {
                if scene.points[pid as usize].alive {
                    *votes.entry(f as usize).or_default().entry(pid).or_insert(0) += 1;
                }
            }
        }
    }
    let mut out: Vec<(usize, u32)> = votes
        .into_iter()
        .map(|(f, candidates)| {
            let pid = candidates
                .into_iter()
                .max_by_key(|&(pid, count)| (count, std::cmp::Reverse(pid)))
                .unwrap()
                .0;
            (f, pid)
        })
        .collect();
    out.sort_unstable();
    out
}

/// Register an image by PnP (or refine a known-pose prior), mark it
/// registered and extend the inlier tracks with its observations.
/// Returns the pose and the LM iteration count spent on refinement.
pub fn register_image(
    scene: &mut SceneStore,
    image_id: usize,
    cfg: &SfmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(CameraPose, usize), SfmError> {
    let corrs_idx = correspondences_2d3d(scene, image_id);
    let corrs: Vec<(Vec3, crate::geometry::Pixel)> = corrs_idx
        .iter()
        .map(|&(f, pid)| {
            (
                scene.points[pid as usize].position,
                scene.features[image_id][f].px,
            )
        })
        .collect();
    let (pose, inliers, iterations) = match scene.images[image_id].pose_prior {
        Some(prior) => {
            // The prior replaces the minimal-solver guess; refinement and
            // inlier gating are unchanged.
            let (refined, iters) = pnp::refine_pose(&prior, &corrs, &scene.intrinsics, 50);
            let inliers: Vec<usize> = corrs
                .iter()
                .enumerate()
                .filter(|(_, (w, px))| {
                    let cam = transform_to_camera(&refined, w);
                    crate::geometry::project_pinhole(&scene.intrinsics, &cam)
                        .map(|p| (p - px).norm() < cfg.ransac_px)
                        .unwrap_or(false)
                })
                .map(|(i, _)| i)
                .collect();
            if inliers.len() < cfg.min_pnp_inliers.max(4) {
                return Err(SfmError::Registration(pnp::PnpError::RegistrationFailed {
                    inliers: inliers.len(),
                    required: cfg.min_pnp_inliers.max(4),
                }));
            }
            (refined, inliers, iters)
        }
        None => pnp::ransac_pnp(
            &corrs,
            &scene.intrinsics,
            cfg.ransac_px,
            cfg.min_pnp_inliers,
            rng,
        )?,
    };
    scene.images[image_id].pose = pose;
    scene.images[image_id].registered = true;
    for &i in &inliers {
        let (f, pid) = corrs_idx[i];
        scene.add_observation(pid, image_id, f);
    }
    Ok((pose, iterations))
}

/// Triangulate new points from the unclaimed features of a freshly
/// registered image. Returns the ids of the created points.
pub fn triangulate_new(
    scene: &mut SceneStore,
    image_id: usize,
    cfg: &SfmConfig,
) -> Vec<u32> {
    debug_assert!(scene.images[image_id].registered);
    let registered: Vec<usize> = scene
        .registered_ids()
        .into_iter()
        .filter(|&r| r != image_id)
        .collect();
    let mut created = Vec::new();
    for f in 0..scene.features[image_id].len() {
        if scene.point_of_feature(image_id, f).is_some() {
            continue;
        }
        // Candidate track: this feature plus its unclaimed matches in
        // registered images.
        let mut obs: Vec<(usize, usize)> = vec![(image_id, f)];
        for &r in &registered {
            for (a, b) in scene.matches_between(image_id, r) {
                if a as usize == f && scene.point_of_feature(r, b as usize).is_none() {
                    obs.push((r, b as usize));
                }
            }
        }
        if obs.len() < 2 {
            continue;
        }
        let measurements: Vec<Measurement> = obs
            .iter()
            .map(|&(im, fi)| {
                let feat = scene.features[im][fi];
                Measurement {
                    pose: scene.images[im].pose,
                    px: feat.px,
                    norm: feat.norm,
                }
            })
            .collect();
        let Some((point, consensus)) = triangulate::ransac_triangulate(
            &measurements,
            &scene.intrinsics,
            cfg.ransac_px,
            cfg.min_tri_angle_deg,
        ) else {
            continue;
        };
        let track: Vec<(usize, usize)> = consensus.iter().map(|&k| obs[k]).collect();
        created.push(scene.add_point(point, track));
    }
    created
}

/// Attach known-pose priors by image name. Returns the number attached
/// and a warning per unknown image name.
pub fn load_known_poses<P: AsRef<Path>>(
    scene: &mut SceneStore,
    path: P,
) -> Result<(usize, Vec<String>), SfmError> {
    let entries = read_pose_file(path)?;
    let mut count = 0;
    let mut warnings = Vec::new();
    for (name, pose) in entries {
        match scene.image_id_by_name(&name) {
            Some(id) => {
                scene.images[id].pose_prior = Some(pose);
                count += 1;
            }
            None => warnings.push(format!("unknown image name '{name}' in pose file")),
        }
    }
    Ok((count, warnings))
}
