//! End-to-end orchestration: load, initialize, incremental loop with
//! scheduled bundle adjustments, artifact emission.

pub mod colorize;
pub mod config;
pub mod evaluate;
pub mod image_io;
pub mod metrics;
pub mod synthetic;

use crate::ba::{build_problem, solve, write_back, BaMode, BaProblem};
use crate::geometry::{project_pinhole, transform_to_camera, CameraPose};
use crate::map::{load_ply, render_depth, write_ply_ascii, LidarMap, LidarPoint, MapError};
use crate::scene::{read_features, read_matches, write_pose_file, SceneError, SceneStore};
use crate::sfm::{self, SfmError};
use config::PipelineConfig;
use metrics::MetricsRow;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("scene input: {0}")]
    Scene(#[from] SceneError),
    #[error("initialization: {0}")]
    Init(SfmError),
    #[error("no image could be registered against the initial image")]
    NoImageRegistrable,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Scene(_) | PipelineError::Io(_) => 2,
            PipelineError::Map(_) => 3,
            PipelineError::Init(_) => 4,
            PipelineError::NoImageRegistrable => 5,
        }
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub registered: usize,
    pub images: usize,
    pub live_points: usize,
    pub rows: Vec<MetricsRow>,
    /// Registration-refinement plus bundle-adjustment LM iterations.
    pub total_lm_iterations: usize,
    /// The registration-refinement share of `total_lm_iterations`.
    pub registration_lm_iterations: usize,
    /// Final world-to-camera poses of registered images, in image order.
    pub poses: Vec<(String, CameraPose)>,
}

/// Load the feature/match files into a scene store.
fn load_scene(cfg: &PipelineConfig) -> Result<SceneStore, PipelineError> {
    let mut scene = SceneStore::new(cfg.intrinsics);
    let mut names: Vec<String> = std::fs::read_dir(&cfg.features_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "txt"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    for name in &names {
        let pixels = read_features(cfg.features_dir.join(format!("{name}.txt")))?;
        scene.add_image(name, pixels);
    }
    for (a, b, pairs) in read_matches(&cfg.matches)? {
        let (Some(ia), Some(ib)) = (scene.image_id_by_name(&a), scene.image_id_by_name(&b)) else {
            log::warn!("match block {a}-{b} references unknown image, skipped");
            continue;
        };
        let pairs = pairs.into_iter().map(|(x, y)| (x, y)).collect();
        scene.set_matches(ia, ib, pairs);
    }
    Ok(scene)
}

/// Drop points whose mean reprojection error exceeds the filter limit or
/// that fall behind any observing camera. Single-observation LiDAR-seeded
/// points are exempt from the error gate.
fn filter_points(scene: &mut SceneStore, point_ids: &[u32], max_px: f64) {
    for &pid in point_ids {
        if !scene.points[pid as usize].alive {
            continue;
        }
        let track = scene.registered_track(pid);
        let position = scene.points[pid as usize].position;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut behind = false;
        for (im, f) in &track {
            let cam = transform_to_camera(&scene.images[*im].pose, &position);
            match project_pinhole(&scene.intrinsics, &cam) {
                Ok(px) => {
                    total += (px - scene.features[*im][*f].px).norm();
                    count += 1;
                }
                Err(_) => behind = true,
            }
        }
        if count > 0 {
            scene.points[pid as usize].error_stat = total / count as f64;
        }
        if behind || (count >= 2 && total / count as f64 > max_px) {
            scene.drop_point(pid);
        }
    }
}

/// Build, solve and write back one adjustment; returns the metrics row.
#[allow(clippy::too_many_arguments)]
fn run_ba(
    scene: &mut SceneStore,
    map: &LidarMap,
    mode: BaMode,
    anchor: usize,
    cfg: &PipelineConfig,
    registration_index: usize,
    truth: &HashMap<String, CameraPose>,
) -> Option<MetricsRow> {
    let mut problem: BaProblem = match build_problem(
        scene,
        map,
        mode,
        anchor,
        &cfg.association,
        &cfg.ba,
        cfg.frustum_height,
        &cfg.splat,
    ) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("{mode} adjustment skipped: {e}");
            return None;
        }
    };
    if !cfg.plane_constraints {
        problem.plane_factors.clear();
        // Mirror the builder's gauge fallback now that the planes are gone.
        if !problem.pose_blocks.iter().any(|b| b.constant) {
            if let Some(b) = problem.pose_blocks.first_mut() {
                b.constant = true;
            }
        }
    }
    let report = match solve(&mut problem, cfg.ba.max_iters, cfg.ba.tol_rel, cfg.ba.tol_step) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{mode} adjustment failed: {e}");
            return None;
        }
    };
    write_back(scene, &problem);
    let adjusted: Vec<u32> = problem
        .point_blocks
        .iter()
        .filter(|b| !b.constant)
        .map(|b| b.point_id)
        .collect();
    filter_points(scene, &adjusted, cfg.filter_max_px);

    let anchor_name = &scene.images[anchor].name;
    let (pose_error_m, pose_error_rad) = match truth.get(anchor_name) {
        Some(gt) => {
            let est = &scene.images[anchor].pose;
            let d = est.center() - gt.center();
            log::debug!(
                "{mode} #{registration_index}: anchor {anchor_name} center offset ({:.4}, {:.4}, {:.4})",
                d.x,
                d.y,
                d.z
            );
            (
                Some(d.norm()),
                Some((est.rotation * gt.rotation.inverse()).angle()),
            )
        }
        None => (None, None),
    };
    Some(MetricsRow {
        registration_index,
        mode,
        report,
        pose_error_m,
        pose_error_rad,
    })
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    // Map first: a bad map must not leave partial outputs behind.
    let map = load_ply(&cfg.map, &cfg.ply_options())?;
    let mut scene = load_scene(cfg)?;
    if let Some(path) = &cfg.known_poses {
        let (count, warnings) = sfm::load_known_poses(&mut scene, path).map_err(|e| match e {
            SfmError::Scene(s) => PipelineError::Scene(s),
            other => PipelineError::Init(other),
        })?;
        for w in warnings {
            log::warn!("{w}");
        }
        log::info!("attached {count} known-pose priors");
    }
    let truth: HashMap<String, CameraPose> = match &cfg.truth_poses {
        Some(path) => crate::scene::read_pose_file(path)?.into_iter().collect(),
        None => HashMap::new(),
    };

    let init_id = scene
        .image_id_by_name(&cfg.init_image)
        .ok_or_else(|| config::ConfigError::Invalid {
            key: "init_image".into(),
            msg: format!("image '{}' not found in features dir", cfg.init_image),
        })?;
    let seeded = sfm::initialize(&mut scene, &map, init_id, &cfg.init_pose, &cfg.sfm)
        .map_err(PipelineError::Init)?;
    log::info!("initialized from '{}' with {seeded} LiDAR-depth points", cfg.init_image);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut total_lm_iterations = 0usize;
    let mut registration_lm_iterations = 0usize;
    let mut failed: Vec<usize> = Vec::new();
    let mut registrations = 1usize;
    let mut last_whole_map_points = scene.live_point_ids().len().max(1);

    while let Some(next) = sfm::select_next_image_excluding(&scene, &cfg.sfm, &failed) {
        match sfm::register_image(&mut scene, next, &cfg.sfm, &mut rng) {
            Ok((_, iters)) => {
                total_lm_iterations += iters;
                registration_lm_iterations += iters;
            }
            Err(e) => {
                log::warn!("registration of '{}' failed: {e}", scene.images[next].name);
                failed.push(next);
                continue;
            }
        }
        registrations += 1;
        let created = sfm::triangulate_new(&mut scene, next, &cfg.sfm);
        log::info!(
            "registered '{}' ({registrations} total), {} new points",
            scene.images[next].name,
            created.len()
        );

        if let Some(row) = run_ba(&mut scene, &map, BaMode::Incremental, next, cfg, registrations, &truth) {
            total_lm_iterations += row.report.iterations;
            rows.push(row);
        }
        if registrations % cfg.batch_every == 0 {
            if let Some(row) =
                run_ba(&mut scene, &map, BaMode::BatchSphere, next, cfg, registrations, &truth)
            {
                total_lm_iterations += row.report.iterations;
                rows.push(row);
            }
        }
        let live = scene.live_point_ids().len();
        if live as f64 >= cfg.whole_map_growth * last_whole_map_points as f64 {
            if let Some(row) =
                run_ba(&mut scene, &map, BaMode::WholeMap, next, cfg, registrations, &truth)
            {
                total_lm_iterations += row.report.iterations;
                rows.push(row);
            }
            last_whole_map_points = live.max(1);
        }
    }
    if registrations == 1 {
        return Err(PipelineError::NoImageRegistrable);
    }

    // Final whole-map adjustment, anchored at the initial image.
    if let Some(row) = run_ba(&mut scene, &map, BaMode::WholeMap, init_id, cfg, registrations, &truth) {
        total_lm_iterations += row.report.iterations;
        rows.push(row);
    }

    emit_artifacts(cfg, &scene, &map, &rows)?;

    let poses: Vec<(String, CameraPose)> = scene
        .images
        .iter()
        .filter(|im| im.registered)
        .map(|im| (im.name.clone(), im.pose))
        .collect();
    Ok(RunSummary {
        registered: registrations,
        images: scene.images.len(),
        live_points: scene.live_point_ids().len(),
        rows,
        total_lm_iterations,
        registration_lm_iterations,
        poses,
    })
}

fn emit_artifacts(
    cfg: &PipelineConfig,
    scene: &SceneStore,
    map: &LidarMap,
    rows: &[MetricsRow],
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&cfg.out)?;
    let poses: Vec<(String, CameraPose)> = scene
        .images
        .iter()
        .filter(|im| im.registered)
        .map(|im| (im.name.clone(), im.pose))
        .collect();
    write_pose_file(cfg.out.join("poses.txt"), &poses)?;

    let cloud: Vec<LidarPoint> = scene
        .live_point_ids()
        .into_iter()
        .map(|pid| LidarPoint {
            position: scene.points[pid as usize].position,
            normal: crate::geometry::Vec3::zeros(),
        })
        .collect();
    write_ply_ascii(cfg.out.join("points.ply"), &cloud, None)?;

    metrics::emit_metrics(rows, cfg.out.join("metrics.csv"))?;

    if cfg.write_depth {
        let ddir = cfg.out.join("depth");
        std::fs::create_dir_all(&ddir)?;
        for im in scene.images.iter().filter(|im| im.registered) {
            let depth = render_depth(map, &im.pose, &scene.intrinsics, cfg.frustum_height, &cfg.splat);
            depth.write_pgm(ddir.join(format!("{}.pgm", im.name)))?;
        }
    }

    if let Some(images_dir) = &cfg.images_dir {
        let (colors, warnings) = colorize::colorize_map(
            map,
            &scene.intrinsics,
            &poses,
            images_dir,
            cfg.frustum_height,
            &cfg.splat,
        );
        for w in warnings {
            log::warn!("{w}");
        }
        write_ply_ascii(cfg.out.join("colored_map.ply"), &map.points, Some(&colors))?;
    }
    Ok(())
}
