//! Bundle adjustment: reprojection factors on the normalized image
//! plane plus weighted point-to-plane factors against the LiDAR map,
//! scheduled in incremental, batch-sphere and whole-map modes.

mod solver;

pub use solver::{reprojection_blocks, solve, BaError, SolveReport};

use crate::association::{associate_nn, associate_projected, AssociationConfig, AssociationKind};
use crate::geometry::{transform_to_camera, CameraIntrinsics, CameraPose, Pixel, Vec3, DEPTH_EPSILON};
use crate::map::{LidarMap, SplatParams};
use crate::scene::SceneStore;
use nalgebra::Vector2;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaMode {
    Incremental,
    BatchSphere,
    WholeMap,
}

impl std::fmt::Display for BaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BaMode::Incremental => "incremental",
            BaMode::BatchSphere => "batch",
            BaMode::WholeMap => "whole_map",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BaConfig {
    /// Points with at least this many registered track features are
    /// held constant in incremental mode.
    pub const_track_threshold: usize,
    /// Batch-mode sphere radius in meters.
    pub sphere_radius: f64,
    /// Cauchy loss scale on reprojection, in pixels.
    pub loss_scale_px: f64,
    pub tol_rel: f64,
    pub tol_step: f64,
    pub max_iters: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            const_track_threshold: 8,
            sphere_radius: 5.0,
            loss_scale_px: 1.0,
            tol_rel: 1e-8,
            tol_step: 1e-10,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoseBlock {
    pub image_id: usize,
    pub pose: CameraPose,
    pub constant: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PointBlock {
    pub point_id: u32,
    pub position: Vec3,
    pub constant: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ReprojectionFactor {
    pub pose_idx: usize,
    pub point_idx: usize,
    /// Observation on the normalized image plane.
    pub obs: Pixel,
}

#[derive(Debug, Clone, Copy)]
pub struct PlaneFactor {
    pub point_idx: usize,
    pub normal: Vec3,
    /// n·l of the corresponding LiDAR point.
    pub offset: f64,
    pub weight: f64,
    pub kind: AssociationKind,
    pub is_ground: bool,
}

/// Factor-graph snapshot handed to the solver.
pub struct BaProblem {
    pub mode: BaMode,
    pub pose_blocks: Vec<PoseBlock>,
    pub point_blocks: Vec<PointBlock>,
    pub reprojection_factors: Vec<ReprojectionFactor>,
    pub plane_factors: Vec<PlaneFactor>,
    /// Cauchy scale on the normalized plane (loss_scale_px / fx).
    pub loss_scale: f64,
    /// For reporting errors in original-image pixels.
    pub fx: f64,
    pub fy: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("bundle adjustment problem has no variable block")]
    EmptyProblem,
}

/// Reprojection residual on the normalized plane. None signals a
/// cheirality violation: the factor is disabled for the iteration.
pub fn reprojection_residual(pose: &CameraPose, x: &Vec3, obs: &Pixel) -> Option<Vector2<f64>> {
    let cam = transform_to_camera(pose, x);
    if cam.z <= DEPTH_EPSILON {
        return None;
    }
    Some(Vector2::new(cam.x / cam.z - obs.x, cam.y / cam.z - obs.y))
}

/// Weighted signed point-to-plane distance: w·(n·X − offset).
pub fn plane_residual(x: &Vec3, normal: &Vec3, offset: f64, weight: f64) -> f64 {
    weight * (normal.dot(x) - offset)
}

/// True when the plane factors leave no similarity transform free.
/// Rank is judged against the largest singular value so that map noise
/// in near-duplicate planes cannot fake a fourth direction.
fn similarity_gauge_pinned(factors: &[PlaneFactor]) -> bool {
    if factors.len() < 4 {
        return false;
    }
    let scale = factors
        .iter()
        .map(|f| f.offset.abs())
        .fold(1.0_f64, f64::max);
    let mut m = nalgebra::DMatrix::zeros(factors.len(), 4);
    for (i, f) in factors.iter().enumerate() {
        m[(i, 0)] = f.normal.x;
        m[(i, 1)] = f.normal.y;
        m[(i, 2)] = f.normal.z;
        m[(i, 3)] = f.offset / scale;
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv[3] > 0.05 * sv[0]
}

/// Assemble the factor graph around `anchor_image_id` per the mode
/// rules, refreshing point-to-plane correspondences for the variable
/// points. Correspondences are stored back into the scene.
pub fn build_problem(
    scene: &mut SceneStore,
    map: &LidarMap,
    mode: BaMode,
    anchor_image_id: usize,
    acfg: &AssociationConfig,
    bcfg: &BaConfig,
    frustum_height: f64,
    splat: &SplatParams,
) -> Result<BaProblem, BuildError> {
    let registered = scene.registered_ids();
    assert!(!registered.is_empty());

    let variable_images: Vec<usize> = match mode {
        BaMode::Incremental => registered
            .iter()
            .copied()
            .filter(|&m| {
                m == anchor_image_id
                    || scene.match_count(anchor_image_id, m) >= acfg.match_threshold
            })
            .collect(),
        BaMode::BatchSphere => {
            let center = scene.images[anchor_image_id].pose.center();
            registered
                .iter()
                .copied()
                .filter(|&m| (scene.images[m].pose.center() - center).norm() <= bcfg.sphere_radius)
                .collect()
        }
        BaMode::WholeMap => registered.clone(),
    };

    // Points in the problem: observed by a variable image (all live
    // points in whole-map mode).
    let mut point_ids: Vec<u32> = match mode {
        BaMode::WholeMap => scene.live_point_ids(),
        _ => {
            let mut ids: Vec<u32> = variable_images
                .iter()
                .flat_map(|&im| scene.points_tracked_by(im))
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
    };
    point_ids.retain(|&id| scene.points[id as usize].alive);

    // Variability per point.
    let point_blocks: Vec<PointBlock> = point_ids
        .iter()
        .map(|&point_id| {
            let constant = match mode {
                BaMode::Incremental => {
                    scene.registered_track(point_id).len() >= bcfg.const_track_threshold
                }
                _ => false,
            };
            PointBlock {
                point_id,
                position: scene.points[point_id as usize].position,
                constant,
            }
        })
        .collect();
    let point_index: HashMap<u32, usize> = point_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();

    // Pose blocks: variable images, plus constant blocks for any other
    // registered observer of an in-problem point.
    let mut pose_blocks: Vec<PoseBlock> = variable_images
        .iter()
        .map(|&image_id| PoseBlock {
            image_id,
            pose: scene.images[image_id].pose,
            constant: false,
        })
        .collect();
    let mut pose_index: HashMap<usize, usize> = variable_images
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();

    let mut reprojection_factors = Vec::new();
    for (point_idx, &point_id) in point_ids.iter().enumerate() {
        let constant_point = point_blocks[point_idx].constant;
        for (im, f) in scene.registered_track(point_id) {
            let pose_idx = match pose_index.get(&im) {
                Some(&i) => i,
                None => {
                    // A factor between a constant pose and a constant
                    // point constrains nothing.
                    if constant_point {
                        continue;
                    }
                    let i = pose_blocks.len();
                    pose_blocks.push(PoseBlock {
                        image_id: im,
                        pose: scene.images[im].pose,
                        constant: true,
                    });
                    pose_index.insert(im, i);
                    i
                }
            };
            if pose_blocks[pose_idx].constant && constant_point {
                continue;
            }
            reprojection_factors.push(ReprojectionFactor {
                pose_idx,
                point_idx,
                obs: scene.features[im][f].norm,
            });
        }
    }

    // Point-to-plane association for variable points.
    let mut plane_factors = Vec::new();
    let mut assigned: HashMap<u32, crate::association::PlaneCorrespondence> = HashMap::new();
    if mode == BaMode::Incremental {
        // Tracked-by-anchor points use the depth projection method.
        for (point_id, corr) in
            associate_projected(scene, map, anchor_image_id, acfg, frustum_height, splat)
        {
            if point_index.contains_key(&point_id) {
                assigned.insert(point_id, corr);
            }
        }
    }
    for (point_idx, &point_id) in point_ids.iter().enumerate() {
        if point_blocks[point_idx].constant {
            continue;
        }
        let corr = match assigned.get(&point_id) {
            Some(c) => Some(*c),
            None => {
                let point = &scene.points[point_id as usize];
                associate_nn(map, &point.position, point.optimization_round, acfg)
            }
        };
        let Some(corr) = corr else {
            scene.points[point_id as usize].correspondence = None;
            continue;
        };
        let lidar = &map.points[corr.lidar_index];
        plane_factors.push(PlaneFactor {
            point_idx,
            normal: lidar.normal,
            offset: lidar.plane_offset(),
            weight: corr.weight,
            kind: corr.kind,
            is_ground: corr.is_ground,
        });
        scene.points[point_id as usize].correspondence = Some(corr);
    }

    // Gauge: the plane set pins the 7-dim similarity gauge only when no
    // infinitesimal similarity (w, t, s) preserves every plane. Such a
    // motion needs w parallel to every normal and n·t + s·d = 0 per
    // plane, so the gauge is pinned exactly when the rows (n, d) reach
    // rank 4. A single wall plus the ground (rank 2) lets the model
    // slide along the wall; even three mutually orthogonal planes
    // (rank 3) leave it free to inflate about their corner. When the
    // planes fall short and nothing else anchors the frame, freeze the
    // anchor pose.
    let has_constant_pose = pose_blocks.iter().any(|p| p.constant);
    let constant_points = point_blocks.iter().filter(|p| p.constant).count();
    if !has_constant_pose && constant_points < 3 && !similarity_gauge_pinned(&plane_factors) {
        if let Some(&anchor_idx) = pose_index.get(&anchor_image_id) {
            pose_blocks[anchor_idx].constant = true;
        } else if let Some(first) = pose_blocks.first_mut() {
            first.constant = true;
        }
    }

    let any_variable = pose_blocks.iter().any(|p| !p.constant)
        || point_blocks.iter().any(|p| !p.constant);
    if !any_variable {
        return Err(BuildError::EmptyProblem);
    }

    let intr: &CameraIntrinsics = &scene.intrinsics;
    Ok(BaProblem {
        mode,
        pose_blocks,
        point_blocks,
        reprojection_factors,
        plane_factors,
        loss_scale: bcfg.loss_scale_px / intr.fx,
        fx: intr.fx,
        fy: intr.fy,
    })
}

/// Copy optimized blocks back into the scene and bump the optimization
/// round of every variable point.
pub fn write_back(scene: &mut SceneStore, problem: &BaProblem) {
    for block in &problem.pose_blocks {
        if !block.constant {
            scene.images[block.image_id].pose = block.pose;
        }
    }
    for block in &problem.point_blocks {
        if !block.constant {
            let point = &mut scene.points[block.point_id as usize];
            point.position = block.position;
            point.optimization_round += 1;
        }
    }
}
