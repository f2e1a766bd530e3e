//! Point-to-plane association: bind reconstructed 3D points to LiDAR
//! planes by depth projection or nearest-neighbor search.

use crate::geometry::{Pixel, Vec3};
use crate::map::{render_depth, DepthImage, LidarMap, SplatParams};
use crate::scene::SceneStore;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationKind {
    Projected,
    NearestNeighbor,
}

/// A 3D point bound to the plane of a LiDAR point.
#[derive(Debug, Clone, Copy)]
pub struct PlaneCorrespondence {
    pub lidar_index: usize,
    pub kind: AssociationKind,
    pub is_ground: bool,
    pub weight: f64,
    pub search_round: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct AssociationConfig {
    /// Initial NN search radius in meters.
    pub r0: f64,
    /// Radius floor in meters.
    pub r_min: f64,
    /// Per-round radius decrement in meters.
    pub delta: f64,
    /// |n_z| at or above this marks a ground plane.
    pub ground_cos_threshold: f64,
    /// Minimum common matches for a neighbor image to project.
    pub match_threshold: usize,
    pub w_p: f64,
    pub w_n: f64,
    pub w_g: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            r0: 1.0,
            r_min: 0.1,
            delta: 0.1,
            ground_cos_threshold: (15.0f64).to_radians().cos(),
            match_threshold: 30,
            w_p: 1.0,
            w_n: 0.6,
            w_g: 1.5,
        }
    }
}

impl AssociationConfig {
    pub fn weight_for(&self, kind: AssociationKind, is_ground: bool) -> f64 {
        if is_ground {
            self.w_g
        } else {
            match kind {
                AssociationKind::Projected => self.w_p,
                AssociationKind::NearestNeighbor => self.w_n,
            }
        }
    }
}

/// Search radius after `round` optimizations: shrinks linearly, floored
/// at r_min.
pub fn nn_radius(cfg: &AssociationConfig, round: u32) -> f64 {
    (cfg.r0 - round as f64 * cfg.delta).max(cfg.r_min)
}

pub fn classify_ground(normal: &Vec3, cfg: &AssociationConfig) -> bool {
    normal.z.abs() >= cfg.ground_cos_threshold
}

/// Nearest-neighbor association for a single point.
pub fn associate_nn(
    map: &LidarMap,
    x: &Vec3,
    round: u32,
    cfg: &AssociationConfig,
) -> Option<PlaneCorrespondence> {
    let (idx, _dist) = map.nearest_within(x, nn_radius(cfg, round))?;
    let point = &map.points[idx];
    if !point.has_normal() {
        return None;
    }
    let is_ground = classify_ground(&point.normal, cfg);
    Some(PlaneCorrespondence {
        lidar_index: idx,
        kind: AssociationKind::NearestNeighbor,
        is_ground,
        weight: cfg.weight_for(AssociationKind::NearestNeighbor, is_ground),
        search_round: round,
    })
}

/// One depth-projection candidate: the LiDAR point splatted under a
/// track feature of some observing image.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionCandidate {
    pub lidar_index: usize,
    pub image_id: usize,
    pub feature_idx: usize,
}

/// Among the candidates, pick the LiDAR point whose plane normal makes
/// the smallest angle with the line from the LiDAR point to the
/// feature's backprojection at unit depth (world frame). Ties broken by
/// the smaller LiDAR index.
pub fn select_by_angle(
    candidates: &[ProjectionCandidate],
    scene: &SceneStore,
    map: &LidarMap,
) -> usize {
    assert!(!candidates.is_empty());
    let mut best: Option<(f64, usize)> = None;
    for c in candidates {
        let lidar = &map.points[c.lidar_index];
        let image = &scene.images[c.image_id];
        let norm: Pixel = scene.features[c.image_id][c.feature_idx].norm;
        let cam_point = Vec3::new(norm.x, norm.y, 1.0);
        let inv = image.pose.inverse();
        let world_point = inv.rotation * cam_point + inv.translation;
        let line = world_point - lidar.position;
        let angle = if line.norm() < 1e-12 {
            0.0
        } else {
            (line.normalize().dot(&lidar.normal).abs()).min(1.0).acos()
        };
        let key = (angle, c.lidar_index);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    best.unwrap().1
}

/// Depth-projection association for every live point tracked by the
/// newly registered image. Projecting images are the registered
/// neighbors of `new_image_id` sharing at least `match_threshold`
/// matches; a candidate arises wherever a track feature's pixel lies
/// under a rendered splat.
pub fn associate_projected(
    scene: &SceneStore,
    map: &LidarMap,
    new_image_id: usize,
    cfg: &AssociationConfig,
    frustum_height: f64,
    splat: &SplatParams,
) -> Vec<(u32, PlaneCorrespondence)> {
    let neighbors: Vec<usize> = scene
        .registered_ids()
        .into_iter()
        .filter(|&m| m != new_image_id && scene.match_count(new_image_id, m) >= cfg.match_threshold)
        .collect();
    if neighbors.is_empty() {
        return Vec::new();
    }
    let mut depth_cache: HashMap<usize, DepthImage> = HashMap::new();
    for &m in &neighbors {
        let img = render_depth(
            map,
            &scene.images[m].pose,
            &scene.intrinsics,
            frustum_height,
            splat,
        );
        depth_cache.insert(m, img);
    }
    let mut out = Vec::new();
    for point_id in scene.points_tracked_by(new_image_id) {
        let point = &scene.points[point_id as usize];
        let mut candidates = Vec::new();
        for &(im, f) in &point.track {
            if !neighbors.contains(&im) {
                continue;
            }
            let px = scene.features[im][f].px;
            if let Some(src) = depth_cache[&im].source_at_pixel(px.x, px.y) {
                if map.points[src as usize].has_normal() {
                    candidates.push(ProjectionCandidate {
                        lidar_index: src as usize,
                        image_id: im,
                        feature_idx: f,
                    });
                }
            }
        }
        if candidates.is_empty() {
            continue;
        }
        let lidar_index = select_by_angle(&candidates, scene, map);
        let is_ground = classify_ground(&map.points[lidar_index].normal, cfg);
        out.push((
            point_id,
            PlaneCorrespondence {
                lidar_index,
                kind: AssociationKind::Projected,
                is_ground,
                weight: cfg.weight_for(AssociationKind::Projected, is_ground),
                search_round: point.optimization_round,
            },
        ));
    }
    out
}
