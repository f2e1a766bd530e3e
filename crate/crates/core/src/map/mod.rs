//! LiDAR map ingestion, spatial indexing and frustum queries.

mod depth;
mod kdtree;
mod ply;

pub use depth::{render_depth, DepthImage, SplatParams, EMPTY_SOURCE};
pub use kdtree::KdTree;
pub use ply::{load_ply, write_ply_ascii, write_ply_binary, PlyOptions};

use crate::geometry::{backproject_ray, CameraIntrinsics, CameraPose, Pixel, Vec3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ply parse error: {0}")]
    Parse(String),
    #[error("map has no normals and normal estimation is disabled")]
    MissingNormals,
}

/// A map point together with the unit normal of its local plane.
/// A zero normal marks a degenerate neighborhood; such points are
/// never used for association.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

impl LidarPoint {
    pub fn has_normal(&self) -> bool {
        self.normal.norm_squared() > 0.5
    }

    /// Signed plane offset n·l.
    pub fn plane_offset(&self) -> f64 {
        self.normal.dot(&self.position)
    }
}

type VoxelKey = (i32, i32, i32);

/// Immutable LiDAR map with a voxel grid and kd-tree over point positions.
#[derive(Debug)]
pub struct LidarMap {
    pub points: Vec<LidarPoint>,
    voxel_index: HashMap<VoxelKey, Vec<u32>>,
    kd_index: KdTree,
    pub voxel_size: f64,
}

/// Truncated viewing pyramid: apex at the camera center, four corner
/// rays through the image corners, cut at `height` meters of depth.
pub struct Frustum {
    pub apex: Vec3,
    pub corner_rays: [Vec3; 4],
    pub height: f64,
    /// Inward-pointing side plane normals (world frame).
    side_normals: [Vec3; 4],
    /// World-frame optical axis (camera +z).
    axis: Vec3,
}

impl Frustum {
    pub fn new(pose: &CameraPose, intr: &CameraIntrinsics, height: f64) -> Self {
        assert!(height > 0.0);
        let apex = pose.center();
        let rot_inv = pose.rotation.inverse();
        let w = intr.width as f64;
        let h = intr.height as f64;
        let corners = [
            Pixel::new(0.0, 0.0),
            Pixel::new(w, 0.0),
            Pixel::new(w, h),
            Pixel::new(0.0, h),
        ];
        let corner_rays =
            corners.map(|c| rot_inv * backproject_ray(intr, &c));
        // Adjacent corner pairs wind counter-clockwise when viewed from
        // behind the apex, so d_next x d_cur points into the pyramid.
        let mut side_normals = [Vec3::zeros(); 4];
        for i in 0..4 {
            let j = (i + 1) % 4;
            let n = corner_rays[j].cross(&corner_rays[i]);
            side_normals[i] = n.normalize();
        }
        let axis = rot_inv * Vec3::new(0.0, 0.0, 1.0);
        // Orient normals inward (toward the axis).
        for n in side_normals.iter_mut() {
            if n.dot(&axis) < 0.0 {
                *n = -*n;
            }
        }
        Self {
            apex,
            corner_rays,
            height,
            side_normals,
            axis,
        }
    }

    /// Strict containment test for a single point.
    pub fn contains(&self, p: &Vec3) -> bool {
        let rel = p - self.apex;
        let depth = self.axis.dot(&rel);
        if depth <= 0.0 || depth > self.height {
            return false;
        }
        self.side_normals.iter().all(|n| n.dot(&rel) >= 0.0)
    }

    /// Conservative axis-aligned-box overlap: true unless the box lies
    /// fully outside one of the bounding half-spaces.
    fn overlaps_aabb(&self, lo: &Vec3, hi: &Vec3) -> bool {
        let planes = self
            .side_normals
            .iter()
            .map(|n| (*n, n.dot(&self.apex)))
            .chain(std::iter::once((-self.axis, -self.axis.dot(&self.apex) - self.height)));
        for (n, d) in planes {
            // Farthest box corner along n.
            let mut s = 0.0;
            for axis in 0..3 {
                s += n[axis] * if n[axis] >= 0.0 { hi[axis] } else { lo[axis] };
            }
            if s < d {
                return false;
            }
        }
        true
    }

    /// World-space AABB of the truncated pyramid.
    fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = self.apex;
        let mut hi = self.apex;
        for ray in &self.corner_rays {
            let denom = self.axis.dot(ray);
            debug_assert!(denom > 0.0);
            let far = self.apex + ray * (self.height / denom);
            lo = lo.inf(&far);
            hi = hi.sup(&far);
        }
        (lo, hi)
    }
}

impl LidarMap {
    pub fn from_points(points: Vec<LidarPoint>, voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0);
        let mut voxel_index: HashMap<VoxelKey, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            voxel_index
                .entry(voxel_key(&p.position, voxel_size))
                .or_default()
                .push(i as u32);
        }
        let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
        let kd_index = KdTree::build(&positions);
        Self {
            points,
            voxel_index,
            kd_index,
            voxel_size,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest map point within `radius` meters of `query`.
    pub fn nearest_within(&self, query: &Vec3, radius: f64) -> Option<(usize, f64)> {
        assert!(radius > 0.0);
        self.kd_index.nearest_within(query, radius)
    }

    /// Indices of all points in voxels overlapping the viewing pyramid.
    /// Guaranteed superset of the points strictly inside the pyramid.
    pub fn frustum_points(
        &self,
        pose: &CameraPose,
        intr: &CameraIntrinsics,
        height: f64,
    ) -> Vec<u32> {
        let frustum = Frustum::new(pose, intr, height);
        let (lo, hi) = frustum.aabb();
        let vs = self.voxel_size;
        let k_lo = voxel_key(&lo, vs);
        let k_hi = voxel_key(&hi, vs);
        let mut out = Vec::new();
        // Iterate whichever is smaller: the AABB voxel range or the
        // occupied voxel set.
        let range_cells = ((k_hi.0 - k_lo.0 + 1) as i64)
            * ((k_hi.1 - k_lo.1 + 1) as i64)
            * ((k_hi.2 - k_lo.2 + 1) as i64);
        if range_cells <= self.voxel_index.len() as i64 {
            for kx in k_lo.0..=k_hi.0 {
                for ky in k_lo.1..=k_hi.1 {
                    for kz in k_lo.2..=k_hi.2 {
                        if let Some(indices) = self.voxel_index.get(&(kx, ky, kz)) {
                            let (vlo, vhi) = voxel_bounds((kx, ky, kz), vs);
                            if frustum.overlaps_aabb(&vlo, &vhi) {
                                out.extend_from_slice(indices);
                            }
                        }
                    }
                }
            }
        } else {
            let mut keys: Vec<&VoxelKey> = self.voxel_index.keys().collect();
            keys.sort();
            for key in keys {
                let (vlo, vhi) = voxel_bounds(*key, vs);
                if frustum.overlaps_aabb(&vlo, &vhi) {
                    out.extend_from_slice(&self.voxel_index[key]);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Re-estimate all normals from the k nearest neighbors. Collinear
    /// neighborhoods get a zero normal and are excluded from association.
    pub fn estimate_normals(mut self, k: usize) -> Self {
        assert!(k >= 3);
        assert!(self.points.len() >= k);
        let centroid = self
            .points
            .iter()
            .fold(Vec3::zeros(), |acc, p| acc + p.position)
            / self.points.len() as f64;
        let normals: Vec<Vec3> = self
            .points
            .iter()
            .map(|p| {
                let nbrs = self.kd_index.k_nearest(&p.position, k);
                estimate_normal(&self.points, &nbrs, &p.position, &centroid)
            })
            .collect();
        for (p, n) in self.points.iter_mut().zip(normals) {
            p.normal = n;
        }
        self
    }

    pub fn has_normals(&self) -> bool {
        self.points.iter().any(|p| p.has_normal())
    }
}

fn voxel_key(p: &Vec3, voxel_size: f64) -> VoxelKey {
    (
        (p.x / voxel_size).floor() as i32,
        (p.y / voxel_size).floor() as i32,
        (p.z / voxel_size).floor() as i32,
    )
}

fn voxel_bounds(key: VoxelKey, voxel_size: f64) -> (Vec3, Vec3) {
    let lo = Vec3::new(
        key.0 as f64 * voxel_size,
        key.1 as f64 * voxel_size,
        key.2 as f64 * voxel_size,
    );
    (lo, lo + Vec3::repeat(voxel_size))
}

/// Least-eigenvalue eigenvector of the neighborhood covariance, oriented
/// toward free space (from the point toward the map centroid). Returns
/// zero when the neighborhood is collinear.
fn estimate_normal(
    points: &[LidarPoint],
    neighbors: &[usize],
    at: &Vec3,
    map_centroid: &Vec3,
) -> Vec3 {
    let n = neighbors.len() as f64;
    let mean = neighbors
        .iter()
        .fold(Vec3::zeros(), |acc, &i| acc + points[i].position)
        / n;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for &i in neighbors {
        let d = points[i].position - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    // Ascending order of eigenvalues.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let lam_min = eig.eigenvalues[order[0]].max(0.0);
    let lam_mid = eig.eigenvalues[order[1]].max(0.0);
    let lam_max = eig.eigenvalues[order[2]].max(0.0);
    // Collinear: the two smallest eigenvalues both vanish.
    if lam_max <= 0.0 || lam_mid <= 1e-12 * lam_max {
        return Vec3::zeros();
    }
    let _ = lam_min;
    let mut normal = eig.eigenvectors.column(order[0]).into_owned().normalize();
    if normal.dot(&(map_centroid - at)) < 0.0 {
        normal = -normal;
    }
    normal
}
