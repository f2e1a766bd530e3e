//! Synthetic room-scene generator: planes, LiDAR samples, landmarks,
//! a ring of cameras, and the on-disk dataset for end-to-end runs.

use super::config::read_kv_file;
use super::image_io::{write_ppm, RgbImage};
use crate::geometry::{project_pinhole, transform_to_camera, CameraIntrinsics, CameraPose, Pixel, Vec3};
use crate::map::{write_ply_binary, LidarPoint};
use crate::scene::write_pose_file;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("degenerate scene: {0}")]
    Degenerate(String),
    #[error("bad spec: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Room half-extent in x and y; walls sit at ±half_extent.
    pub half_extent: f64,
    pub wall_height: f64,
    /// Number of walls (0-4) in addition to the ground plane.
    pub walls: usize,
    pub cameras: usize,
    pub ring_radius: f64,
    pub camera_height: f64,
    /// Downward camera pitch in degrees.
    pub pitch_deg: f64,
    pub landmarks: usize,
    /// LiDAR grid spacing in meters.
    pub lidar_step: f64,
    pub sigma_px: f64,
    pub map_sigma: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub write_images: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            half_extent: 10.0,
            wall_height: 4.0,
            walls: 4,
            cameras: 40,
            ring_radius: 6.0,
            camera_height: 1.5,
            pitch_deg: 15.0,
            landmarks: 4000,
            lidar_step: 0.15,
            sigma_px: 0.5,
            map_sigma: 0.005,
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            write_images: false,
        }
    }
}

impl SyntheticSpec {
    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        let kv = read_kv_file(path).map_err(|e| SpecError::Invalid(e.to_string()))?;
        let mut spec = Self::default();
        let get_f64 = |key: &str, slot: &mut f64| -> Result<(), SpecError> {
            if let Some(v) = kv.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| SpecError::Invalid(format!("key '{key}': bad number '{v}'")))?;
            }
            Ok(())
        };
        get_f64("half_extent", &mut spec.half_extent)?;
        get_f64("wall_height", &mut spec.wall_height)?;
        get_f64("ring_radius", &mut spec.ring_radius)?;
        get_f64("camera_height", &mut spec.camera_height)?;
        get_f64("pitch_deg", &mut spec.pitch_deg)?;
        get_f64("lidar_step", &mut spec.lidar_step)?;
        get_f64("sigma_px", &mut spec.sigma_px)?;
        get_f64("map_sigma", &mut spec.map_sigma)?;
        get_f64("fx", &mut spec.fx)?;
        get_f64("fy", &mut spec.fy)?;
        get_f64("cx", &mut spec.cx)?;
        get_f64("cy", &mut spec.cy)?;
        let get_usize = |key: &str, slot: &mut usize| -> Result<(), SpecError> {
            if let Some(v) = kv.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| SpecError::Invalid(format!("key '{key}': bad integer '{v}'")))?;
            }
            Ok(())
        };
        get_usize("walls", &mut spec.walls)?;
        get_usize("cameras", &mut spec.cameras)?;
        get_usize("landmarks", &mut spec.landmarks)?;
        if let Some(v) = kv.get("width") {
            spec.width = v.parse().map_err(|_| SpecError::Invalid("bad width".into()))?;
        }
        if let Some(v) = kv.get("height") {
            spec.height = v.parse().map_err(|_| SpecError::Invalid("bad height".into()))?;
        }
        if let Some(v) = kv.get("write_images") {
            spec.write_images = v.parse().map_err(|_| SpecError::Invalid("bad write_images".into()))?;
        }
        Ok(spec)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

/// A finite rectangular plane patch.
#[derive(Debug, Clone, Copy)]
pub struct Plane {
    pub origin: Vec3,
    pub normal: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub u_half: f64,
    pub v_half: f64,
}

impl Plane {
    pub fn sample(&self, u: f64, v: f64) -> Vec3 {
        self.origin + self.u_axis * (u * self.u_half) + self.v_axis * (v * self.v_half)
    }

    /// Distance along `dir` from `origin` to the patch, if hit.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.origin - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit = origin + dir * t - self.origin;
        if hit.dot(&self.u_axis).abs() <= self.u_half && hit.dot(&self.v_axis).abs() <= self.v_half {
            Some(t)
        } else {
            None
        }
    }
}

pub const PLANE_COLORS: [[u8; 3]; 5] = [
    [60, 60, 200],
    [200, 60, 60],
    [60, 200, 60],
    [200, 200, 60],
    [60, 200, 200],
];

/// Sentinel color for points never observed by any image.
pub const SENTINEL_GRAY: [u8; 3] = [128, 128, 128];

pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub planes: Vec<Plane>,
    pub lidar: Vec<LidarPoint>,
    pub lidar_label: Vec<usize>,
    pub landmarks: Vec<Vec3>,
    pub landmark_plane: Vec<usize>,
    /// Ground-truth world-to-camera poses, one per image, in name order.
    pub poses: Vec<(String, CameraPose)>,
    /// Per image: (landmark index, noised pixel).
    pub features: Vec<Vec<(usize, Pixel)>>,
}

fn room_planes(spec: &SyntheticSpec) -> Vec<Plane> {
    let he = spec.half_extent;
    let wh = spec.wall_height;
    let mut planes = vec![Plane {
        origin: Vec3::zeros(),
        normal: Vec3::new(0.0, 0.0, 1.0),
        u_axis: Vec3::new(1.0, 0.0, 0.0),
        v_axis: Vec3::new(0.0, 1.0, 0.0),
        u_half: he,
        v_half: he,
    }];
    // Walls ordered +x, +y, -x, -y so two walls already span both
    // horizontal normals.
    let wall_defs = [
        (Vec3::new(he, 0.0, wh / 2.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)),
        (Vec3::new(0.0, he, wh / 2.0), Vec3::new(0.0, -1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)),
        (Vec3::new(-he, 0.0, wh / 2.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)),
        (Vec3::new(0.0, -he, wh / 2.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)),
    ];
    for &(origin, normal, u_axis) in wall_defs.iter().take(spec.walls.min(4)) {
        planes.push(Plane {
            origin,
            normal,
            u_axis,
            v_axis: Vec3::new(0.0, 0.0, 1.0),
            u_half: he,
            v_half: wh / 2.0,
        });
    }
    planes
}

/// World-to-camera pose at ring angle `theta`, looking outward with
/// downward pitch. Image x follows the ring tangent, image y points
/// toward the ground.
fn ring_pose(spec: &SyntheticSpec, theta: f64) -> CameraPose {
    let center = Vec3::new(
        spec.ring_radius * theta.cos(),
        spec.ring_radius * theta.sin(),
        spec.camera_height,
    );
    let pitch = spec.pitch_deg.to_radians();
    let forward = Vec3::new(
        pitch.cos() * theta.cos(),
        pitch.cos() * theta.sin(),
        -pitch.sin(),
    );
    let x_c = forward.cross(&Vec3::new(0.0, 0.0, 1.0)).normalize();
    let y_c = forward.cross(&x_c);
    let r = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), forward.transpose()]);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    CameraPose::new(rotation, -(rotation * center))
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene, SpecError> {
    if spec.walls < 2 {
        return Err(SpecError::Degenerate(format!(
            "{} planes cannot fix the gauge; at least 3 non-coplanar planes (2 walls) required",
            1 + spec.walls
        )));
    }
    if spec.cameras < 2 {
        return Err(SpecError::Degenerate("at least 2 cameras required".into()));
    }
    if spec.lidar_step <= 0.0 || spec.half_extent <= 0.0 || spec.wall_height <= 0.0 {
        return Err(SpecError::Invalid("extents and lidar_step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = room_planes(spec);
    let intr = spec.intrinsics();

    // LiDAR samples: per-plane grid, Gaussian noise along the normal.
    let normal_noise = Normal::new(0.0, spec.map_sigma.max(1e-12)).unwrap();
    let mut lidar = Vec::new();
    let mut lidar_label = Vec::new();
    for (label, plane) in planes.iter().enumerate() {
        // Inset the grid half a step from the patch border so no sample
        // sits exactly on a seam between two planes.
        let fu = 1.0 - 0.5 * spec.lidar_step / plane.u_half;
        let fv = 1.0 - 0.5 * spec.lidar_step / plane.v_half;
        let nu = ((2.0 * plane.u_half - spec.lidar_step) / spec.lidar_step).floor().max(1.0) as usize;
        let nv = ((2.0 * plane.v_half - spec.lidar_step) / spec.lidar_step).floor().max(1.0) as usize;
        for i in 0..=nu {
            for j in 0..=nv {
                let u = fu * (-1.0 + 2.0 * i as f64 / nu as f64);
                let v = fv * (-1.0 + 2.0 * j as f64 / nv as f64);
                let offset = if spec.map_sigma > 0.0 {
                    normal_noise.sample(&mut rng)
                } else {
                    0.0
                };
                lidar.push(LidarPoint {
                    position: plane.sample(u, v) + plane.normal * offset,
                    normal: plane.normal,
                });
                lidar_label.push(label);
            }
        }
    }

    // Landmarks lie exactly on their planes.
    let mut landmarks = Vec::with_capacity(spec.landmarks);
    let mut landmark_plane = Vec::with_capacity(spec.landmarks);
    for _ in 0..spec.landmarks {
        let p = rng.random_range(0..planes.len());
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        landmarks.push(planes[p].sample(u, v));
        landmark_plane.push(p);
    }

    let poses: Vec<(String, CameraPose)> = (0..spec.cameras)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.cameras as f64;
            (format!("cam{i:03}"), ring_pose(spec, theta))
        })
        .collect();

    // Exact projections plus pixel noise; out-of-bounds after noise is
    // dropped so every emitted feature is a valid pixel.
    let px_noise = Normal::new(0.0, spec.sigma_px.max(1e-12)).unwrap();
    let mut features = Vec::with_capacity(poses.len());
    for (_, pose) in &poses {
        let mut per_image = Vec::new();
        for (lm, world) in landmarks.iter().enumerate() {
            let cam = transform_to_camera(pose, world);
            let Ok(px) = project_pinhole(&intr, &cam) else {
                continue;
            };
            if !intr.contains(&px) {
                continue;
            }
            // Occlusion: the landmark must be the first surface hit.
            let center = pose.center();
            let dir = (world - center).normalize();
            let dist = (world - center).norm();
            let occluded = planes
                .iter()
                .enumerate()
                .any(|(pi, pl)| {
                    pi != landmark_plane[lm]
                        && pl.raycast(&center, &dir).is_some_and(|t| t < dist - 1e-6)
                });
            if occluded {
                continue;
            }
            let noised = if spec.sigma_px > 0.0 {
                Pixel::new(px.x + px_noise.sample(&mut rng), px.y + px_noise.sample(&mut rng))
            } else {
                px
            };
            if !intr.contains(&noised) {
                continue;
            }
            per_image.push((lm, noised));
        }
        features.push(per_image);
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        planes,
        lidar,
        lidar_label,
        landmarks,
        landmark_plane,
        poses,
        features,
    })
}

/// Render the per-plane flat-color view from one ground-truth camera.
pub fn render_plane_image(scene: &SyntheticScene, pose: &CameraPose) -> RgbImage {
    let intr = scene.spec.intrinsics();
    let mut img = RgbImage::new(intr.width as usize, intr.height as usize, [0, 0, 0]);
    let inv = pose.inverse();
    let center = pose.center();
    for y in 0..img.height {
        for x in 0..img.width {
            let px = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
            let dir = inv.rotation * crate::geometry::backproject_ray(&intr, &px);
            let mut best: Option<(f64, usize)> = None;
            for (pi, plane) in scene.planes.iter().enumerate() {
                if let Some(t) = plane.raycast(&center, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, pi));
                    }
                }
            }
            if let Some((_, pi)) = best {
                img.set(x, y, PLANE_COLORS[pi % PLANE_COLORS.len()]);
            }
        }
    }
    img
}

/// Write map, features, matches, ground-truth poses, plane labels and a
/// ready-to-run reconstruction config. Self-validates the generator
/// invariants before touching disk.
pub fn write_dataset(scene: &SyntheticScene, out: &Path) -> Result<(), SpecError> {
    // Landmarks must lie exactly on their declared planes.
    for (lm, world) in scene.landmarks.iter().enumerate() {
        let plane = &scene.planes[scene.landmark_plane[lm]];
        let d = plane.normal.dot(&(world - plane.origin)).abs();
        if d > 1e-9 {
            return Err(SpecError::Degenerate(format!(
                "landmark {lm} is {d} m off its plane"
            )));
        }
    }
    // At sigma_px = 0 every feature is the exact projection.
    if scene.spec.sigma_px == 0.0 {
        let intr = scene.spec.intrinsics();
        for (img, feats) in scene.features.iter().enumerate() {
            for &(lm, px) in feats {
                let cam = transform_to_camera(&scene.poses[img].1, &scene.landmarks[lm]);
                let exact = project_pinhole(&intr, &cam).expect("visible landmark");
                assert_eq!(px, exact, "noise-free feature must be the exact projection");
            }
        }
    }

    std::fs::create_dir_all(out)?;
    write_ply_binary(out.join("map.ply"), &scene.lidar, None)
        .map_err(|e| SpecError::Invalid(e.to_string()))?;
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("plane_labels.txt"))?);
        for label in &scene.lidar_label {
            writeln!(w, "{label}")?;
        }
    }

    let fdir = out.join("features");
    std::fs::create_dir_all(&fdir)?;
    for (img, feats) in scene.features.iter().enumerate() {
        let mut w = std::io::BufWriter::new(std::fs::File::create(
            fdir.join(format!("{}.txt", scene.poses[img].0)),
        )?);
        for &(_, px) in feats {
            writeln!(w, "{} {}", px.x, px.y)?;
        }
    }

    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("matches.txt"))?);
        for a in 0..scene.features.len() {
            for b in a + 1..scene.features.len() {
                let pairs: Vec<(usize, usize)> = {
                    let index_b: std::collections::HashMap<usize, usize> = scene.features[b]
                        .iter()
                        .enumerate()
                        .map(|(i, &(lm, _))| (lm, i))
                        .collect();
                    scene.features[a]
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &(lm, _))| index_b.get(&lm).map(|&j| (i, j)))
                        .collect()
                };
                if pairs.is_empty() {
                    continue;
                }
                writeln!(w, "{} {}", scene.poses[a].0, scene.poses[b].0)?;
                for (i, j) in pairs {
                    writeln!(w, "{i} {j}")?;
                }
            }
        }
    }

    write_pose_file(out.join("poses_gt.txt"), &scene.poses)
        .map_err(|e| SpecError::Invalid(e.to_string()))?;

    if scene.spec.write_images {
        let idir = out.join("images");
        std::fs::create_dir_all(&idir)?;
        for (name, pose) in &scene.poses {
            let img = render_plane_image(scene, pose);
            write_ppm(idir.join(format!("{name}.ppm")), &img)?;
        }
    }

    // A ready-to-run config pointing at the dataset.
    let s = &scene.spec;
    let q = scene.poses[0].1.rotation.as_ref();
    let t = scene.poses[0].1.translation;
    let mut config = format!(
        "map = map.ply\n\
         features_dir = features\n\
         matches = matches.txt\n\
         truth_poses = poses_gt.txt\n\
         out = recon\n\
         fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n\
         init_image = {}\n\
         init_pose = {} {} {} {} {} {} {}\n",
        s.fx, s.fy, s.cx, s.cy, s.width, s.height,
        scene.poses[0].0,
        q.w, q.i, q.j, q.k, t.x, t.y, t.z,
    );
    if s.write_images {
        config.push_str("images_dir = images\n");
    }
    std::fs::write(out.join("config.txt"), config)?;
    Ok(())
}
