//! Back-project image colors onto the LiDAR cloud.

use super::image_io::read_ppm;
use super::synthetic::SENTINEL_GRAY;
use crate::geometry::{project_pinhole, transform_to_camera, CameraIntrinsics, CameraPose, DEPTH_EPSILON};
use crate::map::{render_depth, LidarMap, SplatParams};
use std::path::Path;

/// Color every LiDAR point from the nearest-depth registered image that
/// sees it (in frustum, in bounds, passing the z-buffer). Points no
/// image sees keep the sentinel gray. Missing image files are skipped
/// and reported as warnings.
pub fn colorize_map(
    map: &LidarMap,
    intr: &CameraIntrinsics,
    poses: &[(String, CameraPose)],
    images_dir: &Path,
    frustum_height: f64,
    splat: &SplatParams,
) -> (Vec<[u8; 3]>, Vec<String>) {
    let mut colors = vec![SENTINEL_GRAY; map.points.len()];
    let mut best_depth = vec![f64::INFINITY; map.points.len()];
    let mut warnings = Vec::new();
    for (name, pose) in poses {
        let image_path = images_dir.join(format!("{name}.ppm"));
        let image = match read_ppm(&image_path) {
            Ok(img) => img,
            Err(e) => {
                warnings.push(format!("skipping image '{name}': {e}"));
                continue;
            }
        };
        if image.width != intr.width as usize || image.height != intr.height as usize {
            warnings.push(format!("skipping image '{name}': size mismatch"));
            continue;
        }
        let depth = render_depth(map, pose, intr, frustum_height, splat);
        for (idx, point) in map.points.iter().enumerate() {
            let cam = transform_to_camera(pose, &point.position);
            if cam.z <= DEPTH_EPSILON || cam.z > frustum_height || cam.z >= best_depth[idx] {
                continue;
            }
            let Ok(px) = project_pinhole(intr, &cam) else {
                continue;
            };
            if !intr.contains(&px) {
                continue;
            }
            // Z-buffer test: the point must not lie behind the rendered
            // surface at its pixel.
            if depth.source_at_pixel(px.x, px.y).is_none() {
                continue;
            }
            let (rendered, _) = depth.at(px.x as u32, px.y as u32);
            if cam.z > rendered + (0.15 + 0.02 * cam.z) {
                continue;
            }
            best_depth[idx] = cam.z;
            colors[idx] = image.at(px.x as usize, px.y as usize);
        }
    }
    (colors, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthetic::{generate, render_plane_image, SyntheticSpec, PLANE_COLORS};
    use crate::pipeline::image_io::write_ppm;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            cameras: 6,
            landmarks: 100,
            lidar_step: 0.5,
            // Tall walls keep silhouette edges (ambiguous pixels) out of view.
            wall_height: 8.0,
            sigma_px: 0.0,
            map_sigma: 0.0,
            fx: 120.0,
            fy: 120.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn plane_colors_propagate() {
        let spec = small_spec();
        let scene = generate(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, pose) in &scene.poses {
            let img = render_plane_image(&scene, pose);
            write_ppm(dir.path().join(format!("{name}.ppm")), &img).unwrap();
        }
        let map = LidarMap::from_points(scene.lidar.clone(), 1.0);
        let (colors, warnings) = colorize_map(
            &map,
            &spec.intrinsics(),
            &scene.poses,
            dir.path(),
            30.0,
            &SplatParams::default(),
        );
        assert!(warnings.is_empty());
        let mut visible = 0;
        let mut correct = 0;
        for (idx, &c) in colors.iter().enumerate() {
            if c == SENTINEL_GRAY {
                continue;
            }
            visible += 1;
            if c == PLANE_COLORS[scene.lidar_label[idx] % PLANE_COLORS.len()] {
                correct += 1;
            }
        }
        assert!(visible > 100, "only {visible} points colored");
        assert!(
            correct as f64 >= 0.99 * visible as f64,
            "{correct}/{visible} correctly colored"
        );
    }

    #[test]
    fn no_images_all_sentinel_with_warnings() {
        let spec = small_spec();
        let scene = generate(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let map = LidarMap::from_points(scene.lidar.clone(), 1.0);
        let (colors, warnings) = colorize_map(
            &map,
            &spec.intrinsics(),
            &scene.poses,
            dir.path(),
            30.0,
            &SplatParams::default(),
        );
        assert_eq!(warnings.len(), scene.poses.len());
        assert!(colors.iter().all(|&c| c == SENTINEL_GRAY));
    }

    #[test]
    fn point_behind_all_cameras_stays_gray() {
        let spec = small_spec();
        let scene = generate(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, pose) in &scene.poses {
            let img = render_plane_image(&scene, pose);
            write_ppm(dir.path().join(format!("{name}.ppm")), &img).unwrap();
        }
        // One extra point far above the room: outside every frustum.
        let mut points = scene.lidar.clone();
        points.push(crate::map::LidarPoint {
            position: crate::geometry::Vec3::new(0.0, 0.0, 500.0),
            normal: crate::geometry::Vec3::new(0.0, 0.0, 1.0),
        });
        let map = LidarMap::from_points(points, 1.0);
        let (colors, _) = colorize_map(
            &map,
            &spec.intrinsics(),
            &scene.poses,
            dir.path(),
            30.0,
            &SplatParams::default(),
        );
        assert_eq!(*colors.last().unwrap(), SENTINEL_GRAY);
    }
}
