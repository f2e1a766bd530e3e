//! DLT multi-view triangulation with RANSAC over measurement pairs.

use crate::geometry::{
    project_pinhole, transform_to_camera, CameraIntrinsics, CameraPose, Pixel, Vec3, DEPTH_EPSILON,
};
use nalgebra::DMatrix;

/// One triangulation measurement: a registered camera and the observed
/// pixel (with its normalized-plane coordinate).
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub pose: CameraPose,
    pub px: Pixel,
    pub norm: Pixel,
}

/// Homogeneous DLT over any number of measurements.
pub fn dlt_triangulate(measurements: &[Measurement]) -> Option<Vec3> {
    if measurements.len() < 2 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * measurements.len(), 4);
    for (i, m) in measurements.iter().enumerate() {
        let r = m.pose.rotation.to_rotation_matrix();
        let r = r.matrix();
        let t = m.pose.translation;
        // Projection rows of [R | t].
        let p0 = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x];
        let p1 = [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y];
        let p2 = [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
        for j in 0..4 {
            a[(2 * i, j)] = m.norm.x * p2[j] - p0[j];
            a[(2 * i + 1, j)] = m.norm.y * p2[j] - p1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let min_idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)?;
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-12 {
        return None;
    }
    Some(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Apex angle at the point between the two widest-baseline consensus rays.
pub fn max_triangulation_angle_deg(point: &Vec3, measurements: &[Measurement]) -> f64 {
    let rays: Vec<Vec3> = measurements
        .iter()
        .map(|m| (point - m.pose.center()).normalize())
        .collect();
    let mut max_angle = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let angle = rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos().to_degrees();
            max_angle = max_angle.max(angle);
        }
    }
    max_angle
}

fn reprojection_px(intr: &CameraIntrinsics, m: &Measurement, point: &Vec3) -> Option<f64> {
    let cam = transform_to_camera(&m.pose, point);
    if cam.z <= DEPTH_EPSILON {
        return None;
    }
    let px = project_pinhole(intr, &cam).ok()?;
    Some((px - m.px).norm())
}

/// RANSAC triangulation over measurement pairs. Returns the refit point
/// and the consensus measurement indices, or None if no hypothesis
/// reaches a 2-measurement consensus with sufficient parallax.
pub fn ransac_triangulate(
    measurements: &[Measurement],
    intr: &CameraIntrinsics,
    threshold_px: f64,
    min_angle_deg: f64,
) -> Option<(Vec3, Vec<usize>)> {
    let n = measurements.len();
    if n < 2 {
        return None;
    }
    let mut best: Option<(Vec3, Vec<usize>)> = None;
    for i in 0..n {
        for j in i + 1..n {
            let pair = [measurements[i], measurements[j]];
            let Some(point) = dlt_triangulate(&pair) else {
                continue;
            };
            let consensus: Vec<usize> = (0..n)
                .filter(|&k| {
                    reprojection_px(intr, &measurements[k], &point)
                        .is_some_and(|e| e < threshold_px)
                })
                .collect();
            if consensus.len() < 2 {
                continue;
            }
            if best.as_ref().is_none_or(|(_, bc)| consensus.len() > bc.len()) {
                best = Some((point, consensus));
            }
        }
    }
    let (_, consensus) = best?;
    let subset: Vec<Measurement> = consensus.iter().map(|&k| measurements[k]).collect();
    let point = dlt_triangulate(&subset)?;
    // The refit must still satisfy every consensus measurement.
    for m in &subset {
        if !reprojection_px(intr, m, &point).is_some_and(|e| e < threshold_px) {
            return None;
        }
    }
    if max_triangulation_angle_deg(&point, &subset) < min_angle_deg {
        return None;
    }
    Some((point, consensus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalized_plane_coords;
    use nalgebra::UnitQuaternion;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    fn look_from(center: Vec3, yaw: f64) -> CameraPose {
        let rot = UnitQuaternion::from_scaled_axis(Vec3::new(0.0, yaw, 0.0));
        let t = -(rot * center);
        CameraPose::new(rot, t)
    }

    fn measure(pose: &CameraPose, ic: &CameraIntrinsics, w: &Vec3) -> Measurement {
        let cam = transform_to_camera(pose, w);
        let px = project_pinhole(ic, &cam).unwrap();
        Measurement {
            pose: *pose,
            px,
            norm: normalized_plane_coords(ic, &px),
        }
    }

    #[test]
    fn two_view_exact() {
        let ic = intr();
        let truth = Vec3::new(0.3, -0.2, 6.0);
        // ~10 degree baseline.
        let p0 = look_from(Vec3::new(-0.5, 0.0, 0.0), 0.0);
        let p1 = look_from(Vec3::new(0.55, 0.0, 0.0), 0.0);
        let ms = [measure(&p0, &ic, &truth), measure(&p1, &ic, &truth)];
        let got = dlt_triangulate(&ms).unwrap();
        assert!((got - truth).norm() < 1e-8, "err {}", (got - truth).norm());
    }

    #[test]
    fn parallel_rays_rejected() {
        let ic = intr();
        let truth = Vec3::new(0.0, 0.0, 5.0);
        // Same camera center twice: zero triangulation angle.
        let p0 = look_from(Vec3::zeros(), 0.0);
        let ms = [measure(&p0, &ic, &truth), measure(&p0, &ic, &truth)];
        assert!(ransac_triangulate(&ms, &ic, 4.0, 1.5).is_none());
    }

    #[test]
    fn planted_outlier_excluded() {
        let ic = intr();
        let truth = Vec3::new(0.2, 0.1, 5.0);
        let mut ms: Vec<Measurement> = (0..5)
            .map(|i| {
                let pose = look_from(Vec3::new(-1.0 + 0.5 * i as f64, 0.0, 0.0), 0.0);
                measure(&pose, &ic, &truth)
            })
            .collect();
        ms[2].px += Pixel::new(80.0, -60.0);
        ms[2].norm = normalized_plane_coords(&ic, &ms[2].px);
        let (point, consensus) = ransac_triangulate(&ms, &ic, 4.0, 1.5).unwrap();
        assert_eq!(consensus, vec![0, 1, 3, 4]);
        assert!((point - truth).norm() < 1e-6);
    }
}
