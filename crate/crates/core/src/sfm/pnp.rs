//! P3P minimal solver (Grunert's distance formulation) with RANSAC and
//! Levenberg-Marquardt pose refinement.

use crate::geometry::{
    backproject_ray, project_pinhole, transform_to_camera, CameraIntrinsics, CameraPose, Pixel,
    Vec3, DEPTH_EPSILON,
};
use nalgebra::{DMatrix, Matrix3, Matrix6, UnitQuaternion, Vector2, Vector6};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

/// Real roots of a polynomial given coefficients from highest to lowest
/// degree, via the companion-matrix eigenvalues.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let max = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max == 0.0 {
        return Vec::new();
    }
    // Trim negligible leading coefficients.
    let mut start = 0;
    while start < coeffs.len() && coeffs[start].abs() < 1e-12 * max {
        start += 1;
    }
    let coeffs = &coeffs[start..];
    let n = coeffs.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![-coeffs[1] / coeffs[0]];
    }
    let lead = coeffs[0];
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for j in 0..n {
        companion[(0, j)] = -coeffs[j + 1] / lead;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|e| e.im.abs() < 1e-8 * (1.0 + e.re.abs()))
        .map(|e| e.re)
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = vec![0.0; n];
    for (i, &x) in a.iter().rev().enumerate() {
        out[n - 1 - i] += x;
    }
    for (i, &y) in b.iter().rev().enumerate() {
        out[n - 1 - i] += y;
    }
    out
}

/// Rigid transform mapping world points onto camera points (Kabsch).
fn absolute_orientation(world: &[Vec3], camera: &[Vec3]) -> CameraPose {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Vec3>() / n;
    let cc = camera.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (w, c) in world.iter().zip(camera) {
        h += (w - cw) * (c - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = vt.transpose() * fix * u.transpose();
    }
    let rot = UnitQuaternion::from_matrix(&r);
    let t = cc - rot * cw;
    CameraPose::new(rot, t)
}

/// Candidate camera poses from three 2D-3D correspondences. `bearings`
/// are unit rays in the camera frame.
pub fn p3p_solutions(world: &[Vec3; 3], bearings: &[Vec3; 3]) -> Vec<CameraPose> {
    let a = (world[1] - world[2]).norm();
    let b = (world[0] - world[2]).norm();
    let c = (world[0] - world[1]).norm();
    if a < 1e-12 || b < 1e-12 || c < 1e-12 {
        return Vec::new();
    }
    let cos_alpha = bearings[1].dot(&bearings[2]);
    let cos_beta = bearings[0].dot(&bearings[2]);
    let cos_gamma = bearings[0].dot(&bearings[1]);
    let k1 = (c * c) / (b * b);
    let k2 = (a * a) / (b * b);

    // With u = s2/s1, v = s3/s1 the law-of-cosines system reduces to
    //   u^2 - 2 u cos_gamma + Q(v) = 0,  u L(v) = D(v)
    // and eliminating u yields a quartic in v.
    let q = [-k1, 2.0 * k1 * cos_beta, 1.0 - k1];
    let d = [
        1.0 - k2 + k1,
        2.0 * cos_beta * (k2 - k1),
        -k2 - 1.0 + k1,
    ];
    let l = [2.0 * cos_alpha, -2.0 * cos_gamma];
    let quartic = poly_add(
        &poly_add(
            &poly_mul(&d, &d),
            &poly_mul(&poly_mul(&d, &l), &[-2.0 * cos_gamma]),
        ),
        &poly_mul(&poly_mul(&l, &l), &q),
    );

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let lv = l[0] * v + l[1];
        if lv.abs() < 1e-12 {
            continue;
        }
        let dv = d[0] * v * v + d[1] * v + d[2];
        let u = dv / lv;
        if u <= 0.0 {
            continue;
        }
        let denom = 1.0 + u * u - 2.0 * u * cos_gamma;
        if denom <= 0.0 {
            continue;
        }
        let s1 = c / denom.sqrt();
        let s2 = u * s1;
        let s3 = v * s1;
        if !(s1 > 0.0 && s2 > 0.0 && s3 > 0.0) {
            continue;
        }
        let camera = [bearings[0] * s1, bearings[1] * s2, bearings[2] * s3];
        poses.push(absolute_orientation(world, &camera));
    }
    poses
}

#[derive(Debug, thiserror::Error)]
pub enum PnpError {
    #[error("registration failed: {inliers} inliers, {required} required")]
    RegistrationFailed { inliers: usize, required: usize },
}

fn reprojection_error_px(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    world: &Vec3,
    observed: &Pixel,
) -> Option<f64> {
    let cam = transform_to_camera(pose, world);
    let px = project_pinhole(intr, &cam).ok()?;
    Some((px - observed).norm())
}

fn count_inliers(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    corrs: &[(Vec3, Pixel)],
    threshold_px: f64,
) -> Vec<usize> {
    corrs
        .iter()
        .enumerate()
        .filter(|(_, (w, px))| {
            reprojection_error_px(pose, intr, w, px).is_some_and(|e| e < threshold_px)
        })
        .map(|(i, _)| i)
        .collect()
}

/// P3P inside RANSAC, then LM refinement on the inlier set. Returns the
/// pose, the final inlier indices and the LM iteration count.
pub fn ransac_pnp(
    corrs: &[(Vec3, Pixel)],
    intr: &CameraIntrinsics,
    threshold_px: f64,
    min_inliers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(CameraPose, Vec<usize>, usize), PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::RegistrationFailed {
            inliers: 0,
            required: min_inliers.max(4),
        });
    }
    let bearings: Vec<Vec3> = corrs
        .iter()
        .map(|(_, px)| backproject_ray(intr, px))
        .collect();
    let mut best: Option<(CameraPose, Vec<usize>)> = None;
    let max_iterations = 500usize;
    let mut needed = max_iterations;
    let mut iteration = 0;
    while iteration < needed.min(max_iterations) {
        iteration += 1;
        let pick = sample(rng, corrs.len(), 3).into_vec();
        let world = [corrs[pick[0]].0, corrs[pick[1]].0, corrs[pick[2]].0];
        let rays = [bearings[pick[0]], bearings[pick[1]], bearings[pick[2]]];
        for pose in p3p_solutions(&world, &rays) {
            let inliers = count_inliers(&pose, intr, corrs, threshold_px);
            if best.as_ref().is_none_or(|(_, bi)| inliers.len() > bi.len()) {
                let ratio = inliers.len() as f64 / corrs.len() as f64;
                best = Some((pose, inliers));
                if ratio > 0.0 {
                    // 99% confidence adaptive bound.
                    let denom = (1.0 - ratio.powi(3)).max(1e-12).ln();
                    needed = ((0.01f64).ln() / denom).ceil().max(1.0) as usize;
                }
            }
        }
    }
    let Some((pose, inliers)) = best else {
        return Err(PnpError::RegistrationFailed {
            inliers: 0,
            required: min_inliers,
        });
    };
    if inliers.len() < min_inliers.max(4) {
        return Err(PnpError::RegistrationFailed {
            inliers: inliers.len(),
            required: min_inliers.max(4),
        });
    }
    let inlier_corrs: Vec<(Vec3, Pixel)> = inliers.iter().map(|&i| corrs[i]).collect();
    let (refined, iterations) = refine_pose(&pose, &inlier_corrs, intr, 50);
    let inliers = count_inliers(&refined, intr, corrs, threshold_px);
    if inliers.len() < min_inliers.max(4) {
        return Err(PnpError::RegistrationFailed {
            inliers: inliers.len(),
            required: min_inliers.max(4),
        });
    }
    Ok((refined, inliers, iterations))
}

/// Pose-only LM on pixel reprojection residuals. Returns the refined
/// pose and the number of iterations spent.
pub fn refine_pose(
    initial: &CameraPose,
    corrs: &[(Vec3, Pixel)],
    intr: &CameraIntrinsics,
    max_iters: usize,
) -> (CameraPose, usize) {
    let cost_of = |pose: &CameraPose| -> f64 {
        corrs
            .iter()
            .map(|(w, px)| {
                let cam = transform_to_camera(pose, w);
                match project_pinhole(intr, &cam) {
                    Ok(p) => (p - px).norm_squared(),
                    Err(_) => 0.0,
                }
            })
            .sum()
    };
    let mut pose = *initial;
    let mut cost = cost_of(&pose);
    let mut lambda = 1e-4;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (w, px) in corrs {
            let cam = transform_to_camera(&pose, w);
            if cam.z <= DEPTH_EPSILON {
                continue;
            }
            let proj = project_pinhole(intr, &cam).unwrap();
            let r = Vector2::new(proj.x - px.x, proj.y - px.y);
            let iz = 1.0 / cam.z;
            let d_proj = nalgebra::Matrix2x3::new(
                intr.fx * iz,
                0.0,
                -intr.fx * cam.x * iz * iz,
                0.0,
                intr.fy * iz,
                -intr.fy * cam.y * iz * iz,
            );
            // d cam / d theta = -[cam - t]x ; d cam / d t = I
            let rel = cam - pose.translation;
            let skew = Matrix3::new(
                0.0, -rel.z, rel.y, rel.z, 0.0, -rel.x, -rel.y, rel.x, 0.0,
            );
            let j_theta = d_proj * (-skew);
            let j_t = d_proj;
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_theta);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_t);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-g));
            let candidate = pose.retract(
                &Vec3::new(step[0], step[1], step[2]),
                &Vec3::new(step[3], step[4], step[5]),
            );
            let new_cost = cost_of(&candidate);
            if new_cost < cost {
                let rel_decrease = (cost - new_cost) / cost.max(1e-300);
                pose = candidate;
                cost = new_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                iterations += 1;
                if rel_decrease < 1e-12 || step.norm() < 1e-14 {
                    return (pose, iterations);
                }
                break;
            } else {
                lambda *= 10.0;
            }
        }
        if !improved {
            break;
        }
    }
    (pose, iterations)
}
