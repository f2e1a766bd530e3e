//! Levenberg-Marquardt with Schur complement point elimination.

use super::{BaProblem, PlaneFactor, ReprojectionFactor};
use crate::association::AssociationKind;
use crate::geometry::{CameraPose, Vec3};
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6x3, Vector2, Vector3};

#[derive(Debug, thiserror::Error)]
pub enum BaError {
    #[error("normal equations remained indefinite after maximum damping")]
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, in order.
    pub accepted_costs: Vec<f64>,
    /// Mean / variance of reprojection error in original-image pixels
    /// at the final state.
    pub reproj_mean_px: f64,
    pub reproj_var_px: f64,
    /// Mean absolute point-to-plane distance over plane factors, before
    /// and after the solve (unweighted).
    pub p2p_before: f64,
    pub p2p_after: f64,
    pub planes_projected: usize,
    pub planes_nn: usize,
    pub planes_ground: usize,
    pub planes_total: usize,
}

struct State {
    poses: Vec<CameraPose>,
    points: Vec<Vec3>,
}

fn cauchy(s: f64, c2: f64) -> f64 {
    c2 * (1.0 + s / c2).ln()
}

/// Depth floor during optimization. Observations must never vanish from
/// the cost when a point crosses behind a camera — otherwise the solver
/// can "improve" the cost by pushing geometry out of view — so the depth
/// is clamped and the residual explodes instead.
const Z_CLAMP: f64 = 1e-3;

fn clamped_residual(pose: &CameraPose, x: &Vec3, obs: &crate::geometry::Pixel) -> Vector2<f64> {
    let cam = crate::geometry::transform_to_camera(pose, x);
    let z = cam.z.max(Z_CLAMP);
    Vector2::new(cam.x / z - obs.x, cam.y / z - obs.y)
}

/// Residual and analytic Jacobian blocks of one reprojection factor,
/// depth clamped as during optimization. The pose tangent is ordered
/// [rotation, translation].
pub fn reprojection_blocks(
    pose: &CameraPose,
    x: &Vec3,
    obs: &crate::geometry::Pixel,
) -> (Vector2<f64>, nalgebra::Matrix2x6<f64>, Matrix2x3<f64>) {
    let cam = crate::geometry::transform_to_camera(pose, x);
    let z = cam.z.max(Z_CLAMP);
    let r = Vector2::new(cam.x / z - obs.x, cam.y / z - obs.y);
    let iz = 1.0 / z;
    let d_cam = Matrix2x3::new(iz, 0.0, -cam.x * iz * iz, 0.0, iz, -cam.y * iz * iz);
    let rel = cam - pose.translation;
    let mut jp = nalgebra::Matrix2x6::<f64>::zeros();
    jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_cam * (-skew(&rel))));
    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_cam);
    let jx = d_cam * pose.rotation.to_rotation_matrix().matrix();
    (r, jp, jx)
}

fn cost_of(problem: &BaProblem, state: &State) -> f64 {
    let c2 = problem.loss_scale * problem.loss_scale;
    let mut total = 0.0;
    for f in &problem.reprojection_factors {
        let r = clamped_residual(&state.poses[f.pose_idx], &state.points[f.point_idx], &f.obs);
        total += cauchy(r.norm_squared(), c2);
    }
    for f in &problem.plane_factors {
        let r = super::plane_residual(&state.points[f.point_idx], &f.normal, f.offset, f.weight);
        total += r * r;
    }
    total
}

fn p2p_mean(problem: &BaProblem, state: &State) -> f64 {
    if problem.plane_factors.is_empty() {
        return 0.0;
    }
    let sum: f64 = problem
        .plane_factors
        .iter()
        .map(|f| (f.normal.dot(&state.points[f.point_idx]) - f.offset).abs())
        .sum();
    sum / problem.plane_factors.len() as f64
}

fn reproj_stats_px(problem: &BaProblem, state: &State) -> (f64, f64) {
    let mut errors = Vec::with_capacity(problem.reprojection_factors.len());
    for f in &problem.reprojection_factors {
        if let Some(r) = super::reprojection_residual(
            &state.poses[f.pose_idx],
            &state.points[f.point_idx],
            &f.obs,
        ) {
            let ex = problem.fx * r.x;
            let ey = problem.fy * r.y;
            errors.push((ex * ex + ey * ey).sqrt());
        }
    }
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
    (mean, var)
}

/// Accumulated normal equations with points eliminated lazily.
struct NormalEquations {
    /// Dense pose-pose block matrix (6V x 6V).
    a: DMatrix<f64>,
    g_pose: DVector<f64>,
    /// Per variable point: Hessian, gradient, and the pose-point
    /// coupling blocks (variable pose index, 6x3 block).
    c: Vec<Matrix3<f64>>,
    g_point: Vec<Vector3<f64>>,
    w: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn accumulate(
    problem: &BaProblem,
    state: &State,
    pose_var: &[i32],
    point_var: &[i32],
    n_var_poses: usize,
    n_var_points: usize,
) -> NormalEquations {
    let c2 = problem.loss_scale * problem.loss_scale;
    let mut eq = NormalEquations {
        a: DMatrix::zeros(6 * n_var_poses, 6 * n_var_poses),
        g_pose: DVector::zeros(6 * n_var_poses),
        c: vec![Matrix3::zeros(); n_var_points],
        g_point: vec![Vector3::zeros(); n_var_points],
        w: vec![Vec::new(); n_var_points],
    };

    for f in &problem.reprojection_factors {
        let pose = &state.poses[f.pose_idx];
        let x = &state.points[f.point_idx];
        let (r0, jp, jx) = reprojection_blocks(pose, x, &f.obs);
        let w_irls = (1.0 / (1.0 + r0.norm_squared() / c2)).sqrt();
        let r = r0 * w_irls;

        let pv = pose_var[f.pose_idx];
        let xv = point_var[f.point_idx];
        let j_pose = if pv >= 0 { Some(jp * w_irls) } else { None };
        let j_point = if xv >= 0 { Some(jx * w_irls) } else { None };

        if let Some(jp) = &j_pose {
            let base = 6 * pv as usize;
            let hpp = jp.transpose() * jp;
            let gp = jp.transpose() * r;
            for i in 0..6 {
                for j in 0..6 {
                    eq.a[(base + i, base + j)] += hpp[(i, j)];
                }
                eq.g_pose[base + i] += gp[i];
            }
        }
        if let Some(jx) = &j_point {
            let xv = xv as usize;
            eq.c[xv] += jx.transpose() * jx;
            eq.g_point[xv] += jx.transpose() * r;
        }
        if let (Some(jp), Some(jx)) = (&j_pose, &j_point) {
            let block: Matrix6x3<f64> = jp.transpose() * jx;
            let xv = xv as usize;
            let pv = pv as usize;
            match eq.w[xv].iter_mut().find(|(idx, _)| *idx == pv) {
                Some((_, b)) => *b += block,
                None => eq.w[xv].push((pv, block)),
            }
        }
    }

    for f in &problem.plane_factors {
        let xv = point_var[f.point_idx];
        if xv < 0 {
            continue;
        }
        let xv = xv as usize;
        let r = super::plane_residual(&state.points[f.point_idx], &f.normal, f.offset, f.weight);
        let j = f.weight * f.normal; // residual gradient w.r.t. X
        eq.c[xv] += j * j.transpose();
        eq.g_point[xv] += j * r;
    }

    eq
}

/// Minimize the robust reprojection cost plus quadratic point-to-plane
/// cost over the variable blocks. On success the optimized blocks are
/// written into the problem; on failure the problem is untouched.
pub fn solve(problem: &mut BaProblem, max_iters: usize, tol_rel: f64, tol_step: f64) -> Result<SolveReport, BaError> {
    let pose_var: Vec<i32> = {
        let mut next = 0;
        problem
            .pose_blocks
            .iter()
            .map(|b| {
                if b.constant {
                    -1
                } else {
                    let i = next;
                    next += 1;
                    i
                }
            })
            .collect()
    };
    let point_var: Vec<i32> = {
        let mut next = 0;
        problem
            .point_blocks
            .iter()
            .map(|b| {
                if b.constant {
                    -1
                } else {
                    let i = next;
                    next += 1;
                    i
                }
            })
            .collect()
    };
    let n_var_poses = pose_var.iter().filter(|&&v| v >= 0).count();
    let n_var_points = point_var.iter().filter(|&&v| v >= 0).count();

    let mut state = State {
        poses: problem.pose_blocks.iter().map(|b| b.pose).collect(),
        points: problem.point_blocks.iter().map(|b| b.position).collect(),
    };

    let initial_cost = cost_of(problem, &state);
    let p2p_before = p2p_mean(problem, &state);
    let mut cost = initial_cost;
    let mut accepted_costs = Vec::new();
    let mut lambda = 1e-6;
    let mut iterations = 0;

    'outer: while iterations < max_iters && cost > 1e-30 {
        let eq = accumulate(problem, &state, &pose_var, &point_var, n_var_poses, n_var_points);
        // Absolute damping floor. Gauge-null directions have zero
        // curvature *and* (up to roundoff) zero gradient; with purely
        // multiplicative damping the solve amplifies that roundoff into
        // huge cost-neutral steps, so the floor must not scale with
        // lambda.
        let mut max_diag: f64 = 0.0;
        for i in 0..6 * n_var_poses {
            max_diag = max_diag.max(eq.a[(i, i)]);
        }
        for c in &eq.c {
            for i in 0..3 {
                max_diag = max_diag.max(c[(i, i)]);
            }
        }
        let tau = 1e-10 * (1.0 + max_diag);
        let mut accepted = false;
        for _ in 0..25 {
            // Damped point Hessians and their inverses.
            let mut c_inv = Vec::with_capacity(n_var_points);
            let mut ok = true;
            for c in &eq.c {
                let mut damped = *c;
                for i in 0..3 {
                    damped[(i, i)] += lambda * (c[(i, i)] + 1e-9) + tau;
                }
                match damped.try_inverse() {
                    Some(inv) => c_inv.push(inv),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                lambda *= 10.0;
                continue;
            }
            // Reduced camera system.
            let mut s = eq.a.clone();
            for i in 0..6 * n_var_poses {
                s[(i, i)] += lambda * (eq.a[(i, i)] + 1e-9) + tau;
            }
            let mut rhs = -&eq.g_pose;
            for (xv, blocks) in eq.w.iter().enumerate() {
                let ci = &c_inv[xv];
                for (pi, wi) in blocks {
                    let y = wi * ci;
                    let contrib = y * eq.g_point[xv];
                    for r in 0..6 {
                        rhs[6 * pi + r] += contrib[r];
                    }
                    for (pj, wj) in blocks {
                        let block = y * wj.transpose();
                        for r in 0..6 {
                            for c in 0..6 {
                                s[(6 * pi + r, 6 * pj + c)] -= block[(r, c)];
                            }
                        }
                    }
                }
            }
            let Some(chol) = s.clone().cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let dp = chol.solve(&rhs);
            // Predicted reduction under the damped quadratic model:
            // 0.5 * (lambda * d^T D d  -  d^T g). Accumulated alongside
            // the back-substitution below.
            let mut predicted = 0.0;
            for i in 0..6 * n_var_poses {
                predicted += 0.5
                    * ((lambda * (eq.a[(i, i)] + 1e-9) + tau) * dp[i] * dp[i] - dp[i] * eq.g_pose[i]);
            }
            // Back-substitute point updates.
            let mut dx = vec![Vector3::zeros(); n_var_points];
            for xv in 0..n_var_points {
                let mut rhs_x = -eq.g_point[xv];
                for (pi, wi) in &eq.w[xv] {
                    let dpi = Vector3::new(dp[6 * pi], dp[6 * pi + 1], dp[6 * pi + 2]);
                    let dti = Vector3::new(dp[6 * pi + 3], dp[6 * pi + 4], dp[6 * pi + 5]);
                    let mut dp6 = nalgebra::Vector6::zeros();
                    dp6.fixed_rows_mut::<3>(0).copy_from(&dpi);
                    dp6.fixed_rows_mut::<3>(3).copy_from(&dti);
                    rhs_x -= wi.transpose() * dp6;
                }
                dx[xv] = c_inv[xv] * rhs_x;
                for k in 0..3 {
                    predicted += 0.5
                        * ((lambda * (eq.c[xv][(k, k)] + 1e-9) + tau) * dx[xv][k] * dx[xv][k]
                            - dx[xv][k] * eq.g_point[xv][k]);
                }
            }

            // Candidate state.
            let mut candidate = State {
                poses: state.poses.clone(),
                points: state.points.clone(),
            };
            let mut step_norm2 = 0.0;
            for (idx, &pv) in pose_var.iter().enumerate() {
                if pv < 0 {
                    continue;
                }
                let base = 6 * pv as usize;
                let dtheta = Vec3::new(dp[base], dp[base + 1], dp[base + 2]);
                let dt = Vec3::new(dp[base + 3], dp[base + 4], dp[base + 5]);
                candidate.poses[idx] = candidate.poses[idx].retract(&dtheta, &dt);
                step_norm2 += dtheta.norm_squared() + dt.norm_squared();
            }
            for (idx, &xv) in point_var.iter().enumerate() {
                if xv < 0 {
                    continue;
                }
                candidate.points[idx] += dx[xv as usize];
                step_norm2 += dx[xv as usize].norm_squared();
            }

            let new_cost = cost_of(problem, &candidate);
            // Accept only when the actual reduction is a meaningful
            // fraction of the model-predicted one; cost-neutral wander
            // is rejected so lambda grows instead.
            if new_cost < cost && predicted > 0.0 && cost - new_cost >= 1e-4 * predicted {
                let rel_decrease = (cost - new_cost) / cost.max(1e-300);
                state = candidate;
                cost = new_cost;
                accepted_costs.push(cost);
                iterations += 1;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel_decrease < tol_rel || step_norm2.sqrt() < tol_step {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break 'outer;
            }
        }
        if !accepted {
            break;
        }
    }

    // Detect a genuinely indefinite system: no step was ever solvable.
    if iterations == 0 && initial_cost > 1e-12 {
        // One diagnostic attempt at heavy damping; if even that fails the
        // system is indefinite.
        let eq = accumulate(problem, &state, &pose_var, &point_var, n_var_poses, n_var_points);
        let mut s = eq.a.clone();
        for i in 0..6 * n_var_poses {
            s[(i, i)] += 1e8 * (eq.a[(i, i)].abs() + 1.0);
        }
        if n_var_poses > 0 && s.cholesky().is_none() {
            return Err(BaError::NumericalFailure);
        }
    }

    let (reproj_mean_px, reproj_var_px) = reproj_stats_px(problem, &state);
    let report = SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        accepted_costs,
        reproj_mean_px,
        reproj_var_px,
        p2p_before,
        p2p_after: p2p_mean(problem, &state),
        planes_projected: problem
            .plane_factors
            .iter()
            .filter(|f| f.kind == AssociationKind::Projected)
            .count(),
        planes_nn: problem
            .plane_factors
            .iter()
            .filter(|f| f.kind == AssociationKind::NearestNeighbor)
            .count(),
        planes_ground: problem.plane_factors.iter().filter(|f| f.is_ground).count(),
        planes_total: problem.plane_factors.len(),
    };

    for (idx, block) in problem.pose_blocks.iter_mut().enumerate() {
        if !block.constant {
            block.pose = state.poses[idx];
        }
    }
    for (idx, block) in problem.point_blocks.iter_mut().enumerate() {
        if !block.constant {
            block.position = state.points[idx];
        }
    }
    let _ = (&problem.reprojection_factors as &Vec<ReprojectionFactor>,
             &problem.plane_factors as &Vec<PlaneFactor>);
    Ok(report)
}
