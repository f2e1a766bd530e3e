//! End-to-end acceptance checks on a synthetic LiDAR-mapped survey.

use lidar_sfm::ba::reprojection_blocks;
use lidar_sfm::geometry::{
    normalized_plane_coords, project_pinhole, transform_to_camera, CameraPose, Vec3,
};
use lidar_sfm::map::{load_ply, write_ply_ascii, write_ply_binary, KdTree, LidarPoint, PlyOptions};
use lidar_sfm::pipeline::config::{Overrides, PipelineConfig};
use lidar_sfm::pipeline::evaluate::{evaluate_against_truth, format_evaluation};
use lidar_sfm::pipeline::synthetic::{generate, write_dataset, SyntheticScene, SyntheticSpec};
use lidar_sfm::pipeline::{run_pipeline, RunSummary};
use lidar_sfm::scene::{read_pose_file, write_pose_file};
use lidar_sfm::sfm::pnp::ransac_pnp;
use lidar_sfm::sfm::triangulate::{dlt_triangulate, Measurement};
use nalgebra::UnitQuaternion;
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

struct Fixture {
    _dir: tempfile::TempDir,
    scene: SyntheticScene,
    out: PathBuf,
    out_repeat: PathBuf,
    summary: RunSummary,
    elapsed: Duration,
    ablation: RunSummary,
    perturbed: RunSummary,
    perturbation_m: f64,
    perturbation_deg: f64,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SyntheticSpec::default();
    let scene = generate(&spec, 7).expect("scene generation");
    write_dataset(&scene, dir.path()).expect("dataset");
    let config = dir.path().join("config.txt");

    let run = |over: Overrides| -> RunSummary {
        let cfg = PipelineConfig::load(&config, &over).expect("config");
        run_pipeline(&cfg).expect("pipeline")
    };

    let out = dir.path().join("recon");
    let started = std::time::Instant::now();
    let summary = run(Overrides {
        out: Some(out.clone()),
        ..Overrides::default()
    });
    let elapsed = started.elapsed();

    let out_repeat = dir.path().join("recon_repeat");
    run(Overrides {
        out: Some(out_repeat.clone()),
        ..Overrides::default()
    });

    // Ablation: no point-to-plane constraints, initial depths inflated
    // 20%. Nothing should recover the metric scale.
    let ablate_config = dir.path().join("config_ablate.txt");
    let mut text = fs::read_to_string(&config).expect("config text");
    text.push_str("plane_constraints = false\ninit_depth_scale = 1.2\n");
    fs::write(&ablate_config, text).expect("ablation config");
    let ablation = {
        let cfg = PipelineConfig::load(
            &ablate_config,
            &Overrides {
                out: Some(dir.path().join("recon_ablate")),
                ..Overrides::default()
            },
        )
        .expect("ablation config");
        run_pipeline(&cfg).expect("ablation pipeline")
    };

    // Perturbed initial pose: rotate 8 degrees, move the center 0.37 m.
    let gt = scene.poses[0].1;
    let axis = Vec3::new(1.0, 2.0, 0.5).normalize();
    let perturbation_deg: f64 = 8.0;
    let dq = UnitQuaternion::from_scaled_axis(axis * perturbation_deg.to_radians());
    let shift = Vec3::new(0.25, -0.2, 0.2);
    let rot = dq * gt.rotation;
    let center = gt.center() + shift;
    let pert = CameraPose::new(rot, -(rot * center));
    let q = pert.rotation.as_ref();
    let pose_string = format!(
        "{} {} {} {} {} {} {}",
        q.w, q.i, q.j, q.k, pert.translation.x, pert.translation.y, pert.translation.z
    );
    let perturbed = run(Overrides {
        init_pose: Some(pose_string),
        out: Some(dir.path().join("recon_perturbed")),
        ..Overrides::default()
    });

    Fixture {
        _dir: dir,
        scene,
        out,
        out_repeat,
        summary,
        elapsed,
        ablation,
        perturbed,
        perturbation_m: shift.norm(),
        perturbation_deg,
    }
});

fn criterion(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

/// All pairwise camera-distance ratios against ground truth.
fn scale_ratios(est: &[(String, CameraPose)], gt: &[(String, CameraPose)]) -> Vec<f64> {
    let centers: Vec<(String, Vec3)> = est
        .iter()
        .map(|(n, p)| (n.clone(), p.center()))
        .collect();
    let gt_center = |name: &str| -> Vec3 {
        gt.iter().find(|(n, _)| n == name).expect("gt pose").1.center()
    };
    let mut ratios = Vec::new();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            let d_gt = (gt_center(&centers[i].0) - gt_center(&centers[j].0)).norm();
            if d_gt > 1e-9 {
                ratios.push((centers[i].1 - centers[j].1).norm() / d_gt);
            }
        }
    }
    ratios
}

#[test]
fn scale_recovery_with_ablation() {
    let fx = &*FIXTURE;
    let ratios = scale_ratios(&fx.summary.poses, &fx.scene.poses);
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let ablated = scale_ratios(&fx.ablation.poses, &fx.scene.poses);
    let mean_ablation_err =
        ablated.iter().map(|r| (r - 1.0).abs()).sum::<f64>() / ablated.len() as f64;
    let pass = !ratios.is_empty()
        && lo >= 0.99
        && hi <= 1.01
        && mean_ablation_err > 0.05
        && fx.elapsed < Duration::from_secs(120);
    criterion(
        "scale recovery",
        pass,
        &format!(
            "{} camera pairs, distance ratio in [{lo:.4}, {hi:.4}]; without plane \
             constraints mean scale error {mean_ablation_err:.3}; run took {:.1}s",
            ratios.len(),
            fx.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn point_to_plane_convergence() {
    let fx = &*FIXTURE;
    let rows: Vec<_> = fx
        .summary
        .rows
        .iter()
        .filter(|r| r.report.planes_total > 0)
        .collect();
    let improved = rows
        .iter()
        .filter(|r| r.report.p2p_after < r.report.p2p_before)
        .count();
    let final_p2p = rows.last().map(|r| r.report.p2p_after).unwrap_or(f64::NAN);
    let pass = !rows.is_empty()
        && improved as f64 >= 0.95 * rows.len() as f64
        && final_p2p < 0.02;
    criterion(
        "point-to-plane convergence",
        pass,
        &format!(
            "improved in {improved}/{} adjustments, final mean distance {final_p2p:.5} m",
            rows.len()
        ),
    );
}

#[test]
fn reprojection_quality() {
    let fx = &*FIXTURE;
    let means: Vec<f64> = fx
        .summary
        .rows
        .iter()
        .map(|r| r.report.reproj_mean_px)
        .collect();
    let worst = means.iter().cloned().fold(0.0, f64::max);
    let q = (means.len() / 4).max(1);
    let first = means[..q].iter().sum::<f64>() / q as f64;
    let last = means[means.len() - q..].iter().sum::<f64>() / q as f64;
    let pass = worst < 2.0 && last <= 1.5 * first;
    criterion(
        "reprojection error",
        pass,
        &format!(
            "worst adjustment mean {worst:.3} px; first-quartile mean {first:.3} px vs \
             last-quartile {last:.3} px"
        ),
    );
}

#[test]
fn plane_factor_coverage() {
    let fx = &*FIXTURE;
    let incremental: Vec<_> = fx
        .summary
        .rows
        .iter()
        .filter(|r| format!("{}", r.mode) == "incremental")
        .collect();
    let min_planes = incremental
        .iter()
        .map(|r| r.report.planes_total)
        .min()
        .unwrap_or(0);
    let projected: usize = incremental.iter().map(|r| r.report.planes_projected).sum();
    let nn: usize = incremental.iter().map(|r| r.report.planes_nn).sum();
    let pass = !incremental.is_empty() && min_planes >= 10 && projected > 0 && nn > 0;
    criterion(
        "plane factor coverage",
        pass,
        &format!(
            "{} incremental adjustments, fewest factors {min_planes}, \
             {projected} projected / {nn} nearest-neighbor overall",
            incremental.len()
        ),
    );
}

#[test]
fn initial_pose_perturbation_recovery() {
    let fx = &*FIXTURE;
    let eval = evaluate_against_truth(&fx.perturbed.poses, &fx.scene.poses, Some("cam000"))
        .expect("evaluation");
    println!("{}", format_evaluation(&eval));
    let pass = eval.max_translation_m < 0.05 && eval.max_rotation_rad < 0.5_f64.to_radians();
    criterion(
        "initial pose perturbation",
        pass,
        &format!(
            "start offset {:.3} m / {:.1} deg; final max error {:.4} m / {:.4} deg over {} images",
            fx.perturbation_m,
            fx.perturbation_deg,
            eval.max_translation_m,
            eval.max_rotation_rad.to_degrees(),
            eval.rows.len()
        ),
    );
}

#[test]
fn solver_oracles() {
    // Exact nearest neighbor against brute force.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<Vec3> = (0..5000)
        .map(|_| {
            Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            )
        })
        .collect();
    let tree = KdTree::build(&points);
    let mut kd_ok = 0;
    let queries = 10_000;
    for _ in 0..queries {
        let q = Vec3::new(
            rng.random_range(-12.0..12.0),
            rng.random_range(-12.0..12.0),
            rng.random_range(-12.0..12.0),
        );
        let brute = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let got = tree.nearest_within(&q, f64::INFINITY).unwrap();
        if got.0 == brute.0 {
            kd_ok += 1;
        }
    }

    // Analytic Jacobians against central differences.
    let mut jac_worst = 0.0_f64;
    let eps = 1e-6;
    for _ in 0..200 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let pose = CameraPose::new(
            UnitQuaternion::from_scaled_axis(axis * rng.random_range(-1.0..1.0)),
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        );
        let cam = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(2.0..8.0),
        );
        let inv = pose.inverse();
        let x = inv.rotation * cam + inv.translation;
        let obs = lidar_sfm::geometry::Pixel::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let (_, jp, jx) = reprojection_blocks(&pose, &x, &obs);
        for k in 0..3 {
            let mut d = Vec3::zeros();
            d[k] = eps;
            let fd_rot = (reprojection_blocks(&pose.retract(&d, &Vec3::zeros()), &x, &obs).0
                - reprojection_blocks(&pose.retract(&(-d), &Vec3::zeros()), &x, &obs).0)
                / (2.0 * eps);
            let fd_t = (reprojection_blocks(&pose.retract(&Vec3::zeros(), &d), &x, &obs).0
                - reprojection_blocks(&pose.retract(&Vec3::zeros(), &(-d)), &x, &obs).0)
                / (2.0 * eps);
            let mut xp = x;
            xp[k] += eps;
            let mut xm = x;
            xm[k] -= eps;
            let fd_x = (reprojection_blocks(&pose, &xp, &obs).0
                - reprojection_blocks(&pose, &xm, &obs).0)
                / (2.0 * eps);
            jac_worst = jac_worst
                .max((fd_rot - jp.column(k)).norm())
                .max((fd_t - jp.column(k + 3)).norm())
                .max((fd_x - jx.column(k)).norm());
        }
    }

    // Accepted LM costs never increase, on every adjustment of the run.
    let fx = &*FIXTURE;
    let mut monotone = true;
    for row in &fx.summary.rows {
        let mut prev = row.report.initial_cost;
        for &c in &row.report.accepted_costs {
            if c > prev {
                monotone = false;
            }
            prev = c;
        }
    }

    // Noise-free PnP and triangulation recover exact geometry.
    let intr = fx.scene.spec.intrinsics();
    let (name0, pose0) = &fx.scene.poses[0];
    let corrs: Vec<(Vec3, lidar_sfm::geometry::Pixel)> = fx
        .scene
        .landmarks
        .iter()
        .filter_map(|w| project_pinhole(&intr, &transform_to_camera(pose0, w)).map(|px| (*w, px)).ok())
        .filter(|(_, px)| intr.contains(px))
        .take(60)
        .collect();
    let mut pnp_rng = ChaCha8Rng::seed_from_u64(3);
    let (pnp_pose, _, _) = ransac_pnp(&corrs, &intr, 1.0, 10, &mut pnp_rng).expect("pnp");
    let pnp_err = (pnp_pose.center() - pose0.center()).norm();

    let landmark = fx.scene.landmarks[fx.scene.features[0][0].0];
    let measurements: Vec<Measurement> = fx
        .scene
        .poses
        .iter()
        .filter_map(|(_, pose)| {
            project_pinhole(&intr, &transform_to_camera(pose, &landmark))
                .ok()
                .filter(|px| intr.contains(px))
                .map(|px| Measurement {
                    pose: *pose,
                    px,
                    norm: normalized_plane_coords(&intr, &px),
                })
        })
        .collect();
    let tri = dlt_triangulate(&measurements).expect("triangulation");
    let tri_err = (tri - landmark).norm();

    let pass =
        kd_ok == queries && jac_worst < 1e-5 && monotone && pnp_err < 1e-6 && tri_err < 1e-6;
    criterion(
        "solver oracles",
        pass,
        &format!(
            "kd-tree matched brute force on {kd_ok}/{queries} queries; Jacobians within \
             {jac_worst:.2e} of central differences; LM costs monotone: {monotone}; \
             noise-free PnP error {pnp_err:.2e} m, triangulation error {tri_err:.2e} m ({name0})"
        ),
    );
}

#[test]
fn deterministic_outputs() {
    let fx = &*FIXTURE;
    let mut identical = Vec::new();
    for file in ["poses.txt", "points.ply", "metrics.csv"] {
        let a = fs::read(fx.out.join(file)).expect("first run output");
        let b = fs::read(fx.out_repeat.join(file)).expect("second run output");
        identical.push((file, a == b));
    }
    let pass = identical.iter().all(|(_, same)| *same);
    criterion(
        "determinism",
        pass,
        &format!(
            "byte-identical across reruns: {}",
            identical
                .iter()
                .map(|(f, same)| format!("{f}={same}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn io_round_trips() {
    let fx = &*FIXTURE;
    let dir = tempfile::tempdir().expect("tempdir");
    let points: Vec<LidarPoint> = fx.scene.lidar.iter().take(500).cloned().collect();
    let ascii = dir.path().join("a.ply");
    let binary = dir.path().join("b.ply");
    write_ply_ascii(&ascii, &points, None).expect("ascii write");
    write_ply_binary(&binary, &points, None).expect("binary write");
    let opts = PlyOptions::default();
    let from_ascii = load_ply(&ascii, &opts).expect("ascii read");
    let from_binary = load_ply(&binary, &opts).expect("binary read");
    let ply_ok = points.len() == from_ascii.points.len()
        && points.len() == from_binary.points.len()
        && points.iter().zip(&from_ascii.points).all(|(a, b)| {
            a.position == b.position && a.normal == b.normal
        })
        && points.iter().zip(&from_binary.points).all(|(a, b)| {
            a.position == b.position && a.normal == b.normal
        });

    let pose_path = dir.path().join("poses.txt");
    write_pose_file(&pose_path, &fx.summary.poses).expect("pose write");
    let back = read_pose_file(&pose_path).expect("pose read");
    // Translations survive exactly; quaternions are renormalized on
    // read, so allow an ulp-level difference there.
    let pose_ok = back.len() == fx.summary.poses.len()
        && back.iter().zip(&fx.summary.poses).all(|(a, b)| {
            a.0 == b.0
                && (a.1.rotation.as_ref().coords - b.1.rotation.as_ref().coords).norm() < 1e-12
                && a.1.translation == b.1.translation
        });

    criterion(
        "i/o round trips",
        ply_ok && pose_ok,
        &format!(
            "PLY ascii/binary identical over {} points: {ply_ok}; pose file exact over {} \
             poses: {pose_ok}",
            points.len(),
            fx.summary.poses.len()
        ),
    );
}
