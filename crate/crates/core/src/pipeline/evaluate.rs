//! Pose evaluation against ground truth with per-axis breakdown.

use crate::geometry::CameraPose;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("estimated and ground-truth pose sets share no image names")]
    Disjoint,
}

/// Per-image error: camera-center difference split by world axis and
/// relative rotation split into roll/pitch/yaw.
#[derive(Debug, Clone)]
pub struct PoseErrorRow {
    pub name: String,
    pub ex: f64,
    pub ey: f64,
    pub ez: f64,
    pub translation_m: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub rotation_rad: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<PoseErrorRow>,
    pub mean_translation_m: f64,
    pub max_translation_m: f64,
    pub mean_rotation_rad: f64,
    pub max_rotation_rad: f64,
    /// Index into `rows` of the initial image, when requested and present.
    pub init_row: Option<usize>,
}

pub fn evaluate_against_truth(
    estimated: &[(String, CameraPose)],
    truth: &[(String, CameraPose)],
    init_image: Option<&str>,
) -> Result<Evaluation, AlignmentError> {
    let mut rows = Vec::new();
    for (name, est) in estimated {
        let Some((_, gt)) = truth.iter().find(|(n, _)| n == name) else {
            continue;
        };
        let dc = est.center() - gt.center();
        let rel = est.rotation * gt.rotation.inverse();
        let (roll, pitch, yaw) = rel.euler_angles();
        rows.push(PoseErrorRow {
            name: name.clone(),
            ex: dc.x,
            ey: dc.y,
            ez: dc.z,
            translation_m: dc.norm(),
            roll,
            pitch,
            yaw,
            rotation_rad: rel.angle(),
        });
    }
    if rows.is_empty() {
        return Err(AlignmentError::Disjoint);
    }
    let n = rows.len() as f64;
    let mean_translation_m = rows.iter().map(|r| r.translation_m).sum::<f64>() / n;
    let max_translation_m = rows.iter().map(|r| r.translation_m).fold(0.0, f64::max);
    let mean_rotation_rad = rows.iter().map(|r| r.rotation_rad).sum::<f64>() / n;
    let max_rotation_rad = rows.iter().map(|r| r.rotation_rad).fold(0.0, f64::max);
    let init_row = init_image.and_then(|name| rows.iter().position(|r| r.name == name));
    Ok(Evaluation {
        rows,
        mean_translation_m,
        max_translation_m,
        mean_rotation_rad,
        max_rotation_rad,
        init_row,
    })
}

/// Human-readable table, initial-image row marked with `*`.
pub fn format_evaluation(eval: &Evaluation) -> String {
    let mut out = String::new();
    out.push_str("name            x[m]      y[m]      z[m]   |t|[m]  roll[rad] pitch[rad] yaw[rad]  |r|[rad]\n");
    for (i, r) in eval.rows.iter().enumerate() {
        let mark = if eval.init_row == Some(i) { "*" } else { " " };
        out.push_str(&format!(
            "{mark}{:<14} {:>8.4} {:>9.4} {:>9.4} {:>8.4} {:>10.4} {:>10.4} {:>8.4} {:>9.4}\n",
            r.name, r.ex, r.ey, r.ez, r.translation_m, r.roll, r.pitch, r.yaw, r.rotation_rad
        ));
    }
    out.push_str(&format!(
        "mean |t| = {:.6} m, max |t| = {:.6} m, mean |r| = {:.6} rad, max |r| = {:.6} rad\n",
        eval.mean_translation_m, eval.max_translation_m, eval.mean_rotation_rad, eval.max_rotation_rad
    ));
    out
}
