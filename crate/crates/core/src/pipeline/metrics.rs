//! Per-adjustment metrics rows and CSV emission.

use crate::ba::{BaMode, SolveReport};
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct MetricsRow {
    /// How many images were registered when this adjustment ran.
    pub registration_index: usize,
    pub mode: BaMode,
    pub report: SolveReport,
    /// Anchor pose error against ground truth, when truth is available.
    pub pose_error_m: Option<f64>,
    pub pose_error_rad: Option<f64>,
}

pub const CSV_HEADER: &str = "registration_index,mode,planes_projected,planes_nn,planes_ground,planes_total,p2p_before,p2p_after,reproj_mean_px,reproj_var_px,iterations,initial_cost,final_cost,pose_error_m,pose_error_rad";

pub fn emit_metrics<P: AsRef<Path>>(rows: &[MetricsRow], path: P) -> io::Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        let r = &row.report;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.registration_index,
            row.mode,
            r.planes_projected,
            r.planes_nn,
            r.planes_ground,
            r.planes_total,
            r.p2p_before,
            r.p2p_after,
            r.reproj_mean_px,
            r.reproj_var_px,
            r.iterations,
            r.initial_cost,
            r.final_cost,
            opt(row.pose_error_m),
            opt(row.pose_error_rad),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_rows_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        emit_metrics(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), CSV_HEADER);
    }

    #[test]
    fn one_row_per_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let report = SolveReport {
            iterations: 3,
            initial_cost: 1.0,
            final_cost: 0.5,
            accepted_costs: vec![0.8, 0.5],
            reproj_mean_px: 0.7,
            reproj_var_px: 0.1,
            p2p_before: 0.02,
            p2p_after: 0.01,
            planes_projected: 4,
            planes_nn: 6,
            planes_ground: 2,
            planes_total: 10,
        };
        let rows = vec![
            MetricsRow {
                registration_index: 2,
                mode: BaMode::Incremental,
                report: report.clone(),
                pose_error_m: Some(0.01),
                pose_error_rad: None,
            },
            MetricsRow {
                registration_index: 3,
                mode: BaMode::WholeMap,
                report,
                pose_error_m: None,
                pose_error_rad: None,
            },
        ];
        emit_metrics(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2,incremental,4,6,2,10,0.02,0.01,"));
        assert!(lines[2].contains(",whole_map,"));
        // Missing pose errors leave empty cells.
        assert!(lines[2].ends_with(",,"));
    }
}
