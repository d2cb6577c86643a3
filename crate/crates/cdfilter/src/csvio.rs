//! CSV artifact writers.
//!
//! All files use `.` decimal points, `,` separators, LF line endings, and
//! shortest round-trip decimal formatting. Writes are atomic: content lands
//! in a sibling temp file that is renamed over the target, so interrupted
//! runs never leave truncated artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analyze::{MetricsReport, SurfaceGrid};
use crate::simulate::Trajectory;
use crate::Result;

pub const TRAJECTORY_HEADER: &str =
    "t,omega,p_v,c_r,h_cake,q_f,t_m,q_air_in,q_air_out,f_in,c_in,f_out,ref_q_f,ref_c_r,ref_f_in,eta,diag_flags";
pub const MPC_DIAG_HEADER: &str =
    "t,qp_iterations,qp_active,qp_cost,qp_softened,qp_iteration_limited";
pub const MATRIX_HEADER: &str = "row,col,value";
pub const METRICS_HEADER: &str = "variable,ise,overshoot_pct,settling_time,settled,error_stddev";
pub const SURFACE_HEADER: &str = "f_in,c_in,eta";

/// Shortest decimal form that round-trips to the same f64.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Write-temp-then-rename so partial runs never leave truncated files.
pub fn atomic_write(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = Path::new(&tmp);
    fs::write(tmp_path, content)?;
    fs::rename(tmp_path, path)?;
    Ok(())
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(64 * (traj.records.len() + 1));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in &traj.records {
        let x = &r.state;
        let u = &r.input;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            format_float(r.t),
            format_float(x.omega),
            format_float(x.p_v),
            format_float(x.c_r),
            format_float(x.h_cake),
            format_float(x.q_f),
            format_float(u.t_m),
            format_float(u.q_air_in),
            format_float(u.q_air_out),
            format_float(u.f_in),
            format_float(u.c_in),
            format_float(u.f_out),
            format_float(r.ref_q_f),
            format_float(r.ref_c_r),
            format_float(r.ref_f_in),
            format_float(r.eta),
            r.flags,
        );
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    atomic_write(path, &trajectory_csv(traj))
}

/// Per-sample QP diagnostics; `None` when the run had no MPC samples.
pub fn mpc_diag_csv(traj: &Trajectory) -> Option<String> {
    if traj.records.iter().all(|r| r.mpc.is_none()) {
        return None;
    }
    let mut out = String::new();
    out.push_str(MPC_DIAG_HEADER);
    out.push('\n');
    for r in &traj.records {
        if let Some(m) = &r.mpc {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                format_float(r.t),
                m.iterations,
                m.active_count,
                format_float(m.cost),
                m.softened,
                m.iteration_limited,
            );
        }
    }
    Some(out)
}

/// Row-major `row,col,value` dump of a matrix accessor.
pub fn matrix_csv(rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) -> String {
    let mut out = String::new();
    out.push_str(MATRIX_HEADER);
    out.push('\n');
    for i in 0..rows {
        for j in 0..cols {
            let _ = writeln!(out, "{i},{j},{}", format_float(get(i, j)));
        }
    }
    out
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for e in &report.entries {
        let overshoot = e.overshoot_pct.map(format_float).unwrap_or_default();
        let settling = e.settling_time.map(format_float).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.variable,
            format_float(e.ise),
            overshoot,
            settling,
            e.settled,
            format_float(e.error_stddev),
        );
    }
    out
}

/// One row per grid cell, outer loop over `f_in`.
pub fn surface_csv(grid: &SurfaceGrid) -> String {
    let mut out = String::new();
    out.push_str(SURFACE_HEADER);
    out.push('\n');
    for (i, &f) in grid.f_in.iter().enumerate() {
        for (j, &c) in grid.c_in.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{}",
                format_float(f),
                format_float(c),
                format_float(grid.eta[i][j]),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::efficiency_surface;

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 3.2e-4, 1.25e8, 101_300.0, -0.0001047, 1.0 / 3.0] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
            assert!(!s.contains(','));
        }
        assert_eq!(format_float(f64::NAN), "NaN");
    }

    #[test]
    fn surface_csv_row_count() {
        let grid = efficiency_surface(0.0, 25.0, (0.01, 0.05), (20.0, 100.0), 2, 2).unwrap();
        let csv = surface_csv(&grid);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], SURFACE_HEADER);
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/deep/file.csv");
        atomic_write(&path, "hello\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hello\n");
    }

    #[test]
    fn matrix_csv_is_row_major() {
        let csv = matrix_csv(2, 2, |i, j| (10 * i + j) as f64);
        let body: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(body, vec!["0,0,0", "0,1,1", "1,0,10", "1,1,11"]);
    }
}
