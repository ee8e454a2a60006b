//! File formats.
//!
//! Snapshot sequences are plain text: a `rows cols frames` header line,
//! optional `#`-prefixed metadata lines, then one frame per blank-line
//! separated block, each frame being `rows` lines of `cols`
//! comma-separated decimals. Matrices use a `rows cols` header followed
//! by comma-separated rows. All floats are written with Rust's shortest
//! round-trip formatting, so re-reading reproduces the exact values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::consensus::LearningTrace;
use crate::error::{Error, Result};
use crate::forecast::ForecastSequence;
use crate::geometry::ObstaclePolytope;
use crate::lifting::DensitySnapshot;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), message: message.into() }
}

/// Serialize a snapshot sequence; `meta` lines are emitted as `#` comments
/// after the header.
pub fn format_snapshots(snapshots: &[DensitySnapshot], meta: &[String]) -> Result<String> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::invalid_input("cannot write an empty snapshot sequence"))?;
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", first.rows(), first.cols(), snapshots.len());
    for line in meta {
        let _ = writeln!(out, "# {line}");
    }
    for snap in snapshots {
        let _ = writeln!(out);
        for r in 0..snap.rows() {
            let row: Vec<String> = (0..snap.cols()).map(|c| snap.value(r, c).to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
    }
    Ok(out)
}

pub fn write_snapshots(path: &Path, snapshots: &[DensitySnapshot], meta: &[String]) -> Result<()> {
    write_file(path, &format_snapshots(snapshots, meta)?)
}

/// Forecast dump: snapshot format with origin/horizon metadata.
pub fn write_forecast(path: &Path, forecast: &ForecastSequence) -> Result<()> {
    let meta = vec![format!(
        "origin={} horizon={}",
        forecast.origin_timestamp,
        forecast.horizon()
    )];
    write_snapshots(path, &forecast.predictions, &meta)
}

pub fn read_snapshots(path: &Path) -> Result<Vec<DensitySnapshot>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(parse_err(path, format!("header must be 'rows cols frames', got '{header}'")));
    }
    let rows: usize = fields[0].parse().map_err(|_| parse_err(path, "bad rows"))?;
    let cols: usize = fields[1].parse().map_err(|_| parse_err(path, "bad cols"))?;
    let frames: usize = fields[2].parse().map_err(|_| parse_err(path, "bad frame count"))?;

    let mut snapshots = Vec::with_capacity(frames);
    let mut current: Vec<f64> = Vec::with_capacity(rows * cols);
    let flush = |values: &mut Vec<f64>, snapshots: &mut Vec<DensitySnapshot>| -> Result<()> {
        if values.is_empty() {
            return Ok(());
        }
        let t = snapshots.len();
        let snap = DensitySnapshot::new(rows, cols, std::mem::take(values), t)?;
        snapshots.push(snap);
        Ok(())
    };
    for line in lines {
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.is_empty() {
            flush(&mut current, &mut snapshots)?;
            continue;
        }
        for field in trimmed.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, format!("bad value '{field}'")))?;
            current.push(v);
        }
    }
    flush(&mut current, &mut snapshots)?;
    if snapshots.len() != frames {
        return Err(parse_err(
            path,
            format!("header promised {frames} frames, found {}", snapshots.len()),
        ));
    }
    Ok(snapshots)
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_file(path, &format_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(parse_err(path, format!("header must be 'rows cols', got '{header}'")));
    }
    let rows: usize = fields[0].parse().map_err(|_| parse_err(path, "bad rows"))?;
    let cols: usize = fields[1].parse().map_err(|_| parse_err(path, "bad cols"))?;
    let mut values = Vec::with_capacity(rows * cols);
    for line in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        for field in trimmed.split(',') {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, format!("bad value '{field}'")))?,
            );
        }
    }
    if values.len() != rows * cols {
        return Err(parse_err(
            path,
            format!("expected {} values, found {}", rows * cols, values.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Learning trace CSV: `t, O, K_err_fro, consensus_defect`. Columns
/// without data (no oracle) are left empty.
pub fn format_trace_csv(trace: &LearningTrace) -> String {
    let mut out = String::from("t,O,K_err_fro,consensus_defect\n");
    for t in 0..trace.consensus_defect.len() {
        let objective = trace
            .objective
            .as_ref()
            .map(|v| v[t].to_string())
            .unwrap_or_default();
        let k_err = trace
            .operator_error
            .as_ref()
            .map(|v| v[t].to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "{t},{objective},{k_err},{}", trace.consensus_defect[t]);
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &LearningTrace) -> Result<()> {
    write_file(path, &format_trace_csv(trace))
}

/// Occupancy point sets as `x,y,h` rows.
pub fn format_points_csv(sets: &[crate::forecast::OccupancyPointSet]) -> String {
    let mut out = String::from("x,y,h\n");
    for set in sets {
        for p in &set.points {
            let _ = writeln!(out, "{},{},{}", p.x, p.y, set.horizon_step);
        }
    }
    out
}

/// Polytope facets as `h,ell,facet,nx,ny,offset` rows; `ell` and
/// `facet` are 1-based in the file, matching the construction indices.
pub fn format_polytopes_csv(polytopes: &[ObstaclePolytope]) -> String {
    let mut out = String::from("h,ell,facet,nx,ny,offset\n");
    for poly in polytopes {
        for (i, n) in poly.normals.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                poly.horizon_step,
                poly.obstacle_index + 1,
                i + 1,
                n.x,
                n.y,
                poly.offsets[i]
            );
        }
    }
    out
}

/// Eigenvalue dump as `re,im` rows.
pub fn format_eigenvalues_csv(values: &[nalgebra::Complex<f64>]) -> String {
    let mut out = String::from("re,im\n");
    for v in values {
        let _ = writeln!(out, "{},{}", v.re, v.im);
    }
    out
}

/// Two labeled spectra as `which,re,im` rows.
pub fn format_spectrum_compare_csv(
    distributed: &[nalgebra::Complex<f64>],
    centralized: &[nalgebra::Complex<f64>],
) -> String {
    let mut out = String::from("which,re,im\n");
    for v in distributed {
        let _ = writeln!(out, "distributed,{},{}", v.re, v.im);
    }
    for v in centralized {
        let _ = writeln!(out, "centralized,{},{}", v.re, v.im);
    }
    out
}

/// Entrywise map as `row,col,value` rows.
pub fn format_entry_map_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::from("row,col,value\n");
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let _ = writeln!(out, "{r},{c},{}", m[(r, c)]);
        }
    }
    out
}

/// Per-step closed-loop log rows.
pub fn format_log_csv(log: &crate::scenario::ClosedLoopLog) -> String {
    let mut out = String::from(
        "t,x,y,theta,v,ax,ay,omega,a,objective,max_slack,solver_iterations,status,h0_violation,recover_clamped,roundtrip_error\n",
    );
    for s in &log.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.time,
            s.state.x,
            s.state.y,
            s.state.theta,
            s.state.v,
            s.ax,
            s.ay,
            s.omega,
            s.accel,
            s.objective,
            s.max_slack,
            s.solver_iterations,
            s.status.as_str(),
            s.h0_violation,
            s.recover_clamped,
            s.roundtrip_error
        );
    }
    out
}

/// Robot-to-obstacle-center distances, one row per (step, obstacle).
pub fn format_distances_csv(log: &crate::scenario::ClosedLoopLog) -> String {
    let mut out = String::from("t,obstacle,distance\n");
    for s in &log.steps {
        for (i, d) in s.obstacle_distances.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", s.time, i + 1, d);
        }
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}
