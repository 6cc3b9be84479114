//! CSV and JSON writers and the trajectory reader.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use peiv_core::{DMatrix, McReport, Trajectory};
use serde::Serialize;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Header `k,x_1..x_n,y_1..y_m`; the `k = 0` row has empty `y` fields.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let (n, m) = (traj.states.nrows(), traj.measurements.nrows());
    let mut w = csv_writer(path)?;
    let header = std::iter::once("k".to_string())
        .chain((1..=n).map(|i| format!("x_{i}")))
        .chain((1..=m).map(|j| format!("y_{j}")));
    w.write_record(header)?;
    for k in 0..=traj.steps() {
        let mut rec = vec![k.to_string()];
        rec.extend(traj.states.column(k).iter().map(|&v| fmt_f64(v)));
        if k == 0 {
            rec.extend(std::iter::repeat_n(String::new(), m));
        } else {
            rec.extend(traj.measurements.column(k - 1).iter().map(|&v| fmt_f64(v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `y_1..y_N` (one column each) from a trajectory CSV. `x_*` columns
/// are ignored; rows with empty `y` fields are skipped.
pub fn read_measurements(path: &Path, m: usize) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    let cols: Vec<usize> = (1..=m)
        .map(|j| {
            let name = format!("y_{j}");
            header
                .iter()
                .position(|h| h.trim() == name)
                .with_context(|| format!("{}: missing column {name}", path.display()))
        })
        .collect::<Result<_>>()?;
    let extra = header
        .iter()
        .filter(|h| h.trim().starts_with("y_"))
        .count();
    if extra != m {
        return Err(peiv_core::Error::Dimension(format!(
            "{}: {extra} measurement columns, model has m = {m}",
            path.display()
        ))
        .into());
    }
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let fields: Vec<&str> = cols.iter().map(|&c| rec.get(c).unwrap_or("").trim()).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        for f in fields {
            let v: f64 = f
                .parse()
                .with_context(|| format!("{}: row {}: bad number {f:?}", path.display(), line + 2))?;
            data.push(v);
        }
    }
    if data.is_empty() {
        bail!("{}: no measurements", path.display());
    }
    Ok(DMatrix::from_vec(m, data.len() / m, data))
}

/// One named numeric column of a CSV file, skipping empty fields.
pub fn read_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h.trim() == name)
        .with_context(|| format!("{}: missing column {name}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = rec.get(col).unwrap_or("").trim();
        if !f.is_empty() {
            out.push(f.parse()?);
        }
    }
    Ok(out)
}

/// Smoothed means plus marginal variances: `k,x_1..x_n,var_1..var_n`.
pub fn write_states(path: &Path, xhat: &DMatrix<f64>, marginals: &[DMatrix<f64>]) -> Result<()> {
    let n = xhat.nrows();
    let mut w = csv_writer(path)?;
    let header = std::iter::once("k".to_string())
        .chain((1..=n).map(|i| format!("x_{i}")))
        .chain((1..=n).map(|i| format!("var_{i}")));
    w.write_record(header)?;
    for k in 0..xhat.ncols() {
        let mut rec = vec![k.to_string()];
        rec.extend(xhat.column(k).iter().map(|&v| fmt_f64(v)));
        if let Some(p) = marginals.get(k) {
            rec.extend(p.diagonal().iter().map(|&v| fmt_f64(v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rmse(path: &Path, report: &McReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "N",
        "M_effective",
        "rmse_theta",
        "rmse_x0",
        "q05",
        "q95",
        "failures",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.steps.to_string(),
            r.m_effective.to_string(),
            fmt_f64(r.rmse_theta),
            fmt_f64(r.rmse_x0),
            fmt_f64(r.q05),
            fmt_f64(r.q95),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ellipses(path: &Path, report: &McReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "N",
        "center_x0",
        "center_theta",
        "cov_x0_x0",
        "cov_x0_theta",
        "cov_theta_theta",
        "radius_scale",
    ])?;
    let steps = report.ellipse_batch.map_or(String::new(), |n| n.to_string());
    for (method, e) in &report.ellipses {
        w.write_record([
            method.as_str().to_string(),
            steps.clone(),
            fmt_f64(e.center[0]),
            fmt_f64(e.center[1]),
            fmt_f64(e.cov[(0, 0)]),
            fmt_f64(e.cov[(0, 1)]),
            fmt_f64(e.cov[(1, 1)]),
            fmt_f64(e.radius_scale),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 123456789.125, f64::MIN_POSITIVE] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let digits: String = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).collect();
            assert_eq!(digits.len(), 17);
        }
    }
}
