//! CSV emission. Floats use fixed precision so identical inputs give
//! identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::presets::{SweepResult, Table3Point};
use super::{write_events_csv, RunOutput, SimError};
use crate::controller::write_log_csv;
use crate::kms::write_audit_csv;

pub fn write_table3_csv<W: Write>(rows: &[Table3Point], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["link", "budget_db", "qber_pct", "skr_bps"])?;
    for r in rows {
        w.write_record([
            r.link.clone(),
            format!("{:.3}", r.budget_db),
            format!("{:.4}", r.qber_pct),
            format!("{:.3}", r.skr_bps),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweeps_csv<W: Write>(sweeps: &[SweepResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "variable", "x", "qber_pct", "skr_bps", "classical_feasible"])?;
    for s in sweeps {
        for p in &s.points {
            w.write_record([
                s.series.clone(),
                s.variable.clone(),
                format!("{:.1}", p.x),
                format!("{:.4}", p.qber_pct),
                format!("{:.3}", p.skr_bps),
                p.classical_feasible.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One line per series: point count, first zero-key point, key-rate range.
pub fn write_sweep_summary_csv<W: Write>(sweeps: &[SweepResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "points", "first_zero_skr_x", "max_skr_bps", "min_skr_bps", "max_qber_pct"])?;
    for s in sweeps {
        let skr = s.points.iter().map(|p| p.skr_bps);
        let max_skr = skr.clone().fold(f64::NEG_INFINITY, f64::max);
        let min_skr = skr.fold(f64::INFINITY, f64::min);
        let max_q = s.points.iter().map(|p| p.qber_pct).fold(f64::NEG_INFINITY, f64::max);
        let fmt = |v: f64, prec: usize| if v.is_finite() { format!("{v:.prec$}") } else { String::new() };
        w.write_record([
            s.series.clone(),
            s.points.len().to_string(),
            s.first_zero_skr().map(|x| format!("{x:.1}")).unwrap_or_default(),
            fmt(max_skr, 3),
            fmt(min_skr, 3),
            fmt(max_q, 4),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, fs::File), SimError> {
    let path = dir.join(name);
    let file = fs::File::create(&path)?;
    Ok((path, file))
}

/// Writes `<name>.csv` and `summary.csv` into `dir`.
pub fn emit_table3(rows: &[Table3Point], dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir)?;
    let (p, f) = create(dir, "table3.csv")?;
    write_table3_csv(rows, f)?;
    let (s, f) = create(dir, "summary.csv")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["result", "rows"])?;
    w.write_record(["table3".to_string(), rows.len().to_string()])?;
    w.flush()?;
    Ok(vec![p, s])
}

pub fn emit_sweeps(name: &str, sweeps: &[SweepResult], dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir)?;
    let (p, f) = create(dir, &format!("{name}.csv"))?;
    write_sweeps_csv(sweeps, f)?;
    let (s, f) = create(dir, "summary.csv")?;
    write_sweep_summary_csv(sweeps, f)?;
    Ok(vec![p, s])
}

/// Event log, controller log, key-store audit, route table and summary.
pub fn emit_run(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let (p, f) = create(dir, "events.csv")?;
    write_events_csv(&out.events, f)?;
    paths.push(p);
    let (p, f) = create(dir, "controller_log.csv")?;
    write_log_csv(&out.controller_log, f)?;
    paths.push(p);
    let (p, f) = create(dir, "key_audit.csv")?;
    write_audit_csv(&out.audit, f)?;
    paths.push(p);
    let (p, mut f) = create(dir, "route_table.txt")?;
    f.write_all(out.route_table.as_bytes())?;
    paths.push(p);

    let (p, f) = create(dir, "summary.csv")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record([
        "conn_id",
        "src",
        "dst",
        "kind",
        "final_state",
        "route",
        "routes_tried",
        "reports",
        "last_qber_pct",
        "last_skr_bps",
        "tunnel_state",
        "rekeys",
        "failed_rekeys",
    ])?;
    for c in &out.summary {
        w.write_record([
            c.conn_id.to_string(),
            c.src.clone(),
            c.dst.clone(),
            c.kind.clone(),
            format!("{:?}", c.final_state),
            c.route.clone(),
            c.routes_tried.to_string(),
            c.reports.to_string(),
            c.last_qber_pct.map(|q| format!("{q:.4}")).unwrap_or_default(),
            c.last_skr_bps.map(|s| format!("{s:.3}")).unwrap_or_default(),
            c.tunnel_state.clone(),
            c.rekeys.to_string(),
            c.failed_rekeys.to_string(),
        ])?;
    }
    w.flush()?;
    paths.push(p);

    let (p, f) = create(dir, "metrics.csv")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["duration_s", "generation_rate_bps", "consumption_rate_bps"])?;
    w.write_record([
        format!("{:.3}", out.final_time_s),
        format!("{:.3}", out.generation_rate_bps),
        format!("{:.3}", out.consumption_rate_bps),
    ])?;
    w.flush()?;
    paths.push(p);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_header_only() {
        let mut buf = Vec::new();
        write_sweeps_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "series,variable,x,qber_pct,skr_bps,classical_feasible\n"
        );
    }

    #[test]
    fn table3_header() {
        let mut buf = Vec::new();
        write_table3_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "link,budget_db,qber_pct,skr_bps\n");
    }
}
