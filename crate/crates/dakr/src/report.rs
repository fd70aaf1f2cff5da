//! Result files.
//!
//! Per run: `run.json` (the full result), `dice.csv` / `iou.csv` / `hd95.csv`
//! (row `j` = trained through domain `j`, column `i` = evaluated on domain `i`)
//! and `curves.csv` (Dice forgetting curves, long format), plus an optional
//! `forgetting.svg`. Across runs: `aggregate.csv` with AVG/BWT per method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dakr_core::metrics::MetricMatrix;
use dakr_core::train::RunResult;

use crate::error::{CliError, CliResult};

pub const RUN_JSON: &str = "run.json";
pub const CURVES_CSV: &str = "curves.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const CURVES_SVG: &str = "forgetting.svg";
pub const METRICS: [&str; 3] = ["dice", "iou", "hd95"];

/// Name a run is grouped under: its label, else its toggle signature.
pub fn run_key(r: &RunResult) -> String {
    r.config.label.clone().unwrap_or_else(|| r.signature.clone())
}

fn metric<'a>(r: &'a RunResult, name: &str) -> &'a MetricMatrix {
    match name {
        "dice" => &r.dice,
        "iou" => &r.iou,
        _ => &r.hd95,
    }
}

/// Write the files of one run into `dir`; returns their paths.
pub fn write_run(result: &RunResult, dir: &Path, svg: bool) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join(RUN_JSON);
    let json = serde_json::to_string_pretty(result).expect("results serialize");
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    for name in METRICS {
        let path = dir.join(format!("{}.csv", name));
        write_matrix_csv(&path, metric(result, name))?;
        written.push(path);
    }
    let path = dir.join(CURVES_CSV);
    write_curves_csv(&path, &result.forgetting_curves)?;
    written.push(path);
    if svg {
        let path = dir.join(CURVES_SVG);
        fs::write(&path, curves_svg(&run_key(result), &result.forgetting_curves)).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_matrix_csv(path: &Path, m: &MetricMatrix) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["trained_through".to_string()];
    header.extend((0..m.k()).map(|i| format!("domain_{}", i)));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for j in 0..m.k() {
        let mut row = vec![j.to_string()];
        row.extend(m.row(j).iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> CliResult<MetricMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let k = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
    let mut m = MetricMatrix::new(k);
    let mut rows = 0;
    for (j, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if j >= k || rec.len() != k + 1 || rec[0].parse::<usize>().ok() != Some(j) {
            return Err(CliError::format(path, format!("unexpected row {}", j)));
        }
        for i in 0..k {
            let cell = &rec[i + 1];
            if !cell.is_empty() {
                let v = cell.parse::<f64>().map_err(|_| CliError::format(path, format!("bad number {:?}", cell)))?;
                m.set(j, i, v);
            }
        }
        rows += 1;
    }
    if rows != k {
        return Err(CliError::format(path, format!("{} rows for {} domains", rows, k)));
    }
    Ok(m)
}

fn write_curves_csv(path: &Path, curves: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["domain", "trained_through", "dice"]).map_err(|e| csv_err(path, e))?;
    for (i, curve) in curves.iter().enumerate() {
        for (step, v) in curve.iter().enumerate() {
            w.write_record([i.to_string(), (i + step).to_string(), v.to_string()]).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Seed-averaged AVG and BWT of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub key: String,
    pub signature: String,
    pub runs: usize,
    /// `(avg, bwt)` for Dice, IoU and HD95.
    pub means: [(f64, f64); 3],
}

pub fn aggregate(results: &[RunResult]) -> CliResult<Vec<AggregateRow>> {
    if results.is_empty() {
        return Err(CliError::Usage("no run results to report".into()));
    }
    let mut groups: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(run_key(r)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(key, rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&RunResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            AggregateRow {
                signature: rs[0].signature.clone(),
                runs: rs.len(),
                means: [
                    (mean(&|r| r.dice_summary.avg), mean(&|r| r.dice_summary.bwt)),
                    (mean(&|r| r.iou_summary.avg), mean(&|r| r.iou_summary.bwt)),
                    (mean(&|r| r.hd95_summary.avg), mean(&|r| r.hd95_summary.bwt)),
                ],
                key,
            }
        })
        .collect())
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["method".to_string(), "signature".into(), "runs".into()];
    for m in METRICS {
        header.push(format!("{}_avg", m));
        header.push(format!("{}_bwt", m));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![r.key.clone(), r.signature.clone(), r.runs.to_string()];
        for (avg, bwt) in r.means {
            rec.push(avg.to_string());
            rec.push(bwt.to_string());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Every run into `out/run_NNN_<key>/`, then `out/aggregate.csv`.
pub fn write_report(results: &[RunResult], out: &Path, svg: bool) -> CliResult<Vec<PathBuf>> {
    let rows = aggregate(results)?;
    let mut written = Vec::new();
    for (i, r) in results.iter().enumerate() {
        written.extend(write_run(r, &out.join(run_dir_name(i, r)), svg)?);
    }
    let path = out.join(AGGREGATE_CSV);
    write_aggregate(&path, &rows)?;
    written.push(path);
    Ok(written)
}

pub fn run_dir_name(i: usize, r: &RunResult) -> String {
    let key: String =
        run_key(r).chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("run_{:03}_{}_s{}", i, key, r.config.seed)
}

pub fn read_run(path: &Path) -> CliResult<RunResult> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

/// `run.json` in `dir` itself and in its immediate subdirectories, sorted by path.
pub fn load_runs(dir: &Path) -> CliResult<Vec<(PathBuf, RunResult)>> {
    let mut paths = Vec::new();
    if dir.join(RUN_JSON).is_file() {
        paths.push(dir.join(RUN_JSON));
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path().join(RUN_JSON);
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    paths.into_iter().map(|p| read_run(&p).map(|r| (p, r))).collect()
}

/// Report over runs already on disk: `aggregate.csv` in `dir`, SVG next to each `run.json`.
pub fn report_dir(dir: &Path, svg: bool) -> CliResult<Vec<PathBuf>> {
    let runs = load_runs(dir)?;
    let results: Vec<RunResult> = runs.iter().map(|(_, r)| r.clone()).collect();
    let rows = aggregate(&results)?;
    let mut written = Vec::new();
    if svg {
        for (p, r) in &runs {
            let path = p.with_file_name(CURVES_SVG);
            fs::write(&path, curves_svg(&run_key(r), &r.forgetting_curves)).map_err(|e| CliError::io(&path, e))?;
            written.push(path);
        }
    }
    let path = dir.join(AGGREGATE_CSV);
    write_aggregate(&path, &rows)?;
    written.push(path);
    Ok(written)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of Dice forgetting curves: x = trained-through domain, y in [0, 1].
pub fn curves_svg(title: &str, curves: &[Vec<f64>]) -> String {
    let (w, h, left, right, top, bottom) = (520.0, 340.0, 56.0, 110.0, 36.0, 44.0);
    let k = curves.len().max(2);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |j: usize| left + pw * j as f64 / (k - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy}" x2="{}" y2="{yy}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            left + pw,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    for j in 0..k {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(j), top + ph + 18.0, j + 1);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">trained through domain</text>"#, left + pw / 2.0, h - 6.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">Dice</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve.iter().enumerate().map(|(step, &v)| format!("{:.2},{:.2}", x(i + step), y(v))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted above");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">domain {}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            i + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::format(path, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = MetricMatrix::from_rows(&[vec![0.1 + 0.2, 1.0 / 3.0], vec![1e-300, 0.7]]).unwrap();
        let path = dir.path().join("m.csv");
        write_matrix_csv(&path, &m).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }

    #[test]
    fn partial_matrix_keeps_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MetricMatrix::new(3);
        m.set(0, 0, 0.5);
        m.set(2, 1, 0.25);
        let path = dir.path().join("m.csv");
        write_matrix_csv(&path, &m).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }

    #[test]
    fn empty_results_are_a_usage_error() {
        assert!(matches!(aggregate(&[]), Err(CliError::Usage(_))));
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_report(&[], dir.path(), false).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = curves_svg("a<b", &[vec![0.9, 0.8, 0.7], vec![0.85, 0.8], vec![0.9]]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 3);
        assert!(s.contains("a&lt;b"));
    }
}
