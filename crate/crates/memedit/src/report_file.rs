//! Run reports as comma-separated tables.
//!
//! Every table starts with a comment header naming the cell, the config,
//! the pretrained model and the judge:
//!
//! ```text
//! # memedit-report v1 cell=edit config=<sha256> model=<sha256> judge=<sha256>
//! ```
//!
//! The wide table has one row per evaluated edit count; the long table has
//! one `t,metric,value` row per number. Wall times and failure messages go
//! to a TOML sidecar so the tables stay byte-reproducible.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use memedit_core::harness::{ReportRow, RunReport};

use crate::error::{FormatError, Result};
use crate::header::Header;

pub const REPORT_KIND: &str = "memedit-report";
pub const WIDE_FILE: &str = "report.csv";
pub const LONG_FILE: &str = "report_long.csv";
pub const SIDECAR_FILE: &str = "report.meta.toml";

/// Identity of a table: which run it belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportId {
    pub cell: String,
    pub config: String,
    pub model: String,
    pub judge: String,
}

impl ReportId {
    pub fn header(&self) -> Header {
        Header::new(REPORT_KIND)
            .with("cell", &self.cell)
            .with("config", &self.config)
            .with("model", &self.model)
            .with("judge", &self.judge)
    }

    fn from_header(h: &Header, path: &Path) -> Result<Self> {
        Ok(Self {
            cell: h.require("cell", path)?,
            config: h.require("config", path)?,
            model: h.require("model", path)?,
            judge: h.require("judge", path)?,
        })
    }
}

/// Every number reported for one row, in column order.
pub fn row_metrics(row: &ReportRow) -> Vec<(String, f64)> {
    let lm = &row.probes.lm;
    let mut m = vec![
        ("steps".to_string(), row.steps as f64),
        ("individual_reliability".into(), row.individual.reliability),
        ("individual_generalization".into(), row.individual.generalization),
        ("sequential_reliability".into(), row.sequential.reliability),
        ("sequential_generalization".into(), row.sequential.generalization),
        ("locality".into(), row.probes.locality),
        ("lm_ppl".into(), lm.mean_ppl),
        ("lm_adjusted_ppl".into(), lm.mean_adjusted),
        ("lm_rho".into(), lm.mean_rho),
        ("lm_scored".into(), lm.scored as f64),
        ("lm_excluded".into(), lm.excluded as f64),
        ("icl_accuracy".into(), row.probes.icl_accuracy),
        ("failures".into(), row.failures as f64),
    ];
    for s in &row.similarity {
        m.push((format!("pearson_r_layer{}", s.layer), s.r));
    }
    m
}

fn csv_string(id: &ReportId, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut buf = format!("# {}\n", id.header().line()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(csv::Error::from)?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn wide_csv(id: &ReportId, report: &RunReport) -> Result<String> {
    let mut header = vec!["t".to_string()];
    if let Some(r) = report.rows.first() {
        header.extend(row_metrics(r).into_iter().map(|(k, _)| k));
    }
    let rows = report.rows.iter().map(|r| {
        let mut v = vec![r.t.to_string()];
        v.extend(row_metrics(r).into_iter().map(|(_, x)| x.to_string()));
        v
    });
    csv_string(id, &header, rows)
}

pub fn long_csv(id: &ReportId, report: &RunReport) -> Result<String> {
    let rows: Vec<LongRow> = report
        .rows
        .iter()
        .flat_map(|r| row_metrics(r).into_iter().map(move |(metric, value)| LongRow { t: r.t, metric, value }))
        .collect();
    long_rows_csv(id, &rows)
}

fn long_rows_csv(id: &ReportId, rows: &[LongRow]) -> Result<String> {
    let header = ["t", "metric", "value"].map(String::from);
    csv_string(id, &header, rows.iter().map(|r| vec![r.t.to_string(), r.metric.clone(), r.value.to_string()]))
}

/// Wall times and failures; everything here may differ between runs.
pub fn sidecar_toml(id: &ReportId, report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "cell = {:?}", id.cell);
    let _ = writeln!(s, "config = {:?}", id.config);
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let _ = writeln!(s, "created_unix = {created}");
    let ts: Vec<String> = report.rows.iter().map(|r| r.t.to_string()).collect();
    let secs: Vec<String> = report.wall_secs.iter().map(|w| format!("{w:.3}")).collect();
    let _ = writeln!(s, "t = [{}]", ts.join(", "));
    let _ = writeln!(s, "wall_secs = [{}]", secs.join(", "));
    for f in &report.failures {
        let _ = writeln!(s, "\n[[failures]]\nstep = {}\nt = {}\nmessage = {:?}", f.step, f.t, f.message);
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(FormatError::io(dir))?;
    }
    std::fs::write(path, text).map_err(FormatError::io(path))
}

/// Writes the wide and long tables and the sidecar into `dir`.
pub fn write_report(dir: &Path, id: &ReportId, report: &RunReport) -> Result<[PathBuf; 3]> {
    let paths = [dir.join(WIDE_FILE), dir.join(LONG_FILE), dir.join(SIDECAR_FILE)];
    write_text(&paths[0], &wide_csv(id, report)?)?;
    write_text(&paths[1], &long_csv(id, report)?)?;
    write_text(&paths[2], &sidecar_toml(id, report))?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongRow {
    pub t: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTable {
    pub id: ReportId,
    pub rows: Vec<LongRow>,
}

pub fn read_long(path: &Path) -> Result<LongTable> {
    let text = std::fs::read_to_string(path).map_err(FormatError::io(path))?;
    let first = text.lines().next().unwrap_or("");
    let h = Header::parse(first.strip_prefix("# ").unwrap_or(first), REPORT_KIND, path)?;
    let id = ReportId::from_header(&h, path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "metric", "value"] {
        return Err(FormatError::malformed(path, 2, "expected columns t,metric,value"));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| FormatError::malformed(path, i + 3, m.to_string());
        rows.push(LongRow {
            t: rec[0].parse().map_err(|_| bad("invalid t"))?,
            metric: rec[1].to_string(),
            value: rec[2].parse().map_err(|_| bad("invalid value"))?,
        });
    }
    Ok(LongTable { id, rows })
}

/// Appends rows to a long table, creating it if needed. An existing table
/// must belong to the same config.
pub fn append_long(path: &Path, id: &ReportId, rows: &[LongRow]) -> Result<()> {
    if path.exists() {
        let existing = read_long(path)?;
        if existing.id.config != id.config {
            return Err(FormatError::malformed(
                path,
                1,
                format!("table belongs to config {}, not {}", existing.id.config, id.config),
            ));
        }
        let mut body = String::new();
        for r in rows {
            let _ = writeln!(body, "{},{},{}", r.t, r.metric, r.value);
        }
        let mut f = std::fs::OpenOptions::new().append(true).open(path).map_err(FormatError::io(path))?;
        f.write_all(body.as_bytes()).map_err(FormatError::io(path))
    } else {
        write_text(path, &long_rows_csv(id, rows)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("no tables to merge")]
    Empty,
    #[error("table {cell:?} was produced from model {found}, expected {expected}; pass --force to merge anyway")]
    DigestMismatch { cell: String, expected: String, found: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Merges long tables into one `cell,t,metric,value` table. All tables
/// must share the pretrained model digest unless `force` is set.
pub fn merge_long(tables: &[LongTable], force: bool) -> Result<String, MergeError> {
    let first = tables.first().ok_or(MergeError::Empty)?;
    if !force {
        if let Some(t) = tables.iter().find(|t| t.id.model != first.id.model) {
            return Err(MergeError::DigestMismatch {
                cell: t.id.cell.clone(),
                expected: first.id.model.clone(),
                found: t.id.model.clone(),
            });
        }
    }
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["cell", "config", "t", "metric", "value"]).map_err(FormatError::from)?;
        for t in tables {
            for r in &t.rows {
                w.write_record([&t.id.cell, &t.id.config, &r.t.to_string(), &r.metric, &r.value.to_string()])
                    .map_err(FormatError::from)?;
            }
        }
        w.flush().map_err(|e| FormatError::from(csv::Error::from(e)))?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Range violations in a long table: scores outside `[0, 1]`, perplexities
/// below 1, or edit counts out of order.
pub fn check_long(table: &LongTable) -> Vec<String> {
    let unit = [
        "individual_reliability",
        "individual_generalization",
        "sequential_reliability",
        "sequential_generalization",
        "locality",
        "icl_accuracy",
    ];
    let mut problems = Vec::new();
    for r in &table.rows {
        let ok = if unit.contains(&r.metric.as_str()) {
            (0.0..=1.0).contains(&r.value)
        } else if r.metric == "lm_ppl" || r.metric == "lm_adjusted_ppl" {
            r.value >= 1.0
        } else if r.metric.starts_with("pearson_r") {
            (-1.0..=1.0).contains(&r.value)
        } else {
            r.value.is_finite()
        };
        if !ok {
            problems.push(format!("{}: {} = {} at t = {}", table.id.cell, r.metric, r.value, r.t));
        }
    }
    if table.rows.windows(2).any(|w| w[1].t < w[0].t) {
        problems.push(format!("{}: rows not sorted by t", table.id.cell));
    }
    problems
}
