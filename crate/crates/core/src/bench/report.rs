//! CSV, JSON-lines and leaderboard renderings of a [`GridResult`].
//!
//! Rates are printed as percentages with 2 decimals; the JSON-lines records
//! keep full precision.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::EvalRecord;

use super::{GridResult, CLEAN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Records,
    Table,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Records, ReportFormat::Table];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "grid.csv",
            ReportFormat::Records => "records.jsonl",
            ReportFormat::Table => "leaderboard.txt",
        }
    }

    pub fn render(self, result: &GridResult) -> Result<String> {
        match self {
            ReportFormat::Csv => summary_csv(result),
            ReportFormat::Records => records_jsonl(result),
            ReportFormat::Table => Ok(leaderboard_table(result)),
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "records" => Ok(ReportFormat::Records),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv, records, table)"))),
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// One row per cell: `defense,victim,attack,acc,asr,mean_dh,mean_dc,n`.
pub fn summary_csv(result: &GridResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(["defense", "victim", "attack", "acc", "asr", "mean_dh", "mean_dc", "n"])
        .map_err(io)?;
    for c in &result.cells {
        let s = &c.summary;
        w.write_record([
            c.defense.clone(),
            c.victim.clone(),
            c.attack.clone(),
            pct(s.acc),
            pct(s.asr),
            format!("{:.6e}", s.mean_dh),
            format!("{:.6e}", s.mean_dc),
            s.n.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

#[derive(Serialize)]
struct Line<'a> {
    section: &'static str,
    #[serde(flatten)]
    record: &'a EvalRecord,
}

/// Every per-example record, grid cells first, then transfer records.
pub fn records_jsonl(result: &GridResult) -> Result<String> {
    let mut out = String::new();
    let grid = result.cells.iter().flat_map(|c| c.records.iter().map(|r| ("grid", r)));
    let transfer = result.transfer.iter().flat_map(|t| t.records.iter().map(|r| ("transfer", r)));
    for (section, record) in grid.chain(transfer) {
        out.push_str(&serde_json::to_string(&Line { section, record })?);
        out.push('\n');
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = width[c]) } else { format!("{s:>w$}", w = width[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Leaderboard: one row per (defense, victim) with accuracy per column.
/// Defenses are ordered by average accuracy over attack columns, attacks
/// by average ASR over all rows, both descending; ties keep config order.
pub fn leaderboard_table(result: &GridResult) -> String {
    let cfg = &result.provenance.config;
    let acc = |d: &str, v: &str, a: &str| result.cell(d, v, a).map_or(f64::NAN, |c| c.summary.acc);
    let asr = |d: &str, v: &str, a: &str| result.cell(d, v, a).map_or(f64::NAN, |c| c.summary.asr);
    let mut attacks: Vec<(&str, f64)> = cfg
        .attacks
        .iter()
        .map(|a| {
            let all = cfg
                .defenses
                .iter()
                .flat_map(|d| cfg.victims.iter().map(move |v| (d, v)))
                .map(|(d, v)| asr(&d.name, &v.id, &a.name));
            (a.name.as_str(), mean(all))
        })
        .collect();
    attacks.sort_by(|x, y| y.1.total_cmp(&x.1));
    let row_avg = |d: &str, v: &str| mean(attacks.iter().map(|(a, _)| acc(d, v, a)));
    let mut defenses: Vec<(&str, f64)> = cfg
        .defenses
        .iter()
        .map(|d| (d.name.as_str(), mean(cfg.victims.iter().map(|v| row_avg(&d.name, &v.id)))))
        .collect();
    defenses.sort_by(|x, y| y.1.total_cmp(&x.1));

    let mut rows = vec![{
        let mut h = vec!["defense".to_string(), "victim".to_string(), "Clean".to_string()];
        h.extend(attacks.iter().map(|(a, _)| a.to_string()));
        h.push("Avg.ACC".into());
        h
    }];
    for (d, d_avg) in &defenses {
        for (i, v) in cfg.victims.iter().enumerate() {
            let mut r = vec![if i == 0 { d.to_string() } else { String::new() }, v.id.clone()];
            r.push(pct(acc(d, &v.id, CLEAN)));
            r.extend(attacks.iter().map(|(a, _)| pct(acc(d, &v.id, a))));
            r.push(pct(row_avg(d, &v.id)));
            rows.push(r);
        }
        if cfg.victims.len() > 1 {
            let mut r = vec![String::new(), "avg".to_string()];
            r.push(pct(mean(cfg.victims.iter().map(|v| acc(d, &v.id, CLEAN)))));
            r.extend(attacks.iter().map(|(a, _)| pct(mean(cfg.victims.iter().map(|v| acc(d, &v.id, a))))));
            r.push(pct(*d_avg));
            rows.push(r);
        }
    }
    let mut r = vec!["Avg.ASR".to_string(), String::new(), "-".to_string()];
    r.extend(attacks.iter().map(|(_, s)| pct(*s)));
    rows.push(r);

    let mut out = String::from("Accuracy (%) by defense and victim; attacks ordered by Avg.ASR\n\n");
    out.push_str(&render(&rows));
    for t in &result.transfer {
        let _ = write!(out, "\nTransfer ASR (%) of {}: rows surrogate, columns victim\n\n", t.attack);
        let mut rows = vec![std::iter::once(String::new()).chain(t.victims.iter().cloned()).collect::<Vec<_>>()];
        for (s, row) in t.surrogates.iter().zip(&t.matrix) {
            let mut r = vec![s.clone()];
            r.extend(row.iter().map(|v| pct(*v)));
            rows.push(r);
        }
        out.push_str(&render(&rows));
    }
    out
}

/// Writes each requested format to `dir` and returns the paths written.
pub fn emit_reports(result: &GridResult, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let path = dir.join(f.file_name());
        fs::write(&path, f.render(result)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
