//! Line-delimited result records and the text tables rendered from them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::BoxStats;
use super::replicates::MeanStd;
use super::{EvalError, Result};

pub const TASK_ZEROSHOT: &str = "zeroshot";
pub const TASK_PROBE: &str = "probe";
pub const TASK_MIL: &str = "mil";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl ResultRecord {
    pub fn new(task: &str, dataset: &str, metric: &str, value: f64) -> Self {
        Self {
            task: task.into(),
            dataset: dataset.into(),
            seed: None,
            repeat: None,
            shot: None,
            metric: metric.into(),
            value,
        }
    }
}

/// First line of a results file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub schema_version: String,
    pub config_digest: String,
}

impl ResultsHeader {
    pub fn new(config_digest: &str) -> Self {
        Self { schema_version: crate::corpus::SCHEMA_VERSION.into(), config_digest: config_digest.into() }
    }
}

pub fn write_results(records: &[ResultRecord], header: &ResultsHeader, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(header).expect("header serializes"))?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("records serialize"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<(ResultsHeader, Vec<ResultRecord>)> {
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| EvalError::Parse { line: i + 1, msg: e.to_string() };
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(bad)?);
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(bad)?);
    }
    let header = header.ok_or(EvalError::Parse { line: 1, msg: "missing header".into() })?;
    Ok((header, out))
}

/// Left-aligned first column, right-aligned rest.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = vec![line(headers.to_vec())];
    out.push(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        out.push(line(row.iter().map(String::as_str).collect()));
    }
    out.join("\n") + "\n"
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn of_task<'a>(records: &'a [ResultRecord], task: &'a str) -> impl Iterator<Item = &'a ResultRecord> {
    records.iter().filter(move |r| r.task == task)
}

/// One accuracy row per dataset; several runs of a dataset are averaged.
pub fn render_zeroshot_table(records: &[ResultRecord]) -> String {
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in of_task(records, TASK_ZEROSHOT).filter(|r| r.metric == "accuracy") {
        acc.entry(&r.dataset).or_default().push(r.value);
    }
    let rows: Vec<Vec<String>> = acc
        .iter()
        .map(|(d, v)| vec![d.to_string(), pct(v.iter().sum::<f64>() / v.len() as f64)])
        .collect();
    render_table(&["Dataset", "Accuracy (%)"], &rows)
}

/// Box-plot summary per dataset and shot.
pub fn render_probe_table(records: &[ResultRecord]) -> String {
    let mut acc: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in of_task(records, TASK_PROBE).filter(|r| r.metric == "accuracy") {
        acc.entry((&r.dataset, r.shot.unwrap_or(0))).or_default().push(r.value);
    }
    let rows: Vec<Vec<String>> = acc
        .iter()
        .map(|((d, shot), v)| {
            let s = BoxStats::of(v);
            vec![
                d.to_string(),
                shot.to_string(),
                v.len().to_string(),
                pct(s.min),
                pct(s.q1),
                pct(s.median),
                pct(s.q3),
                pct(s.max),
            ]
        })
        .collect();
    render_table(&["Dataset", "Shots", "Runs", "Min", "Q1", "Median", "Q3", "Max"], &rows)
}

/// Mean ± sample std of F1 and AUC per dataset, in percent.
pub fn render_mil_table(records: &[ResultRecord]) -> String {
    let mut acc: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in of_task(records, TASK_MIL) {
        acc.entry(&r.dataset).or_default().entry(&r.metric).or_default().push(r.value);
    }
    let cell = |m: Option<&Vec<f64>>| match m {
        Some(v) if !v.is_empty() => {
            let s = MeanStd::of(v);
            format!("{}±{}", pct(s.mean), pct(s.std))
        }
        _ => "-".to_string(),
    };
    let rows: Vec<Vec<String>> = acc
        .iter()
        .map(|(d, m)| vec![d.to_string(), cell(m.get("f1")), cell(m.get("auc"))])
        .collect();
    render_table(&["Dataset", "F1-score", "AUC"], &rows)
}

/// Every table for which `records` holds data.
pub fn render_report(records: &[ResultRecord]) -> String {
    let mut parts = Vec::new();
    for (task, title, render) in [
        (TASK_ZEROSHOT, "Zero-shot classification", render_zeroshot_table as fn(&[ResultRecord]) -> String),
        (TASK_PROBE, "Linear probe", render_probe_table),
        (TASK_MIL, "Slide classification (ABMIL)", render_mil_table),
    ] {
        if of_task(records, task).next().is_some() {
            parts.push(format!("{title}\n\n{}", render(records)));
        }
    }
    parts.join("\n")
}
