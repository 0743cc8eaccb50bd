//! Metric CSV, markdown tables and run metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricTriple};

pub const CSV_HEADER: &str = "scenario,method,class,n,dice,hd_um,msd_um";

fn num(v: f64) -> String {
    // shortest representation that parses back to the same f64
    format!("{v}")
}

/// Full-precision CSV; Dice is a fraction, distances are in microns, and
/// absent classes are written as `NA`.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let (d, h, m) = match r.metrics {
            Some(t) => (num(t.dice), num(t.hd_um), num(t.msd_um)),
            None => ("NA".into(), "NA".into(), "NA".into()),
        };
        out.push_str(&format!("{},{},{},{},{d},{h},{m}\n", r.scenario, r.method, r.class, r.n));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Report(format!("metric CSV must start with '{CSV_HEADER}'")));
    }
    let mut records = Vec::new();
    let mut position: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Report(format!("CSV line {}: {what}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let val = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(&format!("bad number '{s}'")))
            }
        };
        let metrics = match (val(f[4])?, val(f[5])?, val(f[6])?) {
            (Some(dice), Some(hd_um), Some(msd_um)) => Some(MetricTriple { dice, hd_um, msd_um }),
            (None, None, None) => None,
            _ => return Err(bad("metrics must be all present or all NA")),
        };
        let slot = position.entry((f[0].to_string(), f[1].to_string())).or_default();
        *slot += 1;
        records.push(MetricRecord {
            scenario: f[0].to_string(),
            method: f[1].to_string(),
            class: f[2].to_string(),
            class_index: *slot,
            n: f[3].parse().map_err(|_| bad("bad count"))?,
            metrics,
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Column {
    Dice,
    Hd,
    Msd,
}

impl Column {
    fn value(self, t: &MetricTriple) -> f64 {
        match self {
            Column::Dice => t.dice * 100.0,
            Column::Hd => t.hd_um,
            Column::Msd => t.msd_um,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Column::Dice => "Dice",
            Column::Hd => "HD",
            Column::Msd => "MSD",
        }
    }
}

/// Table cell text for one value: Dice in percent, distances in microns,
/// one decimal.
pub fn cell(record: &MetricRecord, column: &str) -> Option<String> {
    let col = match column {
        "Dice" => Column::Dice,
        "HD" => Column::Hd,
        "MSD" => Column::Msd,
        _ => return None,
    };
    record.metrics.map(|t| format!("{:.1}", col.value(&t)))
}

struct Table {
    classes: Vec<String>,
    rows: Vec<((String, String), BTreeMap<String, MetricRecord>)>,
}

fn tabulate(records: &[MetricRecord]) -> Table {
    let mut classes: Vec<(usize, String)> = Vec::new();
    let mut rows: Vec<((String, String), BTreeMap<String, MetricRecord>)> = Vec::new();
    for r in records {
        if !classes.iter().any(|(_, c)| *c == r.class) {
            classes.push((r.class_index, r.class.clone()));
        }
        let key = (r.scenario.clone(), r.method.clone());
        match rows.iter_mut().find(|(k, _)| *k == key) {
            Some((_, m)) => {
                m.insert(r.class.clone(), r.clone());
            }
            None => rows.push((key, BTreeMap::from([(r.class.clone(), r.clone())]))),
        }
    }
    classes.sort_by_key(|(i, _)| *i);
    Table {
        classes: classes.into_iter().map(|(_, c)| c).collect(),
        rows,
    }
}

/// Markdown table, one row per (scenario, method), one (Dice, HD, MSD)
/// triple per class plus the average. In every column the best rounded
/// value is bold (highest Dice, lowest HD/MSD); ties are all bold.
pub fn emit_table(records: &[MetricRecord]) -> String {
    let table = tabulate(records);
    let cols = [Column::Dice, Column::Hd, Column::Msd];
    let mut header = vec!["Scenario".to_string(), "Method".to_string()];
    for c in &table.classes {
        for col in cols {
            header.push(format!("{c} {}", col.label()));
        }
    }
    let mut cells: Vec<Vec<Option<String>>> = table
        .rows
        .iter()
        .map(|(_, m)| {
            table
                .classes
                .iter()
                .flat_map(|c| cols.map(|col| m.get(c).and_then(|r| cell(r, col.label()))))
                .collect()
        })
        .collect();
    for (j, col) in table.classes.iter().flat_map(|_| cols).enumerate() {
        let vals: Vec<Option<f64>> = cells.iter().map(|row| row[j].as_ref().map(|s| s.parse().unwrap())).collect();
        let present = vals.iter().flatten().copied();
        let best = if col == Column::Dice {
            present.fold(f64::NEG_INFINITY, f64::max)
        } else {
            present.fold(f64::INFINITY, f64::min)
        };
        for (row, v) in cells.iter_mut().zip(vals) {
            if v == Some(best) {
                row[j] = row[j].take().map(|s| format!("**{s}**"));
            }
        }
    }
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for (((scenario, method), _), row) in table.rows.iter().zip(cells) {
        let mut line = vec![scenario.clone(), method.clone()];
        line.extend(row.into_iter().map(|c| c.unwrap_or_else(|| "NA".into())));
        out.push_str(&format!("| {} |\n", line.join(" | ")));
    }
    out
}

fn table_rows(markdown: &str) -> Vec<Vec<String>> {
    markdown
        .lines()
        .filter(|l| l.starts_with('|') && !l.starts_with("|---"))
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().trim_matches('*').to_string())
                .collect()
        })
        .collect()
}

/// Checks that every table cell in `markdown` is the CSV value rounded as
/// [`emit_table`] rounds it, and that every CSV row appears in the table.
pub fn check_consistency(csv: &str, markdown: &str) -> Result<usize> {
    let records = parse_csv(csv)?;
    let mut by_key: BTreeMap<(String, String, String), MetricRecord> = BTreeMap::new();
    for r in &records {
        by_key.insert((r.scenario.clone(), r.method.clone(), r.class.clone()), r.clone());
    }
    let mut checked = 0;
    let mut seen = 0;
    let mut header: Option<Vec<String>> = None;
    for row in table_rows(markdown) {
        if row.first().map(String::as_str) == Some("Scenario") {
            header = Some(row);
            continue;
        }
        let header = header
            .as_ref()
            .ok_or_else(|| Error::Report("table row before header".into()))?;
        if row.len() != header.len() {
            return Err(Error::Report("table row width differs from header".into()));
        }
        let mut classes_in_row = std::collections::BTreeSet::new();
        for (h, v) in header.iter().zip(&row).skip(2) {
            let (class, col) = h
                .rsplit_once(' ')
                .ok_or_else(|| Error::Report(format!("bad column '{h}'")))?;
            let key = (row[0].clone(), row[1].clone(), class.to_string());
            let r = by_key.get(&key).ok_or_else(|| {
                Error::Report(format!("{} / {} / {class} is in the table but not the CSV", row[0], row[1]))
            })?;
            let expected = cell(r, col).unwrap_or_else(|| "NA".into());
            if *v != expected {
                return Err(Error::Report(format!(
                    "{} / {} / {h}: table has {v}, CSV rounds to {expected}",
                    row[0], row[1]
                )));
            }
            classes_in_row.insert(class.to_string());
            checked += 1;
        }
        seen += classes_in_row.len();
    }
    if seen != records.len() {
        return Err(Error::Report(format!(
            "table covers {seen} of {} CSV rows",
            records.len()
        )));
    }
    Ok(checked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub scenario: String,
    pub criterion: Option<String>,
    pub selected_epoch: Option<usize>,
    pub checkpoint: String,
    pub history: Option<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_path: Option<PathBuf>,
    pub config_sha256: String,
    pub method: String,
    pub scenarios: Vec<ScenarioMeta>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub csv_path: PathBuf,
    pub markdown_path: PathBuf,
    pub metadata_path: PathBuf,
    pub records: Vec<MetricRecord>,
    pub metadata: RunMetadata,
}

pub const CSV_FILE: &str = "metrics.csv";
pub const MARKDOWN_FILE: &str = "report.md";
pub const METADATA_FILE: &str = "metadata.json";

pub fn write_report(dir: &Path, records: Vec<MetricRecord>, metadata: RunMetadata) -> Result<Report> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(CSV_FILE);
    let markdown_path = dir.join(MARKDOWN_FILE);
    let metadata_path = dir.join(METADATA_FILE);
    fs::write(&csv_path, records_to_csv(&records)).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&markdown_path, markdown_report(&records)).map_err(|e| Error::io(&markdown_path, e))?;
    let json = serde_json::to_string_pretty(&metadata).map_err(|e| Error::Report(e.to_string()))?;
    fs::write(&metadata_path, json).map_err(|e| Error::io(&metadata_path, e))?;
    Ok(Report {
        csv_path,
        markdown_path,
        metadata_path,
        records,
        metadata,
    })
}

/// Full markdown document: one table per test population so that only
/// comparable rows compete for bold.
pub fn markdown_report(records: &[MetricRecord]) -> String {
    let mut groups: Vec<(String, Vec<MetricRecord>)> = Vec::new();
    for r in records {
        let title = if r.scenario == "M2M" {
            "Mouse test set"
        } else {
            "Human test set"
        };
        match groups.iter_mut().find(|(t, _)| t == title) {
            Some((_, g)) => g.push(r.clone()),
            None => groups.push((title.to_string(), vec![r.clone()])),
        }
    }
    let mut out = String::from(
        "# Segmentation results\n\nDice in %, HD and MSD in µm; bold marks the best value per column.\n",
    );
    for (title, g) in groups {
        out.push_str(&format!("\n## {title}\n\n{}", emit_table(&g)));
    }
    out
}
