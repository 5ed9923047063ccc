use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use csv::StringRecord;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    Basin, BasinRecord, DamRecord, Dataset, FlowSeries, ForcingSeries, ATTRIBUTE_NAMES,
    FORCING_NAMES, N_FORCING,
};
use crate::error::{Error, Result};

const ML_TO_M3: f64 = 1_000.0;

/// A problem found while ingesting; each one rejects the basin it names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestIssue {
    pub gauge_id: Option<String>,
    pub file: PathBuf,
    pub line: Option<u64>,
    pub message: String,
}

impl std::fmt::Display for IngestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(id) = &self.gauge_id {
            write!(f, "[{id}] ")?;
        }
        write!(f, "{}", self.file.display())?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub issues: Vec<IngestIssue>,
}

impl IngestReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

impl From<Error> for IngestIssue {
    fn from(e: Error) -> Self {
        match e {
            Error::Row {
                file,
                line,
                message,
            } => IngestIssue {
                gauge_id: None,
                file,
                line: Some(line),
                message,
            },
            Error::File { file, message } => IngestIssue {
                gauge_id: None,
                file,
                line: None,
                message,
            },
            Error::Io { path, source } => IngestIssue {
                gauge_id: None,
                file: path,
                line: None,
                message: source.to_string(),
            },
            other => IngestIssue {
                gauge_id: None,
                file: PathBuf::new(),
                line: None,
                message: other.to_string(),
            },
        }
    }
}

/// Reads `basins.csv` plus the per-gauge `forcing/`, `flow/` and optional
/// `dams/` files under `root`.
///
/// Only a missing or unreadable `basins.csv` is an error. Any other problem
/// rejects the affected basin and is listed in the returned report.
pub fn ingest_dataset(root: impl AsRef<Path>) -> Result<(Dataset, IngestReport)> {
    let root = root.as_ref();
    let basins_path = root.join("basins.csv");
    let (rows, mut issues) = read_basins_file(&basins_path)?;

    let results: Vec<(String, std::result::Result<Basin, IngestIssue>)> = rows
        .into_par_iter()
        .map(|rec| {
            let id = rec.gauge_id.clone();
            let res = load_series(root, rec).map_err(|e| {
                let mut issue = IngestIssue::from(e);
                issue.gauge_id = Some(id.clone());
                issue
            });
            (id, res)
        })
        .collect();

    let mut report = IngestReport::default();
    for issue in &issues {
        if let Some(id) = &issue.gauge_id {
            report.rejected.push(id.clone());
        }
    }
    let mut basins = Vec::new();
    for (id, res) in results {
        match res {
            Ok(b) => {
                report.accepted.push(id);
                basins.push(b);
            }
            Err(issue) => {
                report.rejected.push(id);
                issues.push(issue);
            }
        }
    }
    report.issues = issues;
    for issue in &report.issues {
        log::warn!("rejected: {issue}");
    }
    Ok((Dataset { basins }, report))
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header_index(path: &Path, headers: &StringRecord, names: &[&str]) -> Result<Vec<usize>> {
    let lookup: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    names
        .iter()
        .map(|n| {
            lookup.get(n).copied().ok_or_else(|| Error::File {
                file: path.to_path_buf(),
                message: format!("missing column {n:?}"),
            })
        })
        .collect()
}

fn line_of(rec: &StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn row_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Row {
        file: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_f64(path: &Path, rec: &StringRecord, idx: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("");
    let v: f64 = raw
        .parse()
        .map_err(|_| row_err(path, line_of(rec), format!("column {name}: cannot parse {raw:?}")))?;
    if !v.is_finite() {
        return Err(row_err(path, line_of(rec), format!("column {name}: non-finite value")));
    }
    Ok(v)
}

fn parse_date(path: &Path, rec: &StringRecord, idx: usize) -> Result<NaiveDate> {
    let raw = rec.get(idx).unwrap_or("");
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map_err(|_| row_err(path, line_of(rec), format!("cannot parse date {raw:?}")))
}

fn read_basins_file(path: &Path) -> Result<(Vec<BasinRecord>, Vec<IngestIssue>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let fixed = header_index(
        path,
        &headers,
        &[
            "gauge_id",
            "area_km2",
            "mean_annual_runoff_m3_per_km2",
            "ecoregion",
            "wr_report_remarks",
            "screening_comments",
        ],
    )?;
    let attr_idx = header_index(path, &headers, &ATTRIBUTE_NAMES)?;

    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(IngestIssue::from(Error::from(e)));
                continue;
            }
        };
        let gauge_id = rec.get(fixed[0]).unwrap_or("").to_string();
        let parsed = (|| -> Result<BasinRecord> {
            if gauge_id.is_empty() {
                return Err(row_err(path, line_of(&rec), "empty gauge_id"));
            }
            if !seen.insert(gauge_id.clone()) {
                return Err(row_err(path, line_of(&rec), format!("duplicate gauge_id {gauge_id}")));
            }
            let attributes = attr_idx
                .iter()
                .zip(ATTRIBUTE_NAMES)
                .map(|(&i, n)| parse_f64(path, &rec, i, n))
                .collect::<Result<Vec<_>>>()?;
            let record = BasinRecord {
                gauge_id: gauge_id.clone(),
                area: parse_f64(path, &rec, fixed[1], "area_km2")?,
                mean_annual_runoff: parse_f64(path, &rec, fixed[2], "mean_annual_runoff_m3_per_km2")?,
                ecoregion: rec.get(fixed[3]).unwrap_or("").to_string(),
                attributes,
                dams: Vec::new(),
                wr_report_remarks: rec.get(fixed[4]).unwrap_or("").to_string(),
                screening_comments: rec.get(fixed[5]).unwrap_or("").to_string(),
            };
            record
                .validate()
                .map_err(|e| row_err(path, line_of(&rec), e.to_string()))?;
            Ok(record)
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(e) => {
                let mut issue = IngestIssue::from(e);
                if !gauge_id.is_empty() {
                    issue.gauge_id = Some(gauge_id);
                }
                issues.push(issue);
            }
        }
    }
    Ok((records, issues))
}

fn load_series(root: &Path, mut record: BasinRecord) -> Result<Basin> {
    let id = record.gauge_id.clone();
    let dams_path = root.join("dams").join(format!("{id}.csv"));
    if dams_path.exists() {
        record.dams = read_dams(&dams_path)?;
    }
    let forcing = read_forcing(&root.join("forcing").join(format!("{id}.csv")))?;
    let flow_path = root.join("flow").join(format!("{id}.csv"));
    let flow = read_flow(&flow_path)?;
    if forcing.coverage() != flow.coverage() {
        let fmt = |c: Option<super::DateRange>| {
            c.map(|c| format!("{}..{}", c.start, c.end))
                .unwrap_or_else(|| "empty".into())
        };
        return Err(Error::File {
            file: flow_path,
            message: format!(
                "flow coverage {} differs from forcing coverage {}",
                fmt(flow.coverage()),
                fmt(forcing.coverage())
            ),
        });
    }
    Ok(Basin {
        record,
        forcing,
        flow,
    })
}

fn read_dams(path: &Path) -> Result<Vec<DamRecord>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let idx = header_index(path, &headers, &["normal_storage_megaliters", "purpose_code"])?;
    let mut dams = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ml = parse_f64(path, &rec, idx[0], "normal_storage_megaliters")?;
        let code = rec.get(idx[1]).unwrap_or("").to_string();
        let dam = DamRecord::new(ml * ML_TO_M3, code)
            .map_err(|e| row_err(path, line_of(&rec), e.to_string()))?;
        dams.push(dam);
    }
    Ok(dams)
}

/// Checks that consecutive rows advance by exactly one day.
struct DayCursor {
    start: Option<NaiveDate>,
    expected: Option<NaiveDate>,
}

impl DayCursor {
    fn new() -> Self {
        Self {
            start: None,
            expected: None,
        }
    }

    fn advance(&mut self, path: &Path, rec: &StringRecord, date: NaiveDate) -> Result<()> {
        if let Some(exp) = self.expected {
            if date != exp {
                return Err(row_err(
                    path,
                    line_of(rec),
                    format!("gap or disorder: expected {exp}, found {date}"),
                ));
            }
        } else {
            self.start = Some(date);
        }
        self.expected = date.checked_add_days(Days::new(1));
        Ok(())
    }

    fn start(&self, path: &Path) -> Result<NaiveDate> {
        self.start.ok_or_else(|| Error::File {
            file: path.to_path_buf(),
            message: "no data rows".into(),
        })
    }
}

fn read_forcing(path: &Path) -> Result<ForcingSeries> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let date_idx = header_index(path, &headers, &["date"])?[0];
    let idx = header_index(path, &headers, &FORCING_NAMES)?;
    let mut cursor = DayCursor::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = parse_date(path, &rec, date_idx)?;
        cursor.advance(path, &rec, date)?;
        for (&i, name) in idx.iter().zip(FORCING_NAMES) {
            let v = parse_f64(path, &rec, i, name)?;
            if (name == "prcp" || name == "swe") && v < 0.0 {
                return Err(row_err(path, line_of(&rec), format!("negative {name} {v}")));
            }
            values.push(v);
        }
    }
    debug_assert_eq!(values.len() % N_FORCING, 0);
    ForcingSeries::new(cursor.start(path)?, values)
}

fn read_flow(path: &Path) -> Result<FlowSeries> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let idx = header_index(path, &headers, &["date", "discharge_m3s"])?;
    let mut cursor = DayCursor::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = parse_date(path, &rec, idx[0])?;
        cursor.advance(path, &rec, date)?;
        let raw = rec.get(idx[1]).unwrap_or("");
        if raw.is_empty() {
            values.push(None);
            continue;
        }
        let q = parse_f64(path, &rec, idx[1], "discharge_m3s")?;
        if q < 0.0 {
            return Err(row_err(path, line_of(&rec), format!("negative discharge {q}")));
        }
        values.push(Some(q));
    }
    FlowSeries::new(cursor.start(path)?, values)
}

/// Writes `dataset` in the layout [`ingest_dataset`] reads.
pub fn write_dataset(root: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let root = root.as_ref();
    for sub in ["forcing", "flow", "dams"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut header: Vec<String> = ["gauge_id", "area_km2", "mean_annual_runoff_m3_per_km2", "ecoregion"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(ATTRIBUTE_NAMES.iter().map(|s| s.to_string()));
    header.push("wr_report_remarks".into());
    header.push("screening_comments".into());

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for b in &dataset.basins {
        let r = &b.record;
        let mut row = vec![
            r.gauge_id.clone(),
            r.area.to_string(),
            r.mean_annual_runoff.to_string(),
            r.ecoregion.clone(),
        ];
        row.extend(r.attributes.iter().map(|v| v.to_string()));
        row.push(r.wr_report_remarks.clone());
        row.push(r.screening_comments.clone());
        w.write_record(&row)?;
    }
    crate::io::write_atomic(root.join("basins.csv"), &csv_bytes(w)?)?;

    for b in &dataset.basins {
        let id = b.gauge_id();
        if !b.record.dams.is_empty() {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["normal_storage_megaliters", "purpose_code"])?;
            for d in &b.record.dams {
                w.write_record([(d.normal_storage / ML_TO_M3).to_string(), d.purpose_code.clone()])?;
            }
            crate::io::write_atomic(root.join("dams").join(format!("{id}.csv")), &csv_bytes(w)?)?;
        }

        let mut w = csv::Writer::from_writer(Vec::new());
        let mut fh = vec!["date"];
        fh.extend(FORCING_NAMES);
        w.write_record(&fh)?;
        let mut date = b.forcing.start_date;
        for t in 0..b.forcing.len() {
            let mut row = vec![date.to_string()];
            row.extend(b.forcing.row(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
            date = date + Days::new(1);
        }
        crate::io::write_atomic(root.join("forcing").join(format!("{id}.csv")), &csv_bytes(w)?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["date", "discharge_m3s"])?;
        let mut date = b.flow.start_date;
        for v in &b.flow.values {
            let cell = v.map(|q| q.to_string()).unwrap_or_default();
            w.write_record([date.to_string(), cell])?;
            date = date + Days::new(1);
        }
        crate::io::write_atomic(root.join("flow").join(format!("{id}.csv")), &csv_bytes(w)?)?;
    }
    Ok(())
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}
