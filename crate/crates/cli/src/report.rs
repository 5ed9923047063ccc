//! Tables behind the CDF and box plots of a run, plus the per-basin join of
//! attribution and metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use damflow::io::{fmt_f64, write_atomic, write_csv};
use damflow::metrics::{summarize, MetricValue, METRIC_NAMES};
use serde::Deserialize;

use crate::{Classify, Failure, Outcome};

#[derive(Debug, Clone, Deserialize)]
struct StratRow {
    gauge_id: String,
    dor: String,
    category: String,
    major_purposes: String,
    diversion: String,
    excluded_reason: String,
}

type MetricRows = Vec<(String, Vec<MetricValue>)>;

/// `metrics.csv` is reported as set `all`, `metrics_<set>.csv` as `<set>`.
fn metric_files(run: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let entries = std::fs::read_dir(run)
        .with_context(|| format!("missing run directory {}", run.display()))
        .data()?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e.data()?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let set = match name.strip_suffix(".csv") {
            Some("metrics") => "all".to_string(),
            Some(s) => match s.strip_prefix("metrics_") {
                Some(set) => set.to_string(),
                None => continue,
            },
            None => continue,
        };
        out.insert(set, path);
    }
    if out.is_empty() {
        return Err(Failure::Data(anyhow!("missing metrics.csv or metrics_<set>.csv in {}", run.display())));
    }
    Ok(out)
}

fn read_metrics(path: &Path) -> Result<MetricRows, Failure> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .data()?;
    let headers = rdr.headers().data()?.clone();
    let expected: Vec<&str> = std::iter::once("gauge_id").chain(METRIC_NAMES).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Failure::Data(anyhow!("{}: expected columns {}", path.display(), expected.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("malformed row in {}", path.display())).data()?;
        let values = (1..=METRIC_NAMES.len())
            .map(|i| MetricValue::parse(&rec[i]))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: bad value for {}", path.display(), &rec[0]))
            .data()?;
        rows.push((rec[0].to_string(), values));
    }
    Ok(rows)
}

fn read_stratification(path: &Path) -> Result<BTreeMap<String, StratRow>, Failure> {
    if !path.exists() {
        return Err(Failure::Data(anyhow!(
            "missing stratification table {}; run `damflow stratify` first",
            path.display()
        )));
    }
    let mut rdr = csv::Reader::from_path(path).data()?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: StratRow = row.with_context(|| format!("malformed row in {}", path.display())).data()?;
        out.insert(row.gauge_id.clone(), row);
    }
    Ok(out)
}

fn write_cdf(path: &Path, values: &[MetricValue]) -> Outcome {
    let s = summarize(values);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "cumulative_fraction"]).data()?;
    for (v, p) in &s.cdf {
        w.write_record([fmt_f64(*v), fmt_f64(*p)]).data()?;
    }
    let body = w.into_inner().map_err(|e| anyhow!("{e}")).data()?;
    let mut bytes = format!(
        "# excluded_count={} (infinite {}, undefined {})\n",
        s.n_infinite + s.n_undefined,
        s.n_infinite,
        s.n_undefined
    )
    .into_bytes();
    bytes.extend(body);
    write_atomic(path, &bytes).data()
}

fn five_number_row(label: Vec<String>, values: &[MetricValue]) -> Vec<String> {
    let s = summarize(values);
    let mut row = label;
    match s.five_number {
        Some(f) => row.extend(f.iter().map(|v| fmt_f64(*v))),
        None => row.extend(std::iter::repeat_n("nan".to_string(), 5)),
    }
    row.extend([s.n_finite.to_string(), (s.n_infinite + s.n_undefined).to_string()]);
    row
}

const FIVE_NUMBER: [&str; 7] = ["min", "q1", "median", "q3", "max", "n_finite", "n_excluded"];

/// Writes `<run>/report/<set>/` for every metrics file in `run`.
pub fn run(run: &Path, strat_path: &Path) -> Outcome {
    let files = metric_files(run)?;
    let strat = read_stratification(strat_path)?;
    for (set, path) in &files {
        let rows = read_metrics(path)?;
        let dir = run.join("report").join(set);
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<MetricValue> = rows.iter().map(|(_, v)| v[m]).collect();
            write_cdf(&dir.join(format!("cdf_{name}.csv")), &values)?;
            let header: Vec<&str> = std::iter::once("metric").chain(FIVE_NUMBER).collect();
            write_csv(
                dir.join(format!("boxplot_{name}.csv")),
                &header,
                [five_number_row(vec![name.to_string()], &values)],
            )
            .data()?;

            // purpose-conditioned groups leave out excluded and unattributed basins
            let mut groups: BTreeMap<(String, String, String), Vec<MetricValue>> = BTreeMap::new();
            for (id, v) in &rows {
                let Some(s) = strat.get(id) else { continue };
                if !s.excluded_reason.is_empty() || s.major_purposes.is_empty() {
                    continue;
                }
                groups
                    .entry((s.category.clone(), s.major_purposes.clone(), s.diversion.clone()))
                    .or_default()
                    .push(v[m]);
            }
            let header: Vec<&str> = ["category", "major_purposes", "diversion"].into_iter().chain(FIVE_NUMBER).collect();
            write_csv(
                dir.join(format!("groups_{name}.csv")),
                &header,
                groups.iter().map(|((c, p, d), v)| five_number_row(vec![c.clone(), p.clone(), d.clone()], v)),
            )
            .data()?;
        }

        let mut header = vec!["gauge_id", "dor", "category", "major_purposes", "diversion", "excluded_reason"];
        header.extend(METRIC_NAMES);
        let mut missing = 0;
        let table = rows.iter().map(|(id, v)| {
            let mut r = vec![id.clone()];
            match strat.get(id) {
                Some(s) => r.extend([
                    s.dor.clone(),
                    s.category.clone(),
                    s.major_purposes.clone(),
                    s.diversion.clone(),
                    s.excluded_reason.clone(),
                ]),
                None => {
                    missing += 1;
                    r.extend(std::iter::repeat_n(String::new(), 5));
                }
            }
            r.extend(v.iter().map(|m| m.to_csv()));
            r
        });
        write_csv(dir.join("basins.csv"), &header, table.collect::<Vec<_>>()).data()?;
        if missing > 0 {
            log::warn!("{set}: {missing} basins absent from {}", strat_path.display());
        }
        println!("{set}: {} basins -> {}", rows.len(), dir.display());
    }
    Ok(())
}
