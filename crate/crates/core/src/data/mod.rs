//! Basin and time-series data model, CSV ingestion and the normalization
//! pipeline that turns raw series into model-ready tensors.

mod ingest;
mod normalize;
mod transform;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use ingest::{ingest_dataset, write_dataset, IngestIssue, IngestReport};
pub use normalize::{apply_normalization, fit_normalization, BasinTensors, NormalizationSpec};
pub use transform::{
    degaussianize, discharge_to_depth, depth_to_discharge, gaussianize, to_runoff_ratio,
};

/// Forcing channels in their fixed column order.
pub const FORCING_NAMES: [&str; 7] = ["dayl", "prcp", "srad", "swe", "tmax", "tmin", "vp"];
pub const N_FORCING: usize = FORCING_NAMES.len();
pub const PRCP: usize = 1;
pub const SWE: usize = 3;

/// Static attributes in canonical column order.
pub const ATTRIBUTE_NAMES: [&str; 30] = [
    "DRAIN_SQKM",
    "ELEV_MEAN_M_BASIN",
    "SLOPE_PCT",
    "STREAMS_KM_SQ_KM",
    "DEVNLCD06",
    "FORESTNLCD06",
    "PLANTNLCD06",
    "WATERNLCD06",
    "SNOWICENLCD06",
    "BARRENNLCD06",
    "SHRUBNLCD06",
    "GRASSNLCD06",
    "WOODYWETNLCD06",
    "EMERGWETNLCD06",
    "AWCAVE",
    "PERMAVE",
    "BDAVE",
    "ROCKDEPAVE",
    "GEOL_REEDBUSH_DOM",
    "GEOL_REEDBUSH_DOM_PCT",
    "NDAMS_2009",
    "STOR_NOR_2009",
    "RAW_DIS_NEAREST_MAJ_DAM",
    "CANALS_PCT",
    "RAW_DIS_NEAREST_CANAL",
    "FRESHW_WITHDRAWAL",
    "POWER_SUM_MW",
    "PDEN_2000_BLOCK",
    "ROADS_KM_SQ_KM",
    "IMPNLCD06",
];
pub const N_ATTRIBUTES: usize = ATTRIBUTE_NAMES.len();
/// Width of one raw input row: forcings followed by static attributes.
pub const N_INPUTS: usize = N_FORCING + N_ATTRIBUTES;

pub const ATTR_NDAMS: usize = 20;
/// Dam storage attribute, megaliters per km².
pub const ATTR_STOR_NOR: usize = 21;

/// Letters allowed in a dam purpose code.
pub const PURPOSE_ALPHABET: &str = "CFHIOPRSTXDN";

/// One reservoir joined to a basin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamRecord {
    /// Normal storage in m³.
    pub normal_storage: f64,
    /// Purpose letters ordered by importance, e.g. `"SC"`.
    pub purpose_code: String,
}

impl DamRecord {
    pub fn new(normal_storage: f64, purpose_code: impl Into<String>) -> Result<Self> {
        let purpose_code = purpose_code.into();
        if !(normal_storage >= 0.0) || !normal_storage.is_finite() {
            return Err(Error::InvalidInput(format!(
                "normal storage must be a finite value >= 0, got {normal_storage}"
            )));
        }
        if purpose_code.is_empty() {
            return Err(Error::InvalidInput("empty purpose code".into()));
        }
        if let Some(c) = purpose_code.chars().find(|c| !PURPOSE_ALPHABET.contains(*c)) {
            return Err(Error::InvalidInput(format!(
                "purpose letter {c:?} not in {PURPOSE_ALPHABET}"
            )));
        }
        Ok(Self {
            normal_storage,
            purpose_code,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinRecord {
    pub gauge_id: String,
    /// Drainage area, km².
    pub area: f64,
    /// Mean annual runoff, m³ per km² per year.
    pub mean_annual_runoff: f64,
    /// LEVEL-II ecoregion code.
    pub ecoregion: String,
    /// Static attributes in [`ATTRIBUTE_NAMES`] order.
    pub attributes: Vec<f64>,
    pub dams: Vec<DamRecord>,
    pub wr_report_remarks: String,
    pub screening_comments: String,
}

impl BasinRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gauge_id.is_empty() {
            return Err(Error::InvalidInput("empty gauge_id".into()));
        }
        if !(self.area > 0.0) || !self.area.is_finite() {
            return Err(Error::InvalidInput(format!(
                "basin {}: area must be > 0, got {}",
                self.gauge_id, self.area
            )));
        }
        if !(self.mean_annual_runoff >= 0.0) || !self.mean_annual_runoff.is_finite() {
            return Err(Error::InvalidInput(format!(
                "basin {}: mean annual runoff must be >= 0, got {}",
                self.gauge_id, self.mean_annual_runoff
            )));
        }
        if self.attributes.len() != N_ATTRIBUTES {
            return Err(Error::InvalidInput(format!(
                "basin {}: expected {N_ATTRIBUTES} attributes, got {}",
                self.gauge_id,
                self.attributes.len()
            )));
        }
        Ok(())
    }

    pub fn remarks(&self) -> [&str; 2] {
        [&self.wr_report_remarks, &self.screening_comments]
    }
}

/// An inclusive range of calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidInput(format!(
                "date range end {end} precedes start {start}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Daily forcings, one row per day from `start_date` with no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingSeries {
    pub start_date: NaiveDate,
    /// Row-major `T x 7` matrix in [`FORCING_NAMES`] order.
    pub values: Vec<f64>,
}

impl ForcingSeries {
    pub fn new(start_date: NaiveDate, values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(N_FORCING) {
            return Err(Error::Shape(format!(
                "forcing buffer of {} values is not a multiple of {N_FORCING}",
                values.len()
            )));
        }
        for (t, row) in values.chunks_exact(N_FORCING).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite forcing on day {t}")));
            }
            if row[PRCP] < 0.0 || row[SWE] < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "negative prcp or swe on day {t}"
                )));
            }
        }
        Ok(Self { start_date, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / N_FORCING
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * N_FORCING..(t + 1) * N_FORCING]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.chunks_exact(N_FORCING).map(move |r| r[c])
    }

    pub fn coverage(&self) -> Option<DateRange> {
        coverage(self.start_date, self.len())
    }
}

/// Daily mean discharge in m³/s; `None` marks a missing day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSeries {
    pub start_date: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl FlowSeries {
    pub fn new(start_date: NaiveDate, values: Vec<Option<f64>>) -> Result<Self> {
        for (t, v) in values.iter().enumerate() {
            if let Some(v) = v {
                if !(*v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "discharge on day {t} must be a finite value >= 0, got {v}"
                    )));
                }
            }
        }
        Ok(Self { start_date, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coverage(&self) -> Option<DateRange> {
        coverage(self.start_date, self.len())
    }
}

fn coverage(start: NaiveDate, len: usize) -> Option<DateRange> {
    if len == 0 {
        return None;
    }
    let end = start.checked_add_days(Days::new(len as u64 - 1))?;
    Some(DateRange { start, end })
}

/// Index range `[a, b)` of `window` inside a series starting at `start` with `len` rows.
pub fn window_indices(start: NaiveDate, len: usize, window: &DateRange) -> Result<(usize, usize)> {
    let cov = coverage(start, len)
        .ok_or_else(|| Error::InvalidInput("empty series".into()))?;
    if window.start < cov.start || window.end > cov.end {
        return Err(Error::InvalidInput(format!(
            "window {}..{} outside series coverage {}..{}",
            window.start, window.end, cov.start, cov.end
        )));
    }
    let a = (window.start - start).num_days() as usize;
    Ok((a, a + window.len_days()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basin {
    pub record: BasinRecord,
    pub forcing: ForcingSeries,
    pub flow: FlowSeries,
}

impl Basin {
    pub fn gauge_id(&self) -> &str {
        &self.record.gauge_id
    }
}

/// Immutable collection of validated basins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub basins: Vec<Basin>,
}

impl Dataset {
    pub fn new(basins: Vec<Basin>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for b in &basins {
            b.record.validate()?;
            if !seen.insert(b.gauge_id().to_string()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate gauge_id {}",
                    b.gauge_id()
                )));
            }
        }
        Ok(Self { basins })
    }

    pub fn len(&self) -> usize {
        self.basins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basins.is_empty()
    }

    pub fn get(&self, gauge_id: &str) -> Option<&Basin> {
        self.basins.iter().find(|b| b.gauge_id() == gauge_id)
    }

    pub fn gauge_ids(&self) -> Vec<String> {
        self.basins.iter().map(|b| b.gauge_id().to_string()).collect()
    }

    /// Basins in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Basin>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::UnknownBasin(id.clone())))
            .collect()
    }

    /// SHA-256 over the full content, basins sorted by id.
    pub fn content_hash(&self) -> String {
        let mut basins: Vec<&Basin> = self.basins.iter().collect();
        basins.sort_by(|a, b| a.gauge_id().cmp(b.gauge_id()));
        let mut h = Sha256::new();
        for b in basins {
            let bytes = serde_json::to_vec(b).expect("basin serializes");
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }
}
