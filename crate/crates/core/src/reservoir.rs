//! Reservoir attribution: degree of regulation, regime classes, major dam
//! purposes and diversion flags.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Basin, DamRecord, Dataset, ATTR_NDAMS, ATTR_STOR_NOR};
use crate::error::{Error, Result};

/// Cutoff between small and large regulation.
pub const DOR_CUTOFF: f64 = 0.02;

/// Tolerated relative disagreement between dam-list storage and `STOR_NOR_2009`.
const STOR_NOR_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DorCategory {
    Zero,
    Small,
    Large,
}

impl DorCategory {
    pub const ALL: [DorCategory; 3] = [DorCategory::Zero, DorCategory::Small, DorCategory::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            DorCategory::Zero => "zero",
            DorCategory::Small => "small",
            DorCategory::Large => "large",
        }
    }

    pub fn letter(self) -> char {
        match self {
            DorCategory::Zero => 'z',
            DorCategory::Small => 's',
            DorCategory::Large => 'l',
        }
    }

    pub fn classify(dor: f64) -> Self {
        if dor == 0.0 {
            DorCategory::Zero
        } else if dor < DOR_CUTOFF {
            DorCategory::Small
        } else {
            DorCategory::Large
        }
    }
}

impl std::str::FromStr for DorCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "z" => Ok(DorCategory::Zero),
            "small" | "s" => Ok(DorCategory::Small),
            "large" | "l" => Ok(DorCategory::Large),
            _ => Err(Error::InvalidInput(format!("unknown dor category {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DorResult {
    /// Summed normal storage per unit area, m³/km².
    pub nor: f64,
    pub dor: f64,
    pub category: DorCategory,
}

/// Degree of regulation `nor / q̄`.
pub fn compute_dor(nor: f64, mean_annual_runoff: f64) -> Result<DorResult> {
    if !(nor >= 0.0) || !nor.is_finite() {
        return Err(Error::Domain(format!("nor must be a finite value >= 0, got {nor}")));
    }
    if !(mean_annual_runoff >= 0.0) {
        return Err(Error::Domain(format!(
            "mean annual runoff must be >= 0, got {mean_annual_runoff}"
        )));
    }
    let dor = if nor == 0.0 {
        0.0
    } else if mean_annual_runoff > 0.0 {
        nor / mean_annual_runoff
    } else {
        return Err(Error::Domain(format!(
            "dor undefined: nor = {nor} with zero mean annual runoff"
        )));
    };
    Ok(DorResult {
        nor,
        dor,
        category: DorCategory::classify(dor),
    })
}

/// Normal storage per km² from the dam list, cross-checked against the
/// `STOR_NOR_2009` attribute (megaliters per km²) when that is present.
pub fn basin_nor(basin: &Basin) -> f64 {
    let total: f64 = basin.record.dams.iter().map(|d| d.normal_storage).sum();
    let nor = total / basin.record.area;
    let stor_nor = basin.record.attributes[ATTR_STOR_NOR] * 1000.0;
    if stor_nor > 0.0 && nor > 0.0 && ((nor - stor_nor) / stor_nor).abs() > STOR_NOR_TOLERANCE {
        log::warn!(
            "basin {}: dam-list storage {nor:.6e} m³/km² differs from STOR_NOR_2009 {stor_nor:.6e} m³/km² by more than 1%",
            basin.gauge_id()
        );
    }
    nor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NoDams,
    DatasetMismatch,
    DebrisOrNavigation,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::NoDams => "no dams",
            ExclusionReason::DatasetMismatch => "dataset mismatch",
            ExclusionReason::DebrisOrNavigation => "debris control or navigation major purpose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurposeAssignment {
    pub major_purposes: BTreeSet<char>,
    pub per_purpose_capacity: BTreeMap<char, f64>,
    pub excluded: Option<ExclusionReason>,
}

impl PurposeAssignment {
    pub fn is_multiple(&self) -> bool {
        self.major_purposes.len() > 1
    }

    /// Major purposes as letters, in the dam-purpose alphabet order.
    pub fn code(&self) -> String {
        crate::data::PURPOSE_ALPHABET
            .chars()
            .filter(|c| self.major_purposes.contains(c))
            .collect()
    }
}

/// Picks the major purpose(s) of a basin's dams.
///
/// Capacity per purpose is the summed storage of every dam listing it. Ties
/// on capacity are broken by an importance score that weights each dam's
/// storage by `1 / (1 + position of the letter in its code)`; remaining ties
/// are all reported.
pub fn aggregate_purposes(dams: &[DamRecord]) -> PurposeAssignment {
    if dams.is_empty() {
        return PurposeAssignment {
            major_purposes: BTreeSet::new(),
            per_purpose_capacity: BTreeMap::new(),
            excluded: Some(ExclusionReason::NoDams),
        };
    }

    let mut capacity: BTreeMap<char, f64> = BTreeMap::new();
    let mut importance: BTreeMap<char, f64> = BTreeMap::new();
    // Sort per-dam contributions so sums are independent of dam order.
    let mut contributions: BTreeMap<char, Vec<(f64, f64)>> = BTreeMap::new();
    for dam in dams {
        let mut seen = BTreeSet::new();
        for (pos, letter) in dam.purpose_code.chars().enumerate() {
            if !seen.insert(letter) {
                continue;
            }
            contributions
                .entry(letter)
                .or_default()
                .push((dam.normal_storage, dam.normal_storage / (1.0 + pos as f64)));
        }
    }
    for (letter, mut parts) in contributions {
        parts.sort_by(|a, b| a.partial_cmp(b).expect("finite storages"));
        capacity.insert(letter, parts.iter().map(|p| p.0).sum());
        importance.insert(letter, parts.iter().map(|p| p.1).sum());
    }

    let max_cap = capacity.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let candidates: Vec<char> = capacity
        .iter()
        .filter(|(_, &c)| c == max_cap)
        .map(|(&l, _)| l)
        .collect();
    let best = candidates
        .iter()
        .map(|l| importance[l])
        .fold(f64::NEG_INFINITY, f64::max);
    let major_purposes: BTreeSet<char> = candidates
        .into_iter()
        .filter(|l| importance[l] == best)
        .collect();

    let excluded = if major_purposes.iter().all(|c| *c == 'D' || *c == 'N') {
        Some(ExclusionReason::DebrisOrNavigation)
    } else {
        None
    };
    PurposeAssignment {
        major_purposes,
        per_purpose_capacity: capacity,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversionFlag {
    pub present: bool,
    pub matched_text: Option<String>,
}

/// Case-insensitive search for "diversion" or "divert" in any remark field.
pub fn detect_diversion<S: AsRef<str>>(remarks: &[S]) -> DiversionFlag {
    for text in remarks {
        let text = text.as_ref();
        // ASCII folding keeps byte offsets aligned with the original text.
        let lower = text.to_ascii_lowercase();
        for needle in ["diversion", "divert"] {
            if let Some(at) = lower.find(needle) {
                return DiversionFlag {
                    present: true,
                    matched_text: Some(text[at..at + needle.len()].to_string()),
                };
            }
        }
    }
    DiversionFlag {
        present: false,
        matched_text: None,
    }
}

/// Everything the attribution step knows about one basin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinAttribution {
    pub gauge_id: String,
    pub ecoregion: String,
    pub dor: DorResult,
    pub purposes: PurposeAssignment,
    pub diversion: DiversionFlag,
}

impl BasinAttribution {
    pub fn excluded_reason(&self) -> Option<ExclusionReason> {
        self.purposes.excluded
    }
}

/// Attribution of every basin plus the dor-regime partition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    /// Sorted by gauge id.
    pub basins: Vec<BasinAttribution>,
    pub zero: Vec<String>,
    pub small: Vec<String>,
    pub large: Vec<String>,
    /// Basins absent from purpose-conditioned reports, with the reason.
    pub purpose_exclusions: Vec<(String, ExclusionReason)>,
    /// Basins for which dor could not be computed.
    pub unclassified: Vec<(String, String)>,
}

impl Stratification {
    pub fn group(&self, category: DorCategory) -> &[String] {
        match category {
            DorCategory::Zero => &self.zero,
            DorCategory::Small => &self.small,
            DorCategory::Large => &self.large,
        }
    }

    pub fn get(&self, gauge_id: &str) -> Option<&BasinAttribution> {
        self.basins
            .binary_search_by(|b| b.gauge_id.as_str().cmp(gauge_id))
            .ok()
            .map(|i| &self.basins[i])
    }

    pub fn category_of(&self, gauge_id: &str) -> Option<DorCategory> {
        self.get(gauge_id).map(|b| b.dor.category)
    }

    /// Basins whose major purposes are eligible for purpose-conditioned statistics.
    pub fn purpose_eligible(&self) -> impl Iterator<Item = &BasinAttribution> {
        self.basins.iter().filter(|b| b.purposes.excluded.is_none())
    }

    /// Number of eligible basins per major purpose letter.
    pub fn purpose_counts(&self) -> BTreeMap<char, usize> {
        let mut counts = BTreeMap::new();
        for b in self.purpose_eligible() {
            for p in &b.purposes.major_purposes {
                *counts.entry(*p).or_insert(0) += 1;
            }
        }
        counts
    }
}

pub fn attribute_basin(basin: &Basin) -> Result<BasinAttribution> {
    let dor = compute_dor(basin_nor(basin), basin.record.mean_annual_runoff)?;
    let mut purposes = aggregate_purposes(&basin.record.dams);
    // A dam count without matching dam records, or the reverse, means the two
    // source inventories disagree.
    let ndams = basin.record.attributes[ATTR_NDAMS];
    if basin.record.dams.is_empty() && ndams > 0.0 {
        purposes.excluded = Some(ExclusionReason::DatasetMismatch);
    }
    Ok(BasinAttribution {
        gauge_id: basin.gauge_id().to_string(),
        ecoregion: basin.record.ecoregion.clone(),
        dor,
        purposes,
        diversion: detect_diversion(&basin.record.remarks()),
    })
}

/// Classifies every basin into the zero/small/large regimes.
pub fn stratify(dataset: &Dataset) -> Stratification {
    let mut basins = Vec::new();
    let mut unclassified = Vec::new();
    for b in &dataset.basins {
        match attribute_basin(b) {
            Ok(a) => basins.push(a),
            Err(e) => unclassified.push((b.gauge_id().to_string(), e.to_string())),
        }
    }
    from_attributions(basins, unclassified)
}

pub fn from_attributions(
    mut basins: Vec<BasinAttribution>,
    mut unclassified: Vec<(String, String)>,
) -> Stratification {
    basins.sort_by(|a, b| a.gauge_id.cmp(&b.gauge_id));
    unclassified.sort();
    let mut out = Stratification {
        unclassified,
        ..Default::default()
    };
    for b in &basins {
        let id = b.gauge_id.clone();
        match b.dor.category {
            DorCategory::Zero => out.zero.push(id.clone()),
            DorCategory::Small => out.small.push(id.clone()),
            DorCategory::Large => out.large.push(id.clone()),
        }
        if let Some(r) = b.purposes.excluded {
            out.purpose_exclusions.push((id, r));
        }
    }
    out.basins = basins;
    out
}
