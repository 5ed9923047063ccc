use crate::error::{Error, Result};

use super::FlowSeries;

const SECONDS_PER_DAY: f64 = 86_400.0;
const MM_PER_M: f64 = 1_000.0;
const M2_PER_KM2: f64 = 1.0e6;

/// Converts a discharge in m³/s into a depth in mm/day over `area` km².
pub fn discharge_to_depth(q: f64, area: f64) -> f64 {
    q * SECONDS_PER_DAY * MM_PER_M / (area * M2_PER_KM2)
}

/// Inverse of [`discharge_to_depth`].
pub fn depth_to_discharge(depth: f64, area: f64) -> f64 {
    depth * area * M2_PER_KM2 / (SECONDS_PER_DAY * MM_PER_M)
}

/// Runoff ratio: daily depth divided by the basin's mean daily precipitation.
/// Missing days stay missing.
pub fn to_runoff_ratio(
    flow: &FlowSeries,
    area: f64,
    mean_annual_precip: f64,
) -> Result<Vec<Option<f64>>> {
    if !(area > 0.0) {
        return Err(Error::Domain(format!("area must be > 0, got {area}")));
    }
    if !(mean_annual_precip > 0.0) {
        return Err(Error::Domain(format!(
            "mean annual precipitation must be > 0, got {mean_annual_precip}"
        )));
    }
    Ok(flow
        .values
        .iter()
        .map(|v| v.map(|q| discharge_to_depth(q, area) / mean_annual_precip))
        .collect())
}

/// `log10(sqrt(v) + 0.1)`, pulling skewed non-negative values towards a
/// Gaussian shape.
pub fn gaussianize(v: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("gaussianize expects v >= 0, got {v}")));
    }
    Ok((v.sqrt() + 0.1).log10())
}

/// Left inverse of [`gaussianize`]. Values below the transform's range map to 0.
pub fn degaussianize(v: f64) -> f64 {
    let root = (10f64.powf(v) - 0.1).max(0.0);
    root * root
}
