use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::transform::{degaussianize, depth_to_discharge, gaussianize, to_runoff_ratio};
use super::{window_indices, Basin, DateRange, FlowSeries, N_ATTRIBUTES, N_FORCING, N_INPUTS, PRCP};
use crate::error::{Error, Result};

/// Training-period transform statistics, reused verbatim on any other window.
///
/// Input channels `0..7` are the forcings, `7..37` the static attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub train_window: DateRange,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Mean daily precipitation (mm/day) over the training window, per basin.
    pub mean_precip: BTreeMap<String, f64>,
    /// Input channels passed through [`gaussianize`] before z-scoring.
    pub gaussianized_inputs: Vec<usize>,
    /// Whether the runoff-ratio target is passed through [`gaussianize`].
    pub gaussianized_target: bool,
    /// Channels whose standard deviation was floored at 1.
    pub degenerate_inputs: Vec<usize>,
}

/// Model-ready arrays for one basin over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct BasinTensors {
    pub gauge_id: String,
    pub start: NaiveDate,
    pub area: f64,
    pub mean_precip: f64,
    /// Row-major `T x 7`, standardized.
    pub dynamic: Vec<f64>,
    /// Standardized static attributes, shared by every row.
    pub statics: Vec<f64>,
    /// Standardized transformed runoff ratio; `None` where discharge is missing.
    pub target: Vec<Option<f64>>,
}

impl BasinTensors {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Writes rows `start..start + len` of the `T x 37` input matrix into `out`.
    pub fn fill_inputs(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(len * N_INPUTS);
        for t in start..start + len {
            out.extend_from_slice(&self.dynamic[t * N_FORCING..(t + 1) * N_FORCING]);
            out.extend_from_slice(&self.statics);
        }
    }

    /// Full `T x 37` input matrix with the static attributes replicated per row.
    pub fn inputs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.fill_inputs(0, self.len(), &mut out);
        out
    }
}

const DEGENERATE_REL: f64 = 1e-12;

struct Moments {
    mean: f64,
    std: f64,
}

/// Two-pass population moments in the slice's order.
fn moments(values: &[f64]) -> Option<Moments> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Moments {
        mean,
        std: var.sqrt(),
    })
}

fn window_mean_precip(basin: &Basin, window: &DateRange) -> Result<f64> {
    let (a, b) = window_indices(basin.forcing.start_date, basin.forcing.len(), window)?;
    let sum: f64 = (a..b).map(|t| basin.forcing.row(t)[PRCP]).sum();
    Ok(sum / (b - a) as f64)
}

fn ratio_series(basin: &Basin, mean_precip: f64) -> Result<Vec<Option<f64>>> {
    to_runoff_ratio(&basin.flow, basin.record.area, mean_precip).map_err(|e| {
        Error::Domain(format!("basin {} unusable as target: {e}", basin.gauge_id()))
    })
}

/// Fits pooled statistics over `basins` and `train_window`.
///
/// Basins are accumulated in gauge-id order so the result does not depend on
/// the order they are passed in.
pub fn fit_normalization(basins: &[&Basin], train_window: DateRange) -> Result<NormalizationSpec> {
    if basins.is_empty() {
        return Err(Error::InvalidInput("no training basins".into()));
    }
    let mut sorted: Vec<&Basin> = basins.to_vec();
    sorted.sort_by(|a, b| a.gauge_id().cmp(b.gauge_id()));

    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); N_INPUTS];
    let mut target = Vec::new();
    let mut mean_precip = BTreeMap::new();
    for basin in &sorted {
        let (a, b) = window_indices(basin.forcing.start_date, basin.forcing.len(), &train_window)
            .map_err(|e| Error::InvalidInput(format!("basin {}: {e}", basin.gauge_id())))?;
        for t in a..b {
            for (c, &v) in basin.forcing.row(t).iter().enumerate() {
                let v = if c == PRCP { gaussianize(v)? } else { v };
                channels[c].push(v);
            }
        }
        for (k, &v) in basin.record.attributes.iter().enumerate() {
            channels[N_FORCING + k].push(v);
        }
        let p = window_mean_precip(basin, &train_window)?;
        let ratio = ratio_series(basin, p)?;
        let (fa, fb) = window_indices(basin.flow.start_date, basin.flow.len(), &train_window)?;
        for r in ratio[fa..fb].iter().flatten() {
            target.push(gaussianize(*r)?);
        }
        mean_precip.insert(basin.gauge_id().to_string(), p);
    }

    let mut input_mean = Vec::with_capacity(N_INPUTS);
    let mut input_std = Vec::with_capacity(N_INPUTS);
    let mut degenerate_inputs = Vec::new();
    for (c, values) in channels.iter().enumerate() {
        let m = moments(values).expect("window is non-empty");
        let std = if m.std <= DEGENERATE_REL * m.mean.abs().max(1.0) {
            log::warn!(
                "input channel {} has zero variance; std floored at 1",
                channel_name(c)
            );
            degenerate_inputs.push(c);
            1.0
        } else {
            m.std
        };
        input_mean.push(m.mean);
        input_std.push(std);
    }

    let t = moments(&target)
        .ok_or_else(|| Error::InvalidInput("no observed discharge in training window".into()))?;
    let target_std = if t.std <= DEGENERATE_REL * t.mean.abs().max(1.0) {
        log::warn!("target has zero variance; std floored at 1");
        1.0
    } else {
        t.std
    };

    Ok(NormalizationSpec {
        train_window,
        input_mean,
        input_std,
        target_mean: t.mean,
        target_std,
        mean_precip,
        gaussianized_inputs: vec![PRCP],
        gaussianized_target: true,
        degenerate_inputs,
    })
}

fn channel_name(c: usize) -> &'static str {
    if c < N_FORCING {
        super::FORCING_NAMES[c]
    } else {
        super::ATTRIBUTE_NAMES[c - N_FORCING]
    }
}

impl NormalizationSpec {
    /// Mean training-window precipitation for `basin`, from the stored table or,
    /// for basins outside the fitting set, from its own training-window forcing.
    pub fn basin_mean_precip(&self, basin: &Basin) -> Result<f64> {
        match self.mean_precip.get(basin.gauge_id()) {
            Some(p) => Ok(*p),
            None => window_mean_precip(basin, &self.train_window),
        }
    }

    fn standardize(&self, c: usize, v: f64) -> Result<f64> {
        let v = if self.gaussianized_inputs.contains(&c) {
            gaussianize(v)?
        } else {
            v
        };
        Ok((v - self.input_mean[c]) / self.input_std[c])
    }

    /// Forward target transform of one discharge value (m³/s).
    pub fn discharge_to_target(&self, q: f64, area: f64, mean_precip: f64) -> Result<f64> {
        let series = FlowSeries {
            start_date: self.train_window.start,
            values: vec![Some(q)],
        };
        let r = to_runoff_ratio(&series, area, mean_precip)?[0].expect("present");
        let v = if self.gaussianized_target { gaussianize(r)? } else { r };
        Ok((v - self.target_mean) / self.target_std)
    }

    /// Inverse target transform back to discharge (m³/s).
    pub fn target_to_discharge(&self, y: f64, area: f64, mean_precip: f64) -> f64 {
        let v = y * self.target_std + self.target_mean;
        let ratio = if self.gaussianized_target {
            degaussianize(v)
        } else {
            v.max(0.0)
        };
        depth_to_discharge(ratio * mean_precip, area)
    }
}

/// Applies `spec` to one basin over `window`.
pub fn apply_normalization(
    spec: &NormalizationSpec,
    basin: &Basin,
    window: &DateRange,
) -> Result<BasinTensors> {
    let (a, b) = window_indices(basin.forcing.start_date, basin.forcing.len(), window)?;
    let (fa, fb) = window_indices(basin.flow.start_date, basin.flow.len(), window)?;
    let mean_precip = spec.basin_mean_precip(basin)?;

    let mut dynamic = Vec::with_capacity((b - a) * N_FORCING);
    for t in a..b {
        for (c, &v) in basin.forcing.row(t).iter().enumerate() {
            dynamic.push(spec.standardize(c, v)?);
        }
    }
    let statics = (0..N_ATTRIBUTES)
        .map(|k| spec.standardize(N_FORCING + k, basin.record.attributes[k]))
        .collect::<Result<Vec<_>>>()?;

    let ratio = ratio_series(basin, mean_precip)?;
    let target = ratio[fa..fb]
        .iter()
        .map(|r| match r {
            Some(r) => {
                let v = if spec.gaussianized_target { gaussianize(*r)? } else { *r };
                Ok(Some((v - spec.target_mean) / spec.target_std))
            }
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(BasinTensors {
        gauge_id: basin.gauge_id().to_string(),
        start: window.start,
        area: basin.record.area,
        mean_precip,
        dynamic,
        statics,
        target,
    })
}
