//! Per-basin evaluation metrics on discharge series and their distribution
//! summaries.
//!
//! Every function takes paired observed/simulated slices of equal length.
//! Use [`evaluate`] to drop missing pairs and compute the full record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A metric value as reported per basin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum MetricValue {
    Finite(f64),
    /// The low-flow bias with zero flows in the bottom segment.
    Infinite,
    /// The metric is undefined for this series (e.g. constant observations).
    Undefined,
}

impl MetricValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            MetricValue::Finite(v) => Some(*v),
            _ => None,
        }
    }

    pub fn to_csv(&self) -> String {
        match self {
            MetricValue::Finite(v) => crate::io::fmt_f64(*v),
            MetricValue::Infinite => "inf".into(),
            MetricValue::Undefined => "nan".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "Infinite" => Ok(MetricValue::Infinite),
            "nan" | "NaN" | "" => Ok(MetricValue::Undefined),
            other => other
                .parse::<f64>()
                .map(MetricValue::Finite)
                .map_err(|_| Error::InvalidInput(format!("cannot parse metric value {other:?}"))),
        }
    }
}

impl From<Result<f64>> for MetricValue {
    fn from(r: Result<f64>) -> Self {
        match r {
            Ok(v) if v.is_finite() => MetricValue::Finite(v),
            _ => MetricValue::Undefined,
        }
    }
}

pub const METRIC_NAMES: [&str; 6] = ["bias", "corr", "nse", "kge", "fhv", "flv"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub bias: MetricValue,
    pub corr: MetricValue,
    pub nse: MetricValue,
    pub kge: MetricValue,
    pub fhv: MetricValue,
    pub flv: MetricValue,
}

impl MetricsRecord {
    pub fn get(&self, name: &str) -> Option<MetricValue> {
        Some(match name {
            "bias" => self.bias,
            "corr" => self.corr,
            "nse" => self.nse,
            "kge" => self.kge,
            "fhv" => self.fhv,
            "flv" => self.flv,
            _ => return None,
        })
    }

    pub fn values(&self) -> [MetricValue; 6] {
        [self.bias, self.corr, self.nse, self.kge, self.fhv, self.flv]
    }
}

fn check_pair(obs: &[f64], sim: &[f64], min_len: usize) -> Result<()> {
    if obs.len() != sim.len() {
        return Err(Error::Shape(format!(
            "{} observations for {} simulations",
            obs.len(),
            sim.len()
        )));
    }
    if obs.len() < min_len {
        return Err(Error::UndefinedMetric("series shorter than the metric requires"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_sq_dev(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Nash-Sutcliffe efficiency.
pub fn nse(obs: &[f64], sim: &[f64]) -> Result<f64> {
    check_pair(obs, sim, 2)?;
    let m = mean(obs);
    let denom: f64 = obs.iter().map(|o| (o - m) * (o - m)).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("nse: constant observations"));
    }
    let num: f64 = obs.iter().zip(sim).map(|(o, s)| (s - o) * (s - o)).sum();
    Ok(1.0 - num / denom)
}

fn pearson(obs: &[f64], sim: &[f64]) -> Result<f64> {
    let (mo, ms) = (mean(obs), mean(sim));
    let mut cov = 0.0;
    let mut vo = 0.0;
    let mut vs = 0.0;
    for (o, s) in obs.iter().zip(sim) {
        cov += (o - mo) * (s - ms);
        vo += (o - mo) * (o - mo);
        vs += (s - ms) * (s - ms);
    }
    if vo == 0.0 || vs == 0.0 {
        return Err(Error::UndefinedMetric("corr: constant series"));
    }
    Ok(cov / (vo * vs).sqrt())
}

/// Mean error and Pearson correlation. The correlation is an error for a
/// constant series; the bias is still returned.
pub fn bias_and_corr(obs: &[f64], sim: &[f64]) -> Result<(f64, Result<f64>)> {
    check_pair(obs, sim, 2)?;
    let bias = obs.iter().zip(sim).map(|(o, s)| s - o).sum::<f64>() / obs.len() as f64;
    Ok((bias, pearson(obs, sim)))
}

/// Kling-Gupta efficiency, 2009 form with population standard deviations.
pub fn kge(obs: &[f64], sim: &[f64]) -> Result<f64> {
    check_pair(obs, sim, 2)?;
    let (mo, ms) = (mean(obs), mean(sim));
    if mo == 0.0 {
        return Err(Error::UndefinedMetric("kge: zero observed mean"));
    }
    let (vo, vs) = (sum_sq_dev(obs, mo), sum_sq_dev(sim, ms));
    if vo == 0.0 || vs == 0.0 {
        return Err(Error::UndefinedMetric("kge: zero standard deviation"));
    }
    let r = pearson(obs, sim)?;
    // ratio of population standard deviations; the 1/n factors cancel
    let alpha = (vs / vo).sqrt();
    let beta = ms / mo;
    Ok(1.0 - ((r - 1.0).powi(2) + (alpha - 1.0).powi(2) + (beta - 1.0).powi(2)).sqrt())
}

/// Flow-duration curve: values sorted in descending order.
pub fn flow_duration_curve(v: &[f64]) -> Vec<f64> {
    let mut fdc = v.to_vec();
    fdc.sort_by(|a, b| b.total_cmp(a));
    fdc
}

/// Length of the high-flow segment, `ceil(0.02 * n)`.
pub fn high_segment_len(n: usize) -> usize {
    (2 * n).div_ceil(100)
}

/// Length of the low-flow segment, `floor(0.3 * n)`.
pub fn low_segment_len(n: usize) -> usize {
    3 * n / 10
}

/// Percent bias of the top-2% flow-duration segment.
pub fn fhv(obs: &[f64], sim: &[f64]) -> Result<f64> {
    check_pair(obs, sim, 50)?;
    let n = high_segment_len(obs.len());
    let (fo, fs) = (flow_duration_curve(obs), flow_duration_curve(sim));
    let so: f64 = fo[..n].iter().sum();
    if so == 0.0 {
        return Err(Error::UndefinedMetric("fhv: zero observed high-flow volume"));
    }
    let diff: f64 = fo[..n].iter().zip(&fs[..n]).map(|(o, s)| s - o).sum();
    Ok(100.0 * diff / so)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Flv {
    Finite(f64),
    Infinite,
}

/// Percent bias of the bottom-30% flow-duration segment in log space.
pub fn flv(obs: &[f64], sim: &[f64]) -> Result<Flv> {
    check_pair(obs, sim, 4)?;
    let n = low_segment_len(obs.len());
    let (fo, fs) = (flow_duration_curve(obs), flow_duration_curve(sim));
    let lo = &fo[fo.len() - n..];
    let ls = &fs[fs.len() - n..];
    if lo.iter().chain(ls).any(|v| *v == 0.0) {
        return Ok(Flv::Infinite);
    }
    let spread = |seg: &[f64]| {
        let min = seg[seg.len() - 1].ln();
        seg.iter().map(|v| v.ln() - min).sum::<f64>()
    };
    let (qo, qs) = (spread(lo), spread(ls));
    if qo == 0.0 {
        return Err(Error::UndefinedMetric("flv: flat observed low-flow segment"));
    }
    Ok(Flv::Finite(-100.0 * (qs - qo) / qo))
}

/// Drops pairs with a missing observation or a non-finite simulation.
pub fn drop_missing(obs: &[Option<f64>], sim: &[f64]) -> (Vec<f64>, Vec<f64>) {
    obs.iter()
        .zip(sim)
        .filter_map(|(o, s)| match o {
            Some(o) if s.is_finite() => Some((*o, *s)),
            _ => None,
        })
        .unzip()
}

/// Every metric for one basin; undefined metrics are recorded, never raised.
pub fn evaluate(obs: &[Option<f64>], sim: &[f64]) -> Result<MetricsRecord> {
    if obs.len() != sim.len() {
        return Err(Error::Shape(format!(
            "{} observations for {} simulations",
            obs.len(),
            sim.len()
        )));
    }
    let (o, s) = drop_missing(obs, sim);
    let (bias, corr) = match bias_and_corr(&o, &s) {
        Ok((b, c)) => (MetricValue::Finite(b), MetricValue::from(c)),
        Err(_) => (MetricValue::Undefined, MetricValue::Undefined),
    };
    let flv = match flv(&o, &s) {
        Ok(Flv::Finite(v)) => MetricValue::Finite(v),
        Ok(Flv::Infinite) => MetricValue::Infinite,
        Err(_) => MetricValue::Undefined,
    };
    Ok(MetricsRecord {
        bias,
        corr,
        nse: nse(&o, &s).into(),
        kge: kge(&o, &s).into(),
        fhv: fhv(&o, &s).into(),
        flv,
    })
}

/// Linear-interpolation quantile (numpy's default) of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `(value, cumulative fraction)` steps over finite values. Fractions are
    /// relative to finite plus infinite entries, so the curve stops short of 1
    /// when infinite entries exist.
    pub cdf: Vec<(f64, f64)>,
    pub n_finite: usize,
    pub n_infinite: usize,
    pub n_undefined: usize,
    pub median: Option<f64>,
    /// min, first quartile, median, third quartile, max.
    pub five_number: Option<[f64; 5]>,
}

pub fn summarize(values: &[MetricValue]) -> Summary {
    let mut finite: Vec<f64> = values.iter().filter_map(|v| v.finite()).collect();
    finite.sort_by(f64::total_cmp);
    let n_infinite = values.iter().filter(|v| matches!(v, MetricValue::Infinite)).count();
    let n_undefined = values.iter().filter(|v| matches!(v, MetricValue::Undefined)).count();
    let denom = (finite.len() + n_infinite) as f64;
    let cdf = finite
        .iter()
        .enumerate()
        .map(|(i, v)| (*v, (i + 1) as f64 / denom))
        .collect();
    let five_number = (!finite.is_empty()).then(|| {
        [
            finite[0],
            quantile_sorted(&finite, 0.25),
            quantile_sorted(&finite, 0.5),
            quantile_sorted(&finite, 0.75),
            finite[finite.len() - 1],
        ]
    });
    Summary {
        cdf,
        n_finite: finite.len(),
        n_infinite,
        n_undefined,
        median: five_number.map(|f| f[2]),
        five_number,
    }
}
