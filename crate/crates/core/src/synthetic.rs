//! Synthetic basins with known rainfall-runoff and reservoir dynamics.
//!
//! Water moves through a linear soil store and, when the basin has a
//! reservoir, through a storage with a piecewise-linear release rule. All
//! state is tracked in millimetres over the basin area.

use chrono::{Datelike, Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    depth_to_discharge, discharge_to_depth, Basin, BasinRecord, DamRecord, Dataset, FlowSeries,
    ForcingSeries, ATTR_NDAMS, ATTR_STOR_NOR, N_ATTRIBUTES, N_FORCING,
};
use crate::error::{Error, Result};
use crate::reservoir::{compute_dor, DorCategory};

pub const MIN_DAYS: usize = 730;
const MASS_BALANCE_TOLERANCE: f64 = 1e-6;
const ECOREGIONS: [&str; 4] = ["5.2", "8.1", "8.4", "9.2"];
const PURPOSES: [&str; 6] = ["S", "SC", "H", "I", "C", "R"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecipParams {
    pub wet_prob: f64,
    pub gamma_shape: f64,
    /// mm/day
    pub gamma_scale: f64,
    /// Relative amplitude of the seasonal wet-day probability cycle.
    pub seasonal_amplitude: f64,
    /// Phase of the seasonal cycle, radians.
    pub seasonal_phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReleaseRule {
    /// `max(0, R - target) * rate + baseline`, clipped to `[0, R]`.
    Linear { rate: f64, baseline: f64 },
    /// No controlled release; water leaves only by spilling over capacity.
    SpillOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    /// m³/km²
    pub capacity: f64,
    pub target_fraction: f64,
    pub rule: ReleaseRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBasinSpec {
    pub gauge_id: String,
    pub ecoregion: String,
    /// Seeds the forcing series.
    pub rng_seed: u64,
    /// Seeds the noise attribute channels.
    pub attribute_seed: u64,
    pub start_date: NaiveDate,
    pub area: f64,
    pub precip: PrecipParams,
    /// Soil-store recession constant, days.
    pub k: f64,
    pub reservoir: Option<ReservoirSpec>,
    /// Individual dam storages in m³; must sum to `capacity * area`.
    pub dam_storages: Vec<f64>,
}

impl SyntheticBasinSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.precip;
        let prob_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !prob_ok(p.wet_prob) || !(p.gamma_shape > 0.0) || !(p.gamma_scale > 0.0) {
            return Err(Error::InvalidInput(format!("{}: bad precipitation parameters", self.gauge_id)));
        }
        if !(0.0..=1.0).contains(&p.seasonal_amplitude) {
            return Err(Error::InvalidInput(format!("{}: seasonal amplitude outside [0, 1]", self.gauge_id)));
        }
        if !(self.k > 0.0) || !(self.area > 0.0) {
            return Err(Error::InvalidInput(format!("{}: k and area must be > 0", self.gauge_id)));
        }
        if let Some(r) = &self.reservoir {
            if !(r.capacity >= 0.0) || !prob_ok(r.target_fraction) {
                return Err(Error::InvalidInput(format!("{}: bad reservoir parameters", self.gauge_id)));
            }
            if let ReleaseRule::Linear { rate, baseline } = r.rule {
                if !prob_ok(rate) || !(baseline >= 0.0) {
                    return Err(Error::InvalidInput(format!("{}: bad release rule", self.gauge_id)));
                }
            }
        }
        Ok(())
    }

    fn capacity(&self) -> f64 {
        self.reservoir.map_or(0.0, |r| r.capacity)
    }
}

/// Water budget of one generated basin, mm over the basin area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterBalance {
    pub precip: f64,
    pub outflow: f64,
    pub delta_soil: f64,
    pub delta_reservoir: f64,
}

impl WaterBalance {
    pub fn relative_residual(&self) -> f64 {
        let r = self.precip - self.outflow - self.delta_soil - self.delta_reservoir;
        r.abs() / self.precip.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedBasin {
    pub basin: Basin,
    pub balance: WaterBalance,
    pub category: DorCategory,
}

struct Simulation {
    forcing: Vec<f64>,
    outflow_mm: Vec<f64>,
    balance: WaterBalance,
}

fn simulate(spec: &SyntheticBasinSpec, n_days: usize) -> Result<Simulation> {
    let p = spec.precip;
    let gamma = Gamma::new(p.gamma_shape, p.gamma_scale)
        .map_err(|e| Error::InvalidInput(format!("gamma distribution: {e}")))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let mean_p = p.wet_prob * p.gamma_shape * p.gamma_scale;
    let s0 = mean_p * spec.k;
    let cap_mm = spec.capacity() / 1000.0;
    let target_mm = spec.reservoir.map_or(0.0, |r| r.target_fraction * cap_mm);
    let r0 = target_mm;

    let mut forcing = Vec::with_capacity(n_days * N_FORCING);
    let mut outflow_mm = Vec::with_capacity(n_days);
    let (mut s, mut r) = (s0, r0);
    let mut total_p = 0.0;
    let mut total_q = 0.0;

    for t in 0..n_days {
        let date = spec.start_date + Days::new(t as u64);
        let season = 2.0 * std::f64::consts::PI * date.ordinal0() as f64 / 365.25;
        let wet = (p.wet_prob * (1.0 + p.seasonal_amplitude * (season + p.seasonal_phase).sin())).clamp(0.0, 1.0);
        let prcp = if rng.random::<f64>() < wet { gamma.sample(&mut rng) } else { 0.0 };

        let dayl = 43200.0 + 10800.0 * (season - 1.39).sin();
        let tmean = 12.0 + 10.0 * (season - 1.9).sin() + 2.0 * noise.sample(&mut rng);
        let tmax = tmean + 5.0 + if prcp > 0.0 { -2.0 } else { 1.0 };
        let tmin = tmean - 5.0;
        let srad = (250.0 + 120.0 * (season - 1.39).sin()) * if prcp > 0.0 { 0.6 } else { 1.0 };
        let vp = 611.0 * (17.27 * tmin / (tmin + 237.3)).exp();
        forcing.extend_from_slice(&[dayl, prcp, srad, 0.0, tmax, tmin, vp]);

        let q_soil = s / spec.k;
        s += prcp - q_soil;
        let out = match spec.reservoir {
            None => q_soil,
            Some(res) => {
                let release = match res.rule {
                    ReleaseRule::Linear { rate, baseline } => {
                        ((r - target_mm).max(0.0) * rate + baseline).clamp(0.0, r)
                    }
                    ReleaseRule::SpillOnly => 0.0,
                };
                r = r - release + q_soil;
                let spill = (r - cap_mm).max(0.0);
                r -= spill;
                release + spill
            }
        };
        total_p += prcp;
        total_q += out;
        outflow_mm.push(out);
    }

    let balance = WaterBalance {
        precip: total_p,
        outflow: total_q,
        delta_soil: s - s0,
        delta_reservoir: r - r0,
    };
    Ok(Simulation {
        forcing,
        outflow_mm,
        balance,
    })
}

fn attributes(spec: &SyntheticBasinSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.attribute_seed);
    let mut a: Vec<f64> = (0..N_ATTRIBUTES).map(|_| rng.random_range(0.0..100.0)).collect();
    a[0] = spec.area;
    a[15] = spec.k;
    a[ATTR_NDAMS] = spec.dam_storages.len() as f64;
    a[ATTR_STOR_NOR] = spec.dam_storages.iter().sum::<f64>() / spec.area / 1000.0;
    a
}

/// Simulates one basin and checks its water balance.
pub fn generate_basin(spec: &SyntheticBasinSpec, n_days: usize) -> Result<GeneratedBasin> {
    if n_days < MIN_DAYS {
        return Err(Error::InvalidInput(format!("need at least {MIN_DAYS} days, got {n_days}")));
    }
    spec.validate()?;
    let dam_total: f64 = spec.dam_storages.iter().sum();
    let expected = spec.capacity() * spec.area;
    if (dam_total - expected).abs() > 1e-9 * expected.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "{}: dam storages sum to {dam_total} m³, reservoir holds {expected} m³",
            spec.gauge_id
        )));
    }

    let sim = simulate(spec, n_days)?;
    let flow: Vec<f64> = sim
        .outflow_mm
        .iter()
        .map(|q| depth_to_discharge(*q, spec.area))
        .collect();
    let mut balance = sim.balance;
    balance.outflow = flow.iter().map(|q| discharge_to_depth(*q, spec.area)).sum();
    if balance.relative_residual() > MASS_BALANCE_TOLERANCE {
        return Err(Error::Domain(format!(
            "{}: water balance residual {:e}",
            spec.gauge_id,
            balance.relative_residual()
        )));
    }

    let mean_annual_runoff = balance.outflow / n_days as f64 * 365.25 * 1000.0;
    let dams = spec
        .dam_storages
        .iter()
        .enumerate()
        .map(|(i, s)| DamRecord::new(*s, PURPOSES[i % PURPOSES.len()]))
        .collect::<Result<Vec<_>>>()?;
    let record = BasinRecord {
        gauge_id: spec.gauge_id.clone(),
        area: spec.area,
        mean_annual_runoff,
        ecoregion: spec.ecoregion.clone(),
        attributes: attributes(spec),
        dams,
        wr_report_remarks: String::new(),
        screening_comments: String::new(),
    };
    let category = compute_dor(dam_total / spec.area, mean_annual_runoff)?.category;
    let basin = Basin {
        record,
        forcing: ForcingSeries::new(spec.start_date, sim.forcing)?,
        flow: FlowSeries::new(spec.start_date, flow.into_iter().map(Some).collect())?,
    };
    Ok(GeneratedBasin {
        basin,
        balance,
        category,
    })
}

/// Splits `total` m³ into `n` whole-megaliter dam storages.
fn split_storage(total: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ml = (total / 1000.0).round().max(n as f64) as u64;
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut parts: Vec<u64> = weights.iter().map(|w| ((w / wsum) * ml as f64).floor().max(1.0) as u64).collect();
    let assigned: u64 = parts.iter().sum();
    parts[0] += ml.saturating_sub(assigned);
    parts.into_iter().map(|p| p as f64 * 1000.0).collect()
}

pub fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date")
}

/// Basin specs for a suite of `n_per_regime` zero, small and large basins.
///
/// Basins are built in triplets that share climate, precipitation seed and
/// recession constant and differ only in their reservoir.
pub fn suite_specs(n_per_regime: usize, n_days: usize, master_seed: u64) -> Result<Vec<SyntheticBasinSpec>> {
    if n_per_regime == 0 {
        return Err(Error::InvalidInput("n_per_regime must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut specs = Vec::with_capacity(3 * n_per_regime);
    for i in 0..n_per_regime {
        let precip = PrecipParams {
            wet_prob: rng.random_range(0.25..0.5),
            gamma_shape: rng.random_range(0.6..0.9),
            gamma_scale: rng.random_range(6.0..14.0),
            seasonal_amplitude: rng.random_range(0.1..0.6),
            seasonal_phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        let k = rng.random_range(4.0..30.0);
        let area = rng.random_range(100.0..2000.0_f64).round();
        let rng_seed: u64 = rng.random();
        let ecoregion = ECOREGIONS[i % ECOREGIONS.len()].to_string();

        let zero = SyntheticBasinSpec {
            gauge_id: format!("Z{i:03}"),
            ecoregion,
            rng_seed,
            attribute_seed: rng.random(),
            start_date: default_start_date(),
            area,
            precip,
            k,
            reservoir: None,
            dam_storages: Vec::new(),
        };
        let q_mean = simulate(&zero, n_days)?.balance.outflow / n_days as f64 * 365.25 * 1000.0;

        let regulated = |id: String, dor: f64, n_dams: usize, rule: ReleaseRule, rng: &mut ChaCha8Rng| {
            let dam_storages = split_storage(dor * q_mean * area, n_dams, rng);
            let capacity = dam_storages.iter().sum::<f64>() / area;
            SyntheticBasinSpec {
                gauge_id: id,
                attribute_seed: rng.random(),
                reservoir: Some(ReservoirSpec {
                    capacity,
                    target_fraction: 0.5,
                    rule,
                }),
                dam_storages,
                ..zero.clone()
            }
        };
        let small_dor = rng.random_range(0.004..0.012);
        let small_rule = ReleaseRule::Linear {
            rate: 0.3,
            baseline: 0.0,
        };
        let small = regulated(format!("S{i:03}"), small_dor, 1, small_rule, &mut rng);
        let large_dor = rng.random_range(0.25..0.6);
        let large_rule = ReleaseRule::Linear {
            rate: rng.random_range(0.01..0.03),
            baseline: 0.4 * q_mean / 365.25 / 1000.0,
        };
        let n_large = rng.random_range(1..=3);
        let large = regulated(format!("L{i:03}"), large_dor, n_large, large_rule, &mut rng);
        specs.extend([zero, small, large]);
    }
    Ok(specs)
}

/// Generates `n_per_regime` basins for each of the zero, small and large regimes.
pub fn generate_suite(n_per_regime: usize, n_days: usize, master_seed: u64) -> Result<Dataset> {
    let specs = suite_specs(n_per_regime, n_days, master_seed)?;
    let generated = specs
        .par_iter()
        .map(|s| generate_basin(s, n_days))
        .collect::<Result<Vec<_>>>()?;
    for (spec, g) in specs.iter().zip(&generated) {
        let intended = match spec.gauge_id.as_bytes()[0] {
            b'Z' => DorCategory::Zero,
            b'S' => DorCategory::Small,
            _ => DorCategory::Large,
        };
        if g.category != intended {
            return Err(Error::Domain(format!(
                "{} generated as {} instead of {}",
                spec.gauge_id,
                g.category.as_str(),
                intended.as_str()
            )));
        }
    }
    Dataset::new(generated.into_iter().map(|g| g.basin).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(reservoir: Option<ReservoirSpec>, dams: Vec<f64>) -> SyntheticBasinSpec {
        SyntheticBasinSpec {
            gauge_id: "X".into(),
            ecoregion: "8.1".into(),
            rng_seed: 7,
            attribute_seed: 8,
            start_date: default_start_date(),
            area: 100.0,
            precip: PrecipParams {
                wet_prob: 0.3,
                gamma_shape: 0.8,
                gamma_scale: 10.0,
                seasonal_amplitude: 0.3,
                seasonal_phase: 0.0,
            },
            k: 10.0,
            reservoir,
            dam_storages: dams,
        }
    }

    #[test]
    fn zero_capacity_is_zero_regime() {
        let g = generate_basin(&spec(None, vec![]), 800).unwrap();
        assert_eq!(g.category, DorCategory::Zero);
        assert!(g.balance.relative_residual() < 1e-6);
    }

    #[test]
    fn half_year_storage_is_large_regime() {
        let g0 = generate_basin(&spec(None, vec![]), 1000).unwrap();
        let q = g0.basin.record.mean_annual_runoff;
        let cap = (0.5 * q * 100.0 / 1000.0).round() * 1000.0 / 100.0;
        let res = ReservoirSpec {
            capacity: cap,
            target_fraction: 0.5,
            rule: ReleaseRule::Linear { rate: 0.02, baseline: 0.1 },
        };
        let g = generate_basin(&spec(Some(res), vec![cap * 100.0]), 1000).unwrap();
        assert_eq!(g.category, DorCategory::Large);
        assert!(g.balance.relative_residual() < 1e-6);
    }

    #[test]
    fn spill_only_conserves_mass() {
        let res = ReservoirSpec {
            capacity: 50_000.0,
            target_fraction: 0.2,
            rule: ReleaseRule::SpillOnly,
        };
        let g = generate_basin(&spec(Some(res), vec![5_000_000.0]), 900).unwrap();
        assert!(g.balance.relative_residual() < 1e-6);
    }

    #[test]
    fn short_horizon_rejected() {
        assert!(generate_basin(&spec(None, vec![]), 729).is_err());
    }

    #[test]
    fn mismatched_dams_rejected() {
        let res = ReservoirSpec {
            capacity: 1000.0,
            target_fraction: 0.5,
            rule: ReleaseRule::SpillOnly,
        };
        assert!(generate_basin(&spec(Some(res), vec![1.0]), 800).is_err());
    }

    #[test]
    fn storages_split_in_whole_megaliters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = split_storage(1_234_567.0, 3, &mut rng);
        assert_eq!(parts.iter().sum::<f64>(), 1_235_000.0);
        assert!(parts.iter().all(|p| p % 1000.0 == 0.0 && *p > 0.0));
    }
}
