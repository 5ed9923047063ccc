//! Declarative experiment plans: temporal splits, stratified training-set
//! compositions and the ungauged-basin transfer sub-experiments.
//!
//! A plan is resolved against a [`Stratification`] into explicit basin ids
//! and then run end to end by [`run_experiment`], which writes every artifact
//! under `<out>/<plan name>/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_normalization, fit_normalization, Basin, Dataset, DateRange, NormalizationSpec};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic, write_csv, write_json};
use crate::lstm::{Checkpoint, LstmWeights};
use crate::metrics::{self, MetricsRecord, Summary, METRIC_NAMES};
use crate::reservoir::{DorCategory, Stratification};
use crate::trainer::{predict_ensemble, train_with, EnsembleModel, EpochLog, TrainingConfig};

pub const COMPOSITIONS: [&str; 7] = ["Z", "S", "L", "ZS", "ZL", "SL", "CONUS"];

/// A union of dor categories and explicit gauge ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasinSetExpr {
    pub categories: Vec<DorCategory>,
    pub ids: Vec<String>,
}

impl BasinSetExpr {
    pub fn ids(ids: impl IntoIterator<Item = String>) -> Self {
        Self {
            categories: Vec::new(),
            ids: ids.into_iter().collect(),
        }
    }

    pub fn categories(categories: impl IntoIterator<Item = DorCategory>) -> Self {
        Self {
            categories: categories.into_iter().collect(),
            ids: Vec::new(),
        }
    }

    /// Sorted, de-duplicated ids.
    pub fn resolve(&self, strat: &Stratification) -> Vec<String> {
        let mut out: BTreeSet<String> = self.ids.iter().cloned().collect();
        for c in &self.categories {
            out.extend(strat.group(*c).iter().cloned());
        }
        out.into_iter().collect()
    }
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

pub fn default_train_window() -> DateRange {
    DateRange {
        start: date(1990, 1, 1),
        end: date(1999, 12, 31),
    }
}

pub fn default_test_window() -> DateRange {
    DateRange {
        start: date(2000, 1, 1),
        end: date(2009, 12, 31),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub train: BasinSetExpr,
    /// Named test sets, each evaluated over `test_window`.
    pub tests: BTreeMap<String, BasinSetExpr>,
    #[serde(default = "default_train_window")]
    pub train_window: DateRange,
    #[serde(default = "default_test_window")]
    pub test_window: DateRange,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Save a checkpoint every this many epochs; 0 keeps only the last one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ExperimentPlan {
    pub fn new(name: impl Into<String>, train: BasinSetExpr, training: TrainingConfig) -> Self {
        Self {
            name: name.into(),
            train,
            tests: BTreeMap::new(),
            train_window: default_train_window(),
            test_window: default_test_window(),
            training,
            checkpoint_every: 0,
        }
    }

    pub fn with_test(mut self, name: impl Into<String>, set: BasinSetExpr) -> Self {
        self.tests.insert(name.into(), set);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let name_ok = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && self.name != "."
            && self.name != "..";
        if !name_ok {
            return Err(Error::InvalidInput(format!(
                "plan name {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.name
            )));
        }
        if self.tests.is_empty() {
            return Err(Error::InvalidInput(format!("plan {}: no test sets", self.name)));
        }
        for t in self.tests.keys() {
            if t.is_empty() || !t.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
                return Err(Error::InvalidInput(format!("plan {}: bad test set name {t:?}", self.name)));
            }
        }
        if self.train_window.overlaps(&self.test_window) || self.train_window.end >= self.test_window.start {
            return Err(Error::InvalidInput(format!(
                "plan {}: train window must precede and not overlap the test window",
                self.name
            )));
        }
        if self.training.seeds.is_empty() {
            return Err(Error::InvalidInput(format!("plan {}: no seeds", self.name)));
        }
        self.training.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

fn composition_categories(composition: &str) -> Result<Vec<DorCategory>> {
    match composition.to_ascii_uppercase().as_str() {
        "CONUS" => Ok(DorCategory::ALL.to_vec()),
        c if !c.is_empty() && COMPOSITIONS.contains(&c) => c.chars().map(|l| l.to_string().parse()).collect(),
        _ => Err(Error::UnknownComposition(composition.to_string())),
    }
}

/// Temporal-generalization plan training on a named composition.
///
/// The training set is resolved to explicit ids; one test set per category
/// in the composition is recorded so results can be reported per group.
pub fn build_plan(
    name: &str,
    strat: &Stratification,
    composition: &str,
    training: TrainingConfig,
) -> Result<ExperimentPlan> {
    let cats = composition_categories(composition)?;
    let train = BasinSetExpr::ids(BasinSetExpr::categories(cats.clone()).resolve(strat));
    let mut plan = ExperimentPlan::new(name, train, training);
    for c in cats {
        plan = plan.with_test(c.letter().to_string(), BasinSetExpr::ids(strat.group(c).to_vec()));
    }
    Ok(plan)
}

/// A 1:1 split of one basin group into training and ungauged halves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubSplit {
    pub category: String,
    pub train_ids: Vec<String>,
    pub pub_ids: Vec<String>,
}

/// Halves `basins` (gauge id, ecoregion) within each ecoregion.
///
/// Each ecoregion is shuffled and split in half; the odd basin of successive
/// odd-sized ecoregions goes alternately to the training and ungauged side.
pub fn split_pub(category: &str, basins: &[(String, String)], seed: u64) -> PubSplit {
    let mut by_region: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, eco) in basins {
        by_region.entry(eco.as_str()).or_default().push(id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut pub_ = Vec::new();
    let mut extra_to_train = true;
    for ids in by_region.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let half = ids.len() / 2;
        train.extend(ids[..half].iter().map(|s| s.to_string()));
        pub_.extend(ids[half..2 * half].iter().map(|s| s.to_string()));
        if ids.len() % 2 == 1 {
            let last = ids[ids.len() - 1].to_string();
            if extra_to_train {
                train.push(last);
            } else {
                pub_.push(last);
            }
            extra_to_train = !extra_to_train;
        }
    }
    train.sort();
    pub_.sort();
    PubSplit {
        category: category.to_string(),
        train_ids: train,
        pub_ids: pub_,
    }
}

fn with_ecoregion(strat: &Stratification, ids: &[String]) -> Result<Vec<(String, String)>> {
    ids.iter()
        .map(|id| {
            strat
                .get(id)
                .map(|b| (id.clone(), b.ecoregion.clone()))
                .ok_or_else(|| Error::UnknownBasin(id.clone()))
        })
        .collect()
}

/// The ungauged-basin plans of one transfer sub-experiment.
///
/// Sub-experiments 1, 2 and 3 pair zero/small, zero/large and small/large
/// basins. Each yields a plan trained on one half of the first group and one
/// trained on the union of both groups' training halves. Sub-experiment 4
/// splits `reference_ids` and tests on it and every basin outside it.
/// Transfer plans use the first configured seed only.
pub fn pub_plans(
    sub_experiment: u8,
    strat: &Stratification,
    reference_ids: Option<&[String]>,
    split_seed: u64,
    training: TrainingConfig,
) -> Result<(Vec<PubSplit>, Vec<ExperimentPlan>)> {
    let mut training = training;
    training.seeds.truncate(1);
    let ids = |s: &[String]| BasinSetExpr::ids(s.to_vec());
    let split_cat = |c: DorCategory, stream: u64| -> Result<PubSplit> {
        let basins = with_ecoregion(strat, strat.group(c))?;
        Ok(split_pub(&c.letter().to_string(), &basins, split_seed.wrapping_add(stream)))
    };
    match sub_experiment {
        1..=3 => {
            let (a, b) = match sub_experiment {
                1 => (DorCategory::Zero, DorCategory::Small),
                2 => (DorCategory::Zero, DorCategory::Large),
                _ => (DorCategory::Small, DorCategory::Large),
            };
            let (la, lb) = (a.letter(), b.letter());
            let sa = split_cat(a, 0)?;
            let sb = split_cat(b, 1)?;
            let single = ExperimentPlan::new(format!("pub{sub_experiment}-train-{la}"), ids(&sa.train_ids), training.clone())
                .with_test(format!("train-{la}"), ids(&sa.train_ids))
                .with_test(format!("pub-{la}"), ids(&sa.pub_ids))
                .with_test(format!("pub-{lb}"), ids(&sb.pub_ids));
            let union: Vec<String> = sa.train_ids.iter().chain(&sb.train_ids).cloned().collect();
            let mixed = ExperimentPlan::new(format!("pub{sub_experiment}-train-{la}{lb}"), ids(&union), training)
                .with_test(format!("pub-{la}"), ids(&sa.pub_ids))
                .with_test(format!("pub-{lb}"), ids(&sb.pub_ids));
            Ok((vec![sa, sb], vec![single, mixed]))
        }
        4 => {
            let reference = reference_ids.ok_or_else(|| {
                Error::InvalidInput("sub-experiment 4 needs a reference basin id list".into())
            })?;
            let reference: BTreeSet<&String> = reference.iter().collect();
            let ref_ids: Vec<String> = reference.iter().map(|s| s.to_string()).collect();
            let sc = split_pub("c", &with_ecoregion(strat, &ref_ids)?, split_seed);
            let mut plan = ExperimentPlan::new("pub4-train-c", ids(&sc.train_ids), training)
                .with_test("train-c", ids(&sc.train_ids))
                .with_test("pub-c", ids(&sc.pub_ids));
            for c in DorCategory::ALL {
                let outside: Vec<String> = strat.group(c).iter().filter(|id| !reference.contains(id)).cloned().collect();
                plan = plan.with_test(format!("pub-{}", c.letter()), ids(&outside));
            }
            Ok((vec![sc], vec![plan]))
        }
        n => Err(Error::InvalidInput(format!("unknown sub-experiment {n}; expected 1 to 4"))),
    }
}

/// Where and how to run an experiment.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_root: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Everything needed to re-run an experiment exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan: ExperimentPlan,
    pub dataset_hash: String,
    pub train_ids: Vec<String>,
    pub test_ids: BTreeMap<String, Vec<String>>,
    pub status: RunStatus,
    /// `(seed, error)` for every seed that failed.
    pub failures: Vec<(u64, String)>,
    pub software_version: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub dir: PathBuf,
    /// Per test set, `(gauge_id, metrics)` sorted by id.
    pub metrics: BTreeMap<String, Vec<(String, MetricsRecord)>>,
    /// Per test set and metric name.
    pub summaries: BTreeMap<String, BTreeMap<String, Summary>>,
    pub log: Vec<EpochLog>,
}

impl ExperimentResult {
    pub fn median(&self, test_set: &str, metric: &str) -> Option<f64> {
        self.summaries.get(test_set)?.get(metric)?.median
    }
}

pub fn metrics_header() -> Vec<&'static str> {
    let mut h = vec!["gauge_id"];
    h.extend(METRIC_NAMES);
    h
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricsRecord)]) -> Result<()> {
    write_csv(
        path,
        &metrics_header(),
        rows.iter().map(|(id, m)| {
            let mut r = vec![id.clone()];
            r.extend(m.values().iter().map(|v| v.to_csv()));
            r
        }),
    )
}

pub fn summary_header() -> [&'static str; 9] {
    ["metric", "n_finite", "n_infinite", "n_undefined", "min", "q1", "median", "q3", "max"]
}

pub fn write_summary_csv(path: impl AsRef<Path>, summaries: &BTreeMap<String, Summary>) -> Result<()> {
    let rows = METRIC_NAMES.iter().filter_map(|name| {
        let s = summaries.get(*name)?;
        let mut r = vec![
            name.to_string(),
            s.n_finite.to_string(),
            s.n_infinite.to_string(),
            s.n_undefined.to_string(),
        ];
        match s.five_number {
            Some(f) => r.extend(f.iter().map(|v| fmt_f64(*v))),
            None => r.extend(std::iter::repeat_n("nan".to_string(), 5)),
        }
        Some(r)
    });
    write_csv(path, &summary_header(), rows)
}

pub fn summarize_records(rows: &[(String, MetricsRecord)]) -> BTreeMap<String, Summary> {
    METRIC_NAMES
        .iter()
        .map(|name| {
            let values: Vec<_> = rows.iter().filter_map(|(_, m)| m.get(name)).collect();
            (name.to_string(), metrics::summarize(&values))
        })
        .collect()
}

/// Ensemble metrics for every basin in `ids` over `window`.
pub fn evaluate_basins(
    model: &EnsembleModel,
    basins: &[&Basin],
    window: &DateRange,
    warmup_days: usize,
) -> Result<Vec<(String, MetricsRecord)>> {
    basins
        .par_iter()
        .map(|b| {
            let sim = predict_ensemble(model, b, window, warmup_days)?;
            let (a, z) = crate::data::window_indices(b.flow.start_date, b.flow.len(), window)?;
            let record = metrics::evaluate(&b.flow.values[a..z], &sim)?;
            Ok((b.gauge_id().to_string(), record))
        })
        .collect()
}

fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    write_csv(
        dir.join("training_log.csv"),
        &["seed", "epoch", "mean_loss", "wall_time_s"],
        log.iter().map(|e| {
            [
                e.seed.to_string(),
                e.epoch.to_string(),
                fmt_f64(e.mean_loss),
                format!("{:.3}", e.wall_time_s),
            ]
        }),
    )
}

pub fn checkpoint_path(dir: &Path, seed: u64, epoch: usize) -> PathBuf {
    dir.join(seed.to_string()).join(format!("epoch{epoch}.json"))
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))
}

/// Output of [`train_ensemble`]. Seeds that failed are listed in `failures`
/// and have no member.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub normalization: NormalizationSpec,
    /// `(seed, final weights, epochs)` for every seed that finished.
    pub members: Vec<(u64, LstmWeights, usize)>,
    pub log: Vec<EpochLog>,
    pub failures: Vec<(u64, String)>,
}

impl EnsembleRun {
    pub fn model(&self) -> EnsembleModel {
        EnsembleModel::new(self.normalization.clone(), self.members.clone())
    }
}

/// Fits normalization on `basins` over `window` and trains one model per
/// configured seed, `workers` seeds at a time.
///
/// Writes `normalization.json`, per-seed checkpoints every `checkpoint_every`
/// epochs (0 for final only) and `training_log.csv` under `dir`.
pub fn train_ensemble(
    basins: &[&Basin],
    window: DateRange,
    config: &TrainingConfig,
    dir: &Path,
    checkpoint_every: usize,
    workers: usize,
) -> Result<EnsembleRun> {
    config.validate()?;
    let normalization = fit_normalization(basins, window)?;
    write_json(dir.join("normalization.json"), &normalization)?;
    let tensors = basins
        .iter()
        .map(|b| apply_normalization(&normalization, b, &window))
        .collect::<Result<Vec<_>>>()?;

    let outcomes: Vec<(u64, Result<_>)> = worker_pool(workers)?.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let r = train_with(&tensors, config, seed, |entry, w| {
                    if checkpoint_every > 0 && entry.epoch % checkpoint_every == 0 && entry.epoch != config.epochs {
                        Checkpoint::new(w, seed, entry.epoch).save(checkpoint_path(dir, seed, entry.epoch))?;
                    }
                    Ok(())
                });
                if let Ok(o) = &r {
                    Checkpoint::new(&o.weights, seed, config.epochs).save(checkpoint_path(dir, seed, config.epochs))?;
                }
                Ok::<_, Error>((seed, r))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut run = EnsembleRun {
        normalization,
        members: Vec::new(),
        log: Vec::new(),
        failures: Vec::new(),
    };
    for (seed, r) in outcomes {
        match r {
            Ok(o) => {
                run.log.extend(o.log);
                run.members.push((seed, o.weights, config.epochs));
            }
            Err(e) => {
                log::error!("seed {seed}: {e}");
                run.failures.push((seed, e.to_string()));
            }
        }
    }
    write_log(dir, &run.log)?;
    Ok(run)
}

/// Trains the plan's ensemble, evaluates it on every test set and writes all
/// artifacts.
///
/// If any seed fails the manifest is written with a failed status, artifacts
/// of the other seeds are kept and an error is returned.
pub fn run_experiment(plan: &ExperimentPlan, dataset: &Dataset, strat: &Stratification, opts: &RunOptions) -> Result<ExperimentResult> {
    plan.validate()?;
    let train_ids = plan.train.resolve(strat);
    if train_ids.is_empty() {
        return Err(Error::InvalidInput(format!("plan {}: empty training set", plan.name)));
    }
    let train_basins = dataset.select(&train_ids)?;
    let test_ids: BTreeMap<String, Vec<String>> = plan.tests.iter().map(|(k, v)| (k.clone(), v.resolve(strat))).collect();
    for ids in test_ids.values() {
        dataset.select(ids)?;
    }

    let dir = opts.out_root.join(&plan.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = Manifest {
        plan: plan.clone(),
        dataset_hash: dataset.content_hash(),
        train_ids: train_ids.clone(),
        test_ids: test_ids.clone(),
        status: RunStatus::Failed,
        failures: Vec::new(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
    };

    let config = &plan.training;
    let run = train_ensemble(&train_basins, plan.train_window, config, &dir, plan.checkpoint_every, opts.workers)?;
    if !run.failures.is_empty() {
        manifest.failures = run.failures.clone();
        write_json(dir.join("manifest.json"), &manifest)?;
        let message = manifest
            .failures
            .iter()
            .map(|(s, e)| format!("seed {s}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::ExperimentFailed {
            name: plan.name.clone(),
            message,
        });
    }

    let model = run.model();
    model.save(dir.join("model.json"))?;

    let mut result = ExperimentResult {
        name: plan.name.clone(),
        dir: dir.clone(),
        metrics: BTreeMap::new(),
        summaries: BTreeMap::new(),
        log: run.log,
    };
    let pool = worker_pool(opts.workers)?;
    for (name, ids) in &test_ids {
        let basins = dataset.select(ids)?;
        let rows = pool.install(|| evaluate_basins(&model, &basins, &plan.test_window, config.warmup_days))?;
        write_metrics_csv(dir.join(format!("metrics_{name}.csv")), &rows)?;
        let summaries = summarize_records(&rows);
        write_summary_csv(dir.join(format!("summary_{name}.csv")), &summaries)?;
        result.metrics.insert(name.clone(), rows);
        result.summaries.insert(name.clone(), summaries);
    }
    manifest.status = RunStatus::Completed;
    write_json(dir.join("manifest.json"), &manifest)?;
    write_atomic(dir.join("DONE"), b"")?;
    Ok(result)
}
