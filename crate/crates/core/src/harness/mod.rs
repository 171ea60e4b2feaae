//! Zero-shot and few-shot transfer sweeps over the synthetic task.
//!
//! Every (seed, learning rate, shot set) job is independent and runs on the
//! rayon pool; results are merged in plan order, so a plan always yields the
//! same report bytes regardless of thread count.

mod plan;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use plan::{ExperimentPlan, Mode, SoupCell, TrainJob};
pub use report::{
    emit_report, emit_tables, ExperimentReport, ReportFormat, ResultRow, ResultTable, RunScore,
};

use crate::averaging::{average_runs, AverageError, AveragingVariant, RunSet, SnapshotSet};
use crate::metrics::{aggregate, aggregate_grouped, MetricError};
use crate::policy::{select, EvalRecord, PolicyError, Selection, SelectionStrategy, Split};
use crate::synth::{sample_shots, Example, Role, ShotSpec, SynthError, Task};
use crate::tensor_store::{open_checkpoint, write_checkpoint, CheckpointRef, StoreError};
use crate::trainer::{
    accuracy_by_language, aligned_runs, independent_runs, train_run_with, ModelParams, TrainConfig,
    TrainData, TrainError, TrainedRun, GLOBAL_STEP,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("report: {0}")]
    Report(String),
    #[error("run directory {path}: {reason}")]
    RunDir { path: PathBuf, reason: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Average(#[from] AverageError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Label of the table holding soup results.
pub const SOUP_TABLE: &str = "soup";

/// Label of the table for one learning rate.
pub fn lr_table(lr: f64) -> String {
    format!("lr={lr}")
}

/// Row label of an unfrozen run average.
pub fn naive_label(variant: AveragingVariant) -> String {
    format!("{}-NAIVE", variant.label())
}

/// Runs the whole plan. Nothing is returned unless every job succeeds.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let plan = plan.clone().resolve()?;
    let task = plan.task.generate()?;
    let scores = match plan.mode {
        Mode::ZeroShot => zero_shot(&plan, &task)?,
        Mode::FewShot => few_shot(&plan, &task)?,
    };

    let mut labels: Vec<String> = plan.learning_rates.iter().map(|&lr| lr_table(lr)).collect();
    if plan.variants.iter().any(|v| v.is_soup()) {
        labels.push(SOUP_TABLE.to_string());
    }
    let mut tables = Vec::with_capacity(labels.len());
    for label in labels {
        tables.push(summarize(&label, &scores, &plan)?);
    }
    Ok(ExperimentReport { plan, tables, runs: scores })
}

fn summarize(label: &str, scores: &[RunScore], plan: &ExperimentPlan) -> Result<ResultTable> {
    type Cell<'a> = BTreeMap<(Option<u64>, Option<u64>), &'a BTreeMap<String, f64>>;
    let mut cells: BTreeMap<(&str, usize), Cell> = BTreeMap::new();
    for s in scores.iter().filter(|s| s.table == label) {
        let cell = cells.entry((s.strategy.as_str(), s.shots)).or_default();
        if cell.insert((s.shot_seed, s.seed), &s.scores).is_some() {
            return Err(HarnessError::Report(format!("duplicate score for {} in {label}", s.strategy)));
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    for ((strategy, shots), cell) in cells {
        let grouped = cell.keys().all(|(g, s)| g.is_some() && s.is_some());
        let (mean, std) = if grouped {
            let mut groups: BTreeMap<u64, BTreeMap<u64, BTreeMap<String, f64>>> = BTreeMap::new();
            for ((g, s), v) in &cell {
                groups.entry(g.unwrap()).or_default().insert(s.unwrap(), (*v).clone());
            }
            aggregate_grouped(&groups, plan.grouping)?
        } else {
            let flat: BTreeMap<(Option<u64>, Option<u64>), BTreeMap<String, f64>> =
                cell.iter().map(|(k, v)| (*k, (*v).clone())).collect();
            let keyed: BTreeMap<String, BTreeMap<String, f64>> =
                flat.into_iter().map(|((g, s), v)| (format!("{g:?}/{s:?}"), v)).collect();
            let report = aggregate(&keyed)?;
            (report.mean, report.std)
        };
        rows.push(ResultRow { strategy: strategy.to_string(), shots, mean, std });
    }
    ResultTable::new(label, rows)
}

/// Evaluation splits shared by all runs of one job.
struct EvalSets<'a> {
    source_dev: &'a [Example],
    target_dev: &'a [Example],
    target_test: &'a [Example],
}

/// Per-language test accuracy of every requested strategy on one run.
fn evaluate_strategies(
    run: &SnapshotSet,
    strategies: &[SelectionStrategy],
    sets: &EvalSets,
) -> Result<Vec<(SelectionStrategy, BTreeMap<String, f64>)>> {
    let needs_records =
        strategies.iter().any(|s| matches!(s, SelectionStrategy::SrcDev | SelectionStrategy::TrgDev));
    let needs_steps = strategies.iter().any(|s| *s != SelectionStrategy::Ca);

    let mut records = Vec::new();
    let mut test_by_step = BTreeMap::new();
    if needs_steps {
        for (step, snapshot) in run.snapshots() {
            let params = ModelParams::from_ref(snapshot)?;
            if needs_records {
                records.extend(snapshot_records(*step, &params, sets.source_dev, sets.target_dev));
            }
            test_by_step.insert(*step, accuracy_by_language(&params, sets.target_test));
        }
    }

    let mut out = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let scores = match select(strategy, run, &records)? {
            Selection::Single { step, .. } => test_by_step[&step].clone(),
            Selection::PerLanguage(chosen) => {
                let mut scores = BTreeMap::new();
                for (lang, (step, _)) in chosen {
                    let score = test_by_step[&step].get(&lang).copied().ok_or_else(|| {
                        HarnessError::Plan(format!("language {lang:?} has dev data but no test data"))
                    })?;
                    scores.insert(lang, score);
                }
                scores
            }
            Selection::Averaged(cp) => {
                accuracy_by_language(&ModelParams::from_checkpoint(&cp)?, sets.target_test)
            }
        };
        out.push((strategy, scores));
    }
    Ok(out)
}

fn snapshot_records(step: usize, params: &ModelParams, source_dev: &[Example], target_dev: &[Example]) -> [EvalRecord; 2] {
    [
        EvalRecord::new(step, Split::SourceDev, accuracy_by_language(params, source_dev)),
        EvalRecord::new(step, Split::TargetDev, accuracy_by_language(params, target_dev)),
    ]
}

/// Source-dev and target-dev accuracy records for every snapshot of `run`.
pub fn dev_records(run: &SnapshotSet, source_dev: &[Example], target_dev: &[Example]) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(2 * run.len());
    for (step, snapshot) in run.snapshots() {
        let params = ModelParams::from_ref(snapshot)?;
        records.extend(snapshot_records(*step, &params, source_dev, target_dev));
    }
    Ok(records)
}

fn score_average(runs: &RunSet, variant: AveragingVariant, test: &[Example]) -> Result<BTreeMap<String, f64>> {
    let cp = average_runs(runs, variant)?;
    Ok(accuracy_by_language(&ModelParams::from_checkpoint(&cp)?, test))
}

fn soup_runs(
    plan: &ExperimentPlan,
    base: &TrainConfig,
    init: &ModelParams,
    frozen: Option<&ModelParams>,
    data: &TrainData,
) -> Result<RunSet> {
    let mut members = Vec::with_capacity(plan.soup_grid.len());
    for cell in &plan.soup_grid {
        let config = TrainConfig { peak_lr: cell.peak_lr, scheduler: cell.scheduler, ..base.clone() }.per_epoch(data);
        let run = train_run_with(&config, init, frozen, data, &config.schedule()?)?;
        members.push(run.snapshots);
    }
    Ok(RunSet::new(members)?)
}

fn train_plain(config: &TrainConfig, init: &ModelParams, data: &TrainData) -> Result<TrainedRun> {
    let config = config.per_epoch(data);
    Ok(train_run_with(&config, init, None, data, &config.schedule()?)?)
}

fn zero_shot(plan: &ExperimentPlan, task: &Task) -> Result<Vec<RunScore>> {
    let data = TrainData::from_examples(&task.split(Role::Train).examples);
    let sets = EvalSets {
        source_dev: &task.split(Role::SourceDev).examples,
        target_dev: &task.split(Role::TargetDev).examples,
        target_test: &task.split(Role::TargetTest).examples,
    };
    let run_variants: Vec<AveragingVariant> = plan.variants.iter().copied().filter(|v| !v.is_soup()).collect();
    let soup_variants: Vec<AveragingVariant> = plan.variants.iter().copied().filter(|v| v.is_soup()).collect();

    let mut jobs: Vec<(Option<f64>, u64)> = Vec::new();
    for &lr in &plan.learning_rates {
        jobs.extend(plan.seeds.iter().map(|&s| (Some(lr), s)));
    }
    if !soup_variants.is_empty() {
        jobs.extend(plan.seeds.iter().map(|&s| (None, s)));
    }

    let results = jobs
        .into_par_iter()
        .map(|(lr, seed)| -> Result<Vec<RunScore>> {
            let score = |table: &str, strategy: String, scores| RunScore {
                table: table.to_string(),
                strategy,
                shots: 0,
                shot_seed: None,
                seed: Some(seed),
                scores,
            };
            let mut out = Vec::new();
            let Some(lr) = lr else {
                // Soup cells share one seed and are frozen to the seed's base run.
                let base = TrainConfig { seed, ..plan.train.clone() };
                let anchor = train_plain(&base, &plan.model.init(seed), &data)?;
                let frozen = ModelParams::from_ref(anchor.snapshots.last())?;
                let cell_base = TrainConfig { seed: seed + 1, ..base };
                let soup = soup_runs(plan, &cell_base, &plan.model.init(seed + 1), Some(&frozen), &data)?;
                for &v in &soup_variants {
                    out.push(score(SOUP_TABLE, v.label().to_string(), score_average(&soup, v, sets.target_test)?));
                }
                return Ok(out);
            };

            let table = lr_table(lr);
            let config = TrainConfig { peak_lr: lr, seed, ..plan.train.clone() }.per_epoch(&data);
            let run = train_plain(&config, &plan.model.init(seed), &data)?;
            for (strategy, scores) in evaluate_strategies(&run.snapshots, &plan.strategies, &sets)? {
                out.push(score(&table, strategy.label().to_string(), scores));
            }
            if !run_variants.is_empty() {
                let aligned = aligned_runs(&config, &run, plan.ensemble_runs, &plan.model, &data)?;
                for &v in &run_variants {
                    out.push(score(&table, v.label().to_string(), score_average(&aligned, v, sets.target_test)?));
                }
                if plan.naive_ensemble {
                    let naive = independent_runs(&config, plan.ensemble_runs, &plan.model, &data)?;
                    for &v in &run_variants {
                        out.push(score(&table, naive_label(v), score_average(&naive, v, sets.target_test)?));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// The checkpoint every few-shot run starts from: the saved final snapshot
/// of a single source-language run seeded by `train.seed`.
pub fn few_shot_source(plan: &ExperimentPlan, task: &Task) -> Result<ModelParams> {
    let data = TrainData::from_examples(&task.split(Role::Train).examples);
    let run = train_plain(&plan.train, &plan.model.init(plan.train.seed), &data)?;
    Ok(ModelParams::from_ref(run.snapshots.last())?)
}

fn few_shot(plan: &ExperimentPlan, task: &Task) -> Result<Vec<RunScore>> {
    let source_data = TrainData::from_examples(&task.split(Role::Train).examples);
    let pool = task.split(Role::TargetDev);
    let source_dev = &task.split(Role::SourceDev).examples;
    let target_test = &task.split(Role::TargetTest).examples;
    let run_variants: Vec<AveragingVariant> = plan.variants.iter().copied().filter(|v| !v.is_soup()).collect();
    let soup_variants: Vec<AveragingVariant> = plan.variants.iter().copied().filter(|v| v.is_soup()).collect();

    let source = few_shot_source(plan, task)?;

    let mut jobs: Vec<(Option<f64>, usize, u64)> = Vec::new();
    for &lr in &plan.learning_rates {
        for &shots in &plan.shots {
            jobs.extend(plan.shot_seeds.iter().map(|&q| (Some(lr), shots, q)));
        }
    }
    if !soup_variants.is_empty() {
        for &shots in &plan.shots {
            jobs.extend(plan.shot_seeds.iter().map(|&q| (None, shots, q)));
        }
    }

    let results = jobs
        .into_par_iter()
        .map(|(lr, shots, shot_seed)| -> Result<Vec<RunScore>> {
            let sample = sample_shots(pool, ShotSpec { shots, seed: shot_seed })?;
            let mut data = source_data.clone();
            data.add(sample.shots.into_values().flatten());
            let sets = EvalSets { source_dev, target_dev: &sample.remainder.examples, target_test };
            let score = |table: &str, strategy: String, seed: Option<u64>, scores| RunScore {
                table: table.to_string(),
                strategy,
                shots,
                shot_seed: Some(shot_seed),
                seed,
                scores,
            };
            let mut out = Vec::new();

            let Some(lr) = lr else {
                let seed = plan.seeds[0];
                let config = TrainConfig { seed, ..plan.few_shot_config().clone() };
                let soup = soup_runs(plan, &config, &source, None, &data)?;
                for &v in &soup_variants {
                    out.push(score(SOUP_TABLE, v.label().to_string(), None, score_average(&soup, v, target_test)?));
                }
                return Ok(out);
            };

            let table = lr_table(lr);
            let mut members = Vec::with_capacity(plan.seeds.len());
            for &seed in &plan.seeds {
                let config = TrainConfig { peak_lr: lr, seed, ..plan.few_shot_config().clone() };
                let run = train_plain(&config, &source, &data)?;
                for (strategy, scores) in evaluate_strategies(&run.snapshots, &plan.strategies, &sets)? {
                    out.push(score(&table, strategy.label().to_string(), Some(seed), scores));
                }
                members.push(run.snapshots);
            }
            if !run_variants.is_empty() {
                let runs = RunSet::new(members)?;
                for &v in &run_variants {
                    out.push(score(&table, v.label().to_string(), None, score_average(&runs, v, target_test)?));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// File name of the snapshot saved at `step`.
pub fn snapshot_file_name(step: usize) -> String {
    format!("step-{step:06}.safetensors")
}

/// Writes every snapshot of `run` into `dir` (created if needed).
pub fn save_run(run: &SnapshotSet, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(run.len());
    for (step, snapshot) in run.snapshots() {
        let path = dir.join(snapshot_file_name(*step));
        write_checkpoint(&snapshot.load()?, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Step recorded in a snapshot: the `step` metadata entry, else the
/// integer step tensor.
pub fn snapshot_step(snapshot: &CheckpointRef) -> Option<usize> {
    if let Some(step) = snapshot.metadata().get("step").and_then(|s| s.parse().ok()) {
        return Some(step);
    }
    let (_, tensor) = snapshot.read_tensor(GLOBAL_STEP).ok()?;
    match tensor.data() {
        crate::tensor_store::TensorData::I64(v) if v.len() == 1 && v[0] >= 0 => Some(v[0] as usize),
        _ => None,
    }
}

/// Opens every `.safetensors` file in `dir` as one run ordered by step. The
/// last step is taken as the run length.
pub fn load_run_dir(dir: &Path) -> Result<SnapshotSet> {
    let err = |reason: String| HarnessError::RunDir { path: dir.to_path_buf(), reason };
    let mut snapshots = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("safetensors") {
            continue;
        }
        let snapshot = open_checkpoint(&path)?;
        let step = snapshot_step(&snapshot)
            .ok_or_else(|| err(format!("{} records no step", path.display())))?;
        snapshots.push((step, snapshot));
    }
    snapshots.sort_by_key(|(step, _)| *step);
    let total = snapshots.last().map(|(s, _)| *s).ok_or_else(|| err("no snapshots".into()))?;
    let run_id = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(SnapshotSet::new(run_id, total, snapshots)?)
}
