//! Deterministic desk-scale trainer.
//!
//! A run is strictly sequential: compose a balanced batch, compute one loss
//! and gradient per language, combine them (plain mean or gradient
//! surgery), take an AdamW step, and save a snapshot whenever the schedule
//! says so. Given the same config, initialization and data, the saved
//! snapshots are bitwise identical.

mod model;
mod optim;
mod surgery;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use model::{
    accuracy_by_language, classifier_cosine, forward_loss_and_grad, Gradients, ModelFamily,
    ModelParams, ParamTensor, Partition, BODY_BIAS, BODY_WEIGHT, CLASSIFIER_BIAS,
    CLASSIFIER_WEIGHT, GLOBAL_STEP, SNAPSHOT_DTYPE,
};
pub use optim::{adamw_step, adamw_update, lr_at, warmup_steps, AdamW, OptimizerState};
pub use surgery::{balanced_loss, gs_project, project_one, GradientSet};

use crate::averaging::{AverageError, RunSet, SnapshotSet};
use crate::policy::SnapshotSchedule;
use crate::rng::SplitMix64;
use crate::synth::Example;
use crate::tensor_store::{load_checkpoint, CheckpointRef, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient or loss")]
    NonFinite,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("gradient surgery: {0}")]
    Surgery(String),
    #[error("language {language:?} has {available} training examples, a batch needs {quota}")]
    DataExhausted { language: String, available: usize, quota: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Average(#[from] AverageError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_true() -> bool {
    true
}

/// Optimizer, schedule, batching and freezing settings for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// `0` (or absent) means one snapshot per epoch, see [`TrainConfig::per_epoch`].
    #[serde(default)]
    pub snapshots: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub per_language_quota: usize,
    pub seed: u64,
    pub gradient_surgery: bool,
    /// Checkpoint whose classifier tensors are loaded and kept fixed.
    #[serde(default)]
    pub freeze_classifier_from: Option<PathBuf>,
    /// `false` runs at the peak rate throughout.
    #[serde(default = "default_true")]
    pub scheduler: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            snapshots: 10,
            peak_lr: 2e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            per_language_quota: 4,
            seed: 42,
            gradient_surgery: false,
            freeze_classifier_from: None,
            scheduler: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.snapshots == 0 {
            return bad("per-epoch snapshot count not resolved; call per_epoch first".into());
        }
        if self.snapshots > self.total_steps {
            return bad(format!("snapshots must be in 1..={}", self.total_steps));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return bad(format!("peak_lr {} must be finite and non-negative", self.peak_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.per_language_quota == 0 {
            return bad("per_language_quota must be at least 1".into());
        }
        Ok(())
    }

    /// Resolves `snapshots == 0` to the number of whole epochs over `data`
    /// (at least one, at most `total_steps`), so snapshots fall at epoch
    /// ends. Explicit counts are kept.
    pub fn per_epoch(&self, data: &TrainData) -> TrainConfig {
        let mut out = self.clone();
        if out.snapshots == 0 {
            let epoch = data.steps_per_epoch(self.per_language_quota);
            out.snapshots = (self.total_steps / epoch).clamp(1, self.total_steps.max(1));
        }
        out
    }

    pub fn schedule(&self) -> Result<SnapshotSchedule> {
        crate::policy::make_schedule(self.total_steps, self.snapshots)
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Model family plus the seed of the shared starting body.
///
/// Every run starts from the same body (the stand-in for a pretrained
/// encoder); only the classifier initialization depends on the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub pretrained_seed: u64,
}

impl ModelSpec {
    pub fn init(&self, run_seed: u64) -> ModelParams {
        ModelParams::init(self.family, self.pretrained_seed, run_seed)
    }
}

/// Training examples grouped by language.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    groups: BTreeMap<String, Vec<Example>>,
}

impl TrainData {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut groups: BTreeMap<String, Vec<Example>> = BTreeMap::new();
        for e in examples {
            groups.entry(e.language.clone()).or_default().push(e.clone());
        }
        Self { groups }
    }

    pub fn add(&mut self, examples: impl IntoIterator<Item = Example>) {
        for e in examples {
            self.groups.entry(e.language.clone()).or_default().push(e);
        }
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<Example>> {
        &self.groups
    }

    /// Steps in one epoch: one pass over the smallest language.
    pub fn steps_per_epoch(&self, quota: usize) -> usize {
        self.groups.values().map(|g| g.len() / quota.max(1)).min().unwrap_or(0).max(1)
    }
}

/// Per-language cursors over independently shuffled orders; a language is
/// reshuffled whenever fewer than `quota` unread examples remain.
struct BatchSampler<'a> {
    quota: usize,
    streams: Vec<LanguageStream<'a>>,
}

struct LanguageStream<'a> {
    language: &'a str,
    examples: &'a [Example],
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl<'a> BatchSampler<'a> {
    fn new(data: &'a TrainData, quota: usize, seed: u64) -> Result<Self> {
        if data.groups.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut streams = Vec::new();
        for (language, examples) in &data.groups {
            if examples.len() < quota {
                return Err(TrainError::DataExhausted {
                    language: language.clone(),
                    available: examples.len(),
                    quota,
                });
            }
            let mut rng = SplitMix64::for_stream(seed, &format!("batches/{language}"));
            let mut order: Vec<usize> = (0..examples.len()).collect();
            rng.shuffle(&mut order);
            streams.push(LanguageStream { language, examples, order, cursor: 0, rng });
        }
        Ok(Self { quota, streams })
    }

    fn next_batch(&mut self) -> Vec<(&'a str, Vec<&'a Example>)> {
        let quota = self.quota;
        self.streams
            .iter_mut()
            .map(|s| {
                if s.cursor + quota > s.order.len() {
                    s.rng.shuffle(&mut s.order);
                    s.cursor = 0;
                }
                let picked = s.order[s.cursor..s.cursor + quota].iter().map(|&i| &s.examples[i]).collect();
                s.cursor += quota;
                (s.language, picked)
            })
            .collect()
    }
}

/// Snapshots of one run plus its final in-memory parameters.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub snapshots: SnapshotSet,
    pub final_params: ModelParams,
}

/// Runs `config.total_steps` steps from `init`, saving a snapshot at every
/// scheduled step. If `config.freeze_classifier_from` is set, classifier
/// tensors are loaded from that checkpoint and never updated.
pub fn train_run(
    config: &TrainConfig,
    init: &ModelParams,
    data: &TrainData,
    schedule: &SnapshotSchedule,
) -> Result<TrainedRun> {
    let frozen = match &config.freeze_classifier_from {
        Some(path) => Some(ModelParams::from_checkpoint(&load_checkpoint(path)?)?),
        None => None,
    };
    train_run_with(config, init, frozen.as_ref(), data, schedule)
}

/// [`train_run`] with the frozen classifier supplied in memory.
pub fn train_run_with(
    config: &TrainConfig,
    init: &ModelParams,
    frozen_classifier: Option<&ModelParams>,
    data: &TrainData,
    schedule: &SnapshotSchedule,
) -> Result<TrainedRun> {
    config.validate()?;
    if schedule.total_steps() != config.total_steps {
        return Err(TrainError::Config(format!(
            "schedule covers {} steps, config has {}",
            schedule.total_steps(),
            config.total_steps
        )));
    }

    let mut params = init.clone();
    if let Some(source) = frozen_classifier {
        params.set_classifier_from(source)?;
    }
    let trainable: Vec<bool> = params
        .tensors()
        .iter()
        .map(|t| frozen_classifier.is_none() || t.partition != Partition::Classifier)
        .collect();
    let hp = AdamW::from(config);
    let mut state = OptimizerState::new(&params);
    let mut sampler = BatchSampler::new(data, config.per_language_quota, config.seed)?;
    let mut holdout_rng = SplitMix64::for_stream(config.seed, "gradient-surgery");
    let use_surgery = config.gradient_surgery && data.groups.len() >= 2;

    let mut snapshots = Vec::with_capacity(schedule.count());
    for step in 1..=config.total_steps {
        let batch = sampler.next_batch();
        let mut per_language = Vec::with_capacity(batch.len());
        for (language, examples) in &batch {
            let (loss, grads) = forward_loss_and_grad(&params, examples)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite);
            }
            per_language.push((*language, grads));
        }

        let grads = if use_surgery {
            let set = GradientSet::new(
                per_language.iter().map(|(l, g)| (l.to_string(), g.flatten(&trainable))).collect(),
            )?;
            let holdout = set.pick_holdout(&mut holdout_rng).to_string();
            Gradients::unflatten(&gs_project(&set, &holdout)?, &params, &trainable)
        } else {
            let mut mean = Gradients::zeros_like(&params);
            let w = 1.0 / per_language.len() as f64;
            per_language.iter().for_each(|(_, g)| mean.add_scaled(g, w));
            mean
        };

        let lr = lr_at(step, config)?;
        adamw_step(&mut params, &grads, &mut state, lr, &hp, &trainable)?;

        if schedule.contains(step) {
            let cp = params.to_checkpoint(step);
            snapshots.push((step, CheckpointRef::from_checkpoint(&cp)?));
        }
    }

    let run_id = format!("seed-{}", config.seed);
    let snapshots = SnapshotSet::new(run_id, config.total_steps, snapshots)?;
    Ok(TrainedRun { snapshots, final_params: params })
}

/// Output of [`aligned_ensemble_curriculum`].
#[derive(Clone, Debug)]
pub struct Curriculum {
    /// The unconstrained first run whose classifier the others share.
    pub anchor: TrainedRun,
    pub runs: RunSet,
}

/// Trains run 0 normally with `base.seed`, then `runs` more runs with seeds
/// `base.seed + 1 ..= base.seed + runs`, each with its classifier frozen to
/// run 0's final saved classifier.
pub fn aligned_ensemble_curriculum(
    base: &TrainConfig,
    runs: usize,
    model: &ModelSpec,
    data: &TrainData,
) -> Result<Curriculum> {
    if runs == 0 {
        return Err(TrainError::Config("ensemble needs at least one run".into()));
    }
    let schedule = base.schedule()?;
    let anchor_config = TrainConfig { freeze_classifier_from: None, ..base.clone() };
    let anchor = train_run_with(&anchor_config, &model.init(base.seed), None, data, &schedule)?;
    let runs = aligned_runs(base, &anchor, runs, model, data)?;
    Ok(Curriculum { anchor, runs })
}

/// The frozen half of [`aligned_ensemble_curriculum`] for an anchor that was
/// already trained with `base`.
pub fn aligned_runs(
    base: &TrainConfig,
    anchor: &TrainedRun,
    runs: usize,
    model: &ModelSpec,
    data: &TrainData,
) -> Result<RunSet> {
    if runs == 0 {
        return Err(TrainError::Config("ensemble needs at least one run".into()));
    }
    let schedule = base.schedule()?;
    // Freeze to the saved (storage-precision) classifier, not the in-memory one.
    let anchor_final = ModelParams::from_ref(anchor.snapshots.last())?;
    let mut members = Vec::with_capacity(runs);
    for i in 1..=runs as u64 {
        let seed = base.seed + i;
        let config = TrainConfig { seed, freeze_classifier_from: None, ..base.clone() };
        let run = train_run_with(&config, &model.init(seed), Some(&anchor_final), data, &schedule)?;
        members.push(run.snapshots);
    }
    Ok(RunSet::new(members)?)
}

/// Independent, unfrozen runs with the same seeds the curriculum would use.
pub fn independent_runs(
    base: &TrainConfig,
    runs: usize,
    model: &ModelSpec,
    data: &TrainData,
) -> Result<RunSet> {
    if runs == 0 {
        return Err(TrainError::Config("ensemble needs at least one run".into()));
    }
    let schedule = base.schedule()?;
    let mut members = Vec::with_capacity(runs);
    for i in 1..=runs as u64 {
        let seed = base.seed + i;
        let config = TrainConfig { seed, freeze_classifier_from: None, ..base.clone() };
        members.push(train_run_with(&config, &model.init(seed), None, data, &schedule)?.snapshots);
    }
    Ok(RunSet::new(members)?)
}
