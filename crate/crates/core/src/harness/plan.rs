use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::averaging::AveragingVariant;
use crate::metrics::Grouping;
use crate::policy::SelectionStrategy;
use crate::synth::TaskSpec;
use crate::trainer::{ModelSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    FewShot,
}

/// One hyperparameter cell of a soup. Divergent settings are left out by
/// simply not listing them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoupCell {
    pub peak_lr: f64,
    #[serde(default = "default_true")]
    pub scheduler: bool,
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![100, 200, 300, 400, 500]
}

fn default_shot_seeds() -> Vec<u64> {
    (42..=46).collect()
}

fn default_strategies() -> Vec<SelectionStrategy> {
    SelectionStrategy::ALL.to_vec()
}

fn default_ensemble_runs() -> usize {
    4
}

/// A full sweep description, read from JSON.
///
/// In zero-shot mode `learning_rates` sweeps the training peak rate; in
/// few-shot mode it sweeps the peak rate of the few-shot phase while the
/// source phase always uses `train`. The source phase is a single run
/// seeded by `train.seed`; `seeds` then vary only the few-shot runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Few-shot only.
    #[serde(default)]
    pub shots: Vec<usize>,
    /// Few-shot only; one shot set per seed.
    #[serde(default = "default_shot_seeds")]
    pub shot_seeds: Vec<u64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<SelectionStrategy>,
    /// Run-level variants (`ra-last`, `ra-ca`, `soup-last`, `soup-ca`).
    #[serde(default)]
    pub variants: Vec<AveragingVariant>,
    #[serde(default = "default_ensemble_runs")]
    pub ensemble_runs: usize,
    #[serde(default)]
    pub soup_grid: Vec<SoupCell>,
    /// Also report unfrozen run averages next to the curriculum ones.
    #[serde(default)]
    pub naive_ensemble: bool,
    #[serde(default)]
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub grouping: Grouping,
    pub train: TrainConfig,
    /// Few-shot phase settings; `train` when absent.
    #[serde(default)]
    pub few_shot: Option<TrainConfig>,
    pub model: ModelSpec,
    pub task: TaskSpec,
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Plan(e.to_string()))
    }

    /// Fills defaults that depend on other fields and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        if self.learning_rates.is_empty() {
            let base = match self.mode {
                Mode::ZeroShot => &self.train,
                Mode::FewShot => self.few_shot.as_ref().unwrap_or(&self.train),
            };
            self.learning_rates.push(base.peak_lr);
        }
        if self.mode == Mode::FewShot && self.few_shot.is_none() {
            self.few_shot = Some(self.train.clone());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Plan(msg));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.strategies.is_empty() && self.variants.is_empty() {
            return bad("nothing to evaluate: no strategies and no variants".into());
        }
        if self.strategies.iter().collect::<BTreeSet<_>>().len() != self.strategies.len() {
            return bad("strategies listed twice".into());
        }
        if self.variants.iter().collect::<BTreeSet<_>>().len() != self.variants.len() {
            return bad("variants listed twice".into());
        }
        if self.variants.contains(&AveragingVariant::Ca) {
            return bad("CA is a selection strategy, list it under strategies".into());
        }
        if self.variants.iter().any(|v| !v.is_soup()) && self.ensemble_runs == 0 {
            return bad("run averaging needs ensemble_runs >= 1".into());
        }
        if self.variants.iter().any(|v| v.is_soup()) && self.soup_grid.is_empty() {
            return bad("soup variants need a non-empty soup_grid".into());
        }
        for (i, cell) in self.soup_grid.iter().enumerate() {
            if !(cell.peak_lr.is_finite() && cell.peak_lr > 0.0) {
                return bad(format!("soup cell {i} has an invalid learning rate"));
            }
            if self.soup_grid[..i].contains(cell) {
                return bad(format!("soup cell {i} is listed twice"));
            }
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if self.learning_rates.iter().map(|lr| lr.to_bits()).collect::<BTreeSet<_>>().len()
            != self.learning_rates.len()
        {
            return bad("learning rates listed twice".into());
        }

        let configs = std::iter::once(&self.train).chain(self.few_shot.as_ref());
        for config in configs {
            // A zero snapshot count is resolved per run against its data.
            TrainConfig { snapshots: config.snapshots.max(1), ..config.clone() }.validate()?;
            if config.freeze_classifier_from.is_some() {
                return bad("freeze_classifier_from is managed by the harness".into());
            }
        }

        let family = self.model.family;
        if family.inputs() != self.task.feature_dim || family.classes() != self.task.n_classes {
            return bad(format!(
                "model expects {} inputs and {} classes, task has {} and {}",
                family.inputs(),
                family.classes(),
                self.task.feature_dim,
                self.task.n_classes
            ));
        }

        match self.mode {
            Mode::ZeroShot => {
                if !self.shots.is_empty() {
                    return bad("shots apply to few-shot mode only".into());
                }
            }
            Mode::FewShot => {
                if self.shots.is_empty() || self.shots.contains(&0) {
                    return bad("few-shot mode needs positive shot counts".into());
                }
                if self.shot_seeds.is_empty() {
                    return bad("few-shot mode needs at least one shot seed".into());
                }
                let smallest = *self.shots.iter().min().expect("non-empty");
                let largest = *self.shots.iter().max().expect("non-empty");
                if largest >= self.task.sizes.target_dev {
                    return bad(format!(
                        "{largest} shots leave no validation data from {} target-dev examples",
                        self.task.sizes.target_dev
                    ));
                }
                let quota = self.few_shot.as_ref().unwrap_or(&self.train).per_language_quota;
                if quota > smallest {
                    return bad(format!("per-language quota {quota} exceeds the smallest shot count {smallest}"));
                }
            }
        }
        Ok(())
    }

    pub fn few_shot_config(&self) -> &TrainConfig {
        self.few_shot.as_ref().unwrap_or(&self.train)
    }
}

/// Everything one standalone training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub task: TaskSpec,
}
