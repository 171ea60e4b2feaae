//! When to snapshot, and which snapshot(s) each selection strategy returns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::averaging::{average_run_ca, AverageError, SnapshotSet};
use crate::tensor_store::{Checkpoint, CheckpointRef};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("no {split} record for snapshot step {step}")]
    MissingRecord { step: usize, split: Split },
    #[error("more than one {split} record for step {step}")]
    DuplicateRecord { step: usize, split: Split },
    #[error("{split} record at step {step} has no score for language {language:?}")]
    MissingLanguage { step: usize, split: Split, language: String },
    #[error("invalid eval record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Average(#[from] AverageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Snapshot steps at a regular interval of T/k.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    total_steps: usize,
    steps: Vec<usize>,
}

impl SnapshotSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }

    pub fn contains(&self, step: usize) -> bool {
        self.steps.binary_search(&step).is_ok()
    }
}

/// `steps[j] = floor((j + 1) * T / k)`, with the final entry equal to T.
pub fn make_schedule(total_steps: usize, count: usize) -> Result<SnapshotSchedule> {
    if count == 0 {
        return Err(PolicyError::InvalidSchedule("snapshot count must be positive".into()));
    }
    if count > total_steps {
        return Err(PolicyError::InvalidSchedule(format!(
            "{count} snapshots do not fit in {total_steps} steps"
        )));
    }
    let mut steps: Vec<usize> = (1..=count)
        .map(|j| ((j as u128 * total_steps as u128) / count as u128) as usize)
        .collect();
    *steps.last_mut().unwrap() = total_steps;
    if steps.windows(2).any(|w| w[0] >= w[1]) || steps[0] == 0 {
        return Err(PolicyError::InvalidSchedule(format!("colliding steps in {steps:?}")));
    }
    Ok(SnapshotSchedule { total_steps, steps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceDev,
    TargetDev,
    TargetTest,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::SourceDev => "source_dev",
            Split::TargetDev => "target_dev",
            Split::TargetTest => "target_test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "source_dev" => Ok(Split::SourceDev),
            "target_dev" => Ok(Split::TargetDev),
            "target_test" => Ok(Split::TargetTest),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Metric values of one snapshot on one split, keyed by language code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub split: Split,
    pub scores: BTreeMap<String, f64>,
}

impl EvalRecord {
    pub fn new(step: usize, split: Split, scores: BTreeMap<String, f64>) -> Self {
        Self { step, split, scores }
    }

    pub fn validate(&self) -> Result<()> {
        for (lang, value) in &self.scores {
            if lang.is_empty() {
                return Err(PolicyError::InvalidRecord("empty language code".into()));
            }
            if !value.is_finite() {
                return Err(PolicyError::InvalidRecord(format!(
                    "non-finite score {value} for {lang:?} at step {}",
                    self.step
                )));
            }
        }
        Ok(())
    }

    fn mean_score(&self) -> f64 {
        self.scores.values().sum::<f64>() / self.scores.len() as f64
    }
}

/// Reads line-delimited JSON records, skipping blank lines.
pub fn read_records(reader: impl BufRead) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| PolicyError::InvalidRecord(format!("line {}: {e}", i + 1)))?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(records: &[EvalRecord], mut writer: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| PolicyError::InvalidRecord(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    Last,
    SrcDev,
    TrgDev,
    Ca,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::Last,
        SelectionStrategy::SrcDev,
        SelectionStrategy::TrgDev,
        SelectionStrategy::Ca,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SelectionStrategy::Last => "LAST",
            SelectionStrategy::SrcDev => "SRC-DEV",
            SelectionStrategy::TrgDev => "TRG-DEV",
            SelectionStrategy::Ca => "CA",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "last" => Ok(SelectionStrategy::Last),
            "src-dev" => Ok(SelectionStrategy::SrcDev),
            "trg-dev" => Ok(SelectionStrategy::TrgDev),
            "ca" => Ok(SelectionStrategy::Ca),
            _ => Err(format!("unknown selection strategy {s:?}")),
        }
    }
}

/// What a strategy hands to evaluation.
#[derive(Clone, Debug)]
pub enum Selection {
    /// One stored snapshot.
    Single { step: usize, checkpoint: CheckpointRef },
    /// One stored snapshot per target language.
    PerLanguage(BTreeMap<String, (usize, CheckpointRef)>),
    /// A freshly computed average.
    Averaged(Checkpoint),
}

impl Selection {
    /// The step of a single-snapshot selection.
    pub fn step(&self) -> Option<usize> {
        match self {
            Selection::Single { step, .. } => Some(*step),
            _ => None,
        }
    }
}

pub fn select(
    strategy: SelectionStrategy,
    run: &SnapshotSet,
    records: &[EvalRecord],
) -> Result<Selection> {
    match strategy {
        SelectionStrategy::Last => {
            let (step, checkpoint) = run.snapshots().last().expect("non-empty snapshot set");
            Ok(Selection::Single { step: *step, checkpoint: checkpoint.clone() })
        }
        SelectionStrategy::SrcDev => {
            let by_step = records_by_step(run, records, Split::SourceDev)?;
            let scored = by_step.iter().map(|(step, r)| (*step, r.mean_score()));
            let step = argmax_latest(scored).expect("non-empty snapshot set");
            let checkpoint = run.at_step(step).expect("step comes from the run").clone();
            Ok(Selection::Single { step, checkpoint })
        }
        SelectionStrategy::TrgDev => {
            let by_step = records_by_step(run, records, Split::TargetDev)?;
            let languages: BTreeSet<&String> =
                by_step.values().flat_map(|r| r.scores.keys()).collect();
            let mut chosen = BTreeMap::new();
            for lang in languages {
                let mut scored = Vec::with_capacity(by_step.len());
                for (step, r) in &by_step {
                    let score = r.scores.get(lang).ok_or_else(|| PolicyError::MissingLanguage {
                        step: *step,
                        split: Split::TargetDev,
                        language: lang.clone(),
                    })?;
                    scored.push((*step, *score));
                }
                let step = argmax_latest(scored).expect("non-empty snapshot set");
                let checkpoint = run.at_step(step).expect("step comes from the run").clone();
                chosen.insert(lang.clone(), (step, checkpoint));
            }
            Ok(Selection::PerLanguage(chosen))
        }
        SelectionStrategy::Ca => Ok(Selection::Averaged(average_run_ca(run)?)),
    }
}

/// The one record of `split` for every snapshot step of `run`.
fn records_by_step<'a>(
    run: &SnapshotSet,
    records: &'a [EvalRecord],
    split: Split,
) -> Result<BTreeMap<usize, &'a EvalRecord>> {
    let mut by_step = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == split) {
        r.validate()?;
        if r.scores.is_empty() {
            return Err(PolicyError::InvalidRecord(format!("{split} record at step {} has no scores", r.step)));
        }
        if by_step.insert(r.step, r).is_some() {
            return Err(PolicyError::DuplicateRecord { step: r.step, split });
        }
    }
    let mut out = BTreeMap::new();
    for step in run.steps() {
        let r = by_step.get(&step).ok_or(PolicyError::MissingRecord { step, split })?;
        out.insert(step, *r);
    }
    Ok(out)
}

/// Step with the highest score; ties go to the later step.
fn argmax_latest(scored: impl IntoIterator<Item = (usize, f64)>) -> Option<usize> {
    scored
        .into_iter()
        .fold(None, |best: Option<(usize, f64)>, (step, score)| match best {
            Some((bs, bscore)) if score < bscore || (score == bscore && step < bs) => best,
            _ => Some((step, score)),
        })
        .map(|(step, _)| step)
}
