//! Task metrics and cross-seed aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("sequence lengths differ: {pred} predicted vs {gold} gold")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("empty sequence")]
    Empty,
    #[error("seed {seed} covers languages {found:?}, expected {expected:?}")]
    InconsistentLanguages { seed: String, found: Vec<String>, expected: Vec<String> },
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_lengths<T>(pred: &[T], gold: &[T]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gold: gold.len() });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Micro-averaged token F1.
///
/// With `outside = Some(o)` (NER style) a token counts as positive when its
/// label is not `o`: TP are positions with `pred == gold != o`. Two
/// sequences with no positives at all score 1.0. With `outside = None`
/// (POS style) every token is a positive and the score equals accuracy.
pub fn token_f1<T: PartialEq>(pred: &[T], gold: &[T], outside: Option<&T>) -> Result<f64> {
    check_lengths(pred, gold)?;
    let positive = |t: &T| outside.is_none_or(|o| t != o);
    let tp = pred.iter().zip(gold).filter(|(p, g)| p == g && positive(p)).count();
    let pred_pos = pred.iter().filter(|t| positive(t)).count();
    let gold_pos = gold.iter().filter(|t| positive(t)).count();
    Ok(f1_from_counts(tp, pred_pos, gold_pos))
}

fn f1_from_counts(tp: usize, pred_pos: usize, gold_pos: usize) -> f64 {
    if pred_pos == 0 && gold_pos == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = tp/pred_pos, R = tp/gold_pos
    2.0 * tp as f64 / (pred_pos + gold_pos) as f64
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Bag-of-tokens overlap F1 between two normalized answers.
pub fn span_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut common = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    f1_from_counts(common, pred.len(), gold.len())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Scores of one configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Per language, one score per seed (seed order).
    pub per_language: BTreeMap<String, Vec<f64>>,
    /// Mean over seeds of the per-seed language mean.
    pub mean: f64,
    /// Sample std over seeds of the per-seed language mean.
    pub std: f64,
}

impl MetricReport {
    /// Per-seed language means.
    pub fn run_means(&self) -> Vec<f64> {
        let runs = self.per_language.values().next().map_or(0, Vec::len);
        (0..runs)
            .map(|i| mean(&self.per_language.values().map(|v| v[i]).collect::<Vec<_>>()))
            .collect()
    }

    /// Rows `strategy,shots,language,mean,std`, one per language then one
    /// `all` row for the language mean.
    pub fn write_csv(&self, strategy: &str, shots: usize, mut w: impl Write) -> Result<()> {
        writeln!(w, "strategy,shots,language,mean,std")?;
        for (lang, scores) in &self.per_language {
            writeln!(w, "{strategy},{shots},{lang},{:.4},{:.4}", mean(scores), sample_std(scores))?;
        }
        writeln!(w, "{strategy},{shots},all,{:.4},{:.4}", self.mean, self.std)?;
        Ok(())
    }
}

/// Language mean per seed, then mean and sample std across seeds.
pub fn aggregate<K: Ord + ToString>(
    per_seed: &BTreeMap<K, BTreeMap<String, f64>>,
) -> Result<MetricReport> {
    let mut seeds = per_seed.iter();
    let (_, first) = seeds.next().ok_or(MetricError::NoRuns)?;
    let expected: BTreeSet<&String> = first.keys().collect();
    if expected.is_empty() {
        return Err(MetricError::Empty);
    }
    for (seed, scores) in per_seed {
        let found: BTreeSet<&String> = scores.keys().collect();
        if found != expected {
            return Err(MetricError::InconsistentLanguages {
                seed: seed.to_string(),
                found: found.into_iter().cloned().collect(),
                expected: expected.iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    let mut per_language: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for scores in per_seed.values() {
        for (lang, v) in scores {
            per_language.entry(lang.clone()).or_default().push(*v);
        }
    }
    let means: Vec<f64> = per_seed.values().map(|s| mean(&s.values().copied().collect::<Vec<_>>())).collect();
    Ok(MetricReport { per_language, mean: mean(&means), std: sample_std(&means) })
}

/// How few-shot results spanning several shot sets are summarized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Mean and std over seeds within each shot set, then averaged over
    /// shot sets.
    #[default]
    SeedsWithinGroup,
    /// Every (shot set, seed) pair treated as one run.
    Pooled,
}

/// Summary over groups (e.g. shot sets) of per-seed language scores.
pub fn aggregate_grouped<G: Ord + ToString, K: Ord + ToString>(
    groups: &BTreeMap<G, BTreeMap<K, BTreeMap<String, f64>>>,
    grouping: Grouping,
) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(MetricError::NoRuns);
    }
    match grouping {
        Grouping::SeedsWithinGroup => {
            let reports = groups.values().map(aggregate).collect::<Result<Vec<_>>>()?;
            let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
            let stds: Vec<f64> = reports.iter().map(|r| r.std).collect();
            Ok((mean(&means), mean(&stds)))
        }
        Grouping::Pooled => {
            let pooled: BTreeMap<String, BTreeMap<String, f64>> = groups
                .iter()
                .flat_map(|(g, runs)| {
                    runs.iter().map(move |(k, v)| (format!("{}/{}", g.to_string(), k.to_string()), v.clone()))
                })
                .collect();
            let report = aggregate(&pooled)?;
            Ok((report.mean, report.std))
        }
    }
}
