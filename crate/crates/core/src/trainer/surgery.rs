//! Multilingual loss balancing and single-holdout gradient surgery.

use std::collections::BTreeMap;

use super::{Result, TrainError};
use crate::rng::SplitMix64;

/// Unweighted mean of per-language losses.
pub fn balanced_loss(per_language: &BTreeMap<String, f64>) -> Result<f64> {
    if per_language.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if per_language.values().any(|l| !l.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    Ok(per_language.values().sum::<f64>() / per_language.len() as f64)
}

/// Flat gradients over the trainable parameters, one per language.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    per_language: BTreeMap<String, Vec<f64>>,
}

impl GradientSet {
    pub fn new(per_language: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut dims = per_language.values().map(Vec::len);
        if let Some(first) = dims.next() {
            if dims.any(|d| d != first) {
                return Err(TrainError::Shape("language gradients differ in dimension".into()));
            }
        }
        if per_language.values().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite);
        }
        Ok(Self { per_language })
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.per_language.keys().map(String::as_str)
    }

    pub fn get(&self, language: &str) -> Option<&[f64]> {
        self.per_language.get(language).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.per_language.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_language.is_empty()
    }

    /// Uniformly random language, in sorted-code order.
    pub fn pick_holdout(&self, rng: &mut SplitMix64) -> &str {
        let i = rng.below(self.per_language.len() as u64) as usize;
        self.per_language.keys().nth(i).expect("index in range")
    }
}

/// Projects each non-holdout gradient that conflicts with the holdout
/// gradient (`g·g_h < 0`) onto the normal plane of `g_h`, then returns the
/// mean of the projected non-holdout gradients. The holdout gradient itself
/// is not part of the update.
///
/// A zero holdout gradient has no normal plane; projection is skipped and
/// the plain mean returned.
pub fn gs_project(grads: &GradientSet, holdout: &str) -> Result<Vec<f64>> {
    if grads.len() < 2 {
        return Err(TrainError::Surgery(format!(
            "need at least two languages, got {}",
            grads.len()
        )));
    }
    let gh = grads
        .get(holdout)
        .ok_or_else(|| TrainError::Surgery(format!("holdout language {holdout:?} not in batch")))?;
    let gh_sq: f64 = gh.iter().map(|v| v * v).sum();
    if gh_sq == 0.0 {
        log::warn!("holdout language {holdout:?} has a zero gradient; skipping projection");
    }

    let mut sum = vec![0.0; gh.len()];
    let mut count = 0usize;
    for (lang, g) in &grads.per_language {
        if lang == holdout {
            continue;
        }
        let projected = project_one(g, gh);
        sum.iter_mut().zip(&projected).for_each(|(s, p)| *s += p);
        count += 1;
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// The projected gradient of one language, exposed for the safety check.
pub fn project_one(g: &[f64], holdout: &[f64]) -> Vec<f64> {
    let gh_sq: f64 = holdout.iter().map(|v| v * v).sum();
    let dot: f64 = g.iter().zip(holdout).map(|(a, b)| a * b).sum();
    if dot < 0.0 && gh_sq > 0.0 {
        let coef = dot / gh_sq;
        g.iter().zip(holdout).map(|(a, b)| a - coef * b).collect()
    } else {
        g.to_vec()
    }
}
