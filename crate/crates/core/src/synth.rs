//! Synthetic multilingual classification task and few-shot sampling.
//!
//! Every language shares one canonical problem: class-conditional unit
//! Gaussians whose means sit on the first `n_classes` coordinate axes, at
//! pairwise distance `class_separation`. A language sees the canonical draws
//! through its own rotation and offset, with some labels flipped. The first
//! language is the source; the rest are transfer targets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("language {language:?} has {available} examples, need more than {shots}")]
    PoolTooSmall { language: String, available: usize, shots: usize },
    #[error("invalid dataset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "lang")]
    pub language: String,
    pub label: usize,
    pub x: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    SourceDev,
    TargetDev,
    TargetTest,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::SourceDev => "source_dev",
            Role::TargetDev => "target_dev",
            Role::TargetTest => "target_test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: Role,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn new(role: Role, examples: Vec<Example>) -> Self {
        Self { role, examples }
    }

    /// Language codes in first-appearance order.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.examples {
            if !out.contains(&e.language) {
                out.push(e.language.clone());
            }
        }
        out
    }

    /// Examples grouped by language, preserving split order within each.
    pub fn by_language(&self) -> BTreeMap<String, Vec<Example>> {
        let mut out: BTreeMap<String, Vec<Example>> = BTreeMap::new();
        for e in &self.examples {
            out.entry(e.language.clone()).or_default().push(e.clone());
        }
        out
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for e in &self.examples {
            let line = serde_json::to_string(e).expect("examples always serialize");
            writeln!(writer, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(role: Role, reader: impl BufRead) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(&line)
                .map_err(|err| SynthError::Parse { line: i + 1, reason: err.to_string() })?;
            examples.push(e);
        }
        Ok(Self { role, examples })
    }
}

/// How one language distorts the canonical feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub code: String,
    /// Row-major `dim x dim` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub offset: Vec<f64>,
    pub label_noise: f64,
}

impl LanguageSpec {
    pub fn identity(code: impl Into<String>, dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        (0..dim).for_each(|i| rotation[i * dim + i] = 1.0);
        Self { code: code.into(), rotation, offset: vec![0.0; dim], label_noise: 0.0 }
    }

    /// Builds a language from a compact description: coordinates are paired
    /// up in a seeded random order and each pair is rotated by `angle`
    /// radians; the offset has Euclidean norm `offset` in a seeded random
    /// direction.
    pub fn from_config(config: &LanguageConfig, dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::for_stream(seed, &format!("language/{}", config.code));
        let mut spec = Self::identity(config.code.clone(), dim);
        spec.label_noise = config.label_noise;

        let mut axes: Vec<usize> = (0..dim).collect();
        rng.shuffle(&mut axes);
        let (sin, cos) = config.angle.sin_cos();
        for pair in axes.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            spec.rotation[a * dim + a] = cos;
            spec.rotation[a * dim + b] = -sin;
            spec.rotation[b * dim + a] = sin;
            spec.rotation[b * dim + b] = cos;
        }

        if config.offset != 0.0 {
            let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            spec.offset = dir.iter().map(|v| config.offset * v / norm).collect();
        }
        spec
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        let bad = |reason: String| SynthError::InvalidTask(format!("language {:?}: {reason}", self.code));
        if self.code.is_empty() {
            return Err(SynthError::InvalidTask("empty language code".into()));
        }
        if self.rotation.len() != dim * dim {
            return Err(bad("rotation is not dim x dim".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(bad(format!("label noise {} outside [0, 1)", self.label_noise)));
        }
        let err = orthogonality_error(&self.rotation, dim);
        if err > 1e-9 {
            return Err(bad(format!("rotation is not orthogonal (max |R^T R - I| = {err:e})")));
        }
        Ok(())
    }

    fn transform(&self, canonical: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..dim)
            .map(|i| {
                let row = &self.rotation[i * dim..(i + 1) * dim];
                row.iter().zip(canonical).map(|(r, x)| r * x).sum::<f64>() + self.offset[i]
            })
            .collect()
    }
}

/// Max absolute entry of `R^T R - I`.
pub fn orthogonality_error(rotation: &[f64], dim: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            let dot: f64 = (0..dim).map(|k| rotation[k * dim + i] * rotation[k * dim + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Serializable language description, see [`LanguageSpec::from_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub code: String,
    #[serde(default)]
    pub angle: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub label_noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    /// Per source-language training examples.
    pub train: usize,
    pub source_dev: usize,
    /// Per target language.
    pub target_dev: usize,
    /// Per target language.
    pub target_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    /// Source first, then targets.
    pub languages: Vec<LanguageConfig>,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl TaskSpec {
    pub fn language_specs(&self) -> Vec<LanguageSpec> {
        self.languages
            .iter()
            .map(|c| LanguageSpec::from_config(c, self.feature_dim, self.seed))
            .collect()
    }

    pub fn generate(&self) -> Result<Task> {
        generate_task(
            self.n_classes,
            self.feature_dim,
            self.class_separation,
            &self.language_specs(),
            &self.sizes,
            self.seed,
        )
    }

    pub fn source(&self) -> &str {
        &self.languages[0].code
    }

    pub fn targets(&self) -> Vec<String> {
        self.languages[1..].iter().map(|l| l.code.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub source: String,
    pub targets: Vec<String>,
    pub splits: BTreeMap<Role, DatasetSplit>,
}

impl Task {
    pub fn split(&self, role: Role) -> &DatasetSplit {
        &self.splits[&role]
    }
}

/// Generates all four splits. `languages[0]` is the source language and
/// fills `train` and `source_dev`; the remaining languages fill
/// `target_dev` and `target_test`.
pub fn generate_task(
    n_classes: usize,
    feature_dim: usize,
    class_separation: f64,
    languages: &[LanguageSpec],
    sizes: &SplitSizes,
    seed: u64,
) -> Result<Task> {
    if n_classes < 2 {
        return Err(SynthError::InvalidTask("need at least two classes".into()));
    }
    if feature_dim < n_classes {
        return Err(SynthError::InvalidTask(format!(
            "feature dimension {feature_dim} is smaller than class count {n_classes}"
        )));
    }
    if !(class_separation.is_finite() && class_separation > 0.0) {
        return Err(SynthError::InvalidTask("class separation must be positive".into()));
    }
    if languages.len() < 2 {
        return Err(SynthError::InvalidTask("need a source and at least one target language".into()));
    }
    if [sizes.train, sizes.source_dev, sizes.target_dev, sizes.target_test].contains(&0) {
        return Err(SynthError::InvalidTask("every split size must be at least 1".into()));
    }
    for (i, lang) in languages.iter().enumerate() {
        if lang.dim() != feature_dim {
            return Err(SynthError::InvalidTask(format!(
                "language {:?} has dimension {}, task has {feature_dim}",
                lang.code,
                lang.dim()
            )));
        }
        lang.validate()?;
        if languages[..i].iter().any(|l| l.code == lang.code) {
            return Err(SynthError::InvalidTask(format!("duplicate language {:?}", lang.code)));
        }
    }

    let radius = class_separation / std::f64::consts::SQRT_2;
    let sampler = Sampler { n_classes, feature_dim, radius, seed };
    let (source, targets) = languages.split_first().unwrap();

    let mut splits = BTreeMap::new();
    let src = |role: Role, n: usize| DatasetSplit::new(role, sampler.draw(source, role, n));
    splits.insert(Role::Train, src(Role::Train, sizes.train));
    splits.insert(Role::SourceDev, src(Role::SourceDev, sizes.source_dev));
    for (role, n) in [(Role::TargetDev, sizes.target_dev), (Role::TargetTest, sizes.target_test)] {
        let examples = targets.iter().flat_map(|l| sampler.draw(l, role, n)).collect();
        splits.insert(role, DatasetSplit::new(role, examples));
    }

    Ok(Task {
        n_classes,
        feature_dim,
        source: source.code.clone(),
        targets: targets.iter().map(|l| l.code.clone()).collect(),
        splits,
    })
}

struct Sampler {
    n_classes: usize,
    feature_dim: usize,
    radius: f64,
    seed: u64,
}

impl Sampler {
    fn draw(&self, lang: &LanguageSpec, role: Role, n: usize) -> Vec<Example> {
        let mut rng = SplitMix64::for_stream(self.seed, &format!("{role}/{}", lang.code));
        (0..n)
            .map(|i| {
                let class = i % self.n_classes;
                let mut canonical: Vec<f64> = (0..self.feature_dim).map(|_| rng.normal()).collect();
                canonical[class] += self.radius;
                let mut label = class;
                if lang.label_noise > 0.0 && rng.next_f64() < lang.label_noise {
                    let shift = 1 + rng.below(self.n_classes as u64 - 1) as usize;
                    label = (class + shift) % self.n_classes;
                }
                Example { language: lang.code.clone(), label, x: lang.transform(&canonical) }
            })
            .collect()
    }
}

/// Seed and size of one few-shot draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSpec {
    pub shots: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotSample {
    pub shots: BTreeMap<String, Vec<Example>>,
    /// Everything not drawn as a shot; the validation pool.
    pub remainder: DatasetSplit,
}

/// Per language: Fisher-Yates shuffle of that language's pool under
/// `SplitMix64(seed ^ fnv1a(language))`, first `shots` become training
/// shots, the rest stay in the validation pool. Draws at one seed are
/// nested: a smaller shot count takes a prefix of a larger one.
pub fn sample_shots(pool: &DatasetSplit, spec: ShotSpec) -> Result<ShotSample> {
    if spec.shots == 0 {
        return Err(SynthError::InvalidTask("shot count must be at least 1".into()));
    }
    let mut shots = BTreeMap::new();
    let mut remainder = Vec::new();
    for (language, mut examples) in pool.by_language() {
        if examples.len() <= spec.shots {
            return Err(SynthError::PoolTooSmall {
                language,
                available: examples.len(),
                shots: spec.shots,
            });
        }
        SplitMix64::for_stream(spec.seed, &language).shuffle(&mut examples);
        let rest = examples.split_off(spec.shots);
        remainder.extend(rest);
        shots.insert(language, examples);
    }
    Ok(ShotSample { shots, remainder: DatasetSplit::new(pool.role, remainder) })
}
