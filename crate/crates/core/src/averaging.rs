//! Uniform weight averaging within a run (CA) and across runs (RA, SOUP).
//!
//! All averages stream one tensor name at a time: a 64-bit accumulator is
//! filled from each input in turn, divided by the input count once, then
//! narrowed back to the stored dtype. Integer tensors are not averaged; they
//! are copied from the first input.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor_store::{Checkpoint, CheckpointRef, Dtype, StoreError, Tensor, TensorData};

#[derive(Debug, thiserror::Error)]
pub enum AverageError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("nothing to average")]
    Empty,
    #[error("tensor {0:?} is not present in every checkpoint")]
    NameMismatch(String),
    #[error("tensor {name:?} has shape {left:?} in one checkpoint and {right:?} in another")]
    ShapeMismatch { name: String, left: Vec<usize>, right: Vec<usize> },
    #[error("tensor {name:?} has dtype {left:?} in one checkpoint and {right:?} in another")]
    DtypeMismatch { name: String, left: Dtype, right: Dtype },
    #[error("invalid snapshot set {run_id:?}: {reason}")]
    InvalidRun { run_id: String, reason: String },
    #[error("variant {0} averages a single run; use average_run_ca")]
    NotARunVariant(AveragingVariant),
}

pub type Result<T> = std::result::Result<T, AverageError>;

/// The snapshots saved during one training run.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    run_id: String,
    total_steps: usize,
    snapshots: Vec<(usize, CheckpointRef)>,
}

impl SnapshotSet {
    /// Validates step ordering (strictly increasing, last = `total_steps`)
    /// and mutual compatibility of the snapshots.
    pub fn new(
        run_id: impl Into<String>,
        total_steps: usize,
        snapshots: Vec<(usize, CheckpointRef)>,
    ) -> Result<Self> {
        let run_id = run_id.into();
        let invalid = |reason: String| AverageError::InvalidRun { run_id: run_id.clone(), reason };
        if total_steps == 0 {
            return Err(invalid("total steps must be positive".into()));
        }
        if snapshots.is_empty() {
            return Err(invalid("no snapshots".into()));
        }
        if snapshots.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("snapshot steps must be strictly increasing".into()));
        }
        let last = snapshots.last().unwrap().0;
        if last != total_steps {
            return Err(invalid(format!("last snapshot at step {last}, expected {total_steps}")));
        }
        let refs: Vec<CheckpointRef> = snapshots.iter().map(|(_, r)| r.clone()).collect();
        check_compatible(&refs)?;
        Ok(Self { run_id, total_steps, snapshots })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Number of snapshots, k.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[(usize, CheckpointRef)] {
        &self.snapshots
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.snapshots.iter().map(|(s, _)| *s)
    }

    pub fn at_step(&self, step: usize) -> Option<&CheckpointRef> {
        self.snapshots.iter().find(|(s, _)| *s == step).map(|(_, r)| r)
    }

    pub fn last(&self) -> &CheckpointRef {
        &self.snapshots.last().expect("non-empty by construction").1
    }

    pub fn refs(&self) -> Vec<CheckpointRef> {
        self.snapshots.iter().map(|(_, r)| r.clone()).collect()
    }
}

/// R independent runs with a shared tensor schema.
#[derive(Clone, Debug)]
pub struct RunSet {
    runs: Vec<SnapshotSet>,
}

impl RunSet {
    pub fn new(runs: Vec<SnapshotSet>) -> Result<Self> {
        if runs.is_empty() {
            return Err(AverageError::Empty);
        }
        let firsts: Vec<CheckpointRef> = runs.iter().map(|r| r.last().clone()).collect();
        check_compatible(&firsts)?;
        Ok(Self { runs })
    }

    pub fn runs(&self) -> &[SnapshotSet] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AveragingVariant {
    Ca,
    RaLast,
    RaCa,
    /// Same arithmetic as [`RaLast`](Self::RaLast); the runs differ in
    /// hyperparameters rather than only in seed.
    SoupLast,
    SoupCa,
}

impl AveragingVariant {
    pub const ALL: [AveragingVariant; 5] = [
        AveragingVariant::Ca,
        AveragingVariant::RaLast,
        AveragingVariant::RaCa,
        AveragingVariant::SoupLast,
        AveragingVariant::SoupCa,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AveragingVariant::Ca => "CA",
            AveragingVariant::RaLast => "RA-LAST",
            AveragingVariant::RaCa => "RA-CA",
            AveragingVariant::SoupLast => "SOUP-LAST",
            AveragingVariant::SoupCa => "SOUP-CA",
        }
    }

    fn cli_name(self) -> &'static str {
        match self {
            AveragingVariant::Ca => "ca",
            AveragingVariant::RaLast => "ra-last",
            AveragingVariant::RaCa => "ra-ca",
            AveragingVariant::SoupLast => "soup-last",
            AveragingVariant::SoupCa => "soup-ca",
        }
    }

    pub fn is_soup(self) -> bool {
        matches!(self, AveragingVariant::SoupLast | AveragingVariant::SoupCa)
    }

    /// Whether each run contributes its CA rather than its last snapshot.
    pub fn averages_checkpoints(self) -> bool {
        matches!(self, AveragingVariant::Ca | AveragingVariant::RaCa | AveragingVariant::SoupCa)
    }
}

impl fmt::Display for AveragingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AveragingVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.cli_name() == norm)
            .ok_or_else(|| format!("unknown averaging variant {s:?}"))
    }
}

/// Succeeds iff every checkpoint has the same (name, dtype, shape) table.
pub fn check_compatible(refs: &[CheckpointRef]) -> Result<()> {
    let (first, rest) = refs.split_first().ok_or(AverageError::Empty)?;
    let base: BTreeMap<&str, (Dtype, &[usize])> =
        first.schema().map(|(n, d, s)| (n, (d, s))).collect();
    for other in rest {
        let table: BTreeMap<&str, (Dtype, &[usize])> =
            other.schema().map(|(n, d, s)| (n, (d, s))).collect();
        if let Some(name) = base
            .keys()
            .find(|n| !table.contains_key(*n))
            .or_else(|| table.keys().find(|n| !base.contains_key(*n)))
        {
            return Err(AverageError::NameMismatch(name.to_string()));
        }
        for (name, (dtype, shape)) in &base {
            let (other_dtype, other_shape) = table[name];
            if *dtype != other_dtype {
                return Err(AverageError::DtypeMismatch {
                    name: name.to_string(),
                    left: *dtype,
                    right: other_dtype,
                });
            }
            if *shape != other_shape {
                return Err(AverageError::ShapeMismatch {
                    name: name.to_string(),
                    left: shape.to_vec(),
                    right: other_shape.to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// Elementwise arithmetic mean of K compatible checkpoints.
///
/// Floating tensors are summed in f64 and divided by K once; integer tensors
/// are copied from `refs[0]`, as is the metadata. At most one accumulator
/// and one input tensor are resident at a time.
pub fn streaming_mean(refs: &[CheckpointRef]) -> Result<Checkpoint> {
    check_compatible(refs)?;
    let first = &refs[0];
    let mut out = Checkpoint::new();
    for spec in first.specs() {
        let tensor = if spec.dtype.is_floating() {
            let mut acc = vec![0.0f64; spec.numel()];
            accumulate(&mut acc, refs, &spec.name)?;
            finish(acc, refs.len(), spec.dtype, &spec.shape)?
        } else {
            first.read_tensor(&spec.name)?.1
        };
        out.insert(spec.name.clone(), tensor)?;
    }
    out.replace_metadata(first.metadata().clone());
    Ok(out)
}

/// CA: the mean of all k snapshots of one run.
pub fn average_run_ca(run: &SnapshotSet) -> Result<Checkpoint> {
    streaming_mean(&run.refs())
}

/// RA and SOUP variants over a set of runs.
///
/// `*_LAST` averages the R final snapshots. `*_CA` averages the R per-run
/// CA results; the per-run means are kept in f64 and only the outer mean is
/// narrowed, so the result matches the flat mean of all k·R snapshots when
/// every run has the same k.
pub fn average_runs(runs: &RunSet, variant: AveragingVariant) -> Result<Checkpoint> {
    match variant {
        AveragingVariant::Ca => Err(AverageError::NotARunVariant(variant)),
        AveragingVariant::RaLast | AveragingVariant::SoupLast => {
            let lasts: Vec<CheckpointRef> = runs.runs().iter().map(|r| r.last().clone()).collect();
            streaming_mean(&lasts)
        }
        AveragingVariant::RaCa | AveragingVariant::SoupCa => mean_of_run_means(runs),
    }
}

fn mean_of_run_means(runs: &RunSet) -> Result<Checkpoint> {
    let all: Vec<CheckpointRef> = runs.runs().iter().flat_map(|r| r.refs()).collect();
    check_compatible(&all)?;
    let first = &runs.runs()[0].snapshots()[0].1;
    let mut out = Checkpoint::new();
    for spec in first.specs() {
        let tensor = if spec.dtype.is_floating() {
            let mut outer = vec![0.0f64; spec.numel()];
            let mut inner = vec![0.0f64; spec.numel()];
            for run in runs.runs() {
                inner.iter_mut().for_each(|x| *x = 0.0);
                accumulate(&mut inner, &run.refs(), &spec.name)?;
                let k = run.len() as f64;
                outer.iter_mut().zip(&inner).for_each(|(o, i)| *o += i / k);
            }
            finish(outer, runs.len(), spec.dtype, &spec.shape)?
        } else {
            first.read_tensor(&spec.name)?.1
        };
        out.insert(spec.name.clone(), tensor)?;
    }
    out.replace_metadata(first.metadata().clone());
    Ok(out)
}

fn accumulate(acc: &mut [f64], refs: &[CheckpointRef], name: &str) -> Result<()> {
    for r in refs {
        let (_, tensor) = r.read_tensor(name)?;
        match tensor.data() {
            TensorData::F32(v) => acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64),
            TensorData::F64(v) => acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x),
            TensorData::I64(_) => unreachable!("integer tensors are copied, not accumulated"),
        }
    }
    Ok(())
}

fn finish(mut acc: Vec<f64>, count: usize, dtype: Dtype, shape: &[usize]) -> Result<Tensor> {
    let k = count as f64;
    acc.iter_mut().for_each(|x| *x /= k);
    let data = TensorData::from_f64(dtype, acc).expect("floating dtype");
    Ok(Tensor::new(shape.to_vec(), data)?)
}
