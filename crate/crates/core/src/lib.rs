//! Checkpoint averaging (CA), run averaging (RA, SOUP) and a deterministic
//! synthetic cross-lingual transfer harness for measuring their effect.
//!
//! Module map:
//!
//! - [`tensor_store`]: safetensors-layout checkpoint files with lazy reads
//! - [`averaging`]: streaming uniform means over snapshots and runs
//! - [`policy`]: snapshot schedules and model-selection strategies
//! - [`trainer`]: softmax models, AdamW, gradient surgery, classifier freezing
//! - [`metrics`]: accuracy, token/span F1, cross-seed aggregation
//! - [`synth`]: synthetic multilingual task and few-shot sampling
//! - [`harness`]: end-to-end zero-shot and few-shot experiment sweeps

pub mod averaging;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod synth;
pub mod tensor_store;
pub mod trainer;

pub use averaging::{average_run_ca, average_runs, check_compatible, streaming_mean};
pub use averaging::{AveragingVariant, RunSet, SnapshotSet};
pub use tensor_store::{open_checkpoint, write_checkpoint, Checkpoint, CheckpointRef, Dtype, Tensor};
