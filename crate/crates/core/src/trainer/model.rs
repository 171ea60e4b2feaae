//! Softmax classifiers with closed-form gradients.
//!
//! Two families share one parameter layout convention: tensors under
//! `body.` transform features, tensors under `classifier.` project to class
//! logits. The linear family has no body.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::rng::SplitMix64;
use crate::synth::Example;
use crate::tensor_store::{Checkpoint, CheckpointRef, Dtype, Tensor, TensorData};

pub const BODY_WEIGHT: &str = "body.weight";
pub const BODY_BIAS: &str = "body.bias";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";
/// Integer step counter stored alongside the weights.
pub const GLOBAL_STEP: &str = "global_step";

/// Storage dtype of saved snapshots.
pub const SNAPSHOT_DTYPE: Dtype = Dtype::F32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFamily {
    /// `logits = W x + b`
    Linear { inputs: usize, classes: usize },
    /// `logits = W2 tanh(W1 x + b1) + b2`
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl ModelFamily {
    pub fn inputs(&self) -> usize {
        match *self {
            ModelFamily::Linear { inputs, .. } | ModelFamily::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelFamily::Linear { classes, .. } | ModelFamily::Mlp { classes, .. } => classes,
        }
    }

    fn layout(&self) -> Vec<(&'static str, Vec<usize>, Partition)> {
        match *self {
            ModelFamily::Linear { inputs, classes } => vec![
                (CLASSIFIER_BIAS, vec![classes], Partition::Classifier),
                (CLASSIFIER_WEIGHT, vec![classes, inputs], Partition::Classifier),
            ],
            ModelFamily::Mlp { inputs, hidden, classes } => vec![
                (BODY_BIAS, vec![hidden], Partition::Body),
                (BODY_WEIGHT, vec![hidden, inputs], Partition::Body),
                (CLASSIFIER_BIAS, vec![classes], Partition::Classifier),
                (CLASSIFIER_WEIGHT, vec![classes, hidden], Partition::Classifier),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Body,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub partition: Partition,
}

impl ParamTensor {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Parameters of one model, tensors in lexicographic name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    family: ModelFamily,
    tensors: Vec<ParamTensor>,
}

impl ModelParams {
    pub fn zeros(family: ModelFamily) -> Self {
        let tensors = family
            .layout()
            .into_iter()
            .map(|(name, shape, partition)| {
                let n = shape.iter().product();
                ParamTensor { name, shape, values: vec![0.0; n], partition }
            })
            .collect();
        Self { family, tensors }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor. Body and
    /// classifier draw from separate seeds so a shared "pretrained" body can
    /// be paired with a per-run classifier.
    pub fn init(family: ModelFamily, body_seed: u64, classifier_seed: u64) -> Self {
        let mut params = Self::zeros(family);
        let mut body_rng = SplitMix64::for_stream(body_seed, "init/body");
        let mut cls_rng = SplitMix64::for_stream(classifier_seed, "init/classifier");
        for t in &mut params.tensors {
            let fan_in = match (family, t.partition) {
                (ModelFamily::Mlp { hidden, .. }, Partition::Classifier) => hidden,
                _ => family.inputs(),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let rng = match t.partition {
                Partition::Body => &mut body_rng,
                Partition::Classifier => &mut cls_rng,
            };
            t.values.iter_mut().for_each(|v| *v = rng.uniform(-bound, bound));
        }
        params
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn values(&self, name: &str) -> &[f64] {
        &self.get(name).expect("tensor present for this family").values
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Copies every classifier tensor from `source`.
    pub fn set_classifier_from(&mut self, source: &ModelParams) -> Result<()> {
        for t in self.tensors.iter_mut().filter(|t| t.partition == Partition::Classifier) {
            let src = source
                .get(t.name)
                .filter(|s| s.shape == t.shape)
                .ok_or_else(|| TrainError::Shape(format!("source has no compatible {}", t.name)))?;
            t.values.clone_from(&src.values);
        }
        Ok(())
    }

    /// Flattened classifier weights, biases excluded.
    pub fn classifier_weights(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|t| t.partition == Partition::Classifier && !t.is_bias())
            .flat_map(|t| t.values.iter().copied())
            .collect()
    }

    pub fn to_checkpoint(&self, step: usize) -> Checkpoint {
        let mut cp = Checkpoint::new();
        for t in &self.tensors {
            let data = TensorData::from_f64(SNAPSHOT_DTYPE, t.values.clone()).expect("float dtype");
            let tensor = Tensor::new(t.shape.clone(), data).expect("shape matches values");
            cp.insert(t.name, tensor).expect("unique names");
        }
        let counter = Tensor::i64(vec![], vec![step as i64]).expect("scalar");
        cp.insert(GLOBAL_STEP, counter).expect("unique names");
        cp.set_metadata("step", step.to_string());
        cp.set_metadata("family", serde_json::to_string(&self.family).expect("serializable"));
        cp
    }

    /// Rebuilds parameters from a checkpoint, inferring the family from the
    /// tensor shapes.
    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| cp.get(name).map(|t| t.shape().to_vec());
        let cls = shape(CLASSIFIER_WEIGHT)
            .ok_or_else(|| TrainError::Shape(format!("checkpoint has no {CLASSIFIER_WEIGHT}")))?;
        if cls.len() != 2 {
            return Err(TrainError::Shape(format!("{CLASSIFIER_WEIGHT} must be 2-d")));
        }
        let family = match shape(BODY_WEIGHT) {
            None => ModelFamily::Linear { inputs: cls[1], classes: cls[0] },
            Some(body) if body.len() == 2 => {
                ModelFamily::Mlp { inputs: body[1], hidden: body[0], classes: cls[0] }
            }
            Some(_) => return Err(TrainError::Shape(format!("{BODY_WEIGHT} must be 2-d"))),
        };
        let mut params = Self::zeros(family);
        for t in &mut params.tensors {
            let stored = cp
                .get(t.name)
                .ok_or_else(|| TrainError::Shape(format!("checkpoint has no {}", t.name)))?;
            if stored.shape() != t.shape.as_slice() {
                return Err(TrainError::Shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    t.name,
                    stored.shape(),
                    t.shape
                )));
            }
            t.values = stored
                .data()
                .to_f64()
                .ok_or_else(|| TrainError::Shape(format!("{} is not floating point", t.name)))?;
        }
        Ok(params)
    }

    pub fn from_ref(r: &CheckpointRef) -> Result<Self> {
        Self::from_checkpoint(&r.load()?)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.family {
            ModelFamily::Linear { inputs, classes } => affine(
                self.values(CLASSIFIER_WEIGHT),
                self.values(CLASSIFIER_BIAS),
                x,
                classes,
                inputs,
            ),
            ModelFamily::Mlp { inputs, hidden, classes } => {
                let h = hidden_activations(self, x, hidden, inputs);
                affine(self.values(CLASSIFIER_WEIGHT), self.values(CLASSIFIER_BIAS), &h, classes, hidden)
            }
        }
    }

    /// Highest-logit class; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate().skip(1) {
            if v > z[best] {
                best = c;
            }
        }
        best
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| b[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn hidden_activations(p: &ModelParams, x: &[f64], hidden: usize, inputs: usize) -> Vec<f64> {
    affine(p.values(BODY_WEIGHT), p.values(BODY_BIAS), x, hidden, inputs)
        .into_iter()
        .map(f64::tanh)
        .collect()
}

/// Per-tensor gradients aligned with [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(params.tensors().iter().map(|t| vec![0.0; t.values.len()]).collect())
    }

    /// Concatenates the tensors whose `mask` entry is set.
    pub fn flatten(&self, mask: &[bool]) -> Vec<f64> {
        self.0.iter().zip(mask).filter(|(_, &m)| m).flat_map(|(g, _)| g.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten); masked-out tensors become zero.
    pub fn unflatten(flat: &[f64], params: &ModelParams, mask: &[bool]) -> Self {
        let mut out = Self::zeros_like(params);
        let mut offset = 0;
        for (g, _) in out.0.iter_mut().zip(mask).filter(|(_, &m)| m) {
            let n = g.len();
            g.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Mean softmax cross-entropy over `examples` and its exact gradient with
/// respect to every parameter tensor.
pub fn forward_loss_and_grad(
    params: &ModelParams,
    examples: &[&Example],
) -> Result<(f64, Gradients)> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let family = params.family();
    let (inputs, classes) = (family.inputs(), family.classes());
    for e in examples {
        if e.x.len() != inputs {
            return Err(TrainError::Shape(format!(
                "example has {} features, model expects {inputs}",
                e.x.len()
            )));
        }
        if e.label >= classes {
            return Err(TrainError::Shape(format!("label {} out of range 0..{classes}", e.label)));
        }
    }

    let names: Vec<&str> = params.tensors().iter().map(|t| t.name).collect();
    let slot = |name: &str| names.iter().position(|n| *n == name).expect("tensor present");
    let mut grads = Gradients::zeros_like(params);
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;

    for e in examples {
        let (features, hidden) = match family {
            ModelFamily::Linear { .. } => (e.x.clone(), None),
            ModelFamily::Mlp { hidden, .. } => {
                (hidden_activations(params, &e.x, hidden, inputs), Some(hidden))
            }
        };
        let width = features.len();
        let z = affine(params.values(CLASSIFIER_WEIGHT), params.values(CLASSIFIER_BIAS), &features, classes, width);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        loss += (total.ln() + max - z[e.label]) * scale;

        // dL/dz = softmax - onehot
        let dz: Vec<f64> = exp
            .iter()
            .enumerate()
            .map(|(c, v)| (v / total - if c == e.label { 1.0 } else { 0.0 }) * scale)
            .collect();
        let gw = slot(CLASSIFIER_WEIGHT);
        let gb = slot(CLASSIFIER_BIAS);
        for (c, &d) in dz.iter().enumerate() {
            grads.0[gb][c] += d;
            let row = &mut grads.0[gw][c * width..(c + 1) * width];
            row.iter_mut().zip(&features).for_each(|(g, f)| *g += d * f);
        }

        if let Some(hidden) = hidden {
            let w2 = params.values(CLASSIFIER_WEIGHT);
            let (bw, bb) = (slot(BODY_WEIGHT), slot(BODY_BIAS));
            for j in 0..hidden {
                let dh: f64 = (0..classes).map(|c| w2[c * hidden + j] * dz[c]).sum();
                let da = dh * (1.0 - features[j] * features[j]);
                grads.0[bb][j] += da;
                let row = &mut grads.0[bw][j * inputs..(j + 1) * inputs];
                row.iter_mut().zip(&e.x).for_each(|(g, x)| *g += da * x);
            }
        }
    }
    Ok((loss, grads))
}

/// Cosine similarity of the flattened classifier weights (biases excluded).
pub fn classifier_cosine(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    let (u, v) = (a.classifier_weights(), b.classifier_weights());
    if u.len() != v.len() {
        return Err(TrainError::Shape(format!(
            "classifier sizes differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    cosine(&u, &v)
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(TrainError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Accuracy of `params` on `examples`, per language.
pub fn accuracy_by_language(params: &ModelParams, examples: &[Example]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in examples {
        let entry = counts.entry(e.language.clone()).or_default();
        entry.1 += 1;
        if params.predict(&e.x) == e.label {
            entry.0 += 1;
        }
    }
    counts.into_iter().map(|(l, (hit, n))| (l, hit as f64 / n as f64)).collect()
}
