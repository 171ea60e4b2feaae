#![allow(dead_code)]

use std::collections::BTreeMap;

use ckavg::averaging::SnapshotSet;
use ckavg::rng::SplitMix64;
use ckavg::synth::Example;
use ckavg::tensor_store::{Checkpoint, CheckpointRef, StoreError, Tensor, TensorData};
use ckavg::trainer::{forward_loss_and_grad, ModelFamily, ModelParams};

/// Raw container bytes with an arbitrary header string.
pub fn file_bytes(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

pub struct Fixture {
    pub name: &'static str,
    pub bytes: Vec<u8>,
    pub class: &'static str,
    pub matches: fn(&StoreError) -> bool,
}

fn truncated(e: &StoreError) -> bool {
    matches!(e, StoreError::Truncated(_))
}

fn malformed(e: &StoreError) -> bool {
    matches!(e, StoreError::MalformedHeader(_))
}

fn overlap(e: &StoreError) -> bool {
    matches!(e, StoreError::OffsetOverlap { .. })
}

fn gap(e: &StoreError) -> bool {
    matches!(e, StoreError::OffsetGap(_))
}

fn duplicate(e: &StoreError) -> bool {
    matches!(e, StoreError::DuplicateName(_))
}

/// Every malformed-header case, with the error class it must produce.
pub fn malformed_fixtures() -> Vec<Fixture> {
    let f = |name, bytes, class, matches| Fixture { name, bytes, class, matches };
    let eight = [0u8; 8];
    let w = |offsets: &str, shape: &str| {
        format!(r#"{{"w":{{"dtype":"F32","shape":{shape},"data_offsets":{offsets}}}}}"#)
    };
    let mut huge = (u64::MAX / 2).to_le_bytes().to_vec();
    huge.extend_from_slice(b"{}");
    let mut short_header = 64u64.to_le_bytes().to_vec();
    short_header.extend_from_slice(b"{}");
    let mut not_utf8 = 2u64.to_le_bytes().to_vec();
    not_utf8.extend_from_slice(&[0xff, 0xfe]);

    vec![
        f("empty file", vec![], "truncated", truncated),
        f("partial length prefix", vec![1, 0, 0, 0], "truncated", truncated),
        f("header longer than file", short_header, "truncated", truncated),
        f("absurd header length", huge, "malformed", malformed),
        f("header not utf-8", not_utf8, "malformed", malformed),
        f("header not json", file_bytes("{\"w\":", &[]), "malformed", malformed),
        f("header is an array", file_bytes("[]", &[]), "malformed", malformed),
        f("entry not an object", file_bytes(r#"{"w":3}"#, &[]), "malformed", malformed),
        f(
            "missing dtype",
            file_bytes(r#"{"w":{"shape":[2],"data_offsets":[0,8]}}"#, &eight),
            "malformed",
            malformed,
        ),
        f(
            "unsupported dtype",
            file_bytes(r#"{"w":{"dtype":"BF16","shape":[4],"data_offsets":[0,8]}}"#, &eight),
            "malformed",
            malformed,
        ),
        f("negative extent", file_bytes(&w("[0,8]", "[-2]"), &eight), "malformed", malformed),
        f("fractional extent", file_bytes(&w("[0,8]", "[1.5]"), &eight), "malformed", malformed),
        f("missing offsets", file_bytes(r#"{"w":{"dtype":"F32","shape":[2]}}"#, &eight), "malformed", malformed),
        f("three offsets", file_bytes(&w("[0,4,8]", "[2]"), &eight), "malformed", malformed),
        f("reversed offsets", file_bytes(&w("[8,0]", "[2]"), &eight), "malformed", malformed),
        f("range length disagrees with shape", file_bytes(&w("[0,8]", "[3]"), &eight), "malformed", malformed),
        f("range past end of file", file_bytes(&w("[0,8]", "[2]"), &[0u8; 4]), "truncated", truncated),
        f(
            "overlapping ranges",
            file_bytes(
                r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
                &[0u8; 12],
            ),
            "overlap",
            overlap,
        ),
        f(
            "gap between ranges",
            file_bytes(
                r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#,
                &[0u8; 12],
            ),
            "gap",
            gap,
        ),
        f("trailing data", file_bytes(&w("[0,8]", "[2]"), &[0u8; 12]), "malformed", malformed),
        f(
            "duplicate tensor name",
            file_bytes(
                r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &eight,
            ),
            "duplicate",
            duplicate,
        ),
        f("empty tensor name", file_bytes(&w("[0,8]", "[2]").replacen("\"w\"", "\"\"", 1), &eight), "malformed", malformed),
        f("metadata not an object", file_bytes(r#"{"__metadata__":[1]}"#, &[]), "malformed", malformed),
        f("metadata value not a string", file_bytes(r#"{"__metadata__":{"k":1}}"#, &[]), "malformed", malformed),
    ]
}

/// A random checkpoint: up to `max_tensors` float tensors (F32 or F64),
/// optionally one I64 tensor, element counts up to `max_elems`.
pub fn random_checkpoint(rng: &mut SplitMix64, max_tensors: usize, max_elems: usize, with_int: bool) -> Checkpoint {
    let mut cp = Checkpoint::new();
    let n = 1 + rng.below(max_tensors as u64) as usize;
    for i in 0..n {
        let len = rng.below(max_elems as u64 + 1) as usize;
        let values: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let tensor = if rng.below(2) == 0 {
            Tensor::f32(vec![len], values.iter().map(|&v| v as f32).collect()).unwrap()
        } else {
            Tensor::f64(vec![len], values).unwrap()
        };
        cp.insert(format!("t{i:02}"), tensor).unwrap();
    }
    if with_int {
        let v = rng.next_u64() as i64;
        cp.insert("step", Tensor::i64(vec![1], vec![v]).unwrap()).unwrap();
    }
    cp
}

/// `k` checkpoints sharing the schema of `template` with fresh values.
pub fn same_schema(rng: &mut SplitMix64, template: &Checkpoint, k: usize) -> Vec<Checkpoint> {
    (0..k)
        .map(|_| {
            let mut cp = Checkpoint::new();
            for (name, t) in template.iter() {
                let len = t.data().len();
                let data = match t.data() {
                    TensorData::F32(_) => TensorData::F32((0..len).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()),
                    TensorData::F64(_) => TensorData::F64((0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                    TensorData::I64(_) => TensorData::I64((0..len).map(|_| rng.next_u64() as i64).collect()),
                };
                cp.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
            }
            cp
        })
        .collect()
}

pub fn refs(cps: &[Checkpoint]) -> Vec<CheckpointRef> {
    cps.iter().map(|cp| CheckpointRef::from_checkpoint(cp).unwrap()).collect()
}

pub fn floats(t: &Tensor) -> Vec<f64> {
    t.data().to_f64().expect("floating tensor")
}

/// Sum in f64, divide once.
pub fn two_pass_mean(cps: &[Checkpoint]) -> BTreeMap<String, Vec<f64>> {
    let k = cps.len() as f64;
    let mut out = BTreeMap::new();
    for (name, t) in cps[0].iter().filter(|(_, t)| t.dtype().is_floating()) {
        let mut sum = vec![0.0f64; t.data().len()];
        for cp in cps {
            for (s, v) in sum.iter_mut().zip(floats(cp.get(name).unwrap())) {
                *s += v;
            }
        }
        out.insert(name.to_string(), sum.into_iter().map(|s| s / k).collect());
    }
    out
}

/// Divide each input by K, then accumulate.
pub fn incremental_mean(cps: &[Checkpoint]) -> BTreeMap<String, Vec<f64>> {
    let k = cps.len() as f64;
    let mut out = BTreeMap::new();
    for (name, t) in cps[0].iter().filter(|(_, t)| t.dtype().is_floating()) {
        let mut avg: Vec<f64> = floats(t).into_iter().map(|v| v / k).collect();
        for cp in &cps[1..] {
            for (a, v) in avg.iter_mut().zip(floats(cp.get(name).unwrap())) {
                *a += v / k;
            }
        }
        out.insert(name.to_string(), avg);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn snapshot_set(run_id: &str, cps: &[Checkpoint]) -> SnapshotSet {
    let k = cps.len();
    let snaps = cps
        .iter()
        .enumerate()
        .map(|(j, cp)| (j + 1, CheckpointRef::from_checkpoint(cp).unwrap()))
        .collect();
    SnapshotSet::new(run_id, k, snaps).unwrap()
}

/// Reference SplitMix64, written out independently of the library.
pub struct RefSplitMix(pub u64);

impl RefSplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((u128::from(self.next()) * u128::from(n)) >> 64) as u64
    }
}

pub fn ref_fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Fisher-Yates order of `0..n` for one language at one seed.
pub fn ref_shuffle(n: usize, seed: u64, language: &str) -> Vec<usize> {
    let mut rng = RefSplitMix(seed ^ ref_fnv1a(language.as_bytes()));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

pub const FAMILIES: [ModelFamily; 2] = [
    ModelFamily::Linear { inputs: 5, classes: 3 },
    ModelFamily::Mlp { inputs: 4, hidden: 6, classes: 3 },
];

pub fn random_params(family: ModelFamily, rng: &mut SplitMix64) -> ModelParams {
    let mut p = ModelParams::zeros(family);
    for t in p.tensors_mut() {
        t.values.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
    }
    p
}

pub fn random_example(family: ModelFamily, rng: &mut SplitMix64) -> Example {
    Example {
        language: "en".into(),
        label: rng.below(family.classes() as u64) as usize,
        x: (0..family.inputs()).map(|_| 2.0 * rng.normal()).collect(),
    }
}

/// Largest componentwise gap between analytic and central-difference
/// gradients, relative to the largest gradient component.
pub fn gradient_error(params: &ModelParams, examples: &[Example]) -> f64 {
    const H: f64 = 1e-6;
    let refs: Vec<&Example> = examples.iter().collect();
    let (_, analytic) = forward_loss_and_grad(params, &refs).unwrap();
    let mut worst_gap = 0.0f64;
    let mut scale = 0.0f64;
    for (ti, t) in params.tensors().iter().enumerate() {
        for i in 0..t.values.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].values[i] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].values[i] -= H;
            let numeric = (forward_loss_and_grad(&plus, &refs).unwrap().0
                - forward_loss_and_grad(&minus, &refs).unwrap().0)
                / (2.0 * H);
            let a = analytic.0[ti][i];
            worst_gap = worst_gap.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
    }
    worst_gap / scale
}
