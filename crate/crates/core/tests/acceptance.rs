//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stderr so the verdicts are visible even when test output is captured.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use ckavg::averaging::{average_runs, streaming_mean, AveragingVariant, RunSet};
use ckavg::harness::{naive_label, run_experiment, ExperimentPlan, ExperimentReport};
use ckavg::metrics::{accuracy, mean, span_f1, token_f1};
use ckavg::rng::SplitMix64;
use ckavg::synth::{sample_shots, Example, Role, ShotSpec};
use ckavg::tensor_store::{open_checkpoint, write_checkpoint, Checkpoint, CheckpointRef};
use ckavg::trainer::{
    adamw_update, aligned_ensemble_curriculum, classifier_cosine, gs_project, project_one, AdamW, GradientSet,
    ModelFamily, ModelParams, TrainConfig, TrainData, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT,
};

type Outcome = Result<String, String>;

fn verdict(id: u32, name: &str, outcome: Outcome) {
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("[{tag}] criterion {id:>2} {name}: {detail}\n");
    std::io::stderr().lock().write_all(line.as_bytes()).unwrap();
    if let Err(d) = outcome {
        panic!("criterion {id} {name} failed: {d}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn plan(name: &str) -> ExperimentPlan {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../plans").join(name);
    ExperimentPlan::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn report_bytes(report: &ExperimentReport) -> Vec<u8> {
    let mut buf = Vec::new();
    report.write_json(&mut buf).unwrap();
    buf
}

fn flat_mean_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut largest = 0;
    for i in 0..20u64 {
        let mut rng = SplitMix64::new(0xF1A7 + i);
        let (r, k) = (1 + i as usize % 4, 1 + i as usize % 5);
        let template = common::random_checkpoint(&mut rng, 3, 100_000, true);
        largest = largest.max(template.iter().map(|(_, t)| t.data().len()).max().unwrap());
        let runs: Vec<Vec<Checkpoint>> = (0..r).map(|_| common::same_schema(&mut rng, &template, k)).collect();
        let set = RunSet::new(
            runs.iter().enumerate().map(|(j, cps)| common::snapshot_set(&format!("run-{j}"), cps)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let got = average_runs(&set, AveragingVariant::RaCa).map_err(|e| e.to_string())?;
        let flat: Vec<Checkpoint> = runs.into_iter().flatten().collect();
        for (name, expected) in common::two_pass_mean(&flat) {
            let diff = common::max_abs_diff(&common::floats(got.get(&name).unwrap()), &expected);
            worst = worst.max(diff);
            ensure(diff <= 1e-7, || format!("set {i} (R={r}, k={k}) tensor {name}: {diff:e}"))?;
        }
    }
    Ok(format!("20 run sets, largest tensor {largest} elements, max |diff| {worst:.2e}"))
}

#[test]
fn criterion_01_flat_mean_equivalence() {
    verdict(1, "flat-mean equivalence", flat_mean_equivalence());
}

fn streaming_vs_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = SplitMix64::new(0x5EED + i);
        let k = 1 + rng.below(8) as usize;
        let template = common::random_checkpoint(&mut rng, 5, 5000, true);
        let cps = common::same_schema(&mut rng, &template, k);
        let got = streaming_mean(&common::refs(&cps)).map_err(|e| e.to_string())?;
        for oracle in [common::two_pass_mean(&cps), common::incremental_mean(&cps)] {
            for (name, expected) in oracle {
                let diff = common::max_abs_diff(&common::floats(got.get(&name).unwrap()), &expected);
                worst = worst.max(diff);
                ensure(diff <= 1e-7, || format!("set {i} tensor {name}: {diff:e}"))?;
            }
        }
        for (name, t) in cps[0].iter().filter(|(_, t)| !t.dtype().is_floating()) {
            ensure(got.get(name).unwrap().bits_eq(t), || format!("set {i}: {name} not copied from first input"))?;
        }
    }
    Ok(format!("100 sets, max |diff| {worst:.2e}, integer tensors copied exactly"))
}

#[test]
fn criterion_02_streaming_vs_oracle() {
    verdict(2, "streaming mean vs oracle", streaming_vs_oracle());
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for family in common::FAMILIES {
        let mut rng = SplitMix64::new(0x6AD);
        for draw in 0..100 {
            let params = common::random_params(family, &mut rng);
            let n = 1 + rng.below(3) as usize;
            let examples: Vec<Example> = (0..n).map(|_| common::random_example(family, &mut rng)).collect();
            let err = common::gradient_error(&params, &examples);
            worst = worst.max(err);
            ensure(err <= 1e-5, || format!("{family:?} draw {draw}: {err:e}"))?;
        }
    }
    Ok(format!("200 draws over 2 families, max relative error {worst:.2e}"))
}

#[test]
fn criterion_03_gradient_check() {
    verdict(3, "gradient check", gradient_check());
}

fn adamw_values() -> Outcome {
    let hp = |weight_decay| AdamW { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay };
    let mut got = Vec::new();
    for (wd, expected) in [(0.0, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)), (0.1, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.1 * 1.0)] {
        let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut theta, &[0.5], &mut m, &mut v, 1, 0.1, &hp(wd), true);
        ensure((theta[0] - expected).abs() <= 1e-9, || format!("wd={wd}: {} vs {expected}", theta[0]))?;
        got.push(theta[0]);
    }
    Ok(format!("theta' = {:.10} and {:.10}", got[0], got[1]))
}

#[test]
fn criterion_04_adamw_values() {
    verdict(4, "AdamW single-step values", adamw_values());
}

fn gs_safety() -> Outcome {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = SplitMix64::new(0x65);
    let mut worst = f64::INFINITY;
    for i in 0..1000 {
        let languages = 2 + rng.below(6) as usize;
        let dim = 1 + rng.below(64) as usize;
        let grads: BTreeMap<String, Vec<f64>> =
            (0..languages).map(|l| (format!("l{l}"), (0..dim).map(|_| rng.normal()).collect())).collect();
        let set = GradientSet::new(grads).map_err(|e| e.to_string())?;
        let holdout = set.pick_holdout(&mut rng).to_string();
        let h = set.get(&holdout).unwrap();
        for lang in set.languages().filter(|l| *l != holdout) {
            let d = dot(&project_one(set.get(lang).unwrap(), h), h);
            worst = worst.min(d);
            ensure(d >= -1e-12, || format!("set {i}, {lang}: dot {d:e}"))?;
        }
        let d = dot(&gs_project(&set, &holdout).map_err(|e| e.to_string())?, h);
        ensure(d >= -1e-12, || format!("set {i}: combined dot {d:e}"))?;
    }
    let project = |g: [f64; 2], h: [f64; 2]| -> Result<Vec<f64>, String> {
        let set = GradientSet::new(BTreeMap::from([("a".to_string(), g.to_vec()), ("h".to_string(), h.to_vec())]))
            .map_err(|e| e.to_string())?;
        gs_project(&set, "h").map_err(|e| e.to_string())
    };
    for (g, h, expected) in [
        ([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]),
        ([1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]),
        ([1.0, 0.0], [-1.0, 1.0], [0.5, 0.5]),
    ] {
        let got = project(g, h)?;
        ensure(got == expected, || format!("{g:?} vs holdout {h:?}: {got:?}"))?;
    }
    Ok(format!("1000 sets, min dot {worst:.2e}, 3 worked examples exact"))
}

#[test]
fn criterion_05_gs_safety() {
    verdict(5, "gradient surgery safety", gs_safety());
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(0xF0);
    for i in 0..50 {
        let cp = common::random_checkpoint(&mut rng, 6, 4000, i % 2 == 0);
        let path = dir.path().join(format!("{i}.safetensors"));
        write_checkpoint(&cp, &path).map_err(|e| e.to_string())?;
        let back = open_checkpoint(&path).and_then(|r| r.load()).map_err(|e| e.to_string())?;
        ensure(cp.bits_eq(&back), || format!("checkpoint {i} changed"))?;
    }
    let fixtures = common::malformed_fixtures();
    for fx in &fixtures {
        match CheckpointRef::from_bytes(fx.bytes.clone()) {
            Ok(_) => return Err(format!("{} accepted", fx.name)),
            Err(e) => ensure((fx.matches)(&e), || format!("{}: expected {}, got {e}", fx.name, fx.class))?,
        }
    }
    Ok(format!("50 checkpoints bitwise, {} malformed fixtures rejected with the expected class", fixtures.len()))
}

#[test]
fn criterion_06_format_round_trip() {
    verdict(6, "format round trip", format_round_trip());
}

fn determinism() -> Outcome {
    let p = plan("zs_reference.json");
    let a = report_bytes(&run_experiment(&p).map_err(|e| e.to_string())?);
    let b = report_bytes(&run_experiment(&p).map_err(|e| e.to_string())?);
    ensure(a == b, || "reference plan reports differ".into())?;

    let fs = plan("fs_reference.json");
    let pool = fs.task.generate().map_err(|e| e.to_string())?.split(Role::TargetDev).clone();
    let mut shots = fs.shots.clone();
    shots.sort_unstable();
    let key = |e: &Example| (e.language.clone(), e.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut checks = 0;
    for &seed in &fs.shot_seeds {
        let draws: Vec<_> = shots
            .iter()
            .map(|&s| sample_shots(&pool, ShotSpec { shots: s, seed }))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for (i, small) in draws.iter().enumerate() {
            for large in &draws[i + 1..] {
                for (lang, xs) in &small.shots {
                    ensure(large.shots[lang][..xs.len()] == xs[..], || format!("seed {seed}: {lang} not nested"))?;
                    checks += 1;
                }
            }
            let mut seen: Vec<_> = small.shots.values().flatten().chain(&small.remainder.examples).map(key).collect();
            let mut all: Vec<_> = pool.examples.iter().map(key).collect();
            seen.sort();
            all.sort();
            ensure(seen == all, || format!("seed {seed}: shots and remainder do not partition the pool"))?;
            checks += 1;
        }
    }
    Ok(format!("report {} bytes identical across runs, {checks} nesting/partition checks exact", a.len()))
}

#[test]
fn criterion_07_determinism() {
    verdict(7, "determinism", determinism());
}

fn orthogonality() -> Outcome {
    let family = ModelFamily::Linear { inputs: 4096, classes: 2 };
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let a = ModelParams::init(family, 0, 2 * i + 1);
        let b = ModelParams::init(family, 0, 2 * i + 2);
        let c = classifier_cosine(&a, &b).map_err(|e| e.to_string())?.abs();
        worst = worst.max(c);
        ensure(c <= 0.1, || format!("pair {i}: |cosine| {c}"))?;
    }
    Ok(format!("100 pairs, max |cosine| {worst:.4}"))
}

#[test]
fn criterion_08_random_classifier_orthogonality() {
    verdict(8, "random classifier orthogonality", orthogonality());
}

fn variance_reduction() -> Outcome {
    let report = run_experiment(&plan("zs_reference.json")).map_err(|e| e.to_string())?;
    let mut lower = 0;
    let mut details = Vec::new();
    let (mut ca_means, mut last_means) = (Vec::new(), Vec::new());
    for label in report.plan.learning_rates.iter().map(|lr| format!("lr={lr}")) {
        let t = report.table(&label).ok_or_else(|| format!("missing table {label}"))?;
        let (ca, last) = (t.row("CA", 0).unwrap(), t.row("LAST", 0).unwrap());
        if ca.std <= last.std {
            lower += 1;
        }
        ca_means.push(ca.mean);
        last_means.push(last.mean);
        details.push(format!("{label} std CA {:.4} LAST {:.4}", ca.std, last.std));
    }
    let (ca, last) = (mean(&ca_means), mean(&last_means));
    ensure(lower >= 2, || format!("CA std lower in only {lower} of {}: {}", ca_means.len(), details.join("; ")))?;
    ensure(ca >= last - 0.005, || format!("mean CA {ca:.4} < mean LAST {last:.4} - 0.005"))?;
    Ok(format!("{}; mean CA {ca:.4} vs LAST {last:.4}", details.join("; ")))
}

#[test]
fn criterion_09_variance_reduction() {
    verdict(9, "variance reduction trend", variance_reduction());
}

fn curriculum_effect() -> Outcome {
    let p = plan("zs_ensemble.json");
    ensure(p.ensemble_runs == 4 && p.seeds.len() == 20, || "plan must have R=4 and 20 seeds".into())?;
    let report = run_experiment(&p).map_err(|e| e.to_string())?;
    let label = naive_label(AveragingVariant::RaLast);
    let per_seed = |strategy: &str| -> BTreeMap<u64, f64> {
        report
            .runs
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| (r.seed.unwrap(), r.scores.values().sum::<f64>() / r.scores.len() as f64))
            .collect()
    };
    let (frozen, naive) = (per_seed("RA-LAST"), per_seed(&label));
    ensure(frozen.len() == 20 && naive.len() == 20, || "expected 20 repetitions of each".into())?;
    let wins = frozen.iter().filter(|(s, f)| **f > naive[s]).count();
    ensure(wins * 10 >= 7 * frozen.len(), || format!("frozen RA-LAST won only {wins} of 20"))?;

    let task = p.task.generate().map_err(|e| e.to_string())?;
    let data = TrainData::from_examples(&task.split(Role::Train).examples);
    let mut checked = 0;
    for &seed in &p.seeds {
        let config = TrainConfig { seed, ..p.train.clone() }.per_epoch(&data);
        let cur = aligned_ensemble_curriculum(&config, p.ensemble_runs, &p.model, &data).map_err(|e| e.to_string())?;
        let anchor = cur.anchor.snapshots.last().load().map_err(|e| e.to_string())?;
        for run in cur.runs.runs() {
            for (step, snap) in run.snapshots() {
                let cp = snap.load().map_err(|e| e.to_string())?;
                for name in [CLASSIFIER_WEIGHT, CLASSIFIER_BIAS] {
                    ensure(cp.get(name).unwrap().bits_eq(anchor.get(name).unwrap()), || {
                        format!("seed {seed}, {} step {step}: {name} differs from run 0", run.run_id())
                    })?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "frozen beat naive in {wins}/20 (mean {:.4} vs {:.4}); {checked} frozen snapshots bitwise equal to run 0",
        mean(&frozen.values().copied().collect::<Vec<_>>()),
        mean(&naive.values().copied().collect::<Vec<_>>())
    ))
}

#[test]
fn criterion_10_alignment_curriculum() {
    verdict(10, "alignment curriculum effect", curriculum_effect());
}

fn metric_identities() -> Outcome {
    let mut rng = SplitMix64::new(0x11);
    for i in 0..200 {
        let len = 1 + rng.below(40) as usize;
        let tags = 2 + rng.below(8);
        let pred: Vec<u64> = (0..len).map(|_| rng.below(tags)).collect();
        let gold: Vec<u64> = (0..len).map(|_| rng.below(tags)).collect();
        let (f, a) = (token_f1(&pred, &gold, None).unwrap(), accuracy(&pred, &gold).unwrap());
        ensure(f == a, || format!("pair {i}: token F1 {f} vs accuracy {a}"))?;
    }
    let f = token_f1(&["B", "O", "I"], &["B", "I", "I"], Some(&"O")).unwrap();
    ensure(f == 0.8, || format!("token F1 example gave {f}"))?;
    let s = span_f1(&["a", "b", "c"], &["b", "c", "d"]);
    ensure(s == 2.0 / 3.0, || format!("span F1 example gave {s}"))?;
    Ok("200 pairs exact; token F1 0.8 and span F1 2/3 exact".into())
}

#[test]
fn criterion_11_metric_identities() {
    verdict(11, "metric identities", metric_identities());
}
