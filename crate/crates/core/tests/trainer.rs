mod common;

use std::collections::BTreeMap;

use ckavg::rng::SplitMix64;
use ckavg::synth::{Example, LanguageConfig, Role, SplitSizes, TaskSpec};
use ckavg::trainer::{
    accuracy_by_language, adamw_update, aligned_ensemble_curriculum, balanced_loss, forward_loss_and_grad,
    gs_project, independent_runs, lr_at, project_one, train_run, AdamW, GradientSet, ModelFamily, ModelParams,
    ModelSpec, TrainConfig, TrainData, BODY_WEIGHT, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT,
};
use proptest::prelude::*;

#[test]
fn gradients_match_finite_differences() {
    for family in common::FAMILIES {
        let mut rng = SplitMix64::new(31);
        for _ in 0..100 {
            let params = common::random_params(family, &mut rng);
            let n = 1 + rng.below(3) as usize;
            let examples: Vec<Example> = (0..n).map(|_| common::random_example(family, &mut rng)).collect();
            let err = common::gradient_error(&params, &examples);
            assert!(err <= 1e-5, "{family:?}: relative error {err:e}");
        }
    }
}

fn hp(weight_decay: f64) -> AdamW {
    AdamW { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay }
}

#[test]
fn adamw_single_step_values() {
    for (wd, expected) in [(0.0, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)), (0.1, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.01)] {
        let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut theta, &[0.5], &mut m, &mut v, 1, 0.1, &hp(wd), true);
        assert!((theta[0] - expected).abs() <= 1e-9, "wd={wd}: {}", theta[0]);
    }
}

#[test]
fn learning_rate_schedule_values() {
    let c = TrainConfig { total_steps: 100, warmup_fraction: 0.1, peak_lr: 2.0, ..TrainConfig::default() };
    assert_eq!(lr_at(10, &c).unwrap(), 2.0);
    assert_eq!(lr_at(100, &c).unwrap(), 0.0);
    assert_eq!(lr_at(55, &c).unwrap(), 1.0);
    assert_eq!(lr_at(1, &c).unwrap(), 0.2);
    assert!(lr_at(0, &c).is_err());
    assert!(lr_at(101, &c).is_err());
}

fn random_gradient_set(rng: &mut SplitMix64, languages: usize, dim: usize) -> GradientSet {
    GradientSet::new(
        (0..languages)
            .map(|l| (format!("l{l}"), (0..dim).map(|_| rng.normal()).collect()))
            .collect(),
    )
    .unwrap()
}

#[test]
fn projection_worked_examples() {
    let project = |g: [f64; 2], h: [f64; 2]| {
        let set = GradientSet::new(BTreeMap::from([("a".to_string(), g.to_vec()), ("h".to_string(), h.to_vec())]))
            .unwrap();
        gs_project(&set, "h").unwrap()
    };
    assert_eq!(project([1.0, 0.0], [0.0, 1.0]), [1.0, 0.0]);
    assert_eq!(project([1.0, 0.0], [-1.0, 0.0]), [0.0, 0.0]);
    assert_eq!(project([1.0, 0.0], [-1.0, 1.0]), [0.5, 0.5]);
}

#[test]
fn projected_gradients_never_oppose_holdout() {
    let mut rng = SplitMix64::new(5);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..1000 {
        let languages = 2 + rng.below(5) as usize;
        let dim = 1 + rng.below(40) as usize;
        let set = random_gradient_set(&mut rng, languages, dim);
        let holdout = set.pick_holdout(&mut rng).to_string();
        let h = set.get(&holdout).unwrap();
        for lang in set.languages().filter(|l| *l != holdout) {
            let p = project_one(set.get(lang).unwrap(), h);
            assert!(dot(&p, h) >= -1e-12);
        }
        assert!(dot(&gs_project(&set, &holdout).unwrap(), h) >= -1e-12);
    }
}

proptest! {
    #[test]
    fn balanced_loss_equals_global_mean_for_equal_counts(seed in any::<u64>(), langs in 1usize..5, per in 1usize..6) {
        let family = common::FAMILIES[1];
        let mut rng = SplitMix64::new(seed);
        let params = common::random_params(family, &mut rng);
        let mut all = Vec::new();
        let mut per_language = BTreeMap::new();
        for l in 0..langs {
            let examples: Vec<Example> = (0..per)
                .map(|_| Example { language: format!("l{l}"), ..common::random_example(family, &mut rng) })
                .collect();
            let refs: Vec<&Example> = examples.iter().collect();
            per_language.insert(format!("l{l}"), forward_loss_and_grad(&params, &refs).unwrap().0);
            all.extend(examples);
        }
        let refs: Vec<&Example> = all.iter().collect();
        let global = forward_loss_and_grad(&params, &refs).unwrap().0;
        prop_assert!((balanced_loss(&per_language).unwrap() - global).abs() <= 1e-12);
    }

    #[test]
    fn gs_mean_of_projections(seed in any::<u64>(), languages in 2usize..6, dim in 1usize..20) {
        let mut rng = SplitMix64::new(seed);
        let set = random_gradient_set(&mut rng, languages, dim);
        let holdout = set.pick_holdout(&mut rng).to_string();
        let h = set.get(&holdout).unwrap();
        let mut expected = vec![0.0; dim];
        for lang in set.languages().filter(|l| *l != holdout) {
            for (e, p) in expected.iter_mut().zip(project_one(set.get(lang).unwrap(), h)) {
                *e += p / (languages - 1) as f64;
            }
        }
        let got = gs_project(&set, &holdout).unwrap();
        prop_assert!(common::max_abs_diff(&got, &expected) <= 1e-12);
    }
}

fn two_language_task(separation: f64, classes: usize, dim: usize, train: usize) -> TaskSpec {
    TaskSpec {
        n_classes: classes,
        feature_dim: dim,
        class_separation: separation,
        languages: vec![
            LanguageConfig { code: "en".into(), angle: 0.0, offset: 0.0, label_noise: 0.0 },
            LanguageConfig { code: "de".into(), angle: 0.3, offset: 0.5, label_noise: 0.0 },
        ],
        sizes: SplitSizes { train, source_dev: 200, target_dev: 100, target_test: 100 },
        seed: 17,
    }
}

fn fit(task: &TaskSpec, family: ModelFamily, config: &TrainConfig) -> f64 {
    let t = task.generate().unwrap();
    let data = TrainData::from_examples(&t.split(Role::Train).examples);
    let model = ModelSpec { family, pretrained_seed: 1 };
    let config = config.per_epoch(&data);
    let run = train_run(&config, &model.init(config.seed), &data, &config.schedule().unwrap()).unwrap();
    let last = ModelParams::from_ref(run.snapshots.last()).unwrap();
    accuracy_by_language(&last, &t.split(Role::SourceDev).examples)["en"]
}

#[test]
fn separable_task_is_learned() {
    let config = TrainConfig { total_steps: 500, snapshots: 5, peak_lr: 0.05, weight_decay: 0.01, seed: 3, ..TrainConfig::default() };
    let task = two_language_task(6.0, 4, 8, 400);
    let acc = fit(&task, ModelFamily::Mlp { inputs: 8, hidden: 16, classes: 4 }, &config);
    assert!(acc >= 0.95, "source-dev accuracy {acc}");
}

#[test]
fn two_class_well_separated_task_is_nearly_perfect() {
    let config = TrainConfig { total_steps: 300, snapshots: 3, peak_lr: 0.05, seed: 4, ..TrainConfig::default() };
    let task = two_language_task(6.0, 2, 2, 200);
    let acc = fit(&task, ModelFamily::Linear { inputs: 2, classes: 2 }, &config);
    assert!(acc >= 0.99, "source-dev accuracy {acc}");
}

fn small_setup() -> (ModelSpec, TrainData, TrainConfig) {
    let t = two_language_task(4.0, 3, 6, 60).generate().unwrap();
    let data = TrainData::from_examples(&t.split(Role::Train).examples);
    let model = ModelSpec { family: ModelFamily::Mlp { inputs: 6, hidden: 5, classes: 3 }, pretrained_seed: 2 };
    let config = TrainConfig { total_steps: 30, snapshots: 3, peak_lr: 0.05, per_language_quota: 4, seed: 42, ..TrainConfig::default() };
    (model, data, config)
}

#[test]
fn curriculum_freezes_to_the_saved_anchor_classifier() {
    let (model, data, config) = small_setup();
    let cur = aligned_ensemble_curriculum(&config, 2, &model, &data).unwrap();
    let anchor = cur.anchor.snapshots.last().load().unwrap();
    for run in cur.runs.runs() {
        for (_, snap) in run.snapshots() {
            let cp = snap.load().unwrap();
            for name in [CLASSIFIER_WEIGHT, CLASSIFIER_BIAS] {
                assert!(cp.get(name).unwrap().bits_eq(anchor.get(name).unwrap()));
            }
        }
    }
    let bodies: Vec<_> = cur.runs.runs().iter().map(|r| r.last().load().unwrap()).collect();
    assert_eq!(cur.runs.runs().iter().map(|r| r.run_id()).collect::<Vec<_>>(), ["seed-43", "seed-44"]);
    assert!(!bodies[0].get(BODY_WEIGHT).unwrap().bits_eq(bodies[1].get(BODY_WEIGHT).unwrap()));
}

#[test]
fn single_frozen_run() {
    let (model, data, config) = small_setup();
    assert_eq!(aligned_ensemble_curriculum(&config, 1, &model, &data).unwrap().runs.len(), 1);
    assert!(aligned_ensemble_curriculum(&config, 0, &model, &data).is_err());
}

#[test]
fn independent_runs_do_not_share_classifiers() {
    let (model, data, config) = small_setup();
    let runs = independent_runs(&config, 2, &model, &data).unwrap();
    let a = runs.runs()[0].last().load().unwrap();
    let b = runs.runs()[1].last().load().unwrap();
    assert!(!a.get(CLASSIFIER_WEIGHT).unwrap().bits_eq(b.get(CLASSIFIER_WEIGHT).unwrap()));
}

#[test]
fn per_epoch_resolution() {
    let (_, data, config) = small_setup();
    let epoch = data.steps_per_epoch(config.per_language_quota);
    assert_eq!(epoch, 15);
    let c = TrainConfig { snapshots: 0, total_steps: 100, ..config.clone() }.per_epoch(&data);
    assert_eq!(c.snapshots, 6);
    let c = TrainConfig { snapshots: 0, total_steps: 7, ..config.clone() }.per_epoch(&data);
    assert_eq!(c.snapshots, 1);
    let c = TrainConfig { snapshots: 4, ..config.clone() }.per_epoch(&data);
    assert_eq!(c.snapshots, 4);
    assert!(TrainConfig { snapshots: 0, ..config }.validate().is_err());
}

#[test]
fn gradient_surgery_run_is_reproducible() {
    let (model, data, config) = small_setup();
    let config = TrainConfig { gradient_surgery: true, ..config };
    let a = train_run(&config, &model.init(1), &data, &config.schedule().unwrap()).unwrap();
    let b = train_run(&config, &model.init(1), &data, &config.schedule().unwrap()).unwrap();
    assert!(a.snapshots.last().load().unwrap().bits_eq(&b.snapshots.last().load().unwrap()));
}
