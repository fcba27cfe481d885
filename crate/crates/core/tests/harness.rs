use std::sync::OnceLock;

use proptest::prelude::*;
use rbwp_core::backbone::{Classifier, EncoderConfig};
use rbwp_core::diffcore::GradCheckHooks;
use rbwp_core::gate::{GateConfig, LayerMask};
use rbwp_core::harness::gradcheck::{full_loss_grad_check, loss_grad_check, GradCheckCase, TOLERANCE};
use rbwp_core::harness::learner::{argmax, mix_weights};
use rbwp_core::harness::metrics::mean_nuclear_norm;
use rbwp_core::harness::rundir::{accuracy_csv, metrics_csv, write_run_dir};
use rbwp_core::harness::*;
use rbwp_core::harness::Strategy;
use rbwp_core::{Array, Precision, Tape};

const ENCODER: EncoderConfig = EncoderConfig {
    layers: 3,
    dim: 16,
    heads: 2,
    tokens: 9,
    mlp_dim: 32,
};

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: ENCODER,
        prompt_len: 8,
        proj_dim: 8,
        hidden_dim: 4,
        ..ModelConfig::default()
    }
}

fn small_scenario(tasks: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        tasks,
        samples_per_class: 20,
        patches: ENCODER.patches(),
        dim: ENCODER.dim,
        seed,
        ..ScenarioConfig::default()
    }
}

fn settings(strategy: Strategy, epochs: usize) -> RunSettings {
    RunSettings {
        strategy,
        model: small_model(),
        loss: LossConfig {
            epochs,
            ..LossConfig::default()
        },
        gate: GateConfig::default(),
    }
}

fn small_prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| prepare(&small_scenario(3, 7), &small_model(), Precision::Single).unwrap())
}

fn rainbow_run() -> &'static RunOutcome {
    static R: OnceLock<RunOutcome> = OnceLock::new();
    R.get_or_init(|| run_prepared(&settings(Strategy::Rainbow, 6), small_prepared()).unwrap())
}

#[test]
fn matching_loss_values() {
    assert_eq!(matching_loss(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    assert_eq!(matching_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
    let v = matching_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((v - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
    assert!((v - 0.2929).abs() < 1e-4);
    assert!(matching_loss(&[0.0, 0.0], &[1.0, 1.0]).is_err());
}

#[test]
fn task_selection_cases() {
    let one = [Array::from_vec(vec![0.3, -1.0, 2.0])];
    assert_eq!(select_task(&[5.0, 1.0, -1.0], &one).unwrap(), 0);
    let basis: Vec<Array> = (0..3)
        .map(|i| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            Array::from_vec(v)
        })
        .collect();
    for i in 0..3 {
        assert_eq!(select_task(basis[i].data(), &basis).unwrap(), i);
    }
    let tied = [Array::from_vec(vec![1.0, 0.0]), Array::from_vec(vec![2.0, 0.0])];
    assert_eq!(select_task(&[1.0, 1.0], &tied).unwrap(), 0);
    assert!(select_task(&[1.0], &[]).is_err());
}

#[test]
fn two_step_metrics_are_exact() {
    let a = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.6, 0.8]]).unwrap();
    let m = metrics(&a).unwrap();
    assert_eq!(m.average_accuracy, 0.7);
    assert_eq!(m.forgetting, 0.4);
    assert!(m.forgetting_defined);
}

#[test]
fn single_step_forgetting_is_flagged() {
    let m = metrics(&AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap()).unwrap();
    assert_eq!(m.average_accuracy, 0.9);
    assert_eq!(m.forgetting, 0.0);
    assert!(!m.forgetting_defined);
}

#[test]
fn incomplete_matrices_are_rejected() {
    assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
    assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
    assert!(metrics(&AccuracyMatrix::new()).is_err());
}

fn lower_triangle(n: usize, fill: impl Fn(usize, usize) -> f64) -> AccuracyMatrix {
    AccuracyMatrix::from_rows((0..n).map(|t| (0..=t).map(|i| fill(t, i)).collect()).collect()).unwrap()
}

proptest! {
    #[test]
    fn constant_matrices_never_forget(n in 1usize..12, c in 0.0f64..=1.0) {
        let m = metrics(&lower_triangle(n, |_, _| c)).unwrap();
        prop_assert_eq!(m.forgetting, 0.0);
        prop_assert!((m.average_accuracy - c).abs() < 1e-12);
    }

    #[test]
    fn forgetting_is_non_negative_when_the_best_is_past(n in 2usize..8, seed in any::<u64>()) {
        let v = |t: usize, i: usize| {
            let h = rbwp_core::harness::derive_seed(seed, (t * 31 + i) as u64);
            (h % 1001) as f64 / 1000.0
        };
        // The final row never beats any earlier entry of its column.
        let a = lower_triangle(n, |t, i| {
            if t + 1 == n && i + 1 < n {
                (i..n - 1).map(|s| v(s, i)).fold(f64::INFINITY, f64::min) * 0.5
            } else {
                v(t, i)
            }
        });
        let m = metrics(&a).unwrap();
        prop_assert!(m.forgetting >= 0.0);
        prop_assert!((0.0..=1.0).contains(&m.average_accuracy));
    }

    #[test]
    fn selection_ignores_query_scale(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let embeddings: Vec<Array> = (0..4).map(|_| Array::uniform(&[5], -1.0, 1.0, &mut rng)).collect();
        let q = Array::uniform(&[5], -1.0, 1.0, &mut rng);
        let scaled: Vec<f64> = q.data().iter().map(|v| v * scale).collect();
        prop_assert_eq!(select_task(q.data(), &embeddings).unwrap(), select_task(&scaled, &embeddings).unwrap());
    }

    #[test]
    fn mixing_weights_sum_to_one(seed in any::<u64>(), tasks in 1usize..6) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let embeddings: Vec<Array> = (0..tasks).map(|_| Array::uniform(&[4], -1.0, 1.0, &mut rng)).collect();
        let q = Array::uniform(&[4], -1.0, 1.0, &mut rng);
        let w = mix_weights(q.data(), &embeddings).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }
}

#[test]
fn diversity_trivial_cases() {
    let zero = Array::zeros(&[4, 3]);
    assert_eq!(mean_nuclear_norm([Some(&zero), Some(&zero)]).unwrap(), Some(0.0));
    // 5 · u vᵀ with unit u and v.
    let u = [0.6, 0.8, 0.0, 0.0];
    let v = [0.0, 1.0, 0.0];
    let data: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| 5.0 * a * b)).collect();
    let rank_one = Array::new(vec![4, 3], data).unwrap();
    let d = mean_nuclear_norm([Some(&rank_one), Some(&rank_one), Some(&rank_one)]).unwrap().unwrap();
    assert!((d - 5.0).abs() < 1e-12);
    assert_eq!(mean_nuclear_norm([None, None]).unwrap(), None);
    assert_eq!(rbwp_core::harness::rundir::diversity_cell(None), "NA");
}

#[test]
fn scenarios_are_deterministic_and_disjoint() {
    let cfg = ScenarioConfig {
        samples_per_class: 10,
        ..ScenarioConfig::default()
    };
    let a = build_scenario(&cfg).unwrap();
    assert_eq!(a, build_scenario(&cfg).unwrap());
    for (t, task) in a.tasks().iter().enumerate() {
        assert_eq!(task.classes, 2 * t..2 * t + 2);
        for y in task.train.y.iter().chain(&task.test.y) {
            assert!(task.classes.contains(y));
        }
    }
    let mut classes: Vec<usize> = a.tasks().iter().flat_map(|t| t.classes.clone()).collect();
    classes.dedup();
    assert_eq!(classes, (0..10).collect::<Vec<_>>());
    let other = build_scenario(&ScenarioConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.task(0).train.x, other.task(0).train.x);
}

/// Nearest class mean over flattened inputs, trained on every train split.
fn nearest_centroid_accuracy(s: &Scenario) -> f64 {
    let classes = s.config().class_count();
    let width = s.task(0).train.x.len() / s.task(0).train.len();
    let mut sums = vec![vec![0.0; width]; classes];
    let mut counts = vec![0usize; classes];
    for task in s.tasks() {
        for (i, &y) in task.train.y.iter().enumerate() {
            for (acc, v) in sums[y].iter_mut().zip(&task.train.x.data()[i * width..(i + 1) * width]) {
                *acc += v;
            }
            counts[y] += 1;
        }
    }
    let (mut hits, mut total) = (0, 0);
    for task in s.tasks() {
        for (i, &y) in task.test.y.iter().enumerate() {
            let x = &task.test.x.data()[i * width..(i + 1) * width];
            let dist: Vec<f64> = (0..classes)
                .map(|c| {
                    -x.iter()
                        .zip(&sums[c])
                        .map(|(a, s)| (a - s / counts[c] as f64).powi(2))
                        .sum::<f64>()
                })
                .collect();
            hits += usize::from(argmax(&dist) == y);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn zero_separation_is_chance_level() {
    let s = build_scenario(&ScenarioConfig {
        separation: 0.0,
        samples_per_class: 200,
        patches: 4,
        dim: 8,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let acc = nearest_centroid_accuracy(&s);
    assert!((acc - 0.1).abs() <= 0.05, "{acc}");
    let separable = build_scenario(&ScenarioConfig {
        samples_per_class: 50,
        patches: 4,
        dim: 8,
        ..ScenarioConfig::default()
    })
    .unwrap();
    assert!(nearest_centroid_accuracy(&separable) > 0.9);
}

#[test]
fn one_task_reaches_high_train_accuracy() {
    let prepared = small_prepared();
    let s = settings(Strategy::Rainbow, 50);
    let mut learner = Learner::new(
        s.strategy,
        s.model,
        s.loss,
        s.gate,
        prepared.precision,
        prepared.encoder.clone(),
        prepared.seed(),
    )
    .unwrap();
    let task = prepared.scenario.task(0);
    learner.train_task(task, &prepared.queries[0].train).unwrap();
    let p = learner.predict(&task.train.x, &prepared.queries[0].train).unwrap();
    let acc = p.accuracy(&task.train.y);
    assert!(acc > 0.95, "{acc}");
}

#[test]
fn finalized_state_is_immutable_and_inference_is_evolution_free() {
    let run = rainbow_run();
    let learner = &run.learner;
    assert_eq!(learner.snapshots().len(), 3);
    for snap in learner.snapshots() {
        let t = snap.task;
        assert_eq!(learner.rainbow().get(t), snap.entry.as_ref());
        assert!(learner.pool().prompt(t).bitwise_eq(&snap.base_prompt));
        assert!(learner.embeddings().get(t).bitwise_eq(&snap.embedding));
        assert_eq!(learner.masks()[t], snap.mask);
        let classes = learner.task_classes()[t].clone();
        assert_eq!(learner.classifier().rows_snapshot(classes), snap.classifier_rows);
    }
    assert_eq!(learner.encoder(), &small_prepared().encoder);

    let calls = learner.evolver().calls();
    let relaxations = learner.relaxations();
    let prepared = small_prepared();
    let (_, _, preds) = evaluate(learner, prepared, 2).unwrap();
    assert_eq!(learner.evolver().calls(), calls);
    assert_eq!(learner.relaxations(), relaxations);
    assert_eq!(preds, run.predictions);
}

#[test]
fn perturbing_evolution_weights_changes_no_prediction() {
    let prepared = small_prepared();
    let mut learner = run_prepared(&settings(Strategy::Rainbow, 3), prepared).unwrap().learner;
    let (_, _, before) = evaluate(&learner, prepared, 2).unwrap();
    learner.weights_mut().perturb(0.25);
    let (_, _, after) = evaluate(&learner, prepared, 2).unwrap();
    assert_eq!(before, after);
}

#[test]
fn parameter_report_separates_training_from_inference() {
    let report = rainbow_run().parameters;
    let m = small_model();
    assert_eq!(report.evolution_weights, m.evolution_dims().layers * (3 * 16 * 8 + 8 * 16 + 2 * 16 * 4 + 4 * 16));
    assert!(report.trainable_per_task() > report.stored_prompts);
    assert_eq!(report.discarded_at_inference(), report.evolution_weights + report.gate_logits);
    assert_eq!(
        report.inference_touched(),
        report.backbone + report.classifier + report.task_embeddings + report.stored_prompts
    );
}

#[test]
fn whole_runs_are_deterministic() {
    let again = run_prepared(&settings(Strategy::Rainbow, 6), small_prepared()).unwrap();
    let first = rainbow_run();
    assert_eq!(accuracy_csv(&again.accuracy, 3), accuracy_csv(&first.accuracy, 3));
    assert_eq!(again.accuracy, first.accuracy);
    assert_eq!(again.learner.events(), first.learner.events());
}

#[test]
fn metrics_stay_in_range_over_a_run() {
    for step in &rainbow_run().steps {
        assert!((0.0..=1.0).contains(&step.metrics.average_accuracy));
        assert!(step.diversity.is_none_or(|d| d >= 0.0));
    }
}

#[test]
fn empty_mask_means_prompt_free_inference() {
    let prepared = small_prepared();
    let mut s = settings(Strategy::Rainbow, 2);
    s.gate.initial_alpha = 1e-3;
    s.loss.lambda_sparse = 0.0;
    let mut learner = Learner::new(
        s.strategy,
        s.model,
        s.loss,
        s.gate,
        prepared.precision,
        prepared.encoder.clone(),
        prepared.seed(),
    )
    .unwrap();
    let task = prepared.scenario.task(0);
    learner.train_task(task, &prepared.queries[0].train).unwrap();
    assert_eq!(learner.masks()[0], LayerMask::none(ENCODER.layers));
    assert!(learner.rainbow().get(0).unwrap().prompts().is_empty());

    let p = learner.predict(&task.test.x, &prepared.queries[0].test).unwrap();
    assert!(p.last_prompt_norms.iter().all(Option::is_none));
    let mut tape = Tape::new(prepared.precision);
    let q = tape.constant(prepared.queries[0].test.clone());
    let c = learner.classifier().bind(&mut tape).unwrap();
    let z = c.logits(&mut tape, q).unwrap();
    let z = tape.value(z);
    let width = z.shape()[1];
    let expected: Vec<usize> = z.data().chunks(width).map(argmax).collect();
    assert_eq!(p.classes, expected);
}

#[test]
fn single_task_baselines_are_plain_prompt_tuning() {
    let prepared = small_prepared();
    let train = |strategy| {
        let s = settings(strategy, 3);
        let mut l = Learner::new(
            s.strategy,
            s.model,
            s.loss,
            s.gate,
            prepared.precision,
            prepared.encoder.clone(),
            prepared.seed(),
        )
        .unwrap();
        l.train_task(prepared.scenario.task(0), &prepared.queries[0].train).unwrap();
        l
    };
    let fws = train(Strategy::FixedWeightedSum);
    let fs = train(Strategy::FrozenSpecific);
    assert!(fws.pool().prompt(0).bitwise_eq(fs.pool().prompt(0)));
    let x = &prepared.scenario.task(0).test.x;
    let q = &prepared.queries[0].test;
    assert_eq!(fws.predict(x, q).unwrap().classes, fs.predict(x, q).unwrap().classes);
    assert_eq!(fws.masks()[0], LayerMask::all(ENCODER.layers));
}

#[test]
fn run_directory_has_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = rainbow_run();
    write_run_dir(dir.path(), "# test\n", small_prepared(), run).unwrap();
    for f in ["config.cfg", "accuracy_matrix.csv", "metrics.csv", "parameters.csv", "events.log", "prompts/manifest.csv"] {
        let text = std::fs::read(dir.path().join(f)).unwrap();
        assert_eq!(text.last(), Some(&b'\n'), "{f}");
    }
    let acc = std::fs::read_to_string(dir.path().join("accuracy_matrix.csv")).unwrap();
    assert_eq!(acc.lines().count(), 4);
    assert_eq!(acc.lines().next(), Some("step,task_0,task_1,task_2"));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, metrics_csv(&run.steps));
    assert_eq!(metrics.lines().count(), 4);
    let events = std::fs::read_to_string(dir.path().join("events.log")).unwrap();
    assert_eq!(events.lines().count(), 3 * 6);
    assert!(events.lines().next().unwrap().starts_with("task=0 epoch=0 ce="));
    let manifest = std::fs::read_to_string(dir.path().join("prompts/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    let encoder = rbwp_core::snapshot::read(&dir.path().join("encoder.bin")).unwrap();
    let back = rbwp_core::backbone::Encoder::from_arrays(ENCODER, encoder).unwrap();
    assert_eq!(&back, &small_prepared().encoder);
    for snap in run.learner.snapshots() {
        let stored = rbwp_core::snapshot::read(&dir.path().join(format!("prompts/task_{}.bin", snap.task))).unwrap();
        let entry = snap.entry.as_ref().unwrap();
        assert_eq!(stored.len(), entry.prompts().len());
        for (a, (_, b)) in stored.iter().zip(entry.prompts()) {
            assert!(a.bitwise_eq(b));
        }
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let report = full_loss_grad_check(0, GradCheckHooks::default()).unwrap();
    assert!(report.passes(TOLERANCE), "{report:?}");
    assert!(report.checked > 500, "{report:?}");
    assert_eq!(report, full_loss_grad_check(0, GradCheckHooks::default()).unwrap());
}

#[test]
fn cross_entropy_only_loss_still_checks() {
    let case = GradCheckCase {
        lambda_sparse: 0.0,
        lambda_match: 0.0,
        soft_gate: false,
    };
    let report = loss_grad_check(1, &case, GradCheckHooks::default()).unwrap();
    assert!(report.passes(TOLERANCE), "{report:?}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let hooks = GradCheckHooks {
        corrupt_analytic: Some(1e-2),
    };
    let report = full_loss_grad_check(0, hooks).unwrap();
    assert!(!report.passes(TOLERANCE));
    assert_eq!(report.worst.unwrap().0, "classifier.bias");
}

#[test]
fn untrained_classifier_rows_are_zero() {
    let mut c = Classifier::new(3);
    c.grow(2);
    assert_eq!(c.rows_snapshot(0..2), (vec![0.0; 6], vec![0.0; 2]));
}
