use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rbwp_core::diffcore::{grad_check, NamedParam};
use rbwp_core::gate::*;
use rbwp_core::{Array, Tape};

fn logit(a: f64) -> f64 {
    (a / (1.0 - a)).ln()
}

#[test]
fn symmetric_inputs_split_evenly() {
    for tau in [0.01, 0.5, 1.0, 7.0] {
        let g = gumbel_relax([0.5, 0.5], [0.3, 0.3], tau).unwrap();
        assert_eq!(g, [0.5, 0.5]);
    }
}

#[test]
fn low_temperature_approaches_one_hot() {
    let noise = [0.2, -0.4];
    let g = gumbel_relax([0.9, 0.1], noise, 0.01).unwrap();
    let winner = if 0.9f64.ln() + noise[0] > 0.1f64.ln() + noise[1] { 0 } else { 1 };
    assert!((g[winner] - 1.0).abs() < 1e-6);
    assert!(g[1 - winner] < 1e-6);
}

#[test]
fn non_positive_temperature_is_rejected() {
    assert!(gumbel_relax([0.5, 0.5], [0.0, 0.0], 0.0).is_err());
    assert!(gumbel_relax([0.5, 0.5], [0.0, 0.0], -1.0).is_err());
    let mut tape = Tape::default();
    let a = tape.constant(Array::from_vec(vec![0.5]));
    assert!(relax_on_tape(&mut tape, a, &Array::zeros(&[1, 2]), 0.0).is_err());
}

#[test]
fn sparse_penalty_values() {
    assert!((sparse_penalty_value(&[0.5, 0.25]) - (-2.0794415416798357)).abs() < 1e-12);
    let e = (-1.0f64).exp();
    assert!((sparse_penalty_value(&[e; 4]) + 4.0).abs() < 1e-12);
    let near_one = sparse_penalty_value(&[ALPHA_MAX; 3]);
    assert!((near_one - 3.0 * (1.0 - 1e-3f64).ln()).abs() < 1e-15);
    assert!(near_one < 0.0 && near_one > -0.0031);
}

#[test]
fn sparse_penalty_is_bounded_by_clamping() {
    let mut tape = Tape::default();
    let theta = tape.param("theta", Array::from_vec(vec![-50.0, 50.0, 0.0]));
    let g = BoundGate::from_theta(&mut tape, theta);
    let p = sparse_penalty(&mut tape, g.alpha).unwrap();
    let v = tape.value(p).item();
    assert!(v >= 3.0 * ALPHA_MIN.ln());
    let expected = ALPHA_MIN.ln() + ALPHA_MAX.ln() + 0.5f64.ln();
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn alpha_stays_clamped() {
    let mut g = GateState::new(3, &GateConfig::default(), 0).unwrap();
    g.set_theta(Array::from_vec(vec![-100.0, 0.0, 100.0])).unwrap();
    let a = g.alpha();
    assert_eq!(a[0], ALPHA_MIN);
    assert_eq!(a[2], ALPHA_MAX);
    assert_eq!(a[1] + (1.0 - a[1]), 1.0);
}

fn frequencies(alpha: &[f64], draws: usize) -> Vec<f64> {
    let theta = Array::from_vec(alpha.iter().map(|&a| logit(a)).collect());
    let mut hits = vec![0usize; alpha.len()];
    for seed in 0..draws as u64 {
        let mut g = GateState::new(alpha.len(), &GateConfig::default(), seed).unwrap();
        g.set_theta(theta.clone()).unwrap();
        for (h, &bit) in hits.iter_mut().zip(g.sample_mask().unwrap().bits()) {
            *h += usize::from(bit);
        }
    }
    hits.iter().map(|&h| h as f64 / draws as f64).collect()
}

#[test]
fn sample_mask_frequencies_match_alpha() {
    let alpha = [ALPHA_MAX, ALPHA_MIN, 0.3, 0.9];
    let freq = frequencies(&alpha, 10_000);
    for (f, a) in freq.iter().zip(alpha) {
        assert!((f - a).abs() <= 0.01, "{f} vs {a}");
    }
}

#[test]
fn sample_mask_is_seeded_and_write_once() {
    let mut a = GateState::new(5, &GateConfig::default(), 42).unwrap();
    let mut b = GateState::new(5, &GateConfig::default(), 42).unwrap();
    for g in [&mut a, &mut b] {
        g.set_theta(Array::from_vec(vec![0.0, 0.5, -0.5, 1.0, -1.0])).unwrap();
    }
    let ma = a.sample_mask().unwrap().clone();
    assert_eq!(&ma, b.sample_mask().unwrap());
    assert!(a.sample_mask().is_err());
    assert!(a.force_mask(LayerMask::all(5)).is_err());
    assert_eq!(a.mask(), Some(&ma));
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gate = GateState::new(4, &GateConfig::default(), 0).unwrap();
    let noise = gate.draw_noise(&mut rng);
    let weights = Array::uniform(&[4], -1.0, 1.0, &mut rng);
    let params = [NamedParam::new("theta", Array::uniform(&[4], -2.0, 2.0, &mut rng))];
    for tau in [0.5, 1.0, 2.0] {
        let report = grad_check(
            |tape, vars| {
                let g = BoundGate::from_theta(tape, vars[0]);
                let soft = relax_on_tape(tape, g.alpha, &noise, tau)?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(soft, w)?;
                let s = tape.sum(prod);
                let sp = sparse_penalty(tape, g.alpha)?;
                tape.add(s, sp)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "tau {tau}: {report:?}");
    }
}

#[test]
fn tape_relaxation_agrees_with_scalar_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gate = GateState::new(3, &GateConfig::default(), 0).unwrap();
    let noise = gate.draw_noise(&mut rng);
    let alpha = [0.2, 0.5, 0.95];
    let mut tape = Tape::default();
    let a = tape.constant(Array::from_vec(alpha.to_vec()));
    let soft = relax_on_tape(&mut tape, a, &noise, 0.7).unwrap();
    for l in 0..3 {
        let g = gumbel_relax([alpha[l], 1.0 - alpha[l]], [noise.at(&[l, 0]), noise.at(&[l, 1])], 0.7).unwrap();
        assert!((tape.value(soft).data()[l] - g[INSERT]).abs() < 1e-15);
    }
}

#[test]
fn relaxation_counter_tracks_calls() {
    let gate = GateState::new(2, &GateConfig::default(), 0).unwrap();
    let mut tape = Tape::default();
    let bound = gate.bind(&mut tape);
    assert_eq!(gate.relaxations(), 0);
    gate.relax(&mut tape, &bound, &Array::zeros(&[2, 2])).unwrap();
    assert_eq!(gate.relaxations(), 1);
}

proptest! {
    #[test]
    fn soft_gates_sum_to_one(a in 1e-3f64..0.999, z0 in -5.0f64..10.0, z1 in -5.0f64..10.0, tau in 0.01f64..10.0) {
        let g = gumbel_relax([a, 1.0 - a], [z0, z1], tau).unwrap();
        prop_assert!((g[0] + g[1] - 1.0).abs() < 1e-9);
        prop_assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn low_temperature_saturates_beyond_the_gap(a in 1e-3f64..0.999, z0 in -5.0f64..10.0, z1 in -5.0f64..10.0) {
        let (l0, l1) = (a.ln() + z0, (1.0 - a).ln() + z1);
        prop_assume!((l0 - l1).abs() > 0.1);
        let g = gumbel_relax([a, 1.0 - a], [z0, z1], 0.01).unwrap();
        prop_assert!(g[0].max(g[1]) > 1.0 - 1e-4);
        prop_assert_eq!(g[0] > g[1], l0 > l1);
    }

    #[test]
    fn gumbel_draws_are_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            prop_assert!(sample_gumbel(&mut rng).is_finite());
        }
    }
}
