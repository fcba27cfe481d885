//! Finite-difference verification of the full training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::learner::{training_loss, GatePhase, LossInputs, ModelConfig, Strategy};
use super::{derive_seed, streams};
use crate::backbone::{Classifier, Encoder, EncoderConfig};
use crate::diffcore::{grad_check_with, Array, GradCheckHooks, GradCheckReport, NamedParam, Precision};
use crate::error::Result;
use crate::evolution::{BoundEvolution, BoundPool, EvolutionWeights, Evolver};
use crate::gate::{relax_on_tape, BoundGate, GateState, LayerMask};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Small model: 3 layers, D = 8, prompt length 4, projection and bottleneck 4.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 3,
            dim: 8,
            heads: 2,
            tokens: 5,
            mlp_dim: 16,
        },
        prompt_len: 4,
        proj_dim: 4,
        hidden_dim: 4,
        ..ModelConfig::default()
    }
}

/// Loss weights and gate phase of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckCase {
    pub lambda_sparse: f64,
    pub lambda_match: f64,
    /// Relaxed gates with fixed noise; otherwise every layer is inserted.
    pub soft_gate: bool,
}

impl Default for GradCheckCase {
    fn default() -> Self {
        GradCheckCase {
            lambda_sparse: 0.01,
            lambda_match: 0.01,
            soft_gate: true,
        }
    }
}

/// Checks the gradient of `CE + 0.01·L_sparse + 0.01·L_match` for the
/// second of two tasks, in the soft-gate phase with fixed Gumbel noise,
/// with respect to every trainable parameter.
pub fn full_loss_grad_check(seed: u64, hooks: GradCheckHooks) -> Result<GradCheckReport> {
    loss_grad_check(seed, &GradCheckCase::default(), hooks)
}

pub fn loss_grad_check(seed: u64, case: &GradCheckCase, hooks: GradCheckHooks) -> Result<GradCheckReport> {
    let model = toy_model();
    let cfg = model.encoder;
    let (layers, d, lp) = (cfg.layers, cfg.dim, model.prompt_len);
    let encoder = Encoder::random(cfg, derive_seed(seed, streams::ENCODER))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::TRAINING));

    let batch = 4;
    let x = Array::normal(&[batch, cfg.patches(), d], 1.0, &mut rng);
    let targets = vec![2, 3, 2, 3];
    let queries = encoder.query_features(&x, Precision::Double)?;
    let old_prompt = Array::uniform(&[layers, lp, d], -0.5, 0.5, &mut rng);
    let old_embedding = Array::uniform(&[d], -1.0, 1.0, &mut rng);

    let mut classifier = Classifier::new(d);
    classifier.grow(2);
    classifier.set_open_rows(&Array::normal(&[2, d], 0.3, &mut rng), &Array::normal(&[2], 0.3, &mut rng))?;
    classifier.freeze_all();
    classifier.grow(2);

    let mut weights = EvolutionWeights::random(model.evolution_dims(), &mut rng)?;
    for l in 0..layers {
        let w = weights.layer_mut(l)?;
        for ln in [&mut w.ln1_gamma, &mut w.ln2_gamma] {
            *ln = Array::uniform(&[d], 0.5, 1.5, &mut rng);
        }
        for ln in [&mut w.ln1_beta, &mut w.ln2_beta] {
            *ln = Array::uniform(&[d], -0.2, 0.2, &mut rng);
        }
    }
    let gate = GateState::new(layers, &Default::default(), derive_seed(seed, streams::GATE + 1))?;
    let noise = gate.draw_noise(&mut rng);
    let theta = Array::uniform(&[layers], -1.0, 2.0, &mut rng);

    let mut params = vec![
        NamedParam::new("base_prompt", Array::uniform(&[layers, lp, d], -0.5, 0.5, &mut rng)),
        NamedParam::new("task_embedding", Array::uniform(&[d], -1.0, 1.0, &mut rng)),
    ];
    let evo_start = params.len();
    params.extend(
        weights
            .named_arrays()
            .into_iter()
            .map(|(name, a)| NamedParam::new(name, a.clone())),
    );
    let evo_end = params.len();
    params.push(NamedParam::new("gate.theta", theta));
    params.push(NamedParam::new("classifier.weights", Array::normal(&[2, d], 0.3, &mut rng)));
    params.push(NamedParam::new("classifier.bias", Array::normal(&[2], 0.3, &mut rng)));

    let evolver = Evolver::new();
    let previous = [old_embedding];
    let loss_fn = |tape: &mut crate::diffcore::Tape, vars: &[crate::diffcore::Var]| {
        let bound_encoder = encoder.bind(tape);
        let xv = tape.constant(x.clone());
        let qv = tape.constant(queries.clone());
        let mut pool = BoundPool::new(vec![old_prompt.clone()], Some(vars[0]), layers, lp, d);
        let evo = BoundEvolution::from_vars(&vars[evo_start..evo_end])?;
        let phase = if case.soft_gate {
            let g = BoundGate::from_theta(tape, vars[evo_end]);
            let relaxed = relax_on_tape(tape, g.alpha, &noise, gate.tau())?;
            GatePhase::Soft { alpha: g.alpha, relaxed }
        } else {
            GatePhase::Hard(LayerMask::all(layers))
        };
        let bound_classifier = classifier.bind_open(tape, vars[evo_end + 1], vars[evo_end + 2])?;
        let inputs = LossInputs {
            strategy: Strategy::Rainbow,
            encoder: &encoder,
            bound_encoder: &bound_encoder,
            x: xv,
            targets: &targets,
            active: 2..4,
            queries: qv,
            embedding: vars[1],
            previous_embeddings: &previous,
            evolution: Some(&evo),
            phase: &phase,
            classifier: &bound_classifier,
            lambda_sparse: case.lambda_sparse,
            lambda_match: case.lambda_match,
        };
        Ok(training_loss(tape, &inputs, &mut pool, &evolver)?.total)
    };
    grad_check_with(loss_fn, &params, STEP, hooks)
}
