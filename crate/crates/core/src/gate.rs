//! Probabilistic layer-insertion gate.
//!
//! Each layer has a free logit `θ_l`; the insertion probability is
//! `α_l = clamp(sigmoid θ_l, 1e-3, 1 - 1e-3)` and the two-way distribution is
//! `δ_l = [α_l, 1 - α_l]`. Component 0 means "insert". During the soft phase
//! the gate is relaxed with Gumbel noise; afterwards a binary mask is drawn
//! once per task.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

pub const ALPHA_MIN: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1.0 - 1e-3;

/// Index of the "insert" component of the relaxed gate.
pub const INSERT: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub tau: f64,
    /// Fraction of each task's epochs trained with the relaxed gate.
    pub soft_phase_fraction: f64,
    /// Insertion probability every gate starts from.
    pub initial_alpha: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 1.0,
            soft_phase_fraction: 0.6,
            initial_alpha: 0.9,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("GateConfig", format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.soft_phase_fraction) {
            return Err(Error::invalid(
                "GateConfig",
                format!("soft phase fraction must lie in [0, 1], got {}", self.soft_phase_fraction),
            ));
        }
        if !(ALPHA_MIN..=ALPHA_MAX).contains(&self.initial_alpha) {
            return Err(Error::invalid(
                "GateConfig",
                format!("initial alpha must lie in [{ALPHA_MIN}, {ALPHA_MAX}], got {}", self.initial_alpha),
            ));
        }
        Ok(())
    }

    /// Number of soft-phase epochs out of `epochs`.
    pub fn soft_epochs(&self, epochs: usize) -> usize {
        ((epochs as f64) * self.soft_phase_fraction).round() as usize
    }
}

/// Per-layer binary insertion decisions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerMask(Vec<bool>);

impl LayerMask {
    pub fn new(bits: Vec<bool>) -> Self {
        LayerMask(bits)
    }

    pub fn all(layers: usize) -> Self {
        LayerMask(vec![true; layers])
    }

    pub fn none(layers: usize) -> Self {
        LayerMask(vec![false; layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_set(&self, layer: usize) -> bool {
        self.0.get(layer).copied().unwrap_or(false)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Selected layer indices, ascending.
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

/// Renders as a string of `0`/`1`, layer 0 first.
impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for LayerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::invalid("LayerMask", format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(LayerMask)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn clamp_alpha(a: f64) -> f64 {
    a.clamp(ALPHA_MIN, ALPHA_MAX)
}

/// One standard Gumbel draw, `-log(-log U)` with `U` uniform in `(0, 1)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(rand_distr::Open01);
    -(-u.ln()).ln()
}

/// Gumbel-softmax relaxation of `δ` with fixed noise.
pub fn gumbel_relax(delta: [f64; 2], noise: [f64; 2], tau: f64) -> Result<[f64; 2]> {
    if !(tau > 0.0) {
        return Err(Error::invalid("gumbel_relax", format!("tau must be positive, got {tau}")));
    }
    let z0 = (delta[0].ln() + noise[0]) / tau;
    let z1 = (delta[1].ln() + noise[1]) / tau;
    let m = z0.max(z1);
    let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
    let s = e0 + e1;
    Ok([e0 / s, e1 / s])
}

/// `Σ_l log α_l`.
pub fn sparse_penalty_value(alpha: &[f64]) -> f64 {
    alpha.iter().map(|a| a.ln()).sum()
}

/// Bernoulli(α_l) draw per layer.
pub fn draw_mask<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> LayerMask {
    LayerMask(alpha.iter().map(|&a| rng.random::<f64>() < a).collect())
}

/// Gate logits bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundGate {
    pub theta: Var,
    /// Clamped insertion probabilities `[L]`.
    pub alpha: Var,
}

impl BoundGate {
    /// Builds from logits already on the tape.
    pub fn from_theta(tape: &mut Tape, theta: Var) -> Self {
        let s = tape.sigmoid(theta);
        let alpha = tape.clamp(s, ALPHA_MIN, ALPHA_MAX);
        BoundGate { theta, alpha }
    }
}

/// Gate of one task.
#[derive(Debug)]
pub struct GateState {
    theta: Array,
    tau: f64,
    seed: u64,
    mask: Option<LayerMask>,
    relaxations: AtomicUsize,
}

impl Clone for GateState {
    fn clone(&self) -> Self {
        GateState {
            theta: self.theta.clone(),
            tau: self.tau,
            seed: self.seed,
            mask: self.mask.clone(),
            relaxations: AtomicUsize::new(self.relaxations()),
        }
    }
}

impl GateState {
    pub fn new(layers: usize, config: &GateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if layers == 0 {
            return Err(Error::invalid("GateState", "at least one layer is required"));
        }
        let a = config.initial_alpha;
        let logit = (a / (1.0 - a)).ln();
        Ok(GateState {
            theta: Array::full(&[layers], logit),
            tau: config.tau,
            seed,
            mask: None,
            relaxations: AtomicUsize::new(0),
        })
    }

    pub fn layers(&self) -> usize {
        self.theta.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn theta(&self) -> &Array {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Array) -> Result<()> {
        if theta.shape() != self.theta.shape() {
            return Err(Error::shape("GateState::set_theta", self.theta.shape(), theta.shape()));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.theta.data().iter().map(|&t| clamp_alpha(sigmoid(t))).collect()
    }

    pub fn mask(&self) -> Option<&LayerMask> {
        self.mask.as_ref()
    }

    /// Number of relaxations evaluated through this gate.
    pub fn relaxations(&self) -> usize {
        self.relaxations.load(Ordering::Relaxed)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGate {
        let theta = tape.param("gate.theta", self.theta.clone());
        BoundGate::from_theta(tape, theta)
    }

    /// Relaxed insert gates `[L]` under fixed Gumbel `noise` (`[L, 2]`).
    pub fn relax(&self, tape: &mut Tape, bound: &BoundGate, noise: &Array) -> Result<Var> {
        self.relaxations.fetch_add(1, Ordering::Relaxed);
        relax_on_tape(tape, bound.alpha, noise, self.tau)
    }

    /// Draws fresh Gumbel noise `[L, 2]`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Array {
        let l = self.layers();
        let data = (0..2 * l).map(|_| sample_gumbel(rng)).collect();
        Array::new(vec![l, 2], data).expect("noise shape")
    }

    pub fn apply_gradients(&mut self, bound: &BoundGate, grads: &Gradients, rate: f64) {
        if self.mask.is_none() {
            self.theta.sgd_step(grads.wrt(bound.theta), rate);
        }
    }

    /// Samples the task's binary mask from its own seeded generator.
    pub fn sample_mask(&mut self) -> Result<&LayerMask> {
        if self.mask.is_some() {
            return Err(Error::State("the layer mask for this task is already sampled".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mask = draw_mask(&self.alpha(), &mut rng);
        Ok(self.mask.insert(mask))
    }

    /// Fixes the mask without sampling (all-layer baselines, tests).
    pub fn force_mask(&mut self, mask: LayerMask) -> Result<&LayerMask> {
        if self.mask.is_some() {
            return Err(Error::State("the layer mask for this task is already sampled".into()));
        }
        if mask.len() != self.layers() {
            return Err(Error::invalid(
                "GateState::force_mask",
                format!("mask covers {} layers, gate has {}", mask.len(), self.layers()),
            ));
        }
        Ok(self.mask.insert(mask))
    }
}

/// Relaxed insert component `[L]` of `δ = [α, 1 - α]` for tape `alpha` (`[L]`).
pub fn relax_on_tape(tape: &mut Tape, alpha: Var, noise: &Array, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("gumbel_relax", format!("tau must be positive, got {tau}")));
    }
    let l = match tape.shape(alpha) {
        [l] => *l,
        other => return Err(Error::invalid("gumbel_relax", format!("alpha must be 1-D, got {other:?}"))),
    };
    if noise.shape() != [l, 2] {
        return Err(Error::shape("gumbel_relax", &[l, 2], noise.shape()));
    }
    let log_in = tape.log(alpha)?;
    let neg = tape.scale(alpha, -1.0);
    let out = tape.add_const(neg, 1.0);
    let log_out = tape.log(out)?;
    let a = tape.reshape(log_in, &[l, 1])?;
    let b = tape.reshape(log_out, &[l, 1])?;
    let logits = tape.concat(&[a, b], 1)?;
    let z = tape.constant(noise.clone());
    let logits = tape.add(logits, z)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let soft = tape.softmax(logits, 1)?;
    let insert = tape.slice(soft, 1, INSERT..INSERT + 1)?;
    tape.reshape(insert, &[l])
}

/// `Σ_l log α_l` on the tape.
pub fn sparse_penalty(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let logs = tape.log(alpha)?;
    Ok(tape.sum(logs))
}
