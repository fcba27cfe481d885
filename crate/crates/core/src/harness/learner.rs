//! Training and inference for the three strategies.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{cosine, select_task};
use super::scenario::{Dataset, TaskData};
use super::{derive_seed, format_float, streams};
use crate::backbone::{BoundClassifier, BoundEncoder, Classifier, Encoder, EncoderConfig, PrefixPair, PrefixVars};
use crate::diffcore::{nuclear_norm, Array, Precision, Tape, Var};
use crate::error::{Error, Result};
use crate::evolution::{
    BasePromptPool, BoundEvolution, BoundPool, EvolutionDims, EvolutionWeights, Evolver, RainbowEntry,
    RainbowPromptSet, TaskEmbeddings,
};
use crate::gate::{sparse_penalty, BoundGate, GateConfig, GateState, LayerMask};

/// Samples per inference tape.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Evolved unified prompts with gated layer insertion.
    Rainbow,
    /// Per-sample softmax mix of frozen task prompts at every layer.
    FixedWeightedSum,
    /// The selected task's own base prompt at every layer.
    FrozenSpecific,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Rainbow, Strategy::FixedWeightedSum, Strategy::FrozenSpecific];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rainbow => "rainbow",
            Strategy::FixedWeightedSum => "fixed_weighted_sum",
            Strategy::FrozenSpecific => "frozen_specific",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected rainbow, fixed_weighted_sum or frozen_specific")))
    }
}

/// How a new task embedding starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingInit {
    /// Mean query feature of the task's training inputs.
    QueryMean,
    /// Uniform in `±1/√D`.
    Uniform,
}

impl FromStr for EmbeddingInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_mean" => Ok(EmbeddingInit::QueryMean),
            "uniform" => Ok(EmbeddingInit::Uniform),
            other => Err(Error::Config(format!("unknown embedding init {other:?}; expected query_mean or uniform"))),
        }
    }
}

impl fmt::Display for EmbeddingInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingInit::QueryMean => "query_mean",
            EmbeddingInit::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt_len: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub embedding_init: EmbeddingInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prompt_len: 20,
            proj_dim: 16,
            hidden_dim: 8,
            embedding_init: EmbeddingInit::QueryMean,
        }
    }
}

impl ModelConfig {
    pub fn evolution_dims(&self) -> EvolutionDims {
        EvolutionDims {
            layers: self.encoder.layers,
            prompt_len: self.prompt_len,
            dim: self.encoder.dim,
            proj_dim: self.proj_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.evolution_dims().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_sparse: f64,
    pub lambda_match: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sparse: 0.01,
            lambda_match: 0.01,
            learning_rate: 0.03,
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("LossConfig", reason));
        if !(self.lambda_sparse >= 0.0) || !(self.lambda_match >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        Ok(())
    }
}

/// Mean loss terms of one epoch plus the gate state at its end.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochEvent {
    pub task: usize,
    pub epoch: usize,
    pub ce: f64,
    pub sparse: f64,
    pub matching: f64,
    pub alpha: Vec<f64>,
}

impl fmt::Display for EpochEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let alpha: Vec<String> = self.alpha.iter().map(|a| format_float(*a)).collect();
        write!(
            f,
            "task={} epoch={} ce={} sparse={} match={} alpha={}",
            self.task,
            self.epoch,
            format_float(self.ce),
            format_float(self.sparse),
            format_float(self.matching),
            alpha.join(",")
        )
    }
}

/// State of one task captured when it was finalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalizeSnapshot {
    pub task: usize,
    pub entry: Option<RainbowEntry>,
    pub base_prompt: Array,
    pub embedding: Array,
    pub mask: LayerMask,
    pub classifier_rows: (Vec<f64>, Vec<f64>),
}

/// Gate treatment inside one training step.
#[derive(Clone, Debug)]
pub enum GatePhase {
    /// Relaxed insert gates `[L]` scale each layer's prompt.
    Soft { alpha: Var, relaxed: Var },
    /// Prompts only at the mask's layers.
    Hard(LayerMask),
}

/// Everything a training loss needs besides the prompt pool.
pub struct LossInputs<'a> {
    pub strategy: Strategy,
    pub encoder: &'a Encoder,
    pub bound_encoder: &'a BoundEncoder,
    pub x: Var,
    pub targets: &'a [usize],
    /// Classes the cross-entropy normalizes over.
    pub active: Range<usize>,
    /// Query features of the batch, `[B, D]`.
    pub queries: Var,
    pub embedding: Var,
    /// Frozen embeddings of earlier tasks.
    pub previous_embeddings: &'a [Array],
    pub evolution: Option<&'a BoundEvolution>,
    pub phase: &'a GatePhase,
    pub classifier: &'a BoundClassifier,
    pub lambda_sparse: f64,
    pub lambda_match: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub sparse: Option<Var>,
    pub matching: Var,
}

/// `CE + λ_s·L_sparse + λ_m·L_match` for one batch. The sparsity term is
/// present only in the soft phase.
pub fn training_loss(tape: &mut Tape, inputs: &LossInputs<'_>, pool: &mut BoundPool, evolver: &Evolver) -> Result<LossTerms> {
    let layers = inputs.encoder.config().layers;
    let mut prompts: Vec<Option<PrefixVars>> = vec![None; layers];
    match inputs.strategy {
        Strategy::Rainbow => {
            let evo = inputs
                .evolution
                .ok_or_else(|| Error::invalid("training_loss", "rainbow training needs evolution weights"))?;
            for (l, slot) in prompts.iter_mut().enumerate() {
                let gate = match inputs.phase {
                    GatePhase::Soft { relaxed, .. } => Some(tape.slice(*relaxed, 0, l..l + 1)?),
                    GatePhase::Hard(mask) if mask.is_set(l) => None,
                    GatePhase::Hard(_) => continue,
                };
                let stack = pool.layer_stack(tape, l)?;
                let newest = pool.newest_at(tape, l)?;
                let mut p = evolver.evolve_layer(tape, stack, newest, inputs.embedding, evo, l)?;
                if let Some(g) = gate {
                    p = tape.mul(p, g)?;
                }
                *slot = Some(PrefixVars::split(tape, p)?);
            }
        }
        Strategy::FrozenSpecific => {
            for (l, slot) in prompts.iter_mut().enumerate() {
                let p = pool.newest_at(tape, l)?;
                *slot = Some(PrefixVars::split(tape, p)?);
            }
        }
        Strategy::FixedWeightedSum => {
            let batch = tape.shape(inputs.x)[0];
            let mut columns = Vec::with_capacity(inputs.previous_embeddings.len() + 1);
            for e in inputs.previous_embeddings {
                let ev = tape.constant(e.clone());
                let c = tape.cosine_rows(inputs.queries, ev)?;
                columns.push(tape.reshape(c, &[batch, 1])?);
            }
            let c = tape.cosine_rows(inputs.queries, inputs.embedding)?;
            columns.push(tape.reshape(c, &[batch, 1])?);
            let scores = tape.concat(&columns, 1)?;
            let weights = tape.softmax(scores, 1)?;
            let t = columns.len();
            for (l, slot) in prompts.iter_mut().enumerate() {
                let stack = pool.layer_stack(tape, l)?;
                let shape = tape.shape(stack).to_vec();
                let flat = tape.reshape(stack, &[t, shape[1] * shape[2]])?;
                let mixed = tape.matmul(weights, flat)?;
                let mixed = tape.reshape(mixed, &[batch, shape[1], shape[2]])?;
                *slot = Some(PrefixVars::split(tape, mixed)?);
            }
        }
    }
    let logits = inputs
        .encoder
        .forward(tape, inputs.bound_encoder, inputs.x, &prompts, inputs.classifier)?;
    let ce = tape.cross_entropy(logits, inputs.targets, inputs.active.clone())?;
    let cos = tape.cosine_rows(inputs.queries, inputs.embedding)?;
    let mean_cos = tape.mean(cos);
    let neg = tape.scale(mean_cos, -1.0);
    let matching = tape.add_const(neg, 1.0);
    let weighted_match = tape.scale(matching, inputs.lambda_match);
    let mut total = tape.add(ce, weighted_match)?;
    let sparse = match inputs.phase {
        GatePhase::Soft { alpha, .. } => {
            let s = sparse_penalty(tape, *alpha)?;
            let ws = tape.scale(s, inputs.lambda_sparse);
            total = tape.add(total, ws)?;
            Some(s)
        }
        GatePhase::Hard(_) => None,
    };
    Ok(LossTerms {
        total,
        ce,
        sparse,
        matching,
    })
}

/// Predicted classes for a test set, with routing and prompt diversity.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    /// Routed task per sample (for the weighted sum: the heaviest weight).
    pub selected: Vec<usize>,
    /// Nuclear norm of the prompt at the deepest inserted layer, per sample.
    pub last_prompt_norms: Vec<Option<f64>>,
}

impl Predictions {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self.classes.iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len() as f64
    }
}

/// All mutable learning state of one strategy over a scenario.
#[derive(Debug)]
pub struct Learner {
    strategy: Strategy,
    model: ModelConfig,
    loss: LossConfig,
    gate_config: GateConfig,
    precision: Precision,
    seed: u64,
    encoder: Encoder,
    pool: BasePromptPool,
    embeddings: TaskEmbeddings,
    weights: EvolutionWeights,
    gates: Vec<GateState>,
    rainbow: RainbowPromptSet,
    classifier: Classifier,
    evolver: Evolver,
    task_classes: Vec<Range<usize>>,
    rng: ChaCha8Rng,
    events: Vec<EpochEvent>,
    snapshots: Vec<FinalizeSnapshot>,
}

impl Learner {
    pub fn new(
        strategy: Strategy,
        model: ModelConfig,
        loss: LossConfig,
        gate_config: GateConfig,
        precision: Precision,
        encoder: Encoder,
        seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        loss.validate()?;
        gate_config.validate()?;
        if *encoder.config() != model.encoder {
            return Err(Error::invalid("Learner", "encoder does not match the model configuration"));
        }
        let dims = model.evolution_dims();
        let mut weight_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::EVOLUTION));
        Ok(Learner {
            strategy,
            model,
            loss,
            gate_config,
            precision,
            seed,
            pool: BasePromptPool::new(dims.layers, dims.prompt_len, dims.dim),
            embeddings: TaskEmbeddings::new(dims.dim),
            weights: EvolutionWeights::random(dims, &mut weight_rng)?,
            gates: Vec::new(),
            rainbow: RainbowPromptSet::new(),
            classifier: Classifier::new(dims.dim),
            evolver: Evolver::new(),
            task_classes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::TRAINING)),
            events: Vec::new(),
            snapshots: Vec::new(),
            encoder,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn pool(&self) -> &BasePromptPool {
        &self.pool
    }

    pub fn embeddings(&self) -> &TaskEmbeddings {
        &self.embeddings
    }

    pub fn weights(&self) -> &EvolutionWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut EvolutionWeights {
        &mut self.weights
    }

    pub fn gates(&self) -> &[GateState] {
        &self.gates
    }

    pub fn rainbow(&self) -> &RainbowPromptSet {
        &self.rainbow
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn evolver(&self) -> &Evolver {
        &self.evolver
    }

    pub fn events(&self) -> &[EpochEvent] {
        &self.events
    }

    pub fn snapshots(&self) -> &[FinalizeSnapshot] {
        &self.snapshots
    }

    pub fn tasks_done(&self) -> usize {
        self.task_classes.len()
    }

    pub fn task_classes(&self) -> &[Range<usize>] {
        &self.task_classes
    }

    /// Total gate relaxations evaluated so far.
    pub fn relaxations(&self) -> usize {
        self.gates.iter().map(GateState::relaxations).sum()
    }

    /// Layer mask of each finished task.
    pub fn masks(&self) -> Vec<LayerMask> {
        self.gates.iter().filter_map(|g| g.mask().cloned()).collect()
    }

    /// Trains the next task. `queries` holds the query features of
    /// `data.train`, row for row.
    pub fn train_task(&mut self, data: &TaskData, queries: &Array) -> Result<()> {
        let t = self.task_classes.len();
        let layers = self.model.encoder.layers;
        if data.classes.start != self.classifier.class_count() || data.classes.is_empty() {
            return Err(Error::invalid(
                "train_task",
                format!("task {t} classes {:?} must start at {}", data.classes, self.classifier.class_count()),
            ));
        }
        if queries.shape() != [data.train.len(), self.model.encoder.dim] {
            return Err(Error::shape("train_task", &[data.train.len(), self.model.encoder.dim], queries.shape()));
        }
        self.pool.open_task(&mut self.rng)?;
        match self.model.embedding_init {
            EmbeddingInit::Uniform => {
                self.embeddings.open_task(&mut self.rng)?;
            }
            EmbeddingInit::QueryMean => {
                let d = self.model.encoder.dim;
                let mut mean = vec![0.0; d];
                for row in queries.data().chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / data.train.len() as f64);
                }
                self.embeddings.open_with(Array::from_vec(mean))?;
            }
        }
        self.classifier.grow(data.classes.len());

        let mut gate = GateState::new(layers, &self.gate_config, derive_seed(self.seed, streams::GATE + t as u64))?;
        let rainbow = self.strategy == Strategy::Rainbow;
        let soft_epochs = if rainbow {
            self.gate_config.soft_epochs(self.loss.epochs)
        } else {
            gate.force_mask(LayerMask::all(layers))?;
            0
        };

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for epoch in 0..self.loss.epochs {
            if gate.mask().is_none() && epoch >= soft_epochs {
                gate.sample_mask()?;
            }
            order.shuffle(&mut self.rng);
            let (mut sums, mut batches) = ([0.0; 3], 0usize);
            for chunk in order.chunks(self.loss.batch_size) {
                let batch = data.train.gather(chunk);
                let q = gather_rows(queries, chunk);
                let terms = self.step(&batch, &q, data.classes.clone(), &mut gate).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("task {t} epoch {epoch}: {m}")),
                    other => other,
                })?;
                sums.iter_mut().zip(terms).for_each(|(s, v)| *s += v);
                batches += 1;
            }
            let n = batches.max(1) as f64;
            self.events.push(EpochEvent {
                task: t,
                epoch,
                ce: sums[0] / n,
                sparse: sums[1] / n,
                matching: sums[2] / n,
                alpha: gate.alpha(),
            });
        }
        if gate.mask().is_none() {
            gate.sample_mask()?;
        }
        let mask = gate.mask().cloned().expect("mask sampled above");
        let embedding = self.embeddings.current().expect("opened above").clone();
        let entry = if rainbow {
            Some(
                self.evolver
                    .finalize_task(&mut self.rainbow, &self.pool, &embedding, &self.weights, &mask, self.precision)?
                    .clone(),
            )
        } else {
            None
        };
        self.pool.freeze_current();
        self.embeddings.freeze_current();
        self.classifier.freeze_all();
        self.snapshots.push(FinalizeSnapshot {
            task: t,
            entry,
            base_prompt: self.pool.prompt(t).clone(),
            embedding,
            mask,
            classifier_rows: self.classifier.rows_snapshot(data.classes.clone()),
        });
        self.gates.push(gate);
        self.task_classes.push(data.classes.clone());
        Ok(())
    }

    /// One SGD step; returns `[ce, sparse, match]`.
    fn step(&mut self, batch: &Dataset, queries: &Array, active: Range<usize>, gate: &mut GateState) -> Result<[f64; 3]> {
        let mut tape = Tape::new(self.precision);
        let bound_encoder = self.encoder.bind(&mut tape);
        let x = tape.constant(batch.x.clone());
        let q = tape.constant(queries.clone());
        let mut pool = self.pool.bind(&mut tape);
        let embedding = self.embeddings.bind_current(&mut tape)?;
        let evolution = (self.strategy == Strategy::Rainbow).then(|| self.weights.bind(&mut tape, true));
        let classifier = self.classifier.bind(&mut tape)?;
        let (phase, bound_gate): (GatePhase, Option<BoundGate>) = match gate.mask() {
            Some(mask) => (GatePhase::Hard(mask.clone()), None),
            None => {
                let g = gate.bind(&mut tape);
                let noise = gate.draw_noise(&mut self.rng);
                let relaxed = gate.relax(&mut tape, &g, &noise)?;
                (GatePhase::Soft { alpha: g.alpha, relaxed }, Some(g))
            }
        };
        let t = self.task_classes.len();
        let inputs = LossInputs {
            strategy: self.strategy,
            encoder: &self.encoder,
            bound_encoder: &bound_encoder,
            x,
            targets: &batch.y,
            active,
            queries: q,
            embedding,
            previous_embeddings: &self.embeddings.all()[..t],
            evolution: evolution.as_ref(),
            phase: &phase,
            classifier: &classifier,
            lambda_sparse: self.loss.lambda_sparse,
            lambda_match: self.loss.lambda_match,
        };
        let terms = training_loss(&mut tape, &inputs, &mut pool, &self.evolver)?;
        let total = tape.value(terms.total).item();
        if !total.is_finite() {
            let origin = tape
                .first_non_finite()
                .map_or(String::new(), |(node, op)| format!(" (first non-finite value at node {node}, {op})"));
            return Err(Error::Numerical(format!("training loss is {total}{origin}")));
        }
        let grads = tape.backward(terms.total)?;
        let rate = self.loss.learning_rate;
        self.pool.apply_gradients(&pool, &grads, rate);
        self.embeddings.apply_gradient(embedding, &grads, rate);
        if let Some(evo) = &evolution {
            self.weights.apply_gradients(evo, &grads, rate);
        }
        if let Some(g) = &bound_gate {
            gate.apply_gradients(g, &grads, rate);
        }
        self.classifier.apply_gradients(&classifier, &grads, rate);
        Ok([
            tape.value(terms.ce).item(),
            terms.sparse.map_or(0.0, |s| tape.value(s).item()),
            tape.value(terms.matching).item(),
        ])
    }

    /// Classifies `x` (`[N, patches, D]`) using only the frozen encoder, the
    /// classifier, the task embeddings for routing and the stored prompts.
    pub fn predict(&self, x: &Array, queries: &Array) -> Result<Predictions> {
        let tasks = self.task_classes.len();
        if tasks == 0 {
            return Err(Error::State("no finalized task to predict with".into()));
        }
        let n = x.shape()[0];
        let d = self.model.encoder.dim;
        if queries.shape() != [n, d] {
            return Err(Error::shape("predict", &[n, d], queries.shape()));
        }
        let before = (self.evolver.calls(), self.relaxations());
        let embeddings = &self.embeddings.all()[..tasks];
        let layers = self.model.encoder.layers;
        let mut out = Predictions {
            classes: vec![0; n],
            selected: vec![0; n],
            last_prompt_norms: vec![None; n],
        };
        match self.strategy {
            Strategy::Rainbow | Strategy::FrozenSpecific => {
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); tasks];
                for i in 0..n {
                    let s = select_task(&queries.data()[i * d..(i + 1) * d], embeddings)?;
                    out.selected[i] = s;
                    groups[s].push(i);
                }
                for (task, members) in groups.iter().enumerate().filter(|(_, m)| !m.is_empty()) {
                    let (pairs, norm) = self.stored_prompts(task)?;
                    let slots: Vec<Option<(Array, Array)>> =
                        pairs.into_iter().map(|p| p.map(|p| (p.key, p.value))).collect();
                    for chunk in members.chunks(EVAL_CHUNK) {
                        let preds = self.classify(&gather_rows(x, chunk), &slots)?;
                        for (&i, c) in chunk.iter().zip(preds) {
                            out.classes[i] = c;
                            out.last_prompt_norms[i] = norm;
                        }
                    }
                }
            }
            Strategy::FixedWeightedSum => {
                let lp = self.model.prompt_len;
                let index: Vec<usize> = (0..n).collect();
                for chunk in index.chunks(EVAL_CHUNK) {
                    let weights: Vec<Vec<f64>> = chunk
                        .iter()
                        .map(|&i| mix_weights(&queries.data()[i * d..(i + 1) * d], embeddings))
                        .collect::<Result<_>>()?;
                    let mut slots = Vec::with_capacity(layers);
                    for l in 0..layers {
                        let mut data = Vec::with_capacity(chunk.len() * lp * d);
                        for w in &weights {
                            let mut mixed = vec![0.0; lp * d];
                            for (task, wt) in w.iter().enumerate() {
                                let p = self.pool.prompt(task).index_leading(l);
                                mixed.iter_mut().zip(p.data()).for_each(|(m, v)| *m += wt * v);
                            }
                            data.extend(mixed);
                        }
                        let prompts = Array::new(vec![chunk.len(), lp, d], data)?;
                        if l == layers - 1 {
                            for (k, &i) in chunk.iter().enumerate() {
                                out.last_prompt_norms[i] = Some(nuclear_norm(&prompts.index_leading(k))?);
                            }
                        }
                        let half = lp / 2;
                        let split = |range: Range<usize>| -> Result<Array> {
                            let mut v = Vec::with_capacity(chunk.len() * half * d);
                            for k in 0..chunk.len() {
                                let s = prompts.index_leading(k);
                                v.extend_from_slice(&s.data()[range.start * d..range.end * d]);
                            }
                            Array::new(vec![chunk.len(), half, d], v)
                        };
                        slots.push(Some((split(0..half)?, split(half..lp)?)));
                    }
                    let preds = self.classify(&gather_rows(x, chunk), &slots)?;
                    for ((&i, c), w) in chunk.iter().zip(preds).zip(&weights) {
                        out.classes[i] = c;
                        out.selected[i] = argmax(w);
                    }
                }
            }
        }
        if (self.evolver.calls(), self.relaxations()) != before {
            return Err(Error::State("inference invoked evolution or gate relaxation".into()));
        }
        Ok(out)
    }

    /// Per-layer stored prefixes of `task` and the nuclear norm of its
    /// deepest inserted prompt.
    fn stored_prompts(&self, task: usize) -> Result<(Vec<Option<PrefixPair>>, Option<f64>)> {
        match self.strategy {
            Strategy::Rainbow => {
                let entry = self
                    .rainbow
                    .get(task)
                    .ok_or_else(|| Error::State(format!("task {task} has no stored prompts")))?;
                let norm = entry.last_layer_prompt().map(nuclear_norm).transpose()?;
                Ok((entry.prefix_pairs(), norm))
            }
            _ => {
                let layers = self.model.encoder.layers;
                let pairs = (0..layers)
                    .map(|l| PrefixPair::split(&self.pool.layer_prompt(task, l)).map(Some))
                    .collect::<Result<Vec<_>>>()?;
                let norm = nuclear_norm(&self.pool.layer_prompt(task, layers - 1))?;
                Ok((pairs, Some(norm)))
            }
        }
    }

    /// Argmax class over every class seen so far.
    fn classify(&self, x: &Array, prompts: &[Option<(Array, Array)>]) -> Result<Vec<usize>> {
        let mut tape = Tape::new(self.precision);
        let bound = self.encoder.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let slots: Vec<Option<PrefixVars>> = prompts
            .iter()
            .map(|p| {
                p.as_ref().map(|(k, v)| PrefixVars {
                    key: tape.constant(k.clone()),
                    value: tape.constant(v.clone()),
                })
            })
            .collect();
        let classifier = self.classifier.bind(&mut tape)?;
        let logits = self.encoder.forward(&mut tape, &bound, xv, &slots, &classifier)?;
        let lv = tape.value(logits);
        let c = lv.shape()[1];
        Ok(lv.data().chunks(c).map(argmax).collect())
    }
}

/// Softmax over `cos(qx, e_i)`.
pub fn mix_weights(qx: &[f64], embeddings: &[Array]) -> Result<Vec<f64>> {
    let scores: Vec<f64> = embeddings.iter().map(|e| cosine(qx, e.data())).collect::<Result<_>>()?;
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Rows `indices` of an array along its leading axis.
pub fn gather_rows(a: &Array, indices: &[usize]) -> Array {
    let per = a.len() / a.shape()[0];
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&a.data()[i * per..(i + 1) * per]);
    }
    let mut shape = a.shape().to_vec();
    shape[0] = indices.len();
    Array::new(shape, data).expect("gathered shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("l2p".parse::<Strategy>().is_err());
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn mix_weights_sum_to_one() {
        let e = [Array::from_vec(vec![1.0, 0.0]), Array::from_vec(vec![0.3, 0.7])];
        let w = mix_weights(&[0.2, 0.9], &e).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            lambda_sparse: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
