//! Prompt evolution: every accumulated base prompt is conditioned on the
//! current task, transformed by task-level and feature-level attention
//! against the newest prompt, aligned through a residual bottleneck, and
//! averaged into one unified prompt per layer.
//!
//! Evolution runs only while a task trains. When the task ends, its unified
//! prompts are computed once more for the gated layers and frozen into a
//! [`RainbowPromptSet`]; inference reads that set and nothing else.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::backbone::PrefixPair;
use crate::diffcore::{Array, Gradients, Precision, Tape, Var};
use crate::error::{Error, Result};
use crate::gate::LayerMask;

/// Base prompts are drawn uniformly from `[-PROMPT_INIT, PROMPT_INIT]`.
pub const PROMPT_INIT: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvolutionDims {
    pub layers: usize,
    pub prompt_len: usize,
    pub dim: usize,
    /// Projected key dimension of the attention-based transformation.
    pub proj_dim: usize,
    /// Bottleneck width of the alignment block.
    pub hidden_dim: usize,
}

impl Default for EvolutionDims {
    fn default() -> Self {
        EvolutionDims {
            layers: 5,
            prompt_len: 20,
            dim: 32,
            proj_dim: 16,
            hidden_dim: 8,
        }
    }
}

impl EvolutionDims {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("EvolutionDims", reason));
        if self.layers == 0 || self.dim == 0 {
            return fail("layers and dim must be positive".into());
        }
        if self.prompt_len < 2 || self.prompt_len % 2 != 0 {
            return fail(format!("prompt length must be even and at least 2, got {}", self.prompt_len));
        }
        if self.proj_dim == 0 || self.proj_dim >= self.dim {
            return fail(format!("projection dim {} must lie in 1..{}", self.proj_dim, self.dim));
        }
        if self.hidden_dim == 0 || self.hidden_dim >= self.dim {
            return fail(format!("hidden dim {} must lie in 1..{}", self.hidden_dim, self.dim));
        }
        Ok(())
    }
}

/// Per-layer evolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
    pub wo: Array,
    pub w1: Array,
    pub w2: Array,
    pub ln1_gamma: Array,
    pub ln1_beta: Array,
    pub ln2_gamma: Array,
    pub ln2_beta: Array,
}

const LAYER_PARAM_NAMES: [&str; 10] = [
    "wq", "wk", "wv", "wo", "w1", "w2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
];

impl LayerWeights {
    pub fn random<R: Rng + ?Sized>(dims: &EvolutionDims, rng: &mut R) -> Self {
        let (d, p, n) = (dims.dim, dims.proj_dim, dims.hidden_dim);
        let mut w = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Array::uniform(&[rows, cols], -bound, bound, rng)
        };
        LayerWeights {
            wq: w(d, p),
            wk: w(d, p),
            wv: w(d, p),
            wo: w(p, d),
            w1: w(d, n),
            w2: w(n, d),
            ln1_gamma: Array::ones(&[d]),
            ln1_beta: Array::zeros(&[d]),
            ln2_gamma: Array::ones(&[d]),
            ln2_beta: Array::zeros(&[d]),
        }
    }

    /// All projections zero, layer norms at identity.
    pub fn zeroed(dims: &EvolutionDims) -> Self {
        let (d, p, n) = (dims.dim, dims.proj_dim, dims.hidden_dim);
        LayerWeights {
            wq: Array::zeros(&[d, p]),
            wk: Array::zeros(&[d, p]),
            wv: Array::zeros(&[d, p]),
            wo: Array::zeros(&[p, d]),
            w1: Array::zeros(&[d, n]),
            w2: Array::zeros(&[n, d]),
            ln1_gamma: Array::ones(&[d]),
            ln1_beta: Array::zeros(&[d]),
            ln2_gamma: Array::ones(&[d]),
            ln2_beta: Array::zeros(&[d]),
        }
    }

    pub fn arrays(&self) -> [&Array; 10] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.w2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Array; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    fn bind(&self, tape: &mut Tape, layer: usize, trainable: bool) -> BoundLayerWeights {
        let vars: Vec<Var> = self
            .arrays()
            .iter()
            .zip(LAYER_PARAM_NAMES)
            .map(|(a, name)| {
                if trainable {
                    tape.param(format!("evolution.{layer}.{name}"), (*a).clone())
                } else {
                    tape.constant((*a).clone())
                }
            })
            .collect();
        BoundLayerWeights {
            wq: vars[0],
            wk: vars[1],
            wv: vars[2],
            wo: vars[3],
            w1: vars[4],
            w2: vars[5],
            ln1_gamma: vars[6],
            ln1_beta: vars[7],
            ln2_gamma: vars[8],
            ln2_beta: vars[9],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl BoundLayerWeights {
    fn vars(&self) -> [Var; 10] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w1,
            self.w2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Evolution weights of every layer, shared across tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionWeights {
    dims: EvolutionDims,
    layers: Vec<LayerWeights>,
}

#[derive(Clone, Debug)]
pub struct BoundEvolution {
    layers: Vec<BoundLayerWeights>,
}

impl BoundEvolution {
    /// Builds from tape vars given in [`EvolutionWeights::named_arrays`] order.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.is_empty() || vars.len() % 10 != 0 {
            return Err(Error::invalid("BoundEvolution::from_vars", format!("expected a multiple of 10 vars, got {}", vars.len())));
        }
        let layers = vars
            .chunks(10)
            .map(|c| BoundLayerWeights {
                wq: c[0],
                wk: c[1],
                wv: c[2],
                wo: c[3],
                w1: c[4],
                w2: c[5],
                ln1_gamma: c[6],
                ln1_beta: c[7],
                ln2_gamma: c[8],
                ln2_beta: c[9],
            })
            .collect();
        Ok(BoundEvolution { layers })
    }

    pub fn layer(&self, l: usize) -> Result<&BoundLayerWeights> {
        self.layers.get(l).ok_or_else(|| {
            Error::invalid("evolution", format!("layer {l} out of range 0..{}", self.layers.len()))
        })
    }
}

impl EvolutionWeights {
    pub fn random<R: Rng + ?Sized>(dims: EvolutionDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let layers = (0..dims.layers).map(|_| LayerWeights::random(&dims, rng)).collect();
        Ok(EvolutionWeights { dims, layers })
    }

    pub fn zeroed(dims: EvolutionDims) -> Result<Self> {
        dims.validate()?;
        Ok(EvolutionWeights {
            dims,
            layers: (0..dims.layers).map(|_| LayerWeights::zeroed(&dims)).collect(),
        })
    }

    pub fn dims(&self) -> &EvolutionDims {
        &self.dims
    }

    pub fn layer(&self, l: usize) -> Result<&LayerWeights> {
        self.layers
            .get(l)
            .ok_or_else(|| Error::invalid("evolution", format!("layer {l} out of range 0..{}", self.layers.len())))
    }

    pub fn layer_mut(&mut self, l: usize) -> Result<&mut LayerWeights> {
        let n = self.layers.len();
        self.layers
            .get_mut(l)
            .ok_or_else(|| Error::invalid("evolution", format!("layer {l} out of range 0..{n}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.arrays())
            .map(Array::len)
            .sum()
    }

    /// `(name, array)` for every weight, in binding order.
    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, w)| {
                w.arrays()
                    .into_iter()
                    .zip(LAYER_PARAM_NAMES)
                    .map(move |(a, n)| (format!("evolution.{l}.{n}"), a))
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEvolution {
        BoundEvolution {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, w)| w.bind(tape, l, trainable))
                .collect(),
        }
    }

    pub fn apply_gradients(&mut self, bound: &BoundEvolution, grads: &Gradients, rate: f64) {
        for (w, b) in self.layers.iter_mut().zip(&bound.layers) {
            for (array, var) in w.arrays_mut().into_iter().zip(b.vars()) {
                array.sgd_step(grads.wrt(var), rate);
            }
        }
    }

    /// Adds `delta` to every weight (used to probe inference independence).
    pub fn perturb(&mut self, delta: f64) {
        for w in &mut self.layers {
            for a in w.arrays_mut() {
                a.data_mut().iter_mut().for_each(|v| *v += delta);
            }
        }
    }
}

/// Per-task base prompts, one `L × L_p × D` array per task. Only the newest
/// task's prompt is trainable; earlier ones are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct BasePromptPool {
    layers: usize,
    prompt_len: usize,
    dim: usize,
    prompts: Vec<Array>,
    open: bool,
}

/// Pool registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundPool {
    frozen: Vec<Array>,
    /// Trainable newest prompt `[L, L_p, D]`, when one is open.
    pub current: Option<Var>,
    layers_frozen: Vec<Option<Var>>,
    prompt_len: usize,
    dim: usize,
}

impl BoundPool {
    /// Frozen `[L, L_p, D]` prompts plus an optional newest prompt already on the tape.
    pub fn new(frozen: Vec<Array>, current: Option<Var>, layers: usize, prompt_len: usize, dim: usize) -> Self {
        BoundPool {
            frozen,
            current,
            layers_frozen: vec![None; layers],
            prompt_len,
            dim,
        }
    }

    pub fn task_count(&self) -> usize {
        self.frozen.len() + usize::from(self.current.is_some())
    }

    /// `[t, L_p, D]` stack of every task's prompt at `layer`.
    pub fn layer_stack(&mut self, tape: &mut Tape, layer: usize) -> Result<Var> {
        if layer >= self.layers_frozen.len() {
            return Err(Error::invalid(
                "layer_stack",
                format!("layer {layer} out of range 0..{}", self.layers_frozen.len()),
            ));
        }
        let mut parts = Vec::new();
        if !self.frozen.is_empty() {
            let frozen = match self.layers_frozen[layer] {
                Some(v) => v,
                None => {
                    let slices: Vec<Array> = self.frozen.iter().map(|p| p.index_leading(layer)).collect();
                    let v = tape.constant(Array::stack(&slices)?);
                    self.layers_frozen[layer] = Some(v);
                    v
                }
            };
            parts.push(frozen);
        }
        if let Some(cur) = self.current {
            parts.push(tape.slice(cur, 0, layer..layer + 1)?);
        }
        if parts.is_empty() {
            return Err(Error::invalid("layer_stack", "pool is empty"));
        }
        tape.concat(&parts, 0)
    }

    /// The newest prompt at `layer` as `[L_p, D]`.
    pub fn newest_at(&self, tape: &mut Tape, layer: usize) -> Result<Var> {
        match self.current {
            Some(cur) => {
                let s = tape.slice(cur, 0, layer..layer + 1)?;
                tape.reshape(s, &[self.prompt_len, self.dim])
            }
            None => {
                let last = self
                    .frozen
                    .last()
                    .ok_or_else(|| Error::invalid("newest_at", "pool is empty"))?;
                Ok(tape.constant(last.index_leading(layer)))
            }
        }
    }
}

impl BasePromptPool {
    pub fn new(layers: usize, prompt_len: usize, dim: usize) -> Self {
        BasePromptPool {
            layers,
            prompt_len,
            dim,
            prompts: Vec::new(),
            open: false,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt(&self, task: usize) -> &Array {
        &self.prompts[task]
    }

    /// Prompt of `task` at `layer`, `L_p × D`.
    pub fn layer_prompt(&self, task: usize, layer: usize) -> Array {
        self.prompts[task].index_leading(layer)
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Opens a new trainable prompt; the previous one must be frozen first.
    pub fn open_task<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        if self.open {
            return Err(Error::State("a base prompt is already open for training".into()));
        }
        self.prompts.push(Array::uniform(
            &[self.layers, self.prompt_len, self.dim],
            -PROMPT_INIT,
            PROMPT_INIT,
            rng,
        ));
        self.open = true;
        Ok(self.prompts.len() - 1)
    }

    /// Appends an explicit prompt as the open one.
    pub fn open_with(&mut self, prompt: Array) -> Result<usize> {
        if self.open {
            return Err(Error::State("a base prompt is already open for training".into()));
        }
        if prompt.shape() != [self.layers, self.prompt_len, self.dim] {
            return Err(Error::shape("BasePromptPool::open_with", &[self.layers, self.prompt_len, self.dim], prompt.shape()));
        }
        self.prompts.push(prompt);
        self.open = true;
        Ok(self.prompts.len() - 1)
    }

    pub fn freeze_current(&mut self) {
        self.open = false;
    }

    /// Frozen prompts become constants; the open one (if any) a parameter.
    pub fn bind(&self, tape: &mut Tape) -> BoundPool {
        let frozen_count = if self.open { self.prompts.len() - 1 } else { self.prompts.len() };
        let current = self
            .open
            .then(|| tape.param("base_prompt", self.prompts[frozen_count].clone()));
        BoundPool::new(self.prompts[..frozen_count].to_vec(), current, self.layers, self.prompt_len, self.dim)
    }

    pub fn apply_gradients(&mut self, bound: &BoundPool, grads: &Gradients, rate: f64) {
        if let Some(cur) = bound.current {
            let idx = self.prompts.len() - 1;
            self.prompts[idx].sgd_step(grads.wrt(cur), rate);
        }
    }

    pub fn set_current(&mut self, prompt: Array) -> Result<()> {
        if !self.open {
            return Err(Error::State("no open base prompt".into()));
        }
        let idx = self.prompts.len() - 1;
        if prompt.shape() != self.prompts[idx].shape() {
            return Err(Error::shape("BasePromptPool::set_current", self.prompts[idx].shape(), prompt.shape()));
        }
        self.prompts[idx] = prompt;
        Ok(())
    }
}

/// One learnable embedding per task; only the newest is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbeddings {
    dim: usize,
    embeddings: Vec<Array>,
    open: bool,
}

impl TaskEmbeddings {
    pub fn new(dim: usize) -> Self {
        TaskEmbeddings {
            dim,
            embeddings: Vec::new(),
            open: false,
        }
    }

    pub fn open_task<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        if self.open {
            return Err(Error::State("a task embedding is already open for training".into()));
        }
        let bound = 1.0 / (self.dim as f64).sqrt();
        self.embeddings.push(Array::uniform(&[self.dim], -bound, bound, rng));
        self.open = true;
        Ok(self.embeddings.len() - 1)
    }

    pub fn open_with(&mut self, e: Array) -> Result<usize> {
        if self.open {
            return Err(Error::State("a task embedding is already open for training".into()));
        }
        if e.shape() != [self.dim] {
            return Err(Error::shape("TaskEmbeddings::open_with", &[self.dim], e.shape()));
        }
        self.embeddings.push(e);
        self.open = true;
        Ok(self.embeddings.len() - 1)
    }

    pub fn freeze_current(&mut self) {
        self.open = false;
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, task: usize) -> &Array {
        &self.embeddings[task]
    }

    pub fn all(&self) -> &[Array] {
        &self.embeddings
    }

    pub fn current(&self) -> Option<&Array> {
        self.open.then(|| self.embeddings.last()).flatten()
    }

    pub fn set_current(&mut self, e: Array) -> Result<()> {
        if !self.open {
            return Err(Error::State("no open task embedding".into()));
        }
        let idx = self.embeddings.len() - 1;
        self.embeddings[idx] = e;
        Ok(())
    }

    /// Binds the open embedding as a parameter.
    pub fn bind_current(&self, tape: &mut Tape) -> Result<Var> {
        let e = self
            .current()
            .ok_or_else(|| Error::State("no open task embedding".into()))?;
        Ok(tape.param("task_embedding", e.clone()))
    }

    pub fn apply_gradient(&mut self, var: Var, grads: &Gradients, rate: f64) {
        if self.open {
            let idx = self.embeddings.len() - 1;
            self.embeddings[idx].sgd_step(grads.wrt(var), rate);
        }
    }
}

/// Output of an attention stage together with its affinity matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub affinity: Var,
}

/// Task conditioning: each task slice of `pool` (`[t, L_p, D]`) is replaced
/// by an attention-weighted recombination of its rows, the weights being a
/// softmax over the slice's rows of `e · row / √D`. Every row of the
/// conditioned slice is that same combination. The affinity is `[t, L_p, 1]`.
pub fn condition_on_task(tape: &mut Tape, pool: Var, e: Var) -> Result<Attended> {
    let shape = tape.shape(pool).to_vec();
    let [t, lp, d] = shape[..] else {
        return Err(Error::invalid("condition_on_task", format!("pool must be [t, L_p, D], got {shape:?}")));
    };
    if tape.shape(e) != [d] {
        return Err(Error::shape("condition_on_task", tape.shape(e), &[d]));
    }
    let e_col = tape.reshape(e, &[d, 1])?;
    let logits = tape.matmul(pool, e_col)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(logits, 1)?;
    let wt = tape.transpose_last(weights)?;
    let mixed = tape.matmul(wt, pool)?;
    let output = tape.expand(mixed, 1, lp)?;
    debug_assert_eq!(tape.shape(output), [t, lp, d]);
    Ok(Attended {
        output,
        affinity: weights,
    })
}

/// Projects the newest prompt into queries and every conditioned slice into
/// keys and values: `Q = p_new W^Q`, `K_i = P_i W^K`, `V_i = P_i W^V`.
pub fn project_qkv(
    tape: &mut Tape,
    new_prompt: Var,
    pool: Var,
    weights: &BoundEvolution,
    layer: usize,
) -> Result<(Var, Var, Var)> {
    let w = weights.layer(layer)?;
    let q = tape.matmul(new_prompt, w.wq)?;
    let k = tape.matmul(pool, w.wk)?;
    let v = tape.matmul(pool, w.wv)?;
    Ok((q, k, v))
}

/// Task-level transformation: `G_i = softmax(Q K_iᵀ / √D_p)` over key
/// positions, `Ṽ_i = G_i V_i`. Output `[t, L_p, D_p]`, affinity `[t, L_p, L_p]`.
pub fn task_level_transform(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Attended> {
    let kshape = tape.shape(k).to_vec();
    let [t, lp, dp] = kshape[..] else {
        return Err(Error::invalid("task_level_transform", format!("keys must be [t, L_p, D_p], got {kshape:?}")));
    };
    if tape.shape(q) != [lp, dp] {
        return Err(Error::shape("task_level_transform", tape.shape(q), &[lp, dp]));
    }
    if tape.shape(v) != kshape.as_slice() {
        return Err(Error::shape("task_level_transform", tape.shape(v), &kshape));
    }
    let qb = tape.broadcast_leading(q, t)?;
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(qb, kt)?;
    let scores = tape.scale(scores, 1.0 / (dp as f64).sqrt());
    let affinity = tape.softmax(scores, 2)?;
    let output = tape.matmul(affinity, v)?;
    Ok(Attended { output, affinity })
}

/// Feature-level transformation: `F_i = softmax(Qᵀ K_i / √D_p)` over key
/// features, `V̂_i = F_i Ṽ_iᵀ`. Output `[t, D_p, L_p]`, affinity `[t, D_p, D_p]`.
pub fn feature_level_transform(tape: &mut Tape, q: Var, k: Var, v_tilde: Var) -> Result<Attended> {
    let kshape = tape.shape(k).to_vec();
    let [t, lp, dp] = kshape[..] else {
        return Err(Error::invalid("feature_level_transform", format!("keys must be [t, L_p, D_p], got {kshape:?}")));
    };
    if tape.shape(q) != [lp, dp] {
        return Err(Error::shape("feature_level_transform", tape.shape(q), &[lp, dp]));
    }
    if tape.shape(v_tilde) != kshape.as_slice() {
        return Err(Error::shape("feature_level_transform", tape.shape(v_tilde), &kshape));
    }
    let qt = tape.transpose_last(q)?;
    let qtb = tape.broadcast_leading(qt, t)?;
    let scores = tape.matmul(qtb, k)?;
    let scores = tape.scale(scores, 1.0 / (dp as f64).sqrt());
    let affinity = tape.softmax(scores, 2)?;
    let vt = tape.transpose_last(v_tilde)?;
    let output = tape.matmul(affinity, vt)?;
    Ok(Attended { output, affinity })
}

/// `LN(P + V̂ᵀ W^O)` per slice; `v_hat` is `[t, D_p, L_p]`.
pub fn integrate_residual(
    tape: &mut Tape,
    pool: Var,
    v_hat: Var,
    weights: &BoundEvolution,
    layer: usize,
) -> Result<Var> {
    let w = weights.layer(layer)?;
    let vt = tape.transpose_last(v_hat)?;
    let r = tape.matmul(vt, w.wo)?;
    let sum = tape.add(pool, r)?;
    tape.layer_norm(sum, w.ln1_gamma, w.ln1_beta)
}

/// Task-guided alignment: `LN(h + relu(h W¹) W²)`.
pub fn task_guided_align(tape: &mut Tape, h: Var, weights: &BoundEvolution, layer: usize) -> Result<Var> {
    let w = weights.layer(layer)?;
    let a = tape.matmul(h, w.w1)?;
    let a = tape.relu(a);
    let a = tape.matmul(a, w.w2)?;
    let sum = tape.add(h, a)?;
    tape.layer_norm(sum, w.ln2_gamma, w.ln2_beta)
}

/// Mean over the task axis of `[t, L_p, D]`.
pub fn aggregate_rainbow(tape: &mut Tape, evolved: Var) -> Result<Var> {
    let shape = tape.shape(evolved);
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::invalid(
            "aggregate_rainbow",
            format!("expected [t, L_p, D] with t >= 1, got {shape:?}"),
        ));
    }
    tape.mean_axis(evolved, 0)
}

/// Intermediate results of one [`Evolver::evolve_layer`] call.
#[derive(Clone, Copy, Debug)]
pub struct EvolutionTrace {
    pub conditioned: Attended,
    pub task_level: Attended,
    pub feature_level: Attended,
    pub rainbow: Var,
}

/// Runs the evolution pipeline and counts how often it is invoked.
#[derive(Debug, Default)]
pub struct Evolver {
    calls: AtomicUsize,
}

impl Evolver {
    pub fn new() -> Self {
        Evolver::default()
    }

    /// Number of `evolve_layer` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Unified prompt `[L_p, D]` for `layer` from the task stack `pool`
    /// (`[t, L_p, D]`), the newest base prompt `new_prompt` (`[L_p, D]`) and
    /// the task embedding `e`.
    pub fn evolve_layer(
        &self,
        tape: &mut Tape,
        pool: Var,
        new_prompt: Var,
        e: Var,
        weights: &BoundEvolution,
        layer: usize,
    ) -> Result<Var> {
        Ok(self.evolve_layer_traced(tape, pool, new_prompt, e, weights, layer)?.rainbow)
    }

    pub fn evolve_layer_traced(
        &self,
        tape: &mut Tape,
        pool: Var,
        new_prompt: Var,
        e: Var,
        weights: &BoundEvolution,
        layer: usize,
    ) -> Result<EvolutionTrace> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let conditioned = condition_on_task(tape, pool, e)?;
        let (q, k, v) = project_qkv(tape, new_prompt, conditioned.output, weights, layer)?;
        let task_level = task_level_transform(tape, q, k, v)?;
        let feature_level = feature_level_transform(tape, q, k, task_level.output)?;
        let h = integrate_residual(tape, conditioned.output, feature_level.output, weights, layer)?;
        let aligned = task_guided_align(tape, h, weights, layer)?;
        let rainbow = aggregate_rainbow(tape, aligned)?;
        Ok(EvolutionTrace {
            conditioned,
            task_level,
            feature_level,
            rainbow,
        })
    }

    /// Evolves every layer selected by `mask` for the newest task and stores
    /// the result, split into key/value halves, as that task's entry.
    pub fn finalize_task<'s>(
        &self,
        set: &'s mut RainbowPromptSet,
        pool: &BasePromptPool,
        embedding: &Array,
        weights: &EvolutionWeights,
        mask: &LayerMask,
        precision: Precision,
    ) -> Result<&'s RainbowEntry> {
        let task = pool
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::State("cannot finalize an empty pool".into()))?;
        if set.contains(task) {
            return Err(Error::State(format!("task {task} is already finalized")));
        }
        if mask.len() != weights.dims().layers {
            return Err(Error::invalid(
                "finalize_task",
                format!("mask covers {} layers, model has {}", mask.len(), weights.dims().layers),
            ));
        }
        let mut tape = Tape::new(precision);
        let mut bound_pool = pool.bind(&mut tape);
        let e = tape.constant(embedding.clone());
        let w = weights.bind(&mut tape, false);
        let mut prompts = Vec::new();
        for layer in mask.selected() {
            let stack = bound_pool.layer_stack(&mut tape, layer)?;
            let newest = bound_pool.newest_at(&mut tape, layer)?;
            let rainbow = self.evolve_layer(&mut tape, stack, newest, e, &w, layer)?;
            prompts.push((layer, tape.value(rainbow).clone()));
        }
        set.insert(RainbowEntry::new(task, mask.clone(), prompts)?)
    }
}

/// Stored unified prompts of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct RainbowEntry {
    task: usize,
    mask: LayerMask,
    prompts: Vec<(usize, Array)>,
}

impl RainbowEntry {
    pub fn new(task: usize, mask: LayerMask, prompts: Vec<(usize, Array)>) -> Result<Self> {
        let selected: Vec<usize> = mask.selected().collect();
        let layers: Vec<usize> = prompts.iter().map(|(l, _)| *l).collect();
        if selected != layers {
            return Err(Error::invalid(
                "RainbowEntry",
                format!("prompts for layers {layers:?} do not match mask layers {selected:?}"),
            ));
        }
        for (_, p) in &prompts {
            PrefixPair::split(p)?;
        }
        Ok(RainbowEntry { task, mask, prompts })
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn mask(&self) -> &LayerMask {
        &self.mask
    }

    /// `(layer, L_p × D prompt)` for every selected layer, ascending.
    pub fn prompts(&self) -> &[(usize, Array)] {
        &self.prompts
    }

    /// Per-layer prefix pairs, `None` where the mask is off.
    pub fn prefix_pairs(&self) -> Vec<Option<PrefixPair>> {
        let mut out = vec![None; self.mask.len()];
        for (l, p) in &self.prompts {
            out[*l] = Some(PrefixPair::split(p).expect("validated on construction"));
        }
        out
    }

    /// Prompt at the deepest selected layer.
    pub fn last_layer_prompt(&self) -> Option<&Array> {
        self.prompts.last().map(|(_, p)| p)
    }

    pub fn parameter_count(&self) -> usize {
        self.prompts.iter().map(|(_, p)| p.len()).sum()
    }
}

/// Write-once store of per-task unified prompts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RainbowPromptSet {
    entries: Vec<RainbowEntry>,
}

impl RainbowPromptSet {
    pub fn new() -> Self {
        RainbowPromptSet::default()
    }

    pub fn contains(&self, task: usize) -> bool {
        self.entries.iter().any(|e| e.task == task)
    }

    pub fn insert(&mut self, entry: RainbowEntry) -> Result<&RainbowEntry> {
        if self.contains(entry.task) {
            return Err(Error::State(format!("task {} is already finalized", entry.task)));
        }
        self.entries.push(entry);
        Ok(self.entries.last().unwrap())
    }

    pub fn get(&self, task: usize) -> Option<&RainbowEntry> {
        self.entries.iter().find(|e| e.task == task)
    }

    pub fn entries(&self) -> &[RainbowEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
