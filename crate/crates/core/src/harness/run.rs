//! Whole-scenario runs.

use std::fmt;

use super::learner::{gather_rows, EpochEvent, Learner, LossConfig, ModelConfig, Predictions, Strategy};
use super::metrics::{metrics, AccuracyMatrix, Metrics};
use super::scenario::{build_scenario, Scenario, ScenarioConfig};
use super::{derive_seed, streams};
use crate::backbone::Encoder;
use crate::diffcore::{Array, Precision};
use crate::error::{Error, Result};
use crate::gate::GateConfig;

/// Query inputs per encoder pass.
const QUERY_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskQueries {
    pub train: Array,
    pub test: Array,
}

/// Scenario, frozen encoder and cached query features shared by every
/// strategy run on the same seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scenario: Scenario,
    pub encoder: Encoder,
    pub queries: Vec<TaskQueries>,
    pub precision: Precision,
}

impl Prepared {
    pub fn seed(&self) -> u64 {
        self.scenario.config().seed
    }
}

/// Query features `[N, D]` of `x` (`[N, patches, D]`).
pub fn query_features(encoder: &Encoder, x: &Array, precision: Precision) -> Result<Array> {
    let n = x.shape()[0];
    let index: Vec<usize> = (0..n).collect();
    let mut data = Vec::with_capacity(n * encoder.config().dim);
    for chunk in index.chunks(QUERY_CHUNK) {
        let f = encoder.query_features(&gather_rows(x, chunk), precision)?;
        data.extend_from_slice(f.data());
    }
    Array::new(vec![n, encoder.config().dim], data)
}

pub fn prepare(scenario: &ScenarioConfig, model: &ModelConfig, precision: Precision) -> Result<Prepared> {
    model.validate()?;
    if scenario.patches != model.encoder.patches() || scenario.dim != model.encoder.dim {
        return Err(Error::invalid(
            "prepare",
            format!(
                "scenario inputs are {}x{}, the encoder expects {}x{}",
                scenario.patches,
                scenario.dim,
                model.encoder.patches(),
                model.encoder.dim
            ),
        ));
    }
    let scenario = build_scenario(scenario)?;
    let encoder = Encoder::random(model.encoder, derive_seed(scenario.config().seed, streams::ENCODER))?;
    let queries = scenario
        .tasks()
        .iter()
        .map(|t| {
            Ok(TaskQueries {
                train: query_features(&encoder, &t.train.x, precision)?,
                test: query_features(&encoder, &t.test.x, precision)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Prepared {
        scenario,
        encoder,
        queries,
        precision,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub gate: GateConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub metrics: Metrics,
    /// Mean nuclear norm of the deepest inserted prompt over seen test samples.
    pub diversity: Option<f64>,
}

/// Parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub backbone: usize,
    pub classifier: usize,
    pub task_embeddings: usize,
    pub stored_prompts: usize,
    pub evolution_weights: usize,
    pub base_prompt: usize,
    pub embedding: usize,
    pub gate_logits: usize,
    pub classifier_rows_per_task: usize,
}

impl ParameterReport {
    pub fn of(learner: &Learner) -> Self {
        let m = learner.model();
        let d = m.encoder.dim;
        let layers = m.encoder.layers;
        let rainbow = learner.strategy() == Strategy::Rainbow;
        let stored_prompts = if rainbow {
            learner.rainbow().entries().iter().map(|e| e.parameter_count()).sum()
        } else {
            (0..learner.pool().len()).map(|t| learner.pool().prompt(t).len()).sum()
        };
        let per_task_classes = learner.task_classes().first().map_or(0, |r| r.len());
        ParameterReport {
            backbone: learner.encoder().parameter_count(),
            classifier: learner.classifier().parameter_count(),
            task_embeddings: learner.embeddings().all().iter().map(Array::len).sum(),
            stored_prompts,
            evolution_weights: if rainbow { learner.weights().parameter_count() } else { 0 },
            base_prompt: layers * m.prompt_len * d,
            embedding: d,
            gate_logits: if rainbow { layers } else { 0 },
            classifier_rows_per_task: per_task_classes * (d + 1),
        }
    }

    /// Parameters optimized while one task trains.
    pub fn trainable_per_task(&self) -> usize {
        self.base_prompt + self.embedding + self.gate_logits + self.evolution_weights + self.classifier_rows_per_task
    }

    /// Parameters read by the inference path.
    pub fn inference_touched(&self) -> usize {
        self.backbone + self.classifier + self.task_embeddings + self.stored_prompts
    }

    /// Trainable parameters that inference never reads.
    pub fn discarded_at_inference(&self) -> usize {
        self.evolution_weights + self.gate_logits
    }

    /// `(component, count)` rows.
    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("backbone", self.backbone),
            ("classifier", self.classifier),
            ("task_embeddings", self.task_embeddings),
            ("stored_prompts", self.stored_prompts),
            ("evolution_weights", self.evolution_weights),
            ("gate_logits", self.gate_logits),
            ("trainable_per_task", self.trainable_per_task()),
            ("inference_touched", self.inference_touched()),
            ("discarded_at_inference", self.discarded_at_inference()),
        ]
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, count) in self.rows() {
            writeln!(f, "{name:<24}{count}")?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub learner: Learner,
    pub accuracy: AccuracyMatrix,
    pub steps: Vec<StepRecord>,
    /// Final-step predictions on each task's test set.
    pub predictions: Vec<Predictions>,
    pub parameters: ParameterReport,
}

impl RunOutcome {
    pub fn final_step(&self) -> &StepRecord {
        self.steps.last().expect("a run has at least one step")
    }
}

/// A failed run with the epoch log written up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub events: Vec<EpochEvent>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Accuracies on tasks `0..=step` and diversity over their test samples.
pub fn evaluate(learner: &Learner, prepared: &Prepared, step: usize) -> Result<(Vec<f64>, Option<f64>, Vec<Predictions>)> {
    let mut accuracies = Vec::with_capacity(step + 1);
    let mut predictions = Vec::with_capacity(step + 1);
    let (mut sum, mut n) = (0.0, 0usize);
    for (task, queries) in prepared.scenario.tasks().iter().zip(&prepared.queries).take(step + 1) {
        let p = learner.predict(&task.test.x, &queries.test)?;
        accuracies.push(p.accuracy(&task.test.y));
        for v in p.last_prompt_norms.iter().flatten() {
            sum += v;
            n += 1;
        }
        predictions.push(p);
    }
    Ok((accuracies, (n > 0).then(|| sum / n as f64), predictions))
}

pub fn run_prepared(settings: &RunSettings, prepared: &Prepared) -> std::result::Result<RunOutcome, RunFailure> {
    let mut learner = Learner::new(
        settings.strategy,
        settings.model,
        settings.loss,
        settings.gate,
        prepared.precision,
        prepared.encoder.clone(),
        prepared.seed(),
    )
    .map_err(|error| RunFailure { error, events: Vec::new() })?;
    let mut accuracy = AccuracyMatrix::new();
    let mut steps = Vec::new();
    let mut predictions = Vec::new();
    for (t, (task, queries)) in prepared.scenario.tasks().iter().zip(&prepared.queries).enumerate() {
        let result = learner.train_task(task, &queries.train).and_then(|()| {
            let (row, diversity, preds) = evaluate(&learner, prepared, t)?;
            accuracy.push_row(row)?;
            let m = metrics(&accuracy)?;
            Ok((m, diversity, preds))
        });
        match result {
            Ok((metrics, diversity, preds)) => {
                steps.push(StepRecord {
                    step: t,
                    metrics,
                    diversity,
                });
                predictions = preds;
            }
            Err(error) => {
                return Err(RunFailure {
                    error,
                    events: learner.events().to_vec(),
                })
            }
        }
    }
    let parameters = ParameterReport::of(&learner);
    Ok(RunOutcome {
        learner,
        accuracy,
        steps,
        predictions,
        parameters,
    })
}
