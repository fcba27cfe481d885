//! Synthetic class-incremental scenarios: Gaussian clusters in patch space.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, streams};
use crate::diffcore::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    /// Scale of the class means; 0 makes every class the same distribution.
    pub separation: f64,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
    pub patches: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 40,
            separation: 2.0,
            noise: 1.0,
            patches: 16,
            dim: 32,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("ScenarioConfig", reason));
        if self.tasks < 2 {
            return fail(format!("at least 2 tasks are required, got {}", self.tasks));
        }
        if self.classes_per_task < 2 {
            return fail(format!("at least 2 classes per task are required, got {}", self.classes_per_task));
        }
        if self.samples_per_class < 5 {
            return fail(format!("at least 5 samples per class are required, got {}", self.samples_per_class));
        }
        if !(self.separation >= 0.0) || !(self.noise >= 0.0) {
            return fail("separation and noise must be non-negative".into());
        }
        if self.patches == 0 || self.dim == 0 {
            return fail("patches and dim must be positive".into());
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.tasks * self.classes_per_task
    }
}

/// Inputs `[N, patches, D]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let per = self.x.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            x: Array::new(shape, data).expect("gathered shape"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub classes: Range<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    config: ScenarioConfig,
    tasks: Vec<TaskData>,
}

impl Scenario {
    /// Assembles a scenario from explicit tasks, rejecting shared class ids
    /// and labels outside a task's classes.
    pub fn from_tasks(config: ScenarioConfig, tasks: Vec<TaskData>) -> Result<Self> {
        for (i, a) in tasks.iter().enumerate() {
            for b in &tasks[i + 1..] {
                if a.classes.start < b.classes.end && b.classes.start < a.classes.end {
                    return Err(Error::invalid(
                        "Scenario",
                        format!("class ids {:?} and {:?} overlap", a.classes, b.classes),
                    ));
                }
            }
            if let Some(y) = a.train.y.iter().chain(&a.test.y).find(|y| !a.classes.contains(y)) {
                return Err(Error::invalid(
                    "Scenario",
                    format!("label {y} lies outside task {i}'s classes {:?}", a.classes),
                ));
            }
        }
        Ok(Scenario { config, tasks })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TaskData {
        &self.tasks[t]
    }
}

/// Generates the scenario: per class a seeded mean `separation · N(0, 1)`
/// over `[patches, D]`, samples `mean + noise · N(0, 1)`, and a per-class
/// 80/20 train/test split. Task `t` owns classes `t·k .. (t+1)·k`.
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, streams::SCENARIO));
    let (p, d, k) = (config.patches, config.dim, config.classes_per_task);
    let n_train = (config.samples_per_class * 4) / 5;
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let classes = t * k..(t + 1) * k;
        let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for c in classes.clone() {
            let mean = Array::normal(&[p, d], config.separation, &mut rng);
            for s in 0..config.samples_per_class {
                let noise = Array::normal(&[p, d], config.noise, &mut rng);
                let sample = mean.data().iter().zip(noise.data()).map(|(m, n)| m + n);
                if s < n_train {
                    train_x.extend(sample);
                    train_y.push(c);
                } else {
                    test_x.extend(sample);
                    test_y.push(c);
                }
            }
        }
        // Interleave classes so that unshuffled batches are mixed.
        let mut order: Vec<usize> = (0..train_y.len()).collect();
        order.shuffle(&mut rng);
        let train = Dataset {
            x: Array::new(vec![train_y.len(), p, d], train_x)?,
            y: train_y,
        }
        .gather(&order);
        let test = Dataset {
            x: Array::new(vec![test_y.len(), p, d], test_x)?,
            y: test_y,
        };
        tasks.push(TaskData { classes, train, test });
    }
    Scenario::from_tasks(*config, tasks)
}
