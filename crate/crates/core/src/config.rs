//! Run configuration in a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [scenario]
//! tasks = 5
//! ```
//!
//! Sections are `[scenario]`, `[model]`, `[loss]`, `[gate]` and `[run]`.
//! Unknown sections or keys, duplicate keys and malformed values are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::harness::{EmbeddingInit, LossConfig, ModelConfig, RunSettings, ScenarioConfig, Strategy};

/// Keys that have no default, in the order they are reported when missing.
pub const REQUIRED: [&str; 4] = ["scenario.tasks", "scenario.classes_per_task", "scenario.seed", "run.strategy"];

const KEYS: &[&str] = &[
    "scenario.tasks",
    "scenario.classes_per_task",
    "scenario.samples_per_class",
    "scenario.separation",
    "scenario.noise",
    "scenario.seed",
    "model.layers",
    "model.dim",
    "model.heads",
    "model.tokens",
    "model.mlp_dim",
    "model.prompt_len",
    "model.proj_dim",
    "model.hidden_dim",
    "model.embedding_init",
    "loss.lambda_sparse",
    "loss.lambda_match",
    "loss.learning_rate",
    "loss.epochs",
    "loss.batch_size",
    "gate.tau",
    "gate.soft_phase_fraction",
    "gate.initial_alpha",
    "run.strategy",
    "run.output_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub gate: GateConfig,
    pub strategy: Strategy,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            gate: GateConfig::default(),
            strategy: Strategy::Rainbow,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header {line:?}")))?
                    .trim();
                if !["scenario", "model", "loss", "gate", "run"].contains(&name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got {line:?}")))?;
            let section = section
                .as_ref()
                .ok_or_else(|| Error::Config(format!("line {line_no}: key outside of any section")))?;
            let full = format!("{section}.{}", key.trim());
            if !KEYS.contains(&full.as_str()) {
                return Err(Error::Config(format!("line {line_no}: unknown key {full}")));
            }
            let value = value.trim();
            if value.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty value for {full}")));
            }
            if entries.insert(full.clone(), (value.to_string(), line_no)).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {full}")));
            }
        }
        if let Some(missing) = REQUIRED.iter().find(|k| !entries.contains_key(**k)) {
            return Err(Error::Config(format!("missing required key {missing}")));
        }

        let mut c = RunConfig::default();
        for (key, (value, line)) in &entries {
            let (k, v, l) = (key.as_str(), value.as_str(), *line);
            match k {
                "scenario.tasks" => c.scenario.tasks = parse_value(k, v, l)?,
                "scenario.classes_per_task" => c.scenario.classes_per_task = parse_value(k, v, l)?,
                "scenario.samples_per_class" => c.scenario.samples_per_class = parse_value(k, v, l)?,
                "scenario.separation" => c.scenario.separation = parse_value(k, v, l)?,
                "scenario.noise" => c.scenario.noise = parse_value(k, v, l)?,
                "scenario.seed" => c.scenario.seed = parse_value(k, v, l)?,
                "model.layers" => c.model.encoder.layers = parse_value(k, v, l)?,
                "model.dim" => c.model.encoder.dim = parse_value(k, v, l)?,
                "model.heads" => c.model.encoder.heads = parse_value(k, v, l)?,
                "model.tokens" => c.model.encoder.tokens = parse_value(k, v, l)?,
                "model.mlp_dim" => c.model.encoder.mlp_dim = parse_value(k, v, l)?,
                "model.prompt_len" => c.model.prompt_len = parse_value(k, v, l)?,
                "model.proj_dim" => c.model.proj_dim = parse_value(k, v, l)?,
                "model.hidden_dim" => c.model.hidden_dim = parse_value(k, v, l)?,
                "model.embedding_init" => {
                    c.model.embedding_init = v
                        .parse::<EmbeddingInit>()
                        .map_err(|e| Error::Config(format!("line {l}: {e}")))?
                }
                "loss.lambda_sparse" => c.loss.lambda_sparse = parse_value(k, v, l)?,
                "loss.lambda_match" => c.loss.lambda_match = parse_value(k, v, l)?,
                "loss.learning_rate" => c.loss.learning_rate = parse_value(k, v, l)?,
                "loss.epochs" => c.loss.epochs = parse_value(k, v, l)?,
                "loss.batch_size" => c.loss.batch_size = parse_value(k, v, l)?,
                "gate.tau" => c.gate.tau = parse_value(k, v, l)?,
                "gate.soft_phase_fraction" => c.gate.soft_phase_fraction = parse_value(k, v, l)?,
                "gate.initial_alpha" => c.gate.initial_alpha = parse_value(k, v, l)?,
                "run.strategy" => {
                    c.strategy = v.parse::<Strategy>().map_err(|e| Error::Config(format!("line {l}: {e}")))?
                }
                "run.output_dir" => c.output_dir = PathBuf::from(v),
                _ => unreachable!("keys are checked against KEYS"),
            }
        }
        c.sync_scenario_shape();
        c.validate()?;
        Ok(c)
    }

    /// Scenario inputs follow the encoder's patch grid.
    fn sync_scenario_shape(&mut self) {
        self.scenario.patches = self.model.encoder.tokens.saturating_sub(1);
        self.scenario.dim = self.model.encoder.dim;
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.scenario.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.loss.validate().map_err(wrap)?;
        self.gate.validate().map_err(wrap)
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            strategy: self.strategy,
            model: self.model,
            loss: self.loss,
            gate: self.gate,
        }
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let (s, m, e, l, g): (&ScenarioConfig, &ModelConfig, &EncoderConfig, &LossConfig, &GateConfig) =
            (&self.scenario, &self.model, &self.model.encoder, &self.loss, &self.gate);
        let mut out = String::new();
        writeln!(out, "[scenario]").unwrap();
        writeln!(out, "tasks = {}", s.tasks).unwrap();
        writeln!(out, "classes_per_task = {}", s.classes_per_task).unwrap();
        writeln!(out, "samples_per_class = {}", s.samples_per_class).unwrap();
        writeln!(out, "separation = {:?}", s.separation).unwrap();
        writeln!(out, "noise = {:?}", s.noise).unwrap();
        writeln!(out, "seed = {}", s.seed).unwrap();
        writeln!(out, "\n[model]").unwrap();
        writeln!(out, "layers = {}", e.layers).unwrap();
        writeln!(out, "dim = {}", e.dim).unwrap();
        writeln!(out, "heads = {}", e.heads).unwrap();
        writeln!(out, "tokens = {}", e.tokens).unwrap();
        writeln!(out, "mlp_dim = {}", e.mlp_dim).unwrap();
        writeln!(out, "prompt_len = {}", m.prompt_len).unwrap();
        writeln!(out, "proj_dim = {}", m.proj_dim).unwrap();
        writeln!(out, "hidden_dim = {}", m.hidden_dim).unwrap();
        writeln!(out, "embedding_init = {}", m.embedding_init).unwrap();
        writeln!(out, "\n[loss]").unwrap();
        writeln!(out, "lambda_sparse = {:?}", l.lambda_sparse).unwrap();
        writeln!(out, "lambda_match = {:?}", l.lambda_match).unwrap();
        writeln!(out, "learning_rate = {:?}", l.learning_rate).unwrap();
        writeln!(out, "epochs = {}", l.epochs).unwrap();
        writeln!(out, "batch_size = {}", l.batch_size).unwrap();
        writeln!(out, "\n[gate]").unwrap();
        writeln!(out, "tau = {:?}", g.tau).unwrap();
        writeln!(out, "soft_phase_fraction = {:?}", g.soft_phase_fraction).unwrap();
        writeln!(out, "initial_alpha = {:?}", g.initial_alpha).unwrap();
        writeln!(out, "\n[run]").unwrap();
        writeln!(out, "strategy = {}", self.strategy).unwrap();
        writeln!(out, "output_dir = {}", self.output_dir.display()).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[scenario]\ntasks = 5\nclasses_per_task = 2\nseed = 7\n[run]\nstrategy = rainbow\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.scenario.seed, 7);
        assert_eq!(c.loss, LossConfig::default());
        assert_eq!(c.model.prompt_len, 20);
    }

    #[test]
    fn empty_config_names_first_required_key() {
        let err = RunConfig::parse("").unwrap_err().to_string();
        assert!(err.contains("scenario.tasks"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}[loss]\nmomentum = 0.9\n")).unwrap_err();
        assert!(err.to_string().contains("loss.momentum"));
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}[optimizer]\n")).is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}[scenario]\ntasks = 3\n")).is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = format!("# header\n\n{MINIMAL}[loss]\nepochs = 3 # short\n");
        assert_eq!(RunConfig::parse(&text).unwrap().loss.epochs, 3);
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}[gate]\ntau = 0\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}[model]\nproj_dim = 40\n")).is_err());
        assert!(RunConfig::parse(&MINIMAL.replace("tasks = 5", "tasks = x")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
