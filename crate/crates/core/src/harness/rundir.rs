//! Run directory output.
//!
//! ```text
//! config.cfg            configuration snapshot
//! encoder.bin           frozen encoder weights
//! prompts/task_<i>.bin  stored prompts of task i
//! prompts/manifest.csv  task,file,mask
//! accuracy_matrix.csv   rows: step, columns: task
//! metrics.csv           step,A,F,diversity
//! parameters.csv        component,count
//! events.log            one line per epoch
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::format_float;
use super::learner::{EpochEvent, Strategy};
use super::metrics::AccuracyMatrix;
use super::run::{Prepared, RunOutcome, StepRecord};
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::snapshot;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn accuracy_csv(a: &AccuracyMatrix, tasks: usize) -> String {
    let mut s = String::from("step");
    for i in 0..tasks {
        write!(s, ",task_{i}").unwrap();
    }
    s.push('\n');
    for (t, row) in a.rows().iter().enumerate() {
        write!(s, "{t}").unwrap();
        for i in 0..tasks {
            s.push(',');
            if let Some(v) = row.get(i) {
                s.push_str(&format_float(*v));
            }
        }
        s.push('\n');
    }
    s
}

pub fn diversity_cell(d: Option<f64>) -> String {
    d.map_or_else(|| "NA".to_string(), format_float)
}

pub fn metrics_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from("step,A,F,diversity\n");
    for r in steps {
        writeln!(
            s,
            "{},{},{},{}",
            r.step,
            format_float(r.metrics.average_accuracy),
            format_float(r.metrics.forgetting),
            diversity_cell(r.diversity)
        )
        .unwrap();
    }
    s
}

pub fn events_log(events: &[EpochEvent]) -> String {
    events.iter().map(|e| format!("{e}\n")).collect()
}

pub fn write_events(dir: &Path, events: &[EpochEvent]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("events.log"), &events_log(events))
}

pub fn write_run_dir(dir: &Path, config_text: &str, prepared: &Prepared, outcome: &RunOutcome) -> Result<()> {
    let prompts_dir = dir.join("prompts");
    fs::create_dir_all(&prompts_dir).map_err(|e| Error::io(&prompts_dir, e))?;
    write_text(&dir.join("config.cfg"), config_text)?;
    snapshot::write(&dir.join("encoder.bin"), &prepared.encoder.arrays())?;

    let learner = &outcome.learner;
    let mut manifest = String::from("task,file,mask\n");
    for snap in learner.snapshots() {
        let file = format!("task_{}.bin", snap.task);
        let arrays: Vec<&Array> = match (learner.strategy(), &snap.entry) {
            (Strategy::Rainbow, Some(entry)) => entry.prompts().iter().map(|(_, p)| p).collect(),
            _ => vec![&snap.base_prompt],
        };
        snapshot::write(&prompts_dir.join(&file), &arrays)?;
        writeln!(manifest, "{},prompts/{file},{}", snap.task, snap.mask).unwrap();
    }
    write_text(&prompts_dir.join("manifest.csv"), &manifest)?;

    let tasks = prepared.scenario.tasks().len();
    write_text(&dir.join("accuracy_matrix.csv"), &accuracy_csv(&outcome.accuracy, tasks))?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&outcome.steps))?;
    let mut params = String::from("component,count\n");
    for (name, count) in outcome.parameters.rows() {
        writeln!(params, "{name},{count}").unwrap();
    }
    write_text(&dir.join("parameters.csv"), &params)?;
    write_text(&dir.join("events.log"), &events_log(learner.events()))
}
