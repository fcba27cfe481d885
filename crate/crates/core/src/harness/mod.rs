//! Class-incremental scenarios, training, inference and evaluation.

pub mod gradcheck;
pub mod learner;
pub mod metrics;
pub mod run;
pub mod rundir;
pub mod scenario;

pub use learner::{
    EmbeddingInit, EpochEvent, FinalizeSnapshot, Learner, LossConfig, ModelConfig, Predictions, Strategy,
};
pub use metrics::{matching_loss, metrics, select_task, AccuracyMatrix, Metrics};
pub use run::{evaluate, prepare, run_prepared, ParameterReport, Prepared, RunFailure, RunOutcome, RunSettings, StepRecord};
pub use scenario::{build_scenario, Dataset, Scenario, ScenarioConfig, TaskData};

/// Independent random streams derived from one run seed.
pub mod streams {
    pub const SCENARIO: u64 = 0;
    pub const ENCODER: u64 = 1;
    pub const TRAINING: u64 = 2;
    pub const EVOLUTION: u64 = 3;
    /// Gate of task `t` uses `GATE + t`.
    pub const GATE: u64 = 1000;
}

/// Seed of stream `stream` under run seed `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Six significant digits, plain notation for moderate magnitudes.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        s
    }
}
