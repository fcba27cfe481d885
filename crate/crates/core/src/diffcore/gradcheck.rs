//! Central finite-difference verification of tape gradients.

use super::array::Array;
use super::tape::{Precision, Tape, Var};
use crate::error::{Error, Result};

/// A named parameter fed to [`grad_check`].
#[derive(Clone, Debug)]
pub struct NamedParam {
    pub name: String,
    pub value: Array,
}

impl NamedParam {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        NamedParam {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over checked entries.
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose perturbation crossed a relu kink, or sat exactly on one.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Test hooks for negative controls.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckHooks {
    /// Added to the first analytic gradient entry of the last parameter.
    pub corrupt_analytic: Option<f64>,
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(loss_fn: &F, params: &[NamedParam]) -> Result<Eval>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.param(p.name.clone(), p.value.clone()))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(Eval {
        loss: tape.value(loss).item(),
        signature: tape.relu_signature(),
    })
}

/// Compares reverse-mode gradients against central differences at 64-bit
/// precision.
pub fn grad_check<F>(loss_fn: F, params: &[NamedParam], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(loss_fn, params, step, GradCheckHooks::default())
}

pub fn grad_check_with<F>(
    loss_fn: F,
    params: &[NamedParam],
    step: f64,
    hooks: GradCheckHooks,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check", format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.param(p.name.clone(), p.value.clone()))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let base = Eval {
        loss: tape.value(loss).item(),
        signature: tape.relu_signature(),
    };
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Array> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
    if let (Some(delta), Some(last)) = (hooks.corrupt_analytic, analytic.last_mut()) {
        last.data_mut()[0] += delta;
    }

    let again = evaluate(&loss_fn, params)?;
    if again.loss.to_bits() != base.loss.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at identical parameters gave {} and {}",
            base.loss, again.loss
        )));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for j in 0..param.value.len() {
            let original = param.value.data()[j];
            probe[pi].value.data_mut()[j] = original + step;
            let plus = evaluate(&loss_fn, &probe)?;
            probe[pi].value.data_mut()[j] = original - step;
            let minus = evaluate(&loss_fn, &probe)?;
            probe[pi].value.data_mut()[j] = original;

            // A perturbation that flips any relu crosses a kink: the central
            // difference straddles two linear pieces and is not a derivative.
            let kink = plus.signature != base.signature || minus.signature != base.signature;
            if kink {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * step);
            let err = (analytic[pi].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((param.name.clone(), j));
            }
        }
    }
    Ok(report)
}
