//! Accuracy bookkeeping, average accuracy and forgetting, task routing.

use crate::diffcore::{nuclear_norm, Array};
use crate::error::{Error, Result};

/// `rows[t][i]`: accuracy on task `i` measured after finishing task `t`,
/// for `i <= t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next step; it must hold one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::invalid(
                "AccuracyMatrix",
                format!("row {} needs {expected} entries, got {}", self.rows.len(), row.len()),
            ));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid("AccuracyMatrix", format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step).and_then(|r| r.get(task)).copied()
    }

    /// The first `steps` rows.
    pub fn truncated(&self, steps: usize) -> AccuracyMatrix {
        AccuracyMatrix {
            rows: self.rows[..steps.min(self.rows.len())].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub average_accuracy: f64,
    pub forgetting: f64,
    /// False when only one task is complete and forgetting is undefined.
    pub forgetting_defined: bool,
}

/// `A_N` and `F_N` of a complete `N`-step matrix.
pub fn metrics(a: &AccuracyMatrix) -> Result<Metrics> {
    let n = a.steps();
    if n == 0 {
        return Err(Error::invalid("metrics", "accuracy matrix is empty"));
    }
    if a.rows.iter().enumerate().any(|(t, r)| r.len() != t + 1) {
        return Err(Error::invalid("metrics", "accuracy matrix is incomplete"));
    }
    let last = &a.rows[n - 1];
    let average_accuracy = last.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Metrics {
            average_accuracy,
            forgetting: 0.0,
            forgetting_defined: false,
        });
    }
    let total: f64 = (0..n - 1)
        .map(|i| {
            (i..n - 1)
                .map(|t| a.rows[t][i] - last[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(Metrics {
        average_accuracy,
        forgetting: total / (n - 1) as f64,
        forgetting_defined: true,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine", "zero-norm vector"));
    }
    Ok(dot / (na * nb))
}

/// `1 - cos(qx, e)`.
pub fn matching_loss(qx: &[f64], e: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(qx, e)?)
}

/// Index of the embedding most cosine-similar to `qx`; ties go to the
/// smallest index.
pub fn select_task(qx: &[f64], embeddings: &[Array]) -> Result<usize> {
    if embeddings.is_empty() {
        return Err(Error::invalid("select_task", "no stored task embeddings"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, e) in embeddings.iter().enumerate() {
        let c = cosine(qx, e.data())?;
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(best.0)
}

/// Mean nuclear norm over the prompts that are present; `None` when every
/// entry is absent.
pub fn mean_nuclear_norm<'a>(prompts: impl IntoIterator<Item = Option<&'a Array>>) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in prompts.into_iter().flatten() {
        sum += nuclear_norm(p)?;
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_rejects_zero() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn push_row_checks_length() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![1.5, 0.5]).is_err());
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(metrics(&AccuracyMatrix::new()).is_err());
    }

    #[test]
    fn absent_diversity_is_none() {
        assert_eq!(mean_nuclear_norm([None, None]).unwrap(), None);
    }
}
