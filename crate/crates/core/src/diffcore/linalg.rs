//! Singular values of small dense matrices.

use super::array::Array;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Singular values of a 2-D array in descending order.
///
/// One-sided Jacobi: columns are rotated pairwise until mutually orthogonal,
/// after which the column norms are the singular values. The wider side is
/// put on the rows so the rotations act on the shorter dimension.
pub fn singular_values(a: &Array) -> Result<Vec<f64>> {
    if a.ndim() != 2 {
        return Err(Error::invalid(
            "singular_values",
            format!("expected a 2-D array, got shape {:?}", a.shape()),
        ));
    }
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    // Column-major working copy with m >= n.
    let (m, n, mut cols_data) = if rows >= cols {
        let mut c = vec![vec![0.0; rows]; cols];
        for i in 0..rows {
            for j in 0..cols {
                c[j][i] = a.data()[i * cols + j];
            }
        }
        (rows, cols, c)
    } else {
        let c: Vec<Vec<f64>> = (0..rows)
            .map(|i| a.data()[i * cols..(i + 1) * cols].to_vec())
            .collect();
        (cols, rows, c)
    };
    debug_assert!(cols_data.iter().all(|c| c.len() == m));

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols_data[p], &cols_data[q]);
                    let alpha: f64 = cp.iter().map(|x| x * x).sum();
                    let beta: f64 = cq.iter().map(|x| x * x).sum();
                    let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols_data.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols_data
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

/// Sum of singular values of a 2-D array.
pub fn nuclear_norm(a: &Array) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}
