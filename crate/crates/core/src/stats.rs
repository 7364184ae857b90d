//! Small statistics helpers shared across modules.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Rows centered and scaled to unit Euclidean norm. Errors on a constant row.
pub(crate) fn normalized_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let mean = row.sum() / d;
        row.add_scalar_mut(-mean);
        let norm = row.norm();
        if !(norm > 0.0) || norm <= 1e-12 * (mean.abs().max(1.0)) * d.sqrt() {
            return Err(Error::DegenerateFeature { row: i });
        }
        row /= norm;
    }
    Ok(out)
}

/// Pearson correlation between every pair of rows, clamped to [-1, 1] with an
/// exact unit diagonal.
pub fn row_correlation(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() < 2 {
        return Err(Error::dim("correlation needs at least two columns"));
    }
    let z = normalized_rows(x)?;
    let mut c = &z * z.transpose();
    let n = c.nrows();
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = if i == j {
                1.0
            } else {
                c[(i, j)].clamp(-1.0, 1.0)
            };
        }
    }
    // enforce exact symmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Per-row z-scoring (zero mean, unit population variance).
pub fn zscore_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = x.ncols() as f64;
    Ok(normalized_rows(x)? * d.sqrt())
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Upper tail P[X >= k] of a Binomial(n, p).
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    let mut total = 0.0;
    for i in k..=n {
        total += (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp();
    }
    total.min(1.0)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let lf = |x: u64| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
    lf(n) - lf(k) - lf(n - k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_small_cases() {
        assert!((binomial_upper_tail(0, 5, 0.3) - 1.0).abs() < 1e-12);
        assert!((binomial_upper_tail(5, 5, 0.5) - 1.0 / 32.0).abs() < 1e-12);
        assert!((binomial_upper_tail(2, 2, 0.5) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_row_is_degenerate() {
        let x = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 4., 4.]);
        assert!(matches!(row_correlation(&x), Err(Error::DegenerateFeature { row: 1 })));
    }

    #[test]
    fn zscore_has_unit_variance() {
        let x = DMatrix::from_row_slice(1, 4, &[1., 2., 3., 10.]);
        let z = zscore_rows(&x).unwrap();
        let mean = z.sum() / 4.0;
        let var = z.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
