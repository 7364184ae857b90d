//! Maximum-weight perfect assignment on a square score matrix.
//!
//! Shortest augmenting path Hungarian method with row/column potentials,
//! followed by a pass that picks the lexicographically smallest permutation
//! among all optimal ones. Every optimal assignment lives on the edges that
//! are tight under an optimal dual, so the tie-break only searches those.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A bijection between edge indices together with the mean score it achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMapping {
    /// `assignment[j]` is the column matched to row `j`.
    pub assignment: Vec<usize>,
    pub value: f64,
}

struct Solved {
    col_of_row: Vec<usize>,
    // reduced cost (on the negated scores) of every entry
    reduced: DMatrix<f64>,
}

fn validate(score: &DMatrix<f64>) -> Result<()> {
    if score.nrows() != score.ncols() {
        return Err(Error::dim(format!(
            "assignment needs a square matrix, got {}x{}",
            score.nrows(),
            score.ncols()
        )));
    }
    if score.nrows() == 0 {
        return Err(Error::dim("assignment on an empty matrix"));
    }
    if score.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("assignment scores must be finite".into()));
    }
    Ok(())
}

fn hungarian(score: &DMatrix<f64>) -> Solved {
    let m = score.nrows();
    let cost = |i: usize, j: usize| -score[(i - 1, j - 1)];
    // 1-based with a virtual column 0
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; m];
    for j in 1..=m {
        col_of_row[p[j] - 1] = j - 1;
    }
    let reduced = DMatrix::from_fn(m, m, |i, j| cost(i + 1, j + 1) - u[i + 1] - v[j + 1]);
    Solved {
        col_of_row,
        reduced,
    }
}

fn mean_of(score: &DMatrix<f64>, assignment: &[usize]) -> f64 {
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(j, &k)| score[(j, k)])
        .sum();
    total / assignment.len() as f64
}

/// Optimal mean score without the lexicographic tie-break.
pub fn assignment_value(score: &DMatrix<f64>) -> Result<f64> {
    validate(score)?;
    let solved = hungarian(score);
    Ok(mean_of(score, &solved.col_of_row))
}

/// The permutation maximizing the mean of `score[(j, f(j))]`; among optima the
/// lexicographically smallest permutation is returned.
pub fn optimal_assignment(score: &DMatrix<f64>) -> Result<EdgeMapping> {
    validate(score)?;
    let m = score.nrows();
    let Solved {
        mut col_of_row,
        reduced,
    } = hungarian(score);

    let scale = score.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let tol = 1e-10 * scale * m as f64;
    let tight = |i: usize, j: usize| reduced[(i, j)] <= tol;

    let mut row_of_col = vec![0; m];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    let mut locked = vec![false; m];

    for i in 0..m {
        let current = col_of_row[i];
        for j in 0..current {
            if locked[j] || !tight(i, j) {
                continue;
            }
            // Move row i to column j; the displaced row must reach the
            // freed column through tight edges among unlocked rows > i.
            let displaced = row_of_col[j];
            let mut visited = vec![false; m];
            visited[j] = true;
            let mut trial_col = col_of_row.clone();
            let mut trial_row = row_of_col.clone();
            trial_col[i] = j;
            trial_row[j] = i;
            trial_row[current] = usize::MAX;
            if augment(
                displaced,
                i,
                &tight,
                &locked,
                &mut visited,
                &mut trial_col,
                &mut trial_row,
            ) {
                col_of_row = trial_col;
                row_of_col = trial_row;
                break;
            }
        }
        locked[col_of_row[i]] = true;
    }

    Ok(EdgeMapping {
        value: mean_of(score, &col_of_row),
        assignment: col_of_row,
    })
}

// Kuhn-style DFS: find a new column for `row` among unlocked tight columns,
// displacing other rows (all > `pivot`) as needed, ending at the unmatched one.
fn augment(
    row: usize,
    pivot: usize,
    tight: &impl Fn(usize, usize) -> bool,
    locked: &[bool],
    visited: &mut [bool],
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    let m = locked.len();
    for j in 0..m {
        if locked[j] || visited[j] || !tight(row, j) {
            continue;
        }
        visited[j] = true;
        let holder = row_of_col[j];
        let free = holder == usize::MAX;
        if free
            || (holder > pivot
                && augment(holder, pivot, tight, locked, visited, col_of_row, row_of_col))
        {
            col_of_row[row] = j;
            row_of_col[j] = row;
            return true;
        }
    }
    false
}
