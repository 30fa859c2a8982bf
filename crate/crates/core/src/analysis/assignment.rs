//! Dense linear assignment by shortest augmenting paths with dual
//! potentials (the Jonker-Volgenant / Hungarian family), `O(n³)`.
//!
//! Rows are inserted one at a time; each insertion runs a Dijkstra-style
//! search over reduced costs for the cheapest augmenting path. When several
//! columns tie for the minimum, an unassigned column is preferred and then the
//! lowest index, so a matrix with all-equal entries yields the identity.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Returns `perm` with row `i` assigned to column `perm[i]`, optimizing the
/// total `Σ scores[i][perm[i]]`.
pub fn solve_assignment(scores: &Matrix, maximize: bool) -> Result<Vec<usize>> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::NotSquare {
            rows: scores.rows(),
            cols: scores.cols(),
        });
    }
    if scores.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "assignment scores must be finite".into(),
        ));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = |i: usize, j: usize| {
        let s = scores.get(i, j);
        if maximize {
            -s
        } else {
            s
        }
    };

    // 1-based rows/columns; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                let prefer_free = minv[j] == delta && owner[j] == 0 && owner[j1] != 0;
                if minv[j] < delta || prefer_free {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// `Σ scores[i][perm[i]]`, summed in row order.
pub fn assignment_total(scores: &Matrix, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .fold(0.0, |acc, (i, &j)| acc + scores.get(i, j))
}
