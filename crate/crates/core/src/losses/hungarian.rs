//! Minimum-cost assignment of rows to distinct columns (rows ≤ columns).

use ndarray::Array2;

use crate::error::{Error, Result};

/// An injective assignment of ground-truth tracks (rows) to queries (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[row] = column`
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the rectangular assignment problem with shortest augmenting paths
/// and dual potentials, `O(n² m)`.
pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, m) = cost.dim();
    if n > m {
        return Err(Error::TooFewQueries {
            n_gt: n,
            n_queries: m,
        });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    if n == 0 {
        return Ok(MatchResult {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    // 1-based potentials; column 0 is a virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    Ok(MatchResult {
        assignment,
        total_cost,
    })
}
