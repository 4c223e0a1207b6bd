use crate::error::{Error, Result};

/// Result of bipartite matching between predictions and ground truths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    /// `(prediction, ground truth)` pairs, ordered by ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &[f64], n_gt: usize) -> f64 {
        self.pairs.iter().map(|&(p, t)| cost[p * n_gt + t]).sum()
    }

    /// Ground-truth index matched to each prediction.
    pub fn target_of(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            t[p] = Some(g);
        }
        t
    }
}

/// Minimum-cost assignment covering every ground truth. `cost` is
/// `[n_pred, n_gt]` row-major with `n_pred >= n_gt`. Shortest augmenting
/// paths with dual potentials, `O(n_gt^2 * n_pred)`; the rectangular case
/// is handled directly rather than by padding.
pub fn hungarian_match(cost: &[f64], n_pred: usize, n_gt: usize) -> Result<MatchAssignment> {
    if cost.len() != n_pred * n_gt {
        return Err(Error::dim(
            "hungarian_match",
            &[cost.len()],
            &[n_pred, n_gt],
        ));
    }
    if n_pred < n_gt {
        return Err(Error::contract(format!(
            "hungarian_match needs n_pred >= n_gt, got {n_pred} < {n_gt}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract(
            "hungarian_match cost contains non-finite values",
        ));
    }
    // Rows are ground truths (1-based), columns predictions (1-based);
    // index 0 is the virtual start column.
    let (n, m) = (n_gt, n_pred);
    let a = |i: usize, j: usize| cost[(j - 1) * n_gt + (i - 1)];
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
                let cur = a(i0, j) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, t)| t);
    let unmatched = (1..=m).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(MatchAssignment { pairs, unmatched })
}
