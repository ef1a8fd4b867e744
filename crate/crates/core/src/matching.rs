//! Minimum-cost bipartite assignment of ground truth to predictions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Ground-truth index `g` is assigned query `query_of[g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub query_of: Vec<usize>,
    pub cost: f64,
}

impl MatchResult {
    /// `(query, ground truth)` pairs sorted by query.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut p: Vec<(usize, usize)> = self.query_of.iter().enumerate().map(|(g, &q)| (q, g)).collect();
        p.sort_unstable();
        p
    }
}

/// Optimal injective assignment for a `[Q, G]` cost matrix (`G ≤ Q`).
///
/// Shortest augmenting paths with row/column potentials, `O(G²·Q)`.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let (nq, ng) = cost.dims2()?;
    if ng > nq {
        bail!(Validation, "{ng} ground-truth boxes exceed {nq} predictions");
    }
    if !cost.is_finite() {
        bail!(Validation, "cost matrix has non-finite entries");
    }
    if ng == 0 {
        return Ok(MatchResult {
            query_of: Vec::new(),
            cost: 0.0,
        });
    }
    // rows are ground truth (1-based), columns are queries (1-based)
    let c = |g: usize, q: usize| cost.data()[(q - 1) * ng + (g - 1)];
    let (n, m) = (ng, nq);
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
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
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
    let mut query_of = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            query_of[owner[j] - 1] = j - 1;
        }
    }
    let total = query_of.iter().enumerate().map(|(g, &q)| cost.data()[q * ng + g]).sum();
    Ok(MatchResult { query_of, cost: total })
}
