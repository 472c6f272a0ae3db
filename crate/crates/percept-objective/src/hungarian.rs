//! Minimum-cost bipartite assignment via shortest augmenting paths with
//! dual potentials (O(n²·m)), on rectangular matrices.

use crate::ObjectiveError;

/// Outcome of matching `Q` predicted queries against `G` annotated
/// instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query index, target index)` pairs, sorted by query index. They form
    /// a partial injection with exactly `min(Q, G)` entries.
    pub pairs: Vec<(usize, usize)>,
    /// Query indices that received no target, ascending.
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    /// Target assigned to a query, if any.
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(q, _)| q == query).map(|&(_, t)| t)
    }
}

/// Solves min-cost assignment over `cost[q][t]`. Every row must have the
/// same width; all entries must be finite. Exactly `min(Q, G)` pairs are
/// produced. Among cost-equal alternatives reachable by swapping two
/// assignments, the lexicographically smallest pair list wins, so the
/// result is reproducible across refactors of the search order.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, ObjectiveError> {
    let q = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    for (i, row) in cost.iter().enumerate() {
        if row.len() != g {
            return Err(ObjectiveError::CountMismatch {
                context: "cost matrix row width",
                expected: g,
                got: row.len(),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFiniteCost { row: i, col: j, value: v });
            }
        }
    }
    if q == 0 || g == 0 {
        return Ok(MatchResult { pairs: Vec::new(), unmatched_queries: (0..q).collect() });
    }

    // The augmenting-path solver needs rows <= cols; transpose if needed.
    let mut pairs = if q <= g {
        solve_rows_le_cols(q, g, |r, c| cost[r][c]).into_iter().enumerate().collect::<Vec<_>>()
    } else {
        solve_rows_le_cols(g, q, |r, c| cost[c][r])
            .into_iter()
            .enumerate()
            .map(|(row, col)| (col, row))
            .collect::<Vec<_>>()
    };
    pairs.sort_unstable();
    canonicalize(cost, &mut pairs);

    let mut matched = vec![false; q];
    for &(qi, _) in &pairs {
        matched[qi] = true;
    }
    let unmatched_queries = (0..q).filter(|&i| !matched[i]).collect();
    Ok(MatchResult { pairs, unmatched_queries })
}

/// Core solver for `n` rows, `m` columns, `n <= m`. Returns, for each row,
/// the column assigned to it. Uses 1-based sentinel arrays internally: row
/// potentials `u`, column potentials `v`, `assigned[j]` = row owning column
/// `j`, and `way[j]` = previous column on the shortest augmenting path.
fn solve_rows_le_cols(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut assigned = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        assigned[0] = i;
        let mut j0 = 0usize;
        let mut min_reduced = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_reduced[j] {
                    min_reduced[j] = reduced;
                    way[j] = j0;
                }
                if min_reduced[j] < delta {
                    delta = min_reduced[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_reduced[j] -= delta;
                }
            }
            j0 = j1;
            if assigned[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned[j0] = assigned[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if assigned[j] != 0 {
            row_to_col[assigned[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Cost-neutral two-swap pass: whenever exchanging the targets of two pairs
/// keeps the exact total cost and lowers the target sequence
/// lexicographically, apply the swap. Each swap strictly decreases the
/// sequence, so the pass terminates at a canonical optimum.
fn canonicalize(cost: &[Vec<f64>], pairs: &mut [(usize, usize)]) {
    loop {
        let mut swapped = false;
        for a in 0..pairs.len() {
            for b in a + 1..pairs.len() {
                let (qa, ta) = pairs[a];
                let (qb, tb) = pairs[b];
                if tb < ta && cost[qa][ta] + cost[qb][tb] == cost[qa][tb] + cost[qb][ta] {
                    pairs[a].1 = tb;
                    pairs[b].1 = ta;
                    swapped = true;
                }
            }
        }
        if !swapped {
            return;
        }
    }
}

/// Total cost of an assignment, summed in pair order.
#[cfg(test)]
fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(q, t)| cost[q][t]).sum()
}
