//! Minimum-cost injective assignment of ground truths to proposals via the
//! shortest-augmenting-path Hungarian algorithm with potentials, O(G·N²).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cost matrix has {rows} rows but only {cols} columns; need rows <= cols")]
    TooFewColumns { rows: usize, cols: usize },
    #[error("cost matrix row {row} has {len} entries, expected {cols}")]
    Ragged { row: usize, len: usize, cols: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Result of matching G ground truths against N proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// For each ground truth, the proposal index it was assigned.
    pub assigned: Vec<usize>,
    /// For each proposal, the ground truth it serves, `None` = background.
    pub proposal_gt: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn empty(num_proposals: usize) -> Self {
        MatchResult {
            assigned: Vec::new(),
            proposal_gt: vec![None; num_proposals],
        }
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.assigned
            .iter()
            .enumerate()
            .map(|(g, &k)| cost[g][k])
            .sum()
    }
}

/// Solve the rectangular assignment problem (rows = ground truths, columns =
/// proposals, G <= N) exactly.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, MatchError> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(MatchResult::empty(0));
    }
    let cols = cost[0].len();
    if rows > cols {
        return Err(MatchError::TooFewColumns { rows, cols });
    }
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(MatchError::Ragged {
                row: r,
                len: row.len(),
                cols,
            });
        }
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchError::NonFinite { row: r, col: c });
            }
        }
    }

    // 1-indexed potentials formulation; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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

    let mut assigned = vec![usize::MAX; rows];
    let mut proposal_gt = vec![None; cols];
    for j in 1..=cols {
        if p[j] != 0 {
            assigned[p[j] - 1] = j - 1;
            proposal_gt[j - 1] = Some(p[j] - 1);
        }
    }
    debug_assert!(assigned.iter().all(|&k| k != usize::MAX));
    Ok(MatchResult {
        assigned,
        proposal_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive minimum over all injective assignments.
    pub(crate) fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for col in 0..cost[row].len() {
                if !used[col] {
                    used[col] = true;
                    let total = cost[row][col] + rec(cost, row + 1, used);
                    used[col] = false;
                    best = best.min(total);
                }
            }
            best
        }
        let mut used = vec![false; cost.first().map_or(0, |r| r.len())];
        rec(cost, 0, &mut used)
    }

    #[test]
    fn diagonal_zeros_give_identity() {
        let cost = vec![
            vec![0.0, 5.0, 5.0],
            vec![5.0, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
        ];
        let m = hungarian(&cost).unwrap();
        assert_eq!(m.assigned, vec![0, 1, 2]);
        assert_eq!(m.total_cost(&cost), 0.0);
    }

    #[test]
    fn two_by_two_prefers_cross_assignment() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let m = hungarian(&cost).unwrap();
        assert_eq!(m.assigned, vec![1, 0]);
        assert_eq!(m.total_cost(&cost), 4.0);
    }

    #[test]
    fn rectangular_marks_background_proposals() {
        let cost = vec![vec![9.0, 1.0, 9.0, 9.0]];
        let m = hungarian(&cost).unwrap();
        assert_eq!(m.assigned, vec![1]);
        assert_eq!(
            m.proposal_gt,
            vec![None, Some(0), None, None],
        );
    }

    #[test]
    fn rejects_more_rows_than_columns() {
        let cost = vec![vec![1.0], vec![1.0]];
        assert_eq!(
            hungarian(&cost).unwrap_err(),
            MatchError::TooFewColumns { rows: 2, cols: 1 }
        );
    }

    #[test]
    fn rejects_non_finite_costs() {
        let cost = vec![vec![1.0, f64::NAN]];
        assert!(matches!(
            hungarian(&cost).unwrap_err(),
            MatchError::NonFinite { row: 0, col: 1 }
        ));
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        // Deterministic xorshift so failures reproduce.
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..300 {
            let rows = 1 + (next() * 7.0) as usize;
            let cols = rows + (next() * (7 - rows.min(6)) as f64) as usize;
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| (next() * 20.0) - 5.0).collect())
                .collect();
            let m = hungarian(&cost).unwrap();
            let expect = brute_force_min_cost(&cost);
            let got = m.total_cost(&cost);
            assert!(
                (got - expect).abs() < 1e-9,
                "trial {trial}: hungarian {got} vs brute force {expect} on {cost:?}"
            );
            // injectivity
            let mut seen = std::collections::HashSet::new();
            for &k in &m.assigned {
                assert!(seen.insert(k), "proposal {k} assigned twice");
            }
        }
    }

    #[test]
    fn permutation_covariance() {
        let cost = vec![
            vec![3.0, 1.0, 4.0, 1.5],
            vec![5.0, 9.0, 2.0, 6.0],
            vec![5.0, 3.0, 5.0, 8.0],
        ];
        let m = hungarian(&cost).unwrap();
        let perm = [2usize, 0, 3, 1]; // new col -> old col
        let permuted: Vec<Vec<f64>> = cost
            .iter()
            .map(|row| perm.iter().map(|&o| row[o]).collect())
            .collect();
        let mp = hungarian(&permuted).unwrap();
        assert_eq!(m.total_cost(&cost), mp.total_cost(&permuted));
        for g in 0..cost.len() {
            assert_eq!(perm[mp.assigned[g]], m.assigned[g]);
        }
    }
}
