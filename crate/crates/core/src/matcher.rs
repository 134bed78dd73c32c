//! Minimum-cost bipartite assignment of targets to queries.
//!
//! The solver is the O(n³) shortest-augmenting-path algorithm with row and
//! column potentials, followed by a canonicalization pass that makes the
//! result deterministic under ties: among all minimum-cost assignments it
//! returns the one whose query sequence (q_0, q_1, ...) is lexicographically
//! least, i.e. ties break toward the lowest target index first and the
//! lowest query index second.

use crate::error::{Error, Result};

/// Injective map from target indices to query indices with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `target_to_query[t]` is the query matched to target t.
    pub target_to_query: Vec<usize>,
    pub cost: f64,
}

/// Cost of an assignment summed in ascending target order, so equal
/// assignments always produce bitwise-equal totals.
fn assignment_cost(cost: &[Vec<f64>], matching: &[usize]) -> f64 {
    matching
        .iter()
        .enumerate()
        .map(|(t, &q)| cost[t][q])
        .sum()
}

/// Minimum assignment cost for the sub-problem of `rows` against `cols`.
/// Shortest augmenting path with potentials; requires rows.len() <= cols.len().
fn min_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let t = rows.len();
    let n = cols.len();
    if t == 0 {
        return 0.0;
    }
    // 1-based arrays with a virtual column 0, the classic formulation.
    let mut u = vec![0.0; t + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1]; // row matched to each column
    let mut way = vec![0usize; n + 1];
    for i in 1..=t {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut per_row = vec![0usize; t];
    for j in 1..=n {
        if matched[j] != 0 {
            per_row[matched[j] - 1] = j - 1;
        }
    }
    let local: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
        .collect();
    assignment_cost(&local, &per_row)
}

/// Globally minimum-cost injective assignment of T targets to N queries.
///
/// `cost[t][q]` is the cost of pairing target t with query q. Requires
/// T <= N. Ties between equal-cost optima resolve to the canonical
/// lexicographically-least query sequence.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let t_n = cost.len();
    if t_n == 0 {
        return Ok(Assignment {
            target_to_query: Vec::new(),
            cost: 0.0,
        });
    }
    let q_n = cost[0].len();
    if cost.iter().any(|row| row.len() != q_n) {
        return Err(Error::invalid("hungarian_assign", "ragged cost matrix"));
    }
    if t_n > q_n {
        return Err(Error::invalid(
            "hungarian_assign",
            format!("{t_n} targets exceed {q_n} queries"),
        ));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("hungarian_assign", "non-finite cost entry"));
    }

    let all_rows: Vec<usize> = (0..t_n).collect();
    let all_cols: Vec<usize> = (0..q_n).collect();
    let optimal = min_cost(cost, &all_rows, &all_cols);
    // Equal assignments sum identical values in identical order, so this
    // tolerance only ever has to absorb reordering effects across genuinely
    // tied optima.
    let tol = 1e-9 * (1.0 + optimal.abs());

    // Fix targets in ascending order, each time committing the smallest
    // query that still completes some minimum-cost assignment.
    let mut chosen = vec![usize::MAX; t_n];
    let mut used = vec![false; q_n];
    let mut fixed_cost = 0.0;
    for t in 0..t_n {
        let rest_rows: Vec<usize> = (t + 1..t_n).collect();
        let mut committed = false;
        for q in 0..q_n {
            if used[q] {
                continue;
            }
            let rest_cols: Vec<usize> =
                (0..q_n).filter(|&c| !used[c] && c != q).collect();
            let tail = min_cost(cost, &rest_rows, &rest_cols);
            if (fixed_cost + cost[t][q] + tail - optimal).abs() <= tol {
                chosen[t] = q;
                used[q] = true;
                fixed_cost += cost[t][q];
                committed = true;
                break;
            }
        }
        if !committed {
            return Err(Error::invalid(
                "hungarian_assign",
                "canonicalization failed to extend a minimal assignment",
            ));
        }
    }

    Ok(Assignment {
        cost: assignment_cost(cost, &chosen),
        target_to_query: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Exhaustive oracle: enumerate injective maps in lexicographic order of
    /// the query sequence and keep the strictly best, so the first minimum
    /// encountered is the canonical one.
    fn brute_force(cost: &[Vec<f64>]) -> Assignment {
        let t_n = cost.len();
        let q_n = if t_n == 0 { 0 } else { cost[0].len() };
        let mut best: Option<Assignment> = None;
        let mut current = Vec::with_capacity(t_n);
        let mut used = vec![false; q_n];
        fn recur(
            cost: &[Vec<f64>],
            t: usize,
            current: &mut Vec<usize>,
            used: &mut [bool],
            best: &mut Option<Assignment>,
        ) {
            if t == cost.len() {
                let total = current
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| cost[i][q])
                    .sum::<f64>();
                if best.as_ref().is_none_or(|b| total < b.cost) {
                    *best = Some(Assignment {
                        target_to_query: current.clone(),
                        cost: total,
                    });
                }
                return;
            }
            for q in 0..used.len() {
                if used[q] {
                    continue;
                }
                used[q] = true;
                current.push(q);
                recur(cost, t + 1, current, used, best);
                current.pop();
                used[q] = false;
            }
        }
        recur(cost, 0, &mut current, &mut used, &mut best);
        best.unwrap_or(Assignment {
            target_to_query: Vec::new(),
            cost: 0.0,
        })
    }

    #[test]
    fn single_entry() {
        let a = hungarian_assign(&[vec![5.0]]).unwrap();
        assert_eq!(a.target_to_query, vec![0]);
        assert_eq!(a.cost, 5.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        // [[1,2],[3,0]]: diagonal 1+0=1 beats 2+3=5.
        let a = hungarian_assign(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(a.target_to_query, vec![0, 1]);
        assert_eq!(a.cost, 1.0);
    }

    #[test]
    fn more_targets_than_queries_is_invalid() {
        let r = hungarian_assign(&[vec![1.0], vec![2.0]]);
        assert!(matches!(r, Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn empty_matrix_gives_empty_assignment() {
        let a = hungarian_assign(&[]).unwrap();
        assert!(a.target_to_query.is_empty());
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn rectangular_uses_cheapest_columns() {
        // One target, four queries.
        let a = hungarian_assign(&[vec![4.0, 2.0, 9.0, 7.0]]).unwrap();
        assert_eq!(a.target_to_query, vec![1]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn ties_break_to_lowest_target_then_lowest_query() {
        // All-equal costs: every assignment is optimal; canonical picks the
        // identity prefix.
        let a = hungarian_assign(&[vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]]).unwrap();
        assert_eq!(a.target_to_query, vec![0, 1, 2]);

        // Two optima: {0->0, 1->1} and {0->1, 1->0}, both cost 2.
        let b = hungarian_assign(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(b.target_to_query, vec![0, 1]);
    }

    #[test]
    fn matches_brute_force_on_random_float_matrices() {
        let mut rng = Rng::new(17).fork_named("matcher-floats");
        for case in 0..220 {
            let t = rng.below(6) + 1;
            let n = t + rng.below(7 - t);
            let cost: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..n).map(|_| rng.range(-5.0, 5.0)).collect())
                .collect();
            let got = hungarian_assign(&cost).unwrap();
            let want = brute_force(&cost);
            assert_eq!(
                got.target_to_query, want.target_to_query,
                "case {case}: cost {cost:?}"
            );
            assert!((got.cost - want.cost).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_brute_force_on_tie_heavy_integer_matrices() {
        // Small integer costs force frequent exact ties, exercising the
        // canonical tie-break rather than just optimality.
        let mut rng = Rng::new(29).fork_named("matcher-ints");
        for case in 0..220 {
            let t = rng.below(5) + 1;
            let n = t + rng.below(6 - t);
            let cost: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..n).map(|_| rng.below(3) as f64).collect())
                .collect();
            let got = hungarian_assign(&cost).unwrap();
            let want = brute_force(&cost);
            assert_eq!(
                got.target_to_query, want.target_to_query,
                "case {case}: cost {cost:?}"
            );
            assert_eq!(got.cost, want.cost, "case {case}");
        }
    }

    #[test]
    fn injectivity_holds_on_random_cases() {
        let mut rng = Rng::new(41).fork_named("matcher-inj");
        for _ in 0..100 {
            let t = rng.below(8) + 1;
            let n = t + rng.below(8);
            let cost: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..n).map(|_| rng.range(0.0, 10.0)).collect())
                .collect();
            let a = hungarian_assign(&cost).unwrap();
            let mut seen = vec![false; n];
            for &q in &a.target_to_query {
                assert!(!seen[q], "query {q} assigned twice");
                seen[q] = true;
            }
        }
    }
}
