//! Exact square assignment by the O(n³) potentials method.
//!
//! Costs are `i128` because callers encode tie-breaking preferences by
//! scaling raw counts into wide integers; the solver itself never divides or
//! compares across scales, so exact integer arithmetic keeps the optimum
//! bit-reproducible.

/// Solves the min-cost perfect assignment on a square matrix.
///
/// Returns `assignment` with `assignment[row] = column` and the total cost
/// of that assignment. Panics if the matrix is empty or ragged; callers own
/// shape validation.
pub fn solve_min_cost(cost: &[Vec<i128>]) -> (Vec<usize>, i128) {
    let n = cost.len();
    assert!(n > 0, "assignment needs at least one row");
    assert!(cost.iter().all(|row| row.len() == n), "assignment matrix must be square");

    // Standard potentials formulation, 1-based; p[j] is the row matched to
    // column j, column 0 is the virtual start.
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![i128::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i128::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
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
            }
            for j in 0..=n {
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &[Vec<i128>]) -> i128 {
        fn recurse(cost: &[Vec<i128>], row: usize, used: &mut Vec<bool>, acc: i128, best: &mut i128) {
            if row == cost.len() {
                *best = (*best).min(acc);
                return;
            }
            for col in 0..cost.len() {
                if !used[col] {
                    used[col] = true;
                    recurse(cost, row + 1, used, acc + cost[row][col], best);
                    used[col] = false;
                }
            }
        }
        let mut best = i128::MAX;
        recurse(cost, 0, &mut vec![false; cost.len()], 0, &mut best);
        best
    }

    #[test]
    fn known_three_by_three() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let (assignment, total) = solve_min_cost(&cost);
        assert_eq!(total, 5);
        assert_eq!(assignment, vec![1, 0, 2]);
    }

    #[test]
    fn matches_brute_force_on_small_random_matrices() {
        // Deterministic pseudo-random costs, including negatives.
        let mut state = 0x853c49e6748fea9bu64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 2001) as i128 - 1000
        };
        for n in 1..=5 {
            for _ in 0..40 {
                let cost: Vec<Vec<i128>> = (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
                let (assignment, total) = solve_min_cost(&cost);
                let mut seen = vec![false; n];
                for &j in &assignment {
                    assert!(!seen[j], "column {j} assigned twice");
                    seen[j] = true;
                }
                assert_eq!(total, brute_force(&cost), "matrix: {cost:?}");
            }
        }
    }

    #[test]
    fn single_cell() {
        let (assignment, total) = solve_min_cost(&[vec![-7]]);
        assert_eq!(assignment, vec![0]);
        assert_eq!(total, -7);
    }
}
