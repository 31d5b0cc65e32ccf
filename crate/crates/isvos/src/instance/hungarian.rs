//! Optimal assignment of ground-truth instances to queries by the O(n^3)
//! shortest-augmenting-path method with row/column potentials.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Assigns each of the `G` ground-truth instances (columns of `cost[N,G]`)
/// to a distinct query (row) minimizing total cost. Returns, per ground
/// truth, the index of its query. Requires `G <= N` and finite costs.
pub fn hungarian_match(cost: &Tensor) -> Result<Vec<usize>> {
    let s = cost.shape();
    if s.len() != 2 {
        return Err(Error::dimension(
            "hungarian_match",
            format!("expected [N,G], got {:?}", s),
        ));
    }
    let (n_queries, g) = (s[0], s[1]);
    if g == 0 {
        return Ok(Vec::new());
    }
    if g > n_queries {
        return Err(Error::Contract(format!(
            "{} ground-truth instances exceed {} queries",
            g, n_queries
        )));
    }
    if !cost.is_all_finite() {
        return Err(Error::Contract("cost matrix must be finite".into()));
    }

    // rows = ground truth (the smaller side), columns = queries; 1-indexed
    // arrays with index 0 as the virtual start of each augmenting path.
    let a = |i: usize, j: usize| cost.data()[(j - 1) * g + (i - 1)] as f64;
    let (rows, cols) = (g, n_queries);
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut matched_row = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
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
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        while j0 != 0 {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut assignment = vec![usize::MAX; rows];
    for j in 1..=cols {
        if matched_row[j] != 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&q| q != usize::MAX));
    Ok(assignment)
}

/// Total cost of an assignment produced by [`hungarian_match`].
pub fn assignment_cost(cost: &Tensor, assignment: &[usize]) -> f64 {
    let g = cost.shape()[1];
    assignment
        .iter()
        .enumerate()
        .map(|(gt, &q)| cost.data()[q * g + gt] as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective gt -> query maps.
    fn brute_force(cost: &Tensor) -> f64 {
        let (n, g) = (cost.shape()[0], cost.shape()[1]);
        fn rec(cost: &Tensor, n: usize, g: usize, gt: usize, used: &mut Vec<bool>) -> f64 {
            if gt == g {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for q in 0..n {
                if used[q] {
                    continue;
                }
                used[q] = true;
                let c = cost.data()[q * g + gt] as f64 + rec(cost, n, g, gt + 1, used);
                used[q] = false;
                best = best.min(c);
            }
            best
        }
        rec(cost, n, g, 0, &mut vec![false; n])
    }

    #[test]
    fn forced_diagonal_optimum() {
        let cost = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a, vec![0, 1]);
    }

    #[test]
    fn hand_case_total_one() {
        // queries x gt: [[1,2],[3,0]] -> gt0 -> query0, gt1 -> query1
        let cost = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(assignment_cost(&cost, &a), 1.0);
    }

    #[test]
    fn rejects_more_ground_truth_than_queries() {
        let cost = Tensor::zeros(&[2, 3]);
        assert!(matches!(hungarian_match(&cost), Err(Error::Contract(_))));
    }

    #[test]
    fn matches_brute_force_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..60 {
            let n = rng.gen_range(1..=7usize);
            let g = rng.gen_range(1..=n);
            let data: Vec<f32> = (0..n * g).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let cost = Tensor::from_vec(&[n, g], data).unwrap();
            let a = hungarian_match(&cost).unwrap();
            // distinct queries
            let mut seen = vec![false; n];
            for &q in &a {
                assert!(!seen[q]);
                seen[q] = true;
            }
            let total = assignment_cost(&cost, &a);
            let best = brute_force(&cost);
            assert!(
                (total - best).abs() <= 1e-9,
                "hungarian {total} vs brute force {best}"
            );
        }
    }

    #[test]
    fn six_by_four_example_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let data: Vec<f32> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cost = Tensor::from_vec(&[6, 4], data).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert!((assignment_cost(&cost, &a) - brute_force(&cost)).abs() <= 1e-9);
    }
}
