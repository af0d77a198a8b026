//! Permutation-invariant pairing of output streams with reference targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest speaker count searched exhaustively; larger problems go to the
/// assignment solver.
pub const EXHAUSTIVE_LIMIT: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitOutcome {
    /// `permutation[i]` is the target paired with stream `i`.
    pub permutation: Vec<usize>,
    /// `loss_matrix[i][j]`: stream `i` scored against target `j`.
    pub loss_matrix: Vec<Vec<f64>>,
    pub total_loss: f64,
}

fn check_square(m: &[Vec<f64>]) -> Result<usize> {
    let n = m.len();
    if n == 0 {
        return Err(Error::Invalid("empty loss matrix".into()));
    }
    for row in m {
        if row.len() != n {
            return Err(Error::shape("loss matrix row", n, row.len()));
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Invalid("NaN in loss matrix".into()));
        }
    }
    Ok(n)
}

/// Sum of `m[i][perm[i]]` accumulated in stream order.
pub fn permutation_cost(m: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| m[i][j]).sum()
}

/// Advances to the next permutation in lexicographic order; false once the
/// last one has been passed.
fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search over all `N!` permutations. Ties resolve to the
/// lexicographically smallest permutation.
pub fn exhaustive_assignment(m: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = check_square(m)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), permutation_cost(m, &perm));
    while next_permutation(&mut perm) {
        let cost = permutation_cost(m, &perm);
        if cost < best.1 {
            best = (perm.clone(), cost);
        }
    }
    Ok(best)
}

/// Minimum-cost assignment by the Hungarian method with row/column potentials,
/// O(N^3). Infinite entries are treated as a cost larger than any finite path.
pub fn hungarian_assignment(m: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = check_square(m)?;
    let finite_max = m
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let big = (finite_max + 1.0) * (n as f64 + 1.0) * 4.0;
    let cost = |i: usize, j: usize| {
        let v = m[i][j];
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
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
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    let total = permutation_cost(m, &perm);
    Ok((perm, total))
}

/// Best stream-to-target pairing for a precomputed loss matrix.
pub fn pit_from_matrix(loss_matrix: Vec<Vec<f64>>) -> Result<PitOutcome> {
    let n = check_square(&loss_matrix)?;
    let (permutation, total_loss) = if n <= EXHAUSTIVE_LIMIT {
        exhaustive_assignment(&loss_matrix)?
    } else {
        hungarian_assignment(&loss_matrix)?
    };
    Ok(PitOutcome {
        permutation,
        loss_matrix,
        total_loss,
    })
}

/// Fills the pairwise matrix with `loss(stream, target)` and picks the best
/// pairing.
pub fn pit<S, T>(streams: &[S], targets: &[T], mut loss: impl FnMut(&S, &T) -> Result<f64>) -> Result<PitOutcome> {
    if streams.len() != targets.len() {
        return Err(Error::shape("PIT targets", streams.len(), targets.len()));
    }
    let matrix = streams
        .iter()
        .map(|s| targets.iter().map(|t| loss(s, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    pit_from_matrix(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_wins() {
        let out = pit_from_matrix(vec![vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(out.permutation, vec![0, 1]);
        assert_eq!(out.total_loss, 2.0);
    }

    #[test]
    fn swap_wins() {
        let out = pit_from_matrix(vec![vec![5.0, 1.0], vec![1.0, 5.0]]).unwrap();
        assert_eq!(out.permutation, vec![1, 0]);
        assert_eq!(out.total_loss, 2.0);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let out = pit_from_matrix(vec![vec![1.0; 3]; 3]).unwrap();
        assert_eq!(out.permutation, vec![0, 1, 2]);
        let m = vec![vec![9.0, 1.0, 1.0], vec![1.0, 9.0, 1.0], vec![1.0, 1.0, 9.0]];
        // both derangements cost 3
        assert_eq!(pit_from_matrix(m).unwrap().permutation, vec![1, 2, 0]);
    }

    #[test]
    fn infinite_entries_are_avoided() {
        let inf = f64::INFINITY;
        let m = vec![vec![inf, 3.0], vec![1.0, inf]];
        assert_eq!(pit_from_matrix(m.clone()).unwrap().permutation, vec![1, 0]);
        assert_eq!(hungarian_assignment(&m).unwrap().0, vec![1, 0]);
    }

    #[test]
    fn large_problems_use_the_solver() {
        let n = 9;
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if (i + 1) % n == j { 0.0 } else { 1.0 + (i * j) as f64 }).collect())
            .collect();
        let out = pit_from_matrix(m).unwrap();
        assert_eq!(out.total_loss, 0.0);
        assert_eq!(out.permutation, (0..n).map(|i| (i + 1) % n).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_counts_error() {
        let r = pit(&[1.0, 2.0], &[1.0], |a: &f64, b: &f64| Ok(a - b));
        assert!(r.is_err());
    }

    #[test]
    fn lexicographic_enumeration_covers_all() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }
}
