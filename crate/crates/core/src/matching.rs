//! Assignment problems: maximum-weight permutations and bipartite
//! matchings of columns to distinct rows.

/// Largest `k` for which [`max_weight_assignment`] enumerates every
/// permutation instead of running the Hungarian algorithm.
pub const EXHAUSTIVE_MAX: usize = 8;

/// Permutation `π` maximizing `Σ_j w[j][π(j)]` for a square weight matrix.
pub fn max_weight_assignment(w: &[Vec<f64>]) -> Vec<usize> {
    let k = w.len();
    assert!(w.iter().all(|row| row.len() == k), "weight matrix must be square");
    if k <= EXHAUSTIVE_MAX {
        exhaustive(w)
    } else {
        hungarian(w)
    }
}

fn exhaustive(w: &[Vec<f64>]) -> Vec<usize> {
    let k = w.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_score = f64::NEG_INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let score: f64 = p.iter().enumerate().map(|(j, &l)| w[j][l]).sum();
        if score > best_score {
            best_score = score;
            best = p.to_vec();
        }
    });
    best
}

fn permute(p: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on the
/// negated weights.
pub fn hungarian(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -w[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
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
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Assigns each column a distinct row from its candidate list, or `None`
/// if no such assignment exists. `candidates[j]` lists the admissible rows
/// of column `j`. Small problems are searched exhaustively; larger ones use
/// augmenting paths.
pub fn distinct_rows(candidates: &[Vec<usize>], n_rows: usize) -> Option<Vec<usize>> {
    if candidates.len() <= EXHAUSTIVE_MAX {
        let mut used = vec![false; n_rows];
        let mut pick = Vec::with_capacity(candidates.len());
        backtrack(candidates, &mut used, &mut pick).then_some(pick)
    } else {
        kuhn(candidates, n_rows)
    }
}

fn backtrack(candidates: &[Vec<usize>], used: &mut [bool], pick: &mut Vec<usize>) -> bool {
    let j = pick.len();
    if j == candidates.len() {
        return true;
    }
    for &row in &candidates[j] {
        if !used[row] {
            used[row] = true;
            pick.push(row);
            if backtrack(candidates, used, pick) {
                return true;
            }
            pick.pop();
            used[row] = false;
        }
    }
    false
}

fn kuhn(candidates: &[Vec<usize>], n_rows: usize) -> Option<Vec<usize>> {
    let mut row_owner: Vec<Option<usize>> = vec![None; n_rows];
    fn augment(j: usize, candidates: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &row in &candidates[j] {
            if !seen[row] {
                seen[row] = true;
                if owner[row].is_none_or(|other| augment(other, candidates, seen, owner)) {
                    owner[row] = Some(j);
                    return true;
                }
            }
        }
        false
    }
    for j in 0..candidates.len() {
        let mut seen = vec![false; n_rows];
        if !augment(j, candidates, &mut seen, &mut row_owner) {
            return None;
        }
    }
    let mut out = vec![0; candidates.len()];
    for (row, owner) in row_owner.iter().enumerate() {
        if let Some(j) = owner {
            out[*j] = row;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn assignment_recovers_a_planted_permutation() {
        let perm = [2, 0, 1];
        let w: Vec<Vec<f64>> = (0..3)
            .map(|j| (0..3).map(|l| if perm[j] == l { 1.0 } else { 0.1 }).collect())
            .collect();
        assert_eq!(max_weight_assignment(&w), perm);
        assert_eq!(hungarian(&w), perm);
    }

    #[test]
    fn distinct_rows_examples() {
        assert_eq!(distinct_rows(&[vec![0, 1], vec![0]], 2), Some(vec![1, 0]));
        assert_eq!(distinct_rows(&[vec![0], vec![0]], 2), None);
        let many: Vec<Vec<usize>> = (0..10).map(|j| vec![j, (j + 1) % 10]).collect();
        assert!(kuhn(&many, 10).is_some());
        let starved: Vec<Vec<usize>> = (0..10).map(|_| vec![0, 1]).collect();
        assert_eq!(distinct_rows(&starved, 10), None);
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive(k in 1usize..7, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let score = |p: &[usize]| p.iter().enumerate().map(|(j, &l)| w[j][l]).sum::<f64>();
            let a = exhaustive(&w);
            let b = hungarian(&w);
            prop_assert!((score(&a) - score(&b)).abs() < 1e-12);
        }

        #[test]
        fn kuhn_agrees_with_backtracking(k in 1usize..6, rows in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cands: Vec<Vec<usize>> = (0..k)
                .map(|_| (0..rows).filter(|_| rng.random_bool(0.4)).collect())
                .collect();
            let mut used = vec![false; rows];
            let mut pick = Vec::new();
            let bt = backtrack(&cands, &mut used, &mut pick);
            let km = kuhn(&cands, rows);
            prop_assert_eq!(bt, km.is_some());
            if let Some(m) = km {
                let mut seen = std::collections::HashSet::new();
                for (j, &r) in m.iter().enumerate() {
                    prop_assert!(cands[j].contains(&r));
                    prop_assert!(seen.insert(r));
                }
            }
        }
    }
}
