//! Minimum-cost one-to-one assignment on rectangular cost matrices.

use crate::autodiff::Mat;

/// Optimal assignment of size `min(rows, cols)` as `(row, col)` pairs sorted
/// by row. Among optimal assignments the lexicographically smallest pair list
/// is returned, so ties resolve deterministically.
pub fn hungarian_match(cost: &Mat) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let best = min_cost(cost, &rows, &cols).0;
    let tol = 1e-9 * (1.0 + best.abs());
    let size = n.min(m);

    // Walk rows in order, fixing the smallest column that keeps the optimum
    // reachable. A row may stay unassigned only when rows outnumber columns.
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::with_capacity(size);
    let mut free_cols = cols;
    for r in 0..n {
        if pairs.len() == size {
            break;
        }
        let rest: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for (ci, &c) in free_cols.iter().enumerate() {
            let mut remaining = free_cols.clone();
            remaining.remove(ci);
            let need = size - pairs.len() - 1;
            if rest.len() < need {
                continue;
            }
            let sub = if need == 0 { 0.0 } else { min_cost(cost, &rest, &remaining).0 };
            if (fixed_cost + cost.at(r, c) + sub - best).abs() <= tol {
                chosen = Some(ci);
                break;
            }
        }
        if let Some(ci) = chosen {
            let c = free_cols.remove(ci);
            fixed_cost += cost.at(r, c);
            pairs.push((r, c));
        }
    }
    debug_assert_eq!(pairs.len(), size);
    pairs
}

/// Sum of `cost[r][c]` over the pairs.
pub fn assignment_cost(cost: &Mat, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.at(r, c)).sum()
}

/// Optimal assignment restricted to the given row and column subsets, using
/// the shortest-augmenting-path method with potentials. Returns the cost and
/// the pairs in original indices.
fn min_cost(cost: &Mat, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
    let transpose = rows.len() > cols.len();
    let (a, b) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transpose { cost.at(b[j], a[i]) } else { cost.at(a[i], b[j]) };
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based potentials; p[j] = row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            let (i, jj) = (a[p[j] - 1], b[j - 1]);
            if transpose {
                (jj, i)
            } else {
                (i, jj)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost.at(r, c)).sum();
    (total, pairs)
}
