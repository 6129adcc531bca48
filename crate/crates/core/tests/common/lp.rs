//! Exact discrete optimal transport by linear programming.
//!
//! `simplex_ot` runs a two-phase tableau simplex with Bland's rule on
//! `min <C, X>` subject to row sums `p`, column sums `q`, `X >= 0`.
//! `vertex_ot` enumerates every basis of size `n + m - 1` and is only
//! practical for tiny problems; it cross-checks the simplex.

const EPS: f64 = 1e-12;

pub fn simplex_ot(p: &[f64], q: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (p.len(), q.len());
    let vars = n * m;
    // Drop the last column constraint (implied by the others).
    let rows = n + m - 1;
    let mut a = vec![vec![0.0; vars]; rows];
    let mut b = vec![0.0; rows];
    for i in 0..n {
        for j in 0..m {
            a[i][i * m + j] = 1.0;
        }
        b[i] = p[i];
    }
    for j in 0..m - 1 {
        for i in 0..n {
            a[n + j][i * m + j] = 1.0;
        }
        b[n + j] = q[j];
    }
    let c: Vec<f64> = (0..vars).map(|k| cost[k / m][k % m]).collect();
    solve_standard_form(&a, &b, &c)
}

/// `min c^T x, A x = b, x >= 0` with `b >= 0`, via phase-1 artificials.
fn solve_standard_form(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
    let rows = a.len();
    let vars = c.len();
    let width = vars + rows + 1;
    let mut t = vec![vec![0.0; width]; rows];
    for r in 0..rows {
        t[r][..vars].copy_from_slice(&a[r]);
        t[r][vars + r] = 1.0;
        t[r][width - 1] = b[r];
    }
    let mut basis: Vec<usize> = (vars..vars + rows).collect();

    // Phase 1: minimize the sum of artificials.
    let mut obj1 = vec![0.0; width];
    for r in 0..rows {
        obj1[vars + r] = 1.0;
    }
    run_simplex(&mut t, &mut basis, &obj1, width - 1);
    let infeasibility: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= vars)
        .map(|(r, _)| t[r][width - 1])
        .sum();
    assert!(infeasibility < 1e-9, "oracle LP infeasible");
    // Drive zero-level artificials out of the basis where possible.
    for r in 0..rows {
        if basis[r] >= vars {
            if let Some(col) = (0..vars).find(|&k| t[r][k].abs() > 1e-9) {
                pivot(&mut t, &mut basis, r, col);
            }
        }
    }
    // Phase 2 over original columns only.
    let mut obj2 = vec![0.0; width];
    obj2[..vars].copy_from_slice(c);
    run_simplex(&mut t, &mut basis, &obj2, vars);
    basis
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < vars)
        .map(|(r, &v)| c[v] * t[r][width - 1])
        .sum()
}

fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], obj: &[f64], enter_limit: usize) {
    let width = t[0].len();
    loop {
        // Reduced costs with Bland's rule: lowest index with negative reduced cost.
        let entering = (0..enter_limit).find(|&k| {
            if basis.contains(&k) {
                return false;
            }
            let reduced = obj[k] - (0..t.len()).map(|r| obj[basis[r]] * t[r][k]).sum::<f64>();
            reduced < -EPS
        });
        let Some(k) = entering else { return };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..t.len() {
            if t[r][k] > EPS {
                let ratio = t[r][width - 1] / t[r][k];
                match leave {
                    Some((lr, best))
                        if ratio > best + EPS || ((ratio - best).abs() <= EPS && basis[r] > basis[lr]) => {}
                    _ => leave = Some((r, ratio)),
                }
            }
        }
        let (r, _) = leave.expect("transport LP is bounded");
        pivot(t, basis, r, k);
    }
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, k: usize) {
    let pv = t[r][k];
    for v in t[r].iter_mut() {
        *v /= pv;
    }
    let pivot_row = t[r].clone();
    for (rr, row) in t.iter_mut().enumerate() {
        if rr != r {
            let f = row[k];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * y;
                }
            }
        }
    }
    basis[r] = k;
}

/// Brute-force basic-feasible-solution enumeration.
pub fn vertex_ot(p: &[f64], q: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (p.len(), q.len());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(k);
    enumerate(&cells, k, 0, &mut chosen, &mut |subset| {
        if let Some(x) = solve_basis(p, q, subset) {
            if x.iter().all(|&v| v >= -1e-12) {
                let value: f64 = subset.iter().zip(&x).map(|(&(i, j), &v)| cost[i][j] * v).sum();
                best = best.min(value);
            }
        }
    });
    best
}

fn enumerate(
    cells: &[(usize, usize)],
    k: usize,
    start: usize,
    chosen: &mut Vec<(usize, usize)>,
    visit: &mut dyn FnMut(&[(usize, usize)]),
) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    for idx in start..cells.len() {
        chosen.push(cells[idx]);
        enumerate(cells, k, idx + 1, chosen, visit);
        chosen.pop();
    }
}

fn solve_basis(p: &[f64], q: &[f64], subset: &[(usize, usize)]) -> Option<Vec<f64>> {
    let (n, m) = (p.len(), q.len());
    let k = subset.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (col, &(i, j)) in subset.iter().enumerate() {
        a[i][col] = 1.0;
        if j < m - 1 {
            a[n + j][col] = 1.0;
        }
    }
    for i in 0..n {
        a[i][k] = p[i];
    }
    for j in 0..m - 1 {
        a[n + j][k] = q[j];
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..k).map(|r| a[r][k] / a[r][r]).collect())
}
