use serde::{Deserialize, Serialize};

use super::{AlignmentError, NeighborhoodDistribution};
use crate::matrix::{solve_dense, Matrix};
use crate::scalar::{log_sum_exp, Scalar};

/// Source / target marginals with a ground cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem<T> {
    p: Vec<T>,
    q: Vec<T>,
    cost: Matrix<T>,
}

impl<T: Scalar> TransportProblem<T> {
    pub fn new(
        p: NeighborhoodDistribution<T>,
        q: NeighborhoodDistribution<T>,
        cost: Matrix<T>,
    ) -> Result<Self, AlignmentError> {
        if cost.rows() != p.len() {
            return Err(AlignmentError::DimensionMismatch { expected: p.len(), got: cost.rows() });
        }
        if cost.cols() != q.len() {
            return Err(AlignmentError::DimensionMismatch { expected: q.len(), got: cost.cols() });
        }
        if !cost.all_finite() {
            return Err(AlignmentError::NonFinite("cost matrix"));
        }
        Ok(Self { p: p.probs().to_vec(), q: q.probs().to_vec(), cost })
    }

    /// Convenience constructor validating raw vectors as distributions.
    pub fn from_parts(p: Vec<T>, q: Vec<T>, cost: Matrix<T>) -> Result<Self, AlignmentError> {
        Self::new(NeighborhoodDistribution::new(p)?, NeighborhoodDistribution::new(q)?, cost)
    }

    pub fn p(&self) -> &[T] {
        &self.p
    }

    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn cost(&self) -> &Matrix<T> {
        &self.cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams<T> {
    pub reg: T,
    pub max_iters: usize,
    pub tolerance: T,
}

impl<T: Scalar> Default for SinkhornParams<T> {
    fn default() -> Self {
        Self { reg: T::lit(0.01), max_iters: 10_000, tolerance: T::lit(1e-6) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution<T> {
    /// Sharp transport value `<plan, cost>` (entropy term excluded).
    pub cost: T,
    pub plan: Matrix<T>,
    /// Source potential; `-inf` where the source marginal is zero.
    pub f: Vec<T>,
    /// Target potential; `-inf` where the target marginal is zero.
    pub g: Vec<T>,
    pub iterations: usize,
    /// Max absolute deviation of plan row and column sums from the marginals.
    pub residual: T,
}

/// Log-domain Sinkhorn iterations for entropic optimal transport.
///
/// Alternates `f_i = eps * (log p_i - LSE_j((g_j - C_ij) / eps))` and the
/// symmetric `g` update until the plan's marginal residual drops to
/// `tolerance`.
pub fn sinkhorn<T: Scalar>(
    problem: &TransportProblem<T>,
    params: &SinkhornParams<T>,
) -> Result<SinkhornSolution<T>, AlignmentError> {
    let eps = params.reg;
    if !(eps > T::zero() && eps.is_finite()) {
        return Err(AlignmentError::InvalidConfig("sinkhorn regularization must be positive".into()));
    }
    if params.max_iters == 0 {
        return Err(AlignmentError::InvalidConfig("max_iters must be positive".into()));
    }
    let (n, m) = (problem.p.len(), problem.q.len());
    let log_p: Vec<T> = problem.p.iter().map(|&v| v.ln()).collect();
    let log_q: Vec<T> = problem.q.iter().map(|&v| v.ln()).collect();
    let scaled = Matrix::from_fn(n, m, |i, j| -problem.cost[(i, j)] / eps);

    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); m];
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        for i in 0..n {
            f[i] = if log_p[i] == T::neg_infinity() {
                T::neg_infinity()
            } else {
                let lse = log_sum_exp((0..m).map(|j| g[j] / eps + scaled[(i, j)]));
                eps * (log_p[i] - lse)
            };
        }
        for j in 0..m {
            g[j] = if log_q[j] == T::neg_infinity() {
                T::neg_infinity()
            } else {
                let lse = log_sum_exp((0..n).map(|i| f[i] / eps + scaled[(i, j)]));
                eps * (log_q[j] - lse)
            };
        }
        // Columns are exact after the g update; the row residual drives stopping.
        let row_residual = (0..n)
            .map(|i| {
                let row: T = (0..m).map(|j| plan_entry(&f, &g, &scaled, eps, i, j)).sum();
                (row - problem.p[i]).abs()
            })
            .fold(T::zero(), T::max);
        if row_residual.is_nan() {
            return Err(AlignmentError::NonFinite("sinkhorn iterate"));
        }
        if row_residual <= params.tolerance {
            break;
        }
    }

    let plan = Matrix::from_fn(n, m, |i, j| plan_entry(&f, &g, &scaled, eps, i, j));
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let residual = rows
        .iter()
        .zip(&problem.p)
        .chain(cols.iter().zip(&problem.q))
        .map(|(&a, &b)| (a - b).abs())
        .fold(T::zero(), T::max);
    if !(residual <= params.tolerance) {
        return Err(AlignmentError::NonConvergence { iterations, residual: residual.to_f64_lossy() });
    }
    let cost = plan.dot(&problem.cost);
    Ok(SinkhornSolution { cost, plan, f, g, iterations, residual })
}

#[inline]
fn plan_entry<T: Scalar>(f: &[T], g: &[T], scaled: &Matrix<T>, eps: T, i: usize, j: usize) -> T {
    if f[i] == T::neg_infinity() || g[j] == T::neg_infinity() {
        return T::zero();
    }
    ((f[i] + g[j]) / eps + scaled[(i, j)]).exp()
}

/// Gradient of the sharp cost `<T*(p, q), C>` with respect to `p`, projected
/// onto the zero-sum tangent space of the simplex.
///
/// The entropic plan is `T_ij = exp((f_i + g_j - C_ij) / eps)`. Differentiating
/// its marginal constraints gives the sensitivity system
/// `[diag(p) T; T^T diag(q)] [df; dg] = eps [dp; 0]`, whose adjoint solve with
/// right-hand side `(sum_j C_ij T_ij, sum_i C_ij T_ij) / eps` yields the
/// gradient `eps * lambda`. The one-dimensional gauge `(f + c, g - c)` is fixed
/// by pinning the last target multiplier.
pub fn sinkhorn_gradient<T: Scalar>(
    problem: &TransportProblem<T>,
    params: &SinkhornParams<T>,
) -> Result<Vec<T>, AlignmentError> {
    if problem.p.iter().any(|&v| v <= T::zero()) {
        return Err(AlignmentError::ZeroMass);
    }
    let sol = sinkhorn(problem, params)?;
    let eps = params.reg;
    let n = problem.p.len();
    let support: Vec<usize> = (0..problem.q.len()).filter(|&j| problem.q[j] > T::zero()).collect();
    let k = support.len();
    // Unknowns: lambda (n) then mu over the target support minus the pinned last one.
    let dim = n + k - 1;
    let mut h = Matrix::zeros(dim, dim);
    let mut rhs = vec![T::zero(); dim];
    for i in 0..n {
        h[(i, i)] = problem.p[i];
        rhs[i] = support.iter().map(|&j| problem.cost[(i, j)] * sol.plan[(i, j)]).sum::<T>() / eps;
        for (c, &j) in support.iter().enumerate().take(k - 1) {
            h[(i, n + c)] = sol.plan[(i, j)];
            h[(n + c, i)] = sol.plan[(i, j)];
        }
    }
    for (c, &j) in support.iter().enumerate().take(k - 1) {
        h[(n + c, n + c)] = problem.q[j];
        rhs[n + c] = (0..n).map(|i| problem.cost[(i, j)] * sol.plan[(i, j)]).sum::<T>() / eps;
    }
    let solution = solve_dense(h, rhs).ok_or(AlignmentError::Singular)?;
    let mut grad: Vec<T> = solution[..n].iter().map(|&l| eps * l).collect();
    let mean = grad.iter().copied().sum::<T>() / T::lit(n as f64);
    for v in &mut grad {
        *v -= mean;
    }
    Ok(grad)
}
