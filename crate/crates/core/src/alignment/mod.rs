//! Neighborhood alignment between representation space and the label ontology.
//!
//! Each example induces two distributions over a memory bank: a softmax over
//! representation cosine similarities and a normalization of ontology target
//! similarities. The alignment loss is the entropic optimal-transport cost
//! between them under the ground cost `1 - t_jk`.

mod bank;
mod loss;
mod sinkhorn;

pub use bank::{BankEntry, MemoryBank};
pub use loss::{alignment_loss, alignment_losses, total_loss, TrainingLossBreakdown};
pub use sinkhorn::{sinkhorn, sinkhorn_gradient, SinkhornParams, SinkhornSolution, TransportProblem};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::ontology::{target_similarity_active, OntologyError, PriorMatrix};
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("memory bank is frozen")]
    BankFrozen,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("representation `{0}` has zero norm")]
    ZeroNorm(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("sinkhorn did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("gradient requires strictly positive source marginal")]
    ZeroMass,
    #[error("sensitivity system is singular")]
    Singular,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

/// Hyperparameters of the alignment objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig<T> {
    /// Softmax temperature of the representation neighborhood.
    pub tau: T,
    /// Entropic regularization of the Sinkhorn solver.
    pub sinkhorn_reg: T,
    /// Floor added to the ontology-neighborhood normalizer.
    pub eps0: T,
    pub lambda_ont: T,
    pub max_iters: usize,
    /// Marginal residual at which Sinkhorn stops.
    pub tolerance: T,
    /// Online banks contribute no loss until this fraction of capacity is filled.
    pub online_min_fill: T,
}

impl<T: Scalar> Default for AlignmentConfig<T> {
    fn default() -> Self {
        Self {
            tau: T::lit(0.1),
            sinkhorn_reg: T::lit(0.01),
            eps0: T::lit(1e-8),
            lambda_ont: T::lit(0.5),
            max_iters: 10_000,
            tolerance: T::lit(1e-6),
            online_min_fill: T::lit(0.1),
        }
    }
}

impl<T: Scalar> AlignmentConfig<T> {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        let positive = [("tau", self.tau), ("sinkhorn_reg", self.sinkhorn_reg), ("eps0", self.eps0), ("tolerance", self.tolerance)];
        for (name, v) in positive {
            if !(v > T::zero() && v.is_finite()) {
                return Err(AlignmentError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_ont >= T::zero() && self.lambda_ont.is_finite()) {
            return Err(AlignmentError::InvalidConfig("lambda_ont must be nonnegative".into()));
        }
        if self.max_iters == 0 {
            return Err(AlignmentError::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.online_min_fill >= T::zero() && self.online_min_fill <= T::one()) {
            return Err(AlignmentError::InvalidConfig("online_min_fill must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sinkhorn_params(&self) -> SinkhornParams<T> {
        SinkhornParams { reg: self.sinkhorn_reg, max_iters: self.max_iters, tolerance: self.tolerance }
    }
}

/// Prompt-level hidden representation of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationVector<T> {
    pub example_id: String,
    pub values: Vec<T>,
}

impl<T: Scalar> RepresentationVector<T> {
    pub fn new(example_id: impl Into<String>, values: Vec<T>) -> Result<Self, AlignmentError> {
        let example_id = example_id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AlignmentError::NonFinite("representation"));
        }
        if norm(&values) == T::zero() {
            return Err(AlignmentError::ZeroNorm(example_id));
        }
        Ok(Self { example_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub(crate) fn unit(&self) -> Vec<T> {
        let n = norm(&self.values);
        self.values.iter().map(|&v| v / n).collect()
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Cosine similarity of two representations.
pub fn representation_similarity<T: Scalar>(
    hi: &RepresentationVector<T>,
    hj: &RepresentationVector<T>,
) -> Result<T, AlignmentError> {
    if hi.dim() != hj.dim() {
        return Err(AlignmentError::DimensionMismatch { expected: hi.dim(), got: hj.dim() });
    }
    let (ni, nj) = (norm(&hi.values), norm(&hj.values));
    if ni == T::zero() {
        return Err(AlignmentError::ZeroNorm(hi.example_id.clone()));
    }
    if nj == T::zero() {
        return Err(AlignmentError::ZeroNorm(hj.example_id.clone()));
    }
    Ok(unit_dot(&hi.unit(), &hj.unit()))
}

fn unit_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let d: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    d.max(-T::one()).min(T::one())
}

/// Probability vector over memory-bank entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> NeighborhoodDistribution<T> {
    /// Sum tolerance: `1e-9`, widened to a few ulps per entry for `f32`.
    pub fn sum_tolerance(n: usize) -> T {
        T::lit(1e-9).max(T::epsilon() * T::lit(4.0 * n.max(1) as f64))
    }

    pub fn new(probs: Vec<T>) -> Result<Self, AlignmentError> {
        if probs.is_empty() {
            return Err(AlignmentError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(AlignmentError::NonFinite("distribution"));
        }
        if probs.iter().any(|&p| p < T::zero()) {
            return Err(AlignmentError::InvalidDistribution("negative entry".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > Self::sum_tolerance(probs.len()) {
            return Err(AlignmentError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![T::one() / T::lit(n as f64); n] }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Softmax of `r_ij / tau` over all bank entries (max-subtracted).
pub fn rep_neighborhood<T: Scalar>(
    hi: &RepresentationVector<T>,
    bank: &MemoryBank<T>,
    tau: T,
) -> Result<NeighborhoodDistribution<T>, AlignmentError> {
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    if hi.dim() != bank.rep_dim() {
        return Err(AlignmentError::DimensionMismatch { expected: bank.rep_dim(), got: hi.dim() });
    }
    if !(tau > T::zero()) {
        return Err(AlignmentError::InvalidConfig("tau must be positive".into()));
    }
    let unit = hi.unit();
    let logits: Vec<T> = bank.entries().map(|e| unit_dot(&unit, e.unit()) / tau).collect();
    Ok(softmax(&logits))
}

fn softmax<T: Scalar>(logits: &[T]) -> NeighborhoodDistribution<T> {
    let lse = log_sum_exp(logits.iter().copied());
    let mut probs: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    let total: T = probs.iter().copied().sum();
    for p in &mut probs {
        *p /= total;
    }
    NeighborhoodDistribution { probs }
}

/// `t_ij / (sum_l t_il + eps0)`, renormalized to sum to one; uniform when all
/// similarities vanish.
pub fn ont_neighborhood<T: Scalar>(
    oi: &crate::ontology::OntologyVector,
    bank: &MemoryBank<T>,
    prior: &PriorMatrix<T>,
    eps0: T,
) -> Result<NeighborhoodDistribution<T>, AlignmentError> {
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    if oi.dim() != prior.dim() {
        return Err(OntologyError::DimensionMismatch { expected: prior.dim(), got: oi.dim() }.into());
    }
    let active = oi.active();
    let sims: Vec<T> =
        bank.entries().map(|e| target_similarity_active(&active, e.active(), prior)).collect();
    Ok(normalize_similarities(&sims, eps0))
}

pub(crate) fn normalize_similarities<T: Scalar>(sims: &[T], eps0: T) -> NeighborhoodDistribution<T> {
    let total: T = sims.iter().copied().sum();
    if total == T::zero() {
        return NeighborhoodDistribution::uniform(sims.len());
    }
    let denom = total + eps0;
    let mut probs: Vec<T> = sims.iter().map(|&t| t / denom).collect();
    let mass: T = probs.iter().copied().sum();
    for p in &mut probs {
        *p /= mass;
    }
    NeighborhoodDistribution { probs }
}

/// Ground cost `C_jk = 1 - t_jk` over the bank's ontology vectors.
pub fn transport_cost<T: Scalar>(
    bank: &MemoryBank<T>,
    prior: &PriorMatrix<T>,
) -> Result<Matrix<T>, AlignmentError> {
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    if bank.ont_dim() != prior.dim() {
        return Err(OntologyError::DimensionMismatch { expected: prior.dim(), got: bank.ont_dim() }.into());
    }
    let entries: Vec<&BankEntry<T>> = bank.entries().collect();
    let m = entries.len();
    let mut cost = Matrix::zeros(m, m);
    for j in 0..m {
        for k in j..m {
            let t = target_similarity_active(entries[j].active(), entries[k].active(), prior);
            let c = T::one() - t;
            cost[(j, k)] = c;
            cost[(k, j)] = c;
        }
    }
    Ok(cost)
}
