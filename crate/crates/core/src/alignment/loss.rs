use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    ont_neighborhood, rep_neighborhood, sinkhorn, transport_cost, AlignmentConfig, AlignmentError,
    MemoryBank, RepresentationVector, TransportProblem,
};
use crate::ontology::{OntologyVector, PriorMatrix};
use crate::scalar::Scalar;

/// Supervised loss, ontology alignment loss and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLossBreakdown<T> {
    pub sft_loss: T,
    pub ont_loss: T,
    pub lambda_ont: T,
    pub total: T,
}

pub fn total_loss<T: Scalar>(
    sft_loss: T,
    ont_loss: T,
    lambda_ont: T,
) -> Result<TrainingLossBreakdown<T>, AlignmentError> {
    if !(sft_loss.is_finite() && ont_loss.is_finite() && lambda_ont.is_finite()) {
        return Err(AlignmentError::NonFinite("loss term"));
    }
    Ok(TrainingLossBreakdown { sft_loss, ont_loss, lambda_ont, total: sft_loss + lambda_ont * ont_loss })
}

/// Per-example transport costs between representation and ontology
/// neighborhoods, in batch order. An online bank below its activation fill
/// yields zeros.
pub fn alignment_losses<T: Scalar>(
    batch: &[(RepresentationVector<T>, OntologyVector)],
    bank: &MemoryBank<T>,
    prior: &PriorMatrix<T>,
    config: &AlignmentConfig<T>,
) -> Result<Vec<T>, AlignmentError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    if !bank.is_active(config.online_min_fill) {
        return Ok(vec![T::zero(); batch.len()]);
    }
    let cost = transport_cost(bank, prior)?;
    let params = config.sinkhorn_params();
    batch
        .par_iter()
        .map(|(rep, ont)| {
            let p = rep_neighborhood(rep, bank, config.tau)?;
            let q = ont_neighborhood(ont, bank, prior, config.eps0)?;
            let problem = TransportProblem::new(p, q, cost.clone())?;
            Ok(sinkhorn(&problem, &params)?.cost)
        })
        .collect()
}

/// Mean transport cost over the batch.
pub fn alignment_loss<T: Scalar>(
    batch: &[(RepresentationVector<T>, OntologyVector)],
    bank: &MemoryBank<T>,
    prior: &PriorMatrix<T>,
    config: &AlignmentConfig<T>,
) -> Result<T, AlignmentError> {
    let losses = alignment_losses(batch, bank, prior, config)?;
    let n = T::lit(losses.len() as f64);
    Ok(losses.into_iter().sum::<T>() / n)
}
