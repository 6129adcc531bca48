use std::collections::VecDeque;

use super::{AlignmentError, RepresentationVector};
use crate::ontology::OntologyVector;
use crate::scalar::Scalar;

/// A stored `(representation, ontology vector)` pair with cached unit vector
/// and active label indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry<T> {
    representation: RepresentationVector<T>,
    ontology: OntologyVector,
    unit: Vec<T>,
    active: Vec<usize>,
}

impl<T: Scalar> BankEntry<T> {
    pub fn new(representation: RepresentationVector<T>, ontology: OntologyVector) -> Self {
        let unit = representation.unit();
        let active = ontology.active();
        Self { representation, ontology, unit, active }
    }

    pub fn representation(&self) -> &RepresentationVector<T> {
        &self.representation
    }

    pub fn ontology(&self) -> &OntologyVector {
        &self.ontology
    }

    pub(crate) fn unit(&self) -> &[T] {
        &self.unit
    }

    pub(crate) fn active(&self) -> &[usize] {
        &self.active
    }
}

/// Comparison population for neighborhood alignment.
///
/// A prefilled bank is frozen and sized to its contents. An online bank
/// appends FIFO up to its capacity, evicting the oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    entries: VecDeque<BankEntry<T>>,
    frozen: bool,
    capacity: usize,
    rep_dim: usize,
    ont_dim: usize,
}

impl<T: Scalar> MemoryBank<T> {
    /// Builds a frozen bank holding exactly `examples`.
    pub fn prefill(
        examples: Vec<(RepresentationVector<T>, OntologyVector)>,
    ) -> Result<Self, AlignmentError> {
        let Some((first_rep, first_ont)) = examples.first() else {
            return Err(AlignmentError::EmptyBank);
        };
        let (rep_dim, ont_dim) = (first_rep.dim(), first_ont.dim());
        let mut entries = VecDeque::with_capacity(examples.len());
        for (rep, ont) in examples {
            check_dims(rep_dim, ont_dim, &rep, &ont)?;
            entries.push_back(BankEntry::new(rep, ont));
        }
        let capacity = entries.len();
        Ok(Self { entries, frozen: true, capacity, rep_dim, ont_dim })
    }

    /// Empty, mutable bank; dimensions are fixed by the first push.
    pub fn online(capacity: usize) -> Self {
        Self { entries: VecDeque::new(), frozen: false, capacity: capacity.max(1), rep_dim: 0, ont_dim: 0 }
    }

    pub fn push(&mut self, rep: RepresentationVector<T>, ont: OntologyVector) -> Result<(), AlignmentError> {
        if self.frozen {
            return Err(AlignmentError::BankFrozen);
        }
        if self.entries.is_empty() {
            self.rep_dim = rep.dim();
            self.ont_dim = ont.dim();
        } else {
            check_dims(self.rep_dim, self.ont_dim, &rep, &ont)?;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry::new(rep, ont));
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn ont_dim(&self) -> usize {
        self.ont_dim
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BankEntry<T>> {
        self.entries.iter()
    }

    /// Frozen banks are always active; online banks once `min_fill` of capacity is used.
    pub fn is_active(&self, min_fill: T) -> bool {
        if self.is_empty() {
            return false;
        }
        self.frozen
            || T::lit(self.entries.len() as f64) >= (min_fill * T::lit(self.capacity as f64)).ceil()
    }
}

fn check_dims<T: Scalar>(
    rep_dim: usize,
    ont_dim: usize,
    rep: &RepresentationVector<T>,
    ont: &OntologyVector,
) -> Result<(), AlignmentError> {
    if rep.dim() != rep_dim {
        return Err(AlignmentError::DimensionMismatch { expected: rep_dim, got: rep.dim() });
    }
    if ont.dim() != ont_dim {
        return Err(AlignmentError::DimensionMismatch { expected: ont_dim, got: ont.dim() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, v: f64) -> (RepresentationVector<f64>, OntologyVector) {
        (RepresentationVector::new(id, vec![v, 1.0]).unwrap(), OntologyVector::from_active(3, &[0]))
    }

    #[test]
    fn prefill_sizes_to_examples_and_freezes() {
        let examples: Vec<_> = (0..607).map(|i| pair(&i.to_string(), i as f64)).collect();
        let mut bank = MemoryBank::prefill(examples).unwrap();
        assert_eq!(bank.len(), 607);
        assert_eq!(bank.capacity(), 607);
        assert!(bank.is_frozen());
        let (r, o) = pair("late", 1.0);
        assert_eq!(bank.push(r, o), Err(AlignmentError::BankFrozen));
        assert_eq!(bank.len(), 607);
    }

    #[test]
    fn prefill_rejects_mixed_dimensions() {
        let bad = (RepresentationVector::new("x", vec![1.0]).unwrap(), OntologyVector::from_active(3, &[0]));
        assert!(matches!(
            MemoryBank::prefill(vec![pair("a", 1.0), bad]),
            Err(AlignmentError::DimensionMismatch { .. })
        ));
        assert_eq!(MemoryBank::<f64>::prefill(vec![]), Err(AlignmentError::EmptyBank));
    }

    #[test]
    fn online_bank_is_fifo() {
        let mut bank = MemoryBank::online(2);
        assert!(!bank.is_active(0.1));
        for i in 0..3 {
            let (r, o) = pair(&format!("e{i}"), i as f64);
            bank.push(r, o).unwrap();
        }
        let ids: Vec<_> = bank.entries().map(|e| e.representation().example_id.clone()).collect();
        assert_eq!(ids, ["e1", "e2"]);
        assert!(bank.is_active(1.0));
    }

    #[test]
    fn activation_threshold() {
        let mut bank = MemoryBank::online(20);
        let (r, o) = pair("a", 1.0);
        bank.push(r, o).unwrap();
        assert!(!bank.is_active(0.1));
        let (r, o) = pair("b", 2.0);
        bank.push(r, o).unwrap();
        assert!(bank.is_active(0.1));
    }
}
