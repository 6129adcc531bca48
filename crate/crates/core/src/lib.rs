//! Ontology-aligned extraction of coded, evidence-grounded annotations.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`.

pub mod alignment;
pub mod checkpoint;
pub mod corpus;
pub mod gateway;
pub mod matrix;
pub mod metrics;
pub mod ontology;
pub mod preference;
pub mod recovery;
pub mod refine;
pub mod scalar;
pub mod schema;
pub mod text;

pub use scalar::Scalar;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Matrix = matrix::Matrix<f64>;
pub type PriorMatrix = ontology::PriorMatrix<f64>;
pub type TransportProblem = alignment::TransportProblem<f64>;
pub type SinkhornParams = alignment::SinkhornParams<f64>;
pub type SinkhornSolution = alignment::SinkhornSolution<f64>;
pub type AlignmentConfig = alignment::AlignmentConfig<f64>;
pub type RepresentationVector = alignment::RepresentationVector<f64>;
pub type NeighborhoodDistribution = alignment::NeighborhoodDistribution<f64>;
pub type BankEntry = alignment::BankEntry<f64>;
pub type MemoryBank = alignment::MemoryBank<f64>;
pub type TrainingLossBreakdown = alignment::TrainingLossBreakdown<f64>;
pub type NamedVectorMap = checkpoint::NamedVectorMap<f64>;
