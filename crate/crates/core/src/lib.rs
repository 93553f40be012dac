//! Harmonic functions on finitely presented rooted trees, the
//! convergence-in-probability metric on boundary functions, and
//! constructive builders whose level projections visit dense target
//! families with controlled index densities.

pub mod error;
pub mod rational;
pub mod scalar;
pub mod tree;
pub mod measure;
pub mod harmonic;
pub mod density;
pub mod schedule;
pub mod sweep;
pub mod builder;
pub mod span;

pub use error::{Error, Result};
pub use rational::{CRat, Rational};
pub use scalar::{Mode, Scalar};
pub use tree::{TreeConfig, VertexId};
pub use measure::{dense_family, SimpleFunction};
pub use harmonic::{CorrectionPolicy, HarmonicTruncation};
pub use density::{DensityReport, IndexSet};
