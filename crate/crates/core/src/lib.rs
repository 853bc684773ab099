//! Rayleigh-Taylor growth rates of viscous incompressible flow in a box.

pub mod error;
pub mod evolution;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod growth;
pub mod krylov;
pub mod lobpcg;
pub mod ops;
pub mod profile;
pub mod projection;
pub mod separable;
pub mod snapshot;
pub mod spectra;
pub mod sum;

pub use error::{Error, Result};
pub use field::{ScalarField, VectorField};
pub use grid::{BoxDomain, Shape, StaggeredGrid};
pub use profile::{Background, Classification, DensityProfile, PhysicalParams};
pub use projection::{leray_project, Projector};
