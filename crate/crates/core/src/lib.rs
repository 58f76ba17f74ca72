//! Local bifurcation detection from trajectory data.
//!
//! A polynomial map `h(x) = Θᵀφ(x)` is fitted so that sampled orbits of
//! `ẋ = f(x; α)` satisfy `h(x_k) ≈ exp(Aτ) h(x_{k-1})` for a reference
//! linear system `A`. Near the reference parameter the fit succeeds; once the
//! equilibrium bifurcates no homeomorphism can match the linear dynamics and
//! the scaled matching loss grows.

pub mod basis;
pub mod conjugacy;
pub mod detection;
pub mod dynamics;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod rng;
pub mod sampling;
pub mod tuning;

pub use basis::PolyBasis;
pub use conjugacy::{CoefficientMatrix, FitOptions, FitResult, RegressionData};
pub use detection::{DetectionCurve, DetectionOptions};
pub use dynamics::{ParamSystem, Provenance, TargetLinearDynamics};
pub use error::{Error, Result};
pub use koopman::KoopmanScan;
pub use sampling::{BoxDomain, OrbitDataset};
