//! Performance and optimality analysis of the closed loop.

pub mod allocation;
pub mod h2;
pub mod lyapunov;
pub mod modal;

use thiserror::Error;

use crate::control::{InverterConfig, NoiseGains};
use crate::dynamics::{assemble_closed_loop, DynamicsError};
use crate::grid::PowerNetwork;

pub use allocation::{optimal_allocation, verify_steady_state_optimality, OptimalAllocation, OptimalityReport};
pub use h2::{h2_closed_form, h2_frequency_weighted, h2_gramian, h2_norm, ClosedFormKind, H2Result, HomogeneousParams};
pub use lyapunov::solve_lyapunov;
pub use modal::{modal_decompose, ModalDecomposition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("state matrix is not Hurwitz on the observable subspace (max real part {max_real:e})")]
    NotHurwitz { max_real: f64 },
    #[error("singular {0}")]
    Singular(&'static str),
    #[error("Lyapunov residual {residual:e} exceeds {bound:e}")]
    Residual { residual: f64, bound: f64 },
    #[error("output observes the rotation mode, which is not asymptotically stable")]
    UnobservableUnstable,
    #[error("derivative noise is present; the Gramian formula does not apply, use the frequency-weighted norm")]
    DerivativeNoise,
    #[error("frequency quadrature did not converge: partial value {partial:e}, tail bound {tail_bound:e}")]
    QuadratureNotConverged { partial: f64, tail_bound: f64 },
    #[error("parameters are not homogeneous across buses: {0}")]
    Heterogeneous(String),
    #[error("no participants in the allocation")]
    EmptyParticipants,
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

/// Squared H2 norm of a fleet. Homogeneous fleets go through the modal
/// decomposition (small per-mode systems, same value); others through the
/// full model.
pub fn h2_for_fleet(
    network: &PowerNetwork,
    configs: &[InverterConfig],
    noise: &[NoiseGains],
) -> Result<H2Result, AnalysisError> {
    match modal_decompose(network, configs, noise) {
        Ok(modal) => modal.total_norm(),
        Err(AnalysisError::Heterogeneous(_)) => h2_norm(&assemble_closed_loop(network, configs, noise)?),
        Err(e) => Err(e),
    }
}
