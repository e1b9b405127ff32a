//! Modal decomposition of homogeneous fleets.
//!
//! With identical buses, the orthonormal eigenvectors `U` of the Laplacian
//! decouple the closed loop into one small subsystem per eigenvalue. Noise
//! channels transform by `Uᵀ` too, which preserves unit intensity, so squared
//! H2 norms add across modes.

use nalgebra::{DMatrix, SymmetricEigen};

use super::h2::{h2_norm, H2Result};
use super::AnalysisError;
use crate::control::{InverterConfig, NoiseGains};
use crate::dynamics::{assemble_from_parts, check_inputs, StateSpaceModel};
use crate::grid::{build_laplacian, GeneratorParams, PowerNetwork};

#[derive(Debug, Clone)]
pub struct ModalDecomposition {
    /// Laplacian eigenvalues in ascending order; the first is 0.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns; the first is `1/√n`.
    pub transform: DMatrix<f64>,
    /// One subsystem per eigenvalue, with the scalar Laplacian `[λ_i]`.
    pub modes: Vec<StateSpaceModel>,
}

impl ModalDecomposition {
    /// Squared H2 norm of each mode.
    pub fn mode_norms(&self) -> Result<Vec<H2Result>, AnalysisError> {
        self.modes.iter().map(h2_norm).collect()
    }

    /// Sum of the modal squared norms; infinite if any mode is.
    pub fn total_norm(&self) -> Result<H2Result, AnalysisError> {
        let mut total = 0.0;
        let mut infinite = None;
        for r in self.mode_norms()? {
            match r {
                H2Result::Finite { value } => total += value,
                inf @ H2Result::Infinite { .. } => {
                    infinite.get_or_insert(inf);
                }
            }
        }
        Ok(infinite.unwrap_or(H2Result::finite(total)))
    }
}

fn require_homogeneous(
    gens: &[GeneratorParams],
    configs: &[InverterConfig],
    noise: &[NoiseGains],
) -> Result<(), AnalysisError> {
    if let Some(i) = gens.iter().position(|g| g != &gens[0]) {
        return Err(AnalysisError::Heterogeneous(format!(
            "generator parameters of bus {i} differ from bus 0"
        )));
    }
    // Set points shift the steady state but not the deviation dynamics.
    if let Some(i) = configs.iter().position(|c| c.mode != configs[0].mode) {
        return Err(AnalysisError::Heterogeneous(format!(
            "inverter mode of bus {i} differs from bus 0"
        )));
    }
    if let Some(i) = noise.iter().position(|k| k != &noise[0]) {
        return Err(AnalysisError::Heterogeneous(format!(
            "noise gains of bus {i} differ from bus 0"
        )));
    }
    Ok(())
}

pub fn modal_decompose(
    network: &PowerNetwork,
    configs: &[InverterConfig],
    noise: &[NoiseGains],
) -> Result<ModalDecomposition, AnalysisError> {
    check_inputs(network, configs, Some(noise)).map_err(AnalysisError::from)?;
    let n = network.len();
    let gens: Vec<GeneratorParams> = network
        .buses
        .iter()
        .map(|b| *b.generator_params().expect("checked"))
        .collect();
    require_homogeneous(&gens, configs, noise)?;

    let l = build_laplacian(network).map_err(|e| AnalysisError::Dynamics(e.into()))?;
    let eig = SymmetricEigen::new(l.matrix().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut transform = DMatrix::zeros(n, n);
    transform.column_mut(0).fill(1.0 / (n as f64).sqrt());
    // Re-orthogonalize the rest against the exact consensus vector.
    for (k, &src) in order.iter().enumerate().skip(1) {
        let mut v = eig.eigenvectors.column(src).into_owned();
        for j in 0..k {
            let u = transform.column(j).into_owned();
            v -= &u * u.dot(&v);
        }
        v /= v.norm();
        transform.set_column(k, &v);
    }
    let mut eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    eigenvalues[0] = 0.0;

    let modes = eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            assemble_from_parts(
                &DMatrix::from_element(1, 1, lambda),
                &gens[..1],
                &configs[..1],
                &noise[..1],
                vec![i],
                i == 0,
            )
        })
        .collect();

    Ok(ModalDecomposition {
        eigenvalues,
        transform,
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::h2::h2_gramian;
    use crate::dynamics::assemble_closed_loop;
    use crate::grid::{Bus, Line};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn path(n: usize, b: f64) -> PowerNetwork {
        PowerNetwork::new(
            (0..n).map(|i| Bus::generator(i, 1.0, 0.1, 15.0, 0.0)).collect(),
            (1..n).map(|i| Line::new(i - 1, i, b)).collect(),
        )
    }

    #[test]
    fn single_bus() {
        let net = path(1, 1.0);
        let m = modal_decompose(&net, &[InverterConfig::droop(0.0, 15.0)], &[NoiseGains::default()]).unwrap();
        assert_eq!(m.eigenvalues, vec![0.0]);
        assert_eq!(m.modes.len(), 1);
    }

    #[test]
    fn two_bus_eigenvalues() {
        let net = path(2, 1.0);
        let m = modal_decompose(
            &net,
            &[InverterConfig::constant_power(0.0); 2],
            &[NoiseGains::default(); 2],
        )
        .unwrap();
        assert!(m.eigenvalues[0].abs() < 1e-15);
        assert_relative_eq!(m.eigenvalues[1], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn transform_diagonalizes() {
        let net = path(5, 1.3);
        let m = modal_decompose(
            &net,
            &[InverterConfig::droop(0.0, 15.0); 5],
            &[NoiseGains::default(); 5],
        )
        .unwrap();
        let u = &m.transform;
        assert!((u.transpose() * u - DMatrix::identity(5, 5)).amax() < 1e-10);
        let l = build_laplacian(&net).unwrap();
        let d = u.transpose() * l.matrix() * u;
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { m.eigenvalues[i] } else { 0.0 };
                assert!((d[(i, j)] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn modal_norms_sum_to_full_norm() {
        let net = path(5, 2.0);
        for cfg in [
            InverterConfig::droop(0.0, 15.0),
            InverterConfig::idroop(0.0, 15.0, 6.0, 0.9),
            InverterConfig::constant_power(0.0),
        ] {
            let configs = vec![cfg; 5];
            let noise = vec![NoiseGains::new(0.1, 5.0, 0.0); 5];
            let full = h2_gramian(&assemble_closed_loop(&net, &configs, &noise).unwrap())
                .unwrap()
                .value()
                .unwrap();
            let modal = modal_decompose(&net, &configs, &noise)
                .unwrap()
                .total_norm()
                .unwrap()
                .value()
                .unwrap();
            assert_relative_eq!(modal, full, max_relative = 1e-8);
        }
    }

    #[test]
    fn rejects_heterogeneous() {
        let net = path(2, 1.0);
        let configs = [InverterConfig::droop(0.0, 15.0), InverterConfig::droop(0.0, 10.0)];
        assert!(matches!(
            modal_decompose(&net, &configs, &[NoiseGains::default(); 2]),
            Err(AnalysisError::Heterogeneous(_))
        ));
    }

    proptest! {
        #[test]
        fn transform_is_orthonormal_and_diagonalizing(net in crate::testing::homogeneous_network(7)) {
            let n = net.len();
            let m = modal_decompose(&net, &vec![InverterConfig::droop(0.0, 15.0); n], &vec![NoiseGains::default(); n]).unwrap();
            let u = &m.transform;
            let ortho = (u.transpose() * u - DMatrix::<f64>::identity(n, n)).amax();
            prop_assert!(ortho <= 1e-10, "orthonormality error {ortho:e}");
            let l = build_laplacian(&net).unwrap();
            let mut d = u.transpose() * l.matrix() * u;
            for i in 0..n {
                prop_assert!((d[(i, i)] - m.eigenvalues[i]).abs() <= 1e-9 * l.matrix().amax());
                d[(i, i)] = 0.0;
            }
            prop_assert!(d.amax() <= 1e-9 * l.matrix().amax(), "off-diagonal {:e}", d.amax());
        }
    }
}
