//! Closed-loop linear models of a generator-only (Kron-reduced) network with
//! an inverter at every bus, the synchronous frequency and the full steady
//! state.
//!
//! State ordering is `[δθ (n), δω (n), δx (one per iDroop bus, in bus order)]`.
//! Inputs are grouped in three blocks of `n` columns: injection noise `w1`,
//! frequency-measurement noise `w2`, and derivative-measurement noise `w3`.
//! `w3` is the time derivative of `w2`; the model stores its column block
//! separately and leaves the correlation to the norm computations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::control::{ControlError, InverterConfig, InverterMode, NoiseGains};
use crate::grid::{build_laplacian, GeneratorParams, GridError, PowerNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("bus {0} is a load bus; Kron-reduce the network before building dynamics")]
    LoadBus(usize),
    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("total frequency damping is zero; synchronous frequency is undefined")]
    ZeroDamping,
    #[error("angle equation could not be solved (reduced Laplacian not positive definite)")]
    SingularAngles,
}

/// Where each bus's states live in the state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub n_buses: usize,
    /// Buses that carry an iDroop state, ascending.
    pub idroop_buses: Vec<usize>,
    /// Identifiers used in labels (original bus ids when reduced).
    pub bus_labels: Vec<usize>,
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        2 * self.n_buses + self.idroop_buses.len()
    }

    pub fn theta(&self, bus: usize) -> usize {
        bus
    }

    pub fn omega(&self, bus: usize) -> usize {
        self.n_buses + bus
    }

    pub fn x(&self, bus: usize) -> Option<usize> {
        self.idroop_buses
            .iter()
            .position(|&b| b == bus)
            .map(|k| 2 * self.n_buses + k)
    }

    pub fn state_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.bus_labels.iter().map(|id| format!("theta_dev_{id}")).collect();
        out.extend(self.bus_labels.iter().map(|id| format!("omega_dev_{id}")));
        out.extend(self.idroop_buses.iter().map(|&b| format!("x_{}", self.bus_labels[b])));
        out
    }

    pub fn input_labels(&self) -> Vec<String> {
        ["w1", "w2", "w3"]
            .iter()
            .flat_map(|w| self.bus_labels.iter().map(move |id| format!("{w}_{id}")))
            .collect()
    }
}

/// Closed-loop LTI model `ẋ = A x + B w + E u`, `y = C x`, where `u` is a
/// deterministic power injection step per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    /// `[B1 | B2 | B3]`, each block `n` columns wide.
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Response to a unit power injection at each bus.
    pub injection: DMatrix<f64>,
    pub layout: StateLayout,
    /// Inverter modes per bus, needed to reconstruct inverter power.
    pub modes: Vec<InverterMode>,
    /// True iff some bus has `k3 * m_v != 0` (VI) or `k3 * nu != 0` (iDroop).
    pub derivative_noise_present: bool,
    /// Right null vector of `A` that `C` does not observe (the uniform angle
    /// shift), when present.
    pub rotation_mode: Option<DVector<f64>>,
}

impl StateSpaceModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.layout.n_buses
    }

    fn block(&self, k: usize) -> DMatrix<f64> {
        let n = self.n_channels();
        self.b.columns(k * n, n).into_owned()
    }

    /// Injection-noise block B1.
    pub fn b_injection(&self) -> DMatrix<f64> {
        self.block(0)
    }

    /// Frequency-measurement-noise block B2.
    pub fn b_measurement(&self) -> DMatrix<f64> {
        self.block(1)
    }

    /// Derivative-measurement-noise block B3.
    pub fn b_derivative(&self) -> DMatrix<f64> {
        self.block(2)
    }

    /// Drift `A x + E u`.
    pub fn vector_field(&self, state: &DVector<f64>, injection: &DVector<f64>) -> DVector<f64> {
        &self.a * state + &self.injection * injection
    }

    /// Deviation of inverter power from its set point at every bus, given the
    /// state and its time derivative.
    pub fn inverter_power_deviation(&self, state: &DVector<f64>, rate: &DVector<f64>) -> DVector<f64> {
        let l = &self.layout;
        DVector::from_iterator(
            l.n_buses,
            self.modes.iter().enumerate().map(|(i, mode)| {
                let w = state[l.omega(i)];
                match *mode {
                    InverterMode::ConstantPower => 0.0,
                    InverterMode::Droop { r_r } => -w / r_r,
                    InverterMode::VirtualInertia { r_r, m_v } => -w / r_r - m_v * rate[l.omega(i)],
                    InverterMode::IDroop { .. } => state[l.x(i).expect("iDroop bus has a state")],
                }
            }),
        )
    }
}

/// Generator parameters and inverter configs, checked for shape and sign.
pub(crate) fn check_inputs(
    network: &PowerNetwork,
    configs: &[InverterConfig],
    noise: Option<&[NoiseGains]>,
) -> Result<(), DynamicsError> {
    let n = network.len();
    if configs.len() != n {
        return Err(DynamicsError::Length {
            what: "inverter configs",
            expected: n,
            got: configs.len(),
        });
    }
    if let Some(noise) = noise {
        if noise.len() != n {
            return Err(DynamicsError::Length {
                what: "noise gains",
                expected: n,
                got: noise.len(),
            });
        }
        for (i, g) in noise.iter().enumerate() {
            g.validate(i)?;
        }
    }
    if let Some(b) = network.buses.iter().find(|b| !b.is_generator()) {
        return Err(DynamicsError::LoadBus(b.id));
    }
    for (i, c) in configs.iter().enumerate() {
        c.validate(i)?;
    }
    Ok(())
}

/// Synchronous frequency deviation
/// `ω0 = Σ(p_in + q0) / (Σ(D + 1/R_g) + Σ_droop-active 1/R_r)`.
/// iDroop buses count as droop-active.
pub fn sync_frequency(network: &PowerNetwork, configs: &[InverterConfig]) -> Result<f64, DynamicsError> {
    check_inputs(network, configs, None)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (bus, cfg) in network.buses.iter().zip(configs) {
        let g = bus.generator_params().expect("checked");
        num += bus.injection + cfg.q0;
        den += g.damping + 1.0 / g.governor_droop + cfg.mode.inverse_droop();
    }
    if den == 0.0 {
        return Err(DynamicsError::ZeroDamping);
    }
    Ok(num / den)
}

/// Synchronous steady state of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub omega0: f64,
    /// Angles relative to bus 0.
    pub theta_star: DVector<f64>,
    /// Absolute inverter output per bus.
    pub q_r_star: Vec<f64>,
    /// iDroop internal state per bus (`None` for other modes).
    pub x_star: Vec<Option<f64>>,
    pub delta_q_g_star: Vec<f64>,
    pub delta_q_r_star: Vec<f64>,
    /// Imbalance the generator and inverter deviations cover:
    /// `Σδq_g + Σδq_r = imbalance = Σ(D ω0) - Σ(p_in + q0)`.
    pub imbalance: f64,
}

impl SteadyState {
    /// Full absolute state `(θ*, ω0·1, x*)` at time zero.
    pub fn absolute_state(&self, layout: &StateLayout) -> DVector<f64> {
        let mut s = DVector::zeros(layout.dim());
        for i in 0..layout.n_buses {
            s[layout.theta(i)] = self.theta_star[i];
            s[layout.omega(i)] = self.omega0;
            if let (Some(k), Some(x)) = (layout.x(i), self.x_star[i]) {
                s[k] = x;
            }
        }
        s
    }
}

pub fn steady_state(network: &PowerNetwork, configs: &[InverterConfig]) -> Result<SteadyState, DynamicsError> {
    let omega0 = sync_frequency(network, configs)?;
    let n = network.len();
    let l = build_laplacian(network)?;

    let mut q_r_star = Vec::with_capacity(n);
    let mut x_star = Vec::with_capacity(n);
    let mut delta_q_g_star = Vec::with_capacity(n);
    let mut delta_q_r_star = Vec::with_capacity(n);
    let mut rhs = DVector::zeros(n);
    let mut damping_total = 0.0;
    let mut injection_total = 0.0;
    for (i, (bus, cfg)) in network.buses.iter().zip(configs).enumerate() {
        let g = bus.generator_params().expect("checked");
        let dq_r = -omega0 * cfg.mode.inverse_droop();
        q_r_star.push(cfg.q0 + dq_r);
        delta_q_r_star.push(dq_r);
        x_star.push(matches!(cfg.mode, InverterMode::IDroop { .. }).then_some(dq_r));
        delta_q_g_star.push(-omega0 / g.governor_droop);
        rhs[i] = bus.injection + cfg.q0 + dq_r - (g.damping + 1.0 / g.governor_droop) * omega0;
        damping_total += g.damping * omega0;
        injection_total += bus.injection + cfg.q0;
    }

    let mut theta_star = DVector::zeros(n);
    if n > 1 {
        let reduced = l.matrix().view((1, 1), (n - 1, n - 1)).into_owned();
        let chol = reduced.cholesky().ok_or(DynamicsError::SingularAngles)?;
        let sol = chol.solve(&rhs.rows(1, n - 1).into_owned());
        theta_star.rows_mut(1, n - 1).copy_from(&sol);
    }

    Ok(SteadyState {
        omega0,
        theta_star,
        q_r_star,
        x_star,
        delta_q_g_star,
        delta_q_r_star,
        imbalance: damping_total - injection_total,
    })
}

/// Builds the deviation-coordinate closed loop. The iDroop `-ν ω̇` coupling is
/// eliminated by substituting the swing equation, so `A` is explicit.
pub fn assemble_closed_loop(
    network: &PowerNetwork,
    configs: &[InverterConfig],
    noise: &[NoiseGains],
) -> Result<StateSpaceModel, DynamicsError> {
    assemble_labeled(network, configs, noise, (0..network.len()).collect())
}

/// As [`assemble_closed_loop`], labelling buses with `bus_labels` (for
/// example the ids of the network before Kron reduction).
pub fn assemble_labeled(
    network: &PowerNetwork,
    configs: &[InverterConfig],
    noise: &[NoiseGains],
    bus_labels: Vec<usize>,
) -> Result<StateSpaceModel, DynamicsError> {
    check_inputs(network, configs, Some(noise))?;
    let n = network.len();
    if bus_labels.len() != n {
        return Err(DynamicsError::Length {
            what: "bus labels",
            expected: n,
            got: bus_labels.len(),
        });
    }
    let l = build_laplacian(network)?;
    let gens: Vec<GeneratorParams> = network
        .buses
        .iter()
        .map(|b| *b.generator_params().expect("checked"))
        .collect();
    Ok(assemble_from_parts(l.matrix(), &gens, configs, noise, bus_labels, true))
}

/// Assembly from an explicit coupling matrix. `laplacian` may be any symmetric
/// matrix (a 1x1 eigenvalue for modal subsystems); `rotation_mode` records
/// whether the uniform angle shift is in the null space of `A`.
pub(crate) fn assemble_from_parts(
    laplacian: &DMatrix<f64>,
    gens: &[GeneratorParams],
    configs: &[InverterConfig],
    noise: &[NoiseGains],
    bus_labels: Vec<usize>,
    rotation_mode: bool,
) -> StateSpaceModel {
    let n = gens.len();
    let idroop_buses: Vec<usize> = configs
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(c.mode, InverterMode::IDroop { .. }))
        .map(|(i, _)| i)
        .collect();
    let layout = StateLayout {
        n_buses: n,
        idroop_buses,
        bus_labels,
    };
    let dim = layout.dim();
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, 3 * n);
    let mut e = DMatrix::zeros(dim, n);
    let mut c = DMatrix::zeros(n, dim);
    let mut derivative_noise_present = false;

    for i in 0..n {
        let g = &gens[i];
        let cfg = &configs[i];
        let k = noise[i];
        let (wi, ti) = (layout.omega(i), layout.theta(i));
        a[(ti, wi)] = 1.0;
        c[(i, wi)] = 1.0;

        let m_v = match cfg.mode {
            InverterMode::VirtualInertia { m_v, .. } => m_v,
            _ => 0.0,
        };
        let m_hat = g.inertia + m_v;
        let inv_rr_static = match cfg.mode {
            InverterMode::Droop { r_r } | InverterMode::VirtualInertia { r_r, .. } => 1.0 / r_r,
            _ => 0.0,
        };
        let d_hat = g.damping + 1.0 / g.governor_droop + inv_rr_static;

        for j in 0..n {
            a[(wi, layout.theta(j))] = -laplacian[(i, j)] / m_hat;
        }
        a[(wi, wi)] = -d_hat / m_hat;
        e[(wi, i)] = 1.0 / m_hat;

        match cfg.mode {
            InverterMode::ConstantPower => {}
            InverterMode::Droop { r_r } => {
                b[(wi, n + i)] = -k.k2 / (r_r * m_hat);
            }
            InverterMode::VirtualInertia { r_r, m_v } => {
                b[(wi, n + i)] = -k.k2 / (r_r * m_hat);
                b[(wi, 2 * n + i)] = -m_v * k.k3 / m_hat;
                derivative_noise_present |= m_v * k.k3 != 0.0;
            }
            InverterMode::IDroop { r_r, delta, nu } => {
                let xi = layout.x(i).expect("iDroop bus has a state");
                a[(wi, xi)] = 1.0 / m_hat;
                // ẋ = -δ(ω/R + x) - ν ω̇, with ω̇ taken from the row just built.
                let omega_row = a.row(wi).into_owned();
                let mut x_row = -omega_row * nu;
                x_row[wi] -= delta / r_r;
                x_row[xi] -= delta;
                a.set_row(xi, &x_row);
                e[(xi, i)] = -nu / m_hat;
                b[(xi, n + i)] = -delta * k.k2 / r_r;
                b[(xi, 2 * n + i)] = -nu * k.k3;
                derivative_noise_present |= nu * k.k3 != 0.0;
            }
        }
        // Injection noise enters exactly like a power step.
        let col = e.column(i) * k.k1;
        b.set_column(i, &col);
    }

    let rotation = rotation_mode.then(|| {
        let mut v = DVector::zeros(dim);
        v.rows_mut(0, n).fill(1.0);
        v
    });

    StateSpaceModel {
        a,
        b,
        c,
        injection: e,
        layout,
        modes: configs.iter().map(|c| c.mode).collect(),
        derivative_noise_present,
        rotation_mode: rotation,
    }
}

/// Constant injection `p_in + q0` per bus; driving the deviation model with it
/// from `t = 0` reproduces the dynamics in original (absolute) coordinates.
pub fn absolute_injection(network: &PowerNetwork, configs: &[InverterConfig]) -> DVector<f64> {
    DVector::from_iterator(
        network.len(),
        network.buses.iter().zip(configs).map(|(b, c)| b.injection + c.q0),
    )
}
