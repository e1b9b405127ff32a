//! Inverter control laws: constant power, droop, virtual inertia and iDroop,
//! plus the decentralized stability certificate and Lyapunov diagnostics for
//! iDroop fleets.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{build_laplacian, GridError, PowerNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("iDroop mode needs the internal state x")]
    MissingState,
    #[error("operation requires iDroop mode, found {0}")]
    WrongMode(&'static str),
    #[error("bus {bus}: operation requires iDroop mode, found {mode}")]
    NotIDroop { bus: usize, mode: &'static str },
    #[error("bus {bus}: {field} = {value} is out of range")]
    InvalidParameter {
        bus: usize,
        field: &'static str,
        value: f64,
    },
    #[error("bus {bus}: T is undefined (delta * (nu + 1/R_r) = 0)")]
    UndefinedT { bus: usize },
    #[error("expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
    #[error("bus {0} is a load bus; control laws apply to generator buses only")]
    LoadBus(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Inverter operating mode with the parameters that mode needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InverterMode {
    ConstantPower,
    Droop { r_r: f64 },
    VirtualInertia { r_r: f64, m_v: f64 },
    IDroop { r_r: f64, delta: f64, nu: f64 },
}

impl InverterMode {
    pub fn name(&self) -> &'static str {
        match self {
            InverterMode::ConstantPower => "CP",
            InverterMode::Droop { .. } => "DC",
            InverterMode::VirtualInertia { .. } => "VI",
            InverterMode::IDroop { .. } => "IDROOP",
        }
    }

    /// 1/R^r for modes that contribute droop in steady state, zero for CP.
    pub fn inverse_droop(&self) -> f64 {
        match *self {
            InverterMode::ConstantPower => 0.0,
            InverterMode::Droop { r_r }
            | InverterMode::VirtualInertia { r_r, .. }
            | InverterMode::IDroop { r_r, .. } => 1.0 / r_r,
        }
    }

    pub fn is_droop_active(&self) -> bool {
        !matches!(self, InverterMode::ConstantPower)
    }

    pub fn droop_coefficient(&self) -> Option<f64> {
        match *self {
            InverterMode::ConstantPower => None,
            InverterMode::Droop { r_r }
            | InverterMode::VirtualInertia { r_r, .. }
            | InverterMode::IDroop { r_r, .. } => Some(r_r),
        }
    }
}

/// Aggregate inverter at one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterConfig {
    /// Power set point q^{r,0} (pu).
    pub q0: f64,
    pub mode: InverterMode,
}

impl Default for InverterConfig {
    fn default() -> Self {
        InverterConfig::constant_power(0.0)
    }
}

impl InverterConfig {
    pub fn constant_power(q0: f64) -> Self {
        InverterConfig {
            q0,
            mode: InverterMode::ConstantPower,
        }
    }

    pub fn droop(q0: f64, r_r: f64) -> Self {
        InverterConfig {
            q0,
            mode: InverterMode::Droop { r_r },
        }
    }

    pub fn virtual_inertia(q0: f64, r_r: f64, m_v: f64) -> Self {
        InverterConfig {
            q0,
            mode: InverterMode::VirtualInertia { r_r, m_v },
        }
    }

    pub fn idroop(q0: f64, r_r: f64, delta: f64, nu: f64) -> Self {
        InverterConfig {
            q0,
            mode: InverterMode::IDroop { r_r, delta, nu },
        }
    }

    /// Sign and finiteness checks on the mode parameters.
    pub fn validate(&self, bus: usize) -> Result<(), ControlError> {
        let check = |field: &'static str, value: f64, ok: bool| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(ControlError::InvalidParameter { bus, field, value })
            }
        };
        check("q0", self.q0, true)?;
        match self.mode {
            InverterMode::ConstantPower => Ok(()),
            InverterMode::Droop { r_r } => check("r_r", r_r, r_r > 0.0),
            InverterMode::VirtualInertia { r_r, m_v } => {
                check("r_r", r_r, r_r > 0.0)?;
                check("m_v", m_v, m_v >= 0.0)
            }
            InverterMode::IDroop { r_r, delta, nu } => {
                check("r_r", r_r, r_r > 0.0)?;
                check("delta", delta, delta > 0.0)?;
                check("nu", nu, nu >= 0.0)
            }
        }
    }
}

/// Noise gains at one bus: injection (k1), frequency measurement (k2) and
/// frequency-derivative measurement (k3).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseGains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl NoiseGains {
    pub fn new(k1: f64, k2: f64, k3: f64) -> Self {
        NoiseGains { k1, k2, k3 }
    }

    pub fn validate(&self, bus: usize) -> Result<(), ControlError> {
        for (field, value) in [("k1", self.k1), ("k2", self.k2), ("k3", self.k3)] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(ControlError::InvalidParameter { bus, field, value });
            }
        }
        Ok(())
    }
}

/// Power injected by the inverter for measured frequency `omega`, its
/// derivative `omega_dot`, and (iDroop only) the internal state `x`.
pub fn inverter_power(
    config: &InverterConfig,
    omega: f64,
    omega_dot: f64,
    x: Option<f64>,
) -> Result<f64, ControlError> {
    Ok(match config.mode {
        InverterMode::ConstantPower => config.q0,
        InverterMode::Droop { r_r } => config.q0 - omega / r_r,
        InverterMode::VirtualInertia { r_r, m_v } => config.q0 - omega / r_r - m_v * omega_dot,
        InverterMode::IDroop { .. } => config.q0 + x.ok_or(ControlError::MissingState)?,
    })
}

/// Measurement-noise sample entering the iDroop state equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise {
    pub gains: NoiseGains,
    pub w2: f64,
    pub w2_dot: f64,
}

/// Right-hand side of the iDroop internal state,
/// `x' = delta (-omega/R_r - x) - nu omega'`, less the measurement-noise terms
/// `delta k2 w2 / R_r + nu k3 w2'` when noise is supplied.
pub fn idroop_step(
    config: &InverterConfig,
    omega: f64,
    omega_dot: f64,
    x: f64,
    noise: Option<&MeasurementNoise>,
) -> Result<f64, ControlError> {
    let InverterMode::IDroop { r_r, delta, nu } = config.mode else {
        return Err(ControlError::WrongMode(config.mode.name()));
    };
    let mut rate = delta * (-omega / r_r - x) - nu * omega_dot;
    if let Some(n) = noise {
        rate -= delta * n.gains.k2 * n.w2 / r_r + nu * n.gains.k3 * n.w2_dot;
    }
    Ok(rate)
}

/// Per-bus outcome of the decentralized stability test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusCertificate {
    pub bus: usize,
    pub mode: &'static str,
    /// `nu / (delta (nu + 1/R_r))`; `None` for buses not running iDroop.
    pub condition1: Option<f64>,
    /// `(D + 1/R_g) + nu (1/R_r) / (nu + 1/R_r)`.
    pub condition2: Option<f64>,
    /// Diagonal entry `1 / (delta (nu + 1/R_r))` of the Lyapunov weight T.
    pub t_entry: Option<f64>,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCertificate {
    pub buses: Vec<BusCertificate>,
    pub pass: bool,
    /// True when some buses run a mode other than iDroop; the certificate then
    /// speaks for the iDroop buses only.
    pub mixed_fleet: bool,
}

/// Values within this distance of zero are flagged as marginal.
const MARGINAL_BAND: f64 = 1e-12;

/// Evaluates both strict inequalities at every iDroop bus. Other buses pass
/// vacuously and carry a note.
pub fn check_decentralized_stability(
    configs: &[InverterConfig],
    network: &PowerNetwork,
) -> Result<StabilityCertificate, ControlError> {
    if configs.len() != network.len() {
        return Err(ControlError::Length {
            expected: network.len(),
            got: configs.len(),
        });
    }
    let mut buses = Vec::with_capacity(configs.len());
    let mut mixed = false;
    for (bus, (cfg, b)) in configs.iter().zip(&network.buses).enumerate() {
        let gen = b.generator_params().ok_or(ControlError::LoadBus(bus))?;
        match cfg.mode {
            InverterMode::IDroop { r_r, delta, nu } => {
                let inv_r = 1.0 / r_r;
                let denom = delta * (nu + inv_r);
                let c1 = nu / denom;
                let c2 = (gen.damping + 1.0 / gen.governor_droop) + nu * inv_r / (nu + inv_r);
                let pass = c1 > 0.0 && c2 > 0.0;
                let note = if c1.abs() <= MARGINAL_BAND || c2.abs() <= MARGINAL_BAND {
                    Some("marginal: condition at the strict-inequality boundary".to_string())
                } else if !c1.is_finite() || !c2.is_finite() {
                    Some("condition undefined".to_string())
                } else {
                    None
                };
                buses.push(BusCertificate {
                    bus,
                    mode: cfg.mode.name(),
                    condition1: Some(c1),
                    condition2: Some(c2),
                    t_entry: Some(1.0 / denom),
                    pass,
                    note,
                });
            }
            other => {
                mixed = true;
                buses.push(BusCertificate {
                    bus,
                    mode: other.name(),
                    condition1: None,
                    condition2: None,
                    t_entry: None,
                    pass: true,
                    note: Some("not iDroop; condition not evaluated".to_string()),
                });
            }
        }
    }
    let pass = buses.iter().all(|b| b.pass);
    Ok(StabilityCertificate {
        buses,
        pass,
        mixed_fleet: mixed,
    })
}

/// Lyapunov function value and its time derivative along the iDroop closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovValue {
    pub v: f64,
    pub v_dot: f64,
}

/// Deviation state of an all-iDroop network.
#[derive(Debug, Clone, PartialEq)]
pub struct IDroopState {
    pub theta: DVector<f64>,
    pub omega: DVector<f64>,
    pub x: DVector<f64>,
}

struct IDroopDiag {
    m: Vec<f64>,
    damping: Vec<f64>,
    nu: Vec<f64>,
    delta: Vec<f64>,
    inv_r: Vec<f64>,
}

fn idroop_diagonals(network: &PowerNetwork, configs: &[InverterConfig]) -> Result<IDroopDiag, ControlError> {
    let n = network.len();
    if configs.len() != n {
        return Err(ControlError::Length {
            expected: n,
            got: configs.len(),
        });
    }
    let mut d = IDroopDiag {
        m: vec![0.0; n],
        damping: vec![0.0; n],
        nu: vec![0.0; n],
        delta: vec![0.0; n],
        inv_r: vec![0.0; n],
    };
    for (i, (cfg, bus)) in configs.iter().zip(&network.buses).enumerate() {
        let gen = bus.generator_params().ok_or(ControlError::LoadBus(i))?;
        let InverterMode::IDroop { r_r, delta, nu } = cfg.mode else {
            return Err(ControlError::NotIDroop {
                bus: i,
                mode: cfg.mode.name(),
            });
        };
        let inv_r = 1.0 / r_r;
        if delta * (nu + inv_r) == 0.0 || !(delta * (nu + inv_r)).is_finite() {
            return Err(ControlError::UndefinedT { bus: i });
        }
        d.m[i] = gen.inertia;
        d.damping[i] = gen.damping + 1.0 / gen.governor_droop;
        d.nu[i] = nu;
        d.delta[i] = delta;
        d.inv_r[i] = inv_r;
    }
    Ok(d)
}

/// `V = ½θᵀLθ + ½ωᵀMω + ½(x + K_ν ω)ᵀ T (x + K_ν ω)` with
/// `T = K_δ⁻¹(K_ν + R⁻¹)⁻¹`, and its exact derivative along the deviation
/// dynamics,
/// `V̇ = -ωᵀ(D + R_g⁻¹ + K_ν R⁻¹ (K_ν + R⁻¹)⁻¹)ω - xᵀ(K_ν + R⁻¹)⁻¹x`.
///
/// Requires every bus to run iDroop.
pub fn lyapunov_diagnostics(
    state: &IDroopState,
    network: &PowerNetwork,
    configs: &[InverterConfig],
) -> Result<LyapunovValue, ControlError> {
    let d = idroop_diagonals(network, configs)?;
    let n = network.len();
    for (got, _) in [
        (state.theta.len(), "theta"),
        (state.omega.len(), "omega"),
        (state.x.len(), "x"),
    ] {
        if got != n {
            return Err(ControlError::Length { expected: n, got });
        }
    }
    let l = build_laplacian(network)?;
    let lt = l.matrix() * &state.theta;
    let mut v = 0.5 * state.theta.dot(&lt);
    let mut v_dot = 0.0;
    for i in 0..n {
        let w = state.omega[i];
        let x = state.x[i];
        let sum = d.nu[i] + d.inv_r[i];
        let t = 1.0 / (d.delta[i] * sum);
        let z = x + d.nu[i] * w;
        v += 0.5 * d.m[i] * w * w + 0.5 * t * z * z;
        v_dot -= (d.damping[i] + d.nu[i] * d.inv_r[i] / sum) * w * w;
        v_dot -= x * x / sum;
    }
    Ok(LyapunovValue { v, v_dot })
}

/// Cross-term coefficient `1 - ν T δ - T δ / R` that the choice of T cancels.
pub fn lyapunov_cross_term(config: &InverterConfig) -> Option<f64> {
    let InverterMode::IDroop { r_r, delta, nu } = config.mode else {
        return None;
    };
    let t = 1.0 / (delta * (nu + 1.0 / r_r));
    Some(1.0 - nu * t * delta - t * delta / r_r)
}
