//! Steady-state cost optimal allocation of an imbalance among generators and
//! droop-active inverters.
//!
//! Minimizes `Σ α_g/2 δq_g² + Σ α_r/2 δq_r²` subject to `Σδq_g + Σδq_r = ΔP`.
//! The KKT point is `α δq = λ*` for every participant, with
//! `λ* = ΔP / Σ 1/α`.

use serde::Serialize;

use super::AnalysisError;
use crate::control::InverterConfig;
use crate::dynamics::steady_state;
use crate::grid::PowerNetwork;

/// Gap below which a steady state counts as the optimal allocation.
pub const OPTIMALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalAllocation {
    pub delta_q_g: Vec<f64>,
    /// `None` on buses that do not participate (constant power inverters).
    pub delta_q_r: Vec<Option<f64>>,
    pub lambda_star: f64,
    pub ss_cost: f64,
}

impl OptimalAllocation {
    pub fn total(&self) -> f64 {
        self.delta_q_g.iter().sum::<f64>() + self.delta_q_r.iter().flatten().sum::<f64>()
    }
}

/// Cost of an arbitrary allocation.
pub fn ss_cost(alpha_g: &[f64], alpha_r: &[Option<f64>], dq_g: &[f64], dq_r: &[Option<f64>]) -> f64 {
    let gen: f64 = alpha_g.iter().zip(dq_g).map(|(a, q)| 0.5 * a * q * q).sum();
    let inv: f64 = alpha_r
        .iter()
        .zip(dq_r)
        .filter_map(|(a, q)| Some(0.5 * (*a)? * (*q)?.powi(2)))
        .sum();
    gen + inv
}

pub fn optimal_allocation(
    delta_p: f64,
    alpha_g: &[f64],
    alpha_r: &[Option<f64>],
) -> Result<OptimalAllocation, AnalysisError> {
    let participants = alpha_g.iter().chain(alpha_r.iter().flatten());
    let mut inv_sum = 0.0;
    let mut count = 0;
    for &a in participants {
        if !(a > 0.0 && a.is_finite()) {
            return Err(AnalysisError::NonPositive {
                what: "alpha",
                value: a,
            });
        }
        inv_sum += 1.0 / a;
        count += 1;
    }
    if count == 0 {
        return Err(AnalysisError::EmptyParticipants);
    }
    let lambda_star = delta_p / inv_sum;
    let delta_q_g: Vec<f64> = alpha_g.iter().map(|a| lambda_star / a).collect();
    let delta_q_r: Vec<Option<f64>> = alpha_r.iter().map(|a| a.map(|a| lambda_star / a)).collect();
    let ss_cost = ss_cost(alpha_g, alpha_r, &delta_q_g, &delta_q_r);
    Ok(OptimalAllocation {
        delta_q_g,
        delta_q_r,
        lambda_star,
        ss_cost,
    })
}

/// Cost weights per bus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostWeights {
    pub alpha_g: Vec<f64>,
    pub alpha_r: Vec<Option<f64>>,
}

impl CostWeights {
    /// `α = R`: the weights under which droop is optimal.
    pub fn from_droops(network: &PowerNetwork, configs: &[InverterConfig]) -> Self {
        CostWeights {
            alpha_g: network
                .buses
                .iter()
                .map(|b| b.generator_params().map_or(f64::NAN, |g| g.governor_droop))
                .collect(),
            alpha_r: configs.iter().map(|c| c.mode.droop_coefficient()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub omega0: f64,
    /// Imbalance covered by generators and inverters, `Σ D ω0 - Σ(p_in + q0)`.
    pub delta_p: f64,
    pub allocation: OptimalAllocation,
    pub steady_delta_q_g: Vec<f64>,
    pub steady_delta_q_r: Vec<Option<f64>>,
    /// Largest elementwise difference between the steady state and the
    /// allocation.
    pub max_gap: f64,
    pub pass: bool,
}

/// Compares the steady-state deviations of the closed loop with the optimal
/// allocation of the imbalance they cover.
///
/// The imbalance is taken with the sign the steady state actually satisfies,
/// `Σδq = Σ D ω0 - Σ(p_in + q0)`. With `α = R` the multiplier is then
/// `λ* = -ω0` under the convention `α δq = λ*`.
pub fn verify_steady_state_optimality(
    network: &PowerNetwork,
    configs: &[InverterConfig],
    weights: &CostWeights,
) -> Result<OptimalityReport, AnalysisError> {
    let ss = steady_state(network, configs)?;
    let allocation = optimal_allocation(ss.imbalance, &weights.alpha_g, &weights.alpha_r)?;
    let steady_delta_q_r: Vec<Option<f64>> = configs
        .iter()
        .zip(&ss.delta_q_r_star)
        .map(|(c, &q)| c.mode.is_droop_active().then_some(q))
        .collect();

    let mut max_gap: f64 = 0.0;
    for (a, b) in allocation.delta_q_g.iter().zip(&ss.delta_q_g_star) {
        max_gap = max_gap.max((a - b).abs());
    }
    for (a, b) in allocation.delta_q_r.iter().zip(&steady_delta_q_r) {
        match (a, b) {
            (Some(a), Some(b)) => max_gap = max_gap.max((a - b).abs()),
            (None, None) => {}
            // Participation differs: an inverter either moves or it does not.
            (Some(a), None) => max_gap = max_gap.max(a.abs()),
            (None, Some(b)) => max_gap = max_gap.max(b.abs()),
        }
    }
    Ok(OptimalityReport {
        omega0: ss.omega0,
        delta_p: ss.imbalance,
        allocation,
        steady_delta_q_g: ss.delta_q_g_star,
        steady_delta_q_r,
        max_gap,
        pass: max_gap <= OPTIMALITY_TOL,
    })
}
