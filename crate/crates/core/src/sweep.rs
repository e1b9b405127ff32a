//! Parameter sweeps over inverter gains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{h2_for_fleet, H2Result};
use crate::control::{InverterConfig, InverterMode};
use crate::document::{Case, DocumentError, ModeName};
use crate::dynamics::assemble_closed_loop;
use crate::sim::{compute_metrics, simulate_deterministic, SimConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Document(#[from] DocumentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisName {
    #[serde(rename = "delta")]
    Delta,
    #[serde(rename = "nu")]
    Nu,
    #[serde(rename = "r_r")]
    RR,
    #[serde(rename = "m_v")]
    MV,
}

impl AxisName {
    pub fn as_str(&self) -> &'static str {
        match self {
            AxisName::Delta => "delta",
            AxisName::Nu => "nu",
            AxisName::RR => "r_r",
            AxisName::MV => "m_v",
        }
    }

    /// Sets this parameter on `cfg` if its mode has it.
    fn apply(&self, cfg: &mut InverterConfig, value: f64) -> bool {
        match (self, &mut cfg.mode) {
            (AxisName::Delta, InverterMode::IDroop { delta, .. }) => *delta = value,
            (AxisName::Nu, InverterMode::IDroop { nu, .. }) => *nu = value,
            (
                AxisName::RR,
                InverterMode::Droop { r_r }
                | InverterMode::VirtualInertia { r_r, .. }
                | InverterMode::IDroop { r_r, .. },
            ) => *r_r = value,
            (AxisName::MV, InverterMode::VirtualInertia { m_v, .. }) => *m_v = value,
            _ => return false,
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: AxisName,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i == 0 {
                    return self.min;
                }
                if i + 1 == self.count {
                    return self.max;
                }
                let t = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.min + t * (self.max - self.min),
                    Spacing::Log => (self.min.ln() + t * (self.max.ln() - self.min.ln())).exp(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMetric {
    H2,
    Nadir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<Axis>,
    pub metric: SweepMetric,
    /// Switch every inverter to this mode before sweeping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self, SweepError> {
        serde_json::from_str(text).map_err(|e| SweepError::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::Spec(m));
        if self.axes.is_empty() || self.axes.len() > 2 {
            return bad(format!("expected 1 or 2 axes, got {}", self.axes.len()));
        }
        if self.axes.len() == 2 && self.axes[0].name == self.axes[1].name {
            return bad(format!("axis {} given twice", self.axes[0].name.as_str()));
        }
        for a in &self.axes {
            let name = a.name.as_str();
            if a.count < 2 {
                return bad(format!("axis {name}: count must be at least 2"));
            }
            if !(a.min.is_finite() && a.max.is_finite() && a.min < a.max) {
                return bad(format!("axis {name}: need finite min < max"));
            }
            if a.spacing == Spacing::Log && a.min <= 0.0 {
                return bad(format!("axis {name}: log spacing needs min > 0"));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.axes.iter().map(|a| a.name.as_str().to_string()).collect();
        h.push(
            match self.metric {
                SweepMetric::H2 => "h2",
                SweepMetric::Nadir => "nadir",
            }
            .into(),
        );
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SweepValue {
    Value(f64),
    Infinite,
    Failed(String),
}

impl SweepValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            SweepValue::Value(v) => *v,
            SweepValue::Infinite => f64::INFINITY,
            SweepValue::Failed(_) => f64::NAN,
        }
    }

    pub fn csv_field(&self) -> String {
        match self {
            SweepValue::Value(v) => format!("{v}"),
            SweepValue::Infinite => "inf".into(),
            SweepValue::Failed(_) => "nan".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub coords: Vec<f64>,
    pub value: SweepValue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub header: Vec<String>,
    /// Row-major over the axes: the last axis varies fastest.
    pub rows: Vec<SweepRow>,
}

/// Evaluates `spec.metric` at every grid point. Points run in parallel; rows
/// come back in grid order. A point that fails numerically is kept as
/// [`SweepValue::Failed`].
pub fn run_sweep(case: &Case, spec: &SweepSpec, sim: &SimConfig) -> Result<SweepTable, SweepError> {
    spec.validate()?;
    let base = match spec.mode {
        Some(mode) => case.with_mode(mode)?,
        None => case.clone(),
    };
    for a in &spec.axes {
        let mut probe = base.configs.clone();
        if !probe.iter_mut().any(|c| a.name.apply(c, 1.0)) {
            return Err(SweepError::Spec(format!(
                "no inverter has parameter {}",
                a.name.as_str()
            )));
        }
    }
    let values: Vec<Vec<f64>> = spec.axes.iter().map(Axis::values).collect();
    let points: Vec<Vec<f64>> = match values.as_slice() {
        [x] => x.iter().map(|&v| vec![v]).collect(),
        [x, y] => x.iter().flat_map(|&a| y.iter().map(move |&b| vec![a, b])).collect(),
        _ => unreachable!("validated"),
    };
    let mut sim = sim.clone();
    sim.disturbances = base.disturbances.clone();
    sim.noise_enabled = false;

    let rows = points
        .into_par_iter()
        .map(|coords| {
            let mut configs = base.configs.clone();
            for (axis, &v) in spec.axes.iter().zip(&coords) {
                for c in &mut configs {
                    axis.name.apply(c, v);
                }
            }
            let value = evaluate(&base, &configs, spec.metric, &sim);
            SweepRow { coords, value }
        })
        .collect();
    Ok(SweepTable {
        header: spec.header(),
        rows,
    })
}

fn evaluate(case: &Case, configs: &[InverterConfig], metric: SweepMetric, sim: &SimConfig) -> SweepValue {
    match metric {
        SweepMetric::H2 => match h2_for_fleet(&case.network, configs, &case.noise) {
            Ok(H2Result::Finite { value }) => SweepValue::Value(value),
            Ok(H2Result::Infinite { .. }) => SweepValue::Infinite,
            Err(e) => SweepValue::Failed(e.to_string()),
        },
        SweepMetric::Nadir => {
            let run = assemble_closed_loop(&case.network, configs, &case.noise)
                .map_err(|e| e.to_string())
                .and_then(|m| simulate_deterministic(&m, sim).map_err(|e| e.to_string()));
            match run {
                Ok(traj) => SweepValue::Value(compute_metrics(&traj, None).nadir),
                Err(e) => SweepValue::Failed(e),
            }
        }
    }
}
