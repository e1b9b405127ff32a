//! JSON network documents.
//!
//! A document lists buses (generators and loads), lines, one optional
//! inverter entry per generator bus, optional noise gains, and optionally
//! disturbances and simulation settings. Load buses are Kron-reduced away
//! when the document is turned into a [`Case`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{InverterConfig, InverterMode, NoiseGains};
use crate::grid::{validate_network, Bus, BusKind, GeneratorParams, GridError, Line, PowerNetwork};
use crate::sim::Disturbance;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DocumentError {
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("invalid document:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKindDoc {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusDoc {
    pub id: usize,
    pub kind: BusKindDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub governor_droop: Option<f64>,
    #[serde(default)]
    pub injection: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeName {
    #[serde(rename = "CP")]
    ConstantPower,
    #[serde(rename = "DC")]
    Droop,
    #[serde(rename = "VI")]
    VirtualInertia,
    #[serde(rename = "IDROOP")]
    IDroop,
}

impl ModeName {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CP" => Some(ModeName::ConstantPower),
            "DC" => Some(ModeName::Droop),
            "VI" => Some(ModeName::VirtualInertia),
            "IDROOP" => Some(ModeName::IDroop),
            _ => None,
        }
    }
}

/// Inverter entry. Parameters not used by `mode` may still be given; they are
/// picked up when the mode is overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterDoc {
    pub bus: usize,
    pub mode: ModeName,
    #[serde(default)]
    pub q0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

impl InverterDoc {
    /// Config for `mode`, failing if a parameter it needs is missing.
    pub fn config(&self, mode: ModeName) -> Result<InverterConfig, String> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| format!("inverter at bus {}: mode {mode:?} requires `{name}`", self.bus))
        };
        let cfg = match mode {
            ModeName::ConstantPower => InverterConfig::constant_power(self.q0),
            ModeName::Droop => InverterConfig::droop(self.q0, need(self.r_r, "r_r")?),
            ModeName::VirtualInertia => {
                InverterConfig::virtual_inertia(self.q0, need(self.r_r, "r_r")?, need(self.m_v, "m_v")?)
            }
            ModeName::IDroop => InverterConfig::idroop(
                self.q0,
                need(self.r_r, "r_r")?,
                need(self.delta, "delta")?,
                need(self.nu, "nu")?,
            ),
        };
        cfg.validate(self.bus).map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDoc {
    pub bus: usize,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub buses: Vec<BusDoc>,
    pub lines: Vec<Line>,
    #[serde(default)]
    pub inverters: Vec<InverterDoc>,
    #[serde(default)]
    pub noise: Vec<NoiseDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<Disturbance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationDoc>,
}

/// Everything the analyses need, on the generator-only network.
#[derive(Debug, Clone)]
pub struct Case {
    pub network: PowerNetwork,
    pub configs: Vec<InverterConfig>,
    pub noise: Vec<NoiseGains>,
    /// Disturbances on reduced bus indices. A step at a load bus is spread
    /// over the generators it reduces onto.
    pub disturbances: Vec<Disturbance>,
    pub simulation: Option<SimulationDoc>,
    /// Document id of each reduced bus.
    pub bus_labels: Vec<usize>,
    /// Inverter entries per reduced bus (`None` where the document has none).
    pub inverter_docs: Vec<Option<InverterDoc>>,
}

impl Case {
    /// Replaces every inverter mode by `mode`, using the parameters of each
    /// inverter entry. Buses without an entry stay constant power.
    pub fn with_mode(&self, mode: ModeName) -> Result<Case, DocumentError> {
        let mut errors = Vec::new();
        let mut configs = self.configs.clone();
        for (cfg, doc) in configs.iter_mut().zip(&self.inverter_docs) {
            if let Some(doc) = doc {
                match doc.config(mode) {
                    Ok(c) => *cfg = c,
                    Err(e) => errors.push(e),
                }
            }
        }
        if !errors.is_empty() {
            return Err(DocumentError::Invalid(errors));
        }
        Ok(Case {
            configs,
            ..self.clone()
        })
    }
}

impl NetworkDocument {
    pub fn from_json(text: &str) -> Result<Self, DocumentError> {
        serde_json::from_str(text).map_err(|e| DocumentError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("documents always serialize")
    }

    fn network(&self) -> (PowerNetwork, Vec<String>) {
        let mut errors = Vec::new();
        let buses = self
            .buses
            .iter()
            .map(|b| {
                let kind = match b.kind {
                    BusKindDoc::Load => {
                        if b.inertia.is_some() || b.governor_droop.is_some() {
                            errors.push(format!("load bus {} carries generator parameters", b.id));
                        }
                        BusKind::Load
                    }
                    BusKindDoc::Generator => {
                        let mut get = |v: Option<f64>, name: &str| {
                            v.unwrap_or_else(|| {
                                errors.push(format!("generator bus {} is missing `{name}`", b.id));
                                f64::NAN
                            })
                        };
                        BusKind::Generator(GeneratorParams {
                            inertia: get(b.inertia, "inertia"),
                            damping: get(b.damping, "damping"),
                            governor_droop: get(b.governor_droop, "governor_droop"),
                        })
                    }
                };
                Bus {
                    id: b.id,
                    kind,
                    injection: b.injection,
                }
            })
            .collect();
        (PowerNetwork::new(buses, self.lines.clone()), errors)
    }

    /// Every problem with the document; empty iff [`NetworkDocument::to_case`]
    /// can only fail numerically.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errors.push(format!(
                "unsupported schema_version {:?} (expected {SCHEMA_VERSION:?})",
                self.schema_version
            ));
        }
        let (network, bus_errors) = self.network();
        errors.extend(bus_errors);
        errors.extend(validate_network(&network).iter().map(|v| v.to_string()));

        let kind_of = |id: usize| network.buses.get(id).filter(|b| b.id == id).map(|b| b.is_generator());
        let mut seen = BTreeMap::new();
        for inv in &self.inverters {
            match kind_of(inv.bus) {
                None => errors.push(format!("inverter refers to unknown bus {}", inv.bus)),
                Some(false) => errors.push(format!("inverter at bus {} sits on a load bus", inv.bus)),
                Some(true) => {}
            }
            if seen.insert(inv.bus, ()).is_some() {
                errors.push(format!("bus {} has more than one inverter entry", inv.bus));
            }
            if let Err(e) = inv.config(inv.mode) {
                errors.push(e);
            }
        }
        let mut seen = BTreeMap::new();
        for k in &self.noise {
            match kind_of(k.bus) {
                None => errors.push(format!("noise entry refers to unknown bus {}", k.bus)),
                Some(false) => errors.push(format!("noise entry at bus {} sits on a load bus", k.bus)),
                Some(true) => {}
            }
            if seen.insert(k.bus, ()).is_some() {
                errors.push(format!("bus {} has more than one noise entry", k.bus));
            }
            if let Err(e) = NoiseGains::new(k.k1, k.k2, k.k3).validate(k.bus) {
                errors.push(e.to_string());
            }
        }
        for d in &self.disturbances {
            if kind_of(d.bus).is_none() {
                errors.push(format!("disturbance refers to unknown bus {}", d.bus));
            }
            if !(d.time >= 0.0 && d.delta_p.is_finite()) {
                errors.push(format!("disturbance at bus {} has a bad time or size", d.bus));
            }
        }
        if let Some(sim) = &self.simulation {
            if sim.dt.is_some_and(|v| !(v > 0.0)) || sim.horizon.is_some_and(|v| !(v > 0.0)) {
                errors.push("simulation dt and horizon must be positive".into());
            }
        }
        errors
    }

    pub fn to_case(&self) -> Result<Case, DocumentError> {
        let errors = self.validate();
        if !errors.is_empty() {
            return Err(DocumentError::Invalid(errors));
        }
        let (full, _) = self.network();
        let reduced = full.kron_reduce_loads()?;
        let n = reduced.network.len();
        let mut index_of = vec![None; full.len()];
        for (k, &orig) in reduced.original_ids.iter().enumerate() {
            index_of[orig] = Some(k);
        }

        let mut configs = vec![InverterConfig::default(); n];
        let mut inverter_docs = vec![None; n];
        for inv in &self.inverters {
            let k = index_of[inv.bus].expect("validated: generator bus");
            configs[k] = inv.config(inv.mode).expect("validated");
            inverter_docs[k] = Some(inv.clone());
        }
        let mut noise = vec![NoiseGains::default(); n];
        for g in &self.noise {
            noise[index_of[g.bus].expect("validated: generator bus")] = NoiseGains::new(g.k1, g.k2, g.k3);
        }

        let mut disturbances = Vec::new();
        for d in &self.disturbances {
            match index_of[d.bus] {
                Some(k) => disturbances.push(Disturbance { bus: k, ..*d }),
                None => {
                    let j = reduced
                        .eliminated
                        .iter()
                        .position(|&e| e == d.bus)
                        .expect("load bus was eliminated");
                    for k in 0..n {
                        let share = reduced.injection_map[(k, j)];
                        if share != 0.0 {
                            disturbances.push(Disturbance {
                                bus: k,
                                delta_p: d.delta_p * share,
                                time: d.time,
                            });
                        }
                    }
                }
            }
        }

        Ok(Case {
            network: reduced.network,
            configs,
            noise,
            disturbances,
            simulation: self.simulation,
            bus_labels: reduced.original_ids,
            inverter_docs,
        })
    }

    /// Document describing an all-generator network and its configuration.
    pub fn from_parts(
        network: &PowerNetwork,
        configs: &[InverterConfig],
        noise: &[NoiseGains],
        comment: Option<String>,
    ) -> Self {
        let buses = network
            .buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Generator(g) => BusDoc {
                    id: b.id,
                    kind: BusKindDoc::Generator,
                    inertia: Some(g.inertia),
                    damping: Some(g.damping),
                    governor_droop: Some(g.governor_droop),
                    injection: b.injection,
                },
                BusKind::Load => BusDoc {
                    id: b.id,
                    kind: BusKindDoc::Load,
                    inertia: None,
                    damping: None,
                    governor_droop: None,
                    injection: b.injection,
                },
            })
            .collect();
        let inverters = configs
            .iter()
            .enumerate()
            .map(|(bus, c)| {
                let mut doc = InverterDoc {
                    bus,
                    mode: ModeName::ConstantPower,
                    q0: c.q0,
                    r_r: None,
                    m_v: None,
                    delta: None,
                    nu: None,
                };
                match c.mode {
                    InverterMode::ConstantPower => {}
                    InverterMode::Droop { r_r } => {
                        doc.mode = ModeName::Droop;
                        doc.r_r = Some(r_r);
                    }
                    InverterMode::VirtualInertia { r_r, m_v } => {
                        doc.mode = ModeName::VirtualInertia;
                        doc.r_r = Some(r_r);
                        doc.m_v = Some(m_v);
                    }
                    InverterMode::IDroop { r_r, delta, nu } => {
                        doc.mode = ModeName::IDroop;
                        doc.r_r = Some(r_r);
                        doc.delta = Some(delta);
                        doc.nu = Some(nu);
                    }
                }
                doc
            })
            .collect();
        let noise = noise
            .iter()
            .enumerate()
            .map(|(bus, k)| NoiseDoc {
                bus,
                k1: k.k1,
                k2: k.k2,
                k3: k.k3,
            })
            .collect();
        NetworkDocument {
            schema_version: SCHEMA_VERSION.into(),
            comment,
            buses,
            lines: network.lines.clone(),
            inverters,
            noise,
            disturbances: Vec::new(),
            simulation: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const TWO_BUS: &str = r#"{
        "schema_version": "1",
        "buses": [
            {"id": 0, "kind": "generator", "inertia": 1.0, "damping": 0.1, "governor_droop": 15.0},
            {"id": 1, "kind": "generator", "inertia": 1.0, "damping": 0.1, "governor_droop": 15.0, "injection": 0.2}
        ],
        "lines": [{"from": 0, "to": 1, "susceptance": 1.0}],
        "inverters": [{"bus": 1, "mode": "IDROOP", "r_r": 15.0, "m_v": 0.15, "delta": 6.0, "nu": 0.9}],
        "noise": [{"bus": 0, "k1": 0.1, "k2": 5.0, "k3": 5.0}]
    }"#;

    #[test]
    fn parses_and_defaults_missing_entries() {
        let doc = NetworkDocument::from_json(TWO_BUS).unwrap();
        assert!(doc.validate().is_empty());
        let case = doc.to_case().unwrap();
        assert_eq!(case.configs[0], InverterConfig::default());
        assert_eq!(case.configs[1], InverterConfig::idroop(0.0, 15.0, 6.0, 0.9));
        assert_eq!(case.noise[1], NoiseGains::default());
        assert_eq!(case.bus_labels, vec![0, 1]);
    }

    #[test]
    fn mode_override_uses_entry_parameters() {
        let case = NetworkDocument::from_json(TWO_BUS).unwrap().to_case().unwrap();
        let vi = case.with_mode(ModeName::VirtualInertia).unwrap();
        assert_eq!(vi.configs[1], InverterConfig::virtual_inertia(0.0, 15.0, 0.15));
        assert_eq!(vi.configs[0], InverterConfig::default());
    }

    #[test]
    fn round_trip() {
        let doc = NetworkDocument::from_json(TWO_BUS).unwrap();
        let again = NetworkDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn reports_every_problem() {
        let text = r#"{
            "schema_version": "1",
            "buses": [
                {"id": 0, "kind": "generator", "inertia": 1.0, "damping": 0.1},
                {"id": 1, "kind": "load"}
            ],
            "lines": [{"from": 0, "to": 1, "susceptance": -1.0}],
            "inverters": [
                {"bus": 1, "mode": "DC", "r_r": 15.0},
                {"bus": 0, "mode": "IDROOP", "r_r": 15.0}
            ]
        }"#;
        let errors = NetworkDocument::from_json(text).unwrap().validate();
        let joined = errors.join("\n");
        assert!(joined.contains("missing `governor_droop`"), "{joined}");
        assert!(joined.contains("load bus"), "{joined}");
        assert!(joined.contains("requires `delta`"), "{joined}");
        assert!(joined.contains("susceptance"), "{joined}");
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        assert!(NetworkDocument::from_json(r#"{"schema_version":"1","buses":[],"lines":[],"extra":1}"#).is_err());
        let doc = NetworkDocument::from_json(&TWO_BUS.replace("\"1\"", "\"2\"")).unwrap();
        assert!(doc.validate()[0].contains("schema_version"));
    }

    #[test]
    fn load_bus_disturbance_spreads_over_generators() {
        // Path g0 - load - g2 with equal lines: a load step splits in half.
        let text = r#"{
            "schema_version": "1",
            "buses": [
                {"id": 0, "kind": "generator", "inertia": 1.0, "damping": 0.1, "governor_droop": 15.0},
                {"id": 1, "kind": "load"},
                {"id": 2, "kind": "generator", "inertia": 1.0, "damping": 0.1, "governor_droop": 15.0}
            ],
            "lines": [{"from": 0, "to": 1, "susceptance": 2.0}, {"from": 1, "to": 2, "susceptance": 2.0}],
            "disturbances": [{"time": 1.0, "bus": 1, "delta_p": -0.5}, {"time": 2.0, "bus": 2, "delta_p": 0.1}]
        }"#;
        let case = NetworkDocument::from_json(text).unwrap().to_case().unwrap();
        assert_eq!(case.bus_labels, vec![0, 2]);
        assert_eq!(case.network.lines.len(), 1);
        assert_abs_diff_eq!(case.network.lines[0].susceptance, 1.0, epsilon = 1e-14);
        assert_eq!(case.disturbances.len(), 3);
        assert_abs_diff_eq!(case.disturbances[0].delta_p, -0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(case.disturbances[1].delta_p, -0.25, epsilon = 1e-14);
        assert_eq!(case.disturbances[2].bus, 1);
    }
}
