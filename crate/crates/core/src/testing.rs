//! Proptest strategies shared by the unit tests.

use proptest::prelude::*;

use crate::control::InverterConfig;
use crate::grid::{Bus, Line, PowerNetwork};

fn assemble(
    n: usize,
    tree: Vec<(usize, f64)>,
    extra: Vec<(usize, usize, f64)>,
    gens: Vec<(f64, f64, f64, f64)>,
) -> PowerNetwork {
    let buses = gens
        .into_iter()
        .enumerate()
        .map(|(i, (m, d, r_g, p))| Bus::generator(i, m, d, r_g, p))
        .collect();
    let mut lines: Vec<Line> = tree
        .into_iter()
        .enumerate()
        .map(|(k, (parent, b))| Line::new(parent, k + 1, b))
        .collect();
    for (a, b, w) in extra {
        let pair = (a.min(b), a.max(b));
        if a != b && a < n && b < n && !lines.iter().any(|l| (l.from.min(l.to), l.from.max(l.to)) == pair) {
            lines.push(Line::new(a, b, w));
        }
    }
    PowerNetwork::new(buses, lines)
}

/// Connected generator network with `2..=max_n` buses: a random spanning
/// tree plus a few extra lines.
pub fn connected_network(max_n: usize) -> impl Strategy<Value = PowerNetwork> {
    (2..=max_n).prop_flat_map(|n| {
        let tree: Vec<_> = (1..n).map(|i| (0..i, 0.1f64..5.0)).collect();
        let extra = proptest::collection::vec((0..n, 0..n, 0.1f64..5.0), 0..n);
        let gens = proptest::collection::vec((0.1f64..5.0, 0.0f64..1.0, 1.0f64..40.0, -1.0f64..1.0), n);
        (Just(n), tree, extra, gens).prop_map(|(n, tree, extra, gens)| assemble(n, tree, extra, gens))
    })
}

/// Connected network whose buses all share one set of generator parameters.
pub fn homogeneous_network(max_n: usize) -> impl Strategy<Value = PowerNetwork> {
    (connected_network(max_n), 0.1f64..5.0, 0.0f64..1.0, 1.0f64..40.0).prop_map(|(mut net, m, d, r_g)| {
        for (i, b) in net.buses.iter_mut().enumerate() {
            *b = Bus::generator(i, m, d, r_g, 0.0);
        }
        net
    })
}

/// Any valid inverter configuration.
pub fn inverter_config() -> impl Strategy<Value = InverterConfig> {
    let q0 = -0.5f64..0.5;
    let r_r = 1.0f64..40.0;
    prop_oneof![
        q0.clone().prop_map(InverterConfig::constant_power),
        (q0.clone(), r_r.clone()).prop_map(|(q, r)| InverterConfig::droop(q, r)),
        (q0.clone(), r_r.clone(), 0.01f64..2.0).prop_map(|(q, r, m)| InverterConfig::virtual_inertia(q, r, m)),
        (q0, r_r, 0.05f64..20.0, 0.0f64..3.0).prop_map(|(q, r, d, v)| InverterConfig::idroop(q, r, d, v)),
    ]
}

/// Network with one inverter configuration per bus.
pub fn fleet(max_n: usize) -> impl Strategy<Value = (PowerNetwork, Vec<InverterConfig>)> {
    connected_network(max_n).prop_flat_map(|net| {
        let n = net.len();
        (Just(net), proptest::collection::vec(inverter_config(), n))
    })
}
