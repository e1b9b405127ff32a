//! Transmission network model: buses, susceptance-weighted lines, the graph
//! Laplacian and Kron reduction onto generator buses.
//!
//! The network is treated in the DC (lossless, small-angle) approximation, so
//! only line susceptances enter. Loads are constant-impedance and disappear
//! into the reduced line weights once eliminated.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on Laplacian row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("network is disconnected; components: {}", format_components(.components))]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("invalid network: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("kron reduction needs at least one retained bus")]
    EmptyRetainedSet,
    #[error("retained bus {0} is out of range")]
    UnknownBus(usize),
    #[error("eliminated buses {0:?} form an island with no path to a retained bus")]
    SingularEliminatedBlock(Vec<usize>),
    #[error("matrix is not a valid Laplacian: {0}")]
    NotLaplacian(String),
}

fn format_components(components: &[Vec<usize>]) -> String {
    components
        .iter()
        .map(|c| format!("{c:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Dynamic parameters of a bus hosting a synchronous generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Aggregate inertia M_i (s²·pu).
    pub inertia: f64,
    /// Damping and frequency-sensitive load D_i (pu per rad/s).
    pub damping: f64,
    /// Governor droop coefficient R^g_i ((rad/s)/pu); its inverse enters the dynamics.
    pub governor_droop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BusKind {
    Generator(GeneratorParams),
    Load,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Net constant power injection p^in_i (pu).
    pub injection: f64,
}

impl Bus {
    pub fn generator(id: usize, inertia: f64, damping: f64, governor_droop: f64, injection: f64) -> Self {
        Bus {
            id,
            kind: BusKind::Generator(GeneratorParams {
                inertia,
                damping,
                governor_droop,
            }),
            injection,
        }
    }

    pub fn load(id: usize, injection: f64) -> Self {
        Bus {
            id,
            kind: BusKind::Load,
            injection,
        }
    }

    pub fn generator_params(&self) -> Option<&GeneratorParams> {
        match &self.kind {
            BusKind::Generator(p) => Some(p),
            BusKind::Load => None,
        }
    }

    pub fn is_generator(&self) -> bool {
        matches!(self.kind, BusKind::Generator(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Susceptance b_ij (pu), strictly positive.
    pub susceptance: f64,
}

impl Line {
    pub fn new(from: usize, to: usize, susceptance: f64) -> Self {
        Line { from, to, susceptance }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
}

/// A single problem found by [`validate_network`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NonContiguousId {
        position: usize,
        id: usize,
    },
    UnknownEndpoint {
        line: usize,
        bus: usize,
    },
    SelfLoop {
        line: usize,
        bus: usize,
    },
    NonPositiveSusceptance {
        line: usize,
        value: f64,
    },
    DuplicateLine {
        first: usize,
        second: usize,
    },
    BadParameter {
        bus: usize,
        field: &'static str,
        value: f64,
    },
    Disconnected {
        components: Vec<Vec<usize>>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "network has no buses"),
            Violation::NonContiguousId { position, id } => {
                write!(f, "bus at position {position} has id {id}; ids must be 0..n-1 in order")
            }
            Violation::UnknownEndpoint { line, bus } => {
                write!(f, "line {line} references unknown bus {bus}")
            }
            Violation::SelfLoop { line, bus } => write!(f, "line {line} connects bus {bus} to itself"),
            Violation::NonPositiveSusceptance { line, value } => {
                write!(f, "line {line} has non-positive susceptance {value}")
            }
            Violation::DuplicateLine { first, second } => {
                write!(f, "lines {first} and {second} join the same pair of buses")
            }
            Violation::BadParameter { bus, field, value } => {
                write!(f, "bus {bus} has invalid {field} = {value}")
            }
            Violation::Disconnected { components } => {
                write!(
                    f,
                    "network is disconnected; components: {}",
                    format_components(components)
                )
            }
        }
    }
}

/// Collects every structural and parameter problem in `network`. Never fails;
/// an empty result means the network is valid.
pub fn validate_network(network: &PowerNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = network.buses.len();
    if n == 0 {
        out.push(Violation::Empty);
        return out;
    }
    for (position, bus) in network.buses.iter().enumerate() {
        if bus.id != position {
            out.push(Violation::NonContiguousId { position, id: bus.id });
        }
        if !bus.injection.is_finite() {
            out.push(Violation::BadParameter {
                bus: bus.id,
                field: "injection",
                value: bus.injection,
            });
        }
        if let BusKind::Generator(p) = &bus.kind {
            if !(p.inertia > 0.0) || !p.inertia.is_finite() {
                out.push(Violation::BadParameter {
                    bus: bus.id,
                    field: "inertia",
                    value: p.inertia,
                });
            }
            if !(p.damping >= 0.0) || !p.damping.is_finite() {
                out.push(Violation::BadParameter {
                    bus: bus.id,
                    field: "damping",
                    value: p.damping,
                });
            }
            if !(p.governor_droop > 0.0) || !p.governor_droop.is_finite() {
                out.push(Violation::BadParameter {
                    bus: bus.id,
                    field: "governor_droop",
                    value: p.governor_droop,
                });
            }
        }
    }

    let mut seen: Vec<((usize, usize), usize)> = Vec::new();
    let mut endpoints_ok = true;
    for (idx, line) in network.lines.iter().enumerate() {
        for bus in [line.from, line.to] {
            if bus >= n {
                out.push(Violation::UnknownEndpoint { line: idx, bus });
                endpoints_ok = false;
            }
        }
        if line.from == line.to {
            out.push(Violation::SelfLoop {
                line: idx,
                bus: line.from,
            });
        }
        if !(line.susceptance > 0.0) || !line.susceptance.is_finite() {
            out.push(Violation::NonPositiveSusceptance {
                line: idx,
                value: line.susceptance,
            });
        }
        let key = (line.from.min(line.to), line.from.max(line.to));
        if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
            out.push(Violation::DuplicateLine {
                first: *first,
                second: idx,
            });
        } else {
            seen.push((key, idx));
        }
    }

    if endpoints_ok {
        let components = connected_components(n, network.lines.iter().map(|l| (l.from, l.to)));
        if components.len() > 1 {
            out.push(Violation::Disconnected { components });
        }
    }
    out
}

/// Connected components of an undirected graph on `n` nodes, each sorted,
/// ordered by smallest member.
pub fn connected_components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Symmetric, zero-row-sum, susceptance-weighted graph Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMatrix(DMatrix<f64>);

impl LaplacianMatrix {
    /// Wraps a matrix after checking the Laplacian invariants (square,
    /// symmetric, zero row sums, non-positive off-diagonals).
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, GridError> {
        if m.nrows() != m.ncols() {
            return Err(GridError::NotLaplacian(format!(
                "{}x{} is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        let scale = m.amax().max(1.0);
        for i in 0..n {
            let row_sum: f64 = m.row(i).sum();
            if row_sum.abs() > ROW_SUM_TOL * scale {
                return Err(GridError::NotLaplacian(format!("row {i} sums to {row_sum:e}")));
            }
            for j in 0..n {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(GridError::NotLaplacian(format!("asymmetric at ({i},{j})")));
                }
                if i != j && m[(i, j)] > 0.0 {
                    return Err(GridError::NotLaplacian(format!("positive off-diagonal at ({i},{j})")));
                }
            }
        }
        Ok(LaplacianMatrix(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Off-diagonal weight between `i` and `j` (the effective susceptance).
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        -self.0[(i, j)]
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.0.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Builds L_B with (L)_ij = -b_ij on lines and the incident susceptance sum on
/// the diagonal. Rejects invalid or disconnected networks.
pub fn build_laplacian(network: &PowerNetwork) -> Result<LaplacianMatrix, GridError> {
    let violations = validate_network(network);
    if let Some(Violation::Disconnected { components }) =
        violations.iter().find(|v| matches!(v, Violation::Disconnected { .. }))
    {
        return Err(GridError::Disconnected {
            components: components.clone(),
        });
    }
    if !violations.is_empty() {
        return Err(GridError::Invalid(violations));
    }
    let n = network.buses.len();
    let mut m = DMatrix::zeros(n, n);
    for line in &network.lines {
        let (i, j, b) = (line.from, line.to, line.susceptance);
        m[(i, j)] -= b;
        m[(j, i)] -= b;
        m[(i, i)] += b;
        m[(j, j)] += b;
    }
    Ok(LaplacianMatrix(m))
}

/// Result of eliminating buses from a Laplacian.
#[derive(Debug, Clone)]
pub struct KronReduction {
    pub laplacian: LaplacianMatrix,
    /// Retained bus indices of the input, ascending; row k of the result is `retained[k]`.
    pub retained: Vec<usize>,
    /// `-L_re L_ee^{-1}`: maps injections at eliminated buses onto retained buses.
    /// Columns follow the eliminated buses in ascending order.
    pub injection_map: DMatrix<f64>,
    pub eliminated: Vec<usize>,
}

/// Schur complement `L_rr - L_re L_ee^{-1} L_er` onto `retained`.
pub fn kron_reduce(laplacian: &LaplacianMatrix, retained: &BTreeSet<usize>) -> Result<LaplacianMatrix, GridError> {
    kron_reduce_full(laplacian, retained).map(|r| r.laplacian)
}

pub fn kron_reduce_full(laplacian: &LaplacianMatrix, retained: &BTreeSet<usize>) -> Result<KronReduction, GridError> {
    let n = laplacian.dim();
    if retained.is_empty() {
        return Err(GridError::EmptyRetainedSet);
    }
    if let Some(&bad) = retained.iter().find(|&&r| r >= n) {
        return Err(GridError::UnknownBus(bad));
    }
    let kept: Vec<usize> = retained.iter().copied().collect();
    let elim: Vec<usize> = (0..n).filter(|i| !retained.contains(i)).collect();
    let l = laplacian.matrix();
    if elim.is_empty() {
        return Ok(KronReduction {
            laplacian: laplacian.clone(),
            retained: kept,
            injection_map: DMatrix::zeros(n, 0),
            eliminated: elim,
        });
    }

    // Every island of eliminated buses must touch a retained bus, otherwise L_ee is singular.
    let mut edges = Vec::new();
    for (a, &ba) in elim.iter().enumerate() {
        for (b, &bb) in elim.iter().enumerate().skip(a + 1) {
            if l[(ba, bb)] != 0.0 {
                edges.push((a, b));
            }
        }
    }
    for island in connected_components(elim.len(), edges) {
        let anchored = island.iter().any(|&k| kept.iter().any(|&r| l[(elim[k], r)] != 0.0));
        if !anchored {
            let mut buses: Vec<usize> = island.iter().map(|&k| elim[k]).collect();
            buses.sort_unstable();
            return Err(GridError::SingularEliminatedBlock(buses));
        }
    }

    let select =
        |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| l[(rows[i], cols[j])]);
    let l_rr = select(&kept, &kept);
    let l_re = select(&kept, &elim);
    let l_ee = select(&elim, &elim);

    let chol = l_ee
        .cholesky()
        .ok_or_else(|| GridError::SingularEliminatedBlock(elim.clone()))?;
    // L_ee^{-1} L_er
    let solved = chol.solve(&l_re.transpose());
    let mut reduced = l_rr - &l_re * &solved;
    let injection_map = -solved.transpose();

    // Restore exact symmetry and zero row sums lost to rounding.
    let k = kept.len();
    for i in 0..k {
        for j in (i + 1)..k {
            let w = 0.5 * (reduced[(i, j)] + reduced[(j, i)]);
            let w = w.min(0.0);
            reduced[(i, j)] = w;
            reduced[(j, i)] = w;
        }
    }
    for i in 0..k {
        let off: f64 = (0..k).filter(|&j| j != i).map(|j| reduced[(i, j)]).sum();
        reduced[(i, i)] = -off;
    }

    Ok(KronReduction {
        laplacian: LaplacianMatrix(reduced),
        retained: kept,
        injection_map,
        eliminated: elim,
    })
}

/// A generator-only network obtained by Kron reduction, with the mapping back
/// to the original bus ids.
#[derive(Debug, Clone)]
pub struct ReducedNetwork {
    pub network: PowerNetwork,
    /// `original_ids[k]` is the id in the source network of reduced bus `k`.
    pub original_ids: Vec<usize>,
    /// Load bus ids of the source network, ascending.
    pub eliminated: Vec<usize>,
    /// Share of an injection at `eliminated[j]` that lands on reduced bus `k`
    /// is entry `(k, j)`.
    pub injection_map: DMatrix<f64>,
}

/// Off-diagonal weights below this fraction of the largest are dropped when
/// turning a reduced Laplacian back into lines.
const LINE_DROP_REL: f64 = 1e-14;

impl PowerNetwork {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Self {
        PowerNetwork { buses, lines }
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn generator_ids(&self) -> Vec<usize> {
        self.buses.iter().filter(|b| b.is_generator()).map(|b| b.id).collect()
    }

    pub fn all_generators(&self) -> bool {
        self.buses.iter().all(Bus::is_generator)
    }

    pub fn injections(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.buses.iter().map(|b| b.injection))
    }

    /// Eliminates every load bus. Load injections are redistributed onto the
    /// generators through `-L_re L_ee^{-1}`, which preserves their total.
    pub fn kron_reduce_loads(&self) -> Result<ReducedNetwork, GridError> {
        let laplacian = build_laplacian(self)?;
        let retained: BTreeSet<usize> = self.generator_ids().into_iter().collect();
        let red = kron_reduce_full(&laplacian, &retained)?;
        let p = self.injections();
        let p_elim = DVector::from_iterator(red.eliminated.len(), red.eliminated.iter().map(|&e| p[e]));
        let shifted = &red.injection_map * p_elim;

        let buses = red
            .retained
            .iter()
            .enumerate()
            .map(|(k, &orig)| Bus {
                id: k,
                kind: self.buses[orig].kind,
                injection: self.buses[orig].injection + shifted.get(k).copied().unwrap_or(0.0),
            })
            .collect();
        let lines = lines_from_laplacian(&red.laplacian);
        Ok(ReducedNetwork {
            network: PowerNetwork { buses, lines },
            original_ids: red.retained,
            eliminated: red.eliminated,
            injection_map: red.injection_map,
        })
    }
}

/// Lines encoded by the off-diagonal entries of a Laplacian.
pub fn lines_from_laplacian(laplacian: &LaplacianMatrix) -> Vec<Line> {
    let m = laplacian.matrix();
    let n = m.nrows();
    let scale = m.amax();
    let mut lines = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let b = -m[(i, j)];
            if b > LINE_DROP_REL * scale {
                lines.push(Line::new(i, j, b));
            }
        }
    }
    lines
}
