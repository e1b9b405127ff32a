use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use idroop::analysis::allocation::CostWeights;
use idroop::analysis::{
    h2_closed_form, h2_norm, modal_decompose, verify_steady_state_optimality, AnalysisError, ClosedFormKind, H2Result,
    HomogeneousParams, OptimalityReport,
};
use idroop::control::{check_decentralized_stability, ControlError, InverterMode, StabilityCertificate};
use idroop::document::{Case, DocumentError, ModeName, NetworkDocument};
use idroop::dynamics::{assemble_labeled, steady_state as compute_steady_state, DynamicsError};
use idroop::sim::{
    compute_metrics, simulate_deterministic, simulate_stochastic, Metrics, SimConfig, SimError, DEFAULT_DT,
    DEFAULT_HORIZON, DEFAULT_STOCHASTIC_HORIZON,
};
use idroop::sweep::{run_sweep, SweepError, SweepSpec, SweepValue};
use idroop::StateSpaceModel;

use crate::Common;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<DocumentError> for CliError {
    fn from(e: DocumentError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::ZeroDamping | DynamicsError::SingularAngles => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Dynamics(inner) => inner.into(),
            AnalysisError::Shape(_)
            | AnalysisError::Heterogeneous(_)
            | AnalysisError::EmptyParticipants
            | AnalysisError::NonPositive { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Validation(e.to_string()),
            SimError::Divergence { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn load(common: &Common) -> Result<Case, CliError> {
    let text = fs::read_to_string(&common.network).map_err(|e| io_err(&common.network, e))?;
    let case = NetworkDocument::from_json(&text)?.to_case()?;
    match &common.mode {
        None => Ok(case),
        Some(m) => {
            let mode = ModeName::parse(m)
                .ok_or_else(|| CliError::Validation(format!("unknown mode {m:?} (expected cp, dc, vi or idroop)")))?;
            Ok(case.with_mode(mode)?)
        }
    }
}

fn model(case: &Case) -> Result<StateSpaceModel, CliError> {
    Ok(assemble_labeled(
        &case.network,
        &case.configs,
        &case.noise,
        case.bus_labels.clone(),
    )?)
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

#[derive(Serialize)]
struct SteadyStateReport {
    omega0: f64,
    buses: Vec<SteadyBus>,
    optimality: OptimalityReport,
}

#[derive(Serialize)]
struct SteadyBus {
    bus: usize,
    mode: &'static str,
    theta_star: f64,
    q_r_star: f64,
    x_star: Option<f64>,
    delta_q_g: f64,
    delta_q_r: f64,
}

pub fn steady_state(common: &Common) -> Result<(), CliError> {
    let case = load(common)?;
    let ss = compute_steady_state(&case.network, &case.configs)?;
    let weights = CostWeights::from_droops(&case.network, &case.configs);
    let optimality = verify_steady_state_optimality(&case.network, &case.configs, &weights)?;
    let buses = (0..case.network.len())
        .map(|i| SteadyBus {
            bus: case.bus_labels[i],
            mode: case.configs[i].mode.name(),
            theta_star: ss.theta_star[i],
            q_r_star: ss.q_r_star[i],
            x_star: ss.x_star[i],
            delta_q_g: ss.delta_q_g_star[i],
            delta_q_r: ss.delta_q_r_star[i],
        })
        .collect();
    let report = SteadyStateReport {
        omega0: ss.omega0,
        buses,
        optimality,
    };
    if common.json {
        print_json(&report);
        return Ok(());
    }
    println!("omega0 {:.9}", report.omega0);
    println!(
        "{:>5} {:>7} {:>13} {:>13} {:>13} {:>13} {:>13}",
        "bus", "mode", "theta_star", "q_r_star", "x_star", "delta_q_g", "delta_q_r"
    );
    for b in &report.buses {
        let x = b.x_star.map_or("-".to_string(), |x| format!("{x:.6e}"));
        println!(
            "{:>5} {:>7} {:>13.6e} {:>13.6e} {:>13} {:>13.6e} {:>13.6e}",
            b.bus, b.mode, b.theta_star, b.q_r_star, x, b.delta_q_g, b.delta_q_r
        );
    }
    let o = &report.optimality;
    println!(
        "optimality (alpha = R): {} (max gap {:.3e}), imbalance {:.9}, lambda* {:.9}",
        if o.pass { "pass" } else { "FAIL" },
        o.max_gap,
        o.delta_p,
        o.allocation.lambda_star
    );
    Ok(())
}

pub struct SimulateArgs {
    pub out: PathBuf,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub stochastic: bool,
    pub seed: u64,
    pub stride: usize,
}

#[derive(Serialize)]
struct MetricsFile {
    stochastic: bool,
    seed: Option<u64>,
    dt: f64,
    horizon: f64,
    omega0: f64,
    metrics: Metrics,
}

pub fn simulate(common: &Common, args: &SimulateArgs) -> Result<(), CliError> {
    let case = load(common)?;
    let m = model(&case)?;
    let doc_sim = case.simulation.unwrap_or(idroop::document::SimulationDoc {
        dt: None,
        horizon: None,
    });
    let default_horizon = if args.stochastic {
        DEFAULT_STOCHASTIC_HORIZON
    } else {
        DEFAULT_HORIZON
    };
    let dt = args.dt.or(doc_sim.dt).unwrap_or(DEFAULT_DT);
    let horizon = args.horizon.or(doc_sim.horizon).unwrap_or(default_horizon);
    let cfg = SimConfig {
        dt,
        horizon,
        disturbances: case.disturbances.clone(),
        seed: args.seed,
        noise_enabled: args.stochastic,
        record_stride: args.stride,
        ..Default::default()
    };
    let traj = if args.stochastic {
        simulate_stochastic(&m, &cfg)?
    } else {
        simulate_deterministic(&m, &cfg)?
    };
    // ω0 of the disturbed network: the run settles towards it.
    let mut disturbed = case.network.clone();
    for b in &mut disturbed.buses {
        b.injection = 0.0;
    }
    for d in &case.disturbances {
        disturbed.buses[d.bus].injection += d.delta_p;
    }
    let mut configs = case.configs.clone();
    for c in &mut configs {
        c.q0 = 0.0;
    }
    let ss = compute_steady_state(&disturbed, &configs)?;
    let metrics = compute_metrics(&traj, Some(&ss));

    ensure_dir(&args.out)?;
    let csv_path = args.out.join("trajectory.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    w.write_record(traj.csv_header()).map_err(|e| io_err(&csv_path, e))?;
    for k in 0..traj.len() {
        w.write_record(traj.csv_row(k).iter().map(|v| v.to_string()))
            .map_err(|e| io_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;

    let file = MetricsFile {
        stochastic: args.stochastic,
        seed: args.stochastic.then_some(args.seed),
        dt,
        horizon,
        omega0: ss.omega0,
        metrics,
    };
    let metrics_path = args.out.join("metrics.json");
    let mut text = serde_json::to_string_pretty(&file).expect("metrics serialize");
    text.push('\n');
    write_file(&metrics_path, text.as_bytes())?;

    if common.json {
        print_json(&file);
    } else {
        let mt = &file.metrics;
        println!("wrote {} and {}", csv_path.display(), metrics_path.display());
        println!("nadir                 {:.9}", mt.nadir);
        println!(
            "settling frequency    {:.9} (omega0 {:.9})",
            mt.settling_frequency, file.omega0
        );
        println!("peak inverter power   {:.9}", mt.peak_inverter_power);
        if args.stochastic {
            println!("output variance       {:.9}", mt.empirical_output_variance);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct H2Report {
    route: &'static str,
    result: H2Result,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form: Option<ClosedFormReport>,
}

#[derive(Serialize)]
struct ClosedFormReport {
    kind: ClosedFormKind,
    params: HomogeneousParams,
    value: f64,
    relative_difference: Option<f64>,
}

/// Analytic-formula inputs when every bus is identical and runs DC (droop
/// formula) or CP (swing formula).
fn closed_form_params(case: &Case) -> Result<(ClosedFormKind, HomogeneousParams), CliError> {
    let not = |why: &str| CliError::Validation(format!("closed form not applicable: {why}"));
    let gens: Vec<_> = case
        .network
        .buses
        .iter()
        .map(|b| *b.generator_params().expect("reduced networks are all generators"))
        .collect();
    if gens.iter().any(|g| g != &gens[0]) {
        return Err(not("generator parameters differ between buses"));
    }
    if case.configs.iter().any(|c| c.mode != case.configs[0].mode) {
        return Err(not("inverter modes differ between buses"));
    }
    if case.noise.iter().any(|k| k != &case.noise[0]) {
        return Err(not("noise gains differ between buses"));
    }
    let g = gens[0];
    let k = case.noise[0];
    let (kind, r_r, k2) = match case.configs[0].mode {
        InverterMode::Droop { r_r } => (ClosedFormKind::Droop, r_r, k.k2),
        InverterMode::ConstantPower => (ClosedFormKind::Swing, f64::INFINITY, 0.0),
        _ => return Err(not("fleet must be all DC or all CP")),
    };
    Ok((
        kind,
        HomogeneousParams {
            n: case.network.len(),
            m: g.inertia,
            d: g.damping,
            r_g: g.governor_droop,
            r_r,
            k1: k.k1,
            k2,
        },
    ))
}

pub fn h2(common: &Common, closed_form: bool) -> Result<(), CliError> {
    let case = load(common)?;
    let m = model(&case)?;
    // Homogeneous fleets decouple into small modal subsystems with the same
    // total norm.
    let (route, result) = match modal_decompose(&case.network, &case.configs, &case.noise) {
        Ok(dec) if m.derivative_noise_present => ("modal, frequency-weighted", dec.total_norm()?),
        Ok(dec) => ("modal, gramian", dec.total_norm()?),
        Err(AnalysisError::Heterogeneous(_)) if m.derivative_noise_present => ("frequency-weighted", h2_norm(&m)?),
        Err(AnalysisError::Heterogeneous(_)) => ("gramian", h2_norm(&m)?),
        Err(e) => return Err(e.into()),
    };
    let closed_form = if closed_form {
        let (kind, params) = closed_form_params(&case)?;
        let value = h2_closed_form(kind, &params)?;
        let relative_difference = result.value().map(|v| {
            if value == 0.0 {
                v.abs()
            } else {
                (v - value).abs() / value.abs()
            }
        });
        Some(ClosedFormReport {
            kind,
            params,
            value,
            relative_difference,
        })
    } else {
        None
    };
    let report = H2Report {
        route,
        result,
        closed_form,
    };
    if common.json {
        print_json(&report);
        return Ok(());
    }
    println!("route        {}", report.route);
    match report.result {
        H2Result::Finite { value } => println!("h2 squared   {value:.12}"),
        H2Result::Infinite {
            feedthrough_gain,
            probe_gain,
        } => println!(
            "h2 squared   infinite (per-mode feedthrough gain {feedthrough_gain:.6}, gain at 1e6 Hz {probe_gain:.6})"
        ),
    }
    if let Some(cf) = &report.closed_form {
        println!("closed form  {:.12} ({:?})", cf.value, cf.kind);
        if let Some(r) = cf.relative_difference {
            println!("rel. diff    {r:.3e}");
        }
    }
    Ok(())
}

pub fn stability(common: &Common) -> Result<(), CliError> {
    let case = load(common)?;
    let mut cert: StabilityCertificate = check_decentralized_stability(&case.configs, &case.network)?;
    for b in &mut cert.buses {
        b.bus = case.bus_labels[b.bus];
    }
    if common.json {
        print_json(&cert);
        return Ok(());
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    println!(
        "{:>5} {:>7} {:>12} {:>12} {:>12} {:>5}  note",
        "bus", "mode", "condition1", "condition2", "T", "pass"
    );
    for b in &cert.buses {
        println!(
            "{:>5} {:>7} {:>12} {:>12} {:>12} {:>5}  {}",
            b.bus,
            b.mode,
            opt(b.condition1),
            opt(b.condition2),
            opt(b.t_entry),
            if b.pass { "yes" } else { "no" },
            b.note.as_deref().unwrap_or("")
        );
    }
    println!(
        "certificate: {}{}",
        if cert.pass { "PASS" } else { "FAIL" },
        if cert.mixed_fleet {
            " (mixed fleet: covers iDroop buses only)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Serialize)]
struct ModalReport {
    modes: Vec<ModeRow>,
    total: H2Result,
}

#[derive(Serialize)]
struct ModeRow {
    mode: usize,
    eigenvalue: f64,
    h2: H2Result,
}

pub fn modal(common: &Common) -> Result<(), CliError> {
    let case = load(common)?;
    let dec = modal_decompose(&case.network, &case.configs, &case.noise)?;
    let norms = dec.mode_norms()?;
    let report = ModalReport {
        modes: dec
            .eigenvalues
            .iter()
            .zip(norms)
            .enumerate()
            .map(|(mode, (&eigenvalue, h2))| ModeRow { mode, eigenvalue, h2 })
            .collect(),
        total: dec.total_norm()?,
    };
    if common.json {
        print_json(&report);
        return Ok(());
    }
    println!("{:>5} {:>14} {:>18}", "mode", "eigenvalue", "h2 squared");
    for r in &report.modes {
        println!("{:>5} {:>14.9} {:>18}", r.mode, r.eigenvalue, fmt_h2(&r.h2));
    }
    println!("total {}", fmt_h2(&report.total));
    Ok(())
}

fn fmt_h2(r: &H2Result) -> String {
    match r {
        H2Result::Finite { value } => format!("{value:.12}"),
        H2Result::Infinite { feedthrough_gain, .. } => format!("infinite (gain {feedthrough_gain:.6})"),
    }
}

pub fn sweep(
    common: &Common,
    spec_path: &Path,
    out: Option<&Path>,
    dt: Option<f64>,
    horizon: Option<f64>,
) -> Result<(), CliError> {
    let case = load(common)?;
    let text = fs::read_to_string(spec_path).map_err(|e| io_err(spec_path, e))?;
    let spec = SweepSpec::from_json(&text)?;
    let doc_sim = case.simulation;
    let sim = SimConfig {
        dt: dt.or(doc_sim.and_then(|s| s.dt)).unwrap_or(DEFAULT_DT),
        horizon: horizon.or(doc_sim.and_then(|s| s.horizon)).unwrap_or(DEFAULT_HORIZON),
        ..Default::default()
    };
    let table = run_sweep(&case, &spec, &sim)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Validation(e.to_string());
    w.write_record(&table.header).map_err(csv_err)?;
    let mut failed = 0;
    for row in &table.rows {
        if let SweepValue::Failed(why) = &row.value {
            failed += 1;
            eprintln!("warning: point {:?} failed: {why}", row.coords);
        }
        let mut fields: Vec<String> = row.coords.iter().map(|c| c.to_string()).collect();
        fields.push(row.value.csv_field());
        w.write_record(&fields).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
    match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join("sweep.csv");
            write_file(&path, &bytes)?;
            eprintln!("wrote {} ({} points)", path.display(), table.rows.len());
        }
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| CliError::Validation(e.to_string()))?,
    }
    if failed == table.rows.len() {
        return Err(CliError::Numerical("every sweep point failed".into()));
    }
    Ok(())
}

pub fn kron(common: &Common, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(&common.network).map_err(|e| io_err(&common.network, e))?;
    let source = NetworkDocument::from_json(&text)?;
    let case = source.to_case()?;
    let mapping: Vec<String> = case
        .bus_labels
        .iter()
        .enumerate()
        .map(|(k, id)| format!("{k}<-{id}"))
        .collect();
    let note = format!(
        "Kron-reduced onto generator buses (reduced id <- source id: {}).",
        mapping.join(", ")
    );
    let comment = match &source.comment {
        Some(c) => format!("{c} {note}"),
        None => note,
    };
    let mut doc = NetworkDocument::from_parts(&case.network, &case.configs, &case.noise, Some(comment));
    doc.inverters = case
        .inverter_docs
        .iter()
        .enumerate()
        .filter_map(|(k, d)| d.clone().map(|d| idroop::document::InverterDoc { bus: k, ..d }))
        .collect();
    doc.disturbances = case.disturbances.clone();
    doc.simulation = case.simulation;
    let mut json = doc.to_json();
    json.push('\n');
    match out {
        Some(path) => write_file(path, json.as_bytes()),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
