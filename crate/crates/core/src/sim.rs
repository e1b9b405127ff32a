//! Fixed-step time-domain simulation of the closed loop.
//!
//! Deterministic runs use classical RK4 with injections held constant over
//! each step. Stochastic runs add Euler-Maruyama noise increments on top of
//! the RK4 drift.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{StateLayout, StateSpaceModel, SteadyState};

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_HORIZON: f64 = 30.0;
pub const DEFAULT_STOCHASTIC_HORIZON: f64 = 2000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("state diverged at t = {time}")]
    Divergence { time: f64, last_finite: DVector<f64> },
}

/// Power step of `delta_p` at `bus` from `time` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    pub bus: usize,
    pub delta_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub disturbances: Vec<Disturbance>,
    pub seed: u64,
    pub noise_enabled: bool,
    /// Keep every `record_stride`-th grid point (1 keeps all).
    pub record_stride: usize,
    /// Defaults to the origin.
    pub initial_state: Option<DVector<f64>>,
    /// Injection applied over the whole run on top of the disturbances.
    pub constant_injection: Option<DVector<f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            disturbances: Vec::new(),
            seed: 0,
            noise_enabled: false,
            record_stride: 1,
            initial_state: None,
            constant_injection: None,
        }
    }
}

impl SimConfig {
    pub fn deterministic(dt: f64, horizon: f64, disturbances: Vec<Disturbance>) -> Self {
        SimConfig {
            dt,
            horizon,
            disturbances,
            ..Default::default()
        }
    }

    pub fn stochastic(dt: f64, horizon: f64, seed: u64) -> Self {
        SimConfig {
            dt,
            horizon,
            seed,
            noise_enabled: true,
            ..Default::default()
        }
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// First grid index at or after `time`.
    fn event_step(&self, time: f64) -> usize {
        let k = (time / self.dt - 1e-9).ceil();
        k.max(0.0) as usize
    }

    fn validate(&self, model: &StateSpaceModel) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be at least dt {}", self.horizon, self.dt));
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1".into());
        }
        let n = model.n_channels();
        for d in &self.disturbances {
            if !(0.0..=self.horizon).contains(&d.time) {
                return bad(format!("disturbance time {} outside [0, {}]", d.time, self.horizon));
            }
            if d.bus >= n {
                return bad(format!("disturbance bus {} out of range (n = {n})", d.bus));
            }
            if !d.delta_p.is_finite() {
                return bad("disturbance size must be finite".into());
            }
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != model.dim() {
                return bad(format!(
                    "initial state has length {}, model has {}",
                    x0.len(),
                    model.dim()
                ));
            }
        }
        if let Some(u) = &self.constant_injection {
            if u.len() != n {
                return bad(format!("constant injection has length {}, expected {n}", u.len()));
            }
        }
        Ok(())
    }
}

/// Sampled simulation output on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Full state at each sample, laid out as in `layout`.
    pub states: Vec<DVector<f64>>,
    /// Inverter power deviation per bus at each sample.
    pub q_r: Vec<DVector<f64>>,
    pub layout: StateLayout,
    /// Sign of the net disturbance (0 when none).
    pub disturbance_sign: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn omega(&self, k: usize, bus: usize) -> f64 {
        self.states[k][self.layout.omega(bus)]
    }

    pub fn theta(&self, k: usize, bus: usize) -> f64 {
        self.states[k][self.layout.theta(bus)]
    }

    pub fn x(&self, k: usize, bus: usize) -> Option<f64> {
        self.layout.x(bus).map(|j| self.states[k][j])
    }

    /// `t, theta_dev_<id>..., omega_dev_<id>..., q_r_dev_<id>..., x_<id>...`
    pub fn csv_header(&self) -> Vec<String> {
        let l = &self.layout;
        let mut h = vec!["t".to_string()];
        h.extend(l.bus_labels.iter().map(|id| format!("theta_dev_{id}")));
        h.extend(l.bus_labels.iter().map(|id| format!("omega_dev_{id}")));
        h.extend(l.bus_labels.iter().map(|id| format!("q_r_dev_{id}")));
        h.extend(l.idroop_buses.iter().map(|&b| format!("x_{}", l.bus_labels[b])));
        h
    }

    /// Values in the order of [`Trajectory::csv_header`].
    pub fn csv_row(&self, k: usize) -> Vec<f64> {
        let l = &self.layout;
        let s = &self.states[k];
        let mut row = Vec::with_capacity(1 + 3 * l.n_buses + l.idroop_buses.len());
        row.push(self.times[k]);
        row.extend((0..l.n_buses).map(|i| s[l.theta(i)]));
        row.extend((0..l.n_buses).map(|i| s[l.omega(i)]));
        row.extend(self.q_r[k].iter().copied());
        row.extend(s.rows(2 * l.n_buses, l.idroop_buses.len()).iter().copied());
        row
    }
}

/// Drift `A x + c` with constant `c`, integrated by RK4 with reused buffers.
struct Rk4 {
    k1: DVector<f64>,
    k2: DVector<f64>,
    k3: DVector<f64>,
    k4: DVector<f64>,
    tmp: DVector<f64>,
}

impl Rk4 {
    fn new(dim: usize) -> Self {
        let z = DVector::zeros(dim);
        Rk4 {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
        }
    }

    fn drift(a: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(c);
        out.gemv(1.0, a, x, 1.0);
    }

    fn step(&mut self, a: &DMatrix<f64>, c: &DVector<f64>, x: &mut DVector<f64>, dt: f64) {
        Self::drift(a, c, x, &mut self.k1);
        self.tmp.copy_from(x);
        self.tmp.axpy(0.5 * dt, &self.k1, 1.0);
        Self::drift(a, c, &self.tmp, &mut self.k2);
        self.tmp.copy_from(x);
        self.tmp.axpy(0.5 * dt, &self.k2, 1.0);
        Self::drift(a, c, &self.tmp, &mut self.k3);
        self.tmp.copy_from(x);
        self.tmp.axpy(dt, &self.k3, 1.0);
        Self::drift(a, c, &self.tmp, &mut self.k4);
        x.axpy(dt / 6.0, &self.k1, 1.0);
        x.axpy(dt / 3.0, &self.k2, 1.0);
        x.axpy(dt / 3.0, &self.k3, 1.0);
        x.axpy(dt / 6.0, &self.k4, 1.0);
    }
}

/// Injection per step: returns the list of `(first step, injection vector)`
/// segments, in order.
fn injection_schedule(model: &StateSpaceModel, cfg: &SimConfig) -> Vec<(usize, DVector<f64>)> {
    let n = model.n_channels();
    let base = cfg.constant_injection.clone().unwrap_or_else(|| DVector::zeros(n));
    let mut events: Vec<(usize, Disturbance)> = cfg.disturbances.iter().map(|d| (cfg.event_step(d.time), *d)).collect();
    events.sort_by_key(|(k, _)| *k);
    let mut segments = vec![(0, base)];
    for (k, d) in events {
        let mut u = segments.last().expect("nonempty").1.clone();
        u[d.bus] += d.delta_p;
        if segments.last().expect("nonempty").0 == k {
            segments.last_mut().expect("nonempty").1 = u;
        } else {
            segments.push((k, u));
        }
    }
    segments
}

fn net_sign(cfg: &SimConfig) -> f64 {
    let total: f64 = cfg.disturbances.iter().map(|d| d.delta_p).sum();
    if total > 0.0 {
        1.0
    } else if total < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn run(model: &StateSpaceModel, cfg: &SimConfig, noisy: bool) -> Result<Trajectory, SimError> {
    cfg.validate(model)?;
    let dim = model.dim();
    let n = model.n_channels();
    let steps = cfg.steps();
    let dt = cfg.dt;
    let mut x = cfg.initial_state.clone().unwrap_or_else(|| DVector::zeros(dim));

    let schedule = injection_schedule(model, cfg);
    let drift_offsets: Vec<DVector<f64>> = schedule.iter().map(|(_, u)| &model.injection * u).collect();
    let mut segment = 0;

    let b1 = model.b_injection();
    let b2 = model.b_measurement();
    let b3 = model.b_derivative();
    let nonzero = |m: &DMatrix<f64>| m.iter().any(|&v| v != 0.0);
    let (use_b1, use_b2, use_b3) = (nonzero(&b1), nonzero(&b2), nonzero(&b3));
    let noisy = noisy && (use_b1 || use_b2 || use_b3);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sqrt_dt = dt.sqrt();
    let mut dw1 = DVector::zeros(n);
    let mut dw2 = DVector::zeros(n);
    let mut dw2_prev = DVector::zeros(n);

    let capacity = steps / cfg.record_stride + 2;
    let mut traj = Trajectory {
        times: Vec::with_capacity(capacity),
        states: Vec::with_capacity(capacity),
        q_r: Vec::with_capacity(capacity),
        layout: model.layout.clone(),
        disturbance_sign: net_sign(cfg),
    };
    let mut rate = DVector::zeros(dim);
    let mut record = |traj: &mut Trajectory, k: usize, x: &DVector<f64>, offset: &DVector<f64>| {
        // ω̇ from the drift; the power of virtual inertia inverters depends on it.
        Rk4::drift(&model.a, offset, x, &mut rate);
        traj.times.push(k as f64 * dt);
        traj.q_r.push(model.inverter_power_deviation(x, &rate));
        traj.states.push(x.clone());
    };

    let mut rk = Rk4::new(dim);
    for k in 0..steps {
        while segment + 1 < schedule.len() && schedule[segment + 1].0 <= k {
            segment += 1;
        }
        if k % cfg.record_stride == 0 {
            record(&mut traj, k, &x, &drift_offsets[segment]);
        }
        rk.step(&model.a, &drift_offsets[segment], &mut x, dt);
        if noisy {
            for v in dw1.iter_mut() {
                *v = sqrt_dt * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
            std::mem::swap(&mut dw2, &mut dw2_prev);
            for v in dw2.iter_mut() {
                *v = sqrt_dt * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
            if use_b1 {
                x.gemv(1.0, &b1, &dw1, 1.0);
            }
            if use_b2 {
                x.gemv(1.0, &b2, &dw2, 1.0);
            }
            if use_b3 {
                // w3 = d/dt w2 on the same sample path.
                let diff = (&dw2 - &dw2_prev) / dt;
                x.gemv(1.0, &b3, &diff, 1.0);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            let last_finite = traj.states.last().cloned().unwrap_or_else(|| DVector::zeros(dim));
            return Err(SimError::Divergence {
                time: (k + 1) as f64 * dt,
                last_finite,
            });
        }
    }
    if steps.is_multiple_of(cfg.record_stride) {
        while segment + 1 < schedule.len() && schedule[segment + 1].0 <= steps {
            segment += 1;
        }
        record(&mut traj, steps, &x, &drift_offsets[segment]);
    }
    Ok(traj)
}

pub fn simulate_deterministic(model: &StateSpaceModel, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    if cfg.noise_enabled {
        return Err(SimError::Config("noise_enabled is set; use simulate_stochastic".into()));
    }
    run(model, cfg, false)
}

pub fn simulate_stochastic(model: &StateSpaceModel, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    if !cfg.noise_enabled {
        return Err(SimError::Config(
            "noise_enabled is not set; use simulate_deterministic".into(),
        ));
    }
    run(model, cfg, true)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Extremal `δω` over buses and time, on the side of the disturbance.
    pub nadir: f64,
    /// Mean `δω` over the final 10% of the run.
    pub settling_frequency: f64,
    /// `settling_frequency - ω0`, when a steady state is given.
    pub settling_error: Option<f64>,
    /// Largest `|δq_r|` over buses and time.
    pub peak_inverter_power: f64,
    pub peak_inverter_power_per_bus: Vec<f64>,
    /// Time average of `yᵀy` over the final half of the run.
    pub empirical_output_variance: f64,
}

pub fn compute_metrics(traj: &Trajectory, steady: Option<&SteadyState>) -> Metrics {
    let n = traj.layout.n_buses;
    let len = traj.len();
    let t_end = traj.times.last().copied().unwrap_or(0.0);

    let mut lo = 0.0_f64;
    let mut hi = 0.0_f64;
    for k in 0..len {
        for i in 0..n {
            let w = traj.omega(k, i);
            lo = lo.min(w);
            hi = hi.max(w);
        }
    }
    let nadir = if traj.disturbance_sign < 0.0 {
        lo
    } else if traj.disturbance_sign > 0.0 {
        hi
    } else if -lo >= hi {
        lo
    } else {
        hi
    };

    let window_mean = |from: f64, f: &dyn Fn(usize) -> f64| {
        let ks: Vec<usize> = (0..len).filter(|&k| traj.times[k] >= from - 1e-12).collect();
        if ks.is_empty() {
            0.0
        } else {
            ks.iter().map(|&k| f(k)).sum::<f64>() / ks.len() as f64
        }
    };
    let settling_frequency = if n == 0 {
        0.0
    } else {
        window_mean(0.9 * t_end, &|k| {
            (0..n).map(|i| traj.omega(k, i)).sum::<f64>() / n as f64
        })
    };
    let empirical_output_variance = window_mean(0.5 * t_end, &|k| (0..n).map(|i| traj.omega(k, i).powi(2)).sum());

    let mut per_bus = vec![0.0_f64; n];
    for q in &traj.q_r {
        for (p, v) in per_bus.iter_mut().zip(q.iter()) {
            *p = p.max(v.abs());
        }
    }
    let peak_inverter_power = per_bus.iter().copied().fold(0.0, f64::max);

    Metrics {
        nadir,
        settling_frequency,
        settling_error: steady.map(|s| settling_frequency - s.omega0),
        peak_inverter_power,
        peak_inverter_power_per_bus: per_bus,
        empirical_output_variance,
    }
}
