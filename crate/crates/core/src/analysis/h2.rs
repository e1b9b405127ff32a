//! H2 norms of the closed loop with output `y = δω`.
//!
//! Two routes:
//! * [`h2_gramian`]: `tr(Bᵀ X B)` with `X` the observability Gramian. Valid
//!   only while the derivative-noise channel is silent.
//! * [`h2_frequency_weighted`]: substitutes `ŵ3(s) = s ŵ2(s)` and integrates
//!   `‖G(iω)‖_F²` over frequency. A non-zero limit of `G` at infinite
//!   frequency (direct feedthrough of the derivative noise into `δω`) makes
//!   the norm infinite.
//!
//! Both routes first remove the uniform angle shift, which `A` leaves
//! invariant and the output does not see.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use super::lyapunov::{solve_lyapunov, spectral_abscissa};
use super::AnalysisError;
use crate::dynamics::StateSpaceModel;

/// Limiting gains at or below this are treated as roundoff, not feedthrough.
pub const FEEDTHROUGH_THRESHOLD: f64 = 1e-9;

/// Frequency (Hz) at which the analytic feedthrough gain is cross-checked.
pub const PROBE_FREQUENCY_HZ: f64 = 1e6;

/// Squared H2 norm, in (rad/s)².
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum H2Result {
    Finite {
        value: f64,
    },
    Infinite {
        /// `σ_max(C B3)`: the transfer gain as frequency goes to infinity.
        feedthrough_gain: f64,
        /// `σ_max(G(i 2π f))` at [`PROBE_FREQUENCY_HZ`].
        probe_gain: f64,
    },
}

impl H2Result {
    pub fn finite(value: f64) -> Self {
        H2Result::Finite { value }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            H2Result::Finite { value } => Some(value),
            H2Result::Infinite { .. } => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, H2Result::Infinite { .. })
    }

    /// Squared norm as a float, `+inf` when infinite.
    pub fn as_f64(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

impl std::fmt::Display for H2Result {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            H2Result::Finite { value } => write!(f, "{value}"),
            H2Result::Infinite { feedthrough_gain, .. } => {
                write!(f, "infinite (feedthrough gain {feedthrough_gain})")
            }
        }
    }
}

/// Realization with the rotation mode projected out: `(Wᵀ A W, Wᵀ B, C W)`
/// where `W` is an orthonormal basis of the complement of the null vector.
/// The transfer function is unchanged because `A v = 0` and `C v = 0`.
#[derive(Debug, Clone)]
pub struct DeflatedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// Orthonormal basis (columns) of the orthogonal complement of `v`, taken
/// from a Householder reflector.
pub fn complement_basis(v: &DVector<f64>) -> DMatrix<f64> {
    let d = v.len();
    let u = v / v.norm();
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut h = u.clone();
    h[0] += sign;
    let hh = h.dot(&h);
    let reflector = DMatrix::identity(d, d) - (&h * h.transpose()) * (2.0 / hh);
    reflector.columns(1, d - 1).into_owned()
}

pub fn deflate(model: &StateSpaceModel) -> Result<DeflatedSystem, AnalysisError> {
    match &model.rotation_mode {
        None => Ok(DeflatedSystem {
            a: model.a.clone(),
            b: model.b.clone(),
            c: model.c.clone(),
        }),
        Some(v) => {
            let scale = model.a.amax().max(1.0);
            if (&model.a * v).amax() > 1e-10 * scale {
                return Err(AnalysisError::Shape(
                    "rotation vector is not in the null space of A".into(),
                ));
            }
            if (&model.c * v).amax() > 1e-12 {
                return Err(AnalysisError::UnobservableUnstable);
            }
            let w = complement_basis(v);
            let wt = w.transpose();
            Ok(DeflatedSystem {
                a: &wt * &model.a * &w,
                b: &wt * &model.b,
                c: &model.c * &w,
            })
        }
    }
}

fn require_hurwitz(a: &DMatrix<f64>) -> Result<(), AnalysisError> {
    let abscissa = spectral_abscissa(a);
    if abscissa < 0.0 {
        Ok(())
    } else {
        Err(AnalysisError::NotHurwitz { max_real: abscissa })
    }
}

/// Observability Gramian of the deflated realization:
/// `Aᵀ X + X A = -Cᵀ C`.
pub fn observability_gramian(sys: &DeflatedSystem) -> Result<DMatrix<f64>, AnalysisError> {
    solve_lyapunov(&sys.a, &(sys.c.transpose() * &sys.c))
}

/// `tr(Bᵀ X B)`. Refuses models whose derivative-noise channel is active,
/// since `w3 = ẇ2` is not white; use [`h2_frequency_weighted`] for those.
pub fn h2_gramian(model: &StateSpaceModel) -> Result<H2Result, AnalysisError> {
    if model.derivative_noise_present {
        return Err(AnalysisError::DerivativeNoise);
    }
    let sys = deflate(model)?;
    if sys.b.iter().all(|&v| v == 0.0) {
        require_hurwitz(&sys.a)?;
        return Ok(H2Result::finite(0.0));
    }
    let x = observability_gramian(&sys)?;
    let value = (sys.b.transpose() * x * &sys.b).trace();
    Ok(H2Result::finite(value.max(0.0)))
}

/// Quadrature settings for the frequency-weighted norm.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions {
    /// Simpson intervals per decade of angular frequency (even).
    pub points_per_decade: usize,
    /// Initial band, as decades of rad/s: `[10^lo, 10^hi]`.
    pub initial_decades: (i32, i32),
    /// Stop extending once the outermost decade adds less than this fraction.
    pub tail_tolerance: f64,
    /// Extra decades allowed on each side before giving up.
    pub max_extension: i32,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            points_per_decade: 2000,
            initial_decades: (-4, 4),
            tail_tolerance: 1e-6,
            max_extension: 12,
        }
    }
}

/// Transfer function of the weighted system, `G(s) = C (sI - A)⁻¹ [B1 | B2 + s B3]`,
/// evaluated through the Hessenberg form `A = Q H Qᵀ` so each frequency costs
/// one banded elimination.
struct WeightedTransfer {
    h: DMatrix<f64>,
    cq: DMatrix<f64>,
    qb1: DMatrix<f64>,
    qb2: DMatrix<f64>,
    qb3: DMatrix<f64>,
}

impl WeightedTransfer {
    fn new(sys: &DeflatedSystem, n: usize) -> Self {
        let (q, h) = sys.a.clone().hessenberg().unpack();
        let qt = q.transpose();
        WeightedTransfer {
            h,
            cq: &sys.c * &q,
            qb1: &qt * sys.b.columns(0, n),
            qb2: &qt * sys.b.columns(n, n),
            qb3: &qt * sys.b.columns(2 * n, n),
        }
    }

    /// `G(iω)` as an `outputs × 2n` matrix.
    fn eval(&self, omega: f64) -> DMatrix<Complex64> {
        let d = self.h.nrows();
        let n = self.qb1.ncols();
        let m = 2 * n;
        let s = Complex64::new(0.0, omega);
        let zero = Complex64::new(0.0, 0.0);

        // Row-major sI - H and right-hand side Qᵀ [B1 | B2 + s B3].
        let mut a = vec![zero; d * d];
        for i in 0..d {
            for j in i.saturating_sub(1)..d {
                a[i * d + j] = Complex64::new(-self.h[(i, j)], 0.0);
            }
            a[i * d + i] += s;
        }
        let mut x = vec![zero; d * m];
        for i in 0..d {
            for j in 0..n {
                x[i * m + j] = Complex64::new(self.qb1[(i, j)], 0.0);
                x[i * m + n + j] = self.qb2[(i, j)] + s * self.qb3[(i, j)];
            }
        }

        // Only one subdiagonal entry per column: pivot between adjacent rows.
        for k in 0..d.saturating_sub(1) {
            if a[(k + 1) * d + k].norm_sqr() > a[k * d + k].norm_sqr() {
                for j in k..d {
                    a.swap(k * d + j, (k + 1) * d + j);
                }
                for j in 0..m {
                    x.swap(k * m + j, (k + 1) * m + j);
                }
            }
            let f = a[(k + 1) * d + k] / a[k * d + k];
            a[(k + 1) * d + k] = zero;
            for j in (k + 1)..d {
                let v = a[k * d + j];
                a[(k + 1) * d + j] -= f * v;
            }
            for j in 0..m {
                let v = x[k * m + j];
                x[(k + 1) * m + j] -= f * v;
            }
        }
        for k in (0..d).rev() {
            for j in (k + 1)..d {
                let akj = a[k * d + j];
                for c in 0..m {
                    let v = x[j * m + c];
                    x[k * m + c] -= akj * v;
                }
            }
            let inv = a[k * d + k].inv();
            for c in 0..m {
                x[k * m + c] *= inv;
            }
        }

        let p = self.cq.nrows();
        DMatrix::from_fn(p, m, |r, c| (0..d).map(|k| x[k * m + c] * self.cq[(r, k)]).sum())
    }

    fn frobenius_sq(&self, omega: f64) -> f64 {
        self.eval(omega).iter().map(|z| z.norm_sqr()).sum()
    }
}

fn sigma_max_complex(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Composite Simpson over one decade `[10^k, 10^(k+1)]` of
/// `∫ f(ω) dω = ∫ f(e^u) e^u du`.
fn decade_integral(tf: &WeightedTransfer, k: i32, intervals: usize) -> f64 {
    let u0 = f64::from(k) * std::f64::consts::LN_10;
    let h = std::f64::consts::LN_10 / intervals as f64;
    let samples: Vec<f64> = (0..=intervals)
        .into_par_iter()
        .map(|j| {
            let omega = (u0 + h * j as f64).exp();
            tf.frobenius_sq(omega) * omega
        })
        .collect();
    let mut acc = samples[0] + samples[intervals];
    for (j, v) in samples.iter().enumerate().take(intervals).skip(1) {
        acc += if j % 2 == 1 { 4.0 } else { 2.0 } * v;
    }
    acc * h / 3.0
}

/// Frequency-weighted squared H2 norm with `ŵ3 = s ŵ2`, using the standard
/// two-sided convention `(1/2π) ∫_{-∞}^{∞} ‖G(iω)‖_F² dω`.
pub fn h2_frequency_weighted(model: &StateSpaceModel) -> Result<H2Result, AnalysisError> {
    h2_frequency_weighted_with(model, &QuadratureOptions::default())
}

pub fn h2_frequency_weighted_with(
    model: &StateSpaceModel,
    opts: &QuadratureOptions,
) -> Result<H2Result, AnalysisError> {
    let sys = deflate(model)?;
    require_hurwitz(&sys.a)?;
    let n = model.n_channels();
    let tf = WeightedTransfer::new(&sys, n);

    let direct = &model.c * model.b_derivative();
    let gain = if direct.is_empty() {
        0.0
    } else {
        direct.singular_values().max()
    };
    if gain > FEEDTHROUGH_THRESHOLD {
        let probe = sigma_max_complex(&tf.eval(2.0 * std::f64::consts::PI * PROBE_FREQUENCY_HZ));
        return Ok(H2Result::Infinite {
            feedthrough_gain: gain,
            probe_gain: probe,
        });
    }
    if sys.b.iter().all(|&v| v == 0.0) {
        return Ok(H2Result::finite(0.0));
    }

    let intervals = opts.points_per_decade + opts.points_per_decade % 2;
    let (mut lo, mut hi) = opts.initial_decades;
    let mut total: f64 = (lo..hi).map(|k| decade_integral(&tf, k, intervals)).sum();
    let mut low_tail = decade_integral(&tf, lo, intervals);
    let mut high_tail = decade_integral(&tf, hi - 1, intervals);

    let (lo_limit, hi_limit) = (lo - opts.max_extension, hi + opts.max_extension);
    while high_tail > opts.tail_tolerance * total {
        if hi >= hi_limit {
            return Err(AnalysisError::QuadratureNotConverged {
                partial: total / std::f64::consts::PI,
                tail_bound: high_tail / std::f64::consts::PI,
            });
        }
        high_tail = decade_integral(&tf, hi, intervals);
        total += high_tail;
        hi += 1;
    }
    while low_tail > opts.tail_tolerance * total {
        if lo <= lo_limit {
            return Err(AnalysisError::QuadratureNotConverged {
                partial: total / std::f64::consts::PI,
                tail_bound: low_tail / std::f64::consts::PI,
            });
        }
        lo -= 1;
        low_tail = decade_integral(&tf, lo, intervals);
        total += low_tail;
    }
    total += truncated_tails(&tf, lo, hi);
    // ‖G(-iω)‖ = ‖G(iω)‖, so the two-sided integral over 2π is the
    // one-sided integral over π.
    Ok(H2Result::finite(total / std::f64::consts::PI))
}

/// Integral over `[0, 10^lo]` and `[10^hi, ∞)`, modelling the integrand as a
/// power law `c ω^p` fitted at each end. A side whose fit does not give a
/// convergent integral contributes nothing.
fn truncated_tails(tf: &WeightedTransfer, lo: i32, hi: i32) -> f64 {
    let fit = |omega: f64, inner: f64| {
        let f = tf.frobenius_sq(omega);
        let g = tf.frobenius_sq(inner);
        let p = (g / f).ln() / (inner / omega).ln();
        (f, p)
    };
    let mut tails = 0.0;
    let w_lo = 10f64.powi(lo);
    let (f, p) = fit(w_lo, w_lo * 10f64.sqrt());
    if f > 0.0 && p.is_finite() && p > -1.0 {
        tails += w_lo * f / (p + 1.0);
    }
    let w_hi = 10f64.powi(hi);
    let (f, p) = fit(w_hi, w_hi / 10f64.sqrt());
    if f > 0.0 && p.is_finite() && p < -1.0 {
        tails += w_hi * f / (-p - 1.0);
    }
    tails
}

/// Gramian route when the derivative channel is silent, frequency-weighted
/// route otherwise.
pub fn h2_norm(model: &StateSpaceModel) -> Result<H2Result, AnalysisError> {
    if model.derivative_noise_present {
        h2_frequency_weighted(model)
    } else {
        h2_gramian(model)
    }
}

/// Which analytic formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClosedFormKind {
    /// Every inverter in droop mode.
    Droop,
    /// Swing dynamics with no inverter feedback.
    Swing,
}

/// Homogeneous parameters for the analytic norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogeneousParams {
    pub n: usize,
    pub m: f64,
    pub d: f64,
    pub r_g: f64,
    /// Ignored for [`ClosedFormKind::Swing`].
    pub r_r: f64,
    pub k1: f64,
    /// Ignored for [`ClosedFormKind::Swing`].
    pub k2: f64,
}

/// Droop: `n (k1² + (k2/r_r)²) / (2 m (d + 1/r_g + 1/r_r))`.
/// Swing: `n k1² / (2 m (d + 1/r_g))`.
pub fn h2_closed_form(kind: ClosedFormKind, p: &HomogeneousParams) -> Result<f64, AnalysisError> {
    let positive = |what: &'static str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(AnalysisError::NonPositive { what, value: v })
        }
    };
    positive("m", p.m)?;
    positive("r_g", p.r_g)?;
    if !(p.d >= 0.0) {
        return Err(AnalysisError::NonPositive { what: "d", value: p.d });
    }
    let n = p.n as f64;
    match kind {
        ClosedFormKind::Droop => {
            positive("r_r", p.r_r)?;
            let num = n * (p.k1 * p.k1 + (p.k2 / p.r_r).powi(2));
            Ok(num / (2.0 * p.m * (p.d + 1.0 / p.r_g + 1.0 / p.r_r)))
        }
        ClosedFormKind::Swing => Ok(n * p.k1 * p.k1 / (2.0 * p.m * (p.d + 1.0 / p.r_g))),
    }
}
