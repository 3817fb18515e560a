//! Online identification of the kinematic and steering parameters.
//!
//! Measurement windows of line angles, line length, applied steering input,
//! and wind speed are differentiated (central differences smoothed by a
//! moving average), the tangential speed is reconstructed from the rates,
//! and two least-squares fits recover the velocity coefficients and the
//! steering gain/delay. A cycle scheduler fires the fits twice per
//! figure-of-eight, at the half-period anchors of the reference index.

use crate::kinematics::{heading_from_rates, unwrap_heading};
use thiserror::Error;

/// Default moving-average width (samples) applied to the raw rates.
pub const DEFAULT_SMOOTHING: usize = 9;

/// Default upper end of the delay search grid, s.
pub const DEFAULT_T_D_MAX: f64 = 1.5;

/// Minimum window length accepted by any fit.
pub const MIN_WINDOW_LEN: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("window of {got} samples shorter than required {required}")]
    WindowTooShort { required: usize, got: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("series length mismatch: {0}")]
    LengthMismatch(String),
}

/// Uniformly sampled measurement window.
#[derive(Debug, Clone, Default)]
pub struct MeasurementWindow {
    /// Sampling period, s.
    pub t: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub r: Vec<f64>,
    pub delta: Vec<f64>,
    pub wind: Vec<f64>,
}

impl MeasurementWindow {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// One differentiated sample.
#[derive(Debug, Clone, Copy)]
pub struct RatePoint {
    /// Index into the source window.
    pub idx: usize,
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
    pub theta_dot: f64,
    pub phi_dot: f64,
    /// Unwrapped heading estimate; held at the previous value where the
    /// rates are too small to define one.
    pub gamma: f64,
    /// Speed reconstructed from the rates, m/s.
    pub v: f64,
    /// False where the heading was undefined and held.
    pub valid: bool,
}

/// Differentiated window: central-difference rates smoothed by a moving
/// average, heading from the rates with unwrapping, and the reconstructed
/// tangential speed `r sqrt(theta_dot^2 + cos^2(theta) phi_dot^2)`.
pub fn finite_difference_rates(
    window: &MeasurementWindow,
    smoothing: usize,
) -> Result<Vec<RatePoint>, EstimationError> {
    let n = window.len();
    let w = smoothing.max(1) | 1; // odd width
    let required = (w + 2).max(MIN_WINDOW_LEN);
    if n < required {
        return Err(EstimationError::WindowTooShort { required, got: n });
    }
    let dt = window.t;
    // Raw central differences on the interior samples.
    let raw_td: Vec<f64> = (1..n - 1)
        .map(|i| (window.theta[i + 1] - window.theta[i - 1]) / (2.0 * dt))
        .collect();
    let raw_pd: Vec<f64> = (1..n - 1)
        .map(|i| (window.phi[i + 1] - window.phi[i - 1]) / (2.0 * dt))
        .collect();
    let half = w / 2;
    let m = raw_td.len();
    let mut points = Vec::with_capacity(m.saturating_sub(2 * half));
    let mut prev_gamma: Option<f64> = None;
    for c in half..m - half {
        let mut td = 0.0;
        let mut pd = 0.0;
        for k in c - half..=c + half {
            td += raw_td[k];
            pd += raw_pd[k];
        }
        td /= w as f64;
        pd /= w as f64;
        let idx = c + 1; // window index of the centre sample
        let theta = window.theta[idx];
        let r = window.r[idx];
        let v = r * (td * td + theta.cos().powi(2) * pd * pd).sqrt();
        let (gamma, valid) = match heading_from_rates(theta, td, pd) {
            Ok(g) => {
                let g = match prev_gamma {
                    Some(p) => unwrap_heading(p, g),
                    None => g,
                };
                (g, true)
            }
            Err(_) => (prev_gamma.unwrap_or(0.0), false),
        };
        if valid {
            prev_gamma = Some(gamma);
        }
        points.push(RatePoint {
            idx,
            theta,
            phi: window.phi[idx],
            r,
            theta_dot: td,
            phi_dot: pd,
            gamma,
            v,
            valid,
        });
    }
    Ok(points)
}

/// Result of the velocity-model fit.
#[derive(Debug, Clone, Copy)]
pub struct VelocityFit {
    pub alpha_l: f64,
    pub alpha_g: f64,
    /// RMS residual of the fit, m/s.
    pub residual: f64,
    /// True when a coefficient had to be clamped positive.
    pub degraded: bool,
}

/// Ordinary least squares of the reconstructed speed on the two velocity
/// regressors `r cos(theta) cos(phi)` and `-r cos(gamma)`.
pub fn fit_velocity_params(points: &[RatePoint]) -> Result<VelocityFit, EstimationError> {
    let valid: Vec<&RatePoint> = points.iter().filter(|p| p.valid).collect();
    if valid.len() < 2 {
        return Err(EstimationError::WindowTooShort {
            required: 2,
            got: valid.len(),
        });
    }
    let mut s11 = 0.0;
    let mut s12 = 0.0;
    let mut s22 = 0.0;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for p in &valid {
        let x1 = p.r * p.theta.cos() * p.phi.cos();
        let x2 = -p.r * p.gamma.cos();
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        b1 += x1 * p.v;
        b2 += x2 * p.v;
    }
    // Condition number of the regressor matrix from its Gram eigenvalues.
    // The determinant of an exactly collinear Gram lands within rounding
    // noise of zero, so anything below the noise floor counts as rank
    // deficient too.
    let tr = s11 + s22;
    let det = s11 * s22 - s12 * s12;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    if lmin <= 0.0 || det <= 1e-12 * lmax * lmax || (lmax / lmin).sqrt() > 1e8 {
        return Err(EstimationError::DegenerateData(
            "velocity regressors are rank deficient".into(),
        ));
    }
    let mut alpha_l = (s22 * b1 - s12 * b2) / det;
    let mut alpha_g = (s11 * b2 - s12 * b1) / det;
    let mut degraded = false;
    if alpha_l <= 0.0 {
        alpha_l = 1e-4;
        degraded = true;
        // Refit the remaining coefficient with the clamped one fixed.
        alpha_g = if s22 > 0.0 { (b2 - alpha_l * s12) / s22 } else { 1e-4 };
    }
    if alpha_g <= 0.0 {
        alpha_g = 1e-4;
        degraded = true;
        alpha_l = if s11 > 0.0 { (b1 - alpha_g * s12) / s11 } else { 1e-4 };
        if alpha_l <= 0.0 {
            alpha_l = 1e-4;
        }
    }
    let mut sse = 0.0;
    for p in &valid {
        let x1 = p.r * p.theta.cos() * p.phi.cos();
        let x2 = -p.r * p.gamma.cos();
        let e = p.v - alpha_l * x1 - alpha_g * x2;
        sse += e * e;
    }
    Ok(VelocityFit {
        alpha_l,
        alpha_g,
        residual: (sse / valid.len() as f64).sqrt(),
        degraded,
    })
}

/// Result of the steering-model fit.
#[derive(Debug, Clone, Copy)]
pub struct SteeringFit {
    pub k: f64,
    pub t_d: f64,
    /// RMS residual of the heading-rate fit, rad/s.
    pub residual: f64,
    pub degraded: bool,
}

/// Exhaustive delay-grid least squares for the steering model.
///
/// `delta_history` must extend `lag_max = round(t_d_max / t)` samples before
/// the heading-rate series: `delta_history[i + lag_max]` is simultaneous
/// with `gamma_dot[i]`. For each grid lag the gain has a closed form; the
/// lag with the smallest SSE wins (lowest lag on ties).
pub fn fit_steering_params(
    gamma_dot: &[f64],
    delta_history: &[f64],
    t: f64,
    t_d_max: f64,
) -> Result<SteeringFit, EstimationError> {
    let lag_max = (t_d_max / t).round() as usize;
    let n = gamma_dot.len();
    if delta_history.len() != n + lag_max {
        return Err(EstimationError::LengthMismatch(format!(
            "delta history has {} samples, expected {} + {lag_max}",
            delta_history.len(),
            n
        )));
    }
    if n < MIN_WINDOW_LEN {
        return Err(EstimationError::WindowTooShort {
            required: MIN_WINDOW_LEN,
            got: n,
        });
    }
    if delta_history.iter().map(|d| d * d).sum::<f64>() < 1e-10 {
        return Err(EstimationError::DegenerateData(
            "steering input energy below threshold".into(),
        ));
    }
    let mut best: Option<(usize, f64, f64)> = None; // (lag, k, sse)
    for lag in 0..=lag_max {
        let mut sdd = 0.0;
        let mut sgd = 0.0;
        for i in 0..n {
            let d = delta_history[i + lag_max - lag];
            sdd += d * d;
            sgd += gamma_dot[i] * d;
        }
        if sdd < 1e-10 {
            continue;
        }
        let k = sgd / sdd;
        let mut sse = 0.0;
        for i in 0..n {
            let e = gamma_dot[i] - k * delta_history[i + lag_max - lag];
            sse += e * e;
        }
        if best.map_or(true, |(_, _, s)| sse < s) {
            best = Some((lag, k, sse));
        }
    }
    let (lag, k, sse) = best.ok_or_else(|| {
        EstimationError::DegenerateData("no usable lag in the search grid".into())
    })?;
    let (k, degraded) = if k <= 0.0 { (1e-4, true) } else { (k, false) };
    Ok(SteeringFit {
        k,
        t_d: lag as f64 * t,
        residual: (sse / n as f64).sqrt(),
        degraded,
    })
}

/// Central-difference heading rate of a differentiated window, smoothed by
/// the same moving-average width. Returns `(offset, rates)` where `offset`
/// is the index into `points` of the first rate sample.
pub fn heading_rate(points: &[RatePoint], t: f64, smoothing: usize) -> (usize, Vec<f64>) {
    let n = points.len();
    if n < 3 {
        return (0, Vec::new());
    }
    let raw: Vec<f64> = (1..n - 1)
        .map(|i| (points[i + 1].gamma - points[i - 1].gamma) / (2.0 * t))
        .collect();
    let w = smoothing.max(1) | 1;
    let half = w / 2;
    if raw.len() <= 2 * half {
        return (0, Vec::new());
    }
    let rates = (half..raw.len() - half)
        .map(|c| raw[c - half..=c + half].iter().sum::<f64>() / w as f64)
        .collect();
    (1 + half, rates)
}

/// Combined parameter estimate with fit metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamEstimate {
    pub alpha_l: f64,
    pub alpha_g: f64,
    pub k: f64,
    pub t_d: f64,
    /// RMS residuals of the two fits.
    pub velocity_residual: f64,
    pub steering_residual: f64,
    /// Time the estimate was produced, s.
    pub timestamp: f64,
    pub validity: Validity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Degraded,
}

/// Fires the parameter-update machinery twice per figure-of-eight cycle, at
/// the reference-index anchors `0` and `N/2`.
///
/// Index progress is unwrapped through a ratchet (only the furthest point
/// reached counts), so nearest-index jitter around an anchor cannot fire
/// twice.
#[derive(Debug, Clone)]
pub struct CycleScheduler {
    n: usize,
    prev_index: Option<usize>,
    /// Unwrapped index, in samples of the current path.
    unwrapped: f64,
    /// Furthest unwrapped index reached (ratchet against index jitter).
    ratchet: f64,
    /// Unwrapped index at the current path's bind time.
    start: f64,
    /// Cycles completed on previously bound paths.
    banked_cycles: f64,
    fired: usize,
}

impl CycleScheduler {
    pub fn new(path_len: usize) -> Self {
        CycleScheduler {
            n: path_len,
            prev_index: None,
            unwrapped: 0.0,
            ratchet: 0.0,
            start: 0.0,
            banked_cycles: 0.0,
            fired: 0,
        }
    }

    /// Re-anchors on a regenerated path, banking the progress made so far.
    pub fn rebind(&mut self, path_len: usize, current_index: usize) {
        self.banked_cycles += (self.ratchet - self.start) / self.n as f64;
        self.n = path_len;
        self.prev_index = Some(current_index);
        self.unwrapped = current_index as f64;
        self.ratchet = self.unwrapped;
        self.start = self.unwrapped;
    }

    /// Figure-of-eight cycles completed, as traversed path periods.
    pub fn cycles_completed(&self) -> f64 {
        self.banked_cycles + (self.ratchet - self.start) / self.n as f64
    }

    pub fn fires(&self) -> usize {
        self.fired
    }

    /// Advances the detector with the current nearest reference index;
    /// returns true when a half-period anchor was crossed (fire).
    pub fn update(&mut self, index: usize) -> bool {
        let prev = match self.prev_index {
            Some(p) => p,
            None => {
                self.prev_index = Some(index);
                self.unwrapped = index as f64;
                self.ratchet = self.unwrapped;
                self.start = self.unwrapped;
                return false;
            }
        };
        // Signed shortest circular increment. Physical traversal advances a
        // few samples at a time; a large jump is a re-anchoring glitch
        // (e.g. nearest-point ambiguity at the crossing) and carries no
        // progress information.
        let half = self.n as isize / 2;
        let diff = (index as isize - prev as isize + half).rem_euclid(self.n as isize) - half;
        self.prev_index = Some(index);
        if diff.unsigned_abs() > self.n / 8 {
            return false;
        }
        self.unwrapped += diff as f64;
        if self.unwrapped <= self.ratchet {
            return false;
        }
        // Anchors sit at absolute index multiples of N/2.
        let anchor = self.n as f64 / 2.0;
        let before = (self.ratchet / anchor).floor();
        let after = (self.unwrapped / anchor).floor();
        self.ratchet = self.unwrapped;
        if after > before {
            self.fired += 1;
            true
        } else {
            false
        }
    }
}
