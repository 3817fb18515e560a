//! Truth-model plant and closed-loop scenario engine.
//!
//! The plant shares the control model's structure but with time-varying
//! parameters driven by wind-speed and line-length schedules, an actuator
//! lag the controller does not model, and measurement noise. The closed
//! loop runs measurement, heading estimation, delay-compensated guidance,
//! predictor-feedback tracking, and the plant step at a fixed period, with
//! parameter identification and retuning interleaved twice per
//! figure-of-eight cycle.

use crate::estimation::{
    self, fit_steering_params, fit_velocity_params, heading_rate, CycleScheduler,
    EstimationError, MeasurementWindow,
};
use crate::guidance::{GuidanceController, GuidanceError, GuidanceStatus, MpcConfig};
use crate::kinematics::{
    discrete_step, heading_from_rates, unwrap_heading, velocity_tangential, KinematicParams,
    KinematicsError, KiteState, LineAngles,
};
use crate::reference_path::{
    generate_path, nearest_reference_index, revalidate, PathError, PathSpec, ReferencePath,
};
use crate::robustness::{self, FrequencyGrid, RobustnessError, UncertaintyBounds};
use crate::tracking::{control, predict_heading, DelayBuffer, SteeringParams, TrackingGain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{Read, Write};
use thiserror::Error;

/// Samples of persistent solver failure tolerated before aborting the run.
const MAX_SOLVER_FAILURE_STREAK: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario field `{field}`: {message}")]
    Scenario { field: String, message: String },
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Tune(#[from] RobustnessError),
    #[error("run aborted ({kind:?}) at t = {t:.2} s: {detail}")]
    Aborted { kind: AbortKind, t: f64, detail: String },
    #[error("log error: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AbortKind {
    NearZenith,
    PersistentSolverFailure,
}

/// Piecewise-linear schedule `(t, value)`, clamped at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub points: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn constant(v: f64) -> Self {
        PiecewiseLinear { points: vec![(0.0, v)] }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                if t1 == t0 {
                    return v1;
                }
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        pts.last().expect("non-empty schedule").1
    }

    fn validate(&self, field: &str, positive: bool) -> Result<(), SimError> {
        if self.points.is_empty() {
            return Err(SimError::Scenario {
                field: field.into(),
                message: "schedule needs at least one point".into(),
            });
        }
        for w in self.points.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(SimError::Scenario {
                    field: field.into(),
                    message: "schedule times must be nondecreasing".into(),
                });
            }
        }
        if positive && self.points.iter().any(|p| p.1 <= 0.0) {
            return Err(SimError::Scenario {
                field: field.into(),
                message: "schedule values must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Couples the truth-model parameters to the operating conditions:
/// `r alpha_l = E w`, `r alpha_g = c_G`, `K = c_K w / r^2`,
/// `t_d = a_d + b_d r / w^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingCoefficients {
    /// `E`: crosswind lift scaling (glide-ratio-like).
    pub glide_ratio: f64,
    /// `c_G`: gravity-induced speed, m/s.
    pub gravity_speed: f64,
    /// `c_K`: steering-gain scale.
    pub steering_scale: f64,
    /// `a_d`: baseline input delay, s.
    pub delay_base: f64,
    /// `b_d`: line-sag delay growth, s * (m/s)^2 / m.
    pub delay_slope: f64,
}

impl CouplingCoefficients {
    pub fn alpha_l(&self, wind: f64, r: f64) -> f64 {
        self.glide_ratio * wind / r
    }

    pub fn alpha_g(&self, r: f64) -> f64 {
        self.gravity_speed / r
    }

    pub fn steering_gain(&self, wind: f64, r: f64) -> f64 {
        self.steering_scale * wind / (r * r)
    }

    pub fn delay(&self, wind: f64, r: f64) -> f64 {
        self.delay_base + self.delay_slope * r / (wind * wind)
    }
}

impl Default for CouplingCoefficients {
    /// Calibrated so that (w = 4.5 m/s, r = 90 m) gives alpha_l = 0.2,
    /// alpha_g = 1/15, K = 1 and t_d = 0.7 s, with speeds oscillating over
    /// a few m/s within a cycle.
    fn default() -> Self {
        CouplingCoefficients {
            glide_ratio: 4.0,
            gravity_speed: 6.0,
            steering_scale: 1800.0,
            delay_base: 0.4,
            delay_slope: 0.0675,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Elevation measurement noise, rad (1 sigma).
    pub sigma_theta: f64,
    /// Azimuth measurement noise, rad (1 sigma).
    pub sigma_phi: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_theta: 2e-4,
            sigma_phi: 2e-4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialStateConfig {
    pub theta: f64,
    pub phi: f64,
    pub gamma: f64,
}

/// Controller-side parameter estimates at the start of the run. Absent
/// estimates default to the plant truth at `t = 0` (perfect initialisation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialEstimates {
    pub alpha_l: f64,
    pub alpha_g: f64,
    pub k: f64,
    pub t_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// Heading sinusoid amplitude, rad.
    pub amplitude: f64,
    /// Fraction of l_r the reference may use.
    pub rate_margin: f64,
    /// Shooting seed for the crossing point.
    pub center_theta: f64,
    pub center_phi: f64,
    /// How far inside the safety window the reference must stay, rad.
    pub window_margin: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            amplitude: 2.0,
            rate_margin: 0.8,
            center_theta: 1.05,
            center_phi: 0.0,
            window_margin: 0.15,
        }
    }
}

/// Estimation and retuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Moving-average width for the offline rate estimates, samples.
    pub smoothing: usize,
    /// Backward-difference window of the online heading estimator, samples.
    pub heading_window: usize,
    /// Angular rate (rad/s) below which the online heading estimate is held
    /// rather than updated; guards the unwrapping against noise at the slow
    /// points of the eight.
    pub heading_min_rate: f64,
    /// Upper end of the delay search grid, s.
    pub t_d_max: f64,
    /// Steering-delay fits below this floor (s) are rejected as closed-loop
    /// identification artifacts and the previous steering estimates kept.
    pub min_delay: f64,
    /// Ceiling on the adopted command rate limit, rad/s.
    pub max_rate_limit: f64,
    /// Parameter uncertainty assumed by the retuning, as a fraction of the
    /// estimates.
    pub uncertainty_fraction: f64,
    /// Tracking-error limit used by the retuning, rad.
    pub l_e: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            smoothing: estimation::DEFAULT_SMOOTHING,
            heading_window: 9,
            heading_min_rate: 0.01,
            t_d_max: estimation::DEFAULT_T_D_MAX,
            min_delay: 0.1,
            max_rate_limit: 3.0,
            uncertainty_fraction: robustness::DEFAULT_UNCERTAINTY_FRACTION,
            l_e: 0.9,
        }
    }
}

/// Complete description of one simulated flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Simulated duration, s.
    pub duration: f64,
    /// Wind-speed schedule, m/s.
    pub wind: PiecewiseLinear,
    /// Line-length schedule, m.
    pub line: PiecewiseLinear,
    pub coupling: CouplingCoefficients,
    /// First-order actuator lag time constant, s; 0 disables.
    pub actuator_lag: f64,
    pub noise: NoiseConfig,
    pub initial_state: InitialStateConfig,
    /// Symmetric saturation on the steering input (line-length difference),
    /// m. Absent means unsaturated.
    #[serde(default)]
    pub delta_limit: Option<f64>,
    #[serde(default)]
    pub initial_estimates: Option<InitialEstimates>,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |field: &str, message: &str| SimError::Scenario {
            field: field.into(),
            message: message.into(),
        };
        if !(self.duration > 0.0) {
            return Err(err("duration", "must be positive"));
        }
        self.wind.validate("wind.points", true)?;
        self.line.validate("line.points", true)?;
        if self.actuator_lag < 0.0 {
            return Err(err("actuator_lag", "must be nonnegative"));
        }
        if self.noise.sigma_theta < 0.0 || self.noise.sigma_phi < 0.0 {
            return Err(err("noise.sigma_theta", "noise levels must be nonnegative"));
        }
        if !(self.path.amplitude > std::f64::consts::FRAC_PI_2) {
            return Err(err("path.amplitude", "must exceed pi/2"));
        }
        if !(self.path.rate_margin > 0.0 && self.path.rate_margin < 1.0) {
            return Err(err("path.rate_margin", "must lie in (0, 1)"));
        }
        if self.path.window_margin < 0.0 {
            return Err(err("path.window_margin", "must be nonnegative"));
        }
        if self.adaptation.smoothing == 0 {
            return Err(err("adaptation.smoothing", "must be at least 1"));
        }
        if self.adaptation.heading_window == 0 {
            return Err(err("adaptation.heading_window", "must be at least 1"));
        }
        if !(self.adaptation.t_d_max > 0.0) {
            return Err(err("adaptation.t_d_max", "must be positive"));
        }
        if !(self.adaptation.l_e > 0.0) {
            return Err(err("adaptation.l_e", "must be positive"));
        }
        if self.adaptation.uncertainty_fraction < 0.0 {
            return Err(err("adaptation.uncertainty_fraction", "must be nonnegative"));
        }
        if let Some(e) = &self.initial_estimates {
            if !(e.alpha_l > 0.0 && e.alpha_g > 0.0 && e.k > 0.0 && e.t_d >= 0.0) {
                return Err(err("initial_estimates", "estimates must be positive"));
            }
        }
        Ok(())
    }
}

/// Ground-truth plant: the control-model class with scheduled parameters,
/// an actuator lag, and its own delay buffer at the true delay.
#[derive(Debug, Clone)]
pub struct PlantTruth {
    pub state: KiteState,
    pub alpha_l: f64,
    pub alpha_g: f64,
    pub k: f64,
    pub t_d: f64,
    buffer: DelayBuffer,
    actuator_state: f64,
    actuator_lag: f64,
    coupling: CouplingCoefficients,
    t: f64,
}

impl PlantTruth {
    pub fn new(
        initial: KiteState,
        coupling: CouplingCoefficients,
        actuator_lag: f64,
        t: f64,
        wind: f64,
        r: f64,
    ) -> Self {
        let mut plant = PlantTruth {
            state: initial,
            alpha_l: 0.0,
            alpha_g: 0.0,
            k: 0.0,
            t_d: 0.0,
            buffer: DelayBuffer::new(0),
            actuator_state: 0.0,
            actuator_lag,
            coupling,
            t,
        };
        plant.alpha_l = coupling.alpha_l(wind, r);
        plant.alpha_g = coupling.alpha_g(r);
        plant.k = coupling.steering_gain(wind, r);
        plant.t_d = coupling.delay(wind, r);
        plant.buffer = DelayBuffer::new((plant.t_d / t).round() as usize);
        plant.state.r = r;
        plant
    }

    /// Applies the schedules for the current sample: truth parameters move,
    /// the delay buffer is resized to the new true delay, the line length
    /// updates.
    pub fn set_conditions(&mut self, wind: f64, r: f64) {
        self.alpha_l = self.coupling.alpha_l(wind, r);
        self.alpha_g = self.coupling.alpha_g(r);
        self.k = self.coupling.steering_gain(wind, r);
        self.t_d = self.coupling.delay(wind, r);
        self.buffer.resize((self.t_d / self.t).round() as usize);
        self.state.r = r;
    }

    /// Noisy line-angle measurement; the line length is exact.
    pub fn measure(&self, noise: &NoiseConfig, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
        let theta = if noise.sigma_theta > 0.0 {
            let n = Normal::new(0.0, noise.sigma_theta).expect("valid sigma");
            self.state.xi.theta + n.sample(rng)
        } else {
            self.state.xi.theta
        };
        let phi = if noise.sigma_phi > 0.0 {
            let n = Normal::new(0.0, noise.sigma_phi).expect("valid sigma");
            self.state.xi.phi + n.sample(rng)
        } else {
            self.state.xi.phi
        };
        (theta, phi, self.state.r)
    }

    /// One plant sample: the commanded steering input is lag-filtered,
    /// delayed by the true delay, and integrated into the heading; the
    /// position advances by the discrete kinematics at the truth parameters.
    pub fn step(&mut self, delta: f64) -> Result<KiteState, KinematicsError> {
        let filtered = if self.actuator_lag > 0.0 {
            let a = (-self.t / self.actuator_lag).exp();
            self.actuator_state = a * self.actuator_state + (1.0 - a) * delta;
            self.actuator_state
        } else {
            delta
        };
        let delayed = self.buffer.apply(filtered);
        let params = KinematicParams::new(self.alpha_l, self.alpha_g, self.state.r, self.t);
        let next_xi = discrete_step(&self.state.xi, self.state.gamma, &params)?;
        self.state.xi = next_xi;
        self.state.gamma += self.t * self.k * delayed;
        Ok(self.state)
    }
}

/// Online heading and rate estimator: backward differences over a short
/// window of noisy measurements, with heading unwrapping and hold on
/// undefined headings.
#[derive(Debug, Clone)]
struct OnlineHeadingEstimator {
    width: usize,
    t: f64,
    min_rate: f64,
    hist: VecDeque<(f64, f64)>,
    gamma: f64,
}

impl OnlineHeadingEstimator {
    fn new(width: usize, t: f64, min_rate: f64, gamma0: f64) -> Self {
        OnlineHeadingEstimator {
            width: width.max(1),
            t,
            min_rate,
            hist: VecDeque::new(),
            gamma: gamma0,
        }
    }

    /// Returns (heading, theta_dot, phi_dot, speed, valid).
    fn update(&mut self, theta: f64, phi: f64, r: f64) -> (f64, f64, f64, f64, bool) {
        self.hist.push_back((theta, phi));
        if self.hist.len() > self.width + 1 {
            self.hist.pop_front();
        }
        if self.hist.len() < self.width + 1 {
            return (self.gamma, 0.0, 0.0, 0.0, false);
        }
        let (th0, ph0) = *self.hist.front().expect("non-empty");
        let span = self.width as f64 * self.t;
        let theta_dot = (theta - th0) / span;
        let phi_dot = (phi - ph0) / span;
        let rate_norm_sq = theta_dot * theta_dot + theta.cos().powi(2) * phi_dot * phi_dot;
        let v = r * rate_norm_sq.sqrt();
        if rate_norm_sq < self.min_rate * self.min_rate {
            // Too slow for the direction to rise above measurement noise;
            // hold the previous heading.
            return (self.gamma, theta_dot, phi_dot, v, false);
        }
        match heading_from_rates(theta, theta_dot, phi_dot) {
            Ok(g) => {
                self.gamma = unwrap_heading(self.gamma, g);
                (self.gamma, theta_dot, phi_dot, v, true)
            }
            Err(_) => (self.gamma, theta_dot, phi_dot, v, false),
        }
    }
}

/// One simulation sample. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: f64,
    pub theta_true: f64,
    pub phi_true: f64,
    pub gamma_true: f64,
    pub r: f64,
    pub wind: f64,
    pub theta_meas: f64,
    pub phi_meas: f64,
    pub gamma_est: f64,
    pub v_meas: f64,
    pub v_model: f64,
    pub theta_td: f64,
    pub phi_td: f64,
    pub gamma_cmd: f64,
    pub delta: f64,
    pub ref_index: usize,
    pub dist_xi: f64,
    pub dist_xi_td: f64,
    pub alpha_l_est: f64,
    pub alpha_g_est: f64,
    pub k_est: f64,
    pub t_d_est: f64,
    pub t_d_true: f64,
    pub c0: f64,
    pub l_r: f64,
    pub slack_active: bool,
    pub status: String,
    pub solver_iterations: usize,
    pub kkt_stationarity: f64,
    pub kkt_primal: f64,
    pub kkt_complementarity: f64,
    pub update_fired: bool,
    pub estimate_valid: bool,
    pub in_window: bool,
}

/// Complete time-series record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub t_step: f64,
    pub records: Vec<SampleRecord>,
}

impl SimLog {
    pub fn to_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut writer = csv::Writer::from_writer(w);
        for rec in &self.records {
            writer.serialize(rec).map_err(|e| SimError::Log(e.to_string()))?;
        }
        writer.flush().map_err(|e| SimError::Log(e.to_string()))?;
        Ok(())
    }

    pub fn from_csv<R: Read>(r: R, t_step: f64) -> Result<Self, SimError> {
        let mut reader = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for rec in reader.deserialize::<SampleRecord>() {
            records.push(rec.map_err(|e| SimError::Log(e.to_string()))?);
        }
        Ok(SimLog { t_step, records })
    }

    /// Shifted tracking error `gamma_cmd[k] - gamma_true[k + n_d(k)]` using
    /// the true delay at each sample.
    pub fn shifted_tracking_error(&self) -> Vec<f64> {
        let n = self.records.len();
        (0..n)
            .filter_map(|k| {
                let n_d = (self.records[k].t_d_true / self.t_step).round() as usize;
                if k + n_d < n {
                    Some(self.records[k].gamma_cmd - self.records[k + n_d].gamma_true)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Aggregate statistics of the run.
    pub fn summary(&self, cfg: &MpcConfig, transient: f64) -> RunSummary {
        let n = self.records.len();
        let mut rms_xi = 0.0;
        let mut rms_td = 0.0;
        let mut max_mag_excess = f64::NEG_INFINITY;
        let mut max_rate_excess = f64::NEG_INFINITY;
        let mut violations = 0usize;
        let mut violations_late = 0usize;
        let mut failures = 0usize;
        let mut updates = 0usize;
        let mut max_stat = 0.0f64;
        let mut max_primal = 0.0f64;
        let mut max_comp = 0.0f64;
        let mut l_r_min = f64::INFINITY;
        let mut l_r_max = f64::NEG_INFINITY;
        for (k, rec) in self.records.iter().enumerate() {
            rms_xi += rec.dist_xi * rec.dist_xi;
            rms_td += rec.dist_xi_td * rec.dist_xi_td;
            max_mag_excess = max_mag_excess.max(rec.gamma_cmd.abs() - cfg.l_m);
            if k > 0 {
                let rate = (rec.gamma_cmd - self.records[k - 1].gamma_cmd).abs() / self.t_step;
                max_rate_excess = max_rate_excess.max(rate - rec.l_r);
            }
            if !rec.in_window {
                violations += 1;
                if rec.t >= transient {
                    violations_late += 1;
                }
            }
            if rec.status != "optimal" {
                failures += 1;
            }
            if rec.update_fired {
                updates += 1;
            }
            max_stat = max_stat.max(rec.kkt_stationarity);
            max_primal = max_primal.max(rec.kkt_primal);
            max_comp = max_comp.max(rec.kkt_complementarity);
            l_r_min = l_r_min.min(rec.l_r);
            l_r_max = l_r_max.max(rec.l_r);
        }
        let e = self.shifted_tracking_error();
        let max_e = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let last = self.records.last();
        RunSummary {
            samples: n,
            duration: n as f64 * self.t_step,
            cycles_completed: 0.0, // filled by the runner
            updates_fired: updates,
            rms_dist_xi: (rms_xi / n.max(1) as f64).sqrt(),
            rms_dist_xi_td: (rms_td / n.max(1) as f64).sqrt(),
            max_shifted_error: max_e,
            max_cmd_magnitude_excess: max_mag_excess,
            max_cmd_rate_excess: max_rate_excess,
            window_violations: violations,
            window_violations_after_transient: violations_late,
            solver_failures: failures,
            max_kkt_stationarity: max_stat,
            max_kkt_primal: max_primal,
            max_kkt_complementarity: max_comp,
            l_r_min,
            l_r_max,
            final_alpha_l: last.map_or(0.0, |r| r.alpha_l_est),
            final_alpha_g: last.map_or(0.0, |r| r.alpha_g_est),
            final_k: last.map_or(0.0, |r| r.k_est),
            final_t_d: last.map_or(0.0, |r| r.t_d_est),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub samples: usize,
    pub duration: f64,
    pub cycles_completed: f64,
    pub updates_fired: usize,
    pub rms_dist_xi: f64,
    pub rms_dist_xi_td: f64,
    pub max_shifted_error: f64,
    /// `max_k |gamma_cmd| - l_m`; negative when the limit always held.
    pub max_cmd_magnitude_excess: f64,
    /// `max_k |rate| - l_r(k)`; negative when the limit always held.
    pub max_cmd_rate_excess: f64,
    pub window_violations: usize,
    pub window_violations_after_transient: usize,
    pub solver_failures: usize,
    pub max_kkt_stationarity: f64,
    pub max_kkt_primal: f64,
    pub max_kkt_complementarity: f64,
    pub l_r_min: f64,
    pub l_r_max: f64,
    pub final_alpha_l: f64,
    pub final_alpha_g: f64,
    pub final_k: f64,
    pub final_t_d: f64,
}

/// Result of a completed run: the log plus runner-level counters.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: SimLog,
    pub cycles_completed: f64,
    pub anchor_fires: usize,
    pub updates_performed: usize,
    pub path_regenerations: usize,
}

impl RunOutput {
    pub fn summary(&self, cfg: &MpcConfig, transient: f64) -> RunSummary {
        let mut s = self.log.summary(cfg, transient);
        s.cycles_completed = self.cycles_completed;
        s
    }
}

fn nearest_distance(path: &ReferencePath, query: &LineAngles) -> f64 {
    let j = nearest_reference_index(path, query);
    path.xi_at(j as isize).distance(query)
}

/// Runs the full closed loop for one scenario.
pub fn run_closed_loop(scenario: &ScenarioConfig, mpc_base: &MpcConfig) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let t_s = mpc_base.t;
    let n_samples = (scenario.duration / t_s).round() as usize;
    let adapt = scenario.adaptation;
    let grid = FrequencyGrid::default_grid();

    let w0 = scenario.wind.eval(0.0);
    let r0 = scenario.line.eval(0.0);
    let init_state = KiteState::new(
        scenario.initial_state.theta,
        scenario.initial_state.phi,
        scenario.initial_state.gamma,
        r0,
    );
    let mut plant = PlantTruth::new(
        init_state,
        scenario.coupling,
        scenario.actuator_lag,
        t_s,
        w0,
        r0,
    );

    let mut est = scenario.initial_estimates.unwrap_or(InitialEstimates {
        alpha_l: plant.alpha_l,
        alpha_g: plant.alpha_g,
        k: plant.k,
        t_d: plant.t_d,
    });
    let mut estimate_valid = true;

    let frac = adapt.uncertainty_fraction;
    let tuned = robustness::tune(
        est.k,
        est.t_d,
        &UncertaintyBounds::from_fractions(frac, frac, est.k, est.t_d),
        mpc_base.l_m,
        adapt.l_e,
        &grid,
    )?;
    let mut c0 = tuned.c0;
    let mut l_r = tuned.l_r;

    let mut mpc = *mpc_base;
    mpc.l_r = l_r;
    let path_window = mpc.window.shrunk(scenario.path.window_margin);
    let make_spec = |l_r: f64| PathSpec {
        center: LineAngles::new(scenario.path.center_theta, scenario.path.center_phi),
        amplitude: scenario.path.amplitude,
        rate_limit: l_r,
        rate_margin: scenario.path.rate_margin,
        window: path_window,
    };
    let mut kp_est = KinematicParams::new(est.alpha_l, est.alpha_g, r0, t_s);
    let mut path = generate_path(&make_spec(l_r), &kp_est)?;

    let mut controller = GuidanceController::new(mpc, scenario.initial_state.gamma);
    let mut gain = TrackingGain::tuned(c0);
    let mut sp_est = SteeringParams::new(est.k, est.t_d, t_s);
    let mut ctrl_buf = DelayBuffer::new(sp_est.delay_steps());
    let mut scheduler = CycleScheduler::new(path.len());
    let mut online = OnlineHeadingEstimator::new(
        adapt.heading_window,
        t_s,
        adapt.heading_min_rate,
        init_state.gamma,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.noise.seed);
    let lag_max = (adapt.t_d_max / t_s).round() as usize;

    let mut hist_theta = Vec::with_capacity(n_samples);
    let mut hist_phi = Vec::with_capacity(n_samples);
    let mut hist_r = Vec::with_capacity(n_samples);
    let mut hist_delta = Vec::with_capacity(n_samples);
    let mut hist_wind = Vec::with_capacity(n_samples);
    let mut records: Vec<SampleRecord> = Vec::with_capacity(n_samples);
    let mut updates_performed = 0usize;
    let mut regenerations = 0usize;

    for k in 0..n_samples {
        let t = k as f64 * t_s;
        let wind = scenario.wind.eval(t);
        let r = scenario.line.eval(t);
        plant.set_conditions(wind, r);

        let (theta_m, phi_m, r_m) = plant.measure(&scenario.noise, &mut rng);
        hist_theta.push(theta_m);
        hist_phi.push(phi_m);
        hist_r.push(r_m);
        hist_wind.push(wind);

        let (gamma_est, _, _, v_meas, _heading_ok) = online.update(theta_m, phi_m, r_m);
        kp_est.r = r_m;
        let meas_state = KiteState::new(theta_m, phi_m, gamma_est, r_m);

        let out = controller
            .step(&meas_state, &ctrl_buf, &path, &kp_est, &sp_est)
            .map_err(|e| match e {
                GuidanceError::Kinematics(KinematicsError::NearZenith) => SimError::Aborted {
                    kind: AbortKind::NearZenith,
                    t,
                    detail: "delayed-position prediction reached the zenith".into(),
                },
                other => SimError::Aborted {
                    kind: AbortKind::PersistentSolverFailure,
                    t,
                    detail: other.to_string(),
                },
            })?;
        if out.failure_streak > MAX_SOLVER_FAILURE_STREAK {
            return Err(SimError::Aborted {
                kind: AbortKind::PersistentSolverFailure,
                t,
                detail: format!("{} consecutive solver failures", out.failure_streak),
            });
        }

        let gamma_pred = predict_heading(gamma_est, &ctrl_buf, &sp_est)
            .expect("controller buffer tracks the estimated delay");
        let delta = control(out.gamma_cmd, gamma_pred, &gain, scenario.delta_limit);
        ctrl_buf.apply(delta);
        hist_delta.push(delta);

        let fired = scheduler.update(out.reference_index);
        let chi0 = out.predicted_deviation[0];
        let status = match out.status {
            GuidanceStatus::Optimal => "optimal",
            GuidanceStatus::FallbackHold => "fallback_hold",
            GuidanceStatus::FallbackSlew => "fallback_slew",
        };
        records.push(SampleRecord {
            t,
            theta_true: plant.state.xi.theta,
            phi_true: plant.state.xi.phi,
            gamma_true: plant.state.gamma,
            r,
            wind,
            theta_meas: theta_m,
            phi_meas: phi_m,
            gamma_est,
            v_meas,
            v_model: velocity_tangential(&meas_state.xi, gamma_est, &kp_est),
            theta_td: out.delayed_position.theta,
            phi_td: out.delayed_position.phi,
            gamma_cmd: out.gamma_cmd,
            delta,
            ref_index: out.reference_index,
            dist_xi: nearest_distance(&path, &plant.state.xi),
            dist_xi_td: (chi0[0] * chi0[0] + chi0[1] * chi0[1]).sqrt(),
            alpha_l_est: est.alpha_l,
            alpha_g_est: est.alpha_g,
            k_est: est.k,
            t_d_est: est.t_d,
            t_d_true: plant.t_d,
            c0,
            l_r,
            slack_active: out.slack_active.iter().any(|&s| s),
            status: status.into(),
            solver_iterations: out.solver_iterations,
            kkt_stationarity: out.kkt.stationarity,
            kkt_primal: out.kkt.primal,
            kkt_complementarity: out.kkt.complementarity,
            update_fired: fired,
            estimate_valid,
            in_window: mpc.window.contains(&plant.state.xi),
        });

        plant.step(delta).map_err(|_| SimError::Aborted {
            kind: AbortKind::NearZenith,
            t,
            detail: format!(
                "plant reached the zenith guard at theta = {:.4}",
                plant.state.xi.theta
            ),
        })?;

        // Parameter updates run between samples: fits on the trailing
        // half-cycle window, retuning, and path revalidation.
        if fired {
            let window_len = path.len() / 2;
            let end = k + 1;
            if end >= window_len && end - window_len >= lag_max && window_len >= 50 {
                let start = end - window_len;
                let window = MeasurementWindow {
                    t: t_s,
                    theta: hist_theta[start..end].to_vec(),
                    phi: hist_phi[start..end].to_vec(),
                    r: hist_r[start..end].to_vec(),
                    delta: hist_delta[start..end].to_vec(),
                    wind: hist_wind[start..end].to_vec(),
                };
                match apply_update(
                    &window,
                    &hist_delta,
                    start,
                    lag_max,
                    &adapt,
                    mpc.l_m,
                    &grid,
                    &est,
                ) {
                    Ok(update) => {
                        updates_performed += 1;
                        est = update.estimates;
                        estimate_valid = !update.degraded;
                        kp_est.alpha_l = est.alpha_l;
                        kp_est.alpha_g = est.alpha_g;
                        sp_est = SteeringParams::new(est.k, est.t_d, t_s);
                        ctrl_buf.resize(sp_est.delay_steps());
                        if let Some((new_c0, new_l_r)) = update.retuned {
                            c0 = new_c0;
                            l_r = new_l_r;
                            gain = TrackingGain::tuned(c0);
                            controller.set_rate_limit(l_r);
                            mpc.l_r = l_r;
                        }
                        if !revalidate(&path, &kp_est, l_r) {
                            if let Ok(new_path) = generate_path(&make_spec(l_r), &kp_est) {
                                let anchor =
                                    nearest_reference_index(&new_path, &out.delayed_position);
                                path = new_path;
                                scheduler.rebind(path.len(), anchor);
                                regenerations += 1;
                            }
                        }
                    }
                    Err(_) => {
                        estimate_valid = false;
                    }
                }
            }
        }
    }

    Ok(RunOutput {
        log: SimLog { t_step: t_s, records },
        cycles_completed: scheduler.cycles_completed(),
        anchor_fires: scheduler.fires(),
        updates_performed,
        path_regenerations: regenerations,
    })
}

struct UpdateOutcome {
    estimates: InitialEstimates,
    degraded: bool,
    retuned: Option<(f64, f64)>,
}

/// One parameter update: both fits on the window, then the retuning.
///
/// Steering fits landing below the delay floor are closed-loop
/// identification artifacts (the instantaneous feedback correlation
/// competing with the true lag); they are rejected and the previous
/// steering estimates kept. Retuning failures leave the previous gain and
/// rate in place (`retuned: None`); fit errors abort the update entirely.
#[allow(clippy::too_many_arguments)]
fn apply_update(
    window: &MeasurementWindow,
    delta_history: &[f64],
    window_start: usize,
    lag_max: usize,
    adapt: &AdaptationConfig,
    l_m: f64,
    grid: &FrequencyGrid,
    prev: &InitialEstimates,
) -> Result<UpdateOutcome, EstimationError> {
    let rates = estimation::finite_difference_rates(window, adapt.smoothing)?;
    let vfit = fit_velocity_params(&rates)?;
    let (offset, gdot) = heading_rate(&rates, window.t, adapt.smoothing);
    if gdot.is_empty() {
        return Err(EstimationError::WindowTooShort { required: 3, got: 0 });
    }
    let abs0 = window_start + rates[offset].idx;
    if abs0 < lag_max {
        return Err(EstimationError::WindowTooShort {
            required: lag_max,
            got: abs0,
        });
    }
    let dh = &delta_history[abs0 - lag_max..abs0 + gdot.len()];
    let sfit = fit_steering_params(&gdot, dh, window.t, adapt.t_d_max)?;
    let steering_ok = sfit.t_d >= adapt.min_delay && !sfit.degraded;
    let estimates = InitialEstimates {
        alpha_l: vfit.alpha_l,
        alpha_g: vfit.alpha_g,
        k: if steering_ok { sfit.k } else { prev.k },
        t_d: if steering_ok { sfit.t_d } else { prev.t_d },
    };
    let frac = adapt.uncertainty_fraction;
    let retuned = robustness::tune(
        estimates.k,
        estimates.t_d,
        &UncertaintyBounds::from_fractions(frac, frac, estimates.k, estimates.t_d),
        l_m,
        adapt.l_e,
        grid,
    )
    .ok()
    .map(|t| (t.c0, t.l_r.min(adapt.max_rate_limit)));
    Ok(UpdateOutcome {
        estimates,
        degraded: vfit.degraded || !steering_ok,
        retuned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flight1_like(duration: f64) -> ScenarioConfig {
        ScenarioConfig {
            duration,
            wind: PiecewiseLinear::constant(4.5),
            line: PiecewiseLinear::constant(90.0),
            coupling: CouplingCoefficients::default(),
            actuator_lag: 0.05,
            noise: NoiseConfig::default(),
            initial_state: InitialStateConfig {
                theta: 1.0585,
                phi: -0.3576,
                gamma: 0.0,
            },
            delta_limit: Some(2.0),
            initial_estimates: None,
            path: PathConfig::default(),
            adaptation: AdaptationConfig::default(),
        }
    }

    #[test]
    fn schedule_interpolates_and_clamps() {
        let s = PiecewiseLinear {
            points: vec![(0.0, 1.0), (10.0, 3.0)],
        };
        assert_eq!(s.eval(-5.0), 1.0);
        assert_eq!(s.eval(5.0), 2.0);
        assert_eq!(s.eval(20.0), 3.0);
    }

    #[test]
    fn coupling_calibration_point() {
        let c = CouplingCoefficients::default();
        assert!((c.delay(4.5, 90.0) - 0.7).abs() < 1e-12);
        assert!((c.steering_gain(4.5, 90.0) - 1.0).abs() < 1e-12);
        assert!((c.alpha_l(4.5, 90.0) - 0.2).abs() < 1e-12);
        assert!((c.alpha_g(90.0) - 1.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn delay_grows_with_line_length_and_shrinks_with_wind() {
        let c = CouplingCoefficients::default();
        assert!(c.delay(4.5, 100.0) > c.delay(4.5, 80.0));
        assert!(c.delay(6.0, 90.0) < c.delay(3.0, 90.0));
    }

    #[test]
    fn zero_steering_keeps_heading_constant() {
        let init = KiteState::new(0.9, 0.1, 0.8, 90.0);
        let mut plant = PlantTruth::new(init, CouplingCoefficients::default(), 0.0, 0.01, 4.5, 90.0);
        for _ in 0..200 {
            plant.step(0.0).unwrap();
        }
        assert_eq!(plant.state.gamma, 0.8);
        assert!(plant.state.xi.theta != 0.9);
    }

    #[test]
    fn constant_conditions_match_nominal_plant_exactly() {
        // With constant schedules, no actuator lag, and zero noise the
        // plant is the exact discrete model at fixed parameters.
        let init = KiteState::new(0.9, 0.1, 0.3, 90.0);
        let mut plant = PlantTruth::new(init, CouplingCoefficients::default(), 0.0, 0.01, 4.5, 90.0);
        let params = KinematicParams::new(plant.alpha_l, plant.alpha_g, 90.0, 0.01);
        let n_d = (plant.t_d / 0.01).round() as usize;
        let mut xi = init.xi;
        let mut gamma = init.gamma;
        let mut buf = DelayBuffer::new(n_d);
        for k in 0..300 {
            let d = 0.3 * (k as f64 * 0.05).sin();
            plant.set_conditions(4.5, 90.0);
            plant.step(d).unwrap();
            let delayed = buf.apply(d);
            xi = discrete_step(&xi, gamma, &params).unwrap();
            gamma += 0.01 * plant.k * delayed;
        }
        assert!((plant.state.xi.theta - xi.theta).abs() < 1e-12);
        assert!((plant.state.xi.phi - xi.phi).abs() < 1e-12);
        assert!((plant.state.gamma - gamma).abs() < 1e-12);
    }

    #[test]
    fn measurement_is_exact_at_zero_noise_and_seeded_otherwise() {
        let init = KiteState::new(0.9, 0.1, 0.3, 90.0);
        let plant = PlantTruth::new(init, CouplingCoefficients::default(), 0.0, 0.01, 4.5, 90.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let silent = NoiseConfig {
            sigma_theta: 0.0,
            sigma_phi: 0.0,
            seed: 7,
        };
        assert_eq!(plant.measure(&silent, &mut rng), (0.9, 0.1, 90.0));
        let noisy = NoiseConfig {
            sigma_theta: 5e-4,
            sigma_phi: 5e-4,
            seed: 7,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = plant.measure(&noisy, &mut r1);
        let b = plant.measure(&noisy, &mut r2);
        assert_eq!(a, b);
        assert_ne!(a.0, 0.9);
    }

    #[test]
    fn scenario_json_roundtrip_is_identity() {
        let sc = flight1_like(30.0);
        let s1 = serde_json::to_string_pretty(&sc).unwrap();
        let parsed: ScenarioConfig = serde_json::from_str(&s1).unwrap();
        let s2 = serde_json::to_string_pretty(&parsed).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(sc, parsed);
    }

    #[test]
    fn scenario_validation_names_fields() {
        let mut sc = flight1_like(30.0);
        sc.wind = PiecewiseLinear { points: vec![] };
        match sc.validate() {
            Err(SimError::Scenario { field, .. }) => assert_eq!(field, "wind.points"),
            other => panic!("expected scenario error, got {other:?}"),
        }
    }

    #[test]
    fn short_nominal_run_tracks_and_respects_limits() {
        let mut sc = flight1_like(12.0);
        sc.noise.sigma_theta = 0.0;
        sc.noise.sigma_phi = 0.0;
        sc.actuator_lag = 0.0;
        let cfg = MpcConfig::default();
        let out = run_closed_loop(&sc, &cfg).unwrap();
        let summary = out.summary(&cfg, 10.0);
        assert_eq!(summary.samples, 1200);
        assert!(summary.max_cmd_magnitude_excess <= 1e-9);
        assert!(summary.max_cmd_rate_excess <= 1e-9);
        assert_eq!(summary.solver_failures, 0);
        assert!(summary.max_shifted_error < 0.9);
        assert_eq!(summary.window_violations, 0);
    }

    #[test]
    fn identical_seeds_give_bit_identical_logs() {
        let sc = flight1_like(6.0);
        let cfg = MpcConfig::default();
        let a = run_closed_loop(&sc, &cfg).unwrap();
        let b = run_closed_loop(&sc, &cfg).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        a.log.to_csv(&mut csv_a).unwrap();
        b.log.to_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn log_csv_roundtrip_is_identity() {
        let sc = flight1_like(3.0);
        let cfg = MpcConfig::default();
        let out = run_closed_loop(&sc, &cfg).unwrap();
        let mut buf = Vec::new();
        out.log.to_csv(&mut buf).unwrap();
        let parsed = SimLog::from_csv(buf.as_slice(), cfg.t).unwrap();
        let mut buf2 = Vec::new();
        parsed.to_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(out.log, parsed);
    }
}
