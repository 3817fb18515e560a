//! Inner-loop heading control with input-delay compensation.
//!
//! The steering plant is integrator dynamics with an input delay:
//! `gamma_dot(t) = K * delta(t - t_d)`. The controller predicts the heading
//! after the delay time by integrating the buffered past inputs and applies
//! a proportional gain to the difference between the commanded and the
//! predicted heading (predictor feedback).

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrackingError {
    #[error("delay buffer holds {got} samples, expected {expected}")]
    BufferLengthMismatch { expected: usize, got: usize },
    #[error("series of {got} samples too short to shift by {shift}")]
    SeriesTooShort { shift: usize, got: usize },
}

/// Steering-model parameters: gain `k` (rad/(m*s)), input delay `t_d` (s),
/// sampling period `t` (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringParams {
    pub k: f64,
    pub t_d: f64,
    pub t: f64,
}

impl SteeringParams {
    pub const fn new(k: f64, t_d: f64, t: f64) -> Self {
        SteeringParams { k, t_d, t }
    }

    /// Delay expressed in whole samples, `n_d = round(t_d / T)`.
    pub fn delay_steps(&self) -> usize {
        (self.t_d / self.t).round().max(0.0) as usize
    }
}

/// FIFO buffer of the last `n_d` applied steering inputs, oldest first.
#[derive(Debug, Clone, Default)]
pub struct DelayBuffer {
    buf: VecDeque<f64>,
}

impl DelayBuffer {
    /// A buffer of `n_d` zeros (no past actuation).
    pub fn new(n_d: usize) -> Self {
        DelayBuffer {
            buf: std::iter::repeat(0.0).take(n_d).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Pushes the newest input and returns the one delayed by `n_d` samples.
    /// With `n_d = 0` the input passes through undelayed.
    pub fn apply(&mut self, delta: f64) -> f64 {
        if self.buf.is_empty() {
            return delta;
        }
        self.buf.push_back(delta);
        self.buf.pop_front().expect("non-empty after push")
    }

    pub fn sum(&self) -> f64 {
        self.buf.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }

    /// Resizes to a re-estimated delay. Shrinking truncates the oldest
    /// entries; growth pads zeros at the oldest end so every retained input
    /// keeps its true lag.
    pub fn resize(&mut self, n_d: usize) {
        while self.buf.len() > n_d {
            self.buf.pop_front();
        }
        while self.buf.len() < n_d {
            self.buf.push_front(0.0);
        }
    }
}

/// Proportional tracking gain and how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingGain {
    pub c0: f64,
    pub provenance: GainProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainProvenance {
    Manual,
    TunedByRobustness,
}

impl TrackingGain {
    pub const fn manual(c0: f64) -> Self {
        TrackingGain {
            c0,
            provenance: GainProvenance::Manual,
        }
    }

    pub const fn tuned(c0: f64) -> Self {
        TrackingGain {
            c0,
            provenance: GainProvenance::TunedByRobustness,
        }
    }
}

/// Heading predicted `t_d` ahead: the discrete integral of the steering
/// model over the delay window, driven by the buffered past inputs.
pub fn predict_heading(
    gamma_now: f64,
    buf: &DelayBuffer,
    p: &SteeringParams,
) -> Result<f64, TrackingError> {
    let n_d = p.delay_steps();
    if buf.len() != n_d {
        return Err(TrackingError::BufferLengthMismatch {
            expected: n_d,
            got: buf.len(),
        });
    }
    Ok(gamma_now + p.k * p.t * buf.sum())
}

/// Predictor-feedback control law, optionally saturated at `|delta| <= delta_max`.
pub fn control(
    gamma_cmd: f64,
    gamma_pred: f64,
    gain: &TrackingGain,
    delta_max: Option<f64>,
) -> f64 {
    let delta = gain.c0 * (gamma_cmd - gamma_pred);
    match delta_max {
        Some(m) => delta.clamp(-m, m),
        None => delta,
    }
}

/// Time-shifted tracking error `e[k] = gamma_cmd[k] - gamma[k + n_d]`,
/// defined for `k <= len - 1 - n_d`.
pub fn shifted_error(
    gamma_cmd: &[f64],
    gamma: &[f64],
    p: &SteeringParams,
) -> Result<Vec<f64>, TrackingError> {
    let n_d = p.delay_steps();
    let len = gamma_cmd.len().min(gamma.len());
    if len <= n_d {
        return Err(TrackingError::SeriesTooShort {
            shift: n_d,
            got: len,
        });
    }
    Ok((0..len - n_d)
        .map(|k| gamma_cmd[k] - gamma[k + n_d])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robustness::{self, FrequencyGrid, UncertaintyBounds};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exact discrete realisation of the delayed steering plant.
    struct DiscretePlant {
        gamma: f64,
        buf: DelayBuffer,
        p: SteeringParams,
    }

    impl DiscretePlant {
        fn new(gamma0: f64, p: SteeringParams) -> Self {
            DiscretePlant {
                gamma: gamma0,
                buf: DelayBuffer::new(p.delay_steps()),
                p,
            }
        }

        fn step(&mut self, delta: f64) -> f64 {
            let delayed = self.buf.apply(delta);
            self.gamma += self.p.t * self.p.k * delayed;
            self.gamma
        }
    }

    #[test]
    fn prediction_with_idle_buffer_is_current_heading() {
        let p = SteeringParams::new(0.5, 0.03, 0.01);
        let buf = DelayBuffer::new(3);
        assert_relative_eq!(predict_heading(0.7, &buf, &p).unwrap(), 0.7);
    }

    #[test]
    fn prediction_integrates_buffered_inputs() {
        let p = SteeringParams::new(0.5, 0.03, 0.01);
        let mut buf = DelayBuffer::new(3);
        buf.apply(1.0);
        buf.apply(1.0);
        buf.apply(2.0);
        assert_relative_eq!(predict_heading(0.2, &buf, &p).unwrap(), 0.22, epsilon = 1e-15);
    }

    #[test]
    fn prediction_rejects_wrong_buffer_length() {
        let p = SteeringParams::new(0.5, 0.05, 0.01);
        let buf = DelayBuffer::new(3);
        assert_eq!(
            predict_heading(0.0, &buf, &p),
            Err(TrackingError::BufferLengthMismatch { expected: 5, got: 3 })
        );
    }

    #[test]
    fn matched_model_prediction_is_exact() {
        let p = SteeringParams::new(0.8, 0.42, 0.01);
        let n_d = p.delay_steps();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut plant = DiscretePlant::new(0.3, p);
        let mut history: Vec<f64> = vec![plant.gamma];
        let mut inputs = Vec::new();
        for _ in 0..500 {
            let d = rng.random_range(-2.0..2.0);
            inputs.push(d);
            history.push(plant.step(d));
        }
        // At each time k, predict from the plant's own buffer contents.
        for k in n_d..400 {
            let mut buf = DelayBuffer::new(n_d);
            for i in (k - n_d)..k {
                buf.apply(inputs[i]);
            }
            let pred = predict_heading(history[k], &buf, &p).unwrap();
            assert!((pred - history[k + n_d]).abs() <= 1e-10);
        }
    }

    #[test]
    fn control_law_examples() {
        let g = TrackingGain::manual(2.0);
        assert_relative_eq!(control(0.5, 0.5, &g, None), 0.0);
        assert_relative_eq!(control(0.8, 0.5, &g, None), 0.6, epsilon = 1e-15);
        assert_relative_eq!(control(0.8, 0.5, &g, Some(0.4)), 0.4);
    }

    #[test]
    fn zero_delay_reduces_to_proportional_control() {
        let p = SteeringParams::new(0.8, 0.0, 0.01);
        let buf = DelayBuffer::new(0);
        let pred = predict_heading(0.37, &buf, &p).unwrap();
        assert_relative_eq!(pred, 0.37);
        let g = TrackingGain::manual(3.0);
        assert_relative_eq!(control(1.0, pred, &g, None), 3.0 * (1.0 - 0.37));
    }

    #[test]
    fn shifted_error_perfect_delayed_tracking() {
        let p = SteeringParams::new(1.0, 0.03, 0.01);
        let cmd: Vec<f64> = (0..20).map(|k| (k as f64) * 0.1).collect();
        let mut gamma = vec![0.0; 3];
        gamma.extend(cmd.iter().take(17));
        let e = shifted_error(&cmd, &gamma, &p).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shifted_error_constant_offset() {
        let p = SteeringParams::new(1.0, 0.02, 0.01);
        let cmd = vec![0.5; 10];
        let gamma: Vec<f64> = vec![0.7; 10];
        let e = shifted_error(&cmd, &gamma, &p).unwrap();
        assert!(e.iter().all(|v| (v + 0.2).abs() < 1e-15));
    }

    #[test]
    fn shifted_error_rejects_short_series() {
        let p = SteeringParams::new(1.0, 0.05, 0.01);
        assert!(matches!(
            shifted_error(&[0.0; 4], &[0.0; 4], &p),
            Err(TrackingError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn buffer_resize_preserves_lags() {
        let mut buf = DelayBuffer::new(4);
        for d in [1.0, 2.0, 3.0, 4.0] {
            buf.apply(d);
        }
        buf.resize(2);
        let kept: Vec<f64> = buf.iter().collect();
        assert_eq!(kept, vec![3.0, 4.0]);
        buf.resize(4);
        let padded: Vec<f64> = buf.iter().collect();
        assert_eq!(padded, vec![0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn closed_loop_stable_for_gains_below_two_over_kt() {
        // Matched predictor feedback reduces the delayed loop to a
        // first-order recursion with pole 1 - K*C0*T.
        let p = SteeringParams::new(1.0, 0.7, 0.01);
        for c0 in [0.5, 5.0, 50.0, 190.0] {
            assert!(p.k * c0 * p.t < 2.0);
            let mut plant = DiscretePlant::new(0.0, p);
            let gain = TrackingGain::manual(c0);
            let mut max_abs: f64 = 0.0;
            for k in 0..100_000 {
                let t = k as f64 * p.t;
                let cmd = 1.5 * (0.3 * t).sin();
                let pred = predict_heading(plant.gamma, &plant.buf, &p).unwrap();
                let delta = control(cmd, pred, &gain, None);
                let g = plant.step(delta);
                max_abs = max_abs.max(g.abs());
            }
            assert!(max_abs < 10.0, "unbounded output for C0={c0}: {max_abs}");
        }
    }

    #[test]
    fn tuned_gains_keep_shifted_error_below_limit() {
        // Nominal closed loop at the tuned (C0, l_r): the shifted tracking
        // error stays below l_e = 0.9 rad for a rate-limited command.
        let p = SteeringParams::new(1.0, 0.7, 0.01);
        let u = UncertaintyBounds::from_fractions(0.2, 0.2, p.k, p.t_d);
        let grid = FrequencyGrid::default_grid();
        let tuned = robustness::tune(p.k, p.t_d, &u, 2.5, 0.9, &grid).unwrap();
        let gain = TrackingGain::tuned(tuned.c0);

        let mut plant = DiscretePlant::new(0.0, p);
        let mut cmd_series = Vec::new();
        let mut gamma_series = vec![plant.gamma];
        // Sinusoid with amplitude 2.0 and peak rate exactly l_r.
        let omega = tuned.l_r / 2.0;
        for k in 0..20_000 {
            let t = k as f64 * p.t;
            let cmd = 2.0 * (omega * t).sin();
            cmd_series.push(cmd);
            let pred = predict_heading(plant.gamma, &plant.buf, &p).unwrap();
            let delta = control(cmd, pred, &gain, None);
            gamma_series.push(plant.step(delta));
        }
        let e = shifted_error(&cmd_series, &gamma_series, &p).unwrap();
        let max_e = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_e < 0.9, "max shifted error {max_e} >= 0.9");
    }
}
