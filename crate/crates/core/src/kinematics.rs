//! Spherical-coordinate kite kinematics.
//!
//! The kite position is described by the tether line angles: elevation
//! `theta` and azimuth `phi`, both in radians, with the line length `r` in
//! meters. Motion tangential to the tether sphere follows a unicycle model
//! driven by the heading angle `gamma`, with the tangential speed given by a
//! static lift/gravity velocity model. All operations here are pure
//! functions; the discrete-time step is a forward-Euler discretisation of
//! the continuous model and is exactly independent of `r`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Rates below this magnitude (rad/s) cannot define a heading direction.
pub const ZERO_RATE_TOL: f64 = 1e-12;

/// Guard on `cos(theta)`: the azimuth dynamics are singular at the zenith.
pub const ZENITH_GUARD: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum KinematicsError {
    /// Both line-angle rates are numerically zero; heading is undefined.
    #[error("heading undefined: both line-angle rates below {ZERO_RATE_TOL}")]
    ZeroVelocity,
    /// `cos(theta)` fell below the zenith guard.
    #[error("state too close to zenith: cos(theta) <= {ZENITH_GUARD}")]
    NearZenith,
}

/// Tether line angles (rad): elevation `theta`, azimuth `phi`.
///
/// Valid flight states keep `theta` in `(0, pi/2)` so that `cos(theta) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LineAngles {
    pub theta: f64,
    pub phi: f64,
}

impl LineAngles {
    pub const fn new(theta: f64, phi: f64) -> Self {
        LineAngles { theta, phi }
    }

    /// Euclidean distance to another line-angle pair.
    pub fn distance(&self, other: &LineAngles) -> f64 {
        let dt = self.theta - other.theta;
        let dp = self.phi - other.phi;
        (dt * dt + dp * dp).sqrt()
    }
}

/// Axis-aligned box bounds on the line angles (the safety window).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: LineAngles,
    pub hi: LineAngles,
}

impl Window {
    pub const fn new(theta_min: f64, theta_max: f64, phi_min: f64, phi_max: f64) -> Self {
        Window {
            lo: LineAngles::new(theta_min, phi_min),
            hi: LineAngles::new(theta_max, phi_max),
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.lo.theta < self.hi.theta && self.lo.phi < self.hi.phi
    }

    pub fn contains(&self, xi: &LineAngles) -> bool {
        xi.theta >= self.lo.theta
            && xi.theta <= self.hi.theta
            && xi.phi >= self.lo.phi
            && xi.phi <= self.hi.phi
    }

    /// The window shrunk inward by `margin` on every side.
    pub fn shrunk(&self, margin: f64) -> Window {
        Window::new(
            self.lo.theta + margin,
            self.hi.theta - margin,
            self.lo.phi + margin,
            self.hi.phi - margin,
        )
    }
}

/// Full kite state: line angles, heading angle (rad, unwrapped), line length (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KiteState {
    pub xi: LineAngles,
    pub gamma: f64,
    pub r: f64,
}

impl KiteState {
    pub const fn new(theta: f64, phi: f64, gamma: f64, r: f64) -> Self {
        KiteState {
            xi: LineAngles::new(theta, phi),
            gamma,
            r,
        }
    }
}

/// Parameters of the kinematic model.
///
/// `alpha_l` and `alpha_g` (1/s) scale the velocity components arising from
/// lift and gravity; both must be positive. `r` is the line length (m) and
/// `t` the sampling period (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    pub alpha_l: f64,
    pub alpha_g: f64,
    pub r: f64,
    pub t: f64,
}

impl KinematicParams {
    pub const fn new(alpha_l: f64, alpha_g: f64, r: f64, t: f64) -> Self {
        KinematicParams { alpha_l, alpha_g, r, t }
    }

    pub fn is_valid(&self) -> bool {
        self.alpha_l > 0.0 && self.alpha_g > 0.0 && self.r > 0.0 && self.t > 0.0
    }
}

/// Kite position in ground-station Cartesian coordinates (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPosition {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl CartesianPosition {
    pub fn norm(&self) -> f64 {
        (self.px * self.px + self.py * self.py + self.pz * self.pz).sqrt()
    }
}

/// Cartesian position of the kite from its spherical state.
pub fn to_cartesian(state: &KiteState) -> CartesianPosition {
    let (theta, phi, r) = (state.xi.theta, state.xi.phi, state.r);
    CartesianPosition {
        px: r * theta.cos() * phi.cos(),
        py: r * theta.cos() * phi.sin(),
        pz: r * theta.sin(),
    }
}

/// Heading angle from line-angle rates.
///
/// Returns the four-quadrant angle of the vector `(cos(theta)*phi_dot,
/// theta_dot)` measured from the `theta_dot` axis, in `(-pi, pi]`. Pure
/// upward motion maps to 0, pure sideways motion (increasing azimuth) to
/// `pi/2`.
pub fn heading_from_rates(
    theta: f64,
    theta_dot: f64,
    phi_dot: f64,
) -> Result<f64, KinematicsError> {
    if theta_dot.abs() < ZERO_RATE_TOL && phi_dot.abs() < ZERO_RATE_TOL {
        return Err(KinematicsError::ZeroVelocity);
    }
    let gamma = (theta.cos() * phi_dot).atan2(theta_dot);
    // atan2 yields [-pi, pi]; fold the -pi edge onto +pi.
    if gamma <= -PI {
        Ok(gamma + 2.0 * PI)
    } else {
        Ok(gamma)
    }
}

/// Shift `raw` by the multiple of 2*pi that brings it closest to `prev`.
///
/// Used to keep heading estimates continuous across samples.
pub fn unwrap_heading(prev: f64, raw: f64) -> f64 {
    raw + 2.0 * PI * ((prev - raw) / (2.0 * PI)).round()
}

/// Tangential speed (m/s) from the lift/gravity velocity model.
///
/// `v = r*alpha_l*cos(theta)*cos(phi) - r*alpha_g*cos(gamma)`. The value may
/// be negative; no clipping is applied.
pub fn velocity_tangential(xi: &LineAngles, gamma: f64, p: &KinematicParams) -> f64 {
    p.r * p.alpha_l * xi.theta.cos() * xi.phi.cos() - p.r * p.alpha_g * gamma.cos()
}

/// Continuous-time line-angle rates `(theta_dot, phi_dot)` of the unicycle model.
pub fn continuous_derivatives(
    state: &KiteState,
    p: &KinematicParams,
) -> Result<(f64, f64), KinematicsError> {
    let cos_theta = state.xi.theta.cos();
    if cos_theta <= ZENITH_GUARD {
        return Err(KinematicsError::NearZenith);
    }
    let v = velocity_tangential(&state.xi, state.gamma, p);
    let theta_dot = v / p.r * state.gamma.cos();
    let phi_dot = v / (p.r * cos_theta) * state.gamma.sin();
    Ok((theta_dot, phi_dot))
}

/// One forward-Euler step of the discretised kinematics.
///
/// The line length cancels exactly; the result depends only on the angles,
/// the heading, and `alpha_l`, `alpha_g`, `t`.
pub fn discrete_step(
    xi: &LineAngles,
    gamma: f64,
    p: &KinematicParams,
) -> Result<LineAngles, KinematicsError> {
    let cos_theta = xi.theta.cos();
    if cos_theta <= ZENITH_GUARD {
        return Err(KinematicsError::NearZenith);
    }
    let (cos_phi, cos_gamma, sin_gamma) = (xi.phi.cos(), gamma.cos(), gamma.sin());
    let theta_next = xi.theta + p.t * p.alpha_l * cos_theta * cos_phi * cos_gamma
        - p.t * p.alpha_g * cos_gamma * cos_gamma;
    let phi_next = xi.phi + p.t * p.alpha_l * cos_phi * sin_gamma
        - p.t * p.alpha_g * (2.0 * gamma).sin() / (2.0 * cos_theta);
    Ok(LineAngles::new(theta_next, phi_next))
}

/// Analytic Jacobians of [`discrete_step`] with respect to the line angles
/// (`A`, 2x2) and the heading (`B`, 2-vector), evaluated at a reference point.
pub fn linearize(
    xi_ref: &LineAngles,
    gamma_ref: f64,
    p: &KinematicParams,
) -> Result<(nalgebra::Matrix2<f64>, nalgebra::Vector2<f64>), KinematicsError> {
    let cos_theta = xi_ref.theta.cos();
    if cos_theta <= ZENITH_GUARD {
        return Err(KinematicsError::NearZenith);
    }
    let sin_theta = xi_ref.theta.sin();
    let (cos_phi, sin_phi) = (xi_ref.phi.cos(), xi_ref.phi.sin());
    let (cos_gamma, sin_gamma) = (gamma_ref.cos(), gamma_ref.sin());
    let sin_2gamma = (2.0 * gamma_ref).sin();
    let cos_2gamma = (2.0 * gamma_ref).cos();

    let a = nalgebra::Matrix2::new(
        1.0 - p.t * p.alpha_l * sin_theta * cos_phi * cos_gamma,
        -p.t * p.alpha_l * cos_theta * sin_phi * cos_gamma,
        -p.t * p.alpha_g * sin_2gamma * sin_theta / (2.0 * cos_theta * cos_theta),
        1.0 - p.t * p.alpha_l * sin_phi * sin_gamma,
    );
    let b = nalgebra::Vector2::new(
        -p.t * p.alpha_l * cos_theta * cos_phi * sin_gamma + p.t * p.alpha_g * sin_2gamma,
        p.t * p.alpha_l * cos_phi * cos_gamma - p.t * p.alpha_g * cos_2gamma / cos_theta,
    );
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Vector2};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(alpha_l: f64, alpha_g: f64, r: f64, t: f64) -> KinematicParams {
        KinematicParams::new(alpha_l, alpha_g, r, t)
    }

    #[test]
    fn cartesian_axis_alignment() {
        let p = to_cartesian(&KiteState::new(0.0, 0.0, 0.0, 1.0));
        assert_relative_eq!(p.px, 1.0);
        assert_relative_eq!(p.py, 0.0);
        assert_relative_eq!(p.pz, 0.0);

        let zenith = to_cartesian(&KiteState::new(PI / 2.0, 0.0, 0.0, 2.0));
        assert!(zenith.px.abs() < 1e-15);
        assert!(zenith.py.abs() < 1e-15);
        assert_relative_eq!(zenith.pz, 2.0);
    }

    #[test]
    fn cartesian_general_point() {
        let p = to_cartesian(&KiteState::new(0.5, 0.2, 0.0, 100.0));
        assert!((p.px - 86.009).abs() < 1e-2);
        assert!((p.py - 17.43).abs() < 1e-2);
        assert!((p.pz - 47.94).abs() < 1e-2);
    }

    #[test]
    fn heading_pure_motions() {
        assert_relative_eq!(heading_from_rates(0.3, 1.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(heading_from_rates(0.0, 0.0, 1.0).unwrap(), PI / 2.0);
    }

    #[test]
    fn heading_general_point() {
        // atan2(cos(0.5)*0.2, 0.1)
        let g = heading_from_rates(0.5, 0.1, 0.2).unwrap();
        assert!((g - 1.053).abs() < 1e-3);
        assert_relative_eq!(g, (0.5f64.cos() * 0.2).atan2(0.1), epsilon = 1e-15);
    }

    #[test]
    fn heading_zero_velocity_is_error() {
        assert_eq!(
            heading_from_rates(0.3, 1e-13, -1e-13),
            Err(KinematicsError::ZeroVelocity)
        );
    }

    #[test]
    fn heading_range_is_half_open() {
        // Straight-down motion with a tiny negative sideways component would
        // give -pi from atan2; the fold maps it into (-pi, pi].
        let g = heading_from_rates(0.3, -1.0, -0.0).unwrap();
        assert!(g > -PI && g <= PI);
    }

    #[test]
    fn velocity_limit_cases() {
        let p = params(1.0, 1.0, 1.0, 0.01);
        let xi = LineAngles::new(0.0, 0.0);
        assert_relative_eq!(velocity_tangential(&xi, PI / 2.0, &p), 1.0, epsilon = 1e-15);
        assert_relative_eq!(velocity_tangential(&xi, 0.0, &p), 0.0, epsilon = 1e-15);

        let p2 = params(0.3, 0.1, 100.0, 0.01);
        let v = velocity_tangential(&LineAngles::new(0.5, 0.2), 1.0, &p2);
        assert!((v - 20.40).abs() < 0.01);
    }

    #[test]
    fn derivatives_limit_cases() {
        let p = params(0.8, 0.2, 50.0, 0.01);
        let s = KiteState::new(0.6, 0.1, 0.0, 50.0);
        let (theta_dot, phi_dot) = continuous_derivatives(&s, &p).unwrap();
        let v = velocity_tangential(&s.xi, 0.0, &p);
        assert_relative_eq!(theta_dot, v / p.r, epsilon = 1e-15);
        assert_relative_eq!(phi_dot, 0.0, epsilon = 1e-15);

        let s2 = KiteState::new(0.0, 0.0, PI / 2.0, 50.0);
        let (td2, pd2) = continuous_derivatives(&s2, &p).unwrap();
        let v2 = velocity_tangential(&s2.xi, PI / 2.0, &p);
        assert!(td2.abs() < 1e-16);
        assert_relative_eq!(pd2, v2 / p.r, epsilon = 1e-12);
    }

    #[test]
    fn derivatives_near_zenith_is_error() {
        let p = params(0.8, 0.2, 50.0, 0.01);
        let s = KiteState::new(PI / 2.0, 0.0, 0.3, 50.0);
        assert_eq!(continuous_derivatives(&s, &p), Err(KinematicsError::NearZenith));
    }

    #[test]
    fn derivatives_match_richardson_extrapolated_step() {
        // Richardson extrapolation of the one-step secant slope removes the
        // O(T) Euler term, leaving the continuous derivative up to O(T^2).
        let s = KiteState::new(0.6, 0.1, 0.3, 50.0);
        let t = 1e-3;
        let slope = |dt: f64| {
            let p = params(0.8, 0.2, 50.0, dt);
            let next = discrete_step(&s.xi, s.gamma, &p).unwrap();
            (
                (next.theta - s.xi.theta) / dt,
                (next.phi - s.xi.phi) / dt,
            )
        };
        let (d1t, d1p) = slope(t);
        let (d2t, d2p) = slope(t / 2.0);
        let rich = (2.0 * d2t - d1t, 2.0 * d2p - d1p);
        let p = params(0.8, 0.2, 50.0, t);
        let (theta_dot, phi_dot) = continuous_derivatives(&s, &p).unwrap();
        assert!((rich.0 - theta_dot).abs() < 1e-9);
        assert!((rich.1 - phi_dot).abs() < 1e-9);
    }

    #[test]
    fn step_sideways_keeps_elevation() {
        let p = params(0.8, 0.2, 90.0, 0.01);
        let xi = LineAngles::new(0.6, 0.1);
        let next = discrete_step(&xi, PI / 2.0, &p).unwrap();
        assert_relative_eq!(next.theta, xi.theta, epsilon = 1e-15);
        assert_relative_eq!(
            next.phi,
            xi.phi + p.t * p.alpha_l * xi.phi.cos(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn step_general_point() {
        let p = params(0.8, 0.2, 90.0, 0.01);
        let next = discrete_step(&LineAngles::new(0.6, 0.1), 0.3, &p).unwrap();
        assert!((next.theta - 0.60445).abs() < 1e-5);
        assert!((next.phi - 0.10167).abs() < 1e-5);
    }

    #[test]
    fn step_is_independent_of_line_length() {
        let xi = LineAngles::new(0.7, -0.3);
        let a = discrete_step(&xi, 1.2, &params(0.3, 0.1, 1.0, 0.01)).unwrap();
        let b = discrete_step(&xi, 1.2, &params(0.3, 0.1, 1000.0, 0.01)).unwrap();
        assert!((a.theta - b.theta).abs() <= 1e-12);
        assert!((a.phi - b.phi).abs() <= 1e-12);
    }

    /// RK4 step of the continuous model, used as the discretisation oracle.
    fn rk4_step(xi: &LineAngles, gamma: f64, p: &KinematicParams, dt: f64) -> LineAngles {
        let f = |xi: &LineAngles| {
            let s = KiteState::new(xi.theta, xi.phi, gamma, p.r);
            continuous_derivatives(&s, p).unwrap()
        };
        let k1 = f(xi);
        let k2 = f(&LineAngles::new(
            xi.theta + 0.5 * dt * k1.0,
            xi.phi + 0.5 * dt * k1.1,
        ));
        let k3 = f(&LineAngles::new(
            xi.theta + 0.5 * dt * k2.0,
            xi.phi + 0.5 * dt * k2.1,
        ));
        let k4 = f(&LineAngles::new(xi.theta + dt * k3.0, xi.phi + dt * k3.1));
        LineAngles::new(
            xi.theta + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            xi.phi + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        )
    }

    #[test]
    fn euler_step_has_local_order_two_vs_rk4() {
        let xi = LineAngles::new(0.6, 0.1);
        let gamma = 0.4;
        let errs: Vec<f64> = [0.01, 0.005, 0.0025]
            .iter()
            .map(|&dt| {
                let p = params(0.8, 0.2, 50.0, dt);
                let e = discrete_step(&xi, gamma, &p).unwrap();
                let r = rk4_step(&xi, gamma, &p, dt);
                ((e.theta - r.theta).powi(2) + (e.phi - r.phi).powi(2)).sqrt()
            })
            .collect();
        // Successive halvings of T: observed order = log2(err ratio).
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.9, "observed order {order} below 1.9");
        }
    }

    fn fd_jacobians(
        xi: &LineAngles,
        gamma: f64,
        p: &KinematicParams,
        h: f64,
    ) -> (Matrix2<f64>, Vector2<f64>) {
        let step = |xi: &LineAngles, g: f64| discrete_step(xi, g, p).unwrap();
        let col = |plus: LineAngles, minus: LineAngles| {
            Vector2::new(
                (plus.theta - minus.theta) / (2.0 * h),
                (plus.phi - minus.phi) / (2.0 * h),
            )
        };
        let a_theta = col(
            step(&LineAngles::new(xi.theta + h, xi.phi), gamma),
            step(&LineAngles::new(xi.theta - h, xi.phi), gamma),
        );
        let a_phi = col(
            step(&LineAngles::new(xi.theta, xi.phi + h), gamma),
            step(&LineAngles::new(xi.theta, xi.phi - h), gamma),
        );
        let b = col(step(xi, gamma + h), step(xi, gamma - h));
        (Matrix2::from_columns(&[a_theta, a_phi]), b)
    }

    #[test]
    fn linearize_degenerate_step_is_identity() {
        let p = params(0.8, 0.2, 50.0, 0.0);
        let (a, b) = linearize(&LineAngles::new(0.6, 0.1), 0.3, &p).unwrap();
        assert_relative_eq!(a, Matrix2::identity(), epsilon = 1e-15);
        assert_relative_eq!(b, Vector2::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn linearize_matches_finite_differences_at_reference_point() {
        let p = params(0.8, 0.2, 50.0, 0.01);
        let xi = LineAngles::new(0.6, 0.1);
        let (a, b) = linearize(&xi, 0.3, &p).unwrap();
        let (a_fd, b_fd) = fd_jacobians(&xi, 0.3, &p, 1e-6);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a[(i, j)] - a_fd[(i, j)]).abs() < 1e-7);
            }
            assert!((b[i] - b_fd[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linearize_zero_heading_input_column() {
        let p = params(0.8, 0.2, 50.0, 0.01);
        let xi = LineAngles::new(0.6, 0.1);
        let (_, b) = linearize(&xi, 0.0, &p).unwrap();
        assert_relative_eq!(b[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            b[1],
            p.t * p.alpha_l * xi.phi.cos() - p.t * p.alpha_g / xi.theta.cos(),
            epsilon = 1e-15
        );
        let (_, b_fd) = fd_jacobians(&xi, 0.0, &p, 1e-6);
        assert!((b[0] - b_fd[0]).abs() < 1e-7);
        assert!((b[1] - b_fd[1]).abs() < 1e-7);
    }

    #[test]
    fn linearize_matches_finite_differences_over_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let xi = LineAngles::new(
                rng.random_range(0.17..1.40),
                rng.random_range(-0.7..0.7),
            );
            let gamma = rng.random_range(-2.5..2.5);
            let p = params(
                rng.random_range(0.1..0.5),
                rng.random_range(0.05..0.2),
                90.0,
                0.01,
            );
            let (a, b) = linearize(&xi, gamma, &p).unwrap();
            let (a_fd, b_fd) = fd_jacobians(&xi, gamma, &p, 1e-6);
            let scale_a = a_fd.abs().max().max(1e-30);
            let scale_b = b_fd.abs().max().max(1e-30);
            assert!((a - a_fd).abs().max() / scale_a < 1e-6);
            assert!((b - b_fd).abs().max() / scale_b < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn cartesian_norm_equals_line_length(
            theta in 0.01f64..1.55,
            phi in -1.5f64..1.5,
            r in 1.0f64..500.0,
        ) {
            let p = to_cartesian(&KiteState::new(theta, phi, 0.0, r));
            prop_assert!((p.norm() - r).abs() / r < 1e-9);
        }

        #[test]
        fn step_r_invariance(
            theta in 0.17f64..1.40,
            phi in -0.7f64..0.7,
            gamma in -2.5f64..2.5,
            r1 in 1.0f64..1000.0,
            r2 in 1.0f64..1000.0,
        ) {
            let a = discrete_step(&LineAngles::new(theta, phi), gamma,
                &params(0.3, 0.1, r1, 0.01)).unwrap();
            let b = discrete_step(&LineAngles::new(theta, phi), gamma,
                &params(0.3, 0.1, r2, 0.01)).unwrap();
            prop_assert!((a.theta - b.theta).abs() <= 1e-12);
            prop_assert!((a.phi - b.phi).abs() <= 1e-12);
        }

        #[test]
        fn heading_roundtrip_through_derivatives(
            theta in 0.17f64..1.40,
            phi in -0.7f64..0.7,
            gamma in -3.1f64..3.1,
        ) {
            let p = params(0.3, 0.1, 90.0, 0.01);
            let s = KiteState::new(theta, phi, gamma, p.r);
            let v = velocity_tangential(&s.xi, gamma, &p);
            prop_assume!(v > 1e-6);
            let (theta_dot, phi_dot) = continuous_derivatives(&s, &p).unwrap();
            let g = heading_from_rates(theta, theta_dot, phi_dot).unwrap();
            let diff = (g - gamma).rem_euclid(2.0 * PI);
            let diff = diff.min(2.0 * PI - diff);
            prop_assert!(diff < 1e-9);
        }
    }
}
