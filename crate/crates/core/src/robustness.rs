//! Frequency-domain robustness analysis of the delayed tracking loop.
//!
//! The steering plant `G(s) = (K/s) e^{-s t_d}` under predictor feedback is
//! analysed against a multiplicative disk uncertainty covering gain and
//! delay deviations. The module evaluates the uncertainty weight `W_m`, the
//! performance weight `W_p`, the exact per-frequency worst case of
//! `|W_p S_td^p|` over the unit-disk perturbation, and selects the tracking
//! gain `C_0` (largest gain with robust-stability headroom) and the command
//! rate limit `l_r` (largest rate certified by the robust-performance
//! condition, found by bisection).
//!
//! For a single complex disk perturbation the supremum over the boundary is
//! exact: the Möbius map `(a + b*Delta)/(c + d*Delta)` sends the unit circle
//! to a circle whose largest modulus is `|center| + radius`.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

/// Robust-stability headroom used when selecting `C_0`: the largest gain
/// with `max_w |W_m T| <= RS_HEADROOM` is chosen, reserving robustness
/// budget for the performance condition.
pub const RS_HEADROOM: f64 = 0.7;

/// Default uncertainty level: deviations bounded by 20% of the estimates.
pub const DEFAULT_UNCERTAINTY_FRACTION: f64 = 0.2;

/// Bisection tolerance on the certified rate limit (rad/s).
pub const RATE_BISECTION_TOL: f64 = 1e-3;

/// Smallest rate limit considered certifiable (rad/s).
pub const RATE_MIN: f64 = 1e-3;

/// Upper end of the rate-limit bisection bracket (rad/s).
pub const RATE_MAX: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustnessError {
    /// The perturbed sensitivity has a pole inside the closed unit disk at
    /// this frequency: robust stability is lost.
    #[error("robust stability violated at omega = {omega} rad/s")]
    RsViolation { omega: f64 },
    /// Even the smallest gain on the grid violates the stability headroom.
    #[error("no gain on the grid satisfies the robust-stability headroom")]
    NoFeasibleGain,
    /// No rate limit >= RATE_MIN certifies robust performance.
    #[error("no rate limit certifies robust performance")]
    NoFeasibleRate,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Bounds on the steering-model parameter deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UncertaintyBounds {
    /// Gain deviation bound, same units as `K`.
    pub delta_k: f64,
    /// Delay deviation bound, s.
    pub delta_td: f64,
}

impl UncertaintyBounds {
    pub const fn new(delta_k: f64, delta_td: f64) -> Self {
        UncertaintyBounds { delta_k, delta_td }
    }

    /// Bounds as fractions of the estimated parameters.
    pub fn from_fractions(frac_k: f64, frac_td: f64, k: f64, t_d: f64) -> Self {
        UncertaintyBounds {
            delta_k: frac_k * k,
            delta_td: frac_td * t_d,
        }
    }
}

/// Limits defining the tracking performance weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerformanceSpec {
    /// Command magnitude limit, rad.
    pub l_m: f64,
    /// Tracking error limit, rad.
    pub l_e: f64,
    /// Command rate limit, rad/s.
    pub l_r: f64,
}

impl PerformanceSpec {
    pub const fn new(l_m: f64, l_e: f64, l_r: f64) -> Self {
        PerformanceSpec { l_m, l_e, l_r }
    }

    pub fn is_valid(&self) -> bool {
        self.l_m > 0.0 && self.l_e > 0.0 && self.l_r > 0.0 && self.l_e < self.l_m
    }
}

/// Logarithmically spaced frequency grid (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub fn logspace(lo: f64, hi: f64, count: usize) -> Self {
        assert!(lo > 0.0 && hi > lo && count >= 2, "invalid frequency grid");
        let (llo, lhi) = (lo.ln(), hi.ln());
        let omegas = (0..count)
            .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
            .collect();
        FrequencyGrid { omegas }
    }

    /// 400 points over [1e-3, 1e3] rad/s: brackets the `W_p` and `W_m`
    /// breakpoints for all plausible parameters.
    pub fn default_grid() -> Self {
        Self::logspace(1e-3, 1e3, 400)
    }

    /// The same span at `factor` times the point density.
    pub fn densified(&self, factor: usize) -> Self {
        let lo = self.omegas[0];
        let hi = *self.omegas.last().expect("non-empty grid");
        Self::logspace(lo, hi, (self.omegas.len() - 1) * factor + 1)
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }
}

/// Multiplicative uncertainty weight for the delayed integrator plant.
///
/// `|((K+dK)/K) e^{-j dtd w} - 1|` below the phase-wrap frequency
/// `pi/dtd`, and `(K+dK)/K + 1` above it. With `dtd = 0` the first branch
/// applies at every frequency.
pub fn weight_wm(omega: f64, k: f64, u: &UncertaintyBounds) -> f64 {
    let gain_ratio = (k + u.delta_k) / k;
    if u.delta_td == 0.0 || omega < std::f64::consts::PI / u.delta_td {
        (Complex64::from_polar(gain_ratio, -u.delta_td * omega) - 1.0).norm()
    } else {
        gain_ratio.abs() + 1.0
    }
}

/// Performance weight: `l_m/l_e` below `l_r/l_m`, then rolling off as
/// `l_r/(l_e w)`.
pub fn weight_wp(omega: f64, spec: &PerformanceSpec) -> f64 {
    if omega < spec.l_r / spec.l_m {
        spec.l_m / spec.l_e
    } else {
        spec.l_r / (spec.l_e * omega)
    }
}

/// Sign convention for the time-shift factor in the numerator of the
/// shifted sensitivity. `Forward` is the literal formula (`e^{+s t_d}`);
/// `Backward` flips the sign for sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftSign {
    #[default]
    Forward,
    Backward,
}

/// Loop transfer function of the predictor-feedback loop at `s = j omega`.
fn loop_tf(omega: f64, c0: f64, k: f64, t_d: f64) -> Complex64 {
    let e_m = Complex64::from_polar(1.0, -omega * t_d);
    let jw = Complex64::new(0.0, omega);
    c0 * k * e_m / (jw + c0 * k * (1.0 - e_m))
}

/// Exact worst case of `W_p |S_td^p|` over the unit-disk perturbation at one
/// frequency.
///
/// With `a = 1 + L(1 - e^{j w t_d})`, `b = a`-side uncertainty coupling
/// `L(1 - e^{j w t_d}) W_m`, `c = 1 + L`, `d = L W_m`, the supremum of
/// `|(a + b Delta)/(c + d Delta)|` over `|Delta| <= 1` is attained on the
/// boundary and equals `|center| + radius` of the Möbius image circle.
/// Returns `RsViolation` when `|c| <= |d|` (pole inside the closed disk).
pub fn worst_case_wp_s(
    omega: f64,
    c0: f64,
    k: f64,
    t_d: f64,
    u: &UncertaintyBounds,
    spec: &PerformanceSpec,
) -> Result<f64, RobustnessError> {
    worst_case_wp_s_with(omega, c0, k, t_d, u, spec, ShiftSign::Forward)
}

/// [`worst_case_wp_s`] with an explicit shift-sign convention.
pub fn worst_case_wp_s_with(
    omega: f64,
    c0: f64,
    k: f64,
    t_d: f64,
    u: &UncertaintyBounds,
    spec: &PerformanceSpec,
    shift: ShiftSign,
) -> Result<f64, RobustnessError> {
    let l = loop_tf(omega, c0, k, t_d);
    let shift_arg = match shift {
        ShiftSign::Forward => omega * t_d,
        ShiftSign::Backward => -omega * t_d,
    };
    let e_p = Complex64::from_polar(1.0, shift_arg);
    let wm = weight_wm(omega, k, u);
    let a = 1.0 + l * (1.0 - e_p);
    let c = 1.0 + l;
    if wm == 0.0 {
        // Degenerate perturbation set: the nominal shifted sensitivity.
        return Ok(weight_wp(omega, spec) * (a / c).norm());
    }
    let b = l * (1.0 - e_p) * wm;
    let d = l * wm;
    if c.norm() <= d.norm() {
        return Err(RobustnessError::RsViolation { omega });
    }
    let denom = c.norm_sqr() - d.norm_sqr();
    let center = (a * c.conj() - b * d.conj()) / denom;
    let radius_sq = center.norm_sqr() - (a.norm_sqr() - b.norm_sqr()) / denom;
    let radius = radius_sq.max(0.0).sqrt();
    Ok(weight_wp(omega, spec) * (center.norm() + radius))
}

/// Robust-stability margin `max_w |W_m T_nom|` over the grid.
///
/// For the integrator plant with predictor feedback the nominal
/// complementary sensitivity is `C0 K e^{-j w t_d}/(j w + C0 K)`, so its
/// magnitude is `C0 K / sqrt(w^2 + (C0 K)^2)`. The loop is certified
/// robustly stable when the margin is below one.
pub fn robust_stability_margin(
    c0: f64,
    k: f64,
    _t_d: f64,
    u: &UncertaintyBounds,
    grid: &FrequencyGrid,
) -> f64 {
    let ck = c0 * k;
    grid.omegas()
        .iter()
        .map(|&w| weight_wm(w, k, u) * ck / (w * w + ck * ck).sqrt())
        .fold(0.0, f64::max)
}

/// Result of the gain/rate-limit selection.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TuneResult {
    /// Selected tracking gain.
    pub c0: f64,
    /// Largest certified command rate limit, rad/s.
    pub l_r: f64,
    /// Certifying value `max_w sup_Delta |W_p S_td^p|` at `(c0, l_r)`; < 1.
    pub sup_wp_s: f64,
    /// Robust-stability margin at `c0`.
    pub rs_margin: f64,
}

/// Largest `sup |W_p S|` over the grid at a candidate rate limit, or the
/// first stability violation encountered.
pub fn rp_sup_over_grid(
    c0: f64,
    k: f64,
    t_d: f64,
    u: &UncertaintyBounds,
    spec: &PerformanceSpec,
    grid: &FrequencyGrid,
) -> Result<f64, RobustnessError> {
    let mut sup = 0.0f64;
    for &w in grid.omegas() {
        sup = sup.max(worst_case_wp_s(w, c0, k, t_d, u, spec)?);
    }
    Ok(sup)
}

/// Selects `(C_0, l_r)`: the largest gain on a logarithmic grid meeting the
/// robust-stability headroom, then the largest rate limit certified by the
/// robust-performance condition via bisection (tolerance 1e-3 rad/s).
pub fn tune(
    k: f64,
    t_d: f64,
    u: &UncertaintyBounds,
    l_m: f64,
    l_e: f64,
    grid: &FrequencyGrid,
) -> Result<TuneResult, RobustnessError> {
    if !(k > 0.0) || !(t_d > 0.0) {
        return Err(RobustnessError::InvalidInput(
            "K and t_d must be positive (the predictor degenerates at t_d = 0)".into(),
        ));
    }
    if !(l_m > 0.0 && l_e > 0.0 && l_e < l_m) {
        return Err(RobustnessError::InvalidInput(
            "limits must satisfy 0 < l_e < l_m".into(),
        ));
    }

    // Gain grid: 25 points per decade over [1e-3, 1e3]. The margin is
    // nondecreasing in C0, so the last admissible grid point is the answer.
    let gains = FrequencyGrid::logspace(1e-3, 1e3, 151);
    let mut c0_best = None;
    for &c0 in gains.omegas() {
        if robust_stability_margin(c0, k, t_d, u, grid) <= RS_HEADROOM {
            c0_best = Some(c0);
        }
    }
    let c0 = c0_best.ok_or(RobustnessError::NoFeasibleGain)?;
    let rs_margin = robust_stability_margin(c0, k, t_d, u, grid);

    let certify = |l_r: f64| -> Option<f64> {
        let spec = PerformanceSpec::new(l_m, l_e, l_r);
        match rp_sup_over_grid(c0, k, t_d, u, &spec, grid) {
            Ok(s) if s < 1.0 => Some(s),
            _ => None,
        }
    };

    let mut lo = RATE_MIN;
    let mut sup_lo = certify(lo).ok_or(RobustnessError::NoFeasibleRate)?;
    let mut hi = RATE_MAX;
    if let Some(s) = certify(hi) {
        // The whole bracket certifies; the cap is the answer.
        return Ok(TuneResult { c0, l_r: hi, sup_wp_s: s, rs_margin });
    }
    while hi - lo > RATE_BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        match certify(mid) {
            Some(s) => {
                lo = mid;
                sup_lo = s;
            }
            None => hi = mid,
        }
    }
    Ok(TuneResult { c0, l_r: lo, sup_wp_s: sup_lo, rs_margin })
}

/// One row of the frequency sweep emitted by the analysis CLI.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub omega: f64,
    pub w_m: f64,
    pub w_p: f64,
    /// `sup_Delta |W_p S_td^p|`; NaN where robust stability is violated.
    pub worst_case: f64,
}

/// Frequency sweep of the weights and worst case at fixed `(C_0, l_r)`.
pub fn frequency_sweep(
    c0: f64,
    k: f64,
    t_d: f64,
    u: &UncertaintyBounds,
    spec: &PerformanceSpec,
    grid: &FrequencyGrid,
) -> Vec<SweepPoint> {
    grid.omegas()
        .iter()
        .map(|&w| SweepPoint {
            omega: w,
            w_m: weight_wm(w, k, u),
            w_p: weight_wp(w, spec),
            worst_case: worst_case_wp_s(w, c0, k, t_d, u, spec).unwrap_or(f64::NAN),
        })
        .collect()
}
