//! Outer-loop guidance MPC on the deviation system along the reference.
//!
//! Each sample the controller predicts the kite position one input delay
//! ahead, anchors at the nearest reference sample, linearises the discrete
//! kinematics along the reference over the horizon, condenses the
//! constrained quadratic tracking problem into a dense QP in the command
//! rate moves and the window slack variables, solves it warm-started, and
//! reconstructs the commanded heading from the first move.

use crate::kinematics::{
    discrete_step, linearize, KinematicParams, KinematicsError, KiteState, LineAngles, Window,
};
use crate::qp::{self, KktResiduals, QpProblem, QpSolver, QpStatus};
use crate::reference_path::{nearest_reference_index, ReferencePath};
use crate::tracking::{DelayBuffer, SteeringParams};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of consecutive solver failures tolerated while holding the last
/// command before slewing back toward the reference heading.
const FALLBACK_HOLD_SAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("delay buffer holds {got} samples, expected {expected}")]
    BufferLengthMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Qp(#[from] qp::QpError),
}

/// Weights, limits, and geometry of the guidance problem.
///
/// The defaults encode the working configuration: 100 Hz sampling, a
/// 30-stage (0.3 s) horizon, position weights `Q = diag(1, 2)` with terminal
/// `5 Q`, heading-deviation weight `5e-3`, slack weights `1e5` times the
/// position weights, command magnitude limit 2.5 rad, and the safety window
/// `theta in [0.17, 1.40]`, `phi in [-0.70, 0.70]`. The rate limit is a
/// placeholder until the robustness tuner supplies one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: Matrix2<f64>,
    pub q_terminal: Matrix2<f64>,
    pub r: f64,
    pub s: Matrix2<f64>,
    pub s_terminal: Matrix2<f64>,
    pub l_m: f64,
    pub l_r: f64,
    pub window: Window,
    pub t: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = Matrix2::new(1.0, 0.0, 0.0, 2.0);
        MpcConfig {
            horizon: 30,
            q,
            q_terminal: 5.0 * q,
            r: 5e-3,
            s: 1e5 * q,
            s_terminal: 1e5 * 5.0 * q,
            l_m: 2.5,
            l_r: 1.0,
            window: Window::new(0.17, 1.40, -0.70, 0.70),
            t: 0.01,
        }
    }
}

impl MpcConfig {
    /// Number of QP decision variables: H rate moves + 2(H+1) slacks.
    pub fn n_vars(&self) -> usize {
        self.horizon + 2 * (self.horizon + 1)
    }

    /// Number of QP constraint rows.
    pub fn n_constraints(&self) -> usize {
        // slack nonnegativity + window lower/upper + input bounds + rate bounds
        2 * (self.horizon + 1) + 4 * (self.horizon + 1) + 2 * self.horizon + 2 * self.horizon
    }
}

/// Deviation of the delayed position prediction and the previous command
/// from the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationState {
    /// `xi_td - xi_ref[j]`.
    pub chi: Vector2<f64>,
    /// `gamma_cmd[k-1] - gamma_ref[j-1]`.
    pub u_prev: f64,
}

impl DeviationState {
    fn augmented(&self) -> Vector3<f64> {
        Vector3::new(self.chi[0], self.chi[1], self.u_prev)
    }
}

/// Linearisation of the deviation dynamics along the reference, augmented
/// with the previous-input state that carries the rate constraint.
#[derive(Debug, Clone)]
pub struct LtvSequence {
    pub a_hat: Vec<Matrix3<f64>>,
    pub b_hat: Vec<Vector3<f64>>,
}

/// Integrates the discrete model over the delay window to predict the
/// position after the input delay. The heading over the window advances by
/// the buffered past inputs through the steering model; the current heading
/// estimate seeds the recursion.
pub fn predict_delayed_position(
    state: &KiteState,
    buf: &DelayBuffer,
    sp: &SteeringParams,
    kp: &KinematicParams,
) -> Result<LineAngles, GuidanceError> {
    let n_d = sp.delay_steps();
    if buf.len() != n_d {
        return Err(GuidanceError::BufferLengthMismatch {
            expected: n_d,
            got: buf.len(),
        });
    }
    let mut xi = state.xi;
    let mut gamma = state.gamma;
    for delta in buf.iter() {
        xi = discrete_step(&xi, gamma, kp)?;
        gamma += sp.k * sp.t * delta;
    }
    Ok(xi)
}

/// Builds the augmented LTV sequence `(A_hat_i, B_hat_i)` for stages
/// `i = 0..H-1` by linearising at the reference samples `j + i`.
pub fn build_ltv(
    path: &ReferencePath,
    j: usize,
    horizon: usize,
    params: &KinematicParams,
) -> Result<LtvSequence, GuidanceError> {
    let mut a_hat = Vec::with_capacity(horizon);
    let mut b_hat = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let idx = (j + i) as isize;
        let (a, b) = linearize(&path.xi_at(idx), path.gamma_at(idx), params)?;
        let mut ah = Matrix3::zeros();
        ah.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
        ah.fixed_view_mut::<2, 1>(0, 2).copy_from(&b);
        ah[(2, 2)] = 1.0;
        a_hat.push(ah);
        b_hat.push(Vector3::new(b[0], b[1], 1.0));
    }
    Ok(LtvSequence { a_hat, b_hat })
}

/// Variable and constraint-row layout of the condensed QP.
///
/// Variables: `[du_0..du_{H-1}, eps_0, .., eps_H]` with two slack components
/// per stage. Rows, in order: slack nonnegativity, window lower bounds,
/// window upper bounds, command magnitude bounds, command rate bounds.
#[derive(Debug, Clone, Copy)]
pub struct QpLayout {
    pub horizon: usize,
}

impl QpLayout {
    pub fn du(&self, i: usize) -> usize {
        i
    }

    pub fn eps(&self, stage: usize, comp: usize) -> usize {
        self.horizon + 2 * stage + comp
    }

    pub fn n_vars(&self) -> usize {
        self.horizon + 2 * (self.horizon + 1)
    }
}

/// Assembles the condensed QP for the deviation system.
///
/// The dynamics equalities are eliminated by expressing every augmented
/// state as an affine function of the rate moves; the remaining decision
/// variables are the moves and the per-stage window slacks. Soft window
/// rows pair each position bound with its slack; command magnitude and rate
/// bounds are hard.
pub fn build_qp(
    dev0: &DeviationState,
    ltv: &LtvSequence,
    path: &ReferencePath,
    j: usize,
    cfg: &MpcConfig,
) -> Result<QpProblem, GuidanceError> {
    let h = cfg.horizon;
    if ltv.a_hat.len() != h || ltv.b_hat.len() != h {
        return Err(GuidanceError::DimensionMismatch(format!(
            "LTV sequence has {} stages, expected {h}",
            ltv.a_hat.len()
        )));
    }
    let layout = QpLayout { horizon: h };
    let n = layout.n_vars();
    let chi0 = dev0.augmented();

    // Forward maps: state s in 1..=H as chi_s = phi[s-1] * chi0 + sum_t gam[s-1][t] du_t.
    let mut phi: Vec<Vector3<f64>> = Vec::with_capacity(h); // phi[s-1] * chi0, propagated directly
    let mut gam: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(h);
    let mut prev_state = chi0;
    let mut prev_cols: Vec<Vector3<f64>> = Vec::new();
    for s in 1..=h {
        let a = &ltv.a_hat[s - 1];
        let state = a * prev_state;
        let mut cols: Vec<Vector3<f64>> = prev_cols.iter().map(|c| a * c).collect();
        cols.push(ltv.b_hat[s - 1]);
        phi.push(state);
        prev_state = state;
        prev_cols = cols.clone();
        gam.push(cols);
    }

    // Stage weights: diag(Q, R) for 1..H-1, diag(Q_H, R) at the terminal.
    let stage_w = |s: usize| -> Matrix3<f64> {
        let qblock = if s == h { cfg.q_terminal } else { cfg.q };
        let mut w = Matrix3::zeros();
        w.fixed_view_mut::<2, 2>(0, 0).copy_from(&qblock);
        w[(2, 2)] = cfg.r;
        w
    };

    let mut p = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for s in 1..=h {
        let w = stage_w(s);
        let cols = &gam[s - 1];
        let wcols: Vec<Vector3<f64>> = cols.iter().map(|c| w * c).collect();
        let wstate = w * phi[s - 1];
        for t1 in 0..s {
            q[layout.du(t1)] += 2.0 * cols[t1].dot(&wstate);
            for t2 in t1..s {
                let v = 2.0 * cols[t1].dot(&wcols[t2]);
                p[(layout.du(t1), layout.du(t2))] += v;
                if t1 != t2 {
                    p[(layout.du(t2), layout.du(t1))] += v;
                }
            }
        }
    }
    for stage in 0..=h {
        let s_w = if stage == h { cfg.s_terminal } else { cfg.s };
        for c1 in 0..2 {
            for c2 in 0..2 {
                p[(layout.eps(stage, c1), layout.eps(stage, c2))] += 2.0 * s_w[(c1, c2)];
            }
        }
    }

    let m = cfg.n_constraints();
    let mut g = DMatrix::zeros(m, n);
    let mut hvec = DVector::zeros(m);
    let mut row = 0usize;

    // Slack nonnegativity: -eps <= 0.
    for stage in 0..=h {
        for c in 0..2 {
            g[(row, layout.eps(stage, c))] = -1.0;
            hvec[row] = 0.0;
            row += 1;
        }
    }
    // Window bounds, softened by the slacks. chi positions for stage 0 are
    // constants; for stage s >= 1 they are rows of the forward map.
    let chi_lo = |stage: usize, c: usize| -> f64 {
        let r = path.xi_at((j + stage) as isize);
        match c {
            0 => cfg.window.lo.theta - r.theta,
            _ => cfg.window.lo.phi - r.phi,
        }
    };
    let chi_hi = |stage: usize, c: usize| -> f64 {
        let r = path.xi_at((j + stage) as isize);
        match c {
            0 => cfg.window.hi.theta - r.theta,
            _ => cfg.window.hi.phi - r.phi,
        }
    };
    // Lower: chi_lo - chi - eps <= 0  ->  -chi - eps <= -chi_lo.
    for stage in 0..=h {
        for c in 0..2 {
            if stage > 0 {
                for (t, col) in gam[stage - 1].iter().enumerate() {
                    g[(row, layout.du(t))] = -col[c];
                }
            }
            g[(row, layout.eps(stage, c))] = -1.0;
            let chi_const = if stage == 0 { chi0[c] } else { phi[stage - 1][c] };
            hvec[row] = -chi_lo(stage, c) + chi_const;
            row += 1;
        }
    }
    // Upper: chi - eps <= chi_hi.
    for stage in 0..=h {
        for c in 0..2 {
            if stage > 0 {
                for (t, col) in gam[stage - 1].iter().enumerate() {
                    g[(row, layout.du(t))] = col[c];
                }
            }
            g[(row, layout.eps(stage, c))] = -1.0;
            let chi_const = if stage == 0 { chi0[c] } else { phi[stage - 1][c] };
            hvec[row] = chi_hi(stage, c) - chi_const;
            row += 1;
        }
    }
    // Command magnitude: u_i = u_prev + sum_{t<=i} du_t within
    // [-l_m, l_m] - gamma_ref[j+i].
    for i in 0..h {
        let gref = path.gamma_at((j + i) as isize);
        let (u_lo, u_hi) = (-cfg.l_m - gref, cfg.l_m - gref);
        for t in 0..=i {
            g[(row, layout.du(t))] = 1.0;
            g[(row + 1, layout.du(t))] = -1.0;
        }
        hvec[row] = u_hi - dev0.u_prev;
        hvec[row + 1] = dev0.u_prev - u_lo;
        row += 2;
    }
    // Command rate: du_i within +-l_r*T shifted by the reference increment.
    for i in 0..h {
        let dref = path.gamma_at((j + i) as isize) - path.gamma_at((j + i) as isize - 1);
        g[(row, layout.du(i))] = 1.0;
        hvec[row] = cfg.l_r * cfg.t - dref;
        g[(row + 1, layout.du(i))] = -1.0;
        hvec[row + 1] = cfg.l_r * cfg.t + dref;
        row += 2;
    }
    debug_assert_eq!(row, m);

    // Exact symmetry against accumulation order.
    let p = (&p + p.transpose()) * 0.5;
    Ok(QpProblem::new(p, q, g, hvec)?)
}

/// How the command of one guidance step was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GuidanceStatus {
    /// The QP solved to optimality; the command is the reconstructed move.
    Optimal,
    /// Solver failure; the previous command is held.
    FallbackHold,
    /// Persistent solver failure; the command slews toward the reference.
    FallbackSlew,
}

/// Output of one guidance step.
#[derive(Debug, Clone)]
pub struct GuidanceOutput {
    pub gamma_cmd: f64,
    /// Reference index the horizon was anchored at.
    pub reference_index: usize,
    /// Delayed position prediction used as the MPC's controlled variable.
    pub delayed_position: LineAngles,
    /// Predicted augmented deviation trajectory, stages 0..=H.
    pub predicted_deviation: Vec<Vector3<f64>>,
    /// Per-stage flag: any slack component above 1e-6.
    pub slack_active: Vec<bool>,
    pub status: GuidanceStatus,
    pub qp_status: QpStatus,
    pub solver_iterations: usize,
    pub kkt: KktResiduals,
    /// Objective value of Eq.-style cost (QP value plus the constant
    /// initial-stage term).
    pub cost: f64,
    /// First solved rate move.
    pub du0: f64,
    /// Consecutive solver failures up to and including this step.
    pub failure_streak: usize,
}

/// Receding-horizon guidance controller. One instance per control loop.
#[derive(Debug)]
pub struct GuidanceController {
    cfg: MpcConfig,
    prev_gamma_cmd: f64,
    solver: QpSolver,
    warm: Option<Vec<usize>>,
    failure_streak: usize,
}

impl GuidanceController {
    /// `initial_gamma_cmd` seeds the previous-command state; it is clamped
    /// into the command magnitude bounds the QP presupposes.
    pub fn new(cfg: MpcConfig, initial_gamma_cmd: f64) -> Self {
        let clamped = initial_gamma_cmd.clamp(-cfg.l_m, cfg.l_m);
        GuidanceController {
            cfg,
            prev_gamma_cmd: clamped,
            solver: QpSolver::new(),
            warm: None,
            failure_streak: 0,
        }
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn previous_command(&self) -> f64 {
        self.prev_gamma_cmd
    }

    /// Installs a retuned rate limit. Warm-start information stays valid:
    /// the constraint layout is unchanged.
    pub fn set_rate_limit(&mut self, l_r: f64) {
        self.cfg.l_r = l_r;
    }

    /// One receding-horizon step: predict the delayed position, anchor at
    /// the nearest reference sample, build and solve the condensed QP, and
    /// reconstruct the command from the first move. On solver failure the
    /// command falls back to holding, then to a rate-limited slew toward
    /// the reference heading.
    pub fn step(
        &mut self,
        state: &KiteState,
        buf: &DelayBuffer,
        path: &ReferencePath,
        kp: &KinematicParams,
        sp: &SteeringParams,
    ) -> Result<GuidanceOutput, GuidanceError> {
        let xi_td = predict_delayed_position(state, buf, sp, kp)?;
        let j = nearest_reference_index(path, &xi_td);
        let ltv = build_ltv(path, j, self.cfg.horizon, kp)?;
        let ref_xi = path.xi_at(j as isize);
        let dev0 = DeviationState {
            chi: Vector2::new(xi_td.theta - ref_xi.theta, xi_td.phi - ref_xi.phi),
            u_prev: self.prev_gamma_cmd - path.gamma_at(j as isize - 1),
        };
        let qp_problem = build_qp(&dev0, &ltv, path, j, &self.cfg)?;
        let sol = self.solver.solve(&qp_problem, self.warm.as_deref());

        let h = self.cfg.horizon;
        let layout = QpLayout { horizon: h };
        let output = if sol.status == QpStatus::Optimal {
            self.warm = Some(sol.active_set.clone());
            self.failure_streak = 0;
            let du0 = sol.x[0];
            let gamma_cmd = du0 + self.prev_gamma_cmd - path.gamma_at(j as isize - 1)
                + path.gamma_at(j as isize);
            // Roll the augmented deviation under the solved moves.
            let mut traj = Vec::with_capacity(h + 1);
            let mut chi = dev0.augmented();
            traj.push(chi);
            for i in 0..h {
                chi = ltv.a_hat[i] * chi + ltv.b_hat[i] * sol.x[layout.du(i)];
                traj.push(chi);
            }
            let slack_active: Vec<bool> = (0..=h)
                .map(|s| {
                    sol.x[layout.eps(s, 0)].abs() > 1e-6 || sol.x[layout.eps(s, 1)].abs() > 1e-6
                })
                .collect();
            let stage0_cost = {
                let chi0 = dev0.augmented();
                let w = {
                    let mut w = Matrix3::zeros();
                    w.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.cfg.q);
                    w[(2, 2)] = self.cfg.r;
                    w
                };
                chi0.dot(&(w * chi0))
            };
            GuidanceOutput {
                gamma_cmd,
                reference_index: j,
                delayed_position: xi_td,
                predicted_deviation: traj,
                slack_active,
                status: GuidanceStatus::Optimal,
                qp_status: sol.status,
                solver_iterations: sol.iterations,
                kkt: sol.kkt,
                cost: qp_problem.objective(&sol.x) + stage0_cost,
                du0,
                failure_streak: 0,
            }
        } else {
            self.warm = None;
            self.failure_streak += 1;
            let (gamma_cmd, status) = if self.failure_streak <= FALLBACK_HOLD_SAMPLES {
                (self.prev_gamma_cmd, GuidanceStatus::FallbackHold)
            } else {
                // Slew toward the reference heading at the rate limit.
                let target = path.gamma_at(j as isize);
                let max_move = self.cfg.l_r * self.cfg.t;
                let step = (target - self.prev_gamma_cmd).clamp(-max_move, max_move);
                (self.prev_gamma_cmd + step, GuidanceStatus::FallbackSlew)
            };
            GuidanceOutput {
                gamma_cmd,
                reference_index: j,
                delayed_position: xi_td,
                predicted_deviation: vec![dev0.augmented()],
                slack_active: vec![false; h + 1],
                status,
                qp_status: sol.status,
                solver_iterations: sol.iterations,
                kkt: sol.kkt,
                cost: f64::NAN,
                du0: 0.0,
                failure_streak: self.failure_streak,
            }
        };
        self.prev_gamma_cmd = output.gamma_cmd;
        Ok(output)
    }
}
