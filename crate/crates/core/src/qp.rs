//! Dense convex quadratic programming.
//!
//! Solves `min 0.5 x'Px + q'x  s.t.  Gx <= h` for symmetric positive
//! definite `P` with a dual active-set method: starting from the
//! unconstrained minimiser, violated constraints are activated one at a
//! time while dual feasibility (`lambda >= 0`) is maintained through
//! partial steps that may drop blocking constraints. The method is
//! deterministic (most-violated constraint first, lowest index on ties),
//! reports the active set for warm starting, and polishes the final
//! iterate with one step of iterative refinement on the KKT system.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Constraint violations above this threshold trigger activation.
const FEAS_TOL: f64 = 1e-9;
/// Curvature threshold below which a constraint gradient is treated as
/// linearly dependent on the active set.
const DEP_TOL: f64 = 1e-11;
/// Dual step denominators below this are ignored when computing the
/// blocking step length.
const BLOCK_TOL: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hessian not symmetric: max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    #[error("parse error in problem dump: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense QP data: `min 0.5 x'Px + q'x  s.t.  Gx <= h`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions and symmetry of `P` (within 1e-12, relative to
    /// the largest entry). Positive definiteness is certified later by the
    /// Cholesky factorisation in [`solve`].
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(QpError::DimensionMismatch("P must be square".into()));
        }
        if q.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "q has length {}, expected {n}",
                q.len()
            )));
        }
        if g.nrows() != h.len() || (g.nrows() > 0 && g.ncols() != n) {
            return Err(QpError::DimensionMismatch(format!(
                "G is {}x{}, h has length {}",
                g.nrows(),
                g.ncols(),
                h.len()
            )));
        }
        let scale = p.amax().max(1.0);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((p[(i, j)] - p[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(QpProblem { p, q, g, h })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn m(&self) -> usize {
        self.g.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn gradient(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn constraints(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.g, &self.h)
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.p * x).dot(x) + self.q.dot(x)
    }

    /// Writes the problem in the plain-text fixture format:
    ///
    /// ```text
    /// qp <n> <m>
    /// <n rows of P, n values each>
    /// <q, n values on one line>
    /// <m rows of G>
    /// <h, m values on one line>
    /// ```
    ///
    /// Values use the shortest representation that round-trips in f64.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), QpError> {
        let n = self.n();
        let m = self.m();
        writeln!(w, "qp {n} {m}")?;
        let mut line = String::new();
        for i in 0..n {
            line.clear();
            for j in 0..n {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", self.p[(i, j)]);
            }
            writeln!(w, "{line}")?;
        }
        line.clear();
        for j in 0..n {
            if j > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{}", self.q[j]);
        }
        writeln!(w, "{line}")?;
        for i in 0..m {
            line.clear();
            for j in 0..n {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", self.g[(i, j)]);
            }
            writeln!(w, "{line}")?;
        }
        line.clear();
        for i in 0..m {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{}", self.h[i]);
        }
        writeln!(w, "{line}")?;
        Ok(())
    }

    /// Parses a problem produced by [`QpProblem::dump`].
    pub fn load<R: BufRead>(r: R) -> Result<Self, QpError> {
        let mut lines = r.lines();
        let mut next_line = || -> Result<String, QpError> {
            loop {
                match lines.next() {
                    Some(l) => {
                        let l = l?;
                        if !l.trim().is_empty() {
                            return Ok(l);
                        }
                    }
                    None => return Err(QpError::Parse("unexpected end of input".into())),
                }
            }
        };
        let header = next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("qp") {
            return Err(QpError::Parse("missing 'qp' header".into()));
        }
        let n: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| QpError::Parse("bad n".into()))?;
        let m: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| QpError::Parse("bad m".into()))?;
        let parse_row = |line: &str, len: usize| -> Result<Vec<f64>, QpError> {
            let vals: Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| QpError::Parse(e.to_string()))?;
            if vals.len() != len {
                return Err(QpError::Parse(format!(
                    "expected {len} values, got {}",
                    vals.len()
                )));
            }
            Ok(vals)
        };
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            let row = parse_row(&next_line()?, n)?;
            for j in 0..n {
                p[(i, j)] = row[j];
            }
        }
        let q = DVector::from_vec(parse_row(&next_line()?, n)?);
        let mut g = DMatrix::zeros(m, n);
        for i in 0..m {
            let row = parse_row(&next_line()?, n)?;
            for j in 0..n {
                g[(i, j)] = row[j];
            }
        }
        let h = if m > 0 {
            DVector::from_vec(parse_row(&next_line()?, m)?)
        } else {
            DVector::zeros(0)
        };
        Self::new(p, q, g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

use serde::Serialize;

/// Infinity-norm KKT residuals of a primal/dual pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktResiduals {
    /// `||Px + q + G'lambda||_inf`
    pub stationarity: f64,
    /// `max(0, max_i (Gx - h)_i)`
    pub primal: f64,
    /// `max_i |lambda_i (Gx - h)_i|`
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// Indices of constraints active at the returned point (for warm starts).
    pub active_set: Vec<usize>,
    /// Objective value after each solver step. The dual method climbs from
    /// the unconstrained minimum, so the trace is nondecreasing.
    pub objective_trace: Vec<f64>,
}

/// The three KKT residuals of an arbitrary primal/dual pair.
pub fn kkt_residuals(
    p: &QpProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<KktResiduals, QpError> {
    if x.len() != p.n() || lambda.len() != p.m() {
        return Err(QpError::DimensionMismatch(format!(
            "x has length {}, lambda {}; expected {} and {}",
            x.len(),
            lambda.len(),
            p.n(),
            p.m()
        )));
    }
    let stat = (&p.p * x + &p.q + p.g.transpose() * lambda).amax();
    let slack = &p.g * x - &p.h;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..p.m() {
        primal = primal.max(slack[i]);
        comp = comp.max((lambda[i] * slack[i]).abs());
    }
    Ok(KktResiduals {
        stationarity: stat,
        primal: primal.max(0.0),
        complementarity: comp,
    })
}

/// Reusable solver workspace. One solve at a time per instance.
#[derive(Debug, Default)]
pub struct QpSolver {
    active: Vec<usize>,
    lam: Vec<f64>,
    /// Columns `P^{-1} g_j` for each active constraint.
    y_cols: Vec<DVector<f64>>,
    /// Gram matrix `G_A P^{-1} G_A'` of the active set.
    m_mat: DMatrix<f64>,
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves the QP, optionally warm-started from a previous active set.
    ///
    /// Deterministic: identical inputs and warm start produce identical
    /// output. On factorisation breakdown the returned status is
    /// `NumericalFailure` and the iterate is whatever was reached.
    pub fn solve(&mut self, prob: &QpProblem, warm_start: Option<&[usize]>) -> QpSolution {
        let n = prob.n();
        let m = prob.m();
        let max_iter = 10 * (n + m);

        self.active.clear();
        self.lam.clear();
        self.y_cols.clear();
        self.m_mat = DMatrix::zeros(0, 0);

        let chol = match Cholesky::new(prob.p.clone()) {
            Some(c) => c,
            None => {
                return Self::failed(prob, DVector::zeros(n), m, QpStatus::NumericalFailure)
            }
        };

        let x_free = -chol.solve(&prob.q);
        let mut x = x_free.clone();
        let mut trace = vec![prob.objective(&x)];
        let mut iterations = 0usize;

        // Warm start: adopt the previous active set (skipping indices whose
        // gradients are dependent), then purge negative multipliers so the
        // starting point is dual feasible.
        if let Some(ws) = warm_start {
            let mut seen = vec![false; m];
            for &idx in ws {
                if idx >= m || seen[idx] {
                    continue;
                }
                seen[idx] = true;
                self.try_push(prob, &chol, idx);
            }
            loop {
                if self.active.is_empty() {
                    x = x_free.clone();
                    break;
                }
                let m_chol = match Cholesky::new(self.m_mat.clone()) {
                    Some(c) => c,
                    None => {
                        self.pop_last();
                        continue;
                    }
                };
                let mut rhs = DVector::zeros(self.active.len());
                for (j, &idx) in self.active.iter().enumerate() {
                    rhs[j] = prob.g.row(idx).transpose().dot(&x_free) - prob.h[idx];
                }
                let nu = m_chol.solve(&rhs);
                // Drop the most negative multiplier, lowest index on ties.
                let mut worst: Option<(usize, f64)> = None;
                for j in 0..nu.len() {
                    if nu[j] < -1e-12 && worst.map_or(true, |(_, w)| nu[j] < w) {
                        worst = Some((j, nu[j]));
                    }
                }
                match worst {
                    Some((j, _)) => self.remove_at(j),
                    None => {
                        x = x_free.clone();
                        for (j, y) in self.y_cols.iter().enumerate() {
                            x -= y * nu[j];
                        }
                        for j in 0..nu.len() {
                            self.lam[j] = nu[j].max(0.0);
                        }
                        break;
                    }
                }
            }
            trace.push(prob.objective(&x));
        }

        let mut status = QpStatus::Optimal;
        'outer: loop {
            // Most violated inactive constraint, lowest index on ties.
            let mut best: Option<(usize, f64)> = None;
            for i in 0..m {
                if self.active.contains(&i) {
                    continue;
                }
                let v = prob.g.row(i).transpose().dot(&x) - prob.h[i];
                if v > FEAS_TOL && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            let (p_idx, _) = match best {
                Some(b) => b,
                None => break,
            };
            let g_p = prob.g.row(p_idx).transpose();
            let u = chol.solve(&g_p);
            let curvature_scale = g_p.dot(&u).max(1e-300);
            let mut lam_p = 0.0f64;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    status = QpStatus::MaxIter;
                    break 'outer;
                }
                // Step directions: z in the primal, r in the duals of the
                // active set, keeping stationarity while lambda_p grows.
                let (z, r) = if self.active.is_empty() {
                    (u.clone(), DVector::zeros(0))
                } else {
                    let m_chol = match Cholesky::new(self.m_mat.clone()) {
                        Some(c) => c,
                        None => {
                            status = QpStatus::NumericalFailure;
                            break 'outer;
                        }
                    };
                    let mut w = DVector::zeros(self.active.len());
                    for (j, &idx) in self.active.iter().enumerate() {
                        w[j] = prob.g.row(idx).transpose().dot(&u);
                    }
                    let r = m_chol.solve(&w);
                    let mut z = u.clone();
                    for (j, y) in self.y_cols.iter().enumerate() {
                        z -= y * r[j];
                    }
                    (z, r)
                };
                let gz = g_p.dot(&z);
                let viol = g_p.dot(&x) - prob.h[p_idx];
                let t_full = if gz > DEP_TOL * curvature_scale {
                    (viol / gz).max(0.0)
                } else {
                    f64::INFINITY
                };
                let mut t_block = f64::INFINITY;
                let mut block_j = None;
                for j in 0..self.active.len() {
                    if r[j] > BLOCK_TOL {
                        let t = self.lam[j] / r[j];
                        if t < t_block {
                            t_block = t;
                            block_j = Some(j);
                        }
                    }
                }
                let t = t_full.min(t_block);
                if !t.is_finite() {
                    // No primal progress possible and no blocking dual:
                    // the constraint set is inconsistent at this point.
                    status = QpStatus::NumericalFailure;
                    break 'outer;
                }
                if t > 0.0 {
                    x.axpy(-t, &z, 1.0);
                    for j in 0..self.active.len() {
                        self.lam[j] -= t * r[j];
                    }
                    lam_p += t;
                }
                trace.push(prob.objective(&x));
                if t_full <= t_block {
                    self.push(prob, &chol, p_idx, u.clone(), lam_p);
                    break;
                }
                let j = block_j.expect("finite blocking step implies an index");
                self.remove_at(j);
            }
        }

        // Polish: one iterative-refinement pass on the KKT system of the
        // final active set tightens stationarity and active-constraint
        // residuals to near machine precision.
        if status == QpStatus::Optimal && !self.active.is_empty() {
            let m_chol = Cholesky::new(self.m_mat.clone());
            if let Some(m_chol) = m_chol {
                for _ in 0..2 {
                    let mut lam_vec = DVector::zeros(self.active.len());
                    for j in 0..self.active.len() {
                        lam_vec[j] = self.lam[j];
                    }
                    let mut r1 = &prob.p * &x + &prob.q;
                    for (j, &idx) in self.active.iter().enumerate() {
                        r1 += prob.g.row(idx).transpose() * lam_vec[j];
                    }
                    let mut r2 = DVector::zeros(self.active.len());
                    for (j, &idx) in self.active.iter().enumerate() {
                        r2[j] = prob.g.row(idx).transpose().dot(&x) - prob.h[idx];
                    }
                    let pinv_r1 = chol.solve(&r1);
                    let mut rhs = r2.clone();
                    for (j, &idx) in self.active.iter().enumerate() {
                        rhs[j] -= prob.g.row(idx).transpose().dot(&pinv_r1);
                    }
                    let dlam = m_chol.solve(&rhs);
                    let mut gt_dlam = DVector::zeros(n);
                    for (j, &idx) in self.active.iter().enumerate() {
                        gt_dlam += prob.g.row(idx).transpose() * dlam[j];
                    }
                    let dx = -chol.solve(&(r1 + gt_dlam));
                    x += dx;
                    for j in 0..self.active.len() {
                        self.lam[j] += dlam[j];
                    }
                }
            }
        }

        let mut lambda = DVector::zeros(m);
        for (j, &idx) in self.active.iter().enumerate() {
            lambda[idx] = self.lam[j];
        }
        let kkt = kkt_residuals(prob, &x, &lambda).expect("dimensions consistent");
        QpSolution {
            x,
            lambda,
            status,
            iterations,
            kkt,
            active_set: self.active.clone(),
            objective_trace: trace,
        }
    }

    fn failed(prob: &QpProblem, x: DVector<f64>, m: usize, status: QpStatus) -> QpSolution {
        let lambda = DVector::zeros(m);
        let kkt = kkt_residuals(prob, &x, &lambda).expect("dimensions consistent");
        QpSolution {
            x,
            lambda,
            status,
            iterations: 0,
            kkt,
            active_set: Vec::new(),
            objective_trace: Vec::new(),
        }
    }

    /// Appends constraint `idx` with multiplier `lam`, given `u = P^{-1}g_idx`.
    fn push(
        &mut self,
        prob: &QpProblem,
        _chol: &Cholesky<f64, Dyn>,
        idx: usize,
        u: DVector<f64>,
        lam: f64,
    ) {
        let k = self.active.len();
        let mut m_new = DMatrix::zeros(k + 1, k + 1);
        m_new.view_mut((0, 0), (k, k)).copy_from(&self.m_mat);
        for (j, &aj) in self.active.iter().enumerate() {
            let v = prob.g.row(aj).transpose().dot(&u);
            m_new[(j, k)] = v;
            m_new[(k, j)] = v;
        }
        m_new[(k, k)] = prob.g.row(idx).transpose().dot(&u);
        self.m_mat = m_new;
        self.active.push(idx);
        self.lam.push(lam);
        self.y_cols.push(u);
    }

    fn try_push(&mut self, prob: &QpProblem, chol: &Cholesky<f64, Dyn>, idx: usize) {
        let g_i = prob.g.row(idx).transpose();
        let u = chol.solve(&g_i);
        self.push(prob, chol, idx, u, 0.0);
        if Cholesky::new(self.m_mat.clone()).is_none() {
            self.pop_last();
        }
    }

    fn pop_last(&mut self) {
        let k = self.active.len();
        self.remove_at(k - 1);
    }

    fn remove_at(&mut self, j: usize) {
        self.active.remove(j);
        self.lam.remove(j);
        self.y_cols.remove(j);
        self.m_mat = self.m_mat.clone().remove_row(j).remove_column(j);
    }
}

/// One-shot convenience wrapper around [`QpSolver::solve`].
pub fn solve(prob: &QpProblem, warm_start: Option<&[usize]>) -> QpSolution {
    QpSolver::new().solve(prob, warm_start)
}
