//! Augmented-Lagrangian solver for the reformulated single-level NLPs.
//!
//! Outer loop: classic method-of-multipliers with a Powell-Hestenes-
//! Rockafellar treatment of inequalities and a geometric penalty schedule.
//! Inner loop: projected damped Newton on the augmented Lagrangian with a
//! BFGS fallback whenever the Newton system is not positive definite.
//! Bounds are handled by projection throughout; multiplier unknowns of the
//! KKT system enter as ordinary bounded variables of the NLP itself.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reformulate::{licq_check, LicqReport, SingleLevelNLP};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_cap: f64,
    pub starts: usize,
    pub seed: u64,
    /// Wall-clock budget per solve, seconds.
    pub time_limit: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            max_outer: 60,
            max_inner: 120,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_cap: 1e10,
            starts: 8,
            seed: 42,
            time_limit: 60.0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.feasibility_tol > 0.0 && self.optimality_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::InvalidInput("penalty_growth must exceed 1".into()));
        }
        if self.starts == 0 {
            return Err(Error::InvalidInput("need at least one start".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    TimeLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub infeasibility: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveTrace {
    pub entries: Vec<TraceEntry>,
}

impl SolveTrace {
    /// CSV with one line per outer iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,objective,infeasibility\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.iteration, e.objective, e.infeasibility));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionReport {
    /// Full variable vector: decisions then multipliers.
    pub point: Vec<f64>,
    /// Objective in the problem's own sense.
    pub objective: f64,
    pub status: SolveStatus,
    pub primal_infeasibility: f64,
    /// Wall time of the solve only, millisecond precision.
    pub cpu_seconds: f64,
    pub trace: SolveTrace,
    pub start_point: Vec<f64>,
    pub licq: LicqReport,
    /// Final multiplier estimates of the outer loop, one per equality row.
    #[serde(default)]
    pub eq_multipliers: Vec<f64>,
    /// Same for inequality rows (nonnegative).
    #[serde(default)]
    pub ineq_multipliers: Vec<f64>,
}

impl SolutionReport {
    pub fn point_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.point.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

/// Feasible iff the report's primal infeasibility is at or below `tol`.
pub fn classify_feasibility(report: &SolutionReport, tol: f64) -> Feasibility {
    if report.primal_infeasibility <= tol {
        Feasibility::Feasible
    } else {
        Feasibility::Infeasible
    }
}

struct AlState<'a> {
    nlp: &'a SingleLevelNLP,
    dir: f64,
    lam_eq: DVector<f64>,
    mu_ineq: DVector<f64>,
    rho: f64,
}

impl<'a> AlState<'a> {
    fn new(nlp: &'a SingleLevelNLP, rho: f64) -> Self {
        Self {
            nlp,
            dir: nlp.sense.direction(),
            lam_eq: DVector::zeros(nlp.equalities.len()),
            mu_ineq: DVector::zeros(nlp.inequalities.len()),
            rho,
        }
    }

    /// Augmented Lagrangian value only (for line searches).
    fn value(&self, v: &DVector<f64>) -> f64 {
        let mut val = self.dir * self.nlp.objective.eval(v);
        for (j, row) in self.nlp.equalities.iter().enumerate() {
            let c = row.expr.eval(v);
            val += self.lam_eq[j] * c + 0.5 * self.rho * c * c;
        }
        for (i, row) in self.nlp.inequalities.iter().enumerate() {
            let g = row.expr.eval(v);
            let t = (self.mu_ineq[i] + self.rho * g).max(0.0);
            val += (t * t - self.mu_ineq[i] * self.mu_ineq[i]) / (2.0 * self.rho);
        }
        val
    }

    /// Value, gradient, and Hessian of the augmented Lagrangian.
    fn eval(&self, v: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.nlp.n_vars();
        let mut val = self.dir * self.nlp.objective.eval(v);
        let mut grad = self.nlp.objective.grad(v, n) * self.dir;
        let mut hess = self.nlp.objective.hess(v, n) * self.dir;

        for (j, row) in self.nlp.equalities.iter().enumerate() {
            let c = row.expr.eval(v);
            let gr = row.expr.grad(v, n);
            let w = self.lam_eq[j] + self.rho * c;
            val += self.lam_eq[j] * c + 0.5 * self.rho * c * c;
            grad.axpy(w, &gr, 1.0);
            hess += row.expr.hess(v, n) * w;
            rank_one(&mut hess, &gr, self.rho);
        }
        for (i, row) in self.nlp.inequalities.iter().enumerate() {
            let g = row.expr.eval(v);
            let t = self.mu_ineq[i] + self.rho * g;
            val += ((t.max(0.0)).powi(2) - self.mu_ineq[i] * self.mu_ineq[i]) / (2.0 * self.rho);
            if t > 0.0 {
                let gr = row.expr.grad(v, n);
                grad.axpy(t, &gr, 1.0);
                hess += row.expr.hess(v, n) * t;
                rank_one(&mut hess, &gr, self.rho);
            }
        }
        (val, grad, hess)
    }

    fn update_multipliers(&mut self, v: &DVector<f64>) {
        for (j, row) in self.nlp.equalities.iter().enumerate() {
            self.lam_eq[j] += self.rho * row.expr.eval(v);
        }
        for (i, row) in self.nlp.inequalities.iter().enumerate() {
            self.mu_ineq[i] = (self.mu_ineq[i] + self.rho * row.expr.eval(v)).max(0.0);
        }
    }
}

fn rank_one(h: &mut DMatrix<f64>, g: &DVector<f64>, c: f64) {
    for i in 0..g.len() {
        if g[i] == 0.0 {
            continue;
        }
        for j in 0..g.len() {
            h[(i, j)] += c * g[i] * g[j];
        }
    }
}

/// First-order certificate at a feasible point: fit least-squares
/// multipliers over the equality rows and the active inequality rows, clamp
/// inequality multipliers at zero, and measure the projected stationarity
/// residual of the resulting Lagrangian. Returns None when the point is not
/// feasible at `feas_tol`.
fn kkt_certificate(nlp: &SingleLevelNLP, v: &DVector<f64>, feas_tol: f64) -> Option<f64> {
    let theta = nlp.primal_infeasibility(v);
    if !(theta <= feas_tol) {
        return None;
    }
    let n = nlp.n_vars();
    let grad_obj = nlp.objective.grad(v, n) * nlp.sense.direction();

    let active_tol = (10.0 * feas_tol).max(1e-8);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut is_ineq: Vec<bool> = Vec::new();
    for row in &nlp.equalities {
        rows.push(row.expr.grad(v, n));
        is_ineq.push(false);
    }
    for row in &nlp.inequalities {
        if row.expr.eval(v) >= -active_tol {
            rows.push(row.expr.grad(v, n));
            is_ineq.push(true);
        }
    }

    let residual = if rows.is_empty() {
        grad_obj.clone()
    } else {
        // least squares on A^T w = -grad_obj with sign constraints on the
        // inequality weights, via clamp-drop-refit sweeps
        let mut keep: Vec<usize> = (0..rows.len()).collect();
        loop {
            let k = keep.len();
            if k == 0 {
                break grad_obj.clone();
            }
            let mut a_t = DMatrix::zeros(n, k);
            for (j, &idx) in keep.iter().enumerate() {
                a_t.set_column(j, &rows[idx]);
            }
            let svd = a_t.clone().svd(true, true);
            let w = match svd.solve(&(-&grad_obj), 1e-12) {
                Ok(w) => w,
                Err(_) => return None,
            };
            let bad: Vec<usize> = (0..k)
                .filter(|&j| is_ineq[keep[j]] && w[j] < -1e-12)
                .map(|j| keep[j])
                .collect();
            if bad.is_empty() {
                break &grad_obj + a_t * w;
            }
            keep.retain(|idx| !bad.contains(idx));
        }
    };
    Some(projected_gradient(nlp, v, &residual).amax())
}

/// Projected gradient: components that push out of an active bound are
/// zeroed.
fn projected_gradient(nlp: &SingleLevelNLP, v: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let mut pg = grad.clone();
    for (i, &(lo, hi)) in nlp.bounds.iter().enumerate() {
        let at_lo = v[i] <= lo + 1e-12 * (1.0 + lo.abs());
        let at_hi = v[i] >= hi - 1e-12 * (1.0 + hi.abs());
        if (at_lo && pg[i] > 0.0) || (at_hi && pg[i] < 0.0) {
            pg[i] = 0.0;
        }
    }
    pg
}

/// Minimize the augmented Lagrangian over the bound box, starting at `v`.
/// Newton directions come from a Cholesky factorization of the free-block
/// Hessian; when that fails (indefinite curvature) the direction falls back
/// to a BFGS approximation accumulated over the inner sweep.
fn inner_minimize(
    state: &AlState,
    v: &mut DVector<f64>,
    inner_tol: f64,
    max_inner: usize,
    deadline: Instant,
) {
    let nlp = state.nlp;
    let n = nlp.n_vars();
    let mut bfgs_inv = DMatrix::identity(n, n);
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (v, grad)

    for _ in 0..max_inner {
        if Instant::now() >= deadline {
            return;
        }
        let (val, grad, hess) = state.eval(v);
        if !val.is_finite() {
            return;
        }
        if let Some((pv, pg)) = &prev {
            let s = &*v - pv;
            let yv = &grad - pg;
            let sy = s.dot(&yv);
            if sy > 1e-12 {
                // inverse BFGS update
                let rho_b = 1.0 / sy;
                let hy = &bfgs_inv * &yv;
                let yhy = yv.dot(&hy);
                let c1 = (sy + yhy) * rho_b * rho_b;
                for i in 0..n {
                    for j in 0..n {
                        bfgs_inv[(i, j)] +=
                            c1 * s[i] * s[j] - rho_b * (hy[i] * s[j] + s[i] * hy[j]);
                    }
                }
            }
        }

        let pg = projected_gradient(nlp, v, &grad);
        if pg.amax() <= inner_tol {
            return;
        }

        // free set: variables not pinned at a bound by the gradient sign
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let (lo, hi) = nlp.bounds[i];
                let at_lo = v[i] <= lo + 1e-12 * (1.0 + lo.abs());
                let at_hi = v[i] >= hi - 1e-12 * (1.0 + hi.abs());
                !((at_lo && grad[i] > 0.0) || (at_hi && grad[i] < 0.0))
            })
            .collect();
        if free.is_empty() {
            return;
        }

        let nf = free.len();
        let mut hf = DMatrix::zeros(nf, nf);
        let mut gf = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            gf[a] = grad[i];
            for (b, &j) in free.iter().enumerate() {
                hf[(a, b)] = hess[(i, j)];
            }
        }

        let newton = nalgebra::Cholesky::new(hf).map(|ch| ch.solve(&(-&gf)));
        let mut dir = DVector::zeros(n);
        match newton {
            Some(df) if df.iter().all(|x| x.is_finite()) => {
                for (a, &i) in free.iter().enumerate() {
                    dir[i] = df[a];
                }
            }
            _ => {
                let d_full = -(&bfgs_inv * &grad);
                for &i in &free {
                    dir[i] = d_full[i];
                }
            }
        }
        if dir.dot(&grad) >= 0.0 {
            for &i in &free {
                dir[i] = -grad[i];
            }
        }

        // backtracking Armijo along the projected arc
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let mut trial = &*v + &dir * alpha;
            nlp.project_onto_bounds(&mut trial);
            let step = &trial - &*v;
            if step.amax() == 0.0 {
                alpha *= 0.5;
                continue;
            }
            let decrease = grad.dot(&step);
            let tval = state.value(&trial);
            if tval.is_finite() && tval <= val + 1e-4 * decrease {
                prev = Some((v.clone(), grad.clone()));
                *v = trial;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return;
        }
    }
}

/// Solve the NLP from one start point.
pub fn solve(
    nlp: &SingleLevelNLP,
    start: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolutionReport> {
    cfg.validate()?;
    if start.len() != nlp.n_vars() {
        return Err(Error::DimensionMismatch { expected: nlp.n_vars(), got: start.len() });
    }
    let t0 = Instant::now();
    let deadline = t0 + std::time::Duration::from_secs_f64(cfg.time_limit);

    let mut v = start.clone();
    nlp.project_onto_bounds(&mut v);
    let start_projected = v.clone();
    if !nlp.objective.eval(&v).is_finite() {
        return Err(Error::Numerical("objective not finite at the start point".into()));
    }

    let mut state = AlState::new(nlp, cfg.penalty_init);
    let mut trace = SolveTrace::default();
    let mut theta_prev = f64::INFINITY;
    let mut best_theta = f64::INFINITY;
    let mut stall = 0usize;
    let mut status = SolveStatus::IterationLimit;
    let mut inner_tol = 1e-2f64;
    // least-violation iterate seen, the safeguard against penalty walk-off
    let mut memory: (f64, DVector<f64>) = (nlp.primal_infeasibility(&v), v.clone());

    for outer in 1..=cfg.max_outer {
        let v_before = v.clone();
        inner_minimize(
            &state,
            &mut v,
            inner_tol.max(0.5 * cfg.optimality_tol),
            cfg.max_inner,
            deadline,
        );

        let theta = nlp.primal_infeasibility(&v);
        if theta < memory.0 {
            memory = (theta, v.clone());
        }
        let (_, grad, _) = state.eval(&v);
        let pg_norm = projected_gradient(nlp, &v, &grad).amax();
        trace.entries.push(TraceEntry {
            iteration: outer,
            objective: nlp.objective.eval(&v),
            infeasibility: theta,
            step_norm: (&v - &v_before).norm(),
        });

        if theta <= cfg.feasibility_tol && pg_norm <= cfg.optimality_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if Instant::now() >= deadline {
            status = SolveStatus::TimeLimit;
            break;
        }

        if theta <= best_theta * 0.99 {
            stall = 0;
        } else {
            stall += 1;
        }
        best_theta = best_theta.min(theta);
        if state.rho >= cfg.penalty_cap && theta > cfg.feasibility_tol && stall >= 5 {
            status = SolveStatus::Infeasible;
            break;
        }

        // multipliers are re-estimated every sweep; the penalty ramps only
        // when feasibility stopped improving fast enough
        state.update_multipliers(&v);
        if theta > 0.25 * theta_prev && theta > cfg.feasibility_tol {
            state.rho = (state.rho * cfg.penalty_growth).min(cfg.penalty_cap);
        }
        theta_prev = theta;
        inner_tol = (inner_tol * 0.3).max(0.1 * cfg.optimality_tol);
    }

    // the returned point must carry a verified first-order certificate to be
    // called Optimal; when the loop ends elsewhere, fall back to the least-
    // violation iterate if that one verifies
    let mut theta_final = nlp.primal_infeasibility(&v);
    let verified = |point: &DVector<f64>| -> bool {
        kkt_certificate(nlp, point, cfg.feasibility_tol)
            .map_or(false, |res| res <= cfg.optimality_tol.max(1e-6))
    };
    if verified(&v) {
        status = SolveStatus::Optimal;
    } else if memory.0 < theta_final {
        let mut fallback = memory.1.clone();
        polish_equalities(nlp, &mut fallback, 6);
        if verified(&fallback) {
            v = fallback;
            theta_final = nlp.primal_infeasibility(&v);
            status = SolveStatus::Optimal;
        } else if status == SolveStatus::Optimal {
            status = SolveStatus::IterationLimit;
        }
    } else if status == SolveStatus::Optimal {
        status = SolveStatus::IterationLimit;
    }
    if let Some(last) = trace.entries.last_mut() {
        last.infeasibility = theta_final;
    }
    let licq = licq_check(nlp, &v, cfg.feasibility_tol);
    let cpu_seconds = (t0.elapsed().as_secs_f64() * 1000.0).round() / 1000.0;

    Ok(SolutionReport {
        objective: nlp.objective.eval(&v),
        point: v.iter().cloned().collect(),
        status,
        primal_infeasibility: theta_final,
        cpu_seconds,
        trace,
        start_point: start_projected.iter().cloned().collect(),
        licq,
        eq_multipliers: state.lam_eq.iter().cloned().collect(),
        ineq_multipliers: state.mu_ineq.iter().cloned().collect(),
    })
}

/// Lift a raw start onto the inner problem's optimality manifold: pin the
/// outer variables, solve the inner problem, transplant its solution and
/// multiplier estimates, and split the leftover stationarity residual onto
/// the active bound multipliers. Falls back to the raw start on any failure.
fn lift_start(nlp: &SingleLevelNLP, start: &DVector<f64>, cfg: &SolverConfig) -> DVector<f64> {
    let Some(lift) = &nlp.lower_lift else {
        return start.clone();
    };
    let mut mini = lift.mini.clone();
    for &i in &lift.pin_vars {
        mini.bounds[i] = (start[i], start[i]);
    }
    let mini_cfg = SolverConfig {
        starts: 1,
        max_outer: 40,
        time_limit: cfg.time_limit * 0.25,
        ..cfg.clone()
    };
    let report = match solve(&mini, start, &mini_cfg) {
        Ok(r) => r,
        Err(_) => return start.clone(),
    };

    let mut lifted = start.clone();
    for &i in &lift.lower_vars {
        lifted[i] = report.point[i];
    }
    for (row, &var) in lift.ineq_multiplier_vars.iter().enumerate() {
        lifted[var] = report.ineq_multipliers.get(row).copied().unwrap_or(0.0).max(0.0);
    }
    for (row, &var) in lift.eq_multiplier_vars.iter().enumerate() {
        lifted[var] = report.eq_multipliers.get(row).copied().unwrap_or(0.0);
    }
    for &(_, lo_var, hi_var) in &lift.box_pairs {
        lifted[lo_var] = 0.0;
        lifted[hi_var] = 0.0;
    }
    // stationarity residual with bound multipliers zeroed belongs to the
    // active bounds; in smoothed mode the pair targets slack * mu = eps / 2
    for &(yv, lo_var, hi_var) in &lift.box_pairs {
        let (lo, hi) = nlp.bounds[yv];
        let range = (hi - lo).abs().max(1.0);
        let residual = stationarity_component(nlp, &lifted, yv);
        let at_lo = (lifted[yv] - lo).abs() <= 1e-5 * range && residual > 0.0;
        let at_hi = (hi - lifted[yv]).abs() <= 1e-5 * range && residual < 0.0;
        match lift.fb_epsilons {
            None => {
                if at_lo {
                    lifted[lo_var] = residual;
                } else if at_hi {
                    lifted[hi_var] = -residual;
                }
            }
            Some((eps_lo, eps_hi)) => {
                // bound-active pairs keep the stationarity-sized multiplier
                // and back the variable off the bound onto the smoothed root
                if at_lo {
                    lifted[lo_var] = residual.max(1e-6);
                    lifted[yv] = lo + eps_lo / (2.0 * lifted[lo_var]);
                } else if at_hi {
                    lifted[hi_var] = (-residual).max(1e-6);
                    lifted[yv] = hi - eps_hi / (2.0 * lifted[hi_var]);
                }
                let slack_lo = (lifted[yv] - lo).max(1e-9);
                let slack_hi = (hi - lifted[yv]).max(1e-9);
                if !at_lo {
                    lifted[lo_var] = eps_lo / (2.0 * slack_lo);
                }
                if !at_hi {
                    lifted[hi_var] = eps_hi / (2.0 * slack_hi);
                }
            }
        }
    }
    nlp.project_onto_bounds(&mut lifted);
    polish_equalities(nlp, &mut lifted, 8);
    lifted
}

/// Gauss-Newton sweeps on the equality system: least-norm corrections that
/// pull a candidate onto the constraint manifold. Bounds are respected by
/// projection; any step that fails to reduce the residual is rejected.
fn polish_equalities(nlp: &SingleLevelNLP, v: &mut DVector<f64>, max_iters: usize) {
    let n = nlp.n_vars();
    let k = nlp.equalities.len();
    if k == 0 {
        return;
    }
    let residual_norm = |v: &DVector<f64>| -> f64 {
        nlp.equalities.iter().map(|r| r.expr.eval(v).abs()).fold(0.0, f64::max)
    };
    for _ in 0..max_iters {
        let mut c = DVector::zeros(k);
        let mut jac = DMatrix::zeros(k, n);
        for (i, row) in nlp.equalities.iter().enumerate() {
            c[i] = row.expr.eval(v);
            jac.set_row(i, &row.expr.grad(v, n).transpose());
        }
        let norm0 = c.amax();
        if !norm0.is_finite() || norm0 <= 1e-12 {
            return;
        }
        let svd = jac.svd(true, true);
        let Ok(d) = svd.solve(&(-c), 1e-10) else { return };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..10 {
            let mut trial = &*v + &d * alpha;
            nlp.project_onto_bounds(&mut trial);
            let norm1 = residual_norm(&trial);
            if norm1.is_finite() && norm1 < norm0 {
                *v = trial;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            return;
        }
    }
}

/// Value of the stationarity row owning variable `var` at `v`, or 0.
fn stationarity_component(nlp: &SingleLevelNLP, v: &DVector<f64>, var: usize) -> f64 {
    let label_suffix = &nlp.var_names[var];
    nlp.equalities
        .iter()
        .find(|r| {
            r.kind == crate::reformulate::ConstraintKind::Stationarity
                && r.label == format!("stationarity_{label_suffix}")
        })
        .map(|r| r.expr.eval(v))
        .unwrap_or(0.0)
}

/// Start points: first the center hint (envelope mean / box centers) with
/// multipliers at zero, then Latin-hypercube samples of the decision block.
/// Every point is lifted onto the inner optimality manifold when the NLP
/// carries a lift recipe.
pub fn start_points(nlp: &SingleLevelNLP, cfg: &SolverConfig) -> Vec<DVector<f64>> {
    raw_start_points(nlp, cfg).iter().map(|s| lift_start(nlp, s, cfg)).collect()
}

fn raw_start_points(nlp: &SingleLevelNLP, cfg: &SolverConfig) -> Vec<DVector<f64>> {
    let n = nlp.n_vars();
    let d = nlp.decision_dim;
    let mut starts = Vec::with_capacity(cfg.starts);

    let mut center = DVector::zeros(n);
    if let Some(hint) = &nlp.center_hint {
        for i in 0..d.min(hint.len()) {
            center[i] = hint[i];
        }
    } else {
        for i in 0..d {
            let (lo, hi) = nlp.bounds[i];
            center[i] = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo,
                (false, true) => hi,
                (false, false) => 0.0,
            };
        }
    }
    nlp.project_onto_bounds(&mut center);
    starts.push(center);

    let extra = cfg.starts - 1;
    if extra == 0 {
        return starts;
    }
    // Latin hypercube over the decision block
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut lhs = vec![DVector::zeros(n); extra];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..extra).collect();
        for i in (1..extra).rev() {
            let k = rng.gen_range(0..=i);
            strata.swap(i, k);
        }
        let (lo, hi) = nlp.bounds[j];
        let (lo, hi) =
            (if lo.is_finite() { lo } else { -1.0 }, if hi.is_finite() { hi } else { 1.0 });
        for (s, point) in lhs.iter_mut().enumerate() {
            let u: f64 = rng.gen_range(0.0..1.0);
            point[j] = lo + (hi - lo) * ((strata[s] as f64 + u) / extra as f64);
        }
    }
    starts.extend(lhs);
    starts
}

/// Run every start (in parallel), return the best report plus all of them.
/// Best = lowest sense-corrected objective among Optimal runs; if no run is
/// Optimal, the least-infeasible report is returned with status Infeasible.
pub fn multistart_solve(
    nlp: &SingleLevelNLP,
    cfg: &SolverConfig,
) -> Result<(SolutionReport, Vec<SolutionReport>)> {
    cfg.validate()?;
    let starts = start_points(nlp, cfg);
    let reports: Vec<SolutionReport> =
        starts.par_iter().map(|s| solve(nlp, s, cfg)).collect::<Result<Vec<_>>>()?;

    let dir = nlp.sense.direction();
    let best_optimal = reports
        .iter()
        .filter(|r| r.status == SolveStatus::Optimal)
        .min_by(|a, b| (dir * a.objective).partial_cmp(&(dir * b.objective)).unwrap());
    let best = match best_optimal {
        Some(r) => r.clone(),
        None => {
            let mut r = reports
                .iter()
                .min_by(|a, b| {
                    a.primal_infeasibility.partial_cmp(&b.primal_infeasibility).unwrap()
                })
                .expect("at least one start")
                .clone();
            r.status = SolveStatus::Infeasible;
            r
        }
    };
    Ok((best, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::problem::{build_benchmark, BenchmarkName, Sense};
    use crate::reformulate::{kkt_reformulate, ConstraintKind, ConstraintRow, KKTOptions};
    use approx::assert_abs_diff_eq;

    const FREE: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);

    fn unconstrained_quadratic() -> SingleLevelNLP {
        SingleLevelNLP {
            name: "quad".into(),
            var_names: vec!["x".into()],
            bounds: vec![FREE],
            objective: Expr::pow(Expr::sub(Expr::var(0), Expr::Const(3.0)), 2),
            sense: Sense::Min,
            equalities: vec![],
            inequalities: vec![],
            decision_dim: 1,
            center_hint: None,
            lower_lift: None,
        }
    }

    #[test]
    fn unconstrained_quadratic_to_high_accuracy() {
        let nlp = unconstrained_quadratic();
        let rep = solve(&nlp, &DVector::from_vec(vec![0.0]), &SolverConfig::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(rep.point[0], 3.0, epsilon = 1e-8);
    }

    #[test]
    fn equality_and_inequality_constrained_quadratic() {
        // min x^2 + y^2 s.t. x + y = 1  -> (0.5, 0.5)
        let nlp = SingleLevelNLP {
            name: "eq".into(),
            var_names: vec!["x".into(), "y".into()],
            bounds: vec![FREE, FREE],
            objective: Expr::add(Expr::pow(Expr::var(0), 2), Expr::pow(Expr::var(1), 2)),
            sense: Sense::Min,
            equalities: vec![ConstraintRow {
                expr: Expr::affine(-1.0, &[(1.0, 0), (1.0, 1)]),
                kind: ConstraintKind::UpperEq,
                label: "sum".into(),
            }],
            inequalities: vec![],
            decision_dim: 2,
            center_hint: None,
            lower_lift: None,
        };
        let rep = solve(&nlp, &DVector::zeros(2), &SolverConfig::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(rep.point[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(rep.point[1], 0.5, epsilon = 1e-5);

        // min x^2 + y^2 s.t. 1 - x - y <= 0 -> same point
        let nlp2 = SingleLevelNLP {
            name: "ineq".into(),
            inequalities: vec![ConstraintRow {
                expr: Expr::affine(1.0, &[(-1.0, 0), (-1.0, 1)]),
                kind: ConstraintKind::UpperIneq,
                label: "halfspace".into(),
            }],
            equalities: vec![],
            ..nlp
        };
        let rep2 =
            solve(&nlp2, &DVector::from_vec(vec![2.0, 2.0]), &SolverConfig::default()).unwrap();
        assert_eq!(rep2.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(rep2.point[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(rep2.point[1], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn cc_kkt_from_reference_start_lands_on_a_kkt_point() {
        // A single local solve from (4, 4, zeros) must deliver a KKT-feasible
        // point; it is a local method, so which branch it lands on is not
        // pinned (the global is y = 1 + 2x at x = 1, another branch sits at
        // y = 5 with objective 9).
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let mut start = DVector::zeros(nlp.n_vars());
        start[0] = 4.0;
        start[1] = 4.0;
        let rep = solve(&nlp, &start, &SolverConfig::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{:?}", rep.status);
        assert!(nlp.primal_infeasibility(&rep.point_vector()) <= 1e-6);
    }

    #[test]
    fn cc_kkt_multistart_recovers_global() {
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let (best, _) = multistart_solve(&nlp, &SolverConfig::default()).unwrap();
        assert_eq!(best.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(best.objective, 5.0, epsilon = 1e-4);
        assert_abs_diff_eq!(best.point[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(best.point[1], 3.0, epsilon = 1e-4);
    }

    #[test]
    fn cnc_kkt_multistart_reaches_global() {
        let p = build_benchmark(BenchmarkName::Cnc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let (best, _) = multistart_solve(&nlp, &SolverConfig::default()).unwrap();
        assert_eq!(best.status, SolveStatus::Optimal);
        assert!(best.objective <= 1e-4, "objective {}", best.objective);
        assert_abs_diff_eq!(best.point[0], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn ncnc_kkt_multistart_matches_reference() {
        let p = build_benchmark(BenchmarkName::Ncnc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let (best, _) = multistart_solve(&nlp, &SolverConfig::default()).unwrap();
        assert_eq!(best.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(best.objective, 0.1756, epsilon = 1e-3);
        assert_abs_diff_eq!(best.point[1], -1.0, epsilon = 1e-4);
    }

    #[test]
    fn provably_infeasible_nlp_reports_infeasible() {
        // y <= -1 with y in [0, 1]
        let nlp = SingleLevelNLP {
            name: "impossible".into(),
            var_names: vec!["y".into()],
            bounds: vec![(0.0, 1.0)],
            objective: Expr::var(0),
            sense: Sense::Min,
            equalities: vec![],
            inequalities: vec![ConstraintRow {
                expr: Expr::affine(1.0, &[(1.0, 0)]),
                kind: ConstraintKind::UpperIneq,
                label: "y<=-1".into(),
            }],
            decision_dim: 1,
            center_hint: None,
            lower_lift: None,
        };
        let cfg = SolverConfig { starts: 4, ..Default::default() };
        let (best, all) = multistart_solve(&nlp, &cfg).unwrap();
        assert_eq!(best.status, SolveStatus::Infeasible);
        assert!(best.primal_infeasibility > 0.9);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn single_start_equals_center_solve() {
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let cfg = SolverConfig { starts: 1, ..Default::default() };
        let (best, all) = multistart_solve(&nlp, &cfg).unwrap();
        assert_eq!(all.len(), 1);
        let center = start_points(&nlp, &cfg)[0].clone();
        let direct = solve(&nlp, &center, &cfg).unwrap();
        assert_eq!(best.point, direct.point);
        assert_eq!(best.objective, direct.objective);
    }

    #[test]
    fn deterministic_per_seed_and_trace_consistency() {
        let p = build_benchmark(BenchmarkName::Ncnc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let cfg = SolverConfig { starts: 6, seed: 7, ..Default::default() };
        let (a, _) = multistart_solve(&nlp, &cfg).unwrap();
        let (b, _) = multistart_solve(&nlp, &cfg).unwrap();
        assert_eq!(a.point, b.point);
        assert_eq!(a.objective, b.objective);
        let last = a.trace.entries.last().unwrap();
        assert_eq!(last.infeasibility, a.primal_infeasibility);
    }

    #[test]
    fn honest_status_reverifies_from_returned_point() {
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let (best, all) = multistart_solve(&nlp, &SolverConfig::default()).unwrap();
        for rep in all.iter().chain(std::iter::once(&best)) {
            if rep.status == SolveStatus::Optimal {
                let fresh = nlp.primal_infeasibility(&rep.point_vector());
                assert!(fresh <= 1e-6, "claimed optimal but infeasibility {fresh}");
            }
        }
    }

    #[test]
    fn start_outside_bounds_is_projected() {
        let p = build_benchmark(BenchmarkName::Cnc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let mut start = DVector::zeros(nlp.n_vars());
        start[0] = 99.0; // x box is [0, 2]
        let rep = solve(&nlp, &start, &SolverConfig::default()).unwrap();
        assert!(rep.start_point[0] <= 2.0);
    }

    #[test]
    fn non_finite_start_objective_is_an_error() {
        let nlp = SingleLevelNLP {
            name: "bad".into(),
            var_names: vec!["x".into()],
            bounds: vec![FREE],
            objective: Expr::sqrt(Expr::var(0)),
            sense: Sense::Min,
            equalities: vec![],
            inequalities: vec![],
            decision_dim: 1,
            center_hint: None,
            lower_lift: None,
        };
        assert!(solve(&nlp, &DVector::from_vec(vec![-1.0]), &SolverConfig::default()).is_err());
    }

    #[test]
    fn feasibility_classification_boundary_is_closed() {
        let mut rep = SolutionReport {
            point: vec![],
            objective: 0.0,
            status: SolveStatus::Optimal,
            primal_infeasibility: 1e-9,
            cpu_seconds: 0.0,
            trace: SolveTrace::default(),
            start_point: vec![],
            licq: LicqReport { holds: true, rank: 0, active_count: 0 },
            eq_multipliers: vec![],
            ineq_multipliers: vec![],
        };
        assert_eq!(classify_feasibility(&rep, 1e-6), Feasibility::Feasible);
        rep.primal_infeasibility = 0.5;
        assert_eq!(classify_feasibility(&rep, 1e-6), Feasibility::Infeasible);
        rep.primal_infeasibility = 1e-6;
        assert_eq!(classify_feasibility(&rep, 1e-6), Feasibility::Feasible);
    }
}
