//! Collapse a bi-level problem into a single-level NLP via the first-order
//! optimality system of the lower level: stationarity rows, primal/dual
//! feasibility, and complementarity. Complementarity can be emitted as raw
//! products or smoothed with the perturbed Fischer-Burmeister function.
//! A Mahalanobis envelope fitted on scaled operating data restricts
//! solutions to the region the surrogates were trained on.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::problem::{BilevelProblem, Sense};

/// Fischer-Burmeister function: zero iff a >= 0, b >= 0, and a*b = 0.
pub fn fb(a: f64, b: f64) -> f64 {
    a + b - (a * a + b * b).sqrt()
}

/// Smoothed variant: zero iff a >= 0, b >= 0, and a*b = eps/2. Smooth in
/// (a, b) everywhere for eps > 0, including the origin.
pub fn fb_perturbed(a: f64, b: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("fb_perturbed needs eps > 0".into()));
    }
    Ok((a * a + b * b + eps).sqrt() - a - b)
}

/// Expression form of the smoothed function: sqrt(a^2 + b^2 + eps) - a - b.
pub fn fb_perturbed_expr(a: Expr, b: Expr, eps: f64) -> Expr {
    let radicand = Expr::add(
        Expr::add(Expr::pow(a.clone(), 2), Expr::pow(b.clone(), 2)),
        Expr::Const(eps),
    );
    Expr::sub(Expr::sub(Expr::sqrt(radicand), a), b)
}

/// Validity envelope: Mahalanobis ball around the training-data mean.
#[derive(Debug, Clone)]
pub struct MahalanobisEnvelope {
    pub mean: DVector<f64>,
    pub inv_cov: Arc<DMatrix<f64>>,
    pub tau: f64,
    pub percentile: f64,
    /// Sorted training distances; lets any percentile be re-read later.
    pub distance_sample: Vec<f64>,
}

/// Ridge policy for near-singular sample covariances.
const COV_EIG_FLOOR: f64 = 1e-10;
const COV_RIDGE: f64 = 1e-8;

/// Fit the envelope on (scaled) data: column means, inverted sample
/// covariance, and tau at the nearest-rank percentile of the empirical
/// distances.
pub fn mahalanobis_fit(data: &DataMatrix, percentile: f64) -> Result<MahalanobisEnvelope> {
    let n = data.nrows();
    let d = data.ncols();
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidInput(format!("percentile {percentile} not in (0, 100)")));
    }
    if n <= d {
        return Err(Error::InvalidInput(format!(
            "need more rows ({n}) than columns ({d}) to fit a covariance"
        )));
    }
    let x = data.values();
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = x.row(i).transpose() - &mean;
        cov += &r * r.transpose() / (n - 1) as f64;
    }

    let trace_scale = cov.trace() / d as f64;
    let eig_min = nalgebra::SymmetricEigen::new(cov.clone()).eigenvalues.min();
    let mut ridged = cov;
    if eig_min < COV_EIG_FLOOR * trace_scale {
        let ridge = COV_RIDGE * trace_scale;
        if ridge <= 0.0 {
            return Err(Error::Numerical("covariance is singular with zero trace".into()));
        }
        for a in 0..d {
            ridged[(a, a)] += ridge;
        }
    }
    let chol = nalgebra::Cholesky::new(ridged)
        .ok_or_else(|| Error::Numerical("covariance not positive-definite after ridge".into()))?;
    let inv_cov = chol.inverse();

    let mut distances: Vec<f64> = (0..n)
        .map(|i| {
            let r = x.row(i).transpose() - &mean;
            (r.transpose() * &inv_cov * &r)[(0, 0)].max(0.0).sqrt()
        })
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let tau = nearest_rank(&distances, percentile);
    Ok(MahalanobisEnvelope {
        mean,
        inv_cov: Arc::new(inv_cov),
        tau,
        percentile,
        distance_sample: distances,
    })
}

fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl MahalanobisEnvelope {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Squared Mahalanobis distance (y - mean)^T S^-1 (y - mean).
    pub fn distance_sq(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        let r = y - &self.mean;
        Ok((r.transpose() * self.inv_cov.as_ref() * &r)[(0, 0)])
    }

    /// Gradient of the squared distance: 2 S^-1 (y - mean).
    pub fn distance_sq_gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        Ok(self.inv_cov.as_ref() * (y - &self.mean) * 2.0)
    }

    /// Nearest-rank tau for another percentile of the same fit sample.
    pub fn tau_for_percentile(&self, percentile: f64) -> Result<f64> {
        if !(percentile > 0.0 && percentile < 100.0) {
            return Err(Error::InvalidInput(format!("percentile {percentile} not in (0, 100)")));
        }
        Ok(nearest_rank(&self.distance_sample, percentile))
    }

    /// Envelope inequality over the given joint-variable indices:
    /// (v - mean)^T S^-1 (v - mean) - tau^2 <= 0.
    pub fn constraint_expr(&self, inputs: Vec<usize>) -> Expr {
        Expr::sub(
            Expr::quad_form(self.mean.clone(), self.inv_cov.clone(), inputs),
            Expr::Const(self.tau * self.tau),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EnvelopeFile {
            mean: self.mean.iter().cloned().collect(),
            inv_cov_row_major: self
                .inv_cov
                .row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect(),
            tau: self.tau,
            percentile: self.percentile,
            distance_sample: self.distance_sample.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: EnvelopeFile = serde_json::from_str(json)?;
        let d = file.mean.len();
        if file.inv_cov_row_major.len() != d * d {
            return Err(Error::Schema("inverse covariance length mismatch".into()));
        }
        Ok(MahalanobisEnvelope {
            mean: DVector::from_vec(file.mean),
            inv_cov: Arc::new(DMatrix::from_row_slice(d, d, &file.inv_cov_row_major)),
            tau: file.tau,
            percentile: file.percentile,
            distance_sample: file.distance_sample,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct EnvelopeFile {
    mean: Vec<f64>,
    inv_cov_row_major: Vec<f64>,
    tau: f64,
    percentile: f64,
    #[serde(default)]
    distance_sample: Vec<f64>,
}

/// Options controlling the reformulation.
#[derive(Debug, Clone)]
pub struct KKTOptions {
    /// Smooth complementarities with the perturbed Fischer-Burmeister rows.
    pub use_fb: bool,
    /// Smoothing for general inequality pairs.
    pub epsilon: f64,
    /// Smoothing for lower-bound box pairs.
    pub epsilon_lower: f64,
    /// Smoothing for upper-bound box pairs.
    pub epsilon_upper: f64,
    pub envelope: Option<MahalanobisEnvelope>,
}

impl Default for KKTOptions {
    fn default() -> Self {
        Self {
            use_fb: false,
            epsilon: 1e-6,
            epsilon_lower: 1e-3,
            epsilon_upper: 1e-9,
            envelope: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// Lagrangian gradient row of the lower level.
    Stationarity,
    /// Lower-level inequality g <= 0.
    LowerIneq,
    /// Lower-level equality h = 0.
    LowerEq,
    /// Raw complementarity product mu * g = 0. Structurally rank-deficient at
    /// any complementary point, so excluded from constraint-qualification
    /// Jacobians.
    ComplementarityProduct,
    /// Smoothed Fischer-Burmeister equality.
    FbComplementarity,
    UpperIneq,
    UpperEq,
    /// Envelope inequality (distance^2 - tau^2 <= 0).
    EnvelopeIneq,
}

#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub expr: Expr,
    pub kind: ConstraintKind,
    pub label: String,
}

/// Single-level NLP: decision variables first, then the lower level's
/// multipliers as bounded solver unknowns. Inequalities are `expr <= 0`,
/// equalities `expr = 0`; dual feasibility and the primal boxes live in the
/// variable bounds.
#[derive(Debug, Clone)]
pub struct SingleLevelNLP {
    pub name: String,
    pub var_names: Vec<String>,
    pub bounds: Vec<(f64, f64)>,
    pub objective: Expr,
    pub sense: Sense,
    pub equalities: Vec<ConstraintRow>,
    pub inequalities: Vec<ConstraintRow>,
    /// Leading variables that are decisions rather than multipliers.
    pub decision_dim: usize,
    /// Preferred start for the decision block (envelope mean or box center).
    pub center_hint: Option<DVector<f64>>,
    /// Recipe for lifting raw start points onto the inner problem's
    /// optimality manifold before the full solve.
    pub lower_lift: Option<Box<LiftSpec>>,
}

/// Start-point lift: solve the inner problem with the outer variables
/// pinned, then transplant the solution and its multiplier estimates into
/// the full variable vector. Starting the full solve on (or near) the inner
/// KKT manifold is what lets a local method traverse active-set branches
/// instead of collapsing into the all-multipliers-zero basin.
#[derive(Debug, Clone)]
pub struct LiftSpec {
    /// Inner problem over the same variable vector; multiplier variables are
    /// pinned to zero, and `pin_vars` get pinned to the start's values.
    pub mini: SingleLevelNLP,
    /// Variables frozen during the inner solve (outer-only decisions).
    pub pin_vars: Vec<usize>,
    /// Joint indices of the inner decision block.
    pub lower_vars: Vec<usize>,
    /// Full-NLP variable receiving the multiplier of each mini inequality.
    pub ineq_multiplier_vars: Vec<usize>,
    /// Full-NLP variable receiving the multiplier of each mini equality.
    pub eq_multiplier_vars: Vec<usize>,
    /// (inner var, its lower-bound multiplier, its upper-bound multiplier).
    pub box_pairs: Vec<(usize, usize, usize)>,
    /// (eps_lower, eps_upper) when the box complementarities are smoothed;
    /// the lift then targets the perturbed roots slack * mu = eps / 2.
    pub fb_epsilons: Option<(f64, f64)>,
}

impl SingleLevelNLP {
    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    /// Max violation over all rows and variable bounds at `v`.
    pub fn primal_infeasibility(&self, v: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for row in &self.equalities {
            worst = worst.max(row.expr.eval(v).abs());
        }
        for row in &self.inequalities {
            worst = worst.max(row.expr.eval(v).max(0.0));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            worst = worst.max(lo - v[i]).max(v[i] - hi);
        }
        worst
    }

    pub fn project_onto_bounds(&self, v: &mut DVector<f64>) {
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            v[i] = v[i].clamp(lo, hi);
        }
    }
}

impl fmt::Display for SingleLevelNLP {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nlp `{}`: {:?} {}", self.name, self.sense, self.objective)?;
        writeln!(f, "vars:")?;
        for (i, name) in self.var_names.iter().enumerate() {
            let (lo, hi) = self.bounds[i];
            writeln!(f, "  v{i} = {name} in [{lo}, {hi}]")?;
        }
        for row in &self.equalities {
            writeln!(f, "  [{}] {} = 0", row.label, row.expr)?;
        }
        for row in &self.inequalities {
            writeln!(f, "  [{}] {} <= 0", row.label, row.expr)?;
        }
        Ok(())
    }
}

const FREE: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);
const NONNEG: (f64, f64) = (0.0, f64::INFINITY);

/// Build the single-level NLP. Layout:
/// [x, y, mu_g.., lambda_h.., mu_lo.., mu_hi.., lambda_env?].
pub fn kkt_reformulate(problem: &BilevelProblem, opts: &KKTOptions) -> Result<SingleLevelNLP> {
    problem.validate()?;
    if opts.use_fb && !(opts.epsilon > 0.0 && opts.epsilon_lower > 0.0 && opts.epsilon_upper > 0.0)
    {
        return Err(Error::InvalidInput("FB smoothing needs positive epsilons".into()));
    }
    // an envelope may come with the problem or be supplied per-reformulation
    let envelope = opts.envelope.as_ref().or(problem.lower_envelope.as_ref());
    if let Some(env) = envelope {
        if env.dim() != problem.n_lower() {
            return Err(Error::DimensionMismatch {
                expected: problem.n_lower(),
                got: env.dim(),
            });
        }
    }

    let m = problem.n_upper();
    let p = problem.n_lower();
    let q = problem.lower_ineq.len();
    let r = problem.lower_eq.len();
    let has_env = envelope.is_some();

    let mu_g0 = m + p;
    let lam_h0 = mu_g0 + q;
    let mu_lo0 = lam_h0 + r;
    let mu_hi0 = mu_lo0 + p;
    let lam_env = mu_hi0 + p;
    let n_vars = lam_env + has_env as usize;

    let mut var_names = problem.var_names.clone();
    let mut bounds = problem.joint_bounds();
    for i in 0..q {
        var_names.push(format!("mu_g{}", i + 1));
        bounds.push(NONNEG);
    }
    for j in 0..r {
        var_names.push(format!("lam_h{}", j + 1));
        bounds.push(FREE);
    }
    for k in 0..p {
        var_names.push(format!("mu_lo_{}", problem.var_names[m + k]));
        bounds.push(NONNEG);
    }
    for k in 0..p {
        var_names.push(format!("mu_hi_{}", problem.var_names[m + k]));
        bounds.push(NONNEG);
    }
    let env_inputs: Vec<usize> = (m..m + p).collect();
    if has_env {
        var_names.push("lam_env".into());
        bounds.push(NONNEG);
    }

    let mut equalities = Vec::new();
    let mut inequalities = Vec::new();

    // stationarity: grad_y f + mu^T grad_y g + lam^T grad_y h
    //               + lam_env grad_y(dist^2) - mu_lo + mu_hi = 0
    for k in 0..p {
        let yk = m + k;
        let mut row = problem.lower_objective.derivative(yk)?;
        for (i, g) in problem.lower_ineq.iter().enumerate() {
            let dg = g.derivative(yk)?;
            if !matches!(dg, Expr::Const(c) if c == 0.0) {
                row = Expr::add(row, Expr::mul(Expr::var(mu_g0 + i), dg));
            }
        }
        for (j, h) in problem.lower_eq.iter().enumerate() {
            let dh = h.derivative(yk)?;
            if !matches!(dh, Expr::Const(c) if c == 0.0) {
                row = Expr::add(row, Expr::mul(Expr::var(lam_h0 + j), dh));
            }
        }
        if let Some(env) = envelope {
            let denv = env.constraint_expr(env_inputs.clone()).derivative(yk)?;
            row = Expr::add(row, Expr::mul(Expr::var(lam_env), denv));
        }
        row = Expr::add(row, Expr::sub(Expr::var(mu_hi0 + k), Expr::var(mu_lo0 + k)));
        equalities.push(ConstraintRow {
            expr: row,
            kind: ConstraintKind::Stationarity,
            label: format!("stationarity_{}", problem.var_names[yk]),
        });
    }

    // lower equalities stay as-is
    for (j, h) in problem.lower_eq.iter().enumerate() {
        equalities.push(ConstraintRow {
            expr: h.clone(),
            kind: ConstraintKind::LowerEq,
            label: format!("lower_eq{}", j + 1),
        });
    }

    if opts.use_fb {
        // one smoothed row per inequality pair (mu_i, -g_i) ...
        for (i, g) in problem.lower_ineq.iter().enumerate() {
            equalities.push(ConstraintRow {
                expr: fb_perturbed_expr(Expr::var(mu_g0 + i), Expr::neg(g.clone()), opts.epsilon),
                kind: ConstraintKind::FbComplementarity,
                label: format!("fb_g{}", i + 1),
            });
        }
        // ... and per box pair; primal/dual rows for these pairs are implied
        for k in 0..p {
            let yk = m + k;
            let (lo, hi) = problem.lower_box[k];
            let slack_lo = Expr::sub(Expr::var(yk), Expr::Const(lo));
            equalities.push(ConstraintRow {
                expr: fb_perturbed_expr(slack_lo, Expr::var(mu_lo0 + k), opts.epsilon_lower),
                kind: ConstraintKind::FbComplementarity,
                label: format!("fb_lo_{}", problem.var_names[yk]),
            });
            let slack_hi = Expr::sub(Expr::Const(hi), Expr::var(yk));
            equalities.push(ConstraintRow {
                expr: fb_perturbed_expr(slack_hi, Expr::var(mu_hi0 + k), opts.epsilon_upper),
                kind: ConstraintKind::FbComplementarity,
                label: format!("fb_hi_{}", problem.var_names[yk]),
            });
        }
    } else {
        for (i, g) in problem.lower_ineq.iter().enumerate() {
            inequalities.push(ConstraintRow {
                expr: g.clone(),
                kind: ConstraintKind::LowerIneq,
                label: format!("lower_g{}", i + 1),
            });
            equalities.push(ConstraintRow {
                expr: Expr::mul(Expr::var(mu_g0 + i), g.clone()),
                kind: ConstraintKind::ComplementarityProduct,
                label: format!("comp_g{}", i + 1),
            });
        }
        for k in 0..p {
            let yk = m + k;
            let (lo, hi) = problem.lower_box[k];
            equalities.push(ConstraintRow {
                expr: Expr::mul(
                    Expr::var(mu_lo0 + k),
                    Expr::sub(Expr::Const(lo), Expr::var(yk)),
                ),
                kind: ConstraintKind::ComplementarityProduct,
                label: format!("comp_lo_{}", problem.var_names[yk]),
            });
            equalities.push(ConstraintRow {
                expr: Expr::mul(
                    Expr::var(mu_hi0 + k),
                    Expr::sub(Expr::var(yk), Expr::Const(hi)),
                ),
                kind: ConstraintKind::ComplementarityProduct,
                label: format!("comp_hi_{}", problem.var_names[yk]),
            });
        }
    }

    // envelope rows stay explicit in both modes
    if let Some(env) = envelope {
        let c = env.constraint_expr(env_inputs.clone());
        inequalities.push(ConstraintRow {
            expr: c.clone(),
            kind: ConstraintKind::EnvelopeIneq,
            label: "envelope".into(),
        });
        equalities.push(ConstraintRow {
            expr: Expr::mul(Expr::var(lam_env), c),
            kind: ConstraintKind::ComplementarityProduct,
            label: "comp_envelope".into(),
        });
    }

    for (i, g) in problem.upper_ineq.iter().enumerate() {
        inequalities.push(ConstraintRow {
            expr: g.clone(),
            kind: ConstraintKind::UpperIneq,
            label: format!("upper_g{}", i + 1),
        });
    }
    for (j, h) in problem.upper_eq.iter().enumerate() {
        equalities.push(ConstraintRow {
            expr: h.clone(),
            kind: ConstraintKind::UpperEq,
            label: format!("upper_h{}", j + 1),
        });
    }

    let center_hint = {
        let mut c = DVector::zeros(m + p);
        for i in 0..m {
            let (lo, hi) = problem.upper_box[i];
            c[i] = 0.5 * (lo + hi);
        }
        match envelope {
            Some(env) => {
                for k in 0..p {
                    c[m + k] = env.mean[k];
                }
            }
            None => {
                for k in 0..p {
                    let (lo, hi) = problem.lower_box[k];
                    c[m + k] = 0.5 * (lo + hi);
                }
            }
        }
        Some(c)
    };

    // inner problem for start lifting: the raw lower level over the same
    // variable vector, multipliers pinned at zero
    let mini = {
        let mut mini_bounds = bounds.clone();
        for b in mini_bounds.iter_mut().skip(m + p) {
            *b = (0.0, 0.0);
        }
        let mut mini_ineq: Vec<ConstraintRow> = problem
            .lower_ineq
            .iter()
            .enumerate()
            .map(|(i, g)| ConstraintRow {
                expr: g.clone(),
                kind: ConstraintKind::LowerIneq,
                label: format!("lower_g{}", i + 1),
            })
            .collect();
        if let Some(env) = envelope {
            mini_ineq.push(ConstraintRow {
                expr: env.constraint_expr(env_inputs.clone()),
                kind: ConstraintKind::EnvelopeIneq,
                label: "envelope".into(),
            });
        }
        let mini_eq: Vec<ConstraintRow> = problem
            .lower_eq
            .iter()
            .enumerate()
            .map(|(j, h)| ConstraintRow {
                expr: h.clone(),
                kind: ConstraintKind::LowerEq,
                label: format!("lower_eq{}", j + 1),
            })
            .collect();
        SingleLevelNLP {
            name: format!("{}-lower", problem.name),
            var_names: var_names.clone(),
            bounds: mini_bounds,
            objective: problem.lower_objective.clone(),
            sense: Sense::Min,
            equalities: mini_eq,
            inequalities: mini_ineq,
            decision_dim: m + p,
            center_hint: None,
            lower_lift: None,
        }
    };
    let mut ineq_multiplier_vars: Vec<usize> = (0..q).map(|i| mu_g0 + i).collect();
    if has_env {
        ineq_multiplier_vars.push(lam_env);
    }
    let lift = LiftSpec {
        mini,
        pin_vars: (0..m).collect(),
        lower_vars: (m..m + p).collect(),
        ineq_multiplier_vars,
        eq_multiplier_vars: (0..r).map(|j| lam_h0 + j).collect(),
        box_pairs: (0..p).map(|k| (m + k, mu_lo0 + k, mu_hi0 + k)).collect(),
        fb_epsilons: opts.use_fb.then_some((opts.epsilon_lower, opts.epsilon_upper)),
    };

    debug_assert_eq!(var_names.len(), n_vars);
    Ok(SingleLevelNLP {
        name: format!("{}-kkt{}", problem.name, if opts.use_fb { "-fb" } else { "" }),
        var_names,
        bounds,
        objective: problem.upper_objective.clone(),
        sense: problem.upper_sense,
        equalities,
        inequalities,
        decision_dim: m + p,
        center_hint,
        lower_lift: Some(Box::new(lift)),
    })
}

/// Constraint-qualification report at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LicqReport {
    pub holds: bool,
    pub rank: usize,
    /// Number of active inequality rows (variable bounds not counted).
    pub active_count: usize,
}

/// Assemble the Jacobian of the active constraint system and test it for
/// full row rank. Included rows: every equality except raw complementarity
/// products (those are dependent by construction wherever they hold),
/// inequality rows within `active_tol` of zero, and active variable bounds.
pub fn licq_check(nlp: &SingleLevelNLP, point: &DVector<f64>, active_tol: f64) -> LicqReport {
    let n = nlp.n_vars();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut active_count = 0;

    for row in &nlp.equalities {
        if row.kind == ConstraintKind::ComplementarityProduct {
            continue;
        }
        rows.push(row.expr.grad(point, n));
    }
    for row in &nlp.inequalities {
        if row.expr.eval(point).abs() <= active_tol {
            active_count += 1;
            rows.push(row.expr.grad(point, n));
        }
    }
    for (i, &(lo, hi)) in nlp.bounds.iter().enumerate() {
        let at_lo = lo.is_finite() && (point[i] - lo).abs() <= active_tol;
        let at_hi = hi.is_finite() && (hi - point[i]).abs() <= active_tol;
        if at_lo || at_hi {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            rows.push(e);
        }
    }

    if rows.is_empty() {
        return LicqReport { holds: true, rank: 0, active_count };
    }
    let mut jac = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        jac.set_row(i, &r.transpose());
    }
    let n_rows = rows.len();
    let svd = jac.svd(false, false);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    LicqReport { holds: rank == n_rows, rank, active_count }
}

/// Stationarity residual: max |row| over stationarity equalities only.
pub fn stationarity_residual(nlp: &SingleLevelNLP, point: &DVector<f64>) -> f64 {
    nlp.equalities
        .iter()
        .filter(|r| r.kind == ConstraintKind::Stationarity)
        .map(|r| r.expr.eval(point).abs())
        .fold(0.0, f64::max)
}

/// Indices of joint variables actually read by the problem's upper
/// objective (used to check shared-subset wiring).
pub fn upper_reads(problem: &BilevelProblem) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    crate::problem::collect_vars(&problem.upper_objective, &mut set);
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_benchmark, BenchmarkName};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn fb_known_roots_and_nonroots() {
        assert_eq!(fb(0.0, 0.0), 0.0);
        assert_eq!(fb(3.0, 0.0), 0.0);
        assert_eq!(fb(0.0, 7.0), 0.0);
        assert_abs_diff_eq!(fb(1.0, 1.0), 2.0 - 2.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn fb_root_characterization_on_grid() {
        // 201x201 grid over [-2,2]^2: |fb| <= 1e-12 exactly where a,b >= 0
        // and a*b <= 1e-12
        for i in 0..=200 {
            for j in 0..=200 {
                let a = -2.0 + 0.02 * i as f64;
                let b = -2.0 + 0.02 * j as f64;
                let is_root = fb(a, b).abs() <= 1e-12;
                let should = a >= 0.0 && b >= 0.0 && a * b <= 1e-12;
                assert_eq!(is_root, should, "a={a} b={b} fb={}", fb(a, b));
            }
        }
    }

    #[test]
    fn fb_perturbed_origin_value_and_validation() {
        assert_abs_diff_eq!(fb_perturbed(0.0, 0.0, 1e-6).unwrap(), 1e-3, epsilon = 1e-18);
        assert!(fb_perturbed(1.0, 1.0, 0.0).is_err());
        assert!(fb_perturbed(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn fb_perturbed_roots_satisfy_product_identity() {
        // solve sqrt(a^2 + b^2 + eps) = a + b for b by bisection at fixed a,
        // then verify a*b = eps/2
        let eps = 2e-4;
        for &a in &[0.05, 0.3, 1.5] {
            let h = |b: f64| fb_perturbed(a, b, eps).unwrap();
            let (mut lo, mut hi) = (1e-12, 10.0);
            assert!(h(lo) > 0.0 && h(hi) < 0.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if h(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let b = 0.5 * (lo + hi);
            assert_abs_diff_eq!(a * b, eps / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fb_perturbed_gradient_finite_at_origin() {
        let e = fb_perturbed_expr(Expr::var(0), Expr::var(1), 1e-6);
        let g = e.grad(&DVector::zeros(2), 2);
        assert_abs_diff_eq!(g[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], -1.0, epsilon = 1e-9);
    }

    fn standard_normal_data(n: usize, d: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        DataMatrix::new((0..d).map(|j| format!("c{j}")).collect(), values).unwrap()
    }

    #[test]
    fn mahalanobis_distance_zero_at_mean() {
        let data = standard_normal_data(500, 3, 1);
        let env = mahalanobis_fit(&data, 95.0).unwrap();
        assert_abs_diff_eq!(env.distance_sq(&env.mean.clone()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_tau_matches_chi2_quantile() {
        let data = standard_normal_data(10_000, 2, 2);
        let env = mahalanobis_fit(&data, 95.0).unwrap();
        // sqrt of the chi-square(2) 95% quantile is about 2.448
        assert!((2.35..=2.55).contains(&env.tau), "tau = {}", env.tau);
    }

    #[test]
    fn mahalanobis_membership_fraction_matches_percentile() {
        let n = 10_000;
        let data = standard_normal_data(n, 2, 3);
        let env = mahalanobis_fit(&data, 90.0).unwrap();
        let inside = (0..n)
            .filter(|&i| {
                let y = data.values().row(i).transpose();
                env.distance_sq(&y).unwrap().sqrt() <= env.tau
            })
            .count();
        let frac = inside as f64 / n as f64;
        assert!((frac - 0.9).abs() <= 1.0 / (n as f64).sqrt(), "fraction {frac}");
    }

    #[test]
    fn mahalanobis_unit_step_under_identity_covariance() {
        // big sample of N(0, I) gives inv_cov close to I
        let data = standard_normal_data(20_000, 2, 4);
        let env = mahalanobis_fit(&data, 95.0).unwrap();
        let y = DVector::from_vec(vec![env.mean[0] + 1.0, env.mean[1]]);
        assert_abs_diff_eq!(env.distance_sq(&y).unwrap(), 1.0, epsilon = 0.1);
    }

    #[test]
    fn mahalanobis_gradient_matches_finite_differences() {
        let data = standard_normal_data(2_000, 3, 5);
        let env = mahalanobis_fit(&data, 95.0).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let g = env.distance_sq_gradient(&y).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[k] += h;
            ym[k] -= h;
            let fd = (env.distance_sq(&yp).unwrap() - env.distance_sq(&ym).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn mahalanobis_tau_monotone_in_percentile() {
        let data = standard_normal_data(5_000, 2, 6);
        let env = mahalanobis_fit(&data, 95.0).unwrap();
        let mut prev = 0.0;
        for p in [50.0, 81.0, 90.0, 95.0, 99.0] {
            let t = env.tau_for_percentile(p).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn mahalanobis_rejects_fat_data() {
        let data = standard_normal_data(3, 5, 7);
        assert!(mahalanobis_fit(&data, 95.0).is_err());
    }

    #[test]
    fn mahalanobis_handles_constant_column_with_ridge() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let values =
            DMatrix::from_fn(200, 2, |_, j| if j == 0 { rng.gen_range(0.0..1.0) } else { 0.5 });
        let data = DataMatrix::new(vec!["a".into(), "b".into()], values).unwrap();
        let env = mahalanobis_fit(&data, 95.0).unwrap();
        assert!(env.tau.is_finite() && env.tau > 0.0);
    }

    #[test]
    fn envelope_json_round_trip() {
        let data = standard_normal_data(300, 2, 9);
        let env = mahalanobis_fit(&data, 92.0).unwrap();
        let back = MahalanobisEnvelope::from_json(&env.to_json().unwrap()).unwrap();
        assert_eq!(env.mean, back.mean);
        assert_eq!(*env.inv_cov, *back.inv_cov);
        assert_eq!(env.tau, back.tau);
        assert_eq!(env.distance_sample, back.distance_sample);
    }

    #[test]
    fn cc_reformulation_structure_and_stationarity() {
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        // vars: x, y, mu_g1..3, mu_lo_y, mu_hi_y
        assert_eq!(nlp.n_vars(), 7);
        assert_eq!(nlp.decision_dim, 2);
        let stationarity: Vec<_> = nlp
            .equalities
            .iter()
            .filter(|r| r.kind == ConstraintKind::Stationarity)
            .collect();
        assert_eq!(stationarity.len(), 1);

        // term-by-term against 2(y-5) + mu1 - 2 mu2 + 2 mu3 - mu_lo + mu_hi
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for _ in 0..50 {
            let v = DVector::from_fn(7, |_, _| rng.gen_range(-2.0..2.0));
            let by_hand = 2.0 * (v[1] - 5.0) + v[2] - 2.0 * v[3] + 2.0 * v[4] - v[5] + v[6];
            assert_abs_diff_eq!(stationarity[0].expr.eval(&v), by_hand, epsilon = 1e-12);
        }

        // one multiplier and one complementarity row per lower inequality
        let comp_rows = nlp
            .equalities
            .iter()
            .filter(|r| r.kind == ConstraintKind::ComplementarityProduct)
            .count();
        assert_eq!(comp_rows, 3 + 2); // three g's plus the box pair
        let primal_rows =
            nlp.inequalities.iter().filter(|r| r.kind == ConstraintKind::LowerIneq).count();
        assert_eq!(primal_rows, 3);
    }

    #[test]
    fn cnc_reformulation_box_complementarities() {
        let p = build_benchmark(BenchmarkName::Cnc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        // no lower g/h: vars are x, y, mu_lo_y, mu_hi_y
        assert_eq!(nlp.n_vars(), 4);
        let comp: Vec<_> = nlp
            .equalities
            .iter()
            .filter(|r| r.kind == ConstraintKind::ComplementarityProduct)
            .collect();
        assert_eq!(comp.len(), 2);
        // mu_lo * (0 - y) and mu_hi * (y - 1)
        let v = DVector::from_vec(vec![0.3, 0.4, 2.0, 3.0]);
        assert_abs_diff_eq!(comp[0].expr.eval(&v), 2.0 * (0.0 - 0.4), epsilon = 1e-15);
        assert_abs_diff_eq!(comp[1].expr.eval(&v), 3.0 * (0.4 - 1.0), epsilon = 1e-15);
    }

    #[test]
    fn stationarity_holds_at_interior_minimum_with_zero_multipliers() {
        // lower objective (y - 0.3)^2 with an inactive constraint y - 2 <= 0
        let p = BilevelProblem {
            name: "toy".into(),
            var_names: vec!["y".into()],
            upper_box: vec![],
            lower_box: vec![(0.0, 1.0)],
            shared_map: vec![0],
            upper_objective: Expr::var(0),
            upper_sense: Sense::Min,
            upper_ineq: vec![],
            upper_eq: vec![],
            lower_objective: Expr::pow(Expr::sub(Expr::var(0), Expr::Const(0.3)), 2),
            lower_ineq: vec![Expr::sub(Expr::var(0), Expr::Const(2.0))],
            lower_eq: vec![],
            lower_envelope: None,
        };
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let v = DVector::from_vec(vec![0.3, 0.0, 0.0, 0.0]);
        for row in &nlp.equalities {
            assert!(row.expr.eval(&v).abs() <= 1e-9, "row {} violated", row.label);
        }
        for row in &nlp.inequalities {
            assert!(row.expr.eval(&v) <= 1e-9);
        }
    }

    #[test]
    fn fb_mode_replaces_products_with_smoothed_rows() {
        let p = build_benchmark(BenchmarkName::Cc);
        let opts = KKTOptions { use_fb: true, ..Default::default() };
        let nlp = kkt_reformulate(&p, &opts).unwrap();
        let fb_rows =
            nlp.equalities.iter().filter(|r| r.kind == ConstraintKind::FbComplementarity).count();
        assert_eq!(fb_rows, 3 + 2);
        assert_eq!(
            nlp.equalities
                .iter()
                .filter(|r| r.kind == ConstraintKind::ComplementarityProduct)
                .count(),
            0
        );
        // primal rows for FB-covered pairs are dropped
        assert_eq!(
            nlp.inequalities.iter().filter(|r| r.kind == ConstraintKind::LowerIneq).count(),
            0
        );
    }

    #[test]
    fn plant_shaped_reformulation_row_counts() {
        // 8 lower vars, envelope, FB on the boxes
        let d = 8;
        let data = standard_normal_data(400, d, 11);
        let scaled = {
            let spec = crate::dataset::minmax_fit(&data).unwrap();
            crate::dataset::minmax_apply(&spec, &data).unwrap()
        };
        let env = mahalanobis_fit(&scaled, 90.0).unwrap();
        let model = crate::expr::tests::toy_model(d, 12);
        let p = BilevelProblem {
            name: "plantish".into(),
            var_names: (0..d).map(|i| format!("u{i}")).collect(),
            upper_box: vec![],
            lower_box: vec![(0.0, 1.0); d],
            shared_map: (0..6).collect(),
            upper_objective: Expr::surrogate(
                model.clone(),
                (0..d).map(Expr::var).collect(),
                true,
            ),
            upper_sense: Sense::Max,
            upper_ineq: vec![],
            upper_eq: vec![],
            lower_objective: Expr::surrogate(model, (0..d).map(Expr::var).collect(), true),
            lower_ineq: vec![],
            lower_eq: vec![],
            lower_envelope: None,
        };
        let opts = KKTOptions { use_fb: true, envelope: Some(env), ..Default::default() };
        let nlp = kkt_reformulate(&p, &opts).unwrap();
        let count = |k: ConstraintKind| {
            nlp.equalities.iter().filter(|r| r.kind == k).count()
                + nlp.inequalities.iter().filter(|r| r.kind == k).count()
        };
        assert_eq!(count(ConstraintKind::Stationarity), 8);
        assert_eq!(count(ConstraintKind::FbComplementarity), 16);
        assert_eq!(count(ConstraintKind::EnvelopeIneq), 1);
        assert_eq!(count(ConstraintKind::ComplementarityProduct), 1);
        // lam_env bounded at zero from below
        let lam_idx = nlp.var_names.iter().position(|n| n == "lam_env").unwrap();
        assert_eq!(nlp.bounds[lam_idx].0, 0.0);
    }

    #[test]
    fn licq_single_active_constraint() {
        let nlp = SingleLevelNLP {
            name: "one".into(),
            var_names: vec!["y".into()],
            bounds: vec![FREE],
            objective: Expr::var(0),
            sense: Sense::Min,
            equalities: vec![],
            inequalities: vec![ConstraintRow {
                expr: Expr::sub(Expr::var(0), Expr::Const(6.0)),
                kind: ConstraintKind::UpperIneq,
                label: "y<=6".into(),
            }],
            decision_dim: 1,
            center_hint: None,
            lower_lift: None,
        };
        let rep = licq_check(&nlp, &DVector::from_vec(vec![6.0]), 1e-6);
        assert!(rep.holds);
        assert_eq!(rep.rank, 1);
        assert_eq!(rep.active_count, 1);
    }

    #[test]
    fn licq_duplicated_rows_fail() {
        let row = ConstraintRow {
            expr: Expr::sub(Expr::var(0), Expr::Const(1.0)),
            kind: ConstraintKind::UpperIneq,
            label: "dup".into(),
        };
        let nlp = SingleLevelNLP {
            name: "dup".into(),
            var_names: vec!["y".into()],
            bounds: vec![FREE],
            objective: Expr::var(0),
            sense: Sense::Min,
            equalities: vec![],
            inequalities: vec![row.clone(), row],
            decision_dim: 1,
            center_hint: None,
            lower_lift: None,
        };
        let rep = licq_check(&nlp, &DVector::from_vec(vec![1.0]), 1e-6);
        assert!(!rep.holds);
        assert_eq!(rep.rank, 1);
        assert_eq!(rep.active_count, 2);
    }

    #[test]
    fn licq_holds_at_cc_solution() {
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        // (x, y) = (1, 3); stationarity gives mu_g1 = 4, everything else 0
        let point = DVector::from_vec(vec![1.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(nlp.primal_infeasibility(&point) <= 1e-12);
        let rep = licq_check(&nlp, &point, 1e-6);
        assert!(rep.holds, "{rep:?}");
        assert_eq!(rep.active_count, 1); // g1 is the only active lower inequality
    }

    #[test]
    fn nlp_listing_mentions_every_row() {
        let p = build_benchmark(BenchmarkName::Cc);
        let nlp = kkt_reformulate(&p, &KKTOptions::default()).unwrap();
        let listing = format!("{nlp}");
        for row in nlp.equalities.iter().chain(nlp.inequalities.iter()) {
            assert!(listing.contains(&row.label));
        }
    }
}
