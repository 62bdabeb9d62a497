//! Stability-radius robust optimization: pick a nominal operating point and
//! the largest perturbation radius such that the worst-case efficiency over
//! the radius ellipsoid stays above a target floor. The adversarial inner
//! minimization enters the single-level program through its first-order
//! system; because a non-convex adversary's stationary points need not be
//! global, every candidate is re-verified by an independent projected-
//! gradient adversary before it is accepted.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ScalingSpec;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::nlpsolver::{multistart_solve, SolveStatus, SolverConfig};
use crate::problem::Sense;
use crate::reformulate::{
    ConstraintKind, ConstraintRow, LiftSpec, MahalanobisEnvelope, SingleLevelNLP,
};
use crate::surrogate::TrainedModel;

#[derive(Debug, Clone)]
pub struct RobustProblem {
    /// Thermal-efficiency surrogate over scaled inputs.
    pub te_model: Arc<TrainedModel>,
    /// Design-validity envelope (typically the 95th percentile).
    pub envelope: MahalanobisEnvelope,
    /// Efficiency floor in the model's output units.
    pub te_target: f64,
    pub dim: usize,
}

impl RobustProblem {
    pub fn new(
        te_model: Arc<TrainedModel>,
        envelope: MahalanobisEnvelope,
        te_target: f64,
    ) -> Result<Self> {
        let dim = te_model.input_dim();
        if envelope.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: envelope.dim() });
        }
        let out = &te_model.output_scaling.columns[0];
        if !(te_target >= out.min && te_target <= out.max) {
            return Err(Error::InvalidInput(format!(
                "target {te_target} outside the model's observed output range [{}, {}]",
                out.min, out.max
            )));
        }
        Ok(Self { te_model, envelope, te_target, dim })
    }

    /// Covariance recovered from the envelope's inverse covariance.
    fn covariance(&self) -> Result<DMatrix<f64>> {
        nalgebra::Cholesky::new(self.envelope.inv_cov.as_ref().clone())
            .map(|ch| ch.inverse())
            .ok_or_else(|| Error::Numerical("inverse covariance not positive-definite".into()))
    }

    fn te_expr(&self, input_vars: Vec<Expr>) -> Expr {
        Expr::surrogate(self.te_model.clone(), input_vars, true)
    }

    /// TE prediction at a scaled point.
    pub fn te_at(&self, x: &DVector<f64>) -> Result<f64> {
        self.te_model.eval(x, true)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustSolution {
    pub x_nominal: Vec<f64>,
    pub rho: f64,
    /// Worst perturbation found by the independent adversary at (x, rho).
    pub delta_worst: Vec<f64>,
    pub lambda_adv: f64,
    pub te_nominal: f64,
    /// Worst-case efficiency certified by the independent adversary.
    pub te_worst: f64,
    pub te_target: f64,
    pub cpu_seconds: f64,
}

/// Variable layout of the reformulation:
/// [x_0..x_d, rho, delta_0..delta_d, lambda]  (2 dim + 2 variables).
pub fn robust_reformulate(rp: &RobustProblem) -> Result<SingleLevelNLP> {
    let d = rp.dim;
    let rho_idx = d;
    let delta0 = d + 1;
    let lambda_idx = 2 * d + 1;


    let cov = rp.covariance()?;
    let rho_max = 4.0 * rp.envelope.tau;

    let mut var_names: Vec<String> = rp.te_model.feature_names();
    var_names.push("rho".into());
    for f in rp.te_model.feature_names() {
        var_names.push(format!("delta_{f}"));
    }
    var_names.push("lambda_adv".into());

    let mut bounds = vec![(0.0, 1.0); d];
    bounds.push((0.0, rho_max));
    for i in 0..d {
        let spread = rho_max * cov[(i, i)].max(0.0).sqrt() * 1.1;
        bounds.push((-spread, spread));
    }
    bounds.push((0.0, f64::INFINITY));

    // f(x + delta) with scaled inputs
    let shifted: Vec<Expr> =
        (0..d).map(|i| Expr::add(Expr::var(i), Expr::var(delta0 + i))).collect();
    let te_shifted = rp.te_expr(shifted);

    let delta_quad = Expr::quad_form(
        DVector::zeros(d),
        rp.envelope.inv_cov.clone(),
        (delta0..delta0 + d).collect(),
    );
    let ellipsoid = Expr::sub(delta_quad.clone(), Expr::pow(Expr::var(rho_idx), 2));

    let mut equalities = Vec::new();
    for k in 0..d {
        let row = Expr::add(
            te_shifted.derivative(delta0 + k)?,
            Expr::mul(Expr::var(lambda_idx), delta_quad.derivative(delta0 + k)?),
        );
        equalities.push(ConstraintRow {
            expr: row,
            kind: ConstraintKind::Stationarity,
            label: format!("stationarity_{}", var_names[delta0 + k]),
        });
    }
    equalities.push(ConstraintRow {
        expr: Expr::mul(Expr::var(lambda_idx), ellipsoid.clone()),
        kind: ConstraintKind::ComplementarityProduct,
        label: "comp_ellipsoid".into(),
    });

    let design = rp.envelope.constraint_expr((0..d).collect());
    let floor = Expr::sub(Expr::Const(rp.te_target), te_shifted);
    let inequalities = vec![
        ConstraintRow { expr: ellipsoid, kind: ConstraintKind::LowerIneq, label: "ellipsoid".into() },
        ConstraintRow { expr: design, kind: ConstraintKind::EnvelopeIneq, label: "design_envelope".into() },
        ConstraintRow { expr: floor, kind: ConstraintKind::UpperIneq, label: "safety_floor".into() },
    ];

    // adversary presolve for start lifting: min f(x + delta) over delta with
    // x and rho pinned
    let mini = SingleLevelNLP {
        name: "adversary".into(),
        var_names: var_names.clone(),
        bounds: {
            let mut b = bounds.clone();
            b[lambda_idx] = (0.0, 0.0);
            b
        },
        objective: rp.te_expr(
            (0..d).map(|i| Expr::add(Expr::var(i), Expr::var(delta0 + i))).collect(),
        ),
        sense: Sense::Min,
        equalities: vec![],
        inequalities: vec![ConstraintRow {
            expr: Expr::sub(
                Expr::quad_form(
                    DVector::zeros(d),
                    rp.envelope.inv_cov.clone(),
                    (delta0..delta0 + d).collect(),
                ),
                Expr::pow(Expr::var(rho_idx), 2),
            ),
            kind: ConstraintKind::LowerIneq,
            label: "ellipsoid".into(),
        }],
        decision_dim: d + 1,
        center_hint: None,
        lower_lift: None,
    };
    let lift = LiftSpec {
        mini,
        pin_vars: (0..=d).collect(),
        lower_vars: (delta0..delta0 + d).collect(),
        ineq_multiplier_vars: vec![lambda_idx],
        eq_multiplier_vars: vec![],
        box_pairs: vec![],
        fb_epsilons: None,
    };

    let mut center = DVector::zeros(d + 1);
    for i in 0..d {
        center[i] = rp.envelope.mean[i];
    }
    center[d] = 0.25 * rp.envelope.tau;

    Ok(SingleLevelNLP {
        name: "stability-radius".into(),
        var_names,
        bounds,
        objective: Expr::var(rho_idx),
        sense: Sense::Max,
        equalities,
        inequalities,
        decision_dim: d + 1,
        center_hint: Some(center),
        lower_lift: Some(Box::new(lift)),
    })
}

/// Independent adversary: minimize f(x + delta) over the rho-ellipsoid by
/// projected gradient descent in whitened coordinates (where the ellipsoid
/// is a ball and radial scaling is the exact projection), from `starts`
/// seeded starting points. Returns (worst TE, worst delta).
pub fn adversary_resolve(
    model: &TrainedModel,
    cov_chol_l: &DMatrix<f64>,
    x: &DVector<f64>,
    rho: f64,
    starts: usize,
    seed: u64,
) -> Result<(f64, DVector<f64>)> {
    let d = x.len();
    if rho <= 0.0 {
        return Ok((model.eval(x, true)?, DVector::zeros(d)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut best_val = model.eval(x, true)?;
    let mut best_w: DVector<f64> = DVector::zeros(d);

    for s in 0..starts {
        // radius pattern: on the boundary, halfway in, and at the center
        let radius = match s % 3 {
            0 => rho,
            1 => 0.5 * rho,
            _ => 0.0,
        };
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut w = if g.norm() > 0.0 { &g * (radius / g.norm()) } else { g };

        for _ in 0..400 {
            let delta = cov_chol_l * &w;
            let point = x + &delta;
            let grad_w = cov_chol_l.transpose() * model.gradient(&point, true)?;
            let val = model.eval(&point, true)?;

            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let mut trial = &w - &grad_w * alpha;
                let norm = trial.norm();
                if norm > rho {
                    trial *= rho / norm;
                }
                let step = &trial - &w;
                if step.amax() <= 1e-14 {
                    break;
                }
                let tval = model.eval(&(x + cov_chol_l * &trial), true)?;
                if tval <= val + 1e-4 * grad_w.dot(&step) {
                    w = trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let val = model.eval(&(x + cov_chol_l * &w), true)?;
        if val < best_val {
            best_val = val;
            best_w = w;
        }
    }
    Ok((best_val, cov_chol_l * best_w))
}

const ADVERSARY_STARTS: usize = 32;

/// Solve the stability-radius problem. Multistart candidates are accepted
/// only after the independent adversary confirms the worst case at their
/// (x, rho) stays above the floor; if no candidate survives, the radius is
/// bisected at the best nominal point found by a direct nominal solve.
pub fn solve_robust(rp: &RobustProblem, cfg: &SolverConfig) -> Result<RobustSolution> {
    let t0 = std::time::Instant::now();
    let d = rp.dim;
    let cov = rp.covariance()?;
    let chol_l: DMatrix<f64> = nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Numerical("covariance not positive-definite".into()))?
        .l();

    // nominal probe: max f(x) inside the design envelope
    let (max_te, x_best) = nominal_max(rp, cfg)?;
    if max_te < rp.te_target - cfg.feasibility_tol {
        return Err(Error::Infeasible(format!(
            "target {} exceeds the best attainable efficiency {:.4} inside the envelope",
            rp.te_target, max_te
        )));
    }

    let nlp = robust_reformulate(rp)?;
    let (_, reports) = multistart_solve(&nlp, cfg)?;

    let mut candidates: Vec<_> =
        reports.into_iter().filter(|r| r.status == SolveStatus::Optimal).collect();
    candidates.sort_by(|a, b| b.objective.partial_cmp(&a.objective).unwrap());

    for rep in &candidates {
        let x = DVector::from_fn(d, |i, _| rep.point[i]);
        let rho = rep.point[d];
        let (te_worst, delta_worst) =
            adversary_resolve(&rp.te_model, &chol_l, &x, rho, ADVERSARY_STARTS, cfg.seed)?;
        if te_worst >= rp.te_target - cfg.feasibility_tol {
            return Ok(RobustSolution {
                x_nominal: x.iter().cloned().collect(),
                rho,
                delta_worst: delta_worst.iter().cloned().collect(),
                lambda_adv: rep.point[2 * d + 1],
                te_nominal: rp.te_at(&x)?,
                te_worst,
                te_target: rp.te_target,
                cpu_seconds: round_ms(t0.elapsed().as_secs_f64()),
            });
        }
    }

    // fallback: largest verified radius at the nominal optimum
    let verify = |rho: f64| -> Result<(bool, f64, DVector<f64>)> {
        let (te, delta) =
            adversary_resolve(&rp.te_model, &chol_l, &x_best, rho, ADVERSARY_STARTS, cfg.seed)?;
        Ok((te >= rp.te_target - cfg.feasibility_tol, te, delta))
    };
    let (mut lo, mut hi) = (0.0f64, 4.0 * rp.envelope.tau);
    if verify(hi)?.0 {
        lo = hi;
    } else {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if verify(mid)?.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (_, te_worst, delta_worst) = verify(lo)?;
    Ok(RobustSolution {
        x_nominal: x_best.iter().cloned().collect(),
        rho: lo,
        delta_worst: delta_worst.iter().cloned().collect(),
        lambda_adv: 0.0,
        te_nominal: rp.te_at(&x_best)?,
        te_worst,
        te_target: rp.te_target,
        cpu_seconds: round_ms(t0.elapsed().as_secs_f64()),
    })
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Maximize the nominal efficiency inside the design envelope and box.
fn nominal_max(rp: &RobustProblem, cfg: &SolverConfig) -> Result<(f64, DVector<f64>)> {
    let d = rp.dim;
    let nlp = SingleLevelNLP {
        name: "nominal-te".into(),
        var_names: rp.te_model.feature_names(),
        bounds: vec![(0.0, 1.0); d],
        objective: rp.te_expr((0..d).map(Expr::var).collect()),
        sense: Sense::Max,
        equalities: vec![],
        inequalities: vec![ConstraintRow {
            expr: rp.envelope.constraint_expr((0..d).collect()),
            kind: ConstraintKind::EnvelopeIneq,
            label: "design_envelope".into(),
        }],
        decision_dim: d,
        center_hint: Some(rp.envelope.mean.clone()),
        lower_lift: None,
    };
    let (best, _) = multistart_solve(&nlp, cfg)?;
    Ok((best.objective, best.point_vector()))
}

/// Sweep targets from strictest to loosest, carrying each verified solution
/// forward as a candidate for the looser targets; this keeps the reported
/// radius honestly monotone (a stricter solution is feasible for any looser
/// floor). Results return in the input order.
pub fn robust_sweep(
    te_model: Arc<TrainedModel>,
    envelope: &MahalanobisEnvelope,
    targets: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<(f64, Result<RobustSolution>)>> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[b].partial_cmp(&targets[a]).unwrap());

    let mut results: Vec<Option<Result<RobustSolution>>> = (0..targets.len()).map(|_| None).collect();
    let mut carried: Option<RobustSolution> = None;
    for &idx in &order {
        let target = targets[idx];
        let outcome = RobustProblem::new(te_model.clone(), envelope.clone(), target)
            .and_then(|rp| solve_robust(&rp, cfg));
        let outcome = match (outcome, &carried) {
            (Ok(sol), Some(prev)) if prev.te_worst >= target - cfg.feasibility_tol => {
                // a stricter verified solution dominates if its radius is larger
                if prev.rho > sol.rho {
                    Ok(RobustSolution { te_target: target, ..prev.clone() })
                } else {
                    Ok(sol)
                }
            }
            (res, _) => res,
        };
        if let Ok(sol) = &outcome {
            carried = Some(sol.clone());
        }
        results[idx] = Some(outcome);
    }
    Ok(targets
        .iter()
        .cloned()
        .zip(results.into_iter().map(|r| r.expect("filled")))
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationStudy {
    pub samples_total: usize,
    pub samples_kept: usize,
    pub te_mean: f64,
    pub te_min: f64,
    pub te_max: f64,
    /// Fraction of kept samples at or above the target floor.
    pub frac_above_target: f64,
    /// Kept TE values, for histogram plotting.
    pub te_values: Vec<f64>,
    /// Per-variable [nominal, nominal + worst delta] in physical units.
    pub ranges: Vec<OperatingRange>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingRange {
    pub name: String,
    pub nominal: f64,
    pub worst: f64,
}

/// Sample perturbations uniformly in radius within the solution's
/// rho-ellipsoid (directions follow the data's correlation structure),
/// discard points outside the filter-percentile envelope, and summarize the
/// efficiency over what remains.
pub fn perturbation_study(
    sol: &RobustSolution,
    rp: &RobustProblem,
    n: usize,
    filter_percentile: f64,
    seed: u64,
) -> Result<PerturbationStudy> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let d = rp.dim;
    let x = DVector::from_vec(sol.x_nominal.clone());
    let cov = rp.covariance()?;
    let chol_l = nalgebra::Cholesky::new(cov)
        .ok_or_else(|| Error::Numerical("covariance not positive-definite".into()))?
        .l();
    let tau_filter = rp.envelope.tau_for_percentile(filter_percentile)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut te_values = Vec::new();
    for _ in 0..n {
        let delta = if sol.rho == 0.0 {
            DVector::zeros(d)
        } else {
            let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r: f64 = rng.gen_range(0.0..sol.rho);
            let norm = g.norm();
            if norm == 0.0 {
                DVector::zeros(d)
            } else {
                &chol_l * (g * (r / norm))
            }
        };
        let point = &x + &delta;
        let dist = rp.envelope.distance_sq(&point)?.max(0.0).sqrt();
        if dist <= tau_filter {
            te_values.push(rp.te_at(&point)?);
        }
    }
    if te_values.is_empty() {
        return Err(Error::Numerical(format!(
            "all {n} perturbation samples fell outside the {filter_percentile}th-percentile envelope"
        )));
    }

    // centered summation: exact when every sample coincides (rho = 0)
    let te_mean = te_values[0]
        + te_values.iter().map(|t| t - te_values[0]).sum::<f64>() / te_values.len() as f64;
    let te_min = te_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let te_max = te_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let above =
        te_values.iter().filter(|&&t| t >= sol.te_target).count() as f64 / te_values.len() as f64;
    Ok(PerturbationStudy {
        samples_total: n,
        samples_kept: te_values.len(),
        te_mean,
        te_min,
        te_max,
        frac_above_target: above,
        ranges: operating_ranges(sol, &rp.te_model.input_scaling)?,
        te_values,
    })
}

/// Physical-unit operating ranges [nominal, nominal + worst delta] per
/// variable. The second entry sits below the first wherever the worst
/// perturbation points downward.
pub fn operating_ranges(sol: &RobustSolution, scaling: &ScalingSpec) -> Result<Vec<OperatingRange>> {
    if scaling.dim() != sol.x_nominal.len() {
        return Err(Error::DimensionMismatch {
            expected: sol.x_nominal.len(),
            got: scaling.dim(),
        });
    }
    Ok(scaling
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| OperatingRange {
            name: c.name.clone(),
            nominal: c.invert(sol.x_nominal[i]),
            worst: c.invert(sol.x_nominal[i] + sol.delta_worst[i]),
        })
        .collect())
}
