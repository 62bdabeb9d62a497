//! Bi-level problem containers, the three literature benchmarks, surrogate
//! variants of their objectives, JSON problem files, and a brute-force
//! grid oracle used as independent ground truth at desk scale.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{parse_prefix, Expr};
use crate::surrogate::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Min,
    Max,
}

impl Sense {
    /// Multiplier turning the objective into a minimization.
    pub fn direction(self) -> f64 {
        match self {
            Sense::Min => 1.0,
            Sense::Max => -1.0,
        }
    }
}

/// A bi-level problem over one joint variable vector laid out as
/// [upper-only vars, lower vars]. Upper variables shared with the lower
/// level are represented inside the lower block; `shared_map` lists the
/// lower-block indices the upper objective reads.
#[derive(Debug, Clone)]
pub struct BilevelProblem {
    pub name: String,
    /// Joint variable names, upper-only block first.
    pub var_names: Vec<String>,
    pub upper_box: Vec<(f64, f64)>,
    pub lower_box: Vec<(f64, f64)>,
    /// Lower-block indices (0-based within the lower block) that the upper
    /// objective reads.
    pub shared_map: Vec<usize>,
    pub upper_objective: Expr,
    pub upper_sense: Sense,
    /// G(x, y) <= 0
    pub upper_ineq: Vec<Expr>,
    /// H(x, y) = 0
    pub upper_eq: Vec<Expr>,
    pub lower_objective: Expr,
    /// g(x, y) <= 0
    pub lower_ineq: Vec<Expr>,
    /// h(x, y) = 0
    pub lower_eq: Vec<Expr>,
    /// Validity envelope over the lower block; one more lower inequality
    /// (distance^2 <= tau^2) that the reformulation keeps explicit rather
    /// than smoothing.
    pub lower_envelope: Option<crate::reformulate::MahalanobisEnvelope>,
}

impl BilevelProblem {
    pub fn n_upper(&self) -> usize {
        self.upper_box.len()
    }

    pub fn n_lower(&self) -> usize {
        self.lower_box.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_upper() + self.n_lower()
    }

    /// Joint index of lower-block variable `k`.
    pub fn lower_index(&self, k: usize) -> usize {
        self.n_upper() + k
    }

    pub fn joint_bounds(&self) -> Vec<(f64, f64)> {
        self.upper_box.iter().chain(self.lower_box.iter()).cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.var_names.len() != self.n_total() {
            return Err(Error::Schema("variable name count does not match boxes".into()));
        }
        for &(lo, hi) in self.joint_bounds().iter() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidInput(format!("invalid box [{lo}, {hi}]")));
            }
        }
        for &s in &self.shared_map {
            if s >= self.n_lower() {
                return Err(Error::Schema(format!("shared_map index {s} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkName {
    /// Convex upper and lower: quadratic tracking objective with linear
    /// coupling constraints.
    Cc,
    /// Convex upper, non-convex (indefinite) lower.
    Cnc,
    /// Non-convex at both levels with a degenerate lower constraint.
    Ncnc,
}

impl std::str::FromStr for BenchmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(BenchmarkName::Cc),
            "cnc" => Ok(BenchmarkName::Cnc),
            "ncnc" => Ok(BenchmarkName::Ncnc),
            other => Err(Error::InvalidInput(format!("unknown benchmark `{other}`"))),
        }
    }
}

/// Build one of the analytic benchmark problems. Variables are named
/// `x` (upper) and `y` (lower) in every case.
pub fn build_benchmark(name: BenchmarkName) -> BilevelProblem {
    let x = Expr::var(0);
    let y = Expr::var(1);
    match name {
        // min (x-3)^2 + (y-2)^2, x in [0,8]
        // s.t. y solves: min (y-5)^2
        //      -2x + y - 1 <= 0, x - 2y <= 0, x + 2y - 14 <= 0, y in [0,6]
        BenchmarkName::Cc => BilevelProblem {
            name: "cc".into(),
            var_names: vec!["x".into(), "y".into()],
            upper_box: vec![(0.0, 8.0)],
            lower_box: vec![(0.0, 6.0)],
            shared_map: vec![0],
            upper_objective: Expr::add(
                Expr::pow(Expr::sub(x.clone(), Expr::Const(3.0)), 2),
                Expr::pow(Expr::sub(y.clone(), Expr::Const(2.0)), 2),
            ),
            upper_sense: Sense::Min,
            upper_ineq: vec![],
            upper_eq: vec![],
            lower_objective: Expr::pow(Expr::sub(y.clone(), Expr::Const(5.0)), 2),
            lower_ineq: vec![
                Expr::affine(-1.0, &[(-2.0, 0), (1.0, 1)]),
                Expr::affine(0.0, &[(1.0, 0), (-2.0, 1)]),
                Expr::affine(-14.0, &[(1.0, 0), (2.0, 1)]),
            ],
            lower_eq: vec![],
            lower_envelope: None,
        },
        // min (x-1)^2 + y^2, x in [0,2]
        // s.t. y solves: min -y^2 + xy, y in [0,1]
        BenchmarkName::Cnc => BilevelProblem {
            name: "cnc".into(),
            var_names: vec!["x".into(), "y".into()],
            upper_box: vec![(0.0, 2.0)],
            lower_box: vec![(0.0, 1.0)],
            shared_map: vec![0],
            upper_objective: Expr::add(
                Expr::pow(Expr::sub(x.clone(), Expr::Const(1.0)), 2),
                Expr::pow(y.clone(), 2),
            ),
            upper_sense: Sense::Min,
            upper_ineq: vec![],
            upper_eq: vec![],
            lower_objective: Expr::add(
                Expr::neg(Expr::pow(y.clone(), 2)),
                Expr::mul(x.clone(), y.clone()),
            ),
            lower_ineq: vec![],
            lower_eq: vec![],
            lower_envelope: None,
        },
        // min x^2, 1 + x - 9x^2 - y <= 0, x in [-1,1]
        // s.t. y solves: min y, y^2 (x - 0.5) <= 0, y in [-1,1]
        BenchmarkName::Ncnc => BilevelProblem {
            name: "ncnc".into(),
            var_names: vec!["x".into(), "y".into()],
            upper_box: vec![(-1.0, 1.0)],
            lower_box: vec![(-1.0, 1.0)],
            shared_map: vec![0],
            upper_objective: Expr::pow(x.clone(), 2),
            upper_sense: Sense::Min,
            upper_ineq: vec![Expr::sub(
                Expr::affine(1.0, &[(1.0, 0), (-1.0, 1)]),
                Expr::mul(Expr::Const(9.0), Expr::pow(x.clone(), 2)),
            )],
            upper_eq: vec![],
            lower_objective: y.clone(),
            lower_ineq: vec![Expr::mul(
                Expr::pow(y.clone(), 2),
                Expr::sub(x.clone(), Expr::Const(0.5)),
            )],
            lower_eq: vec![],
            lower_envelope: None,
        },
    }
}

/// Replace both objectives with trained surrogates; constraints stay
/// analytic. Model feature names are matched against the problem's
/// variable names, so a model may read any subset of the joint vector.
pub fn ann_variant(
    problem: &BilevelProblem,
    upper_model: Arc<TrainedModel>,
    lower_model: Arc<TrainedModel>,
) -> Result<BilevelProblem> {
    let mut out = problem.clone();
    out.name = format!("{}-ann", problem.name);
    out.upper_objective = surrogate_over_vars(&out, upper_model)?;
    out.lower_objective = surrogate_over_vars(&out, lower_model)?;
    Ok(out)
}

fn surrogate_over_vars(problem: &BilevelProblem, model: Arc<TrainedModel>) -> Result<Expr> {
    let inputs: Vec<Expr> = model
        .feature_names()
        .iter()
        .map(|f| {
            problem.var_names.iter().position(|v| v == f).map(Expr::Var).ok_or_else(|| {
                Error::Schema(format!("model feature `{f}` is not a problem variable"))
            })
        })
        .collect::<Result<_>>()?;
    Ok(Expr::surrogate(model, inputs, false))
}

/// Ground-truth solution from grid enumeration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub objective: f64,
    pub grid_resolution: usize,
}

const ORACLE_FEAS_TOL: f64 = 1e-9;

/// Enumerate the bi-level problem on a grid with `resolution` points per
/// dimension. For every upper point the lower level is solved globally by
/// enumeration; ties among lower optima break in the leader's favor.
/// Limited to two total decision dimensions.
pub fn brute_force_bilevel_oracle(
    problem: &BilevelProblem,
    resolution: usize,
) -> Result<OracleSolution> {
    problem.validate()?;
    if resolution < 100 {
        return Err(Error::InvalidInput("oracle resolution must be >= 100".into()));
    }
    if problem.n_total() > 2 {
        return Err(Error::InvalidInput(
            "grid oracle supports at most two total decision variables".into(),
        ));
    }

    let lower_grids: Vec<Vec<f64>> =
        problem.lower_box.iter().map(|&b| grid_points(b, resolution)).collect();
    let upper_grids: Vec<Vec<f64>> =
        problem.upper_box.iter().map(|&b| grid_points(b, resolution)).collect();

    let upper_points = cartesian(&upper_grids);
    let dir = problem.upper_sense.direction();

    let best = upper_points
        .par_iter()
        .map(|xu| best_lower_for_upper(problem, xu, &lower_grids, dir))
        .reduce(
            || None,
            |a, b| match (a, b) {
                (None, b) => b,
                (a, None) => a,
                (Some(a), Some(b)) => Some(if b.0 < a.0 { b } else { a }),
            },
        );

    match best {
        Some((signed, xu, yv)) => Ok(OracleSolution {
            x_star: xu,
            y_star: yv,
            objective: signed * dir,
            grid_resolution: resolution,
        }),
        None => Err(Error::Infeasible("oracle found no feasible point on the grid".into())),
    }
}

/// For a fixed upper point: globally solve the lower level on the grid,
/// break ties optimistically, check upper feasibility, and return the
/// sense-corrected upper objective.
fn best_lower_for_upper(
    problem: &BilevelProblem,
    xu: &[f64],
    lower_grids: &[Vec<f64>],
    dir: f64,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let n = problem.n_total();
    let mut v = DVector::zeros(n);
    for (i, &x) in xu.iter().enumerate() {
        v[i] = x;
    }

    let lower_points = cartesian(lower_grids);
    let mut f_min = f64::INFINITY;
    let mut ties: Vec<Vec<f64>> = Vec::new();
    for yv in &lower_points {
        for (k, &y) in yv.iter().enumerate() {
            v[problem.lower_index(k)] = y;
        }
        let mut feasible = problem.lower_ineq.iter().all(|g| g.eval(&v) <= ORACLE_FEAS_TOL)
            && problem.lower_eq.iter().all(|h| h.eval(&v).abs() <= ORACLE_FEAS_TOL);
        if feasible {
            if let Some(env) = &problem.lower_envelope {
                let y = DVector::from_vec(yv.clone());
                feasible = env.distance_sq(&y).map_or(false, |d| {
                    d - env.tau * env.tau <= ORACLE_FEAS_TOL
                });
            }
        }
        if !feasible {
            continue;
        }
        let f = problem.lower_objective.eval(&v);
        if !f.is_finite() {
            continue;
        }
        if f < f_min - ORACLE_FEAS_TOL {
            f_min = f;
            ties.clear();
            ties.push(yv.clone());
        } else if (f - f_min).abs() <= ORACLE_FEAS_TOL {
            ties.push(yv.clone());
        }
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for yv in ties {
        for (k, &y) in yv.iter().enumerate() {
            v[problem.lower_index(k)] = y;
        }
        let upper_ok = problem.upper_ineq.iter().all(|g| g.eval(&v) <= ORACLE_FEAS_TOL)
            && problem.upper_eq.iter().all(|h| h.eval(&v).abs() <= ORACLE_FEAS_TOL);
        if !upper_ok {
            continue;
        }
        let f_signed = dir * problem.upper_objective.eval(&v);
        if !f_signed.is_finite() {
            continue;
        }
        if best.as_ref().map_or(true, |(b, _)| f_signed < *b) {
            best = Some((f_signed, yv));
        }
    }
    best.map(|(f, yv)| (f, xu.to_vec(), yv))
}

fn grid_points((lo, hi): (f64, f64), resolution: usize) -> Vec<f64> {
    if lo == hi {
        return vec![lo];
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    (0..resolution).map(|i| lo + step * i as f64).collect()
}

fn cartesian(grids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match grids.len() {
        0 => vec![vec![]],
        1 => grids[0].iter().map(|&a| vec![a]).collect(),
        _ => {
            let rest = cartesian(&grids[1..]);
            grids[0]
                .iter()
                .flat_map(|&a| {
                    rest.iter().map(move |r| {
                        let mut p = Vec::with_capacity(grids.len());
                        p.push(a);
                        p.extend_from_slice(r);
                        p
                    })
                })
                .collect()
        }
    }
}

/// JSON description of a custom problem: variables with boxes and
/// prefix-notation expression strings, plus optional model references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub name: String,
    pub upper_vars: Vec<VarSpec>,
    pub lower_vars: Vec<VarSpec>,
    #[serde(default = "default_sense")]
    pub upper_sense: Sense,
    pub upper_objective: String,
    #[serde(default)]
    pub upper_inequalities: Vec<String>,
    #[serde(default)]
    pub upper_equalities: Vec<String>,
    pub lower_objective: String,
    #[serde(default)]
    pub lower_inequalities: Vec<String>,
    #[serde(default)]
    pub lower_equalities: Vec<String>,
    /// model name -> model JSON path (relative paths resolve against the
    /// problem file's directory)
    #[serde(default)]
    pub models: HashMap<String, String>,
}

fn default_sense() -> Sense {
    Sense::Min
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// Load a problem description from a JSON file.
pub fn load_problem_file(path: impl AsRef<Path>) -> Result<BilevelProblem> {
    let path = path.as_ref();
    let file: ProblemFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut models = HashMap::new();
    for (name, rel) in &file.models {
        let model_path = base.join(rel);
        models.insert(name.clone(), Arc::new(TrainedModel::load(&model_path)?));
    }

    let var_names: Vec<String> = file
        .upper_vars
        .iter()
        .chain(file.lower_vars.iter())
        .map(|v| v.name.clone())
        .collect();
    let parse = |text: &str| parse_prefix(text, &var_names, &models);

    let upper_objective = parse(&file.upper_objective)?;
    let n_upper = file.upper_vars.len();
    let mut used = BTreeSet::new();
    collect_vars(&upper_objective, &mut used);
    let shared_map: Vec<usize> =
        used.into_iter().filter(|&i| i >= n_upper).map(|i| i - n_upper).collect();

    let upper_ineq = file.upper_inequalities.iter().map(|s| parse(s)).collect::<Result<_>>()?;
    let upper_eq = file.upper_equalities.iter().map(|s| parse(s)).collect::<Result<_>>()?;
    let lower_objective = parse(&file.lower_objective)?;
    let lower_ineq = file.lower_inequalities.iter().map(|s| parse(s)).collect::<Result<_>>()?;
    let lower_eq = file.lower_equalities.iter().map(|s| parse(s)).collect::<Result<_>>()?;

    let problem = BilevelProblem {
        name: file.name.clone(),
        var_names,
        upper_box: file.upper_vars.iter().map(|v| (v.lo, v.hi)).collect(),
        lower_box: file.lower_vars.iter().map(|v| (v.lo, v.hi)).collect(),
        shared_map,
        upper_objective,
        upper_sense: file.upper_sense,
        upper_ineq,
        upper_eq,
        lower_objective,
        lower_ineq,
        lower_eq,
        lower_envelope: None,
    };
    problem.validate()?;
    Ok(problem)
}

pub(crate) fn collect_vars(e: &Expr, out: &mut BTreeSet<usize>) {
    match e {
        Expr::Const(_) => {}
        Expr::Var(i) => {
            out.insert(*i);
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
        Expr::Pow(a, _) | Expr::Sqrt(a) => collect_vars(a, out),
        Expr::Surrogate { inputs, .. } | Expr::SurrogateDeriv { inputs, .. } => {
            for i in inputs {
                collect_vars(i, out);
            }
        }
        Expr::QuadForm { inputs, .. } => {
            for &i in inputs {
                out.insert(i);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn eval_at(p: &BilevelProblem, x: f64, y: f64) -> (f64, f64, Vec<f64>) {
        let v = DVector::from_vec(vec![x, y]);
        (
            p.upper_objective.eval(&v),
            p.lower_objective.eval(&v),
            p.lower_ineq.iter().map(|g| g.eval(&v)).collect(),
        )
    }

    #[test]
    fn cc_benchmark_at_reported_solution() {
        let p = build_benchmark(BenchmarkName::Cc);
        let (f_up, f_lo, gs) = eval_at(&p, 1.0, 3.0);
        assert_abs_diff_eq!(f_up, 5.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f_lo, 4.0, epsilon = 1e-14);
        assert!(gs.iter().all(|&g| g <= 0.0), "constraints {gs:?}");
    }

    #[test]
    fn cnc_benchmark_at_reported_solution() {
        let p = build_benchmark(BenchmarkName::Cnc);
        let (f_up, f_lo, _) = eval_at(&p, 1.0, 0.0);
        assert_abs_diff_eq!(f_up, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f_lo, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn ncnc_benchmark_at_reported_solution() {
        let p = build_benchmark(BenchmarkName::Ncnc);
        let (f_up, _, gs) = eval_at(&p, -0.4191, -1.0);
        assert_abs_diff_eq!(f_up, 0.1756, epsilon = 5e-4);
        assert_abs_diff_eq!(gs[0], -0.9191, epsilon = 1e-4);
        assert!(gs[0] <= 0.0);
    }

    #[test]
    fn unknown_benchmark_name_rejected() {
        assert!("nope".parse::<BenchmarkName>().is_err());
    }

    #[test]
    fn oracle_cc_matches_reported_solution() {
        let p = build_benchmark(BenchmarkName::Cc);
        let sol = brute_force_bilevel_oracle(&p, 2001).unwrap();
        assert_abs_diff_eq!(sol.objective, 5.0, epsilon = 0.01);
        assert_abs_diff_eq!(sol.x_star[0], 1.0, epsilon = 0.01);
        assert_abs_diff_eq!(sol.y_star[0], 3.0, epsilon = 0.01);
    }

    #[test]
    fn oracle_cnc_breaks_ties_optimistically() {
        let p = build_benchmark(BenchmarkName::Cnc);
        let sol = brute_force_bilevel_oracle(&p, 2001).unwrap();
        assert!(sol.objective <= 0.001, "objective {}", sol.objective);
        assert_abs_diff_eq!(sol.x_star[0], 1.0, epsilon = 0.01);
        // at x = 1 both y = 0 and y = 1 solve the lower level; the
        // leader-preferred tie is y = 0
        assert_eq!(sol.y_star[0], 0.0);
    }

    #[test]
    fn oracle_ncnc_finds_constrained_branch() {
        let p = build_benchmark(BenchmarkName::Ncnc);
        let sol = brute_force_bilevel_oracle(&p, 2001).unwrap();
        // closed form: x* = (1 - sqrt(73)) / 18
        let x_closed = (1.0 - 73.0f64.sqrt()) / 18.0;
        assert_abs_diff_eq!(sol.x_star[0], x_closed, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.objective, 0.1756, epsilon = 1e-3);
        assert_eq!(sol.y_star[0], -1.0);
    }

    #[test]
    fn oracle_lower_component_is_lower_optimal() {
        // re-verify post hoc: no feasible grid y strictly improves the lower
        // objective at the returned upper point
        for name in [BenchmarkName::Cc, BenchmarkName::Cnc, BenchmarkName::Ncnc] {
            let p = build_benchmark(name);
            let sol = brute_force_bilevel_oracle(&p, 501).unwrap();
            let mut v = DVector::from_vec(vec![sol.x_star[0], sol.y_star[0]]);
            let f_star = p.lower_objective.eval(&v);
            let (lo, hi) = p.lower_box[0];
            for i in 0..501 {
                let y = lo + (hi - lo) * i as f64 / 500.0;
                v[1] = y;
                let feas = p.lower_ineq.iter().all(|g| g.eval(&v) <= ORACLE_FEAS_TOL);
                if feas {
                    assert!(
                        p.lower_objective.eval(&v) >= f_star - 1e-9,
                        "{name:?}: y={y} beats the oracle's lower point"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_rejects_big_problems_and_low_resolution() {
        let p = build_benchmark(BenchmarkName::Cc);
        assert!(brute_force_bilevel_oracle(&p, 50).is_err());
        let mut big = p.clone();
        big.var_names.push("z".into());
        big.lower_box.push((0.0, 1.0));
        assert!(brute_force_bilevel_oracle(&big, 500).is_err());
    }

    #[test]
    fn problem_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let text = serde_json::json!({
            "name": "toy",
            "upper_vars": [{"name": "x", "lo": 0.0, "hi": 8.0}],
            "lower_vars": [{"name": "y", "lo": 0.0, "hi": 6.0}],
            "upper_objective": "(+ (^ (- x 3) 2) (^ (- y 2) 2))",
            "lower_objective": "(^ (- y 5) 2)",
            "lower_inequalities": ["(- (+ (* -2 x) y) 1)"]
        });
        std::fs::write(&path, serde_json::to_string_pretty(&text).unwrap()).unwrap();
        let p = load_problem_file(&path).unwrap();
        assert_eq!(p.n_upper(), 1);
        assert_eq!(p.n_lower(), 1);
        assert_eq!(p.shared_map, vec![0]); // upper objective reads y
        let v = DVector::from_vec(vec![1.0, 3.0]);
        assert_abs_diff_eq!(p.upper_objective.eval(&v), 5.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.lower_ineq[0].eval(&v), 0.0, epsilon = 1e-14);
    }
}
