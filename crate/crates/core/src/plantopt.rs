//! Plant-style harness: synthetic operating datasets shaped like thermal
//! power units, bi-level problems that maximize generated power subject to a
//! heat-rate-minimizing lower level, and tolerance sweeps of the validity
//! envelope.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{minmax_apply, DataMatrix};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::nlpsolver::{multistart_solve, SolutionReport, SolveStatus, SolverConfig};
use crate::problem::{BilevelProblem, Sense};
use crate::reformulate::{
    kkt_reformulate, mahalanobis_fit, stationarity_residual, KKTOptions, MahalanobisEnvelope,
};
use crate::surrogate::TrainedModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantVariable {
    pub name: String,
    pub unit: String,
    pub lo: f64,
    pub hi: f64,
}

/// Shape of a plant dataset: operating variables with physical bounds, the
/// subset the power model reads, and target column names.
#[derive(Debug, Clone)]
pub struct PlantSpec {
    pub name: String,
    pub variables: Vec<PlantVariable>,
    /// Indices of the variables the power model reads.
    pub upper_subset: Vec<usize>,
    /// Target correlation of the (scaled) inputs.
    pub correlation: DMatrix<f64>,
    pub power_column: String,
    pub thr_column: String,
    /// Thermal-efficiency column, present on gas-shaped data only.
    pub te_column: Option<String>,
}

impl PlantSpec {
    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn input_names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    pub fn subset_names(&self) -> Vec<String> {
        self.upper_subset.iter().map(|&i| self.variables[i].name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.correlation.nrows() != d || self.correlation.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.correlation.nrows() });
        }
        for v in &self.variables {
            if !(v.lo < v.hi) {
                return Err(Error::InvalidInput(format!("invalid bounds for `{}`", v.name)));
            }
        }
        for &i in &self.upper_subset {
            if i >= d {
                return Err(Error::InvalidInput(format!("subset index {i} out of range")));
            }
        }
        let eig = nalgebra::SymmetricEigen::new(self.correlation.clone());
        if eig.eigenvalues.min() <= 1e-10 {
            return Err(Error::Numerical("correlation matrix is not positive-definite".into()));
        }
        Ok(())
    }

    /// Eight-variable unit shaped like a large coal-fired block: fuel and
    /// steam flows, steam conditions, and condenser vacuum. The power model
    /// skips the reheat temperature and the vacuum.
    pub fn coal_like() -> PlantSpec {
        let variables = vec![
            PlantVariable { name: "coal_flow".into(), unit: "t/h".into(), lo: 150.0, hi: 320.0 },
            PlantVariable { name: "air_flow".into(), unit: "t/h".into(), lo: 1500.0, hi: 2800.0 },
            PlantVariable { name: "steam_pressure".into(), unit: "MPa".into(), lo: 11.0, hi: 26.0 },
            PlantVariable { name: "steam_temp".into(), unit: "degC".into(), lo: 520.0, hi: 575.0 },
            PlantVariable { name: "steam_flow".into(), unit: "t/h".into(), lo: 900.0, hi: 2000.0 },
            PlantVariable { name: "reheat_temp".into(), unit: "degC".into(), lo: 510.0, hi: 570.0 },
            PlantVariable { name: "feedwater_temp".into(), unit: "degC".into(), lo: 230.0, hi: 285.0 },
            PlantVariable { name: "condenser_vacuum".into(), unit: "kPa".into(), lo: 88.0, hi: 97.0 },
        ];
        PlantSpec {
            name: "coal-synth".into(),
            upper_subset: vec![0, 1, 2, 3, 4, 6],
            correlation: default_correlation(&[(0, 1), (0, 4), (1, 4)], &[(2, 3), (2, 4)], 8),
            power_column: "power_mw".into(),
            thr_column: "thr_kj_per_kwh".into(),
            te_column: None,
            variables,
        }
    }

    /// Nine-variable unit shaped like a gas turbine block; the power model
    /// skips the three downstream temperatures, and a thermal-efficiency
    /// target accompanies power and heat rate.
    pub fn gas_like() -> PlantSpec {
        let variables = vec![
            PlantVariable { name: "comp_discharge_pressure".into(), unit: "psi".into(), lo: 240.0, hi: 320.0 },
            PlantVariable { name: "fuel_flow".into(), unit: "lb/s".into(), lo: 30.0, hi: 52.0 },
            PlantVariable { name: "ambient_temp".into(), unit: "degF".into(), lo: 40.0, hi: 105.0 },
            PlantVariable { name: "ambient_pressure".into(), unit: "hPa".into(), lo: 975.0, hi: 1000.0 },
            PlantVariable { name: "ambient_humidity".into(), unit: "%".into(), lo: 20.0, hi: 95.0 },
            PlantVariable { name: "comp_discharge_temp".into(), unit: "degF".into(), lo: 740.0, hi: 880.0 },
            PlantVariable { name: "exhaust_gas_temp".into(), unit: "degC".into(), lo: 590.0, hi: 690.0 },
            PlantVariable { name: "fuel_gas_temp".into(), unit: "degF".into(), lo: 440.0, hi: 540.0 },
            PlantVariable { name: "heater_outlet_temp".into(), unit: "degF".into(), lo: 390.0, hi: 430.0 },
        ];
        PlantSpec {
            name: "gas-synth".into(),
            upper_subset: vec![0, 1, 2, 3, 4, 5],
            correlation: default_correlation(&[(0, 1), (0, 5), (1, 5)], &[(6, 7), (7, 8)], 9),
            power_column: "power_mw".into(),
            thr_column: "thr_kj_per_kwh".into(),
            te_column: Some("te_pct".into()),
            variables,
        }
    }
}

/// Block-structured correlation: strong pairs at 0.75, secondary pairs at
/// 0.5, everything else at 0.3.
fn default_correlation(strong: &[(usize, usize)], medium: &[(usize, usize)], d: usize) -> DMatrix<f64> {
    let mut c = DMatrix::from_element(d, d, 0.3);
    for (i, j) in medium {
        c[(*i, *j)] = 0.5;
        c[(*j, *i)] = 0.5;
    }
    for (i, j) in strong {
        c[(*i, *j)] = 0.75;
        c[(*j, *i)] = 0.75;
    }
    for i in 0..d {
        c[(i, i)] = 1.0;
    }
    c
}

/// Scaled-space synthetic responses. Power is a smooth increasing function
/// of the fuel-flow-like and pressure-like inputs; the heat rate is a valley
/// plus a sinusoidal ripple so the landscape has several troughs; thermal
/// efficiency is a smooth dome peaking inside the data cloud.
fn power_scaled(u: &DVector<f64>, subset: &[usize], lo: f64, hi: f64) -> f64 {
    let weights = [0.45, 0.1, 0.2, 0.1, 0.1, 0.05];
    let t: f64 = subset
        .iter()
        .enumerate()
        .map(|(k, &i)| weights.get(k).copied().unwrap_or(0.0) * u[i])
        .sum();
    let h = t * (1.2 - 0.2 * t);
    lo + (hi - lo) * h.clamp(0.0, 1.0)
}

fn thr_scaled(u: &DVector<f64>, base: f64) -> f64 {
    let d = u.len();
    let a = u[0];
    let b = u[2 % d];
    let c = u[4 % d];
    let last = u[d - 1];
    base + 420.0 * (a - 0.5 - 0.3 * (b - 0.5)).powi(2)
        + 120.0 * (last - 0.45).powi(2)
        + 45.0 * (4.7 * a).sin() * (3.9 * c).cos()
        + 60.0 * (u[d / 2] - 0.5).powi(2)
}

fn te_scaled(u: &DVector<f64>) -> f64 {
    let d = u.len() as f64;
    let q: f64 = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| {
            let center = 0.35 + 0.3 * (i as f64 / (d - 1.0));
            (ui - center).powi(2) / d
        })
        .sum();
    47.0 - 26.0 * q * 4.0
}

/// Generate `n` correlated samples within the spec's physical bounds, with
/// power / heat-rate (and optionally thermal-efficiency) target columns.
pub fn synth_plant_data(spec: &PlantSpec, n: usize, seed: u64) -> Result<DataMatrix> {
    spec.validate()?;
    let d = spec.dim();
    if n < 10 * d {
        return Err(Error::InvalidInput(format!("need at least {} rows, got {n}", 10 * d)));
    }
    let chol = nalgebra::Cholesky::new(spec.correlation.clone())
        .ok_or_else(|| Error::Numerical("correlation matrix is not positive-definite".into()))?;
    let l = chol.l();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_targets = 2 + spec.te_column.is_some() as usize;
    let mut values = DMatrix::zeros(n, d + n_targets);
    for row in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let corr = &l * z;
        // map N(0,1) marginals into [0,1] and truncate to the box
        let u = DVector::from_fn(d, |i, _| (0.5 + corr[i] / 6.0).clamp(0.0, 1.0));

        for i in 0..d {
            let v = &spec.variables[i];
            values[(row, i)] = v.lo + u[i] * (v.hi - v.lo);
        }
        let (power_lo, power_hi, thr_base) = match spec.te_column {
            None => (300.0, 660.0, 7320.0),
            Some(_) => (318.0, 408.0, 8000.0),
        };
        values[(row, d)] = power_scaled(&u, &spec.upper_subset, power_lo, power_hi);
        let noise: f64 = rng.sample(StandardNormal);
        let thr_clean = thr_scaled(&u, thr_base);
        values[(row, d + 1)] = thr_clean * (1.0 + 0.01 * noise);
        if spec.te_column.is_some() {
            let te_noise: f64 = rng.sample(StandardNormal);
            values[(row, d + 2)] = te_scaled(&u) + 0.05 * te_noise;
        }
    }

    let mut columns = spec.input_names();
    columns.push(spec.power_column.clone());
    columns.push(spec.thr_column.clone());
    if let Some(te) = &spec.te_column {
        columns.push(te.clone());
    }
    DataMatrix::new(columns, values)
}

/// Assemble the plant bi-level problem over the scaled joint vector:
/// maximize power over the shared subset while the lower level minimizes
/// heat rate inside the envelope and the unit boxes.
pub fn build_plant_bilevel(
    power: Arc<TrainedModel>,
    thr: Arc<TrainedModel>,
    envelope: MahalanobisEnvelope,
    spec: &PlantSpec,
) -> Result<BilevelProblem> {
    spec.validate()?;
    let d = spec.dim();
    if thr.feature_names() != spec.input_names() {
        return Err(Error::Schema("heat-rate model features do not match the plant spec".into()));
    }
    if power.feature_names() != spec.subset_names() {
        return Err(Error::Schema("power model features do not match the shared subset".into()));
    }
    if envelope.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: envelope.dim() });
    }

    let upper_inputs: Vec<Expr> = spec.upper_subset.iter().map(|&i| Expr::var(i)).collect();
    let lower_inputs: Vec<Expr> = (0..d).map(Expr::var).collect();
    // objectives enter the optimality system span-normalized so that
    // multipliers stay O(1) against the O(1) envelope and box rows; a
    // positive rescaling leaves the argmin and the KKT set unchanged, and
    // physical values are read off the models directly
    Ok(BilevelProblem {
        name: spec.name.clone(),
        var_names: spec.input_names(),
        upper_box: vec![],
        lower_box: vec![(0.0, 1.0); d],
        shared_map: spec.upper_subset.clone(),
        upper_objective: span_normalized(&power, Expr::surrogate(power.clone(), upper_inputs, true)),
        upper_sense: Sense::Max,
        upper_ineq: vec![],
        upper_eq: vec![],
        lower_objective: span_normalized(&thr, Expr::surrogate(thr.clone(), lower_inputs, true)),
        lower_ineq: vec![],
        lower_eq: vec![],
        lower_envelope: Some(envelope),
    })
}

fn span_normalized(model: &TrainedModel, expr: Expr) -> Expr {
    let c = &model.output_scaling.columns[0];
    let span = (c.max - c.min).abs();
    if span > 1e-12 {
        Expr::mul(Expr::Const(1.0 / span), expr)
    } else {
        expr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauSweepRow {
    pub percentile: f64,
    pub tau: f64,
    /// Heat rate at the solution, physical units.
    pub thr: f64,
    /// Power at the solution, physical units.
    pub power: f64,
    pub status: SolveStatus,
    pub cpu_seconds: f64,
    /// Stationarity residual re-evaluated at the returned point.
    pub stationarity_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TauSweepOutcome {
    pub rows: Vec<TauSweepRow>,
    /// Best report per percentile, aligned with `rows`.
    pub reports: Vec<SolutionReport>,
}

impl TauSweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("percentile,tau,thr,power,status,cpu_seconds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:?},{}\n",
                r.percentile, r.tau, r.thr, r.power, r.status, r.cpu_seconds
            ));
        }
        s
    }
}

/// For each percentile: refit the envelope, reformulate with smoothed box
/// complementarities, multistart-solve, and record heat rate and power in
/// physical units. Infeasible rows are recorded, not fatal.
pub fn tau_sweep(
    power: Arc<TrainedModel>,
    thr: Arc<TrainedModel>,
    data: &DataMatrix,
    spec: &PlantSpec,
    percentiles: &[f64],
    cfg: &SolverConfig,
) -> Result<TauSweepOutcome> {
    if percentiles.iter().any(|&p| !(p > 0.0 && p < 100.0)) {
        return Err(Error::InvalidInput("percentiles must lie in (0, 100)".into()));
    }
    let inputs = data.select(&spec.input_names())?;
    let scaled = minmax_apply(&thr.input_scaling, &inputs)?;

    let mut rows = Vec::with_capacity(percentiles.len());
    let mut reports = Vec::with_capacity(percentiles.len());
    for &p in percentiles {
        let envelope = mahalanobis_fit(&scaled, p)?;
        let tau = envelope.tau;
        let problem = build_plant_bilevel(power.clone(), thr.clone(), envelope, spec)?;
        let opts = KKTOptions { use_fb: true, ..Default::default() };
        let nlp = kkt_reformulate(&problem, &opts)?;
        let (best, _) = multistart_solve(&nlp, cfg)?;

        // physical values from the models at the solution's decision block
        let v = best.point_vector();
        let d = spec.dim();
        let y = DVector::from_fn(d, |i, _| v[i]);
        let y_subset = DVector::from_fn(spec.upper_subset.len(), |i, _| v[spec.upper_subset[i]]);
        let thr_value = thr.eval(&y, true)?;
        let power_value = power.eval(&y_subset, true)?;
        rows.push(TauSweepRow {
            percentile: p,
            tau,
            thr: thr_value,
            power: power_value,
            status: best.status,
            cpu_seconds: best.cpu_seconds,
            stationarity_residual: stationarity_residual(&nlp, &v),
        });
        reports.push(best);
    }
    Ok(TauSweepOutcome { rows, reports })
}
