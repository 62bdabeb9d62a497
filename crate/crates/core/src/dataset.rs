//! Tabular data handling: CSV ingestion, min-max scaling, seeded splits,
//! uniform sampling, and regression metrics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense sample matrix with named columns (row = sample).
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    columns: Vec<String>,
    values: DMatrix<f64>,
    /// Optional name of the column holding the regression target.
    pub target: Option<String>,
}

impl DataMatrix {
    pub fn new(columns: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Schema("data matrix must have at least one row".into()));
        }
        if columns.len() != values.ncols() {
            return Err(Error::Schema(format!(
                "{} column names for {} columns",
                columns.len(),
                values.ncols()
            )));
        }
        for (i, a) in columns.iter().enumerate() {
            if columns[i + 1..].contains(a) {
                return Err(Error::Schema(format!("duplicate column name `{a}`")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite value in data matrix".into()));
        }
        Ok(Self { columns, values, target: None })
    }

    pub fn with_target(mut self, target: &str) -> Result<Self> {
        self.column_index(target)?;
        self.target = Some(target.to_string());
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("no column named `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<DVector<f64>> {
        let idx = self.column_index(name)?;
        Ok(self.values.column(idx).into_owned())
    }

    /// New matrix holding the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<DataMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column_index(n))
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(self.nrows(), idx.len());
        for (j, &src) in idx.iter().enumerate() {
            out.set_column(j, &self.values.column(src));
        }
        DataMatrix::new(names.to_vec(), out)
    }

    fn take_rows(&self, rows: &[usize]) -> DataMatrix {
        let mut out = DMatrix::zeros(rows.len(), self.ncols());
        for (i, &r) in rows.iter().enumerate() {
            out.set_row(i, &self.values.row(r));
        }
        DataMatrix {
            columns: self.columns.clone(),
            values: out,
            target: self.target.clone(),
        }
    }

    /// Read a CSV file (UTF-8, comma separated, header row required).
    /// Missing or non-numeric cells are rejected.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<DataMatrix> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path.as_ref())?;
        let columns: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut data: Vec<f64> = Vec::new();
        let mut nrows = 0;
        for record in rdr.records() {
            let record = record?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Schema(format!(
                        "row {}, column `{}`: cannot parse `{}` as a number",
                        nrows + 1,
                        columns.get(j).map(String::as_str).unwrap_or("?"),
                        field
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Schema(format!(
                        "row {}, column `{}`: non-finite value",
                        nrows + 1,
                        columns[j]
                    )));
                }
                data.push(v);
            }
            nrows += 1;
        }
        if nrows == 0 {
            return Err(Error::Schema("CSV has no data rows".into()));
        }
        let values = DMatrix::from_row_slice(nrows, columns.len(), &data);
        DataMatrix::new(columns, values)
    }

    /// Write as CSV with shortest round-trip float formatting, so identical
    /// matrices serialize to identical bytes.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path.as_ref())?;
        wtr.write_record(&self.columns)?;
        for i in 0..self.nrows() {
            let row: Vec<String> = (0..self.ncols())
                .map(|j| format!("{}", self.values[(i, j)]))
                .collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-column min/max ranges fitted on a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub columns: Vec<ColumnScale>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ColumnScale {
    /// A column where max == min carries no information; it scales to 0.
    pub fn is_constant(&self) -> bool {
        self.max == self.min
    }

    pub fn apply(&self, v: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }
}

impl ScalingSpec {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Identity scaling ([0,1] -> [0,1]) for the given column names.
    pub fn identity(names: &[String]) -> ScalingSpec {
        ScalingSpec {
            columns: names
                .iter()
                .map(|n| ColumnScale { name: n.clone(), min: 0.0, max: 1.0 })
                .collect(),
        }
    }

    fn check_schema(&self, data: &DataMatrix) -> Result<()> {
        if data.columns() != self.names().as_slice() {
            return Err(Error::Schema(format!(
                "scaling spec columns {:?} do not match data columns {:?}",
                self.names(),
                data.columns()
            )));
        }
        Ok(())
    }

    /// Standalone JSON form: an object mapping column name to {min, max}.
    pub fn to_map_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for c in &self.columns {
            map.insert(
                c.name.clone(),
                serde_json::json!({ "min": c.min, "max": c.max }),
            );
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("serializable")
    }
}

/// Fit per-column min/max on `data`.
pub fn minmax_fit(data: &DataMatrix) -> Result<ScalingSpec> {
    let columns = data
        .columns()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = data.values().column(j);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ColumnScale { name: name.clone(), min, max }
        })
        .collect();
    Ok(ScalingSpec { columns })
}

/// Map every value to (v - min) / (max - min); constant columns map to 0.
pub fn minmax_apply(spec: &ScalingSpec, data: &DataMatrix) -> Result<DataMatrix> {
    spec.check_schema(data)?;
    let mut values = data.values().clone();
    for (j, cs) in spec.columns.iter().enumerate() {
        for i in 0..values.nrows() {
            values[(i, j)] = cs.apply(values[(i, j)]);
        }
    }
    let mut out = DataMatrix::new(data.columns().to_vec(), values)?;
    out.target = data.target.clone();
    Ok(out)
}

/// Map scaled values back to physical units: v_phys = min + v * (max - min).
/// Values slightly outside [0,1] are tolerated and extrapolated, not clamped.
pub fn minmax_invert(spec: &ScalingSpec, data: &DataMatrix) -> Result<DataMatrix> {
    spec.check_schema(data)?;
    let mut values = data.values().clone();
    for (j, cs) in spec.columns.iter().enumerate() {
        for i in 0..values.nrows() {
            values[(i, j)] = cs.invert(values[(i, j)]);
        }
    }
    let mut out = DataMatrix::new(data.columns().to_vec(), values)?;
    out.target = data.target.clone();
    Ok(out)
}

/// Fractions for a seeded train/validation/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        if !(train > 0.0 && train < 1.0) || validation < 0.0 || test < 0.0 {
            return Err(Error::InvalidInput(format!(
                "invalid split fractions {train}/{validation}/{test}"
            )));
        }
        if ((train + validation + test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "split fractions {train}/{validation}/{test} do not sum to 1"
            )));
        }
        Ok(SplitSpec { train_fraction: train, validation_fraction: validation, test_fraction: test, seed })
    }
}

/// Partition rows into disjoint train/validation/test sets via a seeded
/// shuffle. Validation and test sizes are round(fraction * rows); leftover
/// rows go to the training split.
pub fn split(data: &DataMatrix, spec: &SplitSpec) -> Result<(DataMatrix, DataMatrix, DataMatrix)> {
    SplitSpec::new(
        spec.train_fraction,
        spec.validation_fraction,
        spec.test_fraction,
        spec.seed,
    )?;
    let n = data.nrows();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 rows to split, got {n}")));
    }
    let n_val = (spec.validation_fraction * n as f64).round() as usize;
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    if n_val + n_test >= n {
        return Err(Error::InvalidInput("split leaves no training rows".into()));
    }
    let n_train = n - n_val - n_test;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }

    let train = data.take_rows(&indices[..n_train]);
    let validation = data.take_rows(&indices[n_train..n_train + n_val]);
    let test = data.take_rows(&indices[n_train + n_val..]);
    Ok((train, validation, test))
}

/// Draw `n` i.i.d. uniform samples within per-dimension bounds.
pub fn uniform_sample(
    bounds: &[(f64, f64)],
    names: &[String],
    n: usize,
    seed: u64,
) -> Result<DataMatrix> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    if bounds.len() != names.len() {
        return Err(Error::InvalidInput("bounds/names length mismatch".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput(format!("invalid bounds [{lo}, {hi}]")));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(n, bounds.len());
    for i in 0..n {
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            values[(i, j)] = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        }
    }
    DataMatrix::new(names.to_vec(), values)
}

/// Regression quality on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_squared: f64,
    pub rmse: f64,
}

/// Coefficient of determination: 1 - SS_res / SS_tot.
pub fn r_squared(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: yhat.len() });
    }
    if y.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 observations".into()));
    }
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidInput("target is constant; R^2 undefined".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Root-mean-squared error of predictions against observations.
pub fn rmse(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: yhat.len() });
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("need at least 1 observation".into()));
    }
    let ss: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

pub fn metrics(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<MetricsReport> {
    Ok(MetricsReport { r_squared: r_squared(y, yhat)?, rmse: rmse(y, yhat)? })
}
