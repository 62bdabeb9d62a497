//! Full-batch Adam training with L1 regularization, decoupled weight decay,
//! and early stopping that restores the best-validation parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataMatrix, MetricsReport, ScalingSpec};
use crate::error::{Error, Result};

use super::model::{SplitMetrics, TrainedModel};
use super::ShallowNet;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L1 coefficient applied to all parameters inside the loss.
    pub lambda1: f64,
    /// Decoupled weight decay applied outside the gradient.
    pub lambda2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lambda1: 1e-6,
            lambda2: 1e-7,
            max_epochs: 5000,
            patience: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput("learning_rate must be finite and >= 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidInput("lambda1/lambda2 must be >= 0".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::InvalidInput(
                "need 1 <= patience <= max_epochs and max_epochs >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Train/validation/test partition sharing one schema.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: DataMatrix,
    pub validation: DataMatrix,
    pub test: DataMatrix,
}

impl Splits {
    pub fn from_split(parts: (DataMatrix, DataMatrix, DataMatrix)) -> Self {
        Splits { train: parts.0, validation: parts.1, test: parts.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation RMSE in scaled target units.
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

struct Batch {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

fn scaled_batch(
    data: &DataMatrix,
    features: &[String],
    target: &str,
    in_spec: &ScalingSpec,
    out_spec: &ScalingSpec,
) -> Result<Batch> {
    let xs = dataset::minmax_apply(in_spec, &data.select(features)?)?;
    let ys = dataset::minmax_apply(out_spec, &data.select(&[target.to_string()])?)?;
    Ok(Batch { x: xs.values().clone(), y: ys.values().column(0).into_owned() })
}

/// Forward pass over a batch. Returns (preactivations, activations, predictions).
fn batch_forward(net: &ShallowNet, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = x.nrows();
    let h = net.hidden_count();
    let mut z = x * net.w1.transpose();
    for i in 0..n {
        for j in 0..h {
            z[(i, j)] += net.b1[j];
        }
    }
    let a = z.map(|v| super::silu_eval(v, 0));
    let yhat = &a * &net.w2 + DVector::from_element(n, net.b2);
    (z, a, yhat)
}

fn mse(yhat: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    yhat.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

/// Mean-squared error plus lambda1 * sum |theta| over all parameters.
pub fn loss(net: &ShallowNet, batch_x: &DMatrix<f64>, batch_y: &DVector<f64>, lambda1: f64) -> f64 {
    let (_, _, yhat) = batch_forward(net, batch_x);
    mse(&yhat, batch_y) + lambda1 * net.params_flat().iter().map(|p| p.abs()).sum::<f64>()
}

/// Loss gradient in the flat parameter layout. The L1 subgradient at 0 is 0.
fn loss_gradient(
    net: &ShallowNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda1: f64,
) -> (f64, DVector<f64>) {
    let n = x.nrows();
    let d = net.input_dim();
    let h = net.hidden_count();
    let (z, a, yhat) = batch_forward(net, x);

    let resid = &yhat - y;
    let train_mse = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let dyhat = resid * (2.0 / n as f64);

    let dw2 = a.transpose() * &dyhat;
    let db2: f64 = dyhat.sum();
    // dZ[i,j] = dyhat[i] * w2[j] * silu'(z[i,j])
    let mut dz = DMatrix::zeros(n, h);
    for i in 0..n {
        for j in 0..h {
            dz[(i, j)] = dyhat[i] * net.w2[j] * super::silu_eval(z[(i, j)], 1);
        }
    }
    let dw1 = dz.transpose() * x;
    let db1 = dz.row_sum().transpose();

    let mut g = DVector::zeros(h * d + 2 * h + 1);
    let mut idx = 0;
    for j in 0..h {
        for k in 0..d {
            g[idx] = dw1[(j, k)];
            idx += 1;
        }
    }
    for j in 0..h {
        g[idx] = db1[j];
        idx += 1;
    }
    for j in 0..h {
        g[idx] = dw2[j];
        idx += 1;
    }
    g[idx] = db2;

    let theta = net.params_flat();
    let mut l1 = 0.0;
    for i in 0..g.len() {
        g[i] += lambda1 * theta[i].signum() * (theta[i] != 0.0) as u8 as f64;
        l1 += theta[i].abs();
    }
    (train_mse + lambda1 * l1, g)
}

/// Train a network of `hidden` units on the given splits.
///
/// Inputs and target are min-max scaled with ranges fitted on the training
/// split; optimization runs in scaled space and metrics are reported in
/// physical target units. Early stopping restores the parameters of the
/// epoch with the lowest validation RMSE.
pub fn train(
    splits: &Splits,
    target: &str,
    features: &[String],
    hidden: usize,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::InvalidInput("need at least one feature column".into()));
    }
    if features.iter().any(|f| f == target) {
        return Err(Error::Schema(format!("target `{target}` listed among features")));
    }

    let in_spec = dataset::minmax_fit(&splits.train.select(features)?)?;
    let out_spec = dataset::minmax_fit(&splits.train.select(&[target.to_string()])?)?;
    let tr = scaled_batch(&splits.train, features, target, &in_spec, &out_spec)?;
    let va = scaled_batch(&splits.validation, features, target, &in_spec, &out_spec)?;

    let mut net = ShallowNet::init(features.len(), hidden, config.seed)?;
    let n_params = net.params_flat().len();
    let mut m: DVector<f64> = DVector::zeros(n_params);
    let mut v: DVector<f64> = DVector::zeros(n_params);

    let mut best_params = net.params_flat();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut history = Vec::with_capacity(config.max_epochs.min(4096));

    for epoch in 1..=config.max_epochs {
        let (train_loss, grad) = loss_gradient(&net, &tr.x, &tr.y, config.lambda1);
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch} (loss not finite)"
            )));
        }

        // Adam with bias correction, then decoupled weight decay.
        let mut theta = net.params_flat();
        let bc1 = 1.0 - ADAM_BETA1.powi(epoch as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(epoch as i32);
        for i in 0..n_params {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat: f64 = m[i] / bc1;
            let vhat: f64 = v[i] / bc2;
            theta[i] -= config.learning_rate * (mhat / (vhat.sqrt() + ADAM_EPS));
            theta[i] -= config.learning_rate * config.lambda2 * theta[i];
        }
        net.set_params_flat(&theta);

        let (_, _, val_pred) = batch_forward(&net, &va.x);
        let val_rmse = {
            let n = va.y.len().max(1) as f64;
            (val_pred
                .iter()
                .zip(va.y.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        };
        if !val_rmse.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch} (validation RMSE not finite)"
            )));
        }
        history.push(EpochRecord { epoch, train_loss, val_rmse });

        if val_rmse < best_val {
            best_val = val_rmse;
            best_epoch = epoch;
            best_params = net.params_flat();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }
    net.set_params_flat(&best_params);

    let history = TrainingHistory { epochs: history, best_epoch, best_val_rmse: best_val };
    let metrics = SplitMetrics {
        train: physical_metrics(&net, &splits.train, features, target, &in_spec, &out_spec)?,
        validation: physical_metrics(&net, &splits.validation, features, target, &in_spec, &out_spec)?,
        test: physical_metrics(&net, &splits.test, features, target, &in_spec, &out_spec)?,
    };

    TrainedModel::new(net, in_spec, out_spec, metrics, config.clone(), history)
}

fn physical_metrics(
    net: &ShallowNet,
    data: &DataMatrix,
    features: &[String],
    target: &str,
    in_spec: &ScalingSpec,
    out_spec: &ScalingSpec,
) -> Result<MetricsReport> {
    let xs = dataset::minmax_apply(in_spec, &data.select(features)?)?;
    let (_, _, pred_scaled) = batch_forward(net, xs.values());
    let out = &out_spec.columns[0];
    let pred_phys = pred_scaled.map(|p| out.invert(p));
    let y_phys = data.column(target)?;
    dataset::metrics(&y_phys, &pred_phys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, SplitSpec};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn linear_splits(n: usize, seed: u64) -> Splits {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values = DMatrix::from_fn(n, 2, |_, j| {
            if j == 0 {
                rng.gen_range(0.0..1.0)
            } else {
                0.0
            }
        });
        let mut values = values;
        for i in 0..n {
            values[(i, 1)] = 2.0 * values[(i, 0)] + 1.0;
        }
        let d = DataMatrix::new(vec!["x".into(), "y".into()], values).unwrap();
        Splits::from_split(split(&d, &SplitSpec::new(0.7, 0.15, 0.15, seed).unwrap()).unwrap())
    }

    #[test]
    fn learns_linear_target() {
        let splits = linear_splits(600, 5);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            max_epochs: 4000,
            patience: 400,
            ..Default::default()
        };
        let model = train(&splits, "y", &["x".to_string()], 4, &cfg).unwrap();
        assert!(
            model.metrics.validation.r_squared >= 0.999,
            "validation R^2 = {}",
            model.metrics.validation.r_squared
        );
    }

    #[test]
    fn perfect_net_zero_loss() {
        // net output identically 0 on target identically 0
        let net = ShallowNet::new(DMatrix::zeros(2, 1), DVector::zeros(2), DVector::zeros(2), 0.0)
            .unwrap();
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let y = DVector::zeros(3);
        assert_eq!(loss(&net, &x, &y, 0.0), 0.0);
        // lambda1 = 1 on a zero-error net isolates the regularizer
        let net2 = ShallowNet::new(
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, -0.25),
            DVector::zeros(1),
            0.0,
        )
        .unwrap();
        let y2 = DVector::zeros(3);
        assert_eq!(loss(&net2, &x, &y2, 1.0), 0.75);
    }

    #[test]
    fn loss_equals_squared_rmse_without_regularizer() {
        let net = ShallowNet::init(1, 3, 11).unwrap();
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.3, 0.6, 0.9]);
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let (_, _, yhat) = batch_forward(&net, &x);
        let r = crate::dataset::rmse(&y, &yhat).unwrap();
        let l = loss(&net, &x, &y, 0.0);
        approx::assert_abs_diff_eq!(l, r * r, epsilon = 1e-12);
    }

    #[test]
    fn loss_monotone_in_lambda1() {
        let net = ShallowNet::init(2, 4, 3).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.4, 0.5, 0.7, 0.8]);
        let y = DVector::from_vec(vec![0.0, 0.5, 1.0]);
        let mut prev = loss(&net, &x, &y, 0.0);
        for &l1 in &[1e-6, 1e-3, 1e-1, 1.0] {
            let cur = loss(&net, &x, &y, l1);
            assert!(cur >= prev);
            prev = cur;
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut net = ShallowNet::init(2, 3, 41).unwrap();
        let x = DMatrix::from_row_slice(5, 2, &[0.1, 0.9, 0.3, 0.2, 0.8, 0.5, 0.6, 0.4, 0.2, 0.7]);
        let y = DVector::from_vec(vec![0.3, -0.1, 0.8, 0.2, 0.5]);
        let (_, g) = loss_gradient(&net, &x, &y, 0.0);
        let step = 1e-6;
        let theta0 = net.params_flat();
        for i in 0..theta0.len() {
            let mut tp = theta0.clone();
            let mut tm = theta0.clone();
            tp[i] += step;
            tm[i] -= step;
            net.set_params_flat(&tp);
            let lp = loss(&net, &x, &y, 0.0);
            net.set_params_flat(&tm);
            let lm = loss(&net, &x, &y, 0.0);
            net.set_params_flat(&theta0);
            let fd = (lp - lm) / (2.0 * step);
            approx::assert_abs_diff_eq!(g[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn early_stopping_no_progress_stops_after_patience() {
        let splits = linear_splits(60, 9);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            patience: 1,
            max_epochs: 100,
            ..Default::default()
        };
        let model = train(&splits, "y", &["x".to_string()], 3, &cfg).unwrap();
        assert_eq!(model.history.epochs.len(), 2);
        // lr = 0 leaves the initialization untouched
        let init = ShallowNet::init(1, 3, cfg.seed).unwrap();
        assert_eq!(model.net, init);
    }

    #[test]
    fn best_epoch_dominates_history() {
        let splits = linear_splits(300, 13);
        let cfg = TrainConfig { max_epochs: 400, patience: 50, ..Default::default() };
        let model = train(&splits, "y", &["x".to_string()], 4, &cfg).unwrap();
        for rec in &model.history.epochs {
            assert!(model.history.best_val_rmse <= rec.val_rmse + 1e-15);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let splits = linear_splits(200, 21);
        let cfg = TrainConfig { max_epochs: 120, patience: 120, ..Default::default() };
        let a = train(&splits, "y", &["x".to_string()], 5, &cfg).unwrap();
        let b = train(&splits, "y", &["x".to_string()], 5, &cfg).unwrap();
        assert_eq!(a.net.params_flat(), b.net.params_flat());
    }
}
