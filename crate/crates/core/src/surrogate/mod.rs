//! Shallow feed-forward networks with SiLU hidden activation and a linear
//! output layer, plus exact input derivatives up to third order. The closed
//! forms are what make these nets usable inside stationarity constraints:
//! the optimizer differentiates through the model instead of the data.

mod model;
mod search;
mod train;

pub use model::{SplitMetrics, TrainedModel};
pub use search::{hyper_search, run_trials, HyperSearchSpace, SearchOutcome, TrialRecord};
pub use train::{loss, train, EpochRecord, Splits, TrainConfig, TrainingHistory};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Numerically stable logistic sigmoid.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation z*s(z) and its derivatives.
///
/// order 0: z*s(z)
/// order 1: s(z)*(1 + z*(1-s(z)))
/// order 2: s(z)*(1-s(z))*(2 + z*(1-2s(z)))
/// order 3: s(z)*(1-s(z))*((1-2s(z))*(3 + z*(1-2s(z))) - 2z*s(z)*(1-s(z)))
pub fn silu_eval(z: f64, order: usize) -> f64 {
    let s = sigmoid(z);
    match order {
        0 => z * s,
        1 => s * (1.0 + z * (1.0 - s)),
        2 => s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s)),
        3 => {
            let p = s * (1.0 - s);
            let t = 1.0 - 2.0 * s;
            p * (t * (3.0 + z * t) - 2.0 * z * p)
        }
        _ => panic!("silu_eval: unsupported derivative order {order}"),
    }
}

/// One-hidden-layer network: y = w2 . silu(W1 x + b1) + b2.
///
/// The output layer is strictly linear, so all input derivatives exist in
/// closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowNet {
    /// hidden x input weight matrix
    pub w1: DMatrix<f64>,
    /// hidden biases
    pub b1: DVector<f64>,
    /// output weights, one per hidden unit
    pub w2: DVector<f64>,
    /// output bias
    pub b2: f64,
}

impl ShallowNet {
    pub fn new(w1: DMatrix<f64>, b1: DVector<f64>, w2: DVector<f64>, b2: f64) -> Result<Self> {
        let h = w1.nrows();
        if h == 0 {
            return Err(Error::InvalidInput("need at least one hidden unit".into()));
        }
        if b1.len() != h || w2.len() != h {
            return Err(Error::DimensionMismatch { expected: h, got: b1.len().min(w2.len()) });
        }
        let net = Self { w1, b1, w2, b2 };
        if !net.params_flat().iter().all(|p| p.is_finite()) {
            return Err(Error::InvalidInput("non-finite network parameter".into()));
        }
        Ok(net)
    }

    /// Seeded uniform init in +-sqrt(6 / (fan_in + fan_out)) per layer.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || input_dim == 0 {
            return Err(Error::InvalidInput("input_dim and hidden must be >= 1".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let lim1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        let lim2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, input_dim, |_, _| rng.gen_range(-lim1..lim1));
        let b1 = DVector::zeros(hidden);
        let w2 = DVector::from_fn(hidden, |_, _| rng.gen_range(-lim2..lim2));
        Self::new(w1, b1, w2, 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_count(&self) -> usize {
        self.w1.nrows()
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    fn preactivations(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w1 * x + &self.b1
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let z = self.preactivations(x);
        let mut y = self.b2;
        for j in 0..self.hidden_count() {
            y += self.w2[j] * silu_eval(z[j], 0);
        }
        Ok(y)
    }

    /// dy/dx_k = sum_j w2_j silu'(z_j) W1[j,k]
    pub fn input_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let z = self.preactivations(x);
        let mut g = DVector::zeros(self.input_dim());
        for j in 0..self.hidden_count() {
            let c = self.w2[j] * silu_eval(z[j], 1);
            g.axpy(c, &self.w1.row(j).transpose(), 1.0);
        }
        Ok(g)
    }

    /// d2y/dx_k dx_l = sum_j w2_j silu''(z_j) W1[j,k] W1[j,l]; symmetric by
    /// construction.
    pub fn input_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let z = self.preactivations(x);
        let d = self.input_dim();
        let mut h = DMatrix::zeros(d, d);
        for j in 0..self.hidden_count() {
            let c = self.w2[j] * silu_eval(z[j], 2);
            let row = self.w1.row(j);
            // fill the upper triangle and mirror, so H == H^T bit-exactly
            for k in 0..d {
                for l in k..d {
                    let v = c * row[k] * row[l];
                    h[(k, l)] += v;
                    if l != k {
                        h[(l, k)] = h[(k, l)];
                    }
                }
            }
        }
        Ok(h)
    }

    /// Hessian of the k-th gradient component:
    /// d3y/dx_k dx_l dx_m = sum_j w2_j silu'''(z_j) W1[j,k] W1[j,l] W1[j,m].
    pub fn gradient_component_hessian(&self, x: &DVector<f64>, k: usize) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        if k >= self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: k });
        }
        let z = self.preactivations(x);
        let d = self.input_dim();
        let mut t = DMatrix::zeros(d, d);
        for j in 0..self.hidden_count() {
            let c = self.w2[j] * silu_eval(z[j], 3) * self.w1[(j, k)];
            let row = self.w1.row(j);
            for l in 0..d {
                for m in l..d {
                    let v = c * row[l] * row[m];
                    t[(l, m)] += v;
                    if m != l {
                        t[(m, l)] = t[(l, m)];
                    }
                }
            }
        }
        Ok(t)
    }

    /// Flat parameter layout: W1 row-major, b1, w2, b2.
    pub fn params_flat(&self) -> DVector<f64> {
        let h = self.hidden_count();
        let d = self.input_dim();
        let mut v = DVector::zeros(h * d + h + h + 1);
        let mut idx = 0;
        for j in 0..h {
            for k in 0..d {
                v[idx] = self.w1[(j, k)];
                idx += 1;
            }
        }
        for j in 0..h {
            v[idx] = self.b1[j];
            idx += 1;
        }
        for j in 0..h {
            v[idx] = self.w2[j];
            idx += 1;
        }
        v[idx] = self.b2;
        v
    }

    pub fn set_params_flat(&mut self, v: &DVector<f64>) {
        let h = self.hidden_count();
        let d = self.input_dim();
        assert_eq!(v.len(), h * d + 2 * h + 1, "flat parameter length mismatch");
        let mut idx = 0;
        for j in 0..h {
            for k in 0..d {
                self.w1[(j, k)] = v[idx];
                idx += 1;
            }
        }
        for j in 0..h {
            self.b1[j] = v[idx];
            idx += 1;
        }
        for j in 0..h {
            self.w2[j] = v[idx];
            idx += 1;
        }
        self.b2 = v[idx];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn silu_known_values() {
        assert_eq!(silu_eval(0.0, 0), 0.0);
        assert_eq!(silu_eval(0.0, 1), 0.5);
    }

    #[test]
    fn silu_derivatives_match_finite_differences() {
        let h = 1e-6;
        for order in 1..=3usize {
            for &z in &[-3.0, -1.0, -0.3, 0.0, 0.4, 1.0, 2.7] {
                let fd = (silu_eval(z + h, order - 1) - silu_eval(z - h, order - 1)) / (2.0 * h);
                let analytic = silu_eval(z, order);
                assert_abs_diff_eq!(analytic, fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn silu_second_derivative_at_one() {
        let h = 1e-5;
        let fd = (silu_eval(1.0 + h, 1) - silu_eval(1.0 - h, 1)) / (2.0 * h);
        assert_abs_diff_eq!(silu_eval(1.0, 2), fd, epsilon = 1e-6);
    }

    #[test]
    fn silu_saturates_without_nan() {
        for &z in &[-1e3, -50.0, 50.0, 1e3] {
            for order in 0..=3 {
                assert!(silu_eval(z, order).is_finite(), "z={z} order={order}");
            }
        }
    }

    #[test]
    fn forward_zero_weights_returns_bias() {
        let net = ShallowNet::new(DMatrix::zeros(3, 2), DVector::zeros(3), DVector::zeros(3), 1.25)
            .unwrap();
        let x = DVector::from_vec(vec![4.0, -7.0]);
        assert_eq!(net.forward(&x).unwrap(), 1.25);
    }

    #[test]
    fn forward_single_unit_identity_path() {
        let net = ShallowNet::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap();
        assert_eq!(net.forward(&DVector::zeros(1)).unwrap(), 0.0);
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        // H=2 net evaluated by hand at x = 0.3:
        //   z1 = 0.7*0.3 + 0.1 = 0.31, z2 = -1.2*0.3 + 0.4 = 0.04
        //   y  = 1.5*silu(0.31) - 0.8*silu(0.04) + 0.2
        let net = ShallowNet::new(
            DMatrix::from_row_slice(2, 1, &[0.7, -1.2]),
            DVector::from_vec(vec![0.1, 0.4]),
            DVector::from_vec(vec![1.5, -0.8]),
            0.2,
        )
        .unwrap();
        let s1 = 1.0 / (1.0 + (-0.31f64).exp());
        let s2 = 1.0 / (1.0 + (-0.04f64).exp());
        let expect = 1.5 * 0.31 * s1 - 0.8 * 0.04 * s2 + 0.2;
        assert_abs_diff_eq!(net.forward(&DVector::from_vec(vec![0.3])).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let net = ShallowNet::init(2, 3, 0).unwrap();
        assert!(net.forward(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn gradient_zero_weights_is_zero() {
        let net = ShallowNet::new(DMatrix::zeros(3, 2), DVector::zeros(3), DVector::zeros(3), 0.5)
            .unwrap();
        let g = net.input_gradient(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_nets() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for trial in 0..100 {
            let d = rng.gen_range(1..4usize);
            let net = ShallowNet::init(d, rng.gen_range(1..8usize), trial).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let g = net.input_gradient(&x).unwrap();
            for k in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * h);
                let rel = (g[k] - fd).abs() / (1.0 + g[k].abs());
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-6, "max relative gradient error {max_rel}");
    }

    #[test]
    fn gradient_linear_regime_limit() {
        // tiny preactivations: silu'(z) ~ 0.5, so dy/dx ~ 0.5 * w2 * w1
        let eps = 1e-4;
        let net = ShallowNet::new(
            DMatrix::from_element(1, 1, eps),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap();
        let g = net.input_gradient(&DVector::from_vec(vec![0.5])).unwrap();
        assert_abs_diff_eq!(g[0], 0.5 * eps, epsilon = 1e-3);
    }

    #[test]
    fn hessian_zero_output_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let w1 = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let net = ShallowNet::new(w1, DVector::zeros(4), DVector::zeros(4), 0.0).unwrap();
        let h = net.input_hessian(&DVector::from_vec(vec![0.2, -0.4])).unwrap();
        assert_eq!(h, DMatrix::zeros(2, 2));
    }

    #[test]
    fn hessian_symmetric_and_matches_fd_of_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let step = 1e-5;
        for trial in 0..40 {
            let d = rng.gen_range(1..4usize);
            let net = ShallowNet::init(d, rng.gen_range(1..8usize), 1000 + trial).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let hess = net.input_hessian(&x).unwrap();
            assert_eq!(hess, hess.transpose());
            for k in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let fd = (net.input_gradient(&xp).unwrap() - net.input_gradient(&xm).unwrap())
                    / (2.0 * step);
                for l in 0..d {
                    let rel = (hess[(k, l)] - fd[l]).abs() / (1.0 + hess[(k, l)].abs());
                    assert!(rel < 1e-5, "hessian fd mismatch {rel}");
                }
            }
        }
    }

    #[test]
    fn third_derivative_matches_fd_of_hessian() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let step = 1e-5;
        for trial in 0..20 {
            let d = rng.gen_range(1..3usize);
            let net = ShallowNet::init(d, rng.gen_range(1..6usize), 2000 + trial).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-1.5..1.5));
            for k in 0..d {
                let t = net.gradient_component_hessian(&x, k).unwrap();
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let fd = (net.input_hessian(&xp).unwrap() - net.input_hessian(&xm).unwrap())
                    / (2.0 * step);
                // row k of the fd hessian difference equals t's row/col structure
                for l in 0..d {
                    for m in 0..d {
                        // d/dx_k of H[l,m] equals T_k[l,m]
                        let rel = (t[(l, m)] - fd[(l, m)]).abs() / (1.0 + t[(l, m)].abs());
                        assert!(rel < 1e-4, "third derivative mismatch {rel}");
                    }
                }
            }
        }
    }

    #[test]
    fn params_flat_round_trip() {
        let net = ShallowNet::init(3, 5, 7).unwrap();
        let flat = net.params_flat();
        let mut other = ShallowNet::init(3, 5, 8).unwrap();
        other.set_params_flat(&flat);
        assert_eq!(net, other);
    }
}
