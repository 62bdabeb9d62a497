//! Random hyperparameter search: hidden width uniform over an integer range,
//! rates log-uniform, every trial trained to completion and ranked by
//! validation RMSE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::TrainedModel;
use super::train::{train, Splits, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSearchSpace {
    /// Inclusive integer range for the hidden-layer width.
    pub hidden: (usize, usize),
    /// Log-uniform ranges.
    pub learning_rate: (f64, f64),
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
    pub trials: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for HyperSearchSpace {
    fn default() -> Self {
        Self {
            hidden: (2, 16),
            learning_rate: (1e-5, 1e-1),
            lambda1: (1e-7, 1e-1),
            lambda2: (1e-7, 1e-1),
            trials: 50,
            seed: 0,
            max_epochs: 5000,
            patience: 200,
        }
    }
}

impl HyperSearchSpace {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("need at least one trial".into()));
        }
        if self.hidden.0 == 0 || self.hidden.0 > self.hidden.1 {
            return Err(Error::InvalidInput("invalid hidden range".into()));
        }
        for (name, (lo, hi)) in [
            ("learning_rate", self.learning_rate),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidInput(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> (usize, TrainConfig) {
        let log_uniform = |rng: &mut ChaCha20Rng, (lo, hi): (f64, f64)| {
            if lo == hi { lo } else { (rng.gen_range(lo.ln()..hi.ln())).exp() }
        };
        let hidden = rng.gen_range(self.hidden.0..=self.hidden.1);
        let config = TrainConfig {
            learning_rate: log_uniform(rng, self.learning_rate),
            lambda1: log_uniform(rng, self.lambda1),
            lambda2: log_uniform(rng, self.lambda2),
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: rng.gen(),
        };
        (hidden, config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hidden: usize,
    pub config: TrainConfig,
    /// Scaled-space validation RMSE; None when the trial diverged.
    pub val_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_model: TrainedModel,
    pub best_hidden: usize,
    pub best_config: TrainConfig,
    pub trials: Vec<TrialRecord>,
}

/// Train each explicit (hidden, config) candidate and keep the one with the
/// lowest validation RMSE. Diverged trials are logged, not fatal; every trial
/// diverging is an error.
pub fn run_trials(
    candidates: &[(usize, TrainConfig)],
    splits: &Splits,
    target: &str,
    features: &[String],
) -> Result<SearchOutcome> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    let mut trials = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, TrainedModel, usize, TrainConfig)> = None;
    for (index, (hidden, config)) in candidates.iter().enumerate() {
        match train(splits, target, features, *hidden, config) {
            Ok(model) => {
                let val = model.history.best_val_rmse;
                trials.push(TrialRecord {
                    index,
                    hidden: *hidden,
                    config: config.clone(),
                    val_rmse: Some(val),
                    error: None,
                });
                let better = best.as_ref().map_or(true, |(b, ..)| val < *b);
                if better {
                    best = Some((val, model, *hidden, config.clone()));
                }
            }
            Err(e) => trials.push(TrialRecord {
                index,
                hidden: *hidden,
                config: config.clone(),
                val_rmse: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((_, best_model, best_hidden, best_config)) => {
            Ok(SearchOutcome { best_model, best_hidden, best_config, trials })
        }
        None => Err(Error::Numerical("all hyperparameter trials diverged".into())),
    }
}

/// Sample `space.trials` random configurations and run them.
pub fn hyper_search(
    space: &HyperSearchSpace,
    splits: &Splits,
    target: &str,
    features: &[String],
) -> Result<SearchOutcome> {
    space.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(space.seed);
    let candidates: Vec<(usize, TrainConfig)> =
        (0..space.trials).map(|_| space.sample(&mut rng)).collect();
    run_trials(&candidates, splits, target, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, DataMatrix, SplitSpec};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn quadratic_splits(n: usize, seed: u64) -> Splits {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values = DMatrix::zeros(n, 2);
        for i in 0..n {
            let y = rng.gen_range(0.0..6.0);
            values[(i, 0)] = y;
            values[(i, 1)] = (y - 5.0) * (y - 5.0);
        }
        let d = DataMatrix::new(vec!["y".into(), "f".into()], values).unwrap();
        Splits::from_split(split(&d, &SplitSpec::new(0.7, 0.15, 0.15, seed).unwrap()).unwrap())
    }

    #[test]
    fn single_trial_returns_that_config() {
        let splits = quadratic_splits(300, 3);
        let cfg = TrainConfig { max_epochs: 50, patience: 50, ..Default::default() };
        let out = run_trials(&[(4, cfg.clone())], &splits, "f", &["y".to_string()]).unwrap();
        assert_eq!(out.best_hidden, 4);
        assert_eq!(out.best_config, cfg);
        assert_eq!(out.trials.len(), 1);
    }

    #[test]
    fn frozen_learning_rate_loses_to_live_one() {
        let splits = quadratic_splits(300, 7);
        let dead = TrainConfig { learning_rate: 0.0, max_epochs: 100, patience: 100, ..Default::default() };
        let live = TrainConfig { learning_rate: 0.02, max_epochs: 100, patience: 100, ..Default::default() };
        let out = run_trials(
            &[(6, dead), (6, live.clone())],
            &splits,
            "f",
            &["y".to_string()],
        )
        .unwrap();
        assert_eq!(out.best_config, live);
        assert!(out.trials[1].val_rmse.unwrap() < out.trials[0].val_rmse.unwrap());
    }

    #[test]
    fn random_search_finds_decent_fit() {
        let splits = quadratic_splits(500, 11);
        let space = HyperSearchSpace {
            trials: 6,
            seed: 5,
            max_epochs: 400,
            patience: 100,
            ..Default::default()
        };
        let out = hyper_search(&space, &splits, "f", &["y".to_string()]).unwrap();
        assert_eq!(out.trials.len(), 6);
        assert!(out.best_model.history.best_val_rmse < 0.2);
    }
}
