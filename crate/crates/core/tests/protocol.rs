//! Slower end-to-end checks of the training protocol: a full random
//! hyperparameter search on a benchmark objective.

use bilevel_core::dataset::{split, uniform_sample, DataMatrix, SplitSpec};
use bilevel_core::surrogate::{hyper_search, HyperSearchSpace, Splits};
use nalgebra::{DMatrix, DVector};

/// Lower objective of the convex benchmark sampled uniformly over its box.
fn quadratic_lower_data(n: usize, seed: u64) -> DataMatrix {
    let names = vec!["y".to_string()];
    let samples = uniform_sample(&[(0.0, 6.0)], &names, n, seed).unwrap();
    let mut values = DMatrix::zeros(n, 2);
    for i in 0..n {
        let y = samples.values()[(i, 0)];
        values[(i, 0)] = y;
        values[(i, 1)] = (y - 5.0) * (y - 5.0);
    }
    DataMatrix::new(vec!["y".into(), "f".into()], values).unwrap()
}

#[test]
fn fifty_trial_search_reaches_low_validation_rmse() {
    let data = quadratic_lower_data(2_000, 99);
    let splits =
        Splits::from_split(split(&data, &SplitSpec::new(0.7, 0.15, 0.15, 99).unwrap()).unwrap());
    let space = HyperSearchSpace {
        trials: 50,
        seed: 99,
        max_epochs: 1500,
        patience: 200,
        ..Default::default()
    };
    let outcome = hyper_search(&space, &splits, "f", &["y".to_string()]).unwrap();
    assert_eq!(outcome.trials.len(), 50);
    assert!(
        outcome.best_model.history.best_val_rmse <= 0.05,
        "best scaled validation RMSE {}",
        outcome.best_model.history.best_val_rmse
    );

    // the winner must dominate every completed trial
    let best = outcome.best_model.history.best_val_rmse;
    for t in &outcome.trials {
        if let Some(v) = t.val_rmse {
            assert!(best <= v + 1e-15);
        }
    }

    // the log retains hyperparameters for every trial, divergent or not
    assert!(outcome.trials.iter().all(|t| t.hidden >= 2 && t.hidden <= 16));

    // spot-check generalization of the winner in physical units
    let m = &outcome.best_model.metrics;
    assert!(m.test.r_squared > 0.99, "test R^2 {}", m.test.r_squared);

    // sanity: predictions track the quadratic
    let f3 = outcome
        .best_model
        .eval(&DVector::from_vec(vec![3.0]), false)
        .unwrap();
    assert!((f3 - 4.0).abs() < 0.5, "f(3) = {f3}");
}
