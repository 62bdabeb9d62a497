use std::path::PathBuf;

use clap::Args;

use bilevel_core::dataset::{split, DataMatrix, SplitSpec};
use bilevel_core::surrogate::{hyper_search, run_trials, HyperSearchSpace, Splits, TrainConfig};
use bilevel_core::Result;

use super::FileConfig;
use crate::manifest::ManifestBuilder;

#[derive(Args)]
pub struct TrainArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: PathBuf,

    /// Target column name.
    #[arg(long)]
    pub target: String,

    /// Comma-separated feature columns (default: all non-target columns).
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,

    /// Random-search trial budget. Ignored when --hidden is given.
    #[arg(long)]
    pub trials: Option<usize>,

    /// Fixed hidden width; skips the hyperparameter search.
    #[arg(long)]
    pub hidden: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub lambda1: Option<f64>,

    #[arg(long)]
    pub lambda2: Option<f64>,

    #[arg(long)]
    pub max_epochs: Option<usize>,

    #[arg(long)]
    pub patience: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output model JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: TrainArgs, file: &FileConfig) -> Result<u8> {
    let seed = super::resolve_seed(args.seed, file);
    let data = DataMatrix::read_csv(&args.data)?;
    let features: Vec<String> = match &args.features {
        Some(f) => f.clone(),
        None => data
            .columns()
            .iter()
            .filter(|c| **c != args.target)
            .cloned()
            .collect(),
    };
    // fails early when the target column is missing
    data.column(&args.target)?;

    let splits = Splits::from_split(split(&data, &SplitSpec::new(0.7, 0.15, 0.15, seed)?)?);
    let max_epochs = super::resolve(args.max_epochs, file.max_epochs, 5000);
    let patience = super::resolve(args.patience, file.patience, 200);

    let outcome = if let Some(hidden) = args.hidden {
        let config = TrainConfig {
            learning_rate: args.learning_rate.unwrap_or(0.01),
            lambda1: args.lambda1.unwrap_or(1e-6),
            lambda2: args.lambda2.unwrap_or(1e-7),
            max_epochs,
            patience,
            seed,
        };
        run_trials(&[(hidden, config)], &splits, &args.target, &features)?
    } else {
        let space = HyperSearchSpace {
            trials: super::resolve(args.trials, file.trials, 8),
            seed,
            max_epochs,
            patience,
            ..Default::default()
        };
        hyper_search(&space, &splits, &args.target, &features)?
    };

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            super::ensure_dir(dir)?;
        }
    }
    outcome.best_model.save(&args.out)?;
    let scaling_path = args.out.with_extension("scaling.json");
    std::fs::write(&scaling_path, outcome.best_model.input_scaling.to_map_json())?;

    let m = &outcome.best_model.metrics;
    println!("trained `{}` on {:?} (hidden = {})", args.target, features, outcome.best_hidden);
    println!("split        rmse        r2");
    println!("train        {:<10.4} {:.4}", m.train.rmse, m.train.r_squared);
    println!("validation   {:<10.4} {:.4}", m.validation.rmse, m.validation.r_squared);
    println!("test         {:<10.4} {:.4}", m.test.rmse, m.test.r_squared);

    let mut manifest = ManifestBuilder::new(
        "train",
        seed,
        serde_json::json!({
            "target": args.target,
            "features": features,
            "hidden": outcome.best_hidden,
            "config": outcome.best_config,
            "trials": outcome.trials.len(),
        }),
    );
    manifest.input(&args.data)?;
    manifest.output(&args.out);
    let trial_log = args.out.with_extension("trials.json");
    std::fs::write(&trial_log, serde_json::to_string_pretty(&outcome.trials)?)?;
    manifest.output(&trial_log);
    manifest.write(&args.out.with_extension("manifest.json"))?;
    Ok(0)
}
