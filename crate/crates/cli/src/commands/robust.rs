use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use bilevel_core::dataset::{minmax_apply, DataMatrix};
use bilevel_core::reformulate::mahalanobis_fit;
use bilevel_core::robust::{perturbation_study, robust_sweep, RobustProblem, RobustSolution};
use bilevel_core::surrogate::TrainedModel;
use bilevel_core::{Error, Result};

use super::FileConfig;
use crate::manifest::ManifestBuilder;

#[derive(Args)]
pub struct RobustArgs {
    /// Efficiency surrogate model JSON.
    #[arg(long)]
    pub model: PathBuf,

    /// Operating-data CSV (envelope fit data).
    #[arg(long)]
    pub data: PathBuf,

    /// Comma-separated efficiency floors, model output units.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<f64>,

    /// Perturbation-study sample count.
    #[arg(long)]
    pub n_samples: Option<usize>,

    /// Envelope percentile used to discard perturbed points.
    #[arg(long, default_value_t = 90.0)]
    pub filter_percentile: f64,

    /// Envelope percentile of the design-validity constraint.
    #[arg(long, default_value_t = 95.0)]
    pub design_percentile: f64,

    #[arg(long)]
    pub starts: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: RobustArgs, file: &FileConfig) -> Result<u8> {
    let seed = super::resolve_seed(args.seed, file);
    let cfg = super::solver_config(args.starts, seed, file);
    let n_samples = super::resolve(args.n_samples, file.n_samples, 10_000);

    let mut manifest = ManifestBuilder::new(
        "robust",
        seed,
        serde_json::json!({
            "targets": args.targets,
            "n_samples": n_samples,
            "filter_percentile": args.filter_percentile,
            "design_percentile": args.design_percentile,
            "solver": cfg,
        }),
    );
    manifest.input(&args.model)?;
    manifest.input(&args.data)?;

    let model = Arc::new(TrainedModel::load(&args.model)?);
    let data = DataMatrix::read_csv(&args.data)?;
    let inputs = data.select(&model.feature_names())?;
    let scaled = minmax_apply(&model.input_scaling, &inputs)?;
    let envelope = mahalanobis_fit(&scaled, args.design_percentile)?;

    let results = robust_sweep(model.clone(), &envelope, &args.targets, &cfg)?;

    super::ensure_dir(&args.out)?;
    let mut feasible: Vec<(f64, RobustSolution)> = Vec::new();
    let mut rows = Vec::new();
    for (target, outcome) in &results {
        match outcome {
            Ok(sol) => {
                println!(
                    "target {target}: rho = {:.4}, nominal TE {:.3}, worst-case TE {:.3} ({:.3}s)",
                    sol.rho, sol.te_nominal, sol.te_worst, sol.cpu_seconds
                );
                rows.push(serde_json::json!({ "target": target, "solution": sol }));
                feasible.push((*target, sol.clone()));
            }
            Err(e) => {
                println!("target {target}: infeasible ({e})");
                rows.push(serde_json::json!({ "target": target, "infeasible": e.to_string() }));
            }
        }
    }
    let solutions_path = args.out.join("solutions.json");
    std::fs::write(&solutions_path, serde_json::to_string_pretty(&rows)?)?;
    manifest.output(&solutions_path);

    // operating ranges, one row per variable, one [nominal, worst] pair per target
    let mut ranges_csv = String::from("feature");
    for (target, _) in &feasible {
        ranges_csv.push_str(&format!(",nominal_{target},worst_{target}"));
    }
    ranges_csv.push('\n');
    for (i, name) in model.feature_names().iter().enumerate() {
        ranges_csv.push_str(name);
        for (_, sol) in &feasible {
            let scale = &model.input_scaling.columns[i];
            ranges_csv.push_str(&format!(
                ",{},{}",
                scale.invert(sol.x_nominal[i]),
                scale.invert(sol.x_nominal[i] + sol.delta_worst[i])
            ));
        }
        ranges_csv.push('\n');
    }
    let ranges_path = args.out.join("ranges.csv");
    std::fs::write(&ranges_path, ranges_csv)?;
    manifest.output(&ranges_path);

    // perturbation studies with TE samples for histogram plotting
    for (target, sol) in &feasible {
        let rp = RobustProblem::new(model.clone(), envelope.clone(), *target)?;
        let study = perturbation_study(sol, &rp, n_samples, args.filter_percentile, seed)?;
        let mut csv = String::from("te\n");
        for t in &study.te_values {
            csv.push_str(&format!("{t}\n"));
        }
        let samples_path = args.out.join(format!("te_samples-{target}.csv"));
        std::fs::write(&samples_path, csv)?;
        manifest.output(&samples_path);
        let study_path = args.out.join(format!("study-{target}.json"));
        let summary = serde_json::json!({
            "target": target,
            "samples_total": study.samples_total,
            "samples_kept": study.samples_kept,
            "te_mean": study.te_mean,
            "te_min": study.te_min,
            "te_max": study.te_max,
            "frac_above_target": study.frac_above_target,
            "ranges": study.ranges,
        });
        std::fs::write(&study_path, serde_json::to_string_pretty(&summary)?)?;
        manifest.output(&study_path);
    }
    manifest.write(&args.out.join("manifest.json"))?;

    if feasible.is_empty() {
        return Err(Error::Infeasible("no target admitted a robust solution".into()));
    }
    Ok(0)
}
