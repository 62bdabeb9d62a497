use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use bilevel_core::nlpsolver::{multistart_solve, SolveStatus};
use bilevel_core::problem::{ann_variant, build_benchmark, load_problem_file, BenchmarkName};
use bilevel_core::reformulate::{kkt_reformulate, KKTOptions};
use bilevel_core::surrogate::TrainedModel;
use bilevel_core::{Error, Result};

use super::FileConfig;
use crate::manifest::ManifestBuilder;

#[derive(Args)]
pub struct SolveArgs {
    /// Benchmark name (cc | cnc | ncnc) or `file` with --problem-file.
    pub problem: String,

    /// bilevel-kkt (analytic objectives) or ann-kkt (surrogate objectives).
    #[arg(long, default_value = "bilevel-kkt")]
    pub mode: String,

    /// Custom problem JSON (with `file` as the problem argument).
    #[arg(long)]
    pub problem_file: Option<PathBuf>,

    #[arg(long)]
    pub upper_model: Option<PathBuf>,

    #[arg(long)]
    pub lower_model: Option<PathBuf>,

    /// Smooth complementarities with the perturbed Fischer-Burmeister rows.
    #[arg(long)]
    pub fb: bool,

    #[arg(long)]
    pub starts: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: SolveArgs, file: &FileConfig) -> Result<u8> {
    let seed = super::resolve_seed(args.seed, file);
    let cfg = super::solver_config(args.starts, seed, file);

    let mut manifest = ManifestBuilder::new(
        "solve",
        seed,
        serde_json::json!({
            "problem": args.problem,
            "mode": args.mode,
            "fb": args.fb,
            "solver": cfg,
        }),
    );

    let base = match (args.problem.as_str(), &args.problem_file) {
        ("file", Some(path)) => {
            manifest.input(path)?;
            load_problem_file(path)?
        }
        ("file", None) => {
            return Err(Error::InvalidInput("`file` problems need --problem-file".into()))
        }
        (name, _) => build_benchmark(name.parse::<BenchmarkName>()?),
    };

    let problem = match args.mode.as_str() {
        "bilevel-kkt" => base,
        "ann-kkt" => {
            let (upper, lower) = match (&args.upper_model, &args.lower_model) {
                (Some(u), Some(l)) => (u, l),
                _ => {
                    return Err(Error::InvalidInput(
                        "ann-kkt mode needs --upper-model and --lower-model".into(),
                    ))
                }
            };
            manifest.input(upper)?;
            manifest.input(lower)?;
            ann_variant(
                &base,
                Arc::new(TrainedModel::load(upper)?),
                Arc::new(TrainedModel::load(lower)?),
            )?
        }
        other => return Err(Error::InvalidInput(format!("unknown mode `{other}`"))),
    };

    let opts = KKTOptions { use_fb: args.fb, ..Default::default() };
    let nlp = kkt_reformulate(&problem, &opts)?;
    let (best, all) = multistart_solve(&nlp, &cfg)?;

    super::ensure_dir(&args.out)?;
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&best)?)?;
    let all_path = args.out.join("all_reports.json");
    std::fs::write(&all_path, serde_json::to_string_pretty(&all)?)?;
    let trace_path = args.out.join("trace.csv");
    std::fs::write(&trace_path, best.trace.to_csv())?;
    let listing_path = args.out.join("nlp.txt");
    std::fs::write(&listing_path, format!("{nlp}"))?;
    for p in [&report_path, &all_path, &trace_path, &listing_path] {
        manifest.output(p);
    }
    manifest.write(&args.out.join("manifest.json"))?;

    let decision: Vec<f64> = best.point.iter().take(nlp.decision_dim).cloned().collect();
    println!(
        "{} [{}]: objective {:.6} at {:?} ({:?}, infeasibility {:.2e}, {:.3}s, licq holds: {})",
        problem.name,
        nlp.name,
        best.objective,
        decision,
        best.status,
        best.primal_infeasibility,
        best.cpu_seconds,
        best.licq.holds,
    );
    Ok(if best.status == SolveStatus::Optimal { 0 } else { 3 })
}
