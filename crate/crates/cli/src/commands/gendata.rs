use std::path::PathBuf;

use clap::Args;
use nalgebra::DVector;

use bilevel_core::dataset::{uniform_sample, DataMatrix};
use bilevel_core::plantopt::{synth_plant_data, PlantSpec};
use bilevel_core::problem::{build_benchmark, BenchmarkName};
use bilevel_core::{Error, Result};

use super::FileConfig;
use crate::manifest::ManifestBuilder;

#[derive(Args)]
pub struct GenDataArgs {
    /// cc | cnc | ncnc | plant-coal-synth | plant-gas-synth
    pub target: String,

    /// Sample count (default: 10000 for benchmarks, 1279 for plants).
    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: GenDataArgs, file: &FileConfig) -> Result<u8> {
    let seed = super::resolve_seed(args.seed, file);
    let data = match args.target.as_str() {
        "plant-coal-synth" => {
            let n = super::resolve(args.n, file.n, 1279);
            synth_plant_data(&PlantSpec::coal_like(), n, seed)?
        }
        "plant-gas-synth" => {
            let n = super::resolve(args.n, file.n, 1000);
            synth_plant_data(&PlantSpec::gas_like(), n, seed)?
        }
        name => {
            let benchmark: BenchmarkName = name.parse()?;
            let n = super::resolve(args.n, file.n, 10_000);
            benchmark_dataset(benchmark, n, seed)?
        }
    };

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            super::ensure_dir(dir)?;
        }
    }
    data.write_csv(&args.out)?;

    let mut manifest = ManifestBuilder::new(
        "gen-data",
        seed,
        serde_json::json!({ "target": args.target, "n": data.nrows(), "seed": seed }),
    );
    manifest.output(&args.out);
    manifest.write(&args.out.with_extension("csv.manifest.json"))?;

    println!("wrote {} rows to {}", data.nrows(), args.out.display());
    Ok(0)
}

/// Uniform samples over the benchmark box with both objective columns.
fn benchmark_dataset(name: BenchmarkName, n: usize, seed: u64) -> Result<DataMatrix> {
    let problem = build_benchmark(name);
    let bounds = problem.joint_bounds();
    let samples = uniform_sample(&bounds, &problem.var_names, n, seed)?;

    let mut columns = problem.var_names.clone();
    columns.push("F".into());
    columns.push("f".into());
    let mut values = nalgebra::DMatrix::zeros(n, columns.len());
    for i in 0..n {
        let v = DVector::from_fn(2, |j, _| samples.values()[(i, j)]);
        values[(i, 0)] = v[0];
        values[(i, 1)] = v[1];
        values[(i, 2)] = problem.upper_objective.eval(&v);
        values[(i, 3)] = problem.lower_objective.eval(&v);
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite objective sample".into()));
    }
    DataMatrix::new(columns, values)
}
