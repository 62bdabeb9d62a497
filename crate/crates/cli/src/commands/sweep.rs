use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use bilevel_core::dataset::DataMatrix;
use bilevel_core::nlpsolver::SolveStatus;
use bilevel_core::plantopt::{tau_sweep, PlantSpec};
use bilevel_core::surrogate::TrainedModel;
use bilevel_core::{Error, Result};

use super::FileConfig;
use crate::manifest::ManifestBuilder;

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub power_model: PathBuf,

    #[arg(long)]
    pub thr_model: PathBuf,

    /// Plant dataset CSV (envelope fit data).
    #[arg(long)]
    pub data: PathBuf,

    /// coal | gas
    #[arg(long, default_value = "coal")]
    pub plant: String,

    /// Percentiles as `lo:hi[:step]` (inclusive) or a comma list.
    #[arg(long, default_value = "81:95")]
    pub percentiles: String,

    #[arg(long)]
    pub starts: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_percentiles(text: &str) -> Result<Vec<f64>> {
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(Error::InvalidInput(format!("bad percentile range `{text}`")));
        }
        let lo: f64 = parts[0].parse().map_err(|_| Error::Parse(format!("bad number in `{text}`")))?;
        let hi: f64 = parts[1].parse().map_err(|_| Error::Parse(format!("bad number in `{text}`")))?;
        let step: f64 = match parts.get(2) {
            Some(s) => s.parse().map_err(|_| Error::Parse(format!("bad step in `{text}`")))?,
            None => 1.0,
        };
        if !(step > 0.0 && hi >= lo) {
            return Err(Error::InvalidInput(format!("bad percentile range `{text}`")));
        }
        let mut out = Vec::new();
        let mut p = lo;
        while p <= hi + 1e-9 {
            out.push(p);
            p += step;
        }
        Ok(out)
    } else {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad percentile `{s}`")))
            })
            .collect()
    }
}

pub fn run(args: SweepArgs, file: &FileConfig) -> Result<u8> {
    let seed = super::resolve_seed(args.seed, file);
    let cfg = super::solver_config(args.starts, seed, file);
    let spec = match args.plant.as_str() {
        "coal" => PlantSpec::coal_like(),
        "gas" => PlantSpec::gas_like(),
        other => return Err(Error::InvalidInput(format!("unknown plant shape `{other}`"))),
    };
    let percentiles = parse_percentiles(&args.percentiles)?;

    let mut manifest = ManifestBuilder::new(
        "sweep-tau",
        seed,
        serde_json::json!({ "plant": args.plant, "percentiles": percentiles, "solver": cfg }),
    );
    manifest.input(&args.power_model)?;
    manifest.input(&args.thr_model)?;
    manifest.input(&args.data)?;

    let power = Arc::new(TrainedModel::load(&args.power_model)?);
    let thr = Arc::new(TrainedModel::load(&args.thr_model)?);
    let data = DataMatrix::read_csv(&args.data)?;

    let outcome = tau_sweep(power, thr, &data, &spec, &percentiles, &cfg)?;

    super::ensure_dir(&args.out)?;
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, outcome.to_csv())?;
    manifest.output(&csv_path);
    let json_path = args.out.join("sweep.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&outcome.rows)?)?;
    manifest.output(&json_path);
    let reports_path = args.out.join("reports.json");
    std::fs::write(&reports_path, serde_json::to_string_pretty(&outcome.reports)?)?;
    manifest.output(&reports_path);
    for (row, report) in outcome.rows.iter().zip(outcome.reports.iter()) {
        let trace_path = args.out.join(format!("trace-{}.csv", row.percentile));
        std::fs::write(&trace_path, report.trace.to_csv())?;
        manifest.output(&trace_path);
    }
    manifest.write(&args.out.join("manifest.json"))?;

    println!("percentile  thr          power     status      cpu_s");
    for row in &outcome.rows {
        println!(
            "{:<11} {:<12.2} {:<9.2} {:<11} {:.3}",
            row.percentile,
            row.thr,
            row.power,
            format!("{:?}", row.status),
            row.cpu_seconds
        );
    }
    let optimal = outcome.rows.iter().filter(|r| r.status == SolveStatus::Optimal).count();
    println!("{optimal}/{} rows optimal", outcome.rows.len());
    Ok(if optimal > 0 { 0 } else { 3 })
}
