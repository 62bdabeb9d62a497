use std::path::PathBuf;

use clap::Args;

use bilevel_core::{Error, Result};

#[derive(Args)]
pub struct ReportArgs {
    /// A report.json, sweep.json, or solutions.json produced by this tool.
    pub file: PathBuf,
}

/// Render a saved JSON artifact as a human-readable summary.
pub fn run(args: ReportArgs) -> Result<u8> {
    let text = std::fs::read_to_string(&args.file)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;

    if let Some(obj) = value.as_object() {
        if obj.contains_key("objective") && obj.contains_key("trace") {
            return print_solution_report(obj);
        }
    }
    if let Some(rows) = value.as_array() {
        if rows.iter().all(|r| r.get("percentile").is_some()) {
            return print_sweep(rows);
        }
        if rows.iter().all(|r| r.get("target").is_some()) {
            return print_robust(rows);
        }
    }
    Err(Error::Schema(format!("{} is not a recognized report shape", args.file.display())))
}

fn print_solution_report(obj: &serde_json::Map<String, serde_json::Value>) -> Result<u8> {
    println!("status:               {}", obj["status"].as_str().unwrap_or("?"));
    println!("objective:            {}", obj["objective"]);
    println!("primal infeasibility: {}", obj["primal_infeasibility"]);
    println!("cpu seconds:          {}", obj["cpu_seconds"]);
    if let Some(licq) = obj.get("licq") {
        println!(
            "licq: holds {} (rank {}, {} active inequalities)",
            licq["holds"], licq["rank"], licq["active_count"]
        );
    }
    if let Some(point) = obj["point"].as_array() {
        let coords: Vec<String> = point.iter().map(|v| v.to_string()).collect();
        println!("point:                [{}]", coords.join(", "));
    }
    if let Some(entries) = obj["trace"]["entries"].as_array() {
        println!("iterations:           {}", entries.len());
    }
    Ok(0)
}

fn print_sweep(rows: &[serde_json::Value]) -> Result<u8> {
    println!("percentile  tau       thr          power      status");
    for r in rows {
        println!(
            "{:<11} {:<9.4} {:<12.2} {:<10.2} {}",
            r["percentile"],
            r["tau"].as_f64().unwrap_or(f64::NAN),
            r["thr"].as_f64().unwrap_or(f64::NAN),
            r["power"].as_f64().unwrap_or(f64::NAN),
            r["status"].as_str().unwrap_or("?")
        );
    }
    Ok(0)
}

fn print_robust(rows: &[serde_json::Value]) -> Result<u8> {
    for r in rows {
        match r.get("solution") {
            Some(sol) => println!(
                "target {}: rho {} | nominal TE {} | worst TE {}",
                r["target"], sol["rho"], sol["te_nominal"], sol["te_worst"]
            ),
            None => println!(
                "target {}: infeasible ({})",
                r["target"],
                r["infeasible"].as_str().unwrap_or("?")
            ),
        }
    }
    Ok(0)
}
