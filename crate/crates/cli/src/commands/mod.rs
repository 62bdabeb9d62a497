pub mod gendata;
pub mod report;
pub mod robust;
pub mod solve;
pub mod sweep;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use bilevel_core::nlpsolver::SolverConfig;
use bilevel_core::{Error, Result};

/// Optional JSON config file; every field is overridable by a flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub starts: Option<usize>,
    pub trials: Option<usize>,
    pub n: Option<usize>,
    pub n_samples: Option<usize>,
    pub feasibility_tol: Option<f64>,
    pub optimality_tol: Option<f64>,
    pub time_limit: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Schema(format!("config file {}: {e}", p.display())))
            }
        }
    }
}

/// Flag > config file > default.
pub fn resolve<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> u64 {
    resolve(flag, file.seed, crate::manifest::default_seed())
}

pub fn solver_config(
    starts: Option<usize>,
    seed: u64,
    file: &FileConfig,
) -> SolverConfig {
    let d = SolverConfig::default();
    SolverConfig {
        starts: resolve(starts, file.starts, d.starts),
        seed,
        feasibility_tol: resolve(None, file.feasibility_tol, d.feasibility_tol),
        optimality_tol: resolve(None, file.optimality_tol, d.optimality_tol),
        time_limit: resolve(None, file.time_limit, d.time_limit),
        ..d
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}
