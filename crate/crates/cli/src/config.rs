//! Run configuration for `haate simulate`.
//!
//! ```json
//! {
//!   "design": { "J": 100, "n": 50, "M": 2, "alpha": [1, 1, 1] },
//!   "dgp": { "beta": [5, 7.5, 2.5], "delta_base": [[0.5, -0.5], [1, -1], [2.5, -2.5]],
//!            "c": 0, "sigma2": 1, "rho_u": 0 },
//!   "grid": { "rho_u_values": [0, 0.5], "c_values": [0, 1],
//!             "scaled_alpha_values": [0.01, 1000], "iterations": 1000, "base_seed": 1 },
//!   "output_dir": "results", "format": "csv", "plot": true
//! }
//! ```
//!
//! The grid supplies `ᾱ`, `c` and `ρ_u`; the matching fields of `design`
//! and `dgp` are placeholders.

use std::fs;
use std::path::{Path, PathBuf};

use haate_core::montecarlo::{Inference, SweepGrid};
use haate_core::{AssignmentMode, Design, Params};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub design: Design,
    pub dgp: Params,
    pub grid: SweepGrid,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub plot: bool,
    #[serde(default)]
    pub inference: Inference,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.grid.validate()?;
        let probe = Design {
            alpha: vec![1.0; self.design.arms()],
            ..self.design.clone()
        };
        probe.validate()?;
        if self.design.mode != AssignmentMode::TwoStageDirichlet {
            return Err(CliError::Usage(
                "simulation supports design.mode two_stage_dirichlet only".into(),
            ));
        }
        self.dgp.validate()?;
        if self.dgp.arms() != self.design.arms() {
            return Err(CliError::Usage(format!(
                "design has {} arms but dgp has {}",
                self.design.arms(),
                self.dgp.arms()
            )));
        }
        if !(self.inference.ci.level > 0.0 && self.inference.ci.level < 1.0) {
            return Err(CliError::Usage(
                "inference.ci.level must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}
