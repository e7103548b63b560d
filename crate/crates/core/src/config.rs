//! Run configuration shared by the CLI and the FFI layer.

use serde::Serialize;

use crate::error::CoreError;
use crate::uniform::EvalConfig;

pub const DENSE_BUDGET_ENV: &str = "CMPS_DENSE_BUDGET";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dense_budget: usize,
    pub eig_tol: f64,
    pub solve_tol: f64,
    pub ode_tol: f64,
    pub seed: Option<u64>,
    pub output_format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { dense_budget: 8, eig_tol: 1e-12, solve_tol: 1e-10, ode_tol: 1e-8, seed: None, output_format: OutputFormat::Json }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.dense_budget < 1 {
            return Err(CoreError::Invalid("dense_budget must be at least 1".into()));
        }
        for (name, v) in [("eig_tol", self.eig_tol), ("solve_tol", self.solve_tol), ("ode_tol", self.ode_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Apply `CMPS_DENSE_BUDGET` if set.
    pub fn with_env(mut self) -> Result<Self, CoreError> {
        if let Ok(v) = std::env::var(DENSE_BUDGET_ENV) {
            self.dense_budget = v
                .trim()
                .parse()
                .map_err(|_| CoreError::Invalid(format!("{DENSE_BUDGET_ENV}={v:?} is not a nonnegative integer")))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig { dense_threshold: self.dense_budget, eig_tol: self.eig_tol, solve_tol: self.solve_tol, ..EvalConfig::default() }
    }
}
