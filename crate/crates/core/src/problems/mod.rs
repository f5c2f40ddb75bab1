//! The shipped reference problems.

pub mod cs2d;
pub mod portfolio;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::problem::MfcProblem;

pub use cs2d::{CuckerSmale, CuckerSmaleParams};
pub use portfolio::{Portfolio, PortfolioParams};

/// A shipped problem together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ProblemParams {
    Portfolio(PortfolioParams),
    Cs2d(CuckerSmaleParams),
}

impl ProblemParams {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemParams::Portfolio(_) => "portfolio",
            ProblemParams::Cs2d(_) => "cs2d",
        }
    }

    pub fn build(&self) -> Result<Box<dyn MfcProblem>> {
        Ok(match self {
            ProblemParams::Portfolio(p) => Box::new(Portfolio::new(p.clone())?),
            ProblemParams::Cs2d(p) => Box::new(CuckerSmale::new(p.clone())?),
        })
    }
}
