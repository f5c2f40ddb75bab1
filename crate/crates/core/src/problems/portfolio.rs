//! Optimal liquidation with permanent price impact.
//!
//! State `(S, Q)`: the unaffected price and the inventory. The trading rate
//! `alpha` moves the inventory and, through its population mean, the price.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Dims, EmpiricalMeasure, KernelSlice, MfcProblem};
use crate::prox::ProxSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioParams {
    pub horizon: f64,
    pub s0: f64,
    /// Permanent impact coefficient.
    pub lambda: f64,
    pub sigma: f64,
    /// Terminal inventory penalty.
    pub gamma: f64,
    /// Quadratic trading cost.
    pub k1: f64,
    /// l1 trading cost.
    pub k2: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl Default for PortfolioParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            s0: 2.0,
            lambda: 0.5,
            sigma: 0.7,
            gamma: 0.5,
            k1: 1.0,
            k2: 0.0,
            q_min: 1.0,
            q_max: 2.0,
        }
    }
}

impl PortfolioParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.horizon > 0.0) {
            return bad(format!("portfolio horizon must be positive, got {}", self.horizon));
        }
        if !(self.k1 > 0.0) {
            return bad(format!("portfolio k1 must be positive, got {}", self.k1));
        }
        if !(self.k2 >= 0.0) {
            return bad(format!("portfolio k2 must be >= 0, got {}", self.k2));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("portfolio sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.q_min < self.q_max) {
            return bad(format!("portfolio needs q_min < q_max, got [{}, {}]", self.q_min, self.q_max));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Portfolio {
    pub params: PortfolioParams,
}

impl Portfolio {
    pub fn new(params: PortfolioParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl MfcProblem for Portfolio {
    fn name(&self) -> &str {
        "portfolio"
    }
    fn dims(&self) -> Dims {
        Dims {
            state: 2,
            control: 1,
            noise: 1,
        }
    }
    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.params.lambda * m.mean_control()[0];
        out[1] = a[0];
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.params.sigma;
        out[1] = 0.0;
    }
    fn running_cost(&self, _t: f64, x: &[f64], a: &[f64], _m: &EmpiricalMeasure) -> f64 {
        a[0] * x[0] + x[1] * x[1] + self.params.k1 * a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], _m: &EmpiricalMeasure) -> f64 {
        -x[1] * (x[0] - self.params.gamma * x[1])
    }

    fn drift_dx(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_da(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }
    fn running_cost_dx(&self, _t: f64, x: &[f64], a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = a[0];
        out[1] = 2.0 * x[1];
    }
    fn running_cost_da(&self, _t: f64, x: &[f64], a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = x[0] + 2.0 * self.params.k1 * a[0];
    }
    fn terminal_cost_dx(&self, x: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = -x[1];
        out[1] = -x[0] + 2.0 * self.params.gamma * x[1];
    }

    fn has_control_kernels(&self) -> bool {
        true
    }
    // price drift depends on the mean trading rate only
    fn drift_dnu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = self.params.lambda;
        out[1] = 0.0;
    }

    fn nonlocal_control_gradient(&self, slice: &KernelSlice, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = self.params.lambda * slice.mean_u[0];
    }

    fn nonsmooth_cost(&self) -> ProxSpec {
        if self.params.k2 > 0.0 {
            ProxSpec::L1 { weight: self.params.k2 }
        } else {
            ProxSpec::None
        }
    }

    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = self.params.s0;
        out[1] = self.params.q_min + (self.params.q_max - self.params.q_min) * rng.gen::<f64>();
    }

    fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-2.0, 0.0], vec![6.0, 4.0])
    }
}
