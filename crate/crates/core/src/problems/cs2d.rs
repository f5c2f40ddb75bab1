//! Two-dimensional Cucker-Smale flocking with a controlled velocity.
//!
//! State `(x, v)` is scalar position and velocity. The interaction kernel is
//! `kappa(x, v, x', v') = K (v' - v) / (1 + |x - x'|^2)^beta`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Dims, EmpiricalMeasure, KernelSlice, MfcProblem};
use crate::prox::ProxSpec;
use crate::rng::BoxMuller;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuckerSmaleParams {
    pub horizon: f64,
    /// Interaction strength `K`.
    pub k: f64,
    pub sigma: f64,
    pub gamma1: f64,
    /// l1 control cost.
    pub gamma2: f64,
    pub beta: f64,
    /// Standard deviation of each mixture component (per coordinate).
    pub init_std: f64,
}

impl Default for CuckerSmaleParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            k: 1.0,
            sigma: 0.1,
            gamma1: 0.1,
            gamma2: 0.0,
            beta: 0.0,
            init_std: 0.1,
        }
    }
}

impl CuckerSmaleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.horizon > 0.0) {
            return bad(format!("cs2d horizon must be positive, got {}", self.horizon));
        }
        if !(self.gamma1 > 0.0) {
            return bad(format!("cs2d gamma1 must be positive, got {}", self.gamma1));
        }
        if !(self.gamma2 >= 0.0) {
            return bad(format!("cs2d gamma2 must be >= 0, got {}", self.gamma2));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("cs2d beta must be >= 0, got {}", self.beta));
        }
        if !(self.sigma >= 0.0 && self.init_std >= 0.0) {
            return bad("cs2d sigma and init_std must be >= 0".into());
        }
        Ok(())
    }
}

/// Mixture component means `(x, v)`, equal weights.
pub const MIXTURE_MEANS: [[f64; 2]; 2] = [[1.2, 1.8], [1.8, 1.2]];

#[derive(Debug, Clone)]
pub struct CuckerSmale {
    pub params: CuckerSmaleParams,
    int_beta: Option<i32>,
}

impl CuckerSmale {
    pub fn new(params: CuckerSmaleParams) -> Result<Self> {
        params.validate()?;
        let int_beta = (params.beta.fract() == 0.0 && params.beta <= 64.0).then_some(params.beta as i32);
        Ok(Self { params, int_beta })
    }

    /// `(1 + r2)^(-beta)`
    #[inline]
    fn weight(&self, r2: f64) -> f64 {
        match self.int_beta {
            Some(0) => 1.0,
            Some(b) => (1.0 + r2).powi(-b),
            None => (1.0 + r2).powf(-self.params.beta),
        }
    }

    pub fn kappa(&self, x: f64, v: f64, xp: f64, vp: f64) -> f64 {
        let r = x - xp;
        self.params.k * (vp - v) * self.weight(r * r)
    }

    /// `(d_x, d_v, d_x', d_v')` of the kernel.
    pub fn kappa_grad(&self, x: f64, v: f64, xp: f64, vp: f64) -> [f64; 4] {
        let r = x - xp;
        let w = self.weight(r * r);
        let kk = self.params.k;
        let dx = -2.0 * self.params.beta * kk * (vp - v) * r * w / (1.0 + r * r);
        [dx, -kk * w, -dx, kk * w]
    }
}

impl MfcProblem for CuckerSmale {
    fn name(&self) -> &str {
        "cs2d"
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

    fn drift(&self, _t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = x[1];
        let avg = if self.int_beta == Some(0) {
            self.params.k * (m.mean_state()[1] - x[1])
        } else {
            let sum: f64 = m.states().chunks_exact(2).map(|y| self.kappa(x[0], x[1], y[0], y[1])).sum();
            sum / m.len() as f64
        };
        out[1] = avg + a[0];
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = self.params.sigma;
    }
    fn running_cost(&self, _t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure) -> f64 {
        let dv = x[1] - m.mean_state()[1];
        dv * dv + self.params.gamma1 * a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], m: &EmpiricalMeasure) -> f64 {
        let dv = x[1] - m.mean_state()[1];
        dv * dv
    }

    fn drift_dx(&self, _t: f64, x: &[f64], _a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        let (ex, ev) = if self.int_beta == Some(0) {
            (0.0, -self.params.k)
        } else {
            let n = m.len() as f64;
            let (mut sx, mut sv) = (0.0, 0.0);
            for y in m.states().chunks_exact(2) {
                let g = self.kappa_grad(x[0], x[1], y[0], y[1]);
                sx += g[0];
                sv += g[1];
            }
            (sx / n, sv / n)
        };
        out[0] = 0.0;
        out[1] = ex;
        out[2] = 1.0;
        out[3] = ev;
    }
    fn drift_da(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }
    fn running_cost_dx(&self, _t: f64, x: &[f64], _a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 2.0 * (x[1] - m.mean_state()[1]);
    }
    fn running_cost_da(&self, _t: f64, _x: &[f64], a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 2.0 * self.params.gamma1 * a[0];
    }
    fn terminal_cost_dx(&self, x: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 2.0 * (x[1] - m.mean_state()[1]);
    }

    fn has_state_kernels(&self) -> bool {
        true
    }
    fn drift_dmu(&self, _t: f64, xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, x: &[f64], _a: &[f64], out: &mut [f64]) {
        let g = self.kappa_grad(xc[0], xc[1], x[0], x[1]);
        out[0] = 0.0;
        out[1] = g[2];
        out[2] = 0.0;
        out[3] = g[3];
    }
    fn running_cost_dmu(&self, _t: f64, xc: &[f64], _ac: &[f64], m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -2.0 * (xc[1] - m.mean_state()[1]);
    }
    fn terminal_cost_dmu(&self, xc: &[f64], m: &EmpiricalMeasure, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -2.0 * (xc[1] - m.mean_state()[1]);
    }

    fn nonlocal_state_source(&self, slice: &KernelSlice, x: &[f64], _a: &[f64], out: &mut [f64]) {
        let m = slice.measure;
        // the averaged running-cost kernel is -2 (E[v] - E[v]), zero up to rounding
        let cost_term = -2.0 * (m.mean_state()[1] - m.mean_state()[1]);
        if self.int_beta == Some(0) {
            out[0] = 0.0;
            out[1] = self.params.k * slice.mean_u[1] + cost_term;
            return;
        }
        let (mut sx, mut sv) = (0.0, 0.0);
        for (l, y) in m.states().chunks_exact(2).enumerate() {
            let g = self.kappa_grad(y[0], y[1], x[0], x[1]);
            let u2 = slice.u_at(l)[1];
            sx += g[2] * u2;
            sv += g[3] * u2;
        }
        let n = m.len() as f64;
        out[0] = sx / n;
        out[1] = sv / n + cost_term;
    }

    fn nonlocal_terminal(&self, _m: &EmpiricalMeasure, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
    }

    fn nonsmooth_cost(&self) -> ProxSpec {
        if self.params.gamma2 > 0.0 {
            ProxSpec::L1 { weight: self.params.gamma2 }
        } else {
            ProxSpec::None
        }
    }

    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let c = usize::from(rng.gen::<f64>() >= 0.5);
        let mut bm = BoxMuller::new();
        out[0] = MIXTURE_MEANS[c][0] + self.params.init_std * bm.sample(rng);
        out[1] = MIXTURE_MEANS[c][1] + self.params.init_std * bm.sample(rng);
    }

    fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![5.0, 4.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(beta: f64) -> CuckerSmale {
        CuckerSmale::new(CuckerSmaleParams {
            beta,
            ..CuckerSmaleParams::default()
        })
        .unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cs(10.0).kappa(0.0, 0.0, 1.0, 1.0), 1.0 / 1024.0);
        let g = cs(10.0).kappa_grad(0.7, 0.2, 0.7, 3.0);
        assert_eq!(g[1], -1.0);
        let g0 = cs(0.0).kappa_grad(0.3, 0.2, 4.0, 3.0);
        assert_eq!((g0[0], g0[2]), (0.0, 0.0));
    }

    #[test]
    fn noninteger_beta_matches_powf() {
        let p = cs(2.5);
        let k = p.kappa(0.0, 0.0, 0.5, 1.0);
        assert!((k - 1.25f64.powf(-2.5)).abs() < 1e-15);
    }

    #[test]
    fn terminal_kernel_average_vanishes() {
        let p = cs(0.0);
        let m = EmpiricalMeasure::new(2, 1, vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.5], vec![0.0; 3]).unwrap();
        let mut fast = [9.0; 2];
        let mut slow = [9.0; 2];
        p.nonlocal_terminal(&m, &[0.3, 0.3], &mut fast);
        crate::problem::brute_force_terminal(&p, &m, &[0.3, 0.3], &mut slow);
        assert!((fast[1] - slow[1]).abs() < 1e-14);
    }
}
