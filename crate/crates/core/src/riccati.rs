//! Linear-quadratic benchmarks: the flocking Riccati equation and an
//! affine-structure check for policies.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::{fmt17, PolicyField};
use crate::particles::simulate_feedback;
use crate::problems::CuckerSmale;

/// Samples of `a(t)` solving `a' - 2K a - a^2 / (2 gamma1) + 2 = 0`, `a(T) = 2`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub k: f64,
    pub gamma1: f64,
    pub horizon: f64,
    pub dt: f64,
    /// `a(i dt)`, forward-indexed.
    pub values: Vec<f64>,
}

pub const BLOW_UP: f64 = 1e6;

/// Default RK4 step. The central-difference residual check itself carries
/// an `h^2 a''' / 6` error, and `a'''` reaches about `1.5e4` near `T`.
pub const DEFAULT_DT_ODE: f64 = 1e-5;

impl RiccatiSolution {
    fn rhs(&self, a: f64) -> f64 {
        2.0 * self.k * a + a * a / (2.0 * self.gamma1) - 2.0
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| i as f64 * self.dt)
    }

    /// Linear interpolation of the samples.
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(t >= -1e-12 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let s = (t / self.dt).clamp(0.0, (self.values.len() - 1) as f64);
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let f = s - i as f64;
        Ok(self.values[i] * (1.0 - f) + self.values[i + 1] * f)
    }

    /// Largest central-difference residual of the ODE at interior samples.
    pub fn max_residual(&self) -> f64 {
        (1..self.values.len() - 1)
            .map(|i| ((self.values[i + 1] - self.values[i - 1]) / (2.0 * self.dt) - self.rhs(self.values[i])).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "a"]).map_err(|e| Error::Csv(e.to_string()))?;
        for (t, a) in self.times().zip(&self.values) {
            wr.write_record([fmt17(t), fmt17(*a)]).map_err(|e| Error::Csv(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Backward classical RK4 from `a(T) = 2`.
pub fn solve_cs_riccati(k: f64, gamma1: f64, horizon: f64, dt_ode: f64) -> Result<RiccatiSolution> {
    if !(dt_ode > 0.0 && dt_ode <= 1e-3) {
        return Err(Error::InvalidArgument(format!("dt_ode must lie in (0, 1e-3], got {dt_ode}")));
    }
    if !(gamma1 > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("gamma1 and T must be positive".into()));
    }
    let steps = (horizon / dt_ode).ceil() as usize;
    let h = horizon / steps as f64;
    let mut sol = RiccatiSolution {
        k,
        gamma1,
        horizon,
        dt: h,
        values: vec![0.0; steps + 1],
    };
    let mut a = 2.0;
    sol.values[steps] = a;
    for i in (0..steps).rev() {
        let k1 = sol.rhs(a);
        let k2 = sol.rhs(a - 0.5 * h * k1);
        let k3 = sol.rhs(a - 0.5 * h * k2);
        let k4 = sol.rhs(a - h * k3);
        a -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !a.is_finite() || a.abs() > BLOW_UP {
            return Err(Error::RiccatiBlowUp { time: i as f64 * h });
        }
        sol.values[i] = a;
    }
    Ok(sol)
}

/// `-(a_t / (2 gamma1)) (v - mean_v(t))`; `mean_v` holds one value per
/// slice of a uniform partition of `[0, T]`.
pub fn cs_lq_feedback(sol: &RiccatiSolution, mean_v: &[f64], t: f64, _x: f64, v: f64) -> Result<f64> {
    if mean_v.len() < 2 {
        return Err(Error::InvalidArgument("mean_v needs at least two slices".into()));
    }
    let a = sol.value(t)?;
    let dt = sol.horizon / (mean_v.len() - 1) as f64;
    let j = ((t / dt + 1e-9).floor() as usize).min(mean_v.len() - 1);
    Ok(-(a / (2.0 * sol.gamma1)) * (v - mean_v[j]))
}

/// Per-slice mean velocity of the closed-loop LQ particle system.
pub fn lq_mean_velocity(p: &CuckerSmale, sol: &RiccatiSolution, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let dt = p.params.horizon / steps as f64;
    let gamma1 = sol.gamma1;
    let a: Vec<f64> = (0..=steps).map(|j| sol.value(j as f64 * dt)).collect::<Result<_>>()?;
    let ens = simulate_feedback(p, n, steps, seed, &|j, _t, x, mean, out| {
        out[0] = -(a[j] / (2.0 * gamma1)) * (x[1] - mean[1]);
    })?;
    Ok((0..=steps)
        .map(|j| ens.states(j).chunks_exact(2).map(|s| s[1]).sum::<f64>() / n as f64)
        .collect())
}

/// Least-squares fit `phi(t_j, .) ~ slope * x_var + intercept` on one slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    /// `|phi - fit|_2 / |phi|_2` over the fitted nodes (0 when `phi = 0`).
    pub residual: f64,
}

/// Fits every time slice of a scalar policy against state coordinate
/// `var`, using nodes inside `region = (lo, hi)` (all nodes when `None`).
pub fn affine_fit_check(policy: &PolicyField, var: usize, region: Option<(&[f64], &[f64])>) -> Result<Vec<AffineFit>> {
    let grid = policy.grid();
    if var >= grid.dim() {
        return Err(Error::InvalidArgument(format!("state index {var} out of range")));
    }
    let k = policy.control_dim();
    let nodes: Vec<(usize, f64)> = (0..grid.node_count())
        .filter_map(|node| {
            let x = grid.node_point(node);
            let inside = region.is_none_or(|(lo, hi)| (0..x.len()).all(|i| x[i] >= lo[i] - 1e-12 && x[i] <= hi[i] + 1e-12));
            inside.then_some((node, x[var]))
        })
        .collect();
    if nodes.len() < 2 {
        return Err(Error::InvalidArgument("fit region holds fewer than two nodes".into()));
    }
    let n = nodes.len() as f64;
    let xm = nodes.iter().map(|(_, x)| x).sum::<f64>() / n;
    let sxx: f64 = nodes.iter().map(|(_, x)| (x - xm).powi(2)).sum();
    Ok((0..=grid.time_steps())
        .map(|j| {
            let vals = policy.field().slice(j);
            let y = |node: usize| vals[node * k];
            let ym = nodes.iter().map(|&(nd, _)| y(nd)).sum::<f64>() / n;
            let sxy: f64 = nodes.iter().map(|&(nd, x)| (x - xm) * (y(nd) - ym)).sum();
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            let intercept = ym - slope * xm;
            let (mut rr, mut yy) = (0.0, 0.0);
            for &(nd, x) in &nodes {
                rr += (y(nd) - slope * x - intercept).powi(2);
                yy += y(nd).powi(2);
            }
            let residual = if yy > 0.0 { (rr / yy).sqrt() } else { 0.0 };
            AffineFit { slope, intercept, residual }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridField, SpaceTimeGrid};

    #[test]
    fn terminal_value_and_residual() {
        let s = solve_cs_riccati(1.0, 0.1, 1.0, DEFAULT_DT_ODE).unwrap();
        assert_eq!(*s.values.last().unwrap(), 2.0);
        assert!(s.max_residual() < 1e-6, "{}", s.max_residual());
    }

    #[test]
    fn long_horizon_reaches_fixed_point() {
        let s = solve_cs_riccati(1.0, 0.1, 20.0, 1e-3).unwrap();
        let root = (-2.0 + 44f64.sqrt()) / 10.0;
        assert!((s.values[0] - root).abs() < 1e-10, "{} vs {root}", s.values[0]);
    }

    #[test]
    fn feedback_formula() {
        let s = solve_cs_riccati(1.0, 0.1, 1.0, 1e-4).unwrap();
        let mean = vec![1.5; 51];
        assert_eq!(cs_lq_feedback(&s, &mean, 1.0, 0.0, 2.5).unwrap(), -10.0);
        assert_eq!(cs_lq_feedback(&s, &mean, 0.3, 0.0, 1.5).unwrap(), 0.0);
        assert!(cs_lq_feedback(&s, &mean, 0.3, 0.0, 1.7).unwrap() < 0.0);
        assert!(cs_lq_feedback(&s, &mean, 1.5, 0.0, 1.7).is_err());
        assert!(solve_cs_riccati(1.0, 0.1, 1.0, 1e-2).is_err());
    }

    #[test]
    fn affine_and_constant_slices() {
        let g = SpaceTimeGrid::new(1.0, 2, vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5]).unwrap();
        let f = PolicyField(GridField::from_fn(g.clone(), 1, |t, x, o| o[0] = (1.0 + t) * x[1] - 0.3));
        for fit in affine_fit_check(&f, 1, None).unwrap() {
            assert!(fit.residual < 1e-14);
        }
        let c = PolicyField(GridField::constant(g, 1, 2.0));
        let fit = affine_fit_check(&c, 0, None).unwrap()[0];
        assert_eq!((fit.slope, fit.residual), (0.0, 0.0));
    }
}
