#![allow(dead_code)]

use mfcontrol::fd::{backward_sweep, solve_backward, MonotoneOperator, NodeCoefficients, SweepOptions};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use mfcontrol::grid::{GridField, PolicyField, SpaceTimeGrid};
use mfcontrol::nag::gradient_field;
use mfcontrol::particles::{estimate_cost, simulate};
use mfcontrol::problem::MfcProblem;

pub fn problem_grid(p: &dyn MfcProblem, nodes: usize, steps: usize) -> SpaceTimeGrid {
    let (lo, hi) = p.domain();
    let d = lo.len();
    SpaceTimeGrid::new(p.horizon(), steps, lo, hi, vec![nodes; d]).unwrap()
}

pub fn cost(p: &dyn MfcProblem, policy: &PolicyField, n: usize, seed: u64) -> f64 {
    let ens = simulate(p, policy, n, policy.grid().time_steps(), seed).unwrap();
    estimate_cost(p, &ens).unwrap().mean
}

/// `psi + eps * delta` nodewise.
pub fn shifted(psi: &PolicyField, delta: &GridField, eps: f64) -> PolicyField {
    let mut out = psi.clone();
    for (v, d) in out.field_mut().values_mut().iter_mut().zip(delta.values()) {
        *v += eps * d;
    }
    out
}

/// Directional derivative predicted by the adjoint: the gradient field
/// averaged along the particles of `psi`, integrated in time.
pub fn adjoint_directional(p: &dyn MfcProblem, psi: &PolicyField, delta: &GridField, n: usize, seed: u64) -> f64 {
    let steps = psi.grid().time_steps();
    let ens = simulate(p, psi, n, steps, seed).unwrap();
    let opts = SweepOptions::default();
    let adj = backward_sweep(p, psi, &ens, &opts).unwrap();
    let g: GridField = gradient_field(p, psi, &ens, &adj, &opts).unwrap();
    let k = psi.control_dim();
    let dt = psi.grid().dt();
    let mut out = vec![0.0; k];
    let mut dir = vec![0.0; k];
    let mut total = 0.0;
    for j in 0..steps {
        let mut acc = 0.0;
        for l in 0..ens.len() {
            g.interp_at(j, ens.state(j, l), &mut out);
            delta.interp_at(j, ens.state(j, l), &mut dir);
            acc += out.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        }
        total += acc / ens.len() as f64 * dt;
    }
    total
}

/// Central difference of the Monte-Carlo cost at common random numbers.
pub fn fd_directional(p: &dyn MfcProblem, psi: &PolicyField, delta: &GridField, eps: f64, n: usize, seed: u64) -> f64 {
    (cost(p, &shifted(psi, delta, eps), n, seed) - cost(p, &shifted(psi, delta, -eps), n, seed)) / (2.0 * eps)
}

use mfcontrol::problem::{Dims, EmpiricalMeasure};
use rand::RngCore;

#[derive(Clone, Copy, Debug)]
pub enum Drift {
    Const(f64),
    /// `lambda * E[a]`
    MeanControl(f64),
    /// `-theta x + a`
    Ou(f64),
    /// finite below the level, NaN above
    NanAbove(f64),
    /// `a` while `a` stays below the level, NaN above
    ControlNanAbove(f64),
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Point(f64),
    Normal,
}

/// Scalar test problem: `dX = b dt + sigma dW`,
/// `f = c0 + c1 x + c2 a^2`, `g = g1 x`.
#[derive(Clone, Debug)]
pub struct Toy {
    pub horizon: f64,
    pub drift: Drift,
    pub sigma: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub g1: f64,
    pub init: Init,
    /// scales the reported `d_a f` (1 is correct)
    pub fa_scale: f64,
}

impl Default for Toy {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            drift: Drift::Const(0.0),
            sigma: 0.0,
            c0: 0.0,
            c1: 0.0,
            c2: 0.0,
            g1: 0.0,
            init: Init::Point(0.0),
            fa_scale: 1.0,
        }
    }
}

impl MfcProblem for Toy {
    fn name(&self) -> &str {
        "toy"
    }
    fn dims(&self) -> Dims {
        Dims { state: 1, control: 1, noise: 1 }
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn drift(&self, _t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::Const(c) => c,
            Drift::MeanControl(l) => l * m.mean_control()[0],
            Drift::Ou(th) => -th * x[0] + a[0],
            Drift::NanAbove(lvl) => if x[0] > lvl { f64::NAN } else { 1.0 },
            Drift::ControlNanAbove(lvl) => if a[0] > lvl { f64::NAN } else { a[0] },
        };
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn running_cost(&self, _t: f64, x: &[f64], a: &[f64], _m: &EmpiricalMeasure) -> f64 {
        self.c0 + self.c1 * x[0] + self.c2 * a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], _m: &EmpiricalMeasure) -> f64 {
        self.g1 * x[0]
    }
    fn drift_dx(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::Ou(th) => -th,
            _ => 0.0,
        };
    }
    fn drift_da(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = if matches!(self.drift, Drift::Ou(_) | Drift::ControlNanAbove(_)) { 1.0 } else { 0.0 };
    }
    fn running_cost_dx(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.c1;
    }
    fn running_cost_da(&self, _t: f64, _x: &[f64], a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.fa_scale * 2.0 * self.c2 * a[0];
    }
    fn terminal_cost_dx(&self, _x: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.g1;
    }
    fn has_control_kernels(&self) -> bool {
        matches!(self.drift, Drift::MeanControl(_))
    }
    fn drift_dnu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::MeanControl(l) => l,
            _ => 0.0,
        };
    }
    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = match self.init {
            Init::Point(x0) => x0,
            Init::Normal => mfcontrol::rng::BoxMuller::new().sample(rng),
        };
    }
    fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-3.0], vec![3.0])
    }
}

pub fn toy_policy(p: &Toy, nodes: usize, steps: usize, value: f64) -> PolicyField {
    let g = SpaceTimeGrid::new(p.horizon, steps, vec![-3.0], vec![3.0], vec![nodes]).unwrap();
    PolicyField(GridField::constant(g, 1, value))
}

/// Random drift and a diagonally dominant covariance for the grid's meshes.
pub fn random_coefficients(g: &SpaceTimeGrid, rng: &mut ChaCha8Rng) -> Vec<NodeCoefficients> {
    let d = g.dim();
    (0..g.node_count())
        .map(|_| {
            let drift = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut cov = vec![0.0; d * d];
            for i in 0..d {
                cov[i * d + i] = rng.gen_range(0.0..2.0);
            }
            for i in 0..d {
                for j in (i + 1)..d {
                    // |c| / (h_i h_j) <= (sigma_ii / h_i^2) / (d - 1) keeps every axis weight nonnegative
                    let bound = (cov[i * d + i] / g.mesh(i).powi(2)).min(cov[j * d + j] / g.mesh(j).powi(2))
                        * g.mesh(i)
                        * g.mesh(j)
                        / (d - 1) as f64;
                    let c = rng.gen_range(-1.0..1.0) * bound;
                    cov[i * d + j] = c;
                    cov[j * d + i] = c;
                }
            }
            NodeCoefficients { drift, covariance: cov }
        })
        .collect()
}

pub fn random_operator(g: &SpaceTimeGrid, seed: u64) -> MonotoneOperator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_coefficients(g, &mut rng);
    MonotoneOperator::assemble(g, |k| {
        Ok(NodeCoefficients { drift: c[k].drift.clone(), covariance: c[k].covariance.clone() })
    })
    .unwrap()
}

/// `u = e^{-t} sin x` solves `u_t + u_xx + b u_x = -f` with `f = 2u - b e^{-t} cos x`.
pub fn manufactured_error(n: usize) -> f64 {
    let b = 0.5;
    let pi = std::f64::consts::PI;
    let h = pi / (n - 1) as f64;
    let m = (1.0 / h).round() as usize;
    let g = SpaceTimeGrid::new(1.0, m, vec![0.0], vec![pi], vec![n]).unwrap();
    let exact = |t: f64, x: f64| (-t).exp() * x.sin();
    let terminal: Vec<f64> = (0..n).map(|k| exact(1.0, g.node_point(k)[0])).collect();
    let op = MonotoneOperator::assemble(&g, |_| Ok(NodeCoefficients { drift: vec![b], covariance: vec![2.0] })).unwrap();
    let u = solve_backward(
        &g,
        1,
        &terminal,
        |j, k, out| out[0] = exact(g.time(j), g.node_point(k)[0]),
        |_| Ok(op.clone()),
        |j, _| {
            let t = g.time(j);
            Ok((0..n)
                .map(|k| {
                    let x = g.node_point(k)[0];
                    2.0 * exact(t, x) - b * (-t).exp() * x.cos()
                })
                .collect())
        },
    )
    .unwrap();
    let err: f64 = (0..n).map(|k| (u.at(0, k)[0] - exact(0.0, g.node_point(k)[0])).powi(2)).sum::<f64>() * h;
    err.sqrt()
}

