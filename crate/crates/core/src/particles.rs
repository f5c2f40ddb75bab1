//! Euler-Maruyama interacting-particle simulation and Monte-Carlo costs.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{fmt17, PolicyField};
use crate::problem::{Dims, EmpiricalMeasure, MfcProblem};
use crate::prox::ProxSpec;
use crate::rng::{particle_stream, BoxMuller};

/// Tolerance on box constraints when pricing controls.
pub const BOX_TOLERANCE: f64 = 1e-9;

/// `N` discrete-time state paths with the control applied at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    n: usize,
    steps: usize,
    horizon: f64,
    dims: Dims,
    seed: u64,
    /// `(M + 1) x N x d`
    states: Vec<f64>,
    /// `(M + 1) x N x k`
    controls: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn states(&self, j: usize) -> &[f64] {
        let w = self.n * self.dims.state;
        &self.states[j * w..(j + 1) * w]
    }

    pub fn controls(&self, j: usize) -> &[f64] {
        let w = self.n * self.dims.control;
        &self.controls[j * w..(j + 1) * w]
    }

    pub fn state(&self, j: usize, l: usize) -> &[f64] {
        let d = self.dims.state;
        &self.states(j)[l * d..(l + 1) * d]
    }

    pub fn control(&self, j: usize, l: usize) -> &[f64] {
        let k = self.dims.control;
        &self.controls(j)[l * k..(l + 1) * k]
    }

    /// The empirical measure of slice `j` (states and controls).
    pub fn measure(&self, j: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dims.state, self.dims.control, self.states(j).to_vec(), self.controls(j).to_vec())
            .expect("ensemble slices are nonempty")
    }

    /// Writes the `j, l, x1..xd, a1..ak` trajectory dump.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["j".to_string(), "l".to_string()];
        header.extend((1..=self.dims.state).map(|i| format!("x{i}")));
        header.extend((1..=self.dims.control).map(|i| format!("a{i}")));
        wr.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for j in 0..=self.steps {
            for l in 0..self.n {
                let mut row = vec![j.to_string(), l.to_string()];
                row.extend(self.state(j, l).iter().map(|&v| fmt17(v)));
                row.extend(self.control(j, l).iter().map(|&v| fmt17(v)));
                wr.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
            }
        }
        wr.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Feedback evaluated during simulation: `(j, t, x, mean_state, out)`.
pub type Feedback<'a> = dyn Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Sync + 'a;

/// Simulates `N` particles under the grid policy `psi`.
pub fn simulate<P: MfcProblem + ?Sized>(problem: &P, policy: &PolicyField, n: usize, steps: usize, seed: u64) -> Result<ParticleEnsemble> {
    let dims = problem.dims();
    let g = policy.grid();
    if g.dim() != dims.state {
        return Err(Error::Dimension {
            context: "policy grid dimension",
            expected: dims.state,
            got: g.dim(),
        });
    }
    if policy.control_dim() != dims.control {
        return Err(Error::Dimension {
            context: "policy control dimension",
            expected: dims.control,
            got: policy.control_dim(),
        });
    }
    if (g.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(Error::InvalidArgument(format!(
            "policy horizon {} differs from problem horizon {}",
            g.horizon(),
            problem.horizon()
        )));
    }
    simulate_feedback(problem, n, steps, seed, &|_, t, x, _, out| policy.eval(t, x, out))
}

/// Simulates `N` particles under an arbitrary feedback rule.
pub fn simulate_feedback<P: MfcProblem + ?Sized>(
    problem: &P,
    n: usize,
    steps: usize,
    seed: u64,
    feedback: &Feedback,
) -> Result<ParticleEnsemble> {
    if n == 0 || steps == 0 {
        return Err(Error::InvalidArgument(format!("need N >= 1 and M >= 1, got N = {n}, M = {steps}")));
    }
    let dims = problem.dims();
    let Dims { state: d, control: k, noise: nn } = dims;
    let horizon = problem.horizon();
    let dt = horizon / steps as f64;
    let sqdt = dt.sqrt();

    let mut states = vec![0.0; (steps + 1) * n * d];
    let mut controls = vec![0.0; (steps + 1) * n * k];
    let mut streams: Vec<(ChaCha8Rng, BoxMuller)> = (0..n).map(|l| (particle_stream(seed, l), BoxMuller::new())).collect();
    for (l, (rng, _)) in streams.iter_mut().enumerate() {
        problem.sample_initial(rng, &mut states[l * d..(l + 1) * d]);
    }

    for j in 0..=steps {
        let t = j as f64 * dt;
        let (done, rest) = states.split_at_mut((j + 1) * n * d);
        let cur = &done[j * n * d..];
        let mean = column_mean(cur, n, d);
        let ctl = &mut controls[j * n * k..(j + 1) * n * k];
        ctl.par_chunks_mut(k.max(1))
            .zip(cur.par_chunks(d))
            .with_min_len(256)
            .for_each(|(a, x)| feedback(j, t, x, &mean, a));
        if let Some(l) = ctl.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                step: j,
                particle: l / k.max(1),
                coefficient: "control",
            });
        }
        if j == steps {
            break;
        }
        let measure = EmpiricalMeasure::new(d, k, cur.to_vec(), ctl.to_vec())?;
        let next = &mut rest[..n * d];
        let failures: Vec<Option<&'static str>> = next
            .par_chunks_mut(d)
            .zip(streams.par_iter_mut())
            .enumerate()
            .with_min_len(256)
            .map(|(l, (xn, (rng, bm)))| {
                let x = &cur[l * d..(l + 1) * d];
                let a = &ctl[l * k..(l + 1) * k];
                let mut b = vec![0.0; d];
                let mut sig = vec![0.0; d * nn];
                problem.drift(t, x, a, &measure, &mut b);
                if b.iter().any(|v| !v.is_finite()) {
                    return Some("drift");
                }
                problem.diffusion(t, x, a, &measure, &mut sig);
                if sig.iter().any(|v| !v.is_finite()) {
                    return Some("diffusion");
                }
                let dw: Vec<f64> = (0..nn).map(|_| sqdt * bm.sample(rng)).collect();
                for r in 0..d {
                    let mut v = x[r] + b[r] * dt;
                    for w in 0..nn {
                        v += sig[r * nn + w] * dw[w];
                    }
                    xn[r] = v;
                }
                if xn.iter().any(|v| !v.is_finite()) {
                    return Some("state");
                }
                None
            })
            .collect();
        if let Some((l, c)) = failures.iter().enumerate().find_map(|(l, f)| f.map(|c| (l, c))) {
            return Err(Error::NonFiniteState {
                step: j,
                particle: l,
                coefficient: c,
            });
        }
    }
    Ok(ParticleEnsemble {
        n,
        steps,
        horizon,
        dims,
        seed,
        states,
        controls,
    })
}

fn column_mean(values: &[f64], n: usize, width: usize) -> Vec<f64> {
    let mut mean = vec![0.0; width];
    for row in values.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Monte-Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Per-particle costs `sum_j [f + l](t_j) dt + g(X_M)` (left-rectangle rule).
pub fn particle_costs<P: MfcProblem + ?Sized>(problem: &P, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
    let prox = problem.nonsmooth_cost();
    let dt = ens.dt();
    if let ProxSpec::Box { lo, hi } = &prox {
        for j in 0..ens.steps() {
            for l in 0..ens.len() {
                for (p, &v) in ens.control(j, l).iter().enumerate() {
                    if v < lo[p] - BOX_TOLERANCE || v > hi[p] + BOX_TOLERANCE {
                        return Err(Error::BoxViolation {
                            step: j,
                            particle: l,
                            value: v,
                            lo: lo[p],
                            hi: hi[p],
                        });
                    }
                }
            }
        }
    }
    let mut costs = vec![0.0; ens.len()];
    for j in 0..ens.steps() {
        let m = ens.measure(j);
        let t = ens.time(j);
        costs.par_iter_mut().enumerate().with_min_len(256).for_each(|(l, c)| {
            let a = ens.control(j, l);
            let ell = match &prox {
                // controls are inside the tolerance band here; price them at the box
                ProxSpec::Box { .. } => 0.0,
                other => other.penalty(a),
            };
            *c += (problem.running_cost(t, ens.state(j, l), a, &m) + ell) * dt;
        });
    }
    let m = ens.measure(ens.steps());
    costs
        .par_iter_mut()
        .enumerate()
        .with_min_len(256)
        .for_each(|(l, c)| *c += problem.terminal_cost(ens.state(ens.steps(), l), &m));
    if let Some(l) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            callback: "running_cost/terminal_cost".into(),
            input: format!("particle {l}"),
        });
    }
    Ok(costs)
}

/// Mean and standard error of the per-particle costs.
pub fn estimate_cost<P: MfcProblem + ?Sized>(problem: &P, ens: &ParticleEnsemble) -> Result<CostEstimate> {
    let costs = particle_costs(problem, ens)?;
    Ok(mean_and_stderr(&costs))
}

pub fn mean_and_stderr(values: &[f64]) -> CostEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    CostEstimate { mean, std_error }
}

/// Chunk size for deterministic reductions over particles.
const CHUNK: usize = 4096;

/// Particle average of `f(x, a)` at slice `j`, reduced in fixed chunks.
pub fn empirical_expect(ens: &ParticleEnsemble, j: usize, f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Sync) -> Vec<f64> {
    let n = ens.len();
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc: Vec<f64> = Vec::new();
            for l in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let v = f(ens.state(j, l), ens.control(j, l));
                if acc.is_empty() {
                    acc = v;
                } else {
                    acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                }
            }
            acc
        })
        .collect();
    let mut total = partials[0].clone();
    for p in &partials[1..] {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    total.iter_mut().for_each(|v| *v /= n as f64);
    total
}
