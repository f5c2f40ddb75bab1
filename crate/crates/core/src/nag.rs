//! Accelerated proximal-gradient outer loop on feedback policies.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd::source::SliceData;
use crate::fd::sweep::{backward_sweep, slice_measures, AdjointField, SweepOptions};
use crate::grid::{GridField, PolicyField, SpaceTimeGrid};
use crate::particles::{estimate_cost, simulate, CostEstimate, ParticleEnsemble};
use crate::problem::{Dims, MfcProblem};
use crate::prox::ProxSpec;
use crate::rng::derive_seed;

/// Iterates of the accelerated scheme.
#[derive(Debug, Clone)]
pub struct NagState {
    pub m: usize,
    pub phi: PolicyField,
    pub psi: PolicyField,
    pub phi_prev: PolicyField,
    pub tau: f64,
    pub momentum_on: bool,
    /// Upper bound on the momentum coefficient, for ablations.
    pub momentum_cap: Option<f64>,
}

impl NagState {
    pub fn new(initial: PolicyField, tau: f64, momentum_on: bool) -> Self {
        Self {
            m: 0,
            phi: initial.clone(),
            psi: initial.clone(),
            phi_prev: initial,
            tau,
            momentum_on,
            momentum_cap: None,
        }
    }

    /// `m / (m + 3)`, capped if requested; zero without momentum.
    pub fn momentum(&self) -> f64 {
        if !self.momentum_on {
            return 0.0;
        }
        let c = self.m as f64 / (self.m as f64 + 3.0);
        self.momentum_cap.map_or(c, |cap| c.min(cap))
    }
}

/// `phi <- prox(psi - tau grad)`, `psi <- phi + m/(m+3) (phi - phi_old)`.
pub fn nag_step(state: &NagState, gradient: &GridField, prox: &ProxSpec) -> Result<NagState> {
    if gradient.grid() != state.psi.grid() || gradient.components() != state.psi.control_dim() {
        return Err(Error::InvalidArgument("gradient and policy grids differ".into()));
    }
    if !(state.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("stepsize must be positive, got {}", state.tau)));
    }
    let k = state.psi.control_dim();
    let tau = state.tau;
    let beta = state.momentum();
    let psi = state.psi.field().values();
    let phi_old = state.phi.field().values();
    let g = gradient.values();
    let mut phi_new = vec![0.0; psi.len()];
    let mut psi_new = vec![0.0; psi.len()];
    phi_new
        .par_chunks_mut(k)
        .zip(psi_new.par_chunks_mut(k))
        .enumerate()
        .with_min_len(256)
        .for_each(|(i, (ph, ps))| {
            let z: Vec<f64> = (0..k).map(|p| psi[i * k + p] - tau * g[i * k + p]).collect();
            prox.apply(tau, &z, ph);
            for p in 0..k {
                ps[p] = ph[p] + beta * (ph[p] - phi_old[i * k + p]);
            }
        });
    let grid = state.psi.grid().clone();
    let phi = PolicyField(GridField::from_values(grid.clone(), k, phi_new)?);
    let psi = if state.momentum_on {
        PolicyField(GridField::from_values(grid, k, psi_new)?)
    } else {
        phi.clone()
    };
    Ok(NagState {
        m: state.m + 1,
        phi_prev: state.phi.clone(),
        phi,
        psi,
        tau,
        momentum_on: state.momentum_on,
        momentum_cap: state.momentum_cap,
    })
}

/// `grad F(psi)` on every node of slice `j`, `nodes x k`.
pub fn gradient_slice<P: MfcProblem + ?Sized>(
    p: &P,
    psi: &PolicyField,
    adjoint: &AdjointField,
    slice: &SliceData,
    j: usize,
) -> Result<Vec<f64>> {
    let Dims { state: d, control: k, noise: nn } = p.dims();
    let grid = psi.grid();
    let controls = psi.field().slice(j);
    let u = adjoint.u.slice(j);
    let v = adjoint.v.as_ref().map(|v| v.slice(j));
    let ks = slice.kernel_slice();
    let m = &slice.measure;
    let t = slice.t;
    let dn = d * nn;
    let mut out = vec![0.0; grid.node_count() * k];
    out.par_chunks_mut(k).enumerate().with_min_len(32).for_each(|(node, g)| {
        let x = grid.node_point(node);
        let a = &controls[node * k..(node + 1) * k];
        let un = &u[node * d..(node + 1) * d];
        let mut bda = vec![0.0; k * d];
        let mut fda = vec![0.0; k];
        let mut nl = vec![0.0; k];
        p.drift_da(t, &x, a, m, &mut bda);
        p.running_cost_da(t, &x, a, m, &mut fda);
        p.nonlocal_control_gradient(&ks, &x, a, &mut nl);
        for q in 0..k {
            g[q] = fda[q] + nl[q] + (0..d).map(|r| bda[q * d + r] * un[r]).sum::<f64>();
        }
        if let Some(v) = v {
            let vn = &v[node * dn..(node + 1) * dn];
            let mut sda = vec![0.0; k * dn];
            p.diffusion_da(t, &x, a, m, &mut sda);
            for q in 0..k {
                g[q] += (0..dn).map(|c| sda[q * dn + c] * vn[c]).sum::<f64>();
            }
            if let Some(vp) = &slice.v_particles {
                let n = m.len();
                let mut ker = vec![0.0; k * dn];
                for l in 0..n {
                    p.diffusion_dnu(t, m.state(l), m.control(l), m, &x, a, &mut ker);
                    let vl = &vp[l * dn..(l + 1) * dn];
                    for q in 0..k {
                        g[q] += (0..dn).map(|c| ker[q * dn + c] * vl[c]).sum::<f64>() / n as f64;
                    }
                }
            }
        }
    });
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            callback: "gradient map".into(),
            input: format!("t={t}, node {}", i / k),
        });
    }
    Ok(out)
}

/// `grad F(psi)` on the whole space-time grid.
pub fn gradient_field<P: MfcProblem + ?Sized>(
    p: &P,
    psi: &PolicyField,
    ens: &ParticleEnsemble,
    adjoint: &AdjointField,
    opts: &SweepOptions,
) -> Result<GridField> {
    let grid = psi.grid();
    let dims = p.dims();
    let measures = slice_measures(ens, opts);
    let mut g = GridField::zeros(grid.clone(), dims.control);
    for (j, m) in measures.into_iter().enumerate() {
        let slice = SliceData::new(
            grid,
            grid.time(j),
            m,
            adjoint.u.slice(j),
            adjoint.v.as_ref().map(|v| v.slice(j)),
            dims,
        );
        let gj = gradient_slice(p, psi, adjoint, &slice, j)?;
        g.slice_mut(j).copy_from_slice(&gj);
    }
    Ok(g)
}

/// `grad F(psi)(t_j, x_k)` at a single node.
pub fn gradient_map<P: MfcProblem + ?Sized>(
    p: &P,
    psi: &PolicyField,
    ens: &ParticleEnsemble,
    adjoint: &AdjointField,
    j: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let grid = psi.grid();
    let dims = p.dims();
    let slice = SliceData::new(
        grid,
        grid.time(j),
        ens.measure(j),
        adjoint.u.slice(j),
        adjoint.v.as_ref().map(|v| v.slice(j)),
        dims,
    );
    let g = gradient_slice(p, psi, adjoint, &slice, j)?;
    Ok(g[k * dims.control..(k + 1) * dims.control].to_vec())
}

/// Discrete `L^2([0,T] x D)` norm of a grid field.
pub fn field_norm(f: &GridField) -> f64 {
    let g = f.grid();
    (f.values().iter().map(|v| v * v).sum::<f64>() * g.dt() * g.cell_volume()).sqrt()
}

/// Which adjoint approximation feeds the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Finite differences with momentum.
    Fipde,
    /// Finite differences without momentum.
    Ipde,
    /// Cell-mean regression on particles with momentum.
    Emreg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fipde => "fipde",
            Method::Ipde => "ipde",
            Method::Emreg => "emreg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fipde" => Some(Method::Fipde),
            "ipde" => Some(Method::Ipde),
            "emreg" => Some(Method::Emreg),
            _ => None,
        }
    }

    pub fn momentum(self) -> bool {
        self != Method::Ipde
    }
}

/// Solver-level settings of one run.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub grid: SpaceTimeGrid,
    pub particles: usize,
    pub eval_particles: usize,
    pub tau: f64,
    pub iterations: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub method: Method,
    pub momentum_cap: Option<f64>,
    pub kernel_subsample: Option<usize>,
    pub initial_policy: Option<PolicyField>,
    /// Record wall-clock times (disable for byte-reproducible reports).
    pub timings: bool,
    pub keep_final_ensemble: bool,
}

impl SolverConfig {
    pub fn new(grid: SpaceTimeGrid, particles: usize, tau: f64, iterations: usize, seed: u64) -> Self {
        Self {
            grid,
            particles,
            eval_particles: particles,
            tau,
            iterations,
            seed,
            eval_seed: derive_seed(seed, u64::MAX),
            method: Method::Fipde,
            momentum_cap: None,
            kernel_subsample: None,
            initial_policy: None,
            timings: true,
            keep_final_ensemble: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub m: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub stderr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Per-iteration diagnostics and final policies of a run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub eval_seed: u64,
    pub records: Vec<IterationRecord>,
    pub phi: PolicyField,
    pub psi: PolicyField,
    pub last_adjoint: Option<AdjointField>,
    pub final_ensemble: Option<ParticleEnsemble>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn final_cost(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.j)
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.j).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["m", "J", "stderr", "grad_norm", "wall_ms"])
            .map_err(|e| Error::Csv(e.to_string()))?;
        for r in &self.records {
            wr.write_record([
                r.m.to_string(),
                crate::grid::fmt17(r.j),
                crate::grid::fmt17(r.stderr),
                crate::grid::fmt17(r.grad_norm),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(|e| Error::Csv(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// A run that stopped early; `report` holds the completed iterations.
#[derive(Debug)]
pub struct RunFailure {
    pub report: Box<RunReport>,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed records)", self.error, self.report.records.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Produces the adjoint field for the current policy and its particles.
pub trait AdjointSolver {
    fn solve(&mut self, p: &dyn MfcProblem, psi: &PolicyField, ens: &ParticleEnsemble) -> Result<AdjointField>;

    /// Per `(j, node)` flags of nodes the last solve knows nothing about;
    /// the policy is left untouched there.
    fn frozen_nodes(&self) -> Option<Vec<bool>> {
        None
    }
}

/// The finite-difference backward sweep.
pub struct FdAdjoint {
    pub opts: SweepOptions,
}

impl AdjointSolver for FdAdjoint {
    fn solve(&mut self, p: &dyn MfcProblem, psi: &PolicyField, ens: &ParticleEnsemble) -> Result<AdjointField> {
        backward_sweep(p, psi, ens, &self.opts)
    }
}

/// `J(policy)` under a fresh simulation with the given seed.
pub fn evaluate_policy(p: &dyn MfcProblem, policy: &PolicyField, n: usize, seed: u64) -> Result<(CostEstimate, ParticleEnsemble)> {
    let ens = simulate(p, policy, n, policy.grid().time_steps(), seed)?;
    Ok((estimate_cost(p, &ens)?, ens))
}

fn validate(p: &dyn MfcProblem, cfg: &SolverConfig) -> Result<()> {
    let dims = p.dims();
    if cfg.grid.dim() != dims.state {
        return Err(Error::Dimension {
            context: "solver grid dimension",
            expected: dims.state,
            got: cfg.grid.dim(),
        });
    }
    if (cfg.grid.horizon() - p.horizon()).abs() > 1e-12 * p.horizon() {
        return Err(Error::InvalidArgument(format!(
            "grid horizon {} differs from problem horizon {}",
            cfg.grid.horizon(),
            p.horizon()
        )));
    }
    if !(cfg.tau > 0.0) || cfg.particles == 0 || cfg.eval_particles == 0 {
        return Err(Error::InvalidArgument("tau, particles and eval_particles must be positive".into()));
    }
    if let Some(init) = &cfg.initial_policy {
        if init.grid() != &cfg.grid || init.control_dim() != dims.control {
            return Err(Error::InvalidArgument("initial policy does not match the solver grid".into()));
        }
    }
    Ok(())
}

/// Runs the outer loop with the given adjoint solver.
pub fn run_with(p: &dyn MfcProblem, cfg: &SolverConfig, solver: &mut dyn AdjointSolver) -> std::result::Result<RunReport, RunFailure> {
    let dims = p.dims();
    let initial = cfg
        .initial_policy
        .clone()
        .unwrap_or_else(|| PolicyField::zeros(cfg.grid.clone(), dims.control));
    let mut report = RunReport {
        method: cfg.method,
        seed: cfg.seed,
        eval_seed: cfg.eval_seed,
        records: Vec::new(),
        phi: initial.clone(),
        psi: initial.clone(),
        last_adjoint: None,
        final_ensemble: None,
        warnings: Vec::new(),
    };
    if let Err(error) = validate(p, cfg) {
        return Err(RunFailure {
            report: Box::new(report),
            error,
        });
    }
    let prox = p.nonsmooth_cost();
    let mut state = NagState::new(initial, cfg.tau, cfg.method.momentum());
    state.momentum_cap = cfg.momentum_cap;
    let opts = SweepOptions {
        kernel_subsample: cfg.kernel_subsample,
        seed: derive_seed(cfg.seed, 0x6b65726e),
    };
    let fail = |report: RunReport, iteration: usize, e: Error| RunFailure {
        report: Box::new(report),
        error: Error::Iteration {
            iteration,
            source: Box::new(e),
        },
    };

    let t0 = Instant::now();
    match evaluate_policy(p, &state.phi, cfg.eval_particles, cfg.eval_seed) {
        Ok((c, ens)) => {
            report.records.push(IterationRecord {
                m: 0,
                j: c.mean,
                stderr: c.std_error,
                grad_norm: 0.0,
                wall_ms: if cfg.timings { t0.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            });
            if cfg.keep_final_ensemble {
                report.final_ensemble = Some(ens);
            }
        }
        Err(e) => return Err(fail(report, 0, e)),
    }

    for m in 0..cfg.iterations {
        let t0 = Instant::now();
        let step = (|| -> Result<(NagState, f64, AdjointField, CostEstimate, ParticleEnsemble)> {
            let train_seed = derive_seed(cfg.seed, m as u64);
            let ens = simulate(p, &state.psi, cfg.particles, cfg.grid.time_steps(), train_seed)?;
            let adjoint = solver.solve(p, &state.psi, &ens)?;
            let mut grad = gradient_field(p, &state.psi, &ens, &adjoint, &opts)?;
            let frozen = solver.frozen_nodes();
            if let Some(f) = &frozen {
                freeze(&mut grad, f, |_| 0.0);
            }
            let mut next = nag_step(&state, &grad, &prox)?;
            if let Some(f) = &frozen {
                let (old_phi, old_psi) = (state.phi.field().values(), state.psi.field().values());
                freeze(next.phi.field_mut(), f, |i| old_phi[i]);
                freeze(next.psi.field_mut(), f, |i| old_psi[i]);
            }
            let (cost, eval_ens) = evaluate_policy(p, &next.phi, cfg.eval_particles, cfg.eval_seed)?;
            Ok((next, field_norm(&grad), adjoint, cost, eval_ens))
        })();
        match step {
            Ok((next, gnorm, adjoint, cost, eval_ens)) => {
                state = next;
                for w in &adjoint.warnings {
                    if !report.warnings.contains(w) {
                        report.warnings.push(w.clone());
                    }
                }
                report.records.push(IterationRecord {
                    m: m + 1,
                    j: cost.mean,
                    stderr: cost.std_error,
                    grad_norm: gnorm,
                    wall_ms: if cfg.timings { t0.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
                });
                report.phi = state.phi.clone();
                report.psi = state.psi.clone();
                report.last_adjoint = Some(adjoint);
                if cfg.keep_final_ensemble {
                    report.final_ensemble = Some(eval_ens);
                }
            }
            Err(e) => return Err(fail(report, m + 1, e)),
        }
    }
    Ok(report)
}

fn freeze(field: &mut GridField, frozen: &[bool], value: impl Fn(usize) -> f64) {
    let k = field.components();
    for (node, _) in frozen.iter().enumerate().filter(|(_, f)| **f) {
        for i in node * k..(node + 1) * k {
            field.values_mut()[i] = value(i);
        }
    }
}

/// Runs FIPDE or IPDE (finite-difference adjoint) per `cfg.method`.
pub fn run(p: &dyn MfcProblem, cfg: &SolverConfig) -> std::result::Result<RunReport, RunFailure> {
    match cfg.method {
        Method::Emreg => crate::emreg::run_emreg(p, cfg),
        _ => {
            let mut solver = FdAdjoint {
                opts: SweepOptions {
                    kernel_subsample: cfg.kernel_subsample,
                    seed: derive_seed(cfg.seed, 0x6b65726e),
                },
            };
            run_with(p, cfg, &mut solver)
        }
    }
}
