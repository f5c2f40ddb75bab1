//! Semi-implicit backward sweep for the adjoint decoupling field.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fd::banded::ImplicitSystem;
use crate::fd::operator::{MonotoneOperator, NodeCoefficients};
use crate::fd::source::{assemble_source, v_field, SliceData};
use crate::grid::{GridField, PolicyField, SpaceTimeGrid};
use crate::particles::ParticleEnsemble;
use crate::problem::{terminal_adjoint, Dims, EmpiricalMeasure, MfcProblem};
use crate::rng::derive_seed;

/// Decoupling fields `u` (`d` components) and, when the diffusion depends
/// on the state, `v = (grad u) sigma` (`d n` components).
#[derive(Debug, Clone)]
pub struct AdjointField {
    pub u: GridField,
    pub v: Option<GridField>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepOptions {
    /// Particles used for node-level measure evaluations; `None` uses all.
    pub kernel_subsample: Option<usize>,
    pub seed: u64,
}

/// Slice measures used by the PDE assembly, subsampled if requested.
pub fn slice_measures(ens: &ParticleEnsemble, opts: &SweepOptions) -> Vec<EmpiricalMeasure> {
    (0..=ens.steps())
        .map(|j| {
            let m = ens.measure(j);
            match opts.kernel_subsample {
                Some(c) if c < m.len() => m.subsample(c, derive_seed(opts.seed, j as u64)),
                _ => m,
            }
        })
        .collect()
}

/// Stencil of the generator at slice `j`: drift and `sigma sigma^T` at
/// `(t_j, x_k, psi(t_j, x_k), mu_j)`.
pub fn build_operator<P: MfcProblem + ?Sized>(
    p: &P,
    policy: &PolicyField,
    measure: &EmpiricalMeasure,
    j: usize,
) -> Result<MonotoneOperator> {
    let grid = policy.grid();
    let Dims { state: d, control: k, noise: nn } = p.dims();
    let t = grid.time(j);
    let controls = policy.field().slice(j);
    MonotoneOperator::assemble(grid, |node| {
        let x = grid.node_point(node);
        let a = &controls[node * k..(node + 1) * k];
        let mut drift = vec![0.0; d];
        let mut sig = vec![0.0; d * nn];
        p.drift(t, &x, a, measure, &mut drift);
        p.diffusion(t, &x, a, measure, &mut sig);
        let mut covariance = vec![0.0; d * d];
        for r in 0..d {
            for s in 0..d {
                covariance[r * d + s] = (0..nn).map(|w| sig[r * nn + w] * sig[s * nn + w]).sum();
            }
        }
        Ok(NodeCoefficients { drift, covariance })
    })
}

/// Generic backward recursion
/// `U^{j-1} - dt L^{j-1} U^{j-1} = U^j + dt S^j(U^j)` with Dirichlet rows.
///
/// `terminal` is `nodes x c`; `boundary(j, node, out)` supplies Dirichlet
/// values at `t_j`; `source(j, U^j)` returns `nodes x c`.
pub fn solve_backward(
    grid: &SpaceTimeGrid,
    components: usize,
    terminal: &[f64],
    boundary: impl Fn(usize, usize, &mut [f64]),
    mut operator: impl FnMut(usize) -> Result<MonotoneOperator>,
    mut source: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<GridField> {
    let c = components;
    let nodes = grid.node_count();
    let dt = grid.dt();
    let mut field = GridField::zeros(grid.clone(), c);
    field.slice_mut(grid.time_steps()).copy_from_slice(terminal);
    for j in (1..=grid.time_steps()).rev() {
        let src = source(j, field.slice(j))?;
        let mut rhs = vec![0.0; nodes * c];
        let cur = field.slice(j);
        for node in 0..nodes {
            let r = &mut rhs[node * c..(node + 1) * c];
            if grid.is_boundary(node) {
                boundary(j - 1, node, r);
            } else {
                for i in 0..c {
                    r[i] = cur[node * c + i] + dt * src[node * c + i];
                }
            }
        }
        if let Some(at) = rhs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                callback: "adjoint right-hand side".into(),
                input: format!("j={j}, node {}", at / c),
            });
        }
        let op = operator(j - 1)?;
        let sys = ImplicitSystem::factor(&op, dt);
        let solved: Vec<Result<Vec<f64>>> = (0..c)
            .into_par_iter()
            .map(|i| {
                let b: Vec<f64> = (0..nodes).map(|node| rhs[node * c + i]).collect();
                sys.solve(&b)
            })
            .collect();
        let next = field.slice_mut(j - 1);
        for (i, sol) in solved.into_iter().enumerate() {
            for (node, v) in sol?.into_iter().enumerate() {
                next[node * c + i] = v;
            }
        }
    }
    Ok(field)
}

/// Solves the adjoint system for the policy `psi` and its particle law.
pub fn backward_sweep<P: MfcProblem + ?Sized>(
    p: &P,
    policy: &PolicyField,
    ens: &ParticleEnsemble,
    opts: &SweepOptions,
) -> Result<AdjointField> {
    let grid = policy.grid();
    let dims = p.dims();
    let d = dims.state;
    if ens.steps() != grid.time_steps() {
        return Err(Error::Dimension {
            context: "ensemble time steps vs grid",
            expected: grid.time_steps(),
            got: ens.steps(),
        });
    }
    if grid.dim() != d || ens.dims() != dims {
        return Err(Error::Dimension {
            context: "grid/ensemble state dimension",
            expected: d,
            got: grid.dim(),
        });
    }
    let mut warnings = Vec::new();
    let hmin = (0..d).map(|i| grid.mesh(i)).fold(f64::INFINITY, f64::min);
    if grid.dt() > hmin {
        warnings.push(format!(
            "time step {} exceeds the smallest mesh size {hmin}; stability guidance is dt = O(h)",
            grid.dt()
        ));
    }
    let measures = slice_measures(ens, opts);
    let nodes = grid.node_count();
    let m_last = grid.time_steps();

    let mut terminal = vec![0.0; nodes * d];
    terminal.par_chunks_mut(d).enumerate().with_min_len(64).for_each(|(node, out)| {
        terminal_adjoint(p, &measures[m_last], &grid.node_point(node), out);
    });
    if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            callback: "terminal_cost_dx".into(),
            input: format!("node {}", i / d),
        });
    }
    let boundary = |j: usize, node: usize, out: &mut [f64]| {
        let x = grid.node_point(node);
        if !p.boundary_value(grid.time(j), &x, out) {
            out.copy_from_slice(&terminal[node * d..(node + 1) * d]);
        }
    };
    let mut terminal_with_bc = terminal.clone();
    for node in (0..nodes).filter(|&k| grid.is_boundary(k)) {
        boundary(m_last, node, &mut terminal_with_bc[node * d..(node + 1) * d]);
    }

    let state_dep = p.diffusion_state_dependent();
    let mut v_slices: Vec<Option<Vec<f64>>> = vec![None; m_last + 1];
    let u = solve_backward(
        grid,
        d,
        &terminal_with_bc,
        boundary,
        |j| build_operator(p, policy, &measures[j], j),
        |j, uj| {
            let t = grid.time(j);
            let controls = policy.field().slice(j);
            let v = state_dep.then(|| v_field(p, grid, t, uj, controls, &measures[j]));
            let slice = SliceData::new(grid, t, measures[j].clone(), uj, v.as_deref(), dims);
            let s = assemble_source(p, grid, controls, uj, &slice)?;
            v_slices[j] = v;
            Ok(s)
        },
    )?;
    let v = if state_dep {
        let dn = d * dims.noise;
        let mut vf = GridField::zeros(grid.clone(), dn);
        for j in 0..=m_last {
            let vj = match v_slices[j].take() {
                Some(v) => v,
                None => v_field(p, grid, grid.time(j), u.slice(j), policy.field().slice(j), &measures[j]),
            };
            vf.slice_mut(j).copy_from_slice(&vj);
        }
        Some(vf)
    } else {
        None
    };
    Ok(AdjointField { u, v, warnings })
}
