//! Explicit source terms of the adjoint system at one time slice.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interp_slice, SpaceTimeGrid};
use crate::problem::{Dims, EmpiricalMeasure, KernelSlice, MfcProblem};

/// Everything a slice-`j` assembly needs besides the node itself: the
/// (possibly subsampled) measure and the adjoint fields at its particles.
pub struct SliceData {
    pub t: f64,
    pub measure: EmpiricalMeasure,
    /// `N x d`
    pub u_particles: Vec<f64>,
    /// `N x (d n)`, present when the diffusion depends on the state.
    pub v_particles: Option<Vec<f64>>,
}

impl SliceData {
    /// Interpolates the grid slices `u` (`nodes x d`) and optionally `v`
    /// (`nodes x d n`) at every particle of `measure`.
    pub fn new(grid: &SpaceTimeGrid, t: f64, measure: EmpiricalMeasure, u: &[f64], v: Option<&[f64]>, dims: Dims) -> Self {
        let d = dims.state;
        let dn = dims.state * dims.noise;
        let n = measure.len();
        let mut u_particles = vec![0.0; n * d];
        u_particles
            .par_chunks_mut(d)
            .enumerate()
            .with_min_len(256)
            .for_each(|(l, out)| interp_slice(grid, d, u, measure.state(l), out));
        let v_particles = v.map(|v| {
            let mut vp = vec![0.0; n * dn];
            vp.par_chunks_mut(dn)
                .enumerate()
                .with_min_len(256)
                .for_each(|(l, out)| interp_slice(grid, dn, v, measure.state(l), out));
            vp
        });
        Self {
            t,
            measure,
            u_particles,
            v_particles,
        }
    }

    pub fn kernel_slice(&self) -> KernelSlice<'_> {
        KernelSlice::new(self.t, &self.measure, &self.u_particles)
    }
}

/// `v = (grad_x u) sigma` on a grid slice, by central differences
/// (one-sided at the boundary).
pub fn v_field<P: MfcProblem + ?Sized>(
    p: &P,
    grid: &SpaceTimeGrid,
    t: f64,
    u: &[f64],
    controls: &[f64],
    measure: &EmpiricalMeasure,
) -> Vec<f64> {
    let Dims { state: d, control: k, noise: nn } = p.dims();
    let mut v = vec![0.0; grid.node_count() * d * nn];
    v.par_chunks_mut(d * nn).enumerate().with_min_len(64).for_each(|(node, out)| {
        let x = grid.node_point(node);
        let mut sig = vec![0.0; d * nn];
        p.diffusion(t, &x, &controls[node * k..(node + 1) * k], measure, &mut sig);
        let grad = node_gradient(grid, u, d, node);
        for r in 0..d {
            for w in 0..nn {
                out[r * nn + w] = (0..d).map(|s| grad[r * d + s] * sig[s * nn + w]).sum();
            }
        }
    });
    v
}

/// `[r][s] = d u_r / d x_s` at `node`.
fn node_gradient(grid: &SpaceTimeGrid, u: &[f64], d: usize, node: usize) -> Vec<f64> {
    let mut idx = vec![0; d];
    grid.multi_index(node, &mut idx);
    let mut g = vec![0.0; d * d];
    for s in 0..d {
        let st = grid.strides()[s];
        let h = grid.mesh(s);
        let (lo, hi, span) = if idx[s] == 0 {
            (node, node + st, h)
        } else if idx[s] + 1 == grid.nodes()[s] {
            (node - st, node, h)
        } else {
            (node - st, node + st, 2.0 * h)
        };
        for r in 0..d {
            g[r * d + s] = (u[hi * d + r] - u[lo * d + r]) / span;
        }
    }
    g
}

/// One-sided difference of `u_r` along `s`, forward when `c > 0`.
fn upwind_diff(grid: &SpaceTimeGrid, u: &[f64], d: usize, node: usize, r: usize, s: usize, c: f64) -> f64 {
    let st = grid.strides()[s];
    let h = grid.mesh(s);
    if c > 0.0 {
        (u[(node + st) * d + r] - u[node * d + r]) / h
    } else {
        (u[node * d + r] - u[(node - st) * d + r]) / h
    }
}

/// `(d_x b)^T u + d_x f + E[kernel terms]` at one point.
fn local_source<P: MfcProblem + ?Sized>(p: &P, ks: &KernelSlice, x: &[f64], a: &[f64], u: &[f64], out: &mut [f64]) {
    let d = x.len();
    let m = ks.measure;
    let mut jac = vec![0.0; d * d];
    let mut fdx = vec![0.0; d];
    let mut nl = vec![0.0; d];
    p.drift_dx(ks.t, x, a, m, &mut jac);
    p.running_cost_dx(ks.t, x, a, m, &mut fdx);
    p.nonlocal_state_source(ks, x, a, &mut nl);
    for i in 0..d {
        out[i] = fdx[i] + nl[i] + (0..d).map(|r| jac[i * d + r] * u[r]).sum::<f64>();
    }
}

/// The source without gradient-coupled terms at arbitrary points
/// (`points` is `P x d`, `controls` is `P x k`, `u` is `P x d`).
pub fn assemble_source_at<P: MfcProblem + ?Sized>(
    p: &P,
    slice: &SliceData,
    points: &[f64],
    controls: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    let Dims { state: d, control: k, .. } = p.dims();
    let ks = slice.kernel_slice();
    let mut src = vec![0.0; points.len()];
    src.par_chunks_mut(d).enumerate().with_min_len(64).for_each(|(l, out)| {
        local_source(
            p,
            &ks,
            &points[l * d..(l + 1) * d],
            &controls[l * k..(l + 1) * k],
            &u[l * d..(l + 1) * d],
            out,
        );
    });
    if let Some(i) = src.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            callback: "adjoint source".into(),
            input: format!("t={}, particle {}", slice.t, i / d),
        });
    }
    Ok(src)
}

/// Source `f(t_j, x_k)` at every interior node, `nodes x d` (zero on the
/// boundary). `controls` holds `psi(t_j, x_k)` per node and `u` is `U^j`.
pub fn assemble_source<P: MfcProblem + ?Sized>(
    p: &P,
    grid: &SpaceTimeGrid,
    controls: &[f64],
    u: &[f64],
    slice: &SliceData,
) -> Result<Vec<f64>> {
    let Dims { state: d, control: k, noise: nn } = p.dims();
    let nodes = grid.node_count();
    if u.len() != nodes * d {
        return Err(Error::Dimension {
            context: "adjoint slice",
            expected: nodes * d,
            got: u.len(),
        });
    }
    if controls.len() != nodes * k {
        return Err(Error::Dimension {
            context: "policy slice",
            expected: nodes * k,
            got: controls.len(),
        });
    }
    let state_dep = p.diffusion_state_dependent();
    let ks = slice.kernel_slice();
    let m = &slice.measure;
    let t = slice.t;
    let mut src = vec![0.0; nodes * d];
    src.par_chunks_mut(d).enumerate().with_min_len(32).for_each(|(node, out)| {
        if grid.is_boundary(node) {
            return;
        }
        let x = grid.node_point(node);
        let a = &controls[node * k..(node + 1) * k];
        local_source(p, &ks, &x, a, &u[node * d..(node + 1) * d], out);
        if state_dep {
            let dn = d * nn;
            let mut sig = vec![0.0; dn];
            let mut sdx = vec![0.0; d * dn];
            p.diffusion(t, &x, a, m, &mut sig);
            p.diffusion_dx(t, &x, a, m, &mut sdx);
            for i in 0..d {
                // sum_{r,w} d_i sigma_rw v_rw with v = (grad u) sigma, upwinded per coefficient
                for r in 0..d {
                    for s in 0..d {
                        let c: f64 = (0..nn).map(|w| sdx[i * dn + r * nn + w] * sig[s * nn + w]).sum();
                        if c != 0.0 {
                            out[i] += c * upwind_diff(grid, u, d, node, r, s, c);
                        }
                    }
                }
            }
            if let Some(vp) = &slice.v_particles {
                let mut ker = vec![0.0; d * dn];
                let n = m.len();
                for l in 0..n {
                    p.diffusion_dmu(t, m.state(l), m.control(l), m, &x, a, &mut ker);
                    let vl = &vp[l * dn..(l + 1) * dn];
                    for i in 0..d {
                        out[i] += (0..dn).map(|c| ker[i * dn + c] * vl[c]).sum::<f64>() / n as f64;
                    }
                }
            }
        }
    });
    if let Some(i) = src.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            callback: "adjoint source".into(),
            input: format!("t={t}, node {}", i / d),
        });
    }
    Ok(src)
}
