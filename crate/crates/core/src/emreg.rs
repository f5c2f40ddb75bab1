//! Empirical-regression baseline: the adjoint field is regressed on
//! particle paths with an indicator basis over the grid cells.

use crate::error::Result;
use crate::fd::source::{assemble_source_at, SliceData};
use crate::fd::sweep::AdjointField;
use crate::grid::{GridField, PolicyField, SpaceTimeGrid};
use crate::nag::{run_with, AdjointSolver, RunFailure, RunReport, SolverConfig};
use crate::particles::ParticleEnsemble;
use crate::problem::{terminal_adjoint, MfcProblem};

/// Least squares on indicator functions: per-cell sample means of `d`-vector
/// targets. Returns `(means, counts)`; empty cells have mean 0.
pub fn cell_means(cells: &[usize], targets: &[f64], d: usize, ncells: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0; ncells * d];
    let mut counts = vec![0usize; ncells];
    for (l, &c) in cells.iter().enumerate() {
        counts[c] += 1;
        for i in 0..d {
            sums[c * d + i] += targets[l * d + i];
        }
    }
    for c in 0..ncells {
        if counts[c] > 0 {
            for i in 0..d {
                sums[c * d + i] /= counts[c] as f64;
            }
        }
    }
    (sums, counts)
}

/// Piecewise-constant adjoint on the cells of a grid, kept across
/// iterations so that unvisited cells carry their previous value.
#[derive(Debug, Clone)]
pub struct CellRegression {
    grid: SpaceTimeGrid,
    d: usize,
    cell_dims: Vec<usize>,
    /// `(M + 1) x cells x d`
    values: Vec<f64>,
    /// Samples per `(j, cell)` in the latest regression.
    counts: Vec<usize>,
    /// Whether `(j, cell)` has ever received a sample.
    visited: Vec<bool>,
}

impl CellRegression {
    pub fn new(grid: SpaceTimeGrid, d: usize) -> Self {
        let cell_dims: Vec<usize> = grid.nodes().iter().map(|n| n - 1).collect();
        let cells: usize = cell_dims.iter().product();
        let slices = grid.time_steps() + 1;
        Self {
            grid,
            d,
            cell_dims,
            values: vec![0.0; slices * cells * d],
            counts: vec![0; slices * cells],
            visited: vec![false; slices * cells],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.cell_dims.iter().product()
    }

    /// Cell containing `x` (clamped to the box).
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let mut c = 0;
        for i in 0..self.grid.dim() {
            let h = self.grid.mesh(i);
            let s = ((x[i] - self.grid.lo()[i]) / h).floor();
            let ci = if s <= 0.0 { 0 } else { (s as usize).min(self.cell_dims[i] - 1) };
            c = c * self.cell_dims[i] + ci;
        }
        c
    }

    pub fn value(&self, j: usize, cell: usize) -> &[f64] {
        let at = (j * self.cell_count() + cell) * self.d;
        &self.values[at..at + self.d]
    }

    pub fn count(&self, j: usize, cell: usize) -> usize {
        self.counts[j * self.cell_count() + cell]
    }

    pub fn visited(&self, j: usize, cell: usize) -> bool {
        self.visited[j * self.cell_count() + cell]
    }

    /// Replaces slice `j` cell values by the sample means where samples exist.
    fn fit(&mut self, j: usize, cells: &[usize], targets: &[f64]) {
        let nc = self.cell_count();
        let (means, counts) = cell_means(cells, targets, self.d, nc);
        for c in 0..nc {
            self.counts[j * nc + c] = counts[c];
            if counts[c] > 0 {
                self.visited[j * nc + c] = true;
                let at = (j * nc + c) * self.d;
                self.values[at..at + self.d].copy_from_slice(&means[c * self.d..(c + 1) * self.d]);
            }
        }
    }

    /// Cells touching `node` (up to `2^dim`).
    fn adjacent_cells(&self, node: usize) -> Vec<usize> {
        let dim = self.grid.dim();
        let mut idx = vec![0; dim];
        self.grid.multi_index(node, &mut idx);
        let mut out = Vec::with_capacity(1 << dim);
        'corner: for corner in 0..(1usize << dim) {
            let mut c = 0;
            for i in 0..dim {
                let ci = if corner >> i & 1 == 1 { idx[i] } else { idx[i].wrapping_sub(1) };
                if ci >= self.cell_dims[i] {
                    continue 'corner;
                }
                c = c * self.cell_dims[i] + ci;
            }
            out.push(c);
        }
        out
    }

    /// Node values (mean over adjacent ever-visited cells) and the flags of
    /// nodes with no such cell.
    pub fn node_field(&self) -> (GridField, Vec<bool>) {
        let nodes = self.grid.node_count();
        let slices = self.grid.time_steps() + 1;
        let mut field = GridField::zeros(self.grid.clone(), self.d);
        let mut frozen = vec![false; slices * nodes];
        let adjacency: Vec<Vec<usize>> = (0..nodes).map(|k| self.adjacent_cells(k)).collect();
        for j in 0..slices {
            for (node, adj) in adjacency.iter().enumerate() {
                let seen: Vec<usize> = adj.iter().copied().filter(|&c| self.visited(j, c)).collect();
                if seen.is_empty() {
                    frozen[j * nodes + node] = true;
                    continue;
                }
                let out = field.at_mut(j, node);
                for &c in &seen {
                    for (o, v) in out.iter_mut().zip(self.value(j, c)) {
                        *o += v / seen.len() as f64;
                    }
                }
            }
        }
        (field, frozen)
    }
}

/// One backward regression pass over the particle paths.
///
/// Terminal targets are `h(X_M)`. Earlier targets follow the explicit
/// one-step recursion `Y_j = Y_{j+1} + dt * source(t_j, X_j, Y_{j+1})`,
/// with `Y_{j+1}` read from the freshly fitted cell of `X_{j+1}`.
pub fn regress_adjoint<P: MfcProblem + ?Sized>(
    p: &P,
    policy: &PolicyField,
    ens: &ParticleEnsemble,
    reg: &mut CellRegression,
) -> Result<AdjointField> {
    let grid = policy.grid().clone();
    let dims = p.dims();
    let d = dims.state;
    let n = ens.len();
    let steps = ens.steps();
    let dt = ens.dt();
    let cells_at = |reg: &CellRegression, j: usize| -> Vec<usize> { (0..n).map(|l| reg.cell_of(ens.state(j, l))).collect() };

    let m_last = ens.measure(steps);
    let mut y = vec![0.0; n * d];
    for l in 0..n {
        terminal_adjoint(p, &m_last, ens.state(steps, l), &mut y[l * d..(l + 1) * d]);
    }
    let cells = cells_at(reg, steps);
    reg.fit(steps, &cells, &y);
    let mut next_cells = cells;

    for j in (0..steps).rev() {
        // Y_{j+1} as seen by each particle: its fitted cell value
        let mut y_next = vec![0.0; n * d];
        for l in 0..n {
            y_next[l * d..(l + 1) * d].copy_from_slice(reg.value(j + 1, next_cells[l]));
        }
        let measure = ens.measure(j);
        let slice = SliceData {
            t: ens.time(j),
            measure,
            u_particles: y_next.clone(),
            v_particles: None,
        };
        let src = assemble_source_at(p, &slice, ens.states(j), ens.controls(j), &y_next)?;
        let targets: Vec<f64> = y_next.iter().zip(&src).map(|(a, s)| a + dt * s).collect();
        let cells = cells_at(reg, j);
        reg.fit(j, &cells, &targets);
        next_cells = cells;
    }
    let (u, _) = reg.node_field();
    debug_assert_eq!(u.grid(), &grid);
    Ok(AdjointField {
        u,
        v: None,
        warnings: Vec::new(),
    })
}

/// Regression adjoint carried across iterations.
pub struct EmRegAdjoint {
    pub regression: CellRegression,
}

impl AdjointSolver for EmRegAdjoint {
    fn solve(&mut self, p: &dyn MfcProblem, psi: &PolicyField, ens: &ParticleEnsemble) -> Result<AdjointField> {
        regress_adjoint(p, psi, ens, &mut self.regression)
    }

    fn frozen_nodes(&self) -> Option<Vec<bool>> {
        Some(self.regression.node_field().1)
    }
}

/// The NAG loop with the regression adjoint in place of the PDE solve.
pub fn run_emreg(p: &dyn MfcProblem, cfg: &SolverConfig) -> std::result::Result<RunReport, RunFailure> {
    let mut solver = EmRegAdjoint {
        regression: CellRegression::new(cfg.grid.clone(), p.dims().state),
    };
    run_with(p, cfg, &mut solver)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_samples_average() {
        let (m, c) = cell_means(&[1, 1], &[1.0, 3.0], 1, 3);
        assert_eq!(m, vec![0.0, 2.0, 0.0]);
        assert_eq!(c, vec![0, 2, 0]);
    }

    #[test]
    fn carry_forward_and_visited() {
        let g = SpaceTimeGrid::new(1.0, 1, vec![0.0], vec![1.0], vec![3]).unwrap();
        let mut r = CellRegression::new(g, 1);
        r.fit(0, &[0], &[5.0]);
        r.fit(0, &[1], &[7.0]);
        assert_eq!(r.value(0, 0), &[5.0]);
        assert_eq!(r.value(0, 1), &[7.0]);
        assert_eq!(r.count(0, 0), 0);
        assert!(r.visited(0, 0) && !r.visited(1, 0));
        let (f, frozen) = r.node_field();
        assert_eq!(f.at(0, 1), &[6.0]);
        assert_eq!(f.at(0, 0), &[5.0]);
        assert!(frozen[3..].iter().all(|&b| b));
    }

    #[test]
    fn cells_clamp() {
        let g = SpaceTimeGrid::new(1.0, 1, vec![0.0, 0.0], vec![1.0, 2.0], vec![3, 5]).unwrap();
        let r = CellRegression::new(g, 2);
        assert_eq!(r.cell_of(&[-1.0, -1.0]), 0);
        assert_eq!(r.cell_of(&[0.6, 1.9]), 4 + 3);
        assert_eq!(r.cell_of(&[9.0, 9.0]), 7);
    }
}
