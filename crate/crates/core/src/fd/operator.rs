//! Monotone space discretization of the adjoint generator at one time slice.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;

/// `L[phi]_k = sum_q w_qk (phi_q - phi_k)` with all `w >= 0`; boundary rows
/// are Dirichlet and carry no stencil.
#[derive(Debug, Clone)]
pub struct MonotoneOperator {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    boundary: Vec<bool>,
}

/// Drift `b` (length `d`) and `sigma sigma^T` (`d x d`) at one node.
pub struct NodeCoefficients {
    pub drift: Vec<f64>,
    pub covariance: Vec<f64>,
}

impl MonotoneOperator {
    /// Assembles the upwind/central stencil from per-node coefficients.
    /// `coeffs(k)` is only called at interior nodes.
    pub fn assemble(grid: &SpaceTimeGrid, coeffs: impl Fn(usize) -> Result<NodeCoefficients> + Sync) -> Result<Self> {
        let d = grid.dim();
        let nodes = grid.node_count();
        let rows: Vec<Result<Vec<(usize, f64)>>> = (0..nodes)
            .into_par_iter()
            .with_min_len(64)
            .map(|k| {
                if grid.is_boundary(k) {
                    return Ok(Vec::new());
                }
                let c = coeffs(k)?;
                stencil_row(grid, k, d, &c)
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(nodes + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut boundary = Vec::with_capacity(nodes);
        row_ptr.push(0);
        for (k, row) in rows.into_iter().enumerate() {
            let row = row?;
            boundary.push(grid.is_boundary(k));
            for (q, w) in row {
                cols.push(q);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            row_ptr,
            cols,
            weights,
            boundary,
        })
    }

    pub fn len(&self) -> usize {
        self.boundary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary.is_empty()
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        self.boundary[k]
    }

    /// `(neighbor, weight)` pairs of row `k`.
    pub fn row(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[k]..self.row_ptr[k + 1];
        self.cols[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// Weight of neighbor `q` in row `k` (0 when absent).
    pub fn weight(&self, k: usize, q: usize) -> f64 {
        self.row(k).filter(|&(c, _)| c == q).map(|(_, w)| w).sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `L[phi]` at every node (0 on the boundary). `phi` is scalar per node.
    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|k| self.row(k).map(|(q, w)| w * (phi[q] - phi[k])).sum())
            .collect()
    }

    /// Largest flat offset between a row and its neighbors.
    pub fn bandwidth(&self) -> usize {
        (0..self.len())
            .flat_map(|k| self.row(k).map(move |(q, _)| q.abs_diff(k)))
            .max()
            .unwrap_or(0)
    }
}

fn stencil_row(grid: &SpaceTimeGrid, k: usize, d: usize, c: &NodeCoefficients) -> Result<Vec<(usize, f64)>> {
    let strides = grid.strides();
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(2 * d * d);
    let mut add = |q: usize, w: f64| match row.iter_mut().find(|(c, _)| *c == q) {
        Some(e) => e.1 += w,
        None => row.push((q, w)),
    };
    for i in 0..d {
        let h = grid.mesh(i);
        let b = c.drift[i];
        if !b.is_finite() {
            return Err(Error::NonFinite {
                callback: "drift".into(),
                input: format!("grid node {k}"),
            });
        }
        // upwind first-order terms
        if b > 0.0 {
            add(k + strides[i], b / h);
        } else if b < 0.0 {
            add(k - strides[i], -b / h);
        }
        let aii = 0.5 * c.covariance[i * d + i];
        if aii != 0.0 {
            add(k + strides[i], aii / (h * h));
            add(k - strides[i], aii / (h * h));
        }
    }
    // cross derivatives with the diagonal-neighbor stencil
    for i in 0..d {
        for j in i + 1..d {
            let cij = c.covariance[i * d + j];
            if cij == 0.0 {
                continue;
            }
            let s = cij.abs() / (2.0 * grid.mesh(i) * grid.mesh(j));
            let (si, sj) = (strides[i], strides[j]);
            if cij > 0.0 {
                add(k + si + sj, s);
                add(k - si - sj, s);
            } else {
                add(k + si - sj, s);
                add(k - si + sj, s);
            }
            add(k + si, -s);
            add(k - si, -s);
            add(k + sj, -s);
            add(k - sj, -s);
        }
    }
    if let Some(&(_, w)) = row.iter().find(|(_, w)| *w < 0.0) {
        return Err(Error::NegativeStencil { node: k, weight: w });
    }
    row.retain(|(_, w)| *w != 0.0);
    Ok(row)
}
