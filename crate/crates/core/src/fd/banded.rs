//! Linear solves for `(I - dt L) U = rhs` with Dirichlet rows.
//!
//! The matrix is banded under row-major node ordering and strictly
//! diagonally dominant, so LU without pivoting is stable. Gauss-Seidel is the
//! fallback if the direct solve misses the residual tolerance.

use crate::error::{Error, Result};
use crate::fd::operator::MonotoneOperator;

pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 10_000;

/// `A = I - dt L` on interior rows, identity on boundary rows.
pub struct ImplicitSystem<'a> {
    op: &'a MonotoneOperator,
    dt: f64,
    lu: BandedLu,
}

impl<'a> ImplicitSystem<'a> {
    pub fn factor(op: &'a MonotoneOperator, dt: f64) -> Self {
        let n = op.len();
        let bw = op.bandwidth();
        let mut band = BandedLu::zeros(n, bw);
        for k in 0..n {
            if op.is_boundary(k) {
                band.set(k, k, 1.0);
                continue;
            }
            let mut diag = 1.0;
            for (q, w) in op.row(k) {
                diag += dt * w;
                band.add(k, q, -dt * w);
            }
            band.add(k, k, diag);
        }
        band.factor();
        Self { op, dt, lu: band }
    }

    /// `A x` for a scalar field.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.op.len())
            .map(|k| {
                if self.op.is_boundary(k) {
                    x[k]
                } else {
                    let mut s = x[k];
                    for (q, w) in self.op.row(k) {
                        s += self.dt * w * (x[k] - x[q]);
                    }
                    s
                }
            })
            .collect()
    }

    pub fn residual(&self, x: &[f64], rhs: &[f64]) -> f64 {
        self.apply(x).iter().zip(rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Solves `A x = rhs` to `RESIDUAL_TOLERANCE` in the max norm.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if let Some(k) = rhs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                callback: "adjoint right-hand side".into(),
                input: format!("node {k}"),
            });
        }
        let mut x = rhs.to_vec();
        self.lu.solve(&mut x);
        let res = self.residual(&x, rhs);
        if res <= RESIDUAL_TOLERANCE {
            return Ok(x);
        }
        if !x.iter().all(|v| v.is_finite()) {
            x = rhs.to_vec();
        }
        self.gauss_seidel(&mut x, rhs)?;
        Ok(x)
    }

    pub fn gauss_seidel(&self, x: &mut [f64], rhs: &[f64]) -> Result<usize> {
        let mut res = self.residual(x, rhs);
        for sweep in 1..=MAX_SWEEPS {
            for k in 0..self.op.len() {
                if self.op.is_boundary(k) {
                    x[k] = rhs[k];
                    continue;
                }
                let (mut diag, mut s) = (1.0, rhs[k]);
                for (q, w) in self.op.row(k) {
                    diag += self.dt * w;
                    s += self.dt * w * x[q];
                }
                x[k] = s / diag;
            }
            res = self.residual(x, rhs);
            if res <= RESIDUAL_TOLERANCE {
                return Ok(sweep);
            }
        }
        Err(Error::SolveFailed {
            residual: res,
            sweeps: MAX_SWEEPS,
        })
    }
}

/// Dense band storage, LU-factored in place without pivoting.
pub struct BandedLu {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedLu {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw);
        i * (2 * self.bw + 1) + j + self.bw - i
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let at = self.idx(i, j);
        self.data[at] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let at = self.idx(i, j);
        self.data[at] += v;
    }

    pub fn factor(&mut self) {
        let (n, bw, w) = (self.n, self.bw, 2 * self.bw + 1);
        for k in 0..n {
            let pivot = self.data[k * w + bw];
            let end = (k + bw + 1).min(n);
            for i in k + 1..end {
                let ik = i * w + k + bw - i;
                let l = self.data[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[ik] = l;
                let (upper, lower) = self.data.split_at_mut(i * w);
                let krow = &upper[k * w + bw + 1..k * w + bw + (end - k)];
                let irow = &mut lower[k + 1 + bw - i..end + bw - i];
                for (a, b) in irow.iter_mut().zip(krow) {
                    *a -= l * b;
                }
            }
        }
    }

    pub fn solve(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, 2 * self.bw + 1);
        for i in 0..n {
            let start = i.saturating_sub(bw);
            let mut s = x[i];
            for j in start..i {
                s -= self.data[i * w + j + bw - i] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let end = (i + bw + 1).min(n);
            let mut s = x[i];
            for j in i + 1..end {
                s -= self.data[i * w + j + bw - i] * x[j];
            }
            x[i] = s / self.data[i * w + bw];
        }
    }
}
