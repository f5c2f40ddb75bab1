//! The abstract mean-field control problem and derivative validation.
//!
//! Jacobians use an `[input][output]` layout flattened row-major: for the
//! drift, `drift_dx` writes `out[i * d + r] = d b_r / d x_i`. Contracting a
//! Jacobian against an adjoint vector `u` therefore reads `sum_r J[i][r] u_r`,
//! which is the `(d_x b)^T u` term of the adjoint source.
//!
//! Measure derivatives are kernels of two points. `drift_dmu(t, xc, ac, m, x, a)`
//! is the L-derivative of `b(t, xc, ac, .)` with respect to the state marginal
//! of its measure argument, evaluated at the point `(x, a)`. The independent
//! copy in the adjoint equations becomes an average over the carrier
//! particles.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prox::ProxSpec;

/// State, control and noise dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub state: usize,
    pub control: usize,
    pub noise: usize,
}

/// Uniform atomic measure on `N` state/control pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    state_dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    mean_state: Vec<f64>,
    mean_control: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `states` is `N x d` and `controls` is `N x k`, both row-major.
    pub fn new(state_dim: usize, control_dim: usize, states: Vec<f64>, controls: Vec<f64>) -> Result<Self> {
        if state_dim == 0 || states.is_empty() || states.len() % state_dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "empirical measure needs N >= 1 points of dimension {state_dim}, got {} values",
                states.len()
            )));
        }
        let n = states.len() / state_dim;
        if controls.len() != n * control_dim {
            return Err(Error::Dimension {
                context: "empirical measure controls",
                expected: n * control_dim,
                got: controls.len(),
            });
        }
        let mean_state = column_means(&states, state_dim);
        let mean_control = column_means(&controls, control_dim);
        Ok(Self {
            state_dim,
            control_dim,
            states,
            controls,
            mean_state,
            mean_control,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn state(&self, l: usize) -> &[f64] {
        &self.states[l * self.state_dim..(l + 1) * self.state_dim]
    }

    pub fn control(&self, l: usize) -> &[f64] {
        &self.controls[l * self.control_dim..(l + 1) * self.control_dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn mean_state(&self) -> &[f64] {
        &self.mean_state
    }

    pub fn mean_control(&self) -> &[f64] {
        &self.mean_control
    }

    /// Arithmetic mean of `f` over the points.
    pub fn expect(&self, mut f: impl FnMut(&[f64], &[f64]) -> f64) -> f64 {
        let n = self.len();
        (0..n).map(|l| f(self.state(l), self.control(l))).sum::<f64>() / n as f64
    }

    /// Uniform subsample of `count` points (without replacement), seeded.
    pub fn subsample(&self, count: usize, seed: u64) -> Self {
        let n = self.len();
        if count == 0 || count >= n {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, n, count).into_vec();
        let mut picks = picks;
        picks.sort_unstable();
        let mut states = Vec::with_capacity(count * self.state_dim);
        let mut controls = Vec::with_capacity(count * self.control_dim);
        for l in picks {
            states.extend_from_slice(self.state(l));
            controls.extend_from_slice(self.control(l));
        }
        Self::new(self.state_dim, self.control_dim, states, controls).expect("subsample of a valid measure")
    }
}

fn column_means(values: &[f64], width: usize) -> Vec<f64> {
    let mut mean = vec![0.0; width];
    if width == 0 {
        return mean;
    }
    let n = values.len() / width;
    for row in values.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Particle data needed to average measure-derivative kernels at one time
/// slice: the carrier measure plus the adjoint field evaluated at each
/// carrier particle.
pub struct KernelSlice<'a> {
    pub t: f64,
    pub measure: &'a EmpiricalMeasure,
    /// `N x d`, the adjoint `u` interpolated at each particle state.
    pub u: &'a [f64],
    /// Mean of `u` over the particles.
    pub mean_u: Vec<f64>,
}

impl<'a> KernelSlice<'a> {
    pub fn new(t: f64, measure: &'a EmpiricalMeasure, u: &'a [f64]) -> Self {
        let mean_u = column_means(u, measure.state_dim());
        Self { t, measure, u, mean_u }
    }

    pub fn u_at(&self, l: usize) -> &[f64] {
        let d = self.measure.state_dim();
        &self.u[l * d..(l + 1) * d]
    }
}

/// Coefficients of a controlled McKean-Vlasov diffusion with running cost
/// `f + l` and terminal cost `g`.
///
/// Implementations must be pure; the solver calls them concurrently.
pub trait MfcProblem: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> Dims;
    fn horizon(&self) -> f64;

    /// `b(t, x, a, m)` into `out` (length `d`).
    fn drift(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);
    /// `sigma(t, x, a, m)` into `out` (`d x n`, row-major).
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);
    fn running_cost(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure) -> f64;
    fn terminal_cost(&self, x: &[f64], m: &EmpiricalMeasure) -> f64;

    /// `d x d`
    fn drift_dx(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);
    /// `k x d`
    fn drift_da(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);
    fn running_cost_dx(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);
    fn running_cost_da(&self, t: f64, x: &[f64], a: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);
    fn terminal_cost_dx(&self, x: &[f64], m: &EmpiricalMeasure, out: &mut [f64]);

    /// True when any `d_mu` kernel is nonzero.
    fn has_state_kernels(&self) -> bool {
        false
    }
    /// True when any `d_nu` kernel is nonzero.
    fn has_control_kernels(&self) -> bool {
        false
    }

    /// `d x d`, `[i][r] = (d_mu b_r)(t, xc, ac, m)(x, a)_i`
    #[allow(clippy::too_many_arguments)]
    fn drift_dmu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    /// `k x d`, `[p][r] = (d_nu b_r)(t, xc, ac, m)(x, a)_p`
    #[allow(clippy::too_many_arguments)]
    fn drift_dnu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    #[allow(clippy::too_many_arguments)]
    fn running_cost_dmu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    #[allow(clippy::too_many_arguments)]
    fn running_cost_dnu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_cost_dmu(&self, _xc: &[f64], _m: &EmpiricalMeasure, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    /// When false, `sigma` depends on time only and the gradient-coupled
    /// source terms vanish.
    fn diffusion_state_dependent(&self) -> bool {
        false
    }
    /// Whether the optional `sigma` derivative callbacks below are implemented.
    fn provides_diffusion_derivatives(&self) -> bool {
        false
    }
    /// `d x (d n)`, `[i][r * n + w] = d sigma_rw / d x_i`
    fn diffusion_dx(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    /// `k x (d n)`
    fn diffusion_da(&self, _t: f64, _x: &[f64], _a: &[f64], _m: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    /// `d x (d n)`
    #[allow(clippy::too_many_arguments)]
    fn diffusion_dmu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    /// `k x (d n)`
    #[allow(clippy::too_many_arguments)]
    fn diffusion_dnu(&self, _t: f64, _xc: &[f64], _ac: &[f64], _m: &EmpiricalMeasure, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn nonsmooth_cost(&self) -> ProxSpec {
        ProxSpec::None
    }

    /// One draw of the initial state into `out`.
    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]);

    /// Default computational box `(lo, hi)`.
    fn domain(&self) -> (Vec<f64>, Vec<f64>);

    /// Dirichlet data on the truncated box at time `t`. Returning `false`
    /// keeps the terminal data on the boundary.
    fn boundary_value(&self, _t: f64, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Particle average of the state kernels contracted with `u`:
    /// `E[(d_mu b)(Xl, al)(x, a)^T u(Xl) + (d_mu f)(Xl, al)(x, a)]`.
    fn nonlocal_state_source(&self, slice: &KernelSlice, x: &[f64], a: &[f64], out: &mut [f64]) {
        brute_force_state_source(self, slice, x, a, out);
    }

    /// Particle average of the control kernels contracted with `u`:
    /// `E[(d_nu b)(Xl, al)(x, a)^T u(Xl) + (d_nu f)(Xl, al)(x, a)]`.
    fn nonlocal_control_gradient(&self, slice: &KernelSlice, x: &[f64], a: &[f64], out: &mut [f64]) {
        brute_force_control_gradient(self, slice, x, a, out);
    }

    /// `E[(d_mu g)(X_T^l, m)(x)]`
    fn nonlocal_terminal(&self, m: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        brute_force_terminal(self, m, x, out);
    }
}

/// Direct particle loop for [`MfcProblem::nonlocal_state_source`].
pub fn brute_force_state_source<P: MfcProblem + ?Sized>(p: &P, slice: &KernelSlice, x: &[f64], a: &[f64], out: &mut [f64]) {
    let d = p.dims().state;
    out[..d].fill(0.0);
    if !p.has_state_kernels() {
        return;
    }
    let m = slice.measure;
    let n = m.len();
    let mut jac = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    for l in 0..n {
        let (xc, ac) = (m.state(l), m.control(l));
        p.drift_dmu(slice.t, xc, ac, m, x, a, &mut jac);
        p.running_cost_dmu(slice.t, xc, ac, m, x, a, &mut grad);
        let ul = slice.u_at(l);
        for i in 0..d {
            let mut s = grad[i];
            for r in 0..d {
                s += jac[i * d + r] * ul[r];
            }
            out[i] += s;
        }
    }
    out[..d].iter_mut().for_each(|v| *v /= n as f64);
}

/// Direct particle loop for [`MfcProblem::nonlocal_control_gradient`].
pub fn brute_force_control_gradient<P: MfcProblem + ?Sized>(p: &P, slice: &KernelSlice, x: &[f64], a: &[f64], out: &mut [f64]) {
    let Dims { state: d, control: k, .. } = p.dims();
    out[..k].fill(0.0);
    if !p.has_control_kernels() {
        return;
    }
    let m = slice.measure;
    let n = m.len();
    let mut jac = vec![0.0; k * d];
    let mut grad = vec![0.0; k];
    for l in 0..n {
        let (xc, ac) = (m.state(l), m.control(l));
        p.drift_dnu(slice.t, xc, ac, m, x, a, &mut jac);
        p.running_cost_dnu(slice.t, xc, ac, m, x, a, &mut grad);
        let ul = slice.u_at(l);
        for q in 0..k {
            let mut s = grad[q];
            for r in 0..d {
                s += jac[q * d + r] * ul[r];
            }
            out[q] += s;
        }
    }
    out[..k].iter_mut().for_each(|v| *v /= n as f64);
}

/// Direct particle loop for [`MfcProblem::nonlocal_terminal`].
pub fn brute_force_terminal<P: MfcProblem + ?Sized>(p: &P, m: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
    let d = p.dims().state;
    out[..d].fill(0.0);
    if !p.has_state_kernels() {
        return;
    }
    let mut grad = vec![0.0; d];
    for l in 0..m.len() {
        p.terminal_cost_dmu(m.state(l), m, x, &mut grad);
        for i in 0..d {
            out[i] += grad[i];
        }
    }
    out[..d].iter_mut().for_each(|v| *v /= m.len() as f64);
}

/// Terminal adjoint data `h(x) = d_x g(x, m) + E[(d_mu g)(X, m)(x)]`.
pub fn terminal_adjoint<P: MfcProblem + ?Sized>(p: &P, m: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
    let d = p.dims().state;
    let mut nl = vec![0.0; d];
    p.terminal_cost_dx(x, m, out);
    p.nonlocal_terminal(m, x, &mut nl);
    for i in 0..d {
        out[i] += nl[i];
    }
}

/// Worst-case finite-difference discrepancy of one derivative callback.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub checks: Vec<DerivativeCheck>,
}

impl DerivativeReport {
    pub const FLAG_THRESHOLD: f64 = 1e-4;

    pub fn all_clear(&self) -> bool {
        self.checks.iter().all(|c| !c.flagged)
    }

    pub fn get(&self, name: &str) -> Option<&DerivativeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Accum {
    names: Vec<&'static str>,
    worst: Vec<f64>,
}

impl Accum {
    fn record(&mut self, name: &'static str, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.worst[i] = self.worst[i].max(err),
            None => {
                self.names.push(name);
                self.worst.push(err);
            }
        }
    }
}

fn finite(name: &str, input: impl Fn() -> String, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            callback: name.to_string(),
            input: input(),
        })
    }
}

/// Compares every analytic derivative callback against central finite
/// differences of its base function at `samples` random points.
///
/// Reported errors are `|D - FD| / max(1, |FD|)`; anything above `1e-4` is
/// flagged. Measure kernels are checked by moving one carrier particle and
/// rescaling by `N`.
pub fn validate_derivatives<P: MfcProblem + ?Sized>(p: &P, samples: usize, step: f64, seed: u64) -> Result<DerivativeReport> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} outside (0, 1e-3]")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    let Dims { state: d, control: k, noise: nn } = p.dims();
    let (lo, hi) = p.domain();
    let horizon = p.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accum { names: Vec::new(), worst: Vec::new() };
    const PARTICLES: usize = 8;

    for _ in 0..samples {
        let t = rng.gen::<f64>() * horizon;
        let x: Vec<f64> = (0..d).map(|i| lo[i] + (hi[i] - lo[i]) * rng.gen::<f64>()).collect();
        let a: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut states = vec![0.0; PARTICLES * d];
        for row in states.chunks_exact_mut(d) {
            p.sample_initial(&mut rng, row);
        }
        let controls: Vec<f64> = (0..PARTICLES * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = EmpiricalMeasure::new(d, k, states.clone(), controls.clone())?;
        let input = || format!("t={t}, x={x:?}, a={a:?}");

        let mut b = vec![0.0; d];
        let mut sig = vec![0.0; d * nn];
        p.drift(t, &x, &a, &m, &mut b);
        finite("drift", input, &b)?;
        p.diffusion(t, &x, &a, &m, &mut sig);
        finite("diffusion", input, &sig)?;
        let fval = p.running_cost(t, &x, &a, &m);
        finite("running_cost", input, &[fval])?;
        let gval = p.terminal_cost(&x, &m);
        finite("terminal_cost", input, &[gval])?;

        let drift_at = |xx: &[f64], aa: &[f64], mm: &EmpiricalMeasure| {
            let mut o = vec![0.0; d];
            p.drift(t, xx, aa, mm, &mut o);
            o
        };
        let sigma_at = |xx: &[f64], aa: &[f64], mm: &EmpiricalMeasure| {
            let mut o = vec![0.0; d * nn];
            p.diffusion(t, xx, aa, mm, &mut o);
            o
        };

        // pointwise derivatives: perturb x_i or a_p
        let mut bdx = vec![0.0; d * d];
        let mut bda = vec![0.0; k * d];
        let mut fdx = vec![0.0; d];
        let mut fda = vec![0.0; k];
        let mut gdx = vec![0.0; d];
        p.drift_dx(t, &x, &a, &m, &mut bdx);
        p.drift_da(t, &x, &a, &m, &mut bda);
        p.running_cost_dx(t, &x, &a, &m, &mut fdx);
        p.running_cost_da(t, &x, &a, &m, &mut fda);
        p.terminal_cost_dx(&x, &m, &mut gdx);
        for (name, vals) in [
            ("drift_dx", &bdx),
            ("drift_da", &bda),
            ("running_cost_dx", &fdx),
            ("running_cost_da", &fda),
            ("terminal_cost_dx", &gdx),
        ] {
            finite(name, input, vals)?;
        }
        for i in 0..d {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += step;
            xm[i] -= step;
            let (bp, bm) = (drift_at(&xp, &a, &m), drift_at(&xm, &a, &m));
            for r in 0..d {
                acc.record("drift_dx", bdx[i * d + r], (bp[r] - bm[r]) / (2.0 * step));
            }
            let fd = (p.running_cost(t, &xp, &a, &m) - p.running_cost(t, &xm, &a, &m)) / (2.0 * step);
            acc.record("running_cost_dx", fdx[i], fd);
            let gd = (p.terminal_cost(&xp, &m) - p.terminal_cost(&xm, &m)) / (2.0 * step);
            acc.record("terminal_cost_dx", gdx[i], gd);
        }
        for q in 0..k {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap[q] += step;
            am[q] -= step;
            let (bp, bm) = (drift_at(&x, &ap, &m), drift_at(&x, &am, &m));
            for r in 0..d {
                acc.record("drift_da", bda[q * d + r], (bp[r] - bm[r]) / (2.0 * step));
            }
            let fd = (p.running_cost(t, &x, &ap, &m) - p.running_cost(t, &x, &am, &m)) / (2.0 * step);
            acc.record("running_cost_da", fda[q], fd);
        }

        // measure kernels: move carrier particle l, the kernel is evaluated at that particle
        let l = rng.gen_range(0..PARTICLES);
        let n = PARTICLES as f64;
        let shifted = |dx: Option<(usize, f64)>, da: Option<(usize, f64)>| {
            let mut s = states.clone();
            let mut c = controls.clone();
            if let Some((i, h)) = dx {
                s[l * d + i] += h;
            }
            if let Some((q, h)) = da {
                c[l * k + q] += h;
            }
            EmpiricalMeasure::new(d, k, s, c).expect("valid perturbed measure")
        };
        let (xl, al) = (m.state(l).to_vec(), m.control(l).to_vec());
        let mut jmu = vec![0.0; d * d];
        let mut jnu = vec![0.0; k * d];
        let mut fmu = vec![0.0; d];
        let mut fnu = vec![0.0; k];
        let mut gmu = vec![0.0; d];
        p.drift_dmu(t, &x, &a, &m, &xl, &al, &mut jmu);
        p.drift_dnu(t, &x, &a, &m, &xl, &al, &mut jnu);
        p.running_cost_dmu(t, &x, &a, &m, &xl, &al, &mut fmu);
        p.running_cost_dnu(t, &x, &a, &m, &xl, &al, &mut fnu);
        p.terminal_cost_dmu(&x, &m, &xl, &mut gmu);
        for i in 0..d {
            let (mp, mm) = (shifted(Some((i, step)), None), shifted(Some((i, -step)), None));
            let (bp, bm) = (drift_at(&x, &a, &mp), drift_at(&x, &a, &mm));
            for r in 0..d {
                acc.record("drift_dmu", jmu[i * d + r], n * (bp[r] - bm[r]) / (2.0 * step));
            }
            let fd = n * (p.running_cost(t, &x, &a, &mp) - p.running_cost(t, &x, &a, &mm)) / (2.0 * step);
            acc.record("running_cost_dmu", fmu[i], fd);
            let gd = n * (p.terminal_cost(&x, &mp) - p.terminal_cost(&x, &mm)) / (2.0 * step);
            acc.record("terminal_cost_dmu", gmu[i], gd);
        }
        for q in 0..k {
            let (mp, mm) = (shifted(None, Some((q, step))), shifted(None, Some((q, -step))));
            let (bp, bm) = (drift_at(&x, &a, &mp), drift_at(&x, &a, &mm));
            for r in 0..d {
                acc.record("drift_dnu", jnu[q * d + r], n * (bp[r] - bm[r]) / (2.0 * step));
            }
            let fd = n * (p.running_cost(t, &x, &a, &mp) - p.running_cost(t, &x, &a, &mm)) / (2.0 * step);
            acc.record("running_cost_dnu", fnu[q], fd);
        }

        if p.diffusion_state_dependent() {
            if p.provides_diffusion_derivatives() {
                let w = d * nn;
                let mut sdx = vec![0.0; d * w];
                let mut sda = vec![0.0; k * w];
                p.diffusion_dx(t, &x, &a, &m, &mut sdx);
                p.diffusion_da(t, &x, &a, &m, &mut sda);
                for i in 0..d {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[i] += step;
                    xm[i] -= step;
                    let (sp, sm) = (sigma_at(&xp, &a, &m), sigma_at(&xm, &a, &m));
                    for c in 0..w {
                        acc.record("diffusion_dx", sdx[i * w + c], (sp[c] - sm[c]) / (2.0 * step));
                    }
                }
                for q in 0..k {
                    let (mut ap, mut am) = (a.clone(), a.clone());
                    ap[q] += step;
                    am[q] -= step;
                    let (sp, sm) = (sigma_at(&x, &ap, &m), sigma_at(&x, &am, &m));
                    for c in 0..w {
                        acc.record("diffusion_da", sda[q * w + c], (sp[c] - sm[c]) / (2.0 * step));
                    }
                }
            }
        } else {
            // sigma must not move with x, a or the measure at fixed t
            let x2: Vec<f64> = (0..d).map(|i| lo[i] + (hi[i] - lo[i]) * rng.gen::<f64>()).collect();
            let a2: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let other = shifted(Some((0, 0.5)), None);
            let sig2 = sigma_at(&x2, &a2, &other);
            let gap = sig.iter().zip(&sig2).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            acc.record("diffusion_invariance", 0.0, gap);
        }
    }

    let checks = acc
        .names
        .into_iter()
        .zip(acc.worst)
        .map(|(name, err)| DerivativeCheck {
            name,
            max_rel_error: err,
            flagged: err > DerivativeReport::FLAG_THRESHOLD,
        })
        .collect();
    Ok(DerivativeReport { checks })
}
