//! Proximal maps of the nonsmooth running cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Selects the nonsmooth part `l` of the running cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxSpec {
    None,
    /// `l(a) = weight * |a|_1`
    L1 { weight: f64 },
    /// Indicator of the box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ProxSpec {
    pub fn l1(weight: f64) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "l1 weight must be finite and >= 0, got {weight}"
            )));
        }
        Ok(ProxSpec::L1 { weight })
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                context: "box bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
            return Err(Error::InvalidArgument(format!(
                "box component {i}: lo {} > hi {}",
                lo[i], hi[i]
            )));
        }
        Ok(ProxSpec::Box { lo, hi })
    }

    /// Value of `l(a)`; `+inf` outside a box.
    pub fn penalty(&self, a: &[f64]) -> f64 {
        match self {
            ProxSpec::None => 0.0,
            ProxSpec::L1 { weight } => weight * a.iter().map(|v| v.abs()).sum::<f64>(),
            ProxSpec::Box { lo, hi } => {
                let inside = a
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(&v, (&l, &h))| v >= l && v <= h);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `prox_{tau l}(a) = argmin_z 0.5 |z - a|^2 + tau l(z)`, written into `out`.
    pub fn apply(&self, tau: f64, a: &[f64], out: &mut [f64]) {
        debug_assert!(tau > 0.0);
        match self {
            ProxSpec::None => out.copy_from_slice(a),
            ProxSpec::L1 { weight } => {
                let thr = tau * weight;
                for (o, &v) in out.iter_mut().zip(a) {
                    // |v| == thr maps to exactly zero
                    *o = if v.abs() <= thr {
                        0.0
                    } else {
                        v.signum() * (v.abs() - thr)
                    };
                }
            }
            ProxSpec::Box { lo, hi } => {
                for (i, (o, &v)) in out.iter_mut().zip(a).enumerate() {
                    *o = v.clamp(lo[i], hi[i]);
                }
            }
        }
    }

    /// Allocating convenience wrapper around [`ProxSpec::apply`].
    pub fn prox(&self, tau: f64, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        self.apply(tau, a, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_values() {
        let p = ProxSpec::l1(1.0).unwrap();
        let tau = 1.0 / 6.0;
        assert!((p.prox(tau, &[1.0])[0] - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(p.prox(tau, &[0.1])[0], 0.0);
        assert!((p.prox(tau, &[-1.0])[0] + 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(p.prox(tau, &[tau])[0], 0.0);
    }

    #[test]
    fn box_and_identity() {
        let b = ProxSpec::boxed(vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(b.prox(0.3, &[3.0]), vec![1.0]);
        assert_eq!(b.prox(7.0, &[-0.5]), vec![-0.5]);
        assert_eq!(ProxSpec::None.prox(1.0, &[std::f64::consts::PI])[0], std::f64::consts::PI);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ProxSpec::l1(-1.0).is_err());
        assert!(ProxSpec::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(ProxSpec::boxed(vec![1.0], vec![0.0, 2.0]).is_err());
    }

    #[test]
    fn penalty_values() {
        assert_eq!(ProxSpec::l1(2.0).unwrap().penalty(&[-1.0, 0.5]), 3.0);
        let b = ProxSpec::boxed(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(b.penalty(&[0.5]), 0.0);
        assert!(b.penalty(&[1.5]).is_infinite());
    }
}
