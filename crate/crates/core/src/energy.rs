//! Pointwise evaluation of the regularized surface energy
//!
//! ```text
//! E_tau(z) = (1/p) (|z|^2 + tau)^(p/2) + beta0 (|z|^2 + tau)^(1/2)
//! ```
//!
//! together with its flux coefficient `F_tau(s)` (so that `grad E_tau(z) = F_tau(|z|^2) z`),
//! its Hessian, the logarithmic barrier used by the density solver and the
//! subgradient selection for the 1-Laplacian term in the `tau = 0` limit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and regularization constants of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Exponent of the p-Laplacian part, `1 < p <= 2`.
    pub p: f64,
    /// Weight of the 1-Laplacian (total variation) part.
    pub beta0: f64,
    /// Zeroth-order coefficient of the height equation.
    pub a: f64,
    /// Smoothing of the surface energy near zero slope.
    pub tau: f64,
    /// Viscosity added to the height equation (`-delta Laplacian u`).
    #[serde(default)]
    pub delta: f64,
}

impl ModelParams {
    pub fn new(p: f64, beta0: f64, a: f64, tau: f64, delta: f64) -> Result<Self> {
        let params = Self { p, beta0, a, tau, delta };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.p, self.beta0, self.a, self.tau, self.delta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        if !(self.p > 1.0 && self.p <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "p must lie in (1,2], got {}",
                self.p
            )));
        }
        if self.beta0 <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "beta0 must be positive, got {}",
                self.beta0
            )));
        }
        if self.a <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "a must be positive, got {}",
                self.a
            )));
        }
        if self.tau < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tau must be nonnegative, got {}",
                self.tau
            )));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "delta must be nonnegative, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }
}

fn norm_sq(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum()
}

/// `E_tau(z)`.
pub fn energy_density(z: &[f64], params: &ModelParams) -> f64 {
    energy_of_squared_slope(norm_sq(z), params)
}

/// `E_tau` written as a function of `s = |z|^2`.
pub fn energy_of_squared_slope(s: f64, params: &ModelParams) -> f64 {
    let r = s + params.tau;
    r.powf(0.5 * params.p) / params.p + params.beta0 * r.sqrt()
}

/// `F_tau(s) = (s + tau)^((p-2)/2) + beta0 (s + tau)^(-1/2)`.
///
/// Fails when `s + tau = 0`, where the 1-Laplacian coefficient is singular.
pub fn flux_coefficient(s: f64, params: &ModelParams) -> Result<f64> {
    if s < 0.0 {
        return Err(Error::Domain(format!("squared slope must be nonnegative, got {s}")));
    }
    let r = s + params.tau;
    if r <= 0.0 {
        return Err(Error::Domain(
            "flux coefficient is singular at zero slope when tau = 0".into(),
        ));
    }
    Ok(flux_coefficient_unchecked(r, params))
}

/// `F_tau` evaluated at `r = s + tau > 0`.
#[inline]
pub(crate) fn flux_coefficient_unchecked(r: f64, params: &ModelParams) -> f64 {
    r.powf(0.5 * (params.p - 2.0)) + params.beta0 / r.sqrt()
}

/// `grad_z E_tau(z) = F_tau(|z|^2) z`; the zero vector at `z = 0, tau = 0`.
pub fn energy_gradient(z: &[f64], params: &ModelParams) -> Vec<f64> {
    let r = norm_sq(z) + params.tau;
    if r <= 0.0 {
        return vec![0.0; z.len()];
    }
    let f = flux_coefficient_unchecked(r, params);
    z.iter().map(|v| f * v).collect()
}

/// Hessian of `E_tau`:
///
/// ```text
/// r^((p-2)/2) (I + (p-2) z z^T / r) + beta0 r^(-1/2) (I - z z^T / r),   r = |z|^2 + tau
/// ```
pub fn energy_hessian(z: &[f64], params: &ModelParams) -> Result<DMatrix<f64>> {
    let n = z.len();
    let r = norm_sq(z) + params.tau;
    if r <= 0.0 {
        return Err(Error::Domain(
            "Hessian is singular at zero slope when tau = 0".into(),
        ));
    }
    let mut h = DMatrix::zeros(n, n);
    hessian_into(z, r, params, |i, j, v| h[(i, j)] = v);
    Ok(h)
}

/// Writes the Hessian entries through `put(i, j, value)`; `r = |z|^2 + tau > 0`.
#[inline]
pub(crate) fn hessian_into(z: &[f64], r: f64, params: &ModelParams, mut put: impl FnMut(usize, usize, f64)) {
    let pl = r.powf(0.5 * (params.p - 2.0));
    let tv = params.beta0 / r.sqrt();
    let diag = pl + tv;
    let outer = (pl * (params.p - 2.0) - tv) / r;
    for i in 0..z.len() {
        for j in 0..z.len() {
            let id = if i == j { diag } else { 0.0 };
            put(i, j, id + outer * z[i] * z[j]);
        }
    }
}

/// Lower bound on the smallest Hessian eigenvalue, `(p-1)(|z|^2 + tau)^((p-2)/2)`.
pub fn hessian_coercivity_bound(z: &[f64], params: &ModelParams) -> f64 {
    (params.p - 1.0) * (norm_sq(z) + params.tau).powf(0.5 * (params.p - 2.0))
}

/// `psi_delta(s) = ln(s + delta)` for `s > 0`, `ln(delta)` otherwise.
pub fn log_barrier(s: f64, delta: f64) -> f64 {
    if s > 0.0 {
        (s + delta).ln()
    } else {
        delta.ln()
    }
}

/// Almost-everywhere derivative of [`log_barrier`], used as its Newton linearization.
pub fn log_barrier_slope(s: f64, delta: f64) -> f64 {
    if s > 0.0 {
        1.0 / (s + delta)
    } else {
        0.0
    }
}

/// Primitive of [`log_barrier`] (continuous at `s = 0`), i.e. the convex potential
/// whose derivative is `psi_delta`.
pub fn log_barrier_primitive(s: f64, delta: f64) -> f64 {
    let at_zero = delta * delta.ln() - delta;
    if s > 0.0 {
        let t = s + delta;
        t * t.ln() - t
    } else {
        at_zero + s * delta.ln()
    }
}

/// Zero of `psi_delta`, `s_z = 1 - delta`.
pub fn log_barrier_zero(delta: f64) -> f64 {
    1.0 - delta
}

/// Element of the subdifferential of `H(z) = |z|`: `z/|z|`, or zero at the origin.
pub fn subgradient_select(z: &[f64]) -> Vec<f64> {
    let n = norm_sq(z).sqrt();
    if n == 0.0 {
        return vec![0.0; z.len()];
    }
    z.iter().map(|v| v / n).collect()
}

/// Limit flux `|z|^(p-2) z + beta0 phi` with `phi` from [`subgradient_select`].
pub fn limit_flux(z: &[f64], params: &ModelParams) -> Vec<f64> {
    let n = norm_sq(z).sqrt();
    let phi = subgradient_select(z);
    let pl = if n == 0.0 { 0.0 } else { n.powf(params.p - 2.0) };
    z.iter()
        .zip(&phi)
        .map(|(v, s)| pl * v + params.beta0 * s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(p: f64, beta0: f64, tau: f64) -> ModelParams {
        ModelParams { p, beta0, a: 1.0, tau, delta: 0.0 }
    }

    #[test]
    fn density_examples() {
        assert_eq!(energy_density(&[0.0, 0.0], &params(2.0, 1.0, 0.0)), 0.0);
        assert_relative_eq!(energy_density(&[0.0, 0.0], &params(2.0, 1.0, 1.0)), 1.5);
        assert_relative_eq!(energy_density(&[3.0, 4.0], &params(2.0, 1.0, 0.0)), 17.5);
    }

    #[test]
    fn flux_coefficient_examples() {
        assert_relative_eq!(flux_coefficient(0.0, &params(2.0, 1.0, 1.0)).unwrap(), 2.0);
        assert_relative_eq!(flux_coefficient(3.0, &params(2.0, 2.0, 1.0)).unwrap(), 2.0);
        assert!(matches!(
            flux_coefficient(0.0, &params(1.5, 1.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(energy_gradient(&[0.0, 0.0], &params(1.5, 1.0, 1.0)), vec![0.0, 0.0]);
        let g = energy_gradient(&[3.0, 4.0], &params(2.0, 1.0, 0.0));
        assert_relative_eq!(g[0], 3.6, epsilon = 1e-14);
        assert_relative_eq!(g[1], 4.8, epsilon = 1e-14);
        assert_eq!(energy_gradient(&[0.0], &params(1.5, 1.0, 0.0)), vec![0.0]);
    }

    #[test]
    fn hessian_at_origin_is_scaled_identity() {
        let prm = params(1.5, 0.7, 1.0);
        let h = energy_hessian(&[0.0, 0.0], &prm).unwrap();
        let expect = 1.0 + 0.7;
        assert_relative_eq!(h[(0, 0)], expect);
        assert_relative_eq!(h[(1, 1)], expect);
        assert_eq!(h[(0, 1)], 0.0);
        let prm = params(1.2, 2.0, 0.25);
        let h = energy_hessian(&[0.0, 0.0], &prm).unwrap();
        assert_relative_eq!(h[(0, 0)], 0.25f64.powf(-0.4) + 2.0 * 2.0, epsilon = 1e-14);
        assert!(energy_hessian(&[0.0], &params(1.5, 1.0, 0.0)).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for &tau in &[1e-4, 1e-1] {
            for _ in 0..200 {
                let prm = params(rng.gen_range(1.05..=2.0), rng.gen_range(0.1..3.0), tau);
                let z = [rng.gen_range(-7.0..7.0), rng.gen_range(-7.0..7.0)];
                let g = energy_gradient(&z, &prm);
                for k in 0..2 {
                    let mut zp = z;
                    let mut zm = z;
                    zp[k] += h;
                    zm[k] -= h;
                    let fd = (energy_density(&zp, &prm) - energy_density(&zm, &prm)) / (2.0 * h);
                    let scale = g.iter().map(|v| v.abs()).fold(1e-3, f64::max);
                    assert!((fd - g[k]).abs() <= 1e-6 * scale, "{fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences_and_coercivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..300 {
            let prm = params(rng.gen_range(1.05..=2.0), rng.gen_range(0.1..3.0), 0.1);
            let z = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let hess = energy_hessian(&z, &prm).unwrap();
            let scale = hess.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for k in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[k] += h;
                zm[k] -= h;
                let gp = energy_gradient(&zp, &prm);
                let gm = energy_gradient(&zm, &prm);
                for i in 0..2 {
                    let fd = (gp[i] - gm[i]) / (2.0 * h);
                    assert!((fd - hess[(i, k)]).abs() <= 1e-5 * scale);
                }
            }
            let eig = SymmetricEigen::new(hess).eigenvalues;
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= hessian_coercivity_bound(&z, &prm) - 1e-12);
        }
    }

    #[test]
    fn barrier_examples() {
        assert_relative_eq!(log_barrier(log_barrier_zero(0.1), 0.1), 0.0, epsilon = 1e-15);
        assert_eq!(log_barrier(-5.0, 0.1), 0.1f64.ln());
        assert_relative_eq!(log_barrier(std::f64::consts::E - 0.01, 0.01), 1.0, epsilon = 1e-15);
        assert_eq!(log_barrier_slope(-1.0, 0.1), 0.0);
    }

    #[test]
    fn barrier_primitive_derivative() {
        let d = 0.05;
        for &s in &[-2.0, -0.3, 0.2, 1.0, 4.0] {
            let h = 1e-6;
            let fd = (log_barrier_primitive(s + h, d) - log_barrier_primitive(s - h, d)) / (2.0 * h);
            assert_relative_eq!(fd, log_barrier(s, d), epsilon = 1e-7);
        }
        // continuity across the kink
        assert_relative_eq!(
            log_barrier_primitive(1e-14, d),
            log_barrier_primitive(0.0, d),
            epsilon = 1e-12
        );
    }

    #[test]
    fn barrier_converges_to_log() {
        let s: f64 = 0.37;
        for k in 1..12 {
            let d = 10f64.powi(-k);
            let err = (log_barrier(s, d) - s.ln()).abs();
            assert!(err <= ((s + d).ln() - s.ln()).abs() + 1e-15);
        }
    }

    #[test]
    fn subgradient_examples() {
        assert_eq!(subgradient_select(&[0.0, 0.0]), vec![0.0, 0.0]);
        let s = subgradient_select(&[3.0, 4.0]);
        assert_relative_eq!(s[0], 0.6);
        assert_relative_eq!(s[1], 0.8);
        assert_eq!(subgradient_select(&[-2.0, 0.0]), vec![-1.0, 0.0]);
        let lf = limit_flux(&[3.0, 4.0], &params(2.0, 1.0, 0.0));
        assert_relative_eq!(lf[0], 3.6);
        assert_eq!(limit_flux(&[0.0, 0.0], &params(1.5, 1.0, 0.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn validation_messages() {
        let err = ModelParams::new(0.5, 1.0, 1.0, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("p must lie in (1,2]"));
        assert!(ModelParams::new(1.5, 0.0, 1.0, 0.1, 0.0).is_err());
        assert!(ModelParams::new(1.5, 1.0, -1.0, 0.1, 0.0).is_err());
        assert!(ModelParams::new(1.5, 1.0, 1.0, 0.1, 0.0).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn energy_is_midpoint_convex(
            z0 in -10.0..10.0f64, z1 in -10.0..10.0f64,
            y0 in -10.0..10.0f64, y1 in -10.0..10.0f64,
            p in 1.05..=2.0f64, tau in 0.0..1.0f64,
        ) {
            let prm = params(p, 1.0, tau);
            let mid = [(z0 + y0) / 2.0, (z1 + y1) / 2.0];
            let lhs = energy_density(&mid, &prm);
            let rhs = 0.5 * energy_density(&[z0, z1], &prm) + 0.5 * energy_density(&[y0, y1], &prm);
            proptest::prop_assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn energy_dominates_unregularized(z0 in -10.0..10.0f64, z1 in -10.0..10.0f64, tau in 0.0..1.0f64) {
            let prm = params(1.5, 1.0, tau);
            let e = energy_density(&[z0, z1], &prm);
            let e0 = energy_density(&[z0, z1], &prm.with_tau(0.0));
            proptest::prop_assert!(e >= e0);
        }

        #[test]
        fn flux_coefficient_nonincreasing(s in 0.0..100.0f64, ds in 0.0..10.0f64, p in 1.05..=2.0f64) {
            let prm = params(p, 1.3, 0.01);
            proptest::prop_assert!(flux_coefficient(s + ds, &prm).unwrap() <= flux_coefficient(s, &prm).unwrap());
        }

        #[test]
        fn barrier_nondecreasing(s in -5.0..5.0f64, ds in 0.0..5.0f64, d in 1e-6..0.99f64) {
            proptest::prop_assert!(log_barrier(s + ds, d) >= log_barrier(s, d));
            proptest::prop_assert!(log_barrier(s, d) >= d.ln());
        }
    }
}
