use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving noise schedule with linear `beta(t)` on `[0, 1]`.
///
/// The perturbation kernel is `a_t = alpha_t a + sigma_t eps` with
/// `alpha_t = exp(-1/2 int_0^t beta)` and `sigma_t = sqrt(1 - alpha_t^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleCoeffs {
    pub alpha: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl NoiseSchedule {
    pub const HORIZON: f64 = 1.0;

    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        (self.beta_max - self.beta_min) * t + self.beta_min
    }

    /// `int_0^t beta(s) ds`.
    #[inline]
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Coefficients without the range check, for hot loops that already
    /// guarantee `t` in `[0, 1]`.
    #[inline]
    pub(crate) fn coeffs_unchecked(&self, t: f64) -> ScheduleCoeffs {
        let integral = self.beta_integral(t);
        let alpha = (-0.5 * integral).exp();
        // 1 - exp(-x) without cancellation for small x.
        let sigma = (-(-integral).exp_m1()).sqrt();
        ScheduleCoeffs {
            alpha,
            sigma,
            beta: self.beta(t),
        }
    }

    pub fn coeffs(&self, t: f64) -> Result<ScheduleCoeffs> {
        if !(0.0..=Self::HORIZON).contains(&t) {
            return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
        }
        Ok(self.coeffs_unchecked(t))
    }

    /// `a_t = alpha_t a + sigma_t eps`.
    pub fn perturb(&self, action: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        if action.len() != eps.len() {
            return Err(Error::shape("perturbation noise", action.len(), eps.len()));
        }
        let c = self.coeffs(t)?;
        Ok(action
            .iter()
            .zip(eps)
            .map(|(&a, &e)| c.alpha * a + c.sigma * e)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = NoiseSchedule::default();
        let c0 = s.coeffs(0.0).unwrap();
        assert_eq!((c0.alpha, c0.sigma, c0.beta), (1.0, 0.0, 0.1));

        // int_0^1 beta = 0.1 + 19.9 / 2 = 10.05
        let c1 = s.coeffs(1.0).unwrap();
        assert!((c1.alpha - (-5.025f64).exp()).abs() < 1e-15);
        assert!((c1.alpha - 6.5716e-3).abs() < 1e-7);
        assert!((c1.sigma - 0.999_978_4).abs() < 1e-6);

        // int_0^0.5 beta = 0.05 + 19.9 / 8 = 2.5375
        let c = s.coeffs(0.5).unwrap();
        assert!((c.alpha - (-2.5375f64 / 2.0).exp()).abs() < 1e-15);
        assert!((c.alpha - 0.2812).abs() < 1e-4);
        assert!((c.sigma - 0.9597).abs() < 1e-4);
    }

    #[test]
    fn rejects_out_of_range_time_and_bad_betas() {
        let s = NoiseSchedule::default();
        assert!(s.coeffs(-1e-9).is_err());
        assert!(s.coeffs(1.0 + 1e-9).is_err());
        assert!(NoiseSchedule::new(0.0, 20.0).is_err());
        assert!(NoiseSchedule::new(5.0, 1.0).is_err());
    }

    #[test]
    fn variance_preserving_identity_on_grid() {
        let s = NoiseSchedule::default();
        for i in 0..=1000 {
            let c = s.coeffs(i as f64 / 1000.0).unwrap();
            assert!((c.alpha * c.alpha + c.sigma * c.sigma - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_cases() {
        let s = NoiseSchedule::default();
        assert_eq!(s.perturb(&[0.3, -0.7], &[5.0, 1.0], 0.0).unwrap(), vec![0.3, -0.7]);
        let half = s.perturb(&[1.0, -2.0], &[0.0, 0.0], 0.5).unwrap();
        let alpha = (-2.5375f64 / 2.0).exp();
        assert!((half[0] - alpha).abs() < 1e-15 && (half[1] + 2.0 * alpha).abs() < 1e-15);
        let end = s.perturb(&[0.0], &[0.8], 1.0).unwrap();
        assert!((end[0] - 0.8).abs() < 1e-4);
        assert!(s.perturb(&[0.0], &[0.0, 1.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn perturbation_is_affine(
            a1 in prop::collection::vec(-1.0f64..1.0, 3),
            a2 in prop::collection::vec(-1.0f64..1.0, 3),
            e1 in prop::collection::vec(-3.0f64..3.0, 3),
            e2 in prop::collection::vec(-3.0f64..3.0, 3),
            w in -2.0f64..2.0,
            t in 0.0f64..=1.0,
        ) {
            let s = NoiseSchedule::default();
            let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
                x.iter().zip(y).map(|(p, q)| w * p + (1.0 - w) * q).collect()
            };
            let lhs = s.perturb(&mix(&a1, &a2), &mix(&e1, &e2), t).unwrap();
            let p1 = s.perturb(&a1, &e1, t).unwrap();
            let p2 = s.perturb(&a2, &e2, t).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - (w * p1[i] + (1.0 - w) * p2[i])).abs() < 1e-12);
            }
        }
    }
}
