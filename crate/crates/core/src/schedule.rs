//! Noise-schedule algebra in negative log-SNR coordinates.
//!
//! A schedule is the map `t -> gamma_t = -log(alpha_t^2 / sigma_t^2)` on `[0, 1]`.
//! Under the variance-preserving constraint `alpha^2 + sigma^2 = 1` it fixes
//! `alpha_t`, `sigma_t` and the SDE coefficients `f_t`, `g_t^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{logistic, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleForm {
    /// `gamma_t` affine in `t`.
    #[default]
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<T> {
    #[serde(default)]
    pub form: ScheduleForm,
    pub gamma_min: T,
    pub gamma_max: T,
}

/// Variance-preserving coefficients at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VpCoefficients<T> {
    pub alpha: T,
    pub sigma: T,
    /// Drift `d log(alpha)/dt`.
    pub f: T,
    /// Squared diffusion `alpha^2 d(sigma^2/alpha^2)/dt`.
    pub g2: T,
}

pub(crate) fn check_time<T: Scalar>(t: T) -> Result<()> {
    if t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::Domain { t: t.to_f64_lossy() })
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn linear(gamma_min: T, gamma_max: T) -> Result<Self> {
        if !(gamma_min.is_finite() && gamma_max.is_finite()) || gamma_min >= gamma_max {
            return Err(Error::Config(format!(
                "schedule needs finite gamma_min < gamma_max, got [{gamma_min}, {gamma_max}]"
            )));
        }
        Ok(Self { form: ScheduleForm::Linear, gamma_min, gamma_max })
    }

    /// Validates a deserialized schedule.
    pub fn validated(self) -> Result<Self> {
        match self.form {
            ScheduleForm::Linear => Self::linear(self.gamma_min, self.gamma_max),
        }
    }

    pub fn range(&self) -> (T, T) {
        (self.gamma_min, self.gamma_max)
    }

    pub fn contains_gamma(&self, g: T) -> bool {
        g >= self.gamma_min && g <= self.gamma_max
    }

    pub fn gamma(&self, t: T) -> Result<T> {
        check_time(t)?;
        Ok(self.gamma_unchecked(t))
    }

    #[inline]
    pub(crate) fn gamma_unchecked(&self, t: T) -> T {
        match self.form {
            ScheduleForm::Linear => {
                if t == T::one() {
                    self.gamma_max
                } else {
                    self.gamma_min + t * (self.gamma_max - self.gamma_min)
                }
            }
        }
    }

    /// `d gamma / dt`, analytic per form.
    pub fn gamma_derivative(&self, t: T) -> Result<T> {
        check_time(t)?;
        Ok(match self.form {
            ScheduleForm::Linear => self.gamma_max - self.gamma_min,
        })
    }

    pub fn gamma_inverse(&self, g: T) -> Result<T> {
        if !self.contains_gamma(g) {
            return Err(self.range_error(g));
        }
        Ok(match self.form {
            ScheduleForm::Linear => {
                let t = (g - self.gamma_min) / (self.gamma_max - self.gamma_min);
                t.max(T::zero()).min(T::one())
            }
        })
    }

    pub(crate) fn range_error(&self, g: T) -> Error {
        Error::Range {
            gamma: g.to_f64_lossy(),
            lo: self.gamma_min.to_f64_lossy(),
            hi: self.gamma_max.to_f64_lossy(),
        }
    }

    /// `(alpha, sigma)` at time `t`.
    pub fn alpha_sigma(&self, t: T) -> Result<(T, T)> {
        let g = self.gamma(t)?;
        Ok(alpha_sigma_from_gamma(g))
    }

    pub fn vp_coefficients(&self, t: T) -> Result<VpCoefficients<T>> {
        let g = self.gamma(t)?;
        let dg = self.gamma_derivative(t)?;
        let sigma2 = logistic(g);
        let (alpha, sigma) = alpha_sigma_from_gamma(g);
        let half = T::lit(0.5);
        Ok(VpCoefficients { alpha, sigma, f: -half * sigma2 * dg, g2: sigma2 * dg })
    }
}

/// `alpha = sqrt(logistic(-gamma))`, `sigma = sqrt(logistic(gamma))`.
#[inline]
pub fn alpha_sigma_from_gamma<T: Scalar>(g: T) -> (T, T) {
    (logistic(-g).sqrt(), logistic(g).sqrt())
}

/// A Gaussian noising path `q(z_t | x) = N(alpha_t x, sigma_t^2 I)` indexed by negative log-SNR.
///
/// Variance-preserving schedules are the production case; the trait exists so that
/// score adaptation can be checked against scaled (non-VP) paths as well.
pub trait GaussianPath<T: Scalar> {
    fn gamma(&self, t: T) -> Result<T>;
    fn gamma_inverse(&self, g: T) -> Result<T>;
    fn alpha_sigma(&self, t: T) -> Result<(T, T)>;
}

impl<T: Scalar> GaussianPath<T> for NoiseSchedule<T> {
    fn gamma(&self, t: T) -> Result<T> {
        NoiseSchedule::gamma(self, t)
    }
    fn gamma_inverse(&self, g: T) -> Result<T> {
        NoiseSchedule::gamma_inverse(self, g)
    }
    fn alpha_sigma(&self, t: T) -> Result<(T, T)> {
        NoiseSchedule::alpha_sigma(self, t)
    }
}

/// Linear schedule covering both experts: from the likelihood expert's lowest noise
/// level to the quality expert's highest.
pub fn merged_schedule<T: Scalar>(
    quality: &NoiseSchedule<T>,
    likelihood: &NoiseSchedule<T>,
) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::linear(likelihood.gamma_min, quality.gamma_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchingBounds<T> {
    pub eta_min: T,
    pub eta_max: T,
}

impl<T: Scalar> SwitchingBounds<T> {
    pub fn contains(&self, eta: T) -> bool {
        eta >= self.eta_min && eta <= self.eta_max
    }
}

/// Feasible interval for the switching time on the merged schedule.
///
/// The likelihood expert owns `[0, eta]` and the quality expert `[eta, 1]`, so `eta`
/// must map to a noise level both experts were trained on. Requires the ordering
/// `lik.min <= quality.min <= lik.max <= quality.max` with the merged schedule spanning
/// `[lik.min, quality.max]`.
pub fn switching_bounds<T: Scalar>(
    quality_range: (T, T),
    likelihood_range: (T, T),
    merged: &NoiseSchedule<T>,
) -> Result<SwitchingBounds<T>> {
    let (q0, q1) = quality_range;
    let (l0, l1) = likelihood_range;
    if !(q0 < q1 && l0 < l1) {
        return Err(Error::Config("expert gamma ranges must be non-empty".into()));
    }
    if q0 > l1 {
        return Err(Error::Config(format!(
            "expert ranges do not overlap: quality [{q0}, {q1}], likelihood [{l0}, {l1}]"
        )));
    }
    if !(l0 <= q0 && l1 <= q1) {
        return Err(Error::Config(format!(
            "ordering violated: need likelihood.min <= quality.min and likelihood.max <= quality.max, \
             got quality [{q0}, {q1}], likelihood [{l0}, {l1}]"
        )));
    }
    let tol = T::rel_eps() * (T::one() + (q1 - l0).abs());
    if (merged.gamma_min - l0).abs() > tol || (merged.gamma_max - q1).abs() > tol {
        return Err(Error::Config(format!(
            "merged schedule [{}, {}] must span [{l0}, {q1}]",
            merged.gamma_min, merged.gamma_max
        )));
    }
    let clamp = |g: T| g.max(merged.gamma_min).min(merged.gamma_max);
    let eta_min = merged.gamma_inverse(clamp(q0))?;
    let eta_max = merged.gamma_inverse(clamp(l1))?;
    Ok(SwitchingBounds { eta_min, eta_max })
}
