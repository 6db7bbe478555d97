//! Score experts: analytic oracles and trained networks, bundled with the schedule
//! and noise range they are valid on.

mod analytic;
pub mod checkpoint;
mod net;

pub use analytic::{BoxSpec, GaussianMixtureSpec};
pub use net::{embed_level, randomize_params, LayerLayout, ScoreNet, Tape, EMBED_WIDTH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dim, Piece, ScoreField};
use crate::schedule::{alpha_sigma_from_gamma, NoiseSchedule};
use crate::Scalar;

/// What a model's raw output predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Score,
    Noise,
    Data,
    Velocity,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Score => "score",
            ParamKind::Noise => "noise",
            ParamKind::Data => "data",
            ParamKind::Velocity => "velocity",
        }
    }

    /// Coefficients `(a, b)` with `eps_hat = a * raw + b * z`.
    pub(crate) fn noise_affine<T: Scalar>(self, alpha: T, sigma: T) -> (T, T) {
        match self {
            ParamKind::Score => (-sigma, T::zero()),
            ParamKind::Noise => (T::one(), T::zero()),
            ParamKind::Data => (-alpha / sigma, T::one() / sigma),
            ParamKind::Velocity => (alpha, sigma),
        }
    }
}

fn nonzero<T: Scalar>(v: T, what: &str) -> Result<()> {
    if v == T::zero() || !v.is_finite() {
        Err(Error::Singularity(format!("{what} = {v}")))
    } else {
        Ok(())
    }
}

/// Converts a raw prediction to a score, in place safe (`out` may not alias `raw`).
///
/// Velocity uses the VP convention `v = alpha eps - sigma x`, so `eps = sigma z + alpha v`.
pub fn to_score<T: Scalar>(
    raw: &[T],
    kind: ParamKind,
    alpha: T,
    sigma: T,
    z: &[T],
    out: &mut [T],
) -> Result<()> {
    if kind != ParamKind::Score {
        nonzero(sigma, "sigma")?;
    }
    for i in 0..raw.len() {
        out[i] = match kind {
            ParamKind::Score => raw[i],
            ParamKind::Noise => -raw[i] / sigma,
            ParamKind::Data => (alpha * raw[i] - z[i]) / (sigma * sigma),
            ParamKind::Velocity => -(sigma * z[i] + alpha * raw[i]) / sigma,
        };
    }
    Ok(())
}

/// Inverse of [`to_score`].
pub fn from_score<T: Scalar>(
    score: &[T],
    kind: ParamKind,
    alpha: T,
    sigma: T,
    z: &[T],
    out: &mut [T],
) -> Result<()> {
    if matches!(kind, ParamKind::Data | ParamKind::Velocity) {
        nonzero(alpha, "alpha")?;
    }
    for i in 0..score.len() {
        let eps = -sigma * score[i];
        out[i] = match kind {
            ParamKind::Score => score[i],
            ParamKind::Noise => eps,
            ParamKind::Data => (z[i] + sigma * sigma * score[i]) / alpha,
            ParamKind::Velocity => (eps - sigma * z[i]) / alpha,
        };
    }
    Ok(())
}

/// Converts `p^T ∂raw/∂z` into `p^T ∂score/∂z`.
fn vjp_to_score<T: Scalar>(raw_vjp: T, probe: T, kind: ParamKind, alpha: T, sigma: T) -> T {
    match kind {
        ParamKind::Score => raw_vjp,
        ParamKind::Noise => -raw_vjp / sigma,
        ParamKind::Data => (alpha * raw_vjp - probe) / (sigma * sigma),
        ParamKind::Velocity => -(sigma * probe + alpha * raw_vjp) / sigma,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertModel<T> {
    AnalyticGaussian(GaussianMixtureSpec<T>),
    AnalyticGmm(GaussianMixtureSpec<T>),
    /// Uniform data on a box; the exact model for fair-bit style data.
    AnalyticBox(BoxSpec<T>),
    Net(ScoreNet<T>),
}

impl<T> ExpertModel<T> {
    pub fn kind_str(&self) -> &'static str {
        match self {
            ExpertModel::AnalyticGaussian(_) => "analytic-gaussian",
            ExpertModel::AnalyticGmm(_) => "analytic-gmm",
            ExpertModel::AnalyticBox(_) => "analytic-box",
            ExpertModel::Net(_) => "neural-net",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T> {
    pub model: ExpertModel<T>,
    pub native_schedule: NoiseSchedule<T>,
    pub param_kind: ParamKind,
    pub dim: usize,
}

impl<T: Scalar> Expert<T> {
    pub fn new(model: ExpertModel<T>, native_schedule: NoiseSchedule<T>, param_kind: ParamKind) -> Result<Self> {
        let native_schedule = native_schedule.validated()?;
        let dim = match &model {
            ExpertModel::AnalyticGaussian(s) => {
                s.validate()?;
                if s.weights.len() != 1 {
                    return Err(Error::Config("analytic-gaussian takes exactly one component".into()));
                }
                s.dim()
            }
            ExpertModel::AnalyticGmm(s) => {
                s.validate()?;
                s.dim()
            }
            ExpertModel::AnalyticBox(b) => {
                b.validate()?;
                b.dim()
            }
            ExpertModel::Net(n) => n.dim(),
        };
        if !matches!(model, ExpertModel::Net(_)) && param_kind != ParamKind::Score {
            return Err(Error::Config("analytic experts are score-parameterized".into()));
        }
        Ok(Self { model, native_schedule, param_kind, dim })
    }

    /// Exact score of `N(0, I)` data; invariant under any VP schedule.
    pub fn unit_gaussian(dim: usize, schedule: NoiseSchedule<T>) -> Self {
        Self::new(
            ExpertModel::AnalyticGaussian(GaussianMixtureSpec::standard_normal(dim)),
            schedule,
            ParamKind::Score,
        )
        .expect("valid")
    }

    pub fn analytic_gmm(spec: GaussianMixtureSpec<T>, schedule: NoiseSchedule<T>) -> Result<Self> {
        let model = if spec.weights.len() == 1 {
            ExpertModel::AnalyticGaussian(spec)
        } else {
            ExpertModel::AnalyticGmm(spec)
        };
        Self::new(model, schedule, ParamKind::Score)
    }

    pub fn net(net: ScoreNet<T>, schedule: NoiseSchedule<T>, param_kind: ParamKind) -> Result<Self> {
        Self::new(ExpertModel::Net(net), schedule, param_kind)
    }

    pub fn gamma_range(&self) -> (T, T) {
        self.native_schedule.range()
    }

    fn check_gamma(&self, gamma: T) -> Result<()> {
        if self.native_schedule.contains_gamma(gamma) {
            Ok(())
        } else {
            Err(self.native_schedule.range_error(gamma))
        }
    }

    /// Noise level normalized to `[0, 1]` over the native range.
    pub fn level(&self, gamma: T) -> T {
        let (lo, hi) = self.native_schedule.range();
        (gamma - lo) / (hi - lo)
    }

    /// Score at negative log-SNR `gamma`; rejects levels outside the native range.
    pub fn score_at_gamma(&self, z: &[T], gamma: T, out: &mut [T]) -> Result<()> {
        check_dim(self.dim, z.len())?;
        self.check_gamma(gamma)?;
        match &self.model {
            ExpertModel::AnalyticGaussian(s) | ExpertModel::AnalyticGmm(s) => s.score_at_gamma(z, gamma, out),
            ExpertModel::AnalyticBox(b) => b.score_at_gamma(z, gamma, out),
            ExpertModel::Net(n) => {
                let mut raw = vec![T::zero(); self.dim];
                n.forward(z, self.level(gamma), &mut raw)?;
                let (a, s) = alpha_sigma_from_gamma(gamma);
                to_score(&raw, self.param_kind, a, s, z, out)?;
            }
        }
        Ok(())
    }

    pub fn score_vjp_at_gamma(&self, z: &[T], gamma: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        check_dim(self.dim, z.len())?;
        self.check_gamma(gamma)?;
        match &self.model {
            ExpertModel::AnalyticGaussian(s) | ExpertModel::AnalyticGmm(s) => {
                s.score_vjp_at_gamma(z, gamma, probes, out, vjps)
            }
            ExpertModel::AnalyticBox(b) => b.score_vjp_at_gamma(z, gamma, probes, out, vjps),
            ExpertModel::Net(n) => {
                let mut raw = vec![T::zero(); self.dim];
                n.forward_vjp(z, self.level(gamma), probes, &mut raw, vjps)?;
                let (a, s) = alpha_sigma_from_gamma(gamma);
                to_score(&raw, self.param_kind, a, s, z, out)?;
                for (v, &p) in vjps.iter_mut().zip(probes) {
                    *v = vjp_to_score(*v, p, self.param_kind, a, s);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ScoreField<T> for Expert<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.native_schedule
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        let g = self.native_schedule.gamma(t)?;
        self.score_at_gamma(z, g, out)
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        let g = self.native_schedule.gamma(t)?;
        self.score_vjp_at_gamma(z, g, probes, out, vjps)
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        Piece::whole(self)
    }
}
