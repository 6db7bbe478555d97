//! Reusing experts on a foreign noise process, and the hard-switch merged field.
//!
//! An expert trained on path `u -> (alpha~_u, sigma~_u)` is queried at target time `t`
//! by matching negative log-SNRs, `u = gamma~^{-1}(gamma_t)`, rescaling the state to
//! the expert's coordinates and mapping the score back:
//!
//! ```text
//! s(z, t) = (alpha~_u / alpha_t) * s~((alpha~_u / alpha_t) z, u)
//! ```
//!
//! For two variance-preserving paths the ratio is exactly one and adaptation is a
//! pure time remapping.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::field::{check_dim, Piece, ScoreField};
use crate::schedule::{check_time, switching_bounds, GaussianPath, NoiseSchedule, SwitchingBounds};
use crate::Scalar;

/// Expert time carrying the same noise level as target time `t`.
pub fn remap_time<T: Scalar, P: GaussianPath<T>, Q: GaussianPath<T>>(target: &Q, expert: &P, t: T) -> Result<T> {
    let g = target.gamma(t)?;
    expert.gamma_inverse(g)
}

/// `(u, alpha~_u / alpha_t)` for target time `t`.
pub fn remap<T: Scalar, P: GaussianPath<T>, Q: GaussianPath<T>>(target: &Q, expert: &P, t: T) -> Result<(T, T)> {
    let u = remap_time(target, expert, t)?;
    let (a_t, _) = target.alpha_sigma(t)?;
    let (a_u, _) = expert.alpha_sigma(u)?;
    Ok((u, a_u / a_t))
}

/// General change of variables for an arbitrary pair of Gaussian paths.
///
/// `expert_score(z~, u, out)` evaluates the expert on its own time axis.
pub fn adapt_score_with<T, P, Q, F>(expert_path: &P, mut expert_score: F, target: &Q, z: &[T], t: T, out: &mut [T]) -> Result<()>
where
    T: Scalar,
    P: GaussianPath<T>,
    Q: GaussianPath<T>,
    F: FnMut(&[T], T, &mut [T]) -> Result<()>,
{
    let (u, c) = remap(target, expert_path, t)?;
    let scaled: Vec<T> = z.iter().map(|&v| c * v).collect();
    expert_score(&scaled, u, out)?;
    out.iter_mut().for_each(|v| *v *= c);
    Ok(())
}

fn is_unit<T: Scalar>(c: T) -> bool {
    (c - T::one()).abs() <= T::rel_eps()
}

/// Score of `expert` on the `target` process at time `t`.
///
/// Both schedules are variance preserving, so the rescaling factor is checked to be
/// one and the call reduces to evaluating the expert at the remapped time.
pub fn adapt_score<T: Scalar>(expert: &Expert<T>, target: &NoiseSchedule<T>, z: &[T], t: T, out: &mut [T]) -> Result<()> {
    let (u, c) = remap(target, &expert.native_schedule, t)?;
    if is_unit(c) {
        expert.score(z, u, out)
    } else {
        adapt_score_with(&expert.native_schedule, |zz, uu, o| expert.score(zz, uu, o), target, z, t, out)
    }
}

/// An expert viewed on a target process's time axis.
#[derive(Clone, Debug)]
pub struct AdaptedExpert<T> {
    pub expert: Arc<Expert<T>>,
    pub target: NoiseSchedule<T>,
}

impl<T: Scalar> AdaptedExpert<T> {
    pub fn new(expert: Arc<Expert<T>>, target: NoiseSchedule<T>) -> Self {
        Self { expert, target }
    }
}

impl<T: Scalar> ScoreField<T> for AdaptedExpert<T> {
    fn dim(&self) -> usize {
        self.expert.dim
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.target
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        adapt_score(&self.expert, &self.target, z, t, out)
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        let (u, c) = remap(&self.target, &self.expert.native_schedule, t)?;
        if is_unit(c) {
            return self.expert.score_vjp(z, u, probes, out, vjps);
        }
        let scaled: Vec<T> = z.iter().map(|&v| c * v).collect();
        self.expert.score_vjp(&scaled, u, probes, out, vjps)?;
        out.iter_mut().for_each(|v| *v *= c);
        vjps.iter_mut().for_each(|v| *v *= c * c);
        Ok(())
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        Piece::whole(self)
    }
}

/// Linear crossfade between the two adapted experts over `[lo, hi]`.
#[derive(Clone, Debug)]
struct Blend<T> {
    quality: AdaptedExpert<T>,
    likelihood: AdaptedExpert<T>,
    lo: T,
    hi: T,
}

impl<T: Scalar> Blend<T> {
    fn weight(&self, t: T) -> T {
        ((t - self.lo) / (self.hi - self.lo)).max(T::zero()).min(T::one())
    }
}

impl<T: Scalar> ScoreField<T> for Blend<T> {
    fn dim(&self) -> usize {
        self.quality.dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.quality.target
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        let w = self.weight(t);
        let mut other = vec![T::zero(); z.len()];
        self.quality.score(z, t, out)?;
        self.likelihood.score(z, t, &mut other)?;
        for (o, &l) in out.iter_mut().zip(&other) {
            *o = w * *o + (T::one() - w) * l;
        }
        Ok(())
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        let w = self.weight(t);
        let mut other = vec![T::zero(); z.len()];
        let mut other_v = vec![T::zero(); vjps.len()];
        self.quality.score_vjp(z, t, probes, out, vjps)?;
        self.likelihood.score_vjp(z, t, probes, &mut other, &mut other_v)?;
        for (o, &l) in out.iter_mut().zip(&other) {
            *o = w * *o + (T::one() - w) * l;
        }
        for (o, &l) in vjps.iter_mut().zip(&other_v) {
            *o = w * *o + (T::one() - w) * l;
        }
        Ok(())
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        Piece::whole(self)
    }
}

/// Two experts sharing one target process: the likelihood expert owns `[0, eta)` and
/// the quality expert `[eta, 1]`.
#[derive(Clone, Debug)]
pub struct MergedExpert<T> {
    quality: AdaptedExpert<T>,
    likelihood: AdaptedExpert<T>,
    blend: Option<Blend<T>>,
    target: NoiseSchedule<T>,
    eta: T,
    blend_width: T,
    bounds: SwitchingBounds<T>,
}

impl<T: Scalar> MergedExpert<T> {
    /// Hard switch at `eta`.
    pub fn new(quality: Arc<Expert<T>>, likelihood: Arc<Expert<T>>, target: NoiseSchedule<T>, eta: T) -> Result<Self> {
        Self::with_blend(quality, likelihood, target, eta, T::zero())
    }

    /// Crossfade of total width `blend_width` centred on `eta`; zero width is the hard switch.
    pub fn with_blend(
        quality: Arc<Expert<T>>,
        likelihood: Arc<Expert<T>>,
        target: NoiseSchedule<T>,
        eta: T,
        blend_width: T,
    ) -> Result<Self> {
        let target = target.validated()?;
        if quality.dim != likelihood.dim {
            return Err(Error::Shape { expected: quality.dim, got: likelihood.dim });
        }
        let bounds = switching_bounds(quality.gamma_range(), likelihood.gamma_range(), &target)?;
        if !(blend_width >= T::zero()) {
            return Err(Error::Config("blend width must be non-negative".into()));
        }
        let half = blend_width * T::lit(0.5);
        if !(bounds.contains(eta - half) && bounds.contains(eta + half)) {
            return Err(Error::Config(format!(
                "eta = {eta} (blend width {blend_width}) outside feasible switching interval [eta_min = {}, eta_max = {}]",
                bounds.eta_min, bounds.eta_max
            )));
        }
        let q = AdaptedExpert::new(quality, target);
        let l = AdaptedExpert::new(likelihood, target);
        let blend = (blend_width > T::zero()).then(|| Blend { quality: q.clone(), likelihood: l.clone(), lo: eta - half, hi: eta + half });
        Ok(Self { quality: q, likelihood: l, blend, target, eta, blend_width, bounds })
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn blend_width(&self) -> T {
        self.blend_width
    }

    pub fn bounds(&self) -> SwitchingBounds<T> {
        self.bounds
    }

    pub fn target(&self) -> &NoiseSchedule<T> {
        &self.target
    }

    pub fn quality(&self) -> &Arc<Expert<T>> {
        &self.quality.expert
    }

    pub fn likelihood(&self) -> &Arc<Expert<T>> {
        &self.likelihood.expert
    }

    fn active(&self, t: T) -> &dyn ScoreField<T> {
        match &self.blend {
            Some(b) if t > b.lo && t < b.hi => b,
            Some(b) if t >= b.hi => &self.quality,
            Some(_) => &self.likelihood,
            None if t >= self.eta => &self.quality,
            None => &self.likelihood,
        }
    }
}

impl<T: Scalar> ScoreField<T> for MergedExpert<T> {
    fn dim(&self) -> usize {
        self.quality.dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.target
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        check_time(t)?;
        check_dim(self.dim(), z.len())?;
        self.active(t).score(z, t, out)
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        check_time(t)?;
        check_dim(self.dim(), z.len())?;
        self.active(t).score_vjp(z, t, probes, out, vjps)
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        let (zero, one) = (T::zero(), T::one());
        let parts: Vec<(T, T, &dyn ScoreField<T>)> = match &self.blend {
            Some(b) => vec![(zero, b.lo, &self.likelihood), (b.lo, b.hi, b), (b.hi, one, &self.quality)],
            None => vec![(zero, self.eta, &self.likelihood), (self.eta, one, &self.quality)],
        };
        parts.into_iter().filter(|(lo, hi, _)| hi > lo).map(|(lo, hi, field)| Piece { lo, hi, field }).collect()
    }
}
