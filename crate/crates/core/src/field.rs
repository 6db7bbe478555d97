//! Score fields: anything that yields `∇_z log q_t(z)` on some process's time axis.

use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::Scalar;

/// A sub-interval of `[0, 1]` on which a field is smooth, with the field that governs it.
///
/// Solvers integrate each piece separately and evaluate it with `field` even at the
/// shared endpoints, so a discontinuity between pieces is never straddled.
pub struct Piece<'a, T> {
    pub lo: T,
    pub hi: T,
    pub field: &'a dyn ScoreField<T>,
}

impl<'a, T: Scalar> Piece<'a, T> {
    pub fn whole(field: &'a dyn ScoreField<T>) -> Vec<Self> {
        vec![Piece { lo: T::zero(), hi: T::one(), field }]
    }
}

pub trait ScoreField<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Schedule of the process on whose time axis `t` is measured.
    fn schedule(&self) -> &NoiseSchedule<T>;

    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()>;

    /// Score at `(z, t)` together with `p_k^T (∂s/∂z)` for every probe `p_k`.
    ///
    /// `probes` and `vjps` hold `k` row vectors of length `dim()` back to back.
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()>;

    /// Smooth pieces covering `[0, 1]` in increasing time order.
    fn pieces(&self) -> Vec<Piece<'_, T>>;
}

impl<T: Scalar, F: ScoreField<T> + ?Sized> ScoreField<T> for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        (**self).schedule()
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        (**self).score(z, t, out)
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        (**self).score_vjp(z, t, probes, out, vjps)
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        (**self).pieces()
    }
}

/// Checks that a state vector has the expected length.
pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(crate::Error::Shape { expected, got })
    }
}
