//! Likelihood evaluation: probability-flow ODE log-densities with exact or
//! Hutchinson divergence, the variational bound, dequantization and unit conversion.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::field::{check_dim, ScoreField};
use crate::integrate::{rk45, PfOde, SolverConfig, Trajectory, VectorField};
use crate::rng::{self, tag, StreamRng};
use crate::stats::MeanSe;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceMode {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub mode: DivergenceMode,
    /// Probes per datum in Hutchinson mode.
    pub probes: usize,
    pub probe_dist: ProbeDist,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self { mode: DivergenceMode::Hutchinson, probes: 1, probe_dist: ProbeDist::Rademacher }
    }
}

impl DivergenceConfig {
    pub fn exact() -> Self {
        Self { mode: DivergenceMode::Exact, ..Self::default() }
    }

    pub fn hutchinson(probes: usize) -> Self {
        Self { mode: DivergenceMode::Hutchinson, probes, probe_dist: ProbeDist::Rademacher }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DivergenceMode::Hutchinson && self.probes == 0 {
            return Err(Error::Config("divergence probes must be at least 1".into()));
        }
        Ok(())
    }

    /// Probe vectors stacked row-wise, with the factor turning `sum_k p_k^T J p_k`
    /// into the trace estimate.
    pub fn draw_probes<T: Scalar>(&self, dim: usize, rng: &mut StreamRng) -> (Vec<T>, usize, T) {
        match self.mode {
            DivergenceMode::Exact => {
                let mut p = vec![T::zero(); dim * dim];
                for i in 0..dim {
                    p[i * dim + i] = T::one();
                }
                (p, dim, T::one())
            }
            DivergenceMode::Hutchinson => {
                let k = self.probes;
                let p = (0..k * dim)
                    .map(|_| match self.probe_dist {
                        ProbeDist::Rademacher => rng::rademacher(rng),
                        ProbeDist::Gaussian => rng::normal(rng),
                    })
                    .collect();
                (p, k, T::one() / T::from_usize_lossy(k))
            }
        }
    }
}

/// Affine field `h(z) = A z + b` with `A` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField<T> {
    pub dim: usize,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LinearField<T> {
    pub fn new(a: Vec<T>, b: Vec<T>) -> Result<Self> {
        let dim = b.len();
        check_dim(dim * dim, a.len())?;
        Ok(Self { dim, a, b })
    }

    pub fn trace(&self) -> T {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }
}

impl<T: Scalar> VectorField<T> for LinearField<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, z: &[T], _t: T, out: &mut [T]) -> Result<()> {
        check_dim(self.dim, z.len())?;
        let d = self.dim;
        for i in 0..d {
            out[i] = self.b[i] + (0..d).map(|j| self.a[i * d + j] * z[j]).sum::<T>();
        }
        Ok(())
    }
    fn eval_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        self.eval(z, t, out)?;
        let d = self.dim;
        for (p, v) in probes.chunks(d).zip(vjps.chunks_mut(d)) {
            for j in 0..d {
                v[j] = (0..d).map(|i| p[i] * self.a[i * d + j]).sum();
            }
        }
        Ok(())
    }
}

/// `sum_k p_k^T J p_k` for stacked probes, with the field value written to `out`.
fn probe_quadratic<T: Scalar>(
    field: &dyn VectorField<T>,
    z: &[T],
    t: T,
    probes: &[T],
    out: &mut [T],
    vjps: &mut [T],
) -> Result<Vec<T>> {
    field.eval_vjp(z, t, probes, out, vjps)?;
    let d = z.len();
    Ok(probes.chunks(d).zip(vjps.chunks(d)).map(|(p, v)| crate::scalar::dot(p, v)).collect())
}

/// Divergence of `field` at `(z, t)`.
///
/// Exact mode sums one Jacobian row per coordinate; Hutchinson mode averages
/// `eps^T (dh/dz) eps` over freshly drawn probes.
pub fn divergence<T: Scalar>(
    field: &dyn VectorField<T>,
    z: &[T],
    t: T,
    cfg: &DivergenceConfig,
    rng: &mut StreamRng,
) -> Result<T> {
    cfg.validate()?;
    let d = field.dim();
    check_dim(d, z.len())?;
    let (probes, k, scale) = cfg.draw_probes::<T>(d, rng);
    let mut out = vec![T::zero(); d];
    let mut vjps = vec![T::zero(); k * d];
    let terms = probe_quadratic(field, z, t, &probes, &mut out, &mut vjps)?;
    Ok(terms.into_iter().sum::<T>() * scale)
}

/// Individual Hutchinson terms `eps_k^T (dh/dz) eps_k`, for variance studies.
pub fn hutchinson_terms<T: Scalar>(
    field: &dyn VectorField<T>,
    z: &[T],
    t: T,
    probes: usize,
    dist: ProbeDist,
    rng: &mut StreamRng,
) -> Result<Vec<T>> {
    let cfg = DivergenceConfig { mode: DivergenceMode::Hutchinson, probes, probe_dist: dist };
    cfg.validate()?;
    let d = field.dim();
    let (p, k, _) = cfg.draw_probes::<T>(d, rng);
    let mut out = vec![T::zero(); d];
    let mut vjps = vec![T::zero(); k * d];
    probe_quadratic(field, z, t, &p, &mut out, &mut vjps)
}

/// `log N(z; 0, I)`.
pub fn std_normal_logpdf<T: Scalar>(z: &[T]) -> T {
    let d = T::from_usize_lossy(z.len());
    -T::lit(0.5) * (crate::scalar::norm_sq(z) + d * (T::TAU()).ln())
}

/// Result of one probability-flow likelihood solve.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeLogLik<T> {
    /// `log p(z_0)` in nats.
    pub log_prob: T,
    /// Final state at `t = 1` with the accumulated divergence integral and NFE.
    pub trajectory: Trajectory<T>,
}

/// `log p(z_0)` from the augmented system `(z, int div h)` integrated from `t = 0` to `1`.
///
/// Hutchinson probes are drawn once per datum from the stream `(seed, PROBE, datum)` and
/// held fixed through the solve, so the integrand stays a smooth function of time.
pub fn ode_loglik<T: Scalar>(
    field: &dyn ScoreField<T>,
    z0: &[T],
    solver: &SolverConfig,
    div: &DivergenceConfig,
    datum: u64,
) -> Result<OdeLogLik<T>> {
    solver.validate()?;
    div.validate()?;
    let d = field.dim();
    check_dim(d, z0.len())?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input to the likelihood solve".into()));
    }
    let mut probe_rng = rng::stream(solver.seed, &[tag::PROBE, datum]);
    let (probes, k, scale) = div.draw_probes::<T>(d, &mut probe_rng);
    let opts = solver.rk45::<T>();
    let mut y: Vec<T> = z0.iter().copied().chain(std::iter::once(T::zero())).collect();
    let mut nfe = 0;
    for piece in field.pieces() {
        let pf = PfOde::new(piece.field);
        let mut vjps = vec![T::zero(); k * d];
        let stats = rk45::integrate(
            |t, y: &[T], dy: &mut [T]| {
                let (dz, dl) = dy.split_at_mut(d);
                let terms = probe_quadratic(&pf, &y[..d], t, &probes, dz, &mut vjps)?;
                dl[0] = terms.into_iter().sum::<T>() * scale;
                Ok(())
            },
            piece.lo,
            piece.hi,
            &mut y,
            &opts,
            None,
        )?;
        nfe += stats.nfe;
    }
    let logp_delta = y[d];
    y.truncate(d);
    let log_prob = std_normal_logpdf(&y) + logp_delta;
    Ok(OdeLogLik { log_prob, trajectory: Trajectory { z: y, t: T::one(), logp_delta, nfe } })
}

/// Components of the variational bound on `-log p(x)`, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlbTerms {
    pub prior: f64,
    pub reconstruction: f64,
    pub diffusion: MeanSe,
}

impl VlbTerms {
    pub fn total(&self) -> MeanSe {
        self.diffusion.shifted(self.prior + self.reconstruction)
    }
}

/// Variational bound on `-log p(x)` for continuous `x`.
///
/// The prior term is the closed-form KL between `N(alpha_1 x, sigma_1^2 I)` and
/// `N(0, I)`. The decoder is `N(x; z_0/alpha_0, (sigma_0/alpha_0)^2 I)`, whose expected
/// negative log-likelihood under `q(z_0|x)` is available exactly. The diffusion term
/// `1/2 E_t E_eps[g_t^2 |s(z_t, t) + eps/sigma_t|^2]` uses `mc_t` stratified times with one
/// noise draw each, from the stream `(seed, VLB, datum)`.
pub fn vlb<T: Scalar>(field: &dyn ScoreField<T>, x: &[T], mc_t: usize, seed: u64, datum: u64) -> Result<VlbTerms> {
    let d = field.dim();
    check_dim(d, x.len())?;
    if mc_t == 0 {
        return Err(Error::Config("vlb needs at least one time sample".into()));
    }
    let sched = field.schedule();
    let x64: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
    let xx: f64 = x64.iter().map(|v| v * v).sum();
    let df = d as f64;

    let (a1, s1) = sched.alpha_sigma(T::one())?;
    let (a1, s1) = (a1.to_f64_lossy(), s1.to_f64_lossy());
    let prior = 0.5 * (df * s1 * s1 + a1 * a1 * xx - df - df * (s1 * s1).ln());

    let (a0, s0) = sched.alpha_sigma(T::zero())?;
    let ratio = (s0 / a0).to_f64_lossy();
    let reconstruction = 0.5 * df * (1.0 + std::f64::consts::TAU.ln()) + df * ratio.ln();

    let mut r = rng::stream(seed, &[tag::VLB, datum]);
    let mut eps = vec![T::zero(); d];
    let mut z = vec![T::zero(); d];
    let mut s = vec![T::zero(); d];
    let mut vals = Vec::with_capacity(mc_t);
    for k in 0..mc_t {
        let u: f64 = r.random();
        let t = T::lit((k as f64 + u) / mc_t as f64).min(T::one());
        rng::fill_normal(&mut r, &mut eps);
        let c = sched.vp_coefficients(t)?;
        for i in 0..d {
            z[i] = c.alpha * x[i] + c.sigma * eps[i];
        }
        field.score(&z, t, &mut s)?;
        let resid: T = s.iter().zip(&eps).map(|(&si, &ei)| (si + ei / c.sigma).powi(2)).sum();
        vals.push((T::lit(0.5) * c.g2 * resid).to_f64_lossy());
    }
    Ok(VlbTerms { prior, reconstruction, diffusion: MeanSe::of(&vals) })
}

/// `nll_nats / (dim ln 2) + (bit_depth - 1)` for data scaled as `y = 2(x+u)/2^b - 1`.
pub fn bpd_convert(nll_nats: f64, dim: usize, bit_depth: u32) -> f64 {
    nll_nats / (dim as f64 * std::f64::consts::LN_2) + (bit_depth as f64 - 1.0)
}

/// Inverse of [`bpd_convert`].
pub fn bpd_to_nats(bpd: f64, dim: usize, bit_depth: u32) -> f64 {
    (bpd - (bit_depth as f64 - 1.0)) * dim as f64 * std::f64::consts::LN_2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Dequantization {
    Uniform,
    /// Normal centred on the bin with standard deviation `scale` bin widths, truncated to the bin.
    TruncatedNormal { scale: f64 },
}

impl Default for Dequantization {
    fn default() -> Self {
        Dequantization::Uniform
    }
}

impl Dequantization {
    pub fn truncated_normal() -> Self {
        Dequantization::TruncatedNormal { scale: 0.25 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Dequantization::TruncatedNormal { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::Config(format!("truncated-normal scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }

    /// Draws an offset `u` in `[0, 1)` and returns it with `log q(u)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let v: f64 = rng.random();
        match *self {
            Dequantization::Uniform => (v, 0.0),
            Dequantization::TruncatedNormal { scale } => {
                let n = Normal::standard();
                let half = 0.5 / scale;
                let (lo, hi) = (n.cdf(-half), n.cdf(half));
                let w = (n.inverse_cdf(lo + v * (hi - lo))).clamp(-half, half);
                let u = (0.5 + scale * w).clamp(0.0, 1.0 - f64::EPSILON);
                let logq = -0.5 * w * w - 0.5 * std::f64::consts::TAU.ln() - scale.ln() - (hi - lo).ln();
                (u, logq)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    OdeElbo,
    Vlb,
}

impl BoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::OdeElbo => "ode-elbo",
            BoundKind::Vlb => "vlb",
        }
    }
}

/// Which bound to evaluate for a data set.
#[derive(Clone, Debug, PartialEq)]
pub enum Bound {
    Ode { solver: SolverConfig, div: DivergenceConfig },
    Vlb { mc_t: usize, seed: u64 },
}

impl Bound {
    pub fn kind(&self) -> BoundKind {
        match self {
            Bound::Ode { .. } => BoundKind::OdeElbo,
            Bound::Vlb { .. } => BoundKind::Vlb,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Bound::Ode { solver, .. } => solver.seed,
            Bound::Vlb { seed, .. } => *seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatumNll {
    pub nats_per_dim: f64,
    pub nfe: usize,
}

/// Negative log-likelihood bound averaged over a data set.
///
/// `nats_per_dim` is measured in the scaled continuous space the model lives in; `bpd`
/// adds the discretization Jacobian and is present only for quantized data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllResult {
    pub nats_per_dim: MeanSe,
    pub bpd: Option<MeanSe>,
    pub nfe: f64,
    pub bound_kind: BoundKind,
    pub per_datum: Vec<DatumNll>,
}

fn datum_nll<T: Scalar>(field: &dyn ScoreField<T>, y: &[T], bound: &Bound, datum: u64) -> Result<(f64, usize)> {
    match bound {
        Bound::Ode { solver, div } => {
            let r = ode_loglik(field, y, solver, div, datum)?;
            Ok((-r.log_prob.to_f64_lossy(), r.trajectory.nfe))
        }
        Bound::Vlb { mc_t, seed } => {
            let v = vlb(field, y, *mc_t, *seed, datum)?;
            Ok((v.total().mean, *mc_t))
        }
    }
}

fn summarize(dim: usize, rows: Vec<Result<(f64, usize)>>, bit_depth: Option<u32>, kind: BoundKind) -> Result<NllResult> {
    let per_datum = rows
        .into_iter()
        .map(|r| r.map(|(nats, nfe)| DatumNll { nats_per_dim: nats / dim as f64, nfe }))
        .collect::<Result<Vec<_>>>()?;
    let per_dim: Vec<f64> = per_datum.iter().map(|r| r.nats_per_dim).collect();
    let nats_per_dim = MeanSe::of(&per_dim);
    let bpd = bit_depth.map(|b| MeanSe {
        mean: bpd_convert(nats_per_dim.mean * dim as f64, dim, b),
        se: nats_per_dim.se / std::f64::consts::LN_2,
    });
    let nfe = if per_datum.is_empty() {
        0.0
    } else {
        per_datum.iter().map(|r| r.nfe as f64).sum::<f64>() / per_datum.len() as f64
    };
    Ok(NllResult { nats_per_dim, bpd, nfe, bound_kind: kind, per_datum })
}

/// NLL bound over continuous data given as rows of length `field.dim()`.
pub fn continuous_nll<T: Scalar>(field: &dyn ScoreField<T>, data: &[T], bound: &Bound) -> Result<NllResult> {
    let d = field.dim();
    if data.len() % d != 0 {
        return Err(Error::Shape { expected: d, got: data.len() % d });
    }
    let rows: Vec<_> = data
        .par_chunks(d)
        .enumerate()
        .map(|(i, y)| datum_nll(field, y, bound, i as u64))
        .collect();
    summarize(d, rows, None, bound.kind())
}

/// Scales integer data to `[-1, 1)` after adding the offsets `u`.
pub fn scale_quantized(x: u32, u: f64, bit_depth: u32) -> f64 {
    2.0 * (x as f64 + u) / (1u64 << bit_depth) as f64 - 1.0
}

/// Dequantized NLL bound for integer data with values in `[0, 2^bit_depth)`.
///
/// Offsets are drawn from `q(u|x)` with the stream `(seed, DEQUANT, datum)`; the reported
/// NLL is `-log p(y) + sum log q(u)` for the continuous bound `-log p(y)` of the chosen kind.
pub fn dequantized_nll<T: Scalar>(
    field: &dyn ScoreField<T>,
    data: &[u32],
    bit_depth: u32,
    mode: Dequantization,
    bound: &Bound,
) -> Result<NllResult> {
    let d = field.dim();
    mode.validate()?;
    if bit_depth == 0 || bit_depth > 16 {
        return Err(Error::Config(format!("bit depth must be in 1..=16, got {bit_depth}")));
    }
    if data.len() % d != 0 {
        return Err(Error::Shape { expected: d, got: data.len() % d });
    }
    let levels = 1u32 << bit_depth;
    if let Some(bad) = data.iter().find(|&&v| v >= levels) {
        return Err(Error::Data(format!("value {bad} outside [0, {levels}) for bit depth {bit_depth}")));
    }
    let seed = bound.seed();
    let rows: Vec<_> = data
        .par_chunks(d)
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng::stream(seed, &[tag::DEQUANT, i as u64]);
            let mut logq = 0.0;
            let y: Vec<T> = x
                .iter()
                .map(|&xi| {
                    let (u, lq) = mode.draw(&mut r);
                    logq += lq;
                    T::lit(scale_quantized(xi, u, bit_depth))
                })
                .collect();
            let (nll, nfe) = datum_nll(field, &y, bound, i as u64)?;
            Ok((nll + logq, nfe))
        })
        .collect();
    summarize(d, rows, Some(bit_depth), bound.kind())
}

#[cfg(test)]
mod tests;
