//! Trajectory generation: adaptive probability-flow ODE, Euler–Maruyama reverse SDE
//! and discrete ancestral sampling, with function-evaluation accounting.

pub mod rk45;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dim, Piece, ScoreField};
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;
use crate::Scalar;
pub use rk45::{Rk45Options, Rk45Stats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk45,
    /// Fixed-step explicit Euler on the probability-flow ODE.
    Euler,
    EulerMaruyama,
    Ancestral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    pub fixed_steps: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Rk45, atol: 1e-5, rtol: 1e-5, max_steps: 100_000, fixed_steps: 256, seed: 0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(Error::Config("atol and rtol must be positive".into()));
        }
        if self.fixed_steps == 0 || self.max_steps == 0 {
            return Err(Error::Config("fixed_steps and max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rk45<T: Scalar>(&self) -> Rk45Options<T> {
        Rk45Options::new(T::lit(self.atol), T::lit(self.rtol), self.max_steps)
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self { method, ..self.clone() }
    }
}

/// State of one integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub z: Vec<T>,
    pub t: T,
    /// Accumulated divergence integral in nats.
    pub logp_delta: T,
    /// Score-field evaluations consumed so far.
    pub nfe: usize,
}

/// A deterministic vector field with input-Jacobian products.
pub trait VectorField<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, z: &[T], t: T, out: &mut [T]) -> Result<()>;
    /// Value plus `p_k^T (∂h/∂z)` per probe; probes and results are stacked rows.
    fn eval_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()>;
}

/// Probability-flow ODE field `h = f_t z - g_t^2 s(z, t) / 2`.
pub struct PfOde<'a, T> {
    pub field: &'a dyn ScoreField<T>,
}

impl<'a, T: Scalar> PfOde<'a, T> {
    pub fn new(field: &'a dyn ScoreField<T>) -> Self {
        Self { field }
    }
}

impl<T: Scalar> VectorField<T> for PfOde<'_, T> {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn eval(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        pf_ode_field(self.field, z, t, out)
    }
    fn eval_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        let c = self.field.schedule().vp_coefficients(t)?;
        self.field.score_vjp(z, t, probes, out, vjps)?;
        let half_g2 = T::lit(0.5) * c.g2;
        for (o, &zi) in out.iter_mut().zip(z) {
            *o = c.f * zi - half_g2 * *o;
        }
        for (v, &p) in vjps.iter_mut().zip(probes) {
            *v = c.f * p - half_g2 * *v;
        }
        Ok(())
    }
}

/// Evaluates the probability-flow drift of `field` at `(z, t)`.
pub fn pf_ode_field<T: Scalar>(field: &dyn ScoreField<T>, z: &[T], t: T, out: &mut [T]) -> Result<()> {
    check_dim(field.dim(), z.len())?;
    let c = field.schedule().vp_coefficients(t)?;
    field.score(z, t, out)?;
    let half_g2 = T::lit(0.5) * c.g2;
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = c.f * zi - half_g2 * *o;
    }
    Ok(())
}

/// Wraps a field and counts every score evaluation, including those made piece by piece.
pub struct CountingField<'a, T> {
    whole: Counter<'a, T>,
    parts: Vec<(T, T, Counter<'a, T>)>,
}

struct Counter<'a, T> {
    inner: &'a dyn ScoreField<T>,
    calls: Arc<AtomicUsize>,
}

impl<'a, T: Scalar> CountingField<'a, T> {
    pub fn new(inner: &'a dyn ScoreField<T>) -> Self {
        let calls = Arc::new(AtomicUsize::new(0));
        let parts = inner
            .pieces()
            .into_iter()
            .map(|p| (p.lo, p.hi, Counter { inner: p.field, calls: calls.clone() }))
            .collect();
        Self { whole: Counter { inner, calls }, parts }
    }
    pub fn calls(&self) -> usize {
        self.whole.calls.load(Ordering::Relaxed)
    }
}

impl<T: Scalar> ScoreField<T> for Counter<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        self.inner.schedule()
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(z, t, out)
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_vjp(z, t, probes, out, vjps)
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        Piece::whole(self)
    }
}

impl<T: Scalar> ScoreField<T> for CountingField<'_, T> {
    fn dim(&self) -> usize {
        self.whole.dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        self.whole.schedule()
    }
    fn score(&self, z: &[T], t: T, out: &mut [T]) -> Result<()> {
        self.whole.score(z, t, out)
    }
    fn score_vjp(&self, z: &[T], t: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        self.whole.score_vjp(z, t, probes, out, vjps)
    }
    fn pieces(&self) -> Vec<Piece<'_, T>> {
        self.parts.iter().map(|(lo, hi, c)| Piece { lo: *lo, hi: *hi, field: c as &dyn ScoreField<T> }).collect()
    }
}

/// Final states of `n` samples, row-major, with per-sample NFE.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    pub dim: usize,
    pub samples: Vec<T>,
    pub nfe: Vec<usize>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.nfe.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nfe.is_empty()
    }
    pub fn row(&self, i: usize) -> &[T] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }
    pub fn nfe_mean(&self) -> f64 {
        if self.nfe.is_empty() {
            0.0
        } else {
            self.nfe.iter().sum::<usize>() as f64 / self.nfe.len() as f64
        }
    }
    pub fn nfe_max(&self) -> usize {
        self.nfe.iter().copied().max().unwrap_or(0)
    }
}

pub(crate) fn prior_draw<T: Scalar>(seed: u64, index: usize, dim: usize) -> Vec<T> {
    let mut r = rng::stream(seed, &[tag::PRIOR, index as u64]);
    let mut z = vec![T::zero(); dim];
    rng::fill_normal(&mut r, &mut z);
    z
}

/// Integrates the probability-flow ODE from `t = 1` to `t = 0`, piece by piece.
pub fn solve_ode_backward<T: Scalar>(
    field: &dyn ScoreField<T>,
    z: &mut [T],
    opts: &Rk45Options<T>,
    mut log: Option<&mut Vec<(T, Vec<T>)>>,
) -> Result<usize> {
    let mut nfe = 0;
    for piece in field.pieces().iter().rev() {
        let f = piece.field;
        let stats = rk45::integrate(|t, y, dy| pf_ode_field(f, y, t, dy), piece.hi, piece.lo, z, opts, log.as_deref_mut())?;
        nfe += stats.nfe;
    }
    Ok(nfe)
}

fn collect<T: Scalar>(dim: usize, rows: Vec<Result<(Vec<T>, usize)>>) -> Result<SampleBatch<T>> {
    let mut samples = Vec::with_capacity(rows.len() * dim);
    let mut nfe = Vec::with_capacity(rows.len());
    for r in rows {
        let (z, k) = r?;
        samples.extend(z);
        nfe.push(k);
    }
    Ok(SampleBatch { dim, samples, nfe })
}

/// Draws `z_1 ~ N(0, I)` and integrates the probability-flow ODE to `t = 0` with RK45.
pub fn sample_ode<T: Scalar>(field: &dyn ScoreField<T>, n: usize, cfg: &SolverConfig) -> Result<SampleBatch<T>> {
    cfg.validate()?;
    let d = field.dim();
    let opts = cfg.rk45::<T>();
    let rows: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut z = prior_draw::<T>(cfg.seed, i, d);
            let nfe = solve_ode_backward(field, &mut z, &opts, None)?;
            Ok((z, nfe))
        })
        .collect();
    collect(d, rows)
}

/// Uniform grid `1 = t_0 > t_1 > ... > t_N = 0`.
fn grid<T: Scalar>(steps: usize, k: usize) -> T {
    if k >= steps {
        T::zero()
    } else {
        T::one() - T::from_usize_lossy(k) / T::from_usize_lossy(steps)
    }
}

/// One fixed-step run; returns the state at every grid time when `record` is set.
fn fixed_step_run<T: Scalar>(
    field: &dyn ScoreField<T>,
    method: Method,
    steps: usize,
    seed: u64,
    index: usize,
    z: &mut [T],
    mut record: Option<&mut Vec<(T, Vec<T>)>>,
) -> Result<usize> {
    let d = z.len();
    let sched = field.schedule();
    let mut noise_rng = rng::stream(seed, &[tag::SDE_NOISE, index as u64]);
    let mut s = vec![T::zero(); d];
    let mut noise = vec![T::zero(); d];
    if let Some(r) = record.as_deref_mut() {
        r.push((T::one(), z.to_vec()));
    }
    for k in 0..steps {
        let t = grid::<T>(steps, k);
        let t_next = grid::<T>(steps, k + 1);
        let dt = t - t_next;
        field.score(z, t, &mut s)?;
        match method {
            Method::Euler | Method::EulerMaruyama => {
                let c = sched.vp_coefficients(t)?;
                let stochastic = method == Method::EulerMaruyama;
                let g2 = if stochastic { c.g2 } else { T::lit(0.5) * c.g2 };
                if stochastic {
                    rng::fill_normal(&mut noise_rng, &mut noise);
                }
                let gs = (c.g2 * dt).sqrt();
                for i in 0..d {
                    let drift = c.f * z[i] - g2 * s[i];
                    z[i] = z[i] - drift * dt + if stochastic { gs * noise[i] } else { T::zero() };
                }
            }
            Method::Ancestral => {
                let g_t = sched.gamma(t)?;
                let g_s = sched.gamma(t_next)?;
                let (a_t, s_t) = crate::schedule::alpha_sigma_from_gamma(g_t);
                let (a_s, s_s) = crate::schedule::alpha_sigma_from_gamma(g_s);
                // Posterior q(z_s | z_t, x_hat) with x_hat from Tweedie's formula.
                let r = (g_s - g_t).exp();
                let var = s_s * s_s * (-(g_s - g_t).exp_m1());
                let coef_z = r * a_s / a_t;
                let coef_x = a_s * (-(g_s - g_t).exp_m1());
                rng::fill_normal(&mut noise_rng, &mut noise);
                let sd = var.max(T::zero()).sqrt();
                for i in 0..d {
                    let x_hat = (z[i] + s_t * s_t * s[i]) / a_t;
                    z[i] = coef_z * z[i] + coef_x * x_hat + sd * noise[i];
                }
            }
            Method::Rk45 => unreachable!("adaptive method in fixed-step loop"),
        }
        if let Some(r) = record.as_deref_mut() {
            r.push((t_next, z.to_vec()));
        }
    }
    Ok(steps)
}

fn sample_fixed<T: Scalar>(field: &dyn ScoreField<T>, n: usize, method: Method, steps: usize, seed: u64) -> Result<SampleBatch<T>> {
    if steps == 0 {
        return Err(Error::Config("fixed_steps must be at least 1".into()));
    }
    let d = field.dim();
    let rows: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut z = prior_draw::<T>(seed, i, d);
            let nfe = fixed_step_run(field, method, steps, seed, i, &mut z, None)?;
            Ok((z, nfe))
        })
        .collect();
    collect(d, rows)
}

/// Euler–Maruyama on the reverse SDE `dz = [f z - g^2 s] dt + g dw` from `t = 1` to `0`.
pub fn sample_sde<T: Scalar>(field: &dyn ScoreField<T>, n: usize, cfg: &SolverConfig) -> Result<SampleBatch<T>> {
    cfg.validate()?;
    sample_fixed(field, n, Method::EulerMaruyama, cfg.fixed_steps, cfg.seed)
}

/// Discrete-time ancestral sampling on a uniform grid.
///
/// Each step draws from `q(z_s | z_t, x_hat)`: mean
/// `e^{gamma_s - gamma_t} (alpha_s/alpha_t) z_t + alpha_s (1 - e^{gamma_s - gamma_t}) x_hat`
/// and variance `sigma_s^2 (1 - e^{gamma_s - gamma_t})`.
pub fn sample_ancestral<T: Scalar>(field: &dyn ScoreField<T>, n: usize, steps: usize, seed: u64) -> Result<SampleBatch<T>> {
    sample_fixed(field, n, Method::Ancestral, steps, seed)
}

/// Dispatches on `cfg.method`.
pub fn sample<T: Scalar>(field: &dyn ScoreField<T>, n: usize, cfg: &SolverConfig) -> Result<SampleBatch<T>> {
    cfg.validate()?;
    match cfg.method {
        Method::Rk45 => sample_ode(field, n, cfg),
        Method::Ancestral => sample_ancestral(field, n, cfg.fixed_steps, cfg.seed),
        m => sample_fixed(field, n, m, cfg.fixed_steps, cfg.seed),
    }
}

/// Full fixed-step path of sample `index`, as `(t, z_t)` at every grid time.
pub fn fixed_step_path<T: Scalar>(
    field: &dyn ScoreField<T>,
    method: Method,
    steps: usize,
    seed: u64,
    index: usize,
) -> Result<Vec<(T, Vec<T>)>> {
    if method == Method::Rk45 {
        return Err(Error::Config("fixed_step_path needs a fixed-step method".into()));
    }
    let mut z = prior_draw::<T>(seed, index, field.dim());
    let mut rec = Vec::with_capacity(steps + 1);
    fixed_step_run(field, method, steps, seed, index, &mut z, Some(&mut rec))?;
    Ok(rec)
}

/// Accepted RK45 steps of sample `index` from `t = 1` downwards.
pub fn adaptive_path<T: Scalar>(field: &dyn ScoreField<T>, cfg: &SolverConfig, index: usize) -> Result<Vec<(T, Vec<T>)>> {
    let mut z = prior_draw::<T>(cfg.seed, index, field.dim());
    let mut log = vec![(T::one(), z.clone())];
    solve_ode_backward(field, &mut z, &cfg.rk45(), Some(&mut log))?;
    Ok(log)
}

/// Whether two merged models with switch times `eta_lo < eta_hi` follow identical paths
/// before the later switch.
///
/// Fixed-step methods compare every grid state with `t > eta_hi` bit for bit. For RK45
/// the comparison covers every accepted step up to the first one whose interval
/// straddles `eta_hi`, which the later-switching model truncates at the switch.
pub fn trajectory_prefix<T: Scalar>(
    early: &dyn ScoreField<T>,
    late: &dyn ScoreField<T>,
    eta_hi: T,
    cfg: &SolverConfig,
    samples: usize,
) -> Result<bool> {
    for i in 0..samples {
        let ok = match cfg.method {
            Method::Rk45 => {
                let a = adaptive_path(early, cfg, i)?;
                let b = adaptive_path(late, cfg, i)?;
                let shared = b.iter().take_while(|(t, _)| *t > eta_hi).count();
                shared > 0 && a.len() >= shared && bit_equal_paths(&a[..shared], &b[..shared])
            }
            m => {
                let a = fixed_step_path(early, m, cfg.fixed_steps, cfg.seed, i)?;
                let b = fixed_step_path(late, m, cfg.fixed_steps, cfg.seed, i)?;
                let pa: Vec<_> = a.into_iter().filter(|(t, _)| *t > eta_hi).collect();
                let pb: Vec<_> = b.into_iter().filter(|(t, _)| *t > eta_hi).collect();
                !pa.is_empty() && bit_equal_paths(&pa, &pb)
            }
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

pub(crate) fn bit_equal_paths<T: Scalar>(a: &[(T, Vec<T>)], b: &[(T, Vec<T>)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((ta, za), (tb, zb))| {
            ta.to_f64_lossy().to_bits() == tb.to_f64_lossy().to_bits()
                && za.iter().zip(zb).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
        })
}
