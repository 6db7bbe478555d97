//! End-to-end oracle suite behind the `verify` command.
//!
//! Each check compares the engine against a closed form or an exact identity and
//! reports a single pass/fail line. A fault can be injected into the schedule under
//! test to confirm that the suite notices.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expert::{Expert, GaussianMixtureSpec};
use crate::field::ScoreField;
use crate::integrate::{trajectory_prefix, Method, SolverConfig};
use crate::likelihood::{
    continuous_nll, divergence, hutchinson_terms, ode_loglik, std_normal_logpdf, Bound, DivergenceConfig,
    LinearField, ProbeDist,
};
use crate::merge::{adapt_score, adapt_score_with, MergedExpert};
use crate::rng;
use crate::schedule::{switching_bounds, GaussianPath, NoiseSchedule, ScheduleForm};
use crate::stats::MeanSe;

pub const QUALITY_RANGE: (f64, f64) = (-12.43, 8.764);
pub const LIKELIHOOD_RANGE: (f64, f64) = (-13.3, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates both endpoints of the merged schedule, reversing the direction of gamma.
    FlipGammaSign,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Merged schedule of the default expert pair, with the fault applied if any.
pub fn schedule_under_test(fault: Option<Fault>) -> NoiseSchedule<f64> {
    let (lo, hi) = (LIKELIHOOD_RANGE.0, QUALITY_RANGE.1);
    match fault {
        None => NoiseSchedule { form: ScheduleForm::Linear, gamma_min: lo, gamma_max: hi },
        Some(Fault::FlipGammaSign) => NoiseSchedule { form: ScheduleForm::Linear, gamma_min: -lo, gamma_max: -hi },
    }
}

/// Gamma strictly increasing, alpha decreasing, sigma increasing, and the VP identity.
pub fn check_monotone(s: &NoiseSchedule<f64>) -> Check {
    timed("schedule monotonicity", || {
        let n = 1000;
        let mut prev: Option<(f64, f64, f64)> = None;
        let mut worst_vp = 0.0f64;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let g = s.gamma(t)?;
            let (a, sg) = s.alpha_sigma(t)?;
            worst_vp = worst_vp.max((a * a + sg * sg - 1.0).abs());
            if s.gamma_derivative(t)? <= 0.0 {
                return Ok((false, format!("gamma'({t}) <= 0")));
            }
            if let Some((pg, pa, ps)) = prev {
                if !(g > pg && a <= pa && sg >= ps) {
                    return Ok((false, format!("not monotone at t = {t}: gamma {pg} -> {g}")));
                }
            }
            prev = Some((g, a, sg));
        }
        Ok((worst_vp < 1e-14, format!("max |alpha^2 + sigma^2 - 1| = {worst_vp:.2e}")))
    })
}

pub fn check_switching_bounds(merged: &NoiseSchedule<f64>) -> Check {
    timed("switching bounds", || {
        let b = switching_bounds(QUALITY_RANGE, LIKELIHOOD_RANGE, merged)?;
        let ok = (b.eta_min - 0.0394).abs() < 5e-4 && (b.eta_max - 0.8294).abs() < 5e-4;
        Ok((ok, format!("eta_min = {:.5}, eta_max = {:.5}", b.eta_min, b.eta_max)))
    })
}

fn gaussian_points(n: usize, sd: f64, seed: u64, tag: u64) -> Vec<[f64; 2]> {
    let mut r = rng::stream(seed, &[tag]);
    (0..n).map(|_| [sd * rng::normal::<f64, _>(&mut r), sd * rng::normal::<f64, _>(&mut r)]).collect()
}

/// Probability-flow log-likelihood of analytic Gaussian experts against closed forms.
pub fn check_gaussian_oracle(merged: &NoiseSchedule<f64>, seed: u64) -> Check {
    timed("gaussian likelihood oracle", || {
        let merged = &merged.validated()?;
        let solver = SolverConfig { atol: 1e-5, rtol: 1e-5, seed, ..SolverConfig::default() };
        let div = DivergenceConfig::exact();
        let unit = Expert::unit_gaussian(2, *merged);
        let narrow_spec = GaussianMixtureSpec::gaussian(vec![0.0, 0.0], 0.25)?;
        let narrow = Expert::analytic_gmm(narrow_spec.clone(), *merged)?;
        let mut worst = [0.0f64; 2];
        for (i, z) in gaussian_points(100, 1.0, seed, 21).iter().enumerate() {
            let r = ode_loglik(&unit, z, &solver, &div, i as u64)?;
            worst[0] = worst[0].max((r.log_prob - std_normal_logpdf(z)).abs() / 2.0);
        }
        for (i, z) in gaussian_points(100, 0.5, seed, 22).iter().enumerate() {
            let r = ode_loglik(&narrow, z, &solver, &div, i as u64)?;
            worst[1] = worst[1].max((r.log_prob - narrow_spec.log_density(z)).abs() / 2.0);
        }
        let ok = worst.iter().all(|&w| w < 1e-3);
        Ok((ok, format!("max error nats/dim: N(0,I) {:.2e}, N(0,0.25I) {:.2e}", worst[0], worst[1])))
    })
}

/// VP path scaled by a constant factor; a minimal non-variance-preserving path.
struct ScaledPath {
    inner: NoiseSchedule<f64>,
    c: f64,
}

impl GaussianPath<f64> for ScaledPath {
    fn gamma(&self, t: f64) -> Result<f64> {
        self.inner.gamma(t)
    }
    fn gamma_inverse(&self, g: f64) -> Result<f64> {
        self.inner.gamma_inverse(g)
    }
    fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let (a, s) = self.inner.alpha_sigma(t)?;
        Ok((self.c * a, self.c * s))
    }
}

/// Adapted oracle scores against the oracle evaluated directly on the target process.
pub fn check_adaptation(merged: &NoiseSchedule<f64>, seed: u64) -> Check {
    timed("score adaptation identity", || {
        let spec = GaussianMixtureSpec::new(
            vec![0.6, 0.4],
            vec![vec![-0.5, 0.25], vec![0.5, -0.5]],
            vec![0.04, 0.09],
        )?;
        let lik = NoiseSchedule::linear(LIKELIHOOD_RANGE.0, LIKELIHOOD_RANGE.1)?;
        let qual = NoiseSchedule::linear(QUALITY_RANGE.0, QUALITY_RANGE.1)?;
        let bounds = switching_bounds(QUALITY_RANGE, LIKELIHOOD_RANGE, merged)?;
        let experts = [
            (Expert::analytic_gmm(spec.clone(), lik)?, 0.0, bounds.eta_max),
            (Expert::analytic_gmm(spec.clone(), qual)?, bounds.eta_min, 1.0),
        ];
        let mut r = rng::stream(seed, &[31]);
        let (mut out, mut want) = ([0.0; 2], [0.0; 2]);
        let mut worst_vp = 0.0f64;
        for i in 0..1000 {
            let (e, lo, hi) = &experts[i % 2];
            let t = lo + (hi - lo) * rng::uniform::<f64, _>(&mut r);
            let z = [rng::normal::<f64, _>(&mut r), rng::normal::<f64, _>(&mut r)];
            adapt_score(e, merged, &z, t, &mut out)?;
            spec.score_at_gamma(&z, merged.gamma(t)?, &mut want);
            for k in 0..2 {
                worst_vp = worst_vp.max((out[k] - want[k]).abs());
            }
        }
        // An expert trained on the path scaled by c has marginal p(y / c) / c^d, hence
        // score s(y / c) / c. Adapting it back must return the unscaled oracle score.
        let mut worst_scaled = 0.0f64;
        for &c in &[2.0, 0.5] {
            let path = ScaledPath { inner: lik, c };
            for _ in 0..200 {
                let t = bounds.eta_max * rng::uniform::<f64, _>(&mut r);
                let z = [rng::normal::<f64, _>(&mut r), rng::normal::<f64, _>(&mut r)];
                let expert_score = |y: &[f64], u: f64, o: &mut [f64]| -> Result<()> {
                    let g = lik.gamma(u)?;
                    spec.score_at_gamma(&[y[0] / c, y[1] / c], g, o);
                    o.iter_mut().for_each(|v| *v /= c);
                    Ok(())
                };
                adapt_score_with(&path, expert_score, merged, &z, t, &mut out)?;
                let (u, _) = crate::merge::remap(merged, &path, t)?;
                spec.score_at_gamma(&z, lik.gamma(u)?, &mut want);
                for k in 0..2 {
                    worst_scaled = worst_scaled.max((out[k] - want[k]).abs());
                }
            }
        }
        let ok = worst_vp < 1e-10 && worst_scaled < 1e-12;
        Ok((ok, format!("max error: VP {worst_vp:.2e}, scaled path {worst_scaled:.2e}")))
    })
}

/// Exact trace, Hutchinson accuracy and its Monte Carlo rate on a random linear field.
pub fn check_divergence(seed: u64) -> Check {
    timed("divergence estimators", || {
        let d = 4;
        let mut r = rng::stream(seed, &[41]);
        let a: Vec<f64> = (0..d * d).map(|_| rng::normal(&mut r)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng::normal(&mut r)).collect();
        let field = LinearField::new(a, b)?;
        let z = [0.3, -0.2, 0.1, 0.5];
        let exact = divergence(&field, &z, 0.5, &DivergenceConfig::exact(), &mut r)?;
        let exact_err = (exact - field.trace()).abs();

        let terms = hutchinson_terms(&field, &z, 0.5, 10_000, ProbeDist::Rademacher, &mut r)?;
        let m = MeanSe::of(&terms);
        let z_score = (m.mean - field.trace()).abs() / m.se;

        let reps = 200;
        let probes = [10usize, 100, 1000, 10_000];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &k in &probes {
            let mut sq = 0.0;
            for _ in 0..reps {
                let t = hutchinson_terms(&field, &z, 0.5, k, ProbeDist::Rademacher, &mut r)?;
                let e = t.iter().sum::<f64>() / k as f64 - field.trace();
                sq += e * e;
            }
            xs.push((k as f64).ln());
            ys.push((sq / reps as f64).sqrt().ln());
        }
        let slope = least_squares_slope(&xs, &ys);
        let ok = exact_err < 1e-12 && z_score < 3.0 && (slope + 0.5).abs() < 0.1;
        Ok((ok, format!("exact error {exact_err:.1e}, hutchinson |z| = {z_score:.2}, rms slope {slope:.3}")))
    })
}

pub(crate) fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean VLB against mean ODE bound on the unit-Gaussian oracle.
pub fn check_bound_ordering(merged: &NoiseSchedule<f64>, seed: u64) -> Check {
    timed("bound ordering", || {
        let merged = &merged.validated()?;
        let e = Expert::unit_gaussian(2, *merged);
        let data: Vec<f64> = gaussian_points(200, 1.0, seed, 51).concat();
        let solver = SolverConfig { seed, ..SolverConfig::default() };
        let ode = continuous_nll(&e, &data, &Bound::Ode { solver, div: DivergenceConfig::exact() })?;
        let v = continuous_nll(&e, &data, &Bound::Vlb { mc_t: 64, seed })?;
        let (o, w) = (ode.nats_per_dim, v.nats_per_dim);
        let slack = 4.0 * (o.se.powi(2) + w.se.powi(2)).sqrt();
        let ok = w.mean + slack >= o.mean;
        Ok((ok, format!("vlb {:.5} vs ode {:.5} nats/dim (slack {slack:.4})", w.mean, o.mean)))
    })
}

/// Two merged models sharing a 256-step ancestral solver agree bit for bit above the later switch.
pub fn check_trajectory_prefix(merged: &NoiseSchedule<f64>, seed: u64) -> Check {
    timed("trajectory prefix", || {
        use std::sync::Arc;
        let lik = NoiseSchedule::linear(LIKELIHOOD_RANGE.0, LIKELIHOOD_RANGE.1)?;
        let qual = NoiseSchedule::linear(QUALITY_RANGE.0, QUALITY_RANGE.1)?;
        let q = Arc::new(Expert::analytic_gmm(
            GaussianMixtureSpec::new(vec![0.5, 0.5], vec![vec![-0.5, 0.0], vec![0.5, 0.0]], vec![0.02, 0.02])?,
            qual,
        )?);
        let l = Arc::new(Expert::analytic_gmm(GaussianMixtureSpec::gaussian(vec![0.1, -0.1], 0.3)?, lik)?);
        let early = MergedExpert::new(q.clone(), l.clone(), *merged, 0.3)?;
        let late = MergedExpert::new(q, l, *merged, 0.5)?;
        let mut all = true;
        for method in [Method::Ancestral, Method::EulerMaruyama, Method::Euler] {
            let cfg = SolverConfig { method, fixed_steps: 256, seed, ..SolverConfig::default() };
            all &= trajectory_prefix(&early as &dyn ScoreField<f64>, &late, 0.5, &cfg, 16)?;
        }
        // The fields do differ below the switch, so the check is not vacuous.
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        early.score(&[0.2, 0.2], 0.4, &mut a)?;
        late.score(&[0.2, 0.2], 0.4, &mut b)?;
        let ok = all && a != b;
        Ok((ok, format!("bit-identical above t = 0.5 for 3 samplers x 16 paths: {all}")))
    })
}

/// Runs the whole suite, reporting each check as it finishes.
pub fn run_suite(opts: &VerifyOptions, on_check: &mut dyn FnMut(&Check)) -> VerifyReport {
    let merged = schedule_under_test(opts.fault);
    let seed = opts.seed;
    let steps: [&dyn Fn() -> Check; 7] = [
        &|| check_monotone(&merged),
        &|| check_switching_bounds(&merged),
        &|| check_gaussian_oracle(&merged, seed),
        &|| check_adaptation(&merged, seed),
        &|| check_divergence(seed),
        &|| check_bound_ordering(&merged, seed),
        &|| check_trajectory_prefix(&merged, seed),
    ];
    let mut report = VerifyReport::default();
    for step in steps {
        let c = step();
        on_check(&c);
        report.checks.push(c);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_the_real_schedule() {
        let r = run_suite(&VerifyOptions::default(), &mut |_| {});
        assert!(r.passed(), "{:#?}", r.failures());
        assert_eq!(r.checks.len(), 7);
    }

    #[test]
    fn flipped_gamma_fails_monotonicity() {
        let s = schedule_under_test(Some(Fault::FlipGammaSign));
        let c = check_monotone(&s);
        assert!(!c.passed, "{c:?}");
        assert!(check_monotone(&schedule_under_test(None)).passed);
        let r = run_suite(&VerifyOptions { seed: 0, fault: Some(Fault::FlipGammaSign) }, &mut |_| {});
        assert!(!r.passed());
    }

    #[test]
    fn slope_of_a_line() {
        let x = [0.0, 1.0, 2.0];
        assert!((least_squares_slope(&x, &[1.0, 0.5, 0.0]) + 0.5).abs() < 1e-15);
    }
}
