//! Closed-form marginal scores for data whose noised marginals are known exactly.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::schedule::alpha_sigma_from_gamma;
use crate::Scalar;

/// Isotropic Gaussian mixture `sum_k w_k N(m_k, v_k I)`.
///
/// Under VP noising at level `gamma` each component becomes `N(alpha m_k, (alpha^2 v_k + sigma^2) I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec<T> {
    pub weights: Vec<T>,
    pub means: Vec<Vec<T>>,
    pub variances: Vec<T>,
}

const WEIGHT_FLOOR: f64 = 1e-300;

impl<T: Scalar> GaussianMixtureSpec<T> {
    pub fn new(weights: Vec<T>, means: Vec<Vec<T>>, variances: Vec<T>) -> Result<Self> {
        let spec = Self { weights, means, variances };
        spec.validate()?;
        Ok(spec)
    }

    /// Single isotropic Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: Vec<T>, variance: T) -> Result<Self> {
        Self::new(vec![T::one()], vec![mean], vec![variance])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![T::zero(); dim], T::one()).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::Config(
                "mixture needs matching, non-empty weights/means/variances".into(),
            ));
        }
        let dim = self.means[0].len();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if self.weights.iter().any(|&w| !(w > T::zero())) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: T = self.weights.iter().copied().sum();
        if (total - T::one()).abs() > T::rel_eps() {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if self.variances.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Posterior component weights, component scores, and noised variances at `(z, gamma)`.
    fn components(&self, z: &[T], gamma: T) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = z.len();
        let k = self.weights.len();
        let (alpha, sigma) = alpha_sigma_from_gamma(gamma);
        let a2 = alpha * alpha;
        let s2 = sigma * sigma;
        let half = T::lit(0.5);
        let dn = T::from_usize_lossy(d);
        let mut logw = vec![T::zero(); k];
        let mut comp = vec![T::zero(); k * d];
        let mut var = vec![T::zero(); k];
        for j in 0..k {
            let v = a2 * self.variances[j] + s2;
            var[j] = v;
            let mut sq = T::zero();
            for i in 0..d {
                let r = z[i] - alpha * self.means[j][i];
                sq += r * r;
                comp[j * d + i] = -r / v;
            }
            logw[j] = self.weights[j].ln() - half * dn * v.ln() - half * sq / v;
        }
        let mx = logw.iter().copied().fold(T::neg_infinity(), T::max);
        let mut tot = T::zero();
        for lw in logw.iter_mut() {
            *lw = (*lw - mx).exp();
            tot += *lw;
        }
        let floor = T::lit(WEIGHT_FLOOR);
        for lw in logw.iter_mut() {
            *lw = (*lw / tot).max(floor);
        }
        (logw, comp, var)
    }

    pub fn score_at_gamma(&self, z: &[T], gamma: T, out: &mut [T]) {
        let d = z.len();
        let (w, comp, _) = self.components(z, gamma);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (j, &wj) in w.iter().enumerate() {
            for i in 0..d {
                out[i] += wj * comp[j * d + i];
            }
        }
    }

    /// Score plus `p^T J` for each probe, with `J = -sum_k w_k / v_k I + sum_k w_k s_k (s_k - s)^T`.
    pub fn score_vjp_at_gamma(&self, z: &[T], gamma: T, probes: &[T], out: &mut [T], vjps: &mut [T]) {
        let d = z.len();
        let (w, comp, var) = self.components(z, gamma);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (j, &wj) in w.iter().enumerate() {
            for i in 0..d {
                out[i] += wj * comp[j * d + i];
            }
        }
        let diag: T = w.iter().zip(&var).map(|(&wj, &v)| wj / v).sum();
        for (p, v) in probes.chunks(d).zip(vjps.chunks_mut(d)) {
            for i in 0..d {
                v[i] = -diag * p[i];
            }
            for (j, &wj) in w.iter().enumerate() {
                let sk = &comp[j * d..(j + 1) * d];
                let ps: T = p.iter().zip(sk).map(|(&a, &b)| a * b).sum();
                for i in 0..d {
                    v[i] += wj * ps * (sk[i] - out[i]);
                }
            }
        }
    }

    /// `log q_gamma(z)` of the noised mixture.
    pub fn log_density_at_gamma(&self, z: &[T], gamma: T) -> T {
        let d = z.len();
        let (alpha, sigma) = alpha_sigma_from_gamma(gamma);
        let half = T::lit(0.5);
        let ln2pi = (T::PI() + T::PI()).ln();
        let dn = T::from_usize_lossy(d);
        let terms: Vec<T> = (0..self.weights.len())
            .map(|j| {
                let v = alpha * alpha * self.variances[j] + sigma * sigma;
                let sq: T = (0..d).map(|i| (z[i] - alpha * self.means[j][i]).powi(2)).sum();
                self.weights[j].ln() - half * dn * (ln2pi + v.ln()) - half * sq / v
            })
            .collect();
        let mx = terms.iter().copied().fold(T::neg_infinity(), T::max);
        mx + terms.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
    }

    /// Exact data log-density (`gamma -> -inf`).
    pub fn log_density(&self, x: &[T]) -> T {
        let d = x.len();
        let half = T::lit(0.5);
        let ln2pi = (T::PI() + T::PI()).ln();
        let dn = T::from_usize_lossy(d);
        let terms: Vec<T> = (0..self.weights.len())
            .map(|j| {
                let v = self.variances[j];
                let sq: T = (0..d).map(|i| (x[i] - self.means[j][i]).powi(2)).sum();
                self.weights[j].ln() - half * dn * (ln2pi + v.ln()) - half * sq / v
            })
            .collect();
        let mx = terms.iter().copied().fold(T::neg_infinity(), T::max);
        mx + terms.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
    }
}

/// Uniform data on the axis-aligned box `prod_i [lo_i, hi_i]`.
///
/// The noised marginal factorizes per coordinate into a difference of normal CDFs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

/// `log Phi(x)` accurate into the far lower tail.
pub(crate) fn log_ndtr(x: f64) -> f64 {
    if x < -30.0 {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    } else if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    }
}

fn log_phi(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `log(Phi(a) - Phi(b))` for `a > b`.
fn log_ndtr_diff(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        let la = log_ndtr(a);
        la + (-(log_ndtr(b) - la).exp()).ln_1p()
    } else if b >= 0.0 {
        let lb = log_ndtr(-b);
        lb + (-(log_ndtr(-a) - lb).exp()).ln_1p()
    } else {
        (-(log_ndtr(-a).exp() + log_ndtr(b).exp())).ln_1p()
    }
}

impl<T: Scalar> BoxSpec<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        let spec = Self { lo, hi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cube(dim: usize, lo: T, hi: T) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::Config("box bounds must be non-empty and equal length".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(&l, &h)| !(l < h)) {
            return Err(Error::Config("box needs lo < hi in every coordinate".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Per-coordinate score and its derivative.
    fn coord(&self, i: usize, z: f64, alpha: f64, sigma: f64) -> (f64, f64) {
        let ua = (z - alpha * self.lo[i].to_f64_lossy()) / sigma;
        let ub = (z - alpha * self.hi[i].to_f64_lossy()) / sigma;
        let ld = log_ndtr_diff(ua, ub);
        let ra = (log_phi(ua) - ld).exp() / sigma;
        let rb = (log_phi(ub) - ld).exp() / sigma;
        let s = ra - rb;
        let ds = (-ua * ra + ub * rb) / sigma - s * s;
        (s, ds)
    }

    pub fn score_at_gamma(&self, z: &[T], gamma: T, out: &mut [T]) {
        let (a, s) = alpha_sigma_from_gamma(gamma.to_f64_lossy());
        for i in 0..z.len() {
            out[i] = T::lit(self.coord(i, z[i].to_f64_lossy(), a, s).0);
        }
    }

    pub fn score_vjp_at_gamma(&self, z: &[T], gamma: T, probes: &[T], out: &mut [T], vjps: &mut [T]) {
        let d = z.len();
        let (a, s) = alpha_sigma_from_gamma(gamma.to_f64_lossy());
        let mut diag = vec![T::zero(); d];
        for i in 0..d {
            let (si, dsi) = self.coord(i, z[i].to_f64_lossy(), a, s);
            out[i] = T::lit(si);
            diag[i] = T::lit(dsi);
        }
        for (p, v) in probes.chunks(d).zip(vjps.chunks_mut(d)) {
            for i in 0..d {
                v[i] = diag[i] * p[i];
            }
        }
    }

    pub fn log_density_at_gamma(&self, z: &[T], gamma: T) -> T {
        let (a, s) = alpha_sigma_from_gamma(gamma.to_f64_lossy());
        let mut acc = 0.0;
        for i in 0..z.len() {
            let (l, h) = (self.lo[i].to_f64_lossy(), self.hi[i].to_f64_lossy());
            let zi = z[i].to_f64_lossy();
            acc += log_ndtr_diff((zi - a * l) / s, (zi - a * h) / s) - (a * (h - l)).ln();
        }
        T::lit(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gaussian_score_is_minus_z_at_every_level() {
        let spec = GaussianMixtureSpec::<f64>::standard_normal(3);
        let z = [0.3, -1.7, 2.2];
        let mut out = [0.0; 3];
        for &g in &[-13.3, -2.0, 0.0, 4.0, 8.764] {
            spec.score_at_gamma(&z, g, &mut out);
            for i in 0..3 {
                assert!((out[i] + z[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn narrow_gaussian_at_gamma_zero() {
        let spec = GaussianMixtureSpec::<f64>::gaussian(vec![0.0, 0.0], 0.25).unwrap();
        let z = [0.4, -1.0];
        let mut out = [0.0; 2];
        spec.score_at_gamma(&z, 0.0, &mut out);
        assert!((out[0] + 0.4 / 0.625).abs() < 1e-12);
        assert!((out[1] - 1.0 / 0.625).abs() < 1e-12);
    }

    #[test]
    fn midpoint_score_averages_components() {
        let spec = GaussianMixtureSpec::<f64>::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.5], vec![1.0, -0.5]],
            vec![0.2, 0.2],
        )
        .unwrap();
        let g = -1.0;
        let (a, s) = alpha_sigma_from_gamma(g);
        let z = [0.0, 0.0];
        let mut out = [1.0; 2];
        spec.score_at_gamma(&z, g, &mut out);
        let v = a * a * 0.2 + s * s;
        let c1 = [(a * -1.0 - z[0]) / v, (a * 0.5 - z[1]) / v];
        let c2 = [(a * 1.0 - z[0]) / v, (a * -0.5 - z[1]) / v];
        for i in 0..2 {
            assert!((out[i] - 0.5 * (c1[i] + c2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_score_is_gradient_of_log_density() {
        let spec = GaussianMixtureSpec::<f64>::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![-1.0, 0.5], vec![1.0, -0.5], vec![0.0, 1.0]],
            vec![0.05, 0.1, 0.02],
        )
        .unwrap();
        let z = [0.3, 0.1];
        let g = -1.5;
        let mut s = [0.0; 2];
        spec.score_at_gamma(&z, g, &mut s);
        let h = 1e-6;
        for i in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (spec.log_density_at_gamma(&zp, g) - spec.log_density_at_gamma(&zm, g)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-6 * (1.0 + s[i].abs()));
        }
    }

    #[test]
    fn gmm_vjp_matches_finite_differences() {
        let spec = GaussianMixtureSpec::<f64>::new(
            vec![0.4, 0.6],
            vec![vec![-0.5, 0.5], vec![0.6, -0.2]],
            vec![0.03, 0.08],
        )
        .unwrap();
        let z = [0.05, 0.1];
        let g = -2.0;
        let probe = [0.7, -1.3];
        let mut out = [0.0; 2];
        let mut vjp = [0.0; 2];
        spec.score_vjp_at_gamma(&z, g, &probe, &mut out, &mut vjp);
        let h = 1e-6;
        for j in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let (mut sp, mut sm) = ([0.0; 2], [0.0; 2]);
            spec.score_at_gamma(&zp, g, &mut sp);
            spec.score_at_gamma(&zm, g, &mut sm);
            let col: f64 = (0..2).map(|i| probe[i] * (sp[i] - sm[i]) / (2.0 * h)).sum();
            assert!((col - vjp[j]).abs() < 1e-5 * (1.0 + col.abs()), "{col} vs {}", vjp[j]);
        }
    }

    #[test]
    fn box_score_matches_log_density_gradient() {
        let spec = BoxSpec::<f64>::cube(2, -1.0, 1.0).unwrap();
        let h = 1e-6;
        for &g in &[-10.0, -3.0, 0.0, 5.0] {
            for &z in &[[0.2, -0.99], [1.05, 0.0], [-3.0, 2.5]] {
                let mut s = [0.0; 2];
                let mut dv = [0.0; 4];
                spec.score_vjp_at_gamma(&z, g, &[1.0, 0.0, 0.0, 1.0], &mut s, &mut dv);
                for i in 0..2 {
                    let mut zp = z;
                    let mut zm = z;
                    zp[i] += h;
                    zm[i] -= h;
                    let fd = (spec.log_density_at_gamma(&zp, g) - spec.log_density_at_gamma(&zm, g))
                        / (2.0 * h);
                    assert!((fd - s[i]).abs() < 1e-4 * (1.0 + s[i].abs()), "g={g} z={z:?}");
                    let (mut sp, mut sm) = ([0.0; 2], [0.0; 2]);
                    spec.score_at_gamma(&zp, g, &mut sp);
                    spec.score_at_gamma(&zm, g, &mut sm);
                    let fdd = (sp[i] - sm[i]) / (2.0 * h);
                    assert!((fdd - dv[i * 2 + i]).abs() < 1e-4 * (1.0 + fdd.abs()), "g={g} z={z:?}");
                }
            }
        }
    }

    #[test]
    fn box_density_integrates_to_one() {
        let spec = BoxSpec::<f64>::cube(1, -1.0, 1.0).unwrap();
        let n = 20_000;
        let (a, b) = (-4.0, 4.0);
        let h = (b - a) / n as f64;
        let mass: f64 = (0..n)
            .map(|k| spec.log_density_at_gamma(&[a + (k as f64 + 0.5) * h], -2.0).exp() * h)
            .sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_ndtr_tails() {
        assert!((log_ndtr(0.0) - 0.5f64.ln()).abs() < 1e-15);
        let far = log_ndtr(-40.0);
        assert!(far.is_finite() && far < -800.0);
        assert!(log_ndtr(10.0).abs() < 1e-20);
        // Continuity across the asymptotic switch.
        assert!((log_ndtr(-30.0 + 1e-9) - log_ndtr(-30.0 - 1e-9)).abs() < 1e-6);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GaussianMixtureSpec::<f64>::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixtureSpec::<f64>::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(BoxSpec::<f64>::new(vec![1.0], vec![0.0]).is_err());
    }
}
