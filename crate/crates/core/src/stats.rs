//! Small summary statistics and hypothesis tests used by the evaluation harness.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::error::{Error, Result};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self { mean, se: (var / n as f64).sqrt() }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self { mean: self.mean * k, se: self.se * k.abs() }
    }

    pub fn shifted(self, c: f64) -> Self {
        Self { mean: self.mean + c, se: self.se }
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Spearman rank correlation with a one-sided p-value for a negative association.
///
/// The p-value uses the t approximation `t = rho sqrt((n-2)/(1-rho^2))` with `n - 2`
/// degrees of freedom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub n: usize,
    pub p_negative: f64,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Statistics("spearman needs two equal-length series of at least 3 points".into()));
    }
    let rho = pearson(&ranks(x), &ranks(y));
    let n = x.len();
    let df = (n - 2) as f64;
    let p_negative = if rho <= -1.0 {
        0.0
    } else if rho >= 1.0 {
        1.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Statistics(e.to_string()))?.cdf(t)
    };
    Ok(Spearman { rho, n, p_negative })
}

/// One-sided paired t-test of `mean(a - b) > 0`.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Statistics("paired test needs equal lengths of at least 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = MeanSe::of(&d);
    if m.se == 0.0 {
        return Ok(if m.mean > 0.0 { 0.0 } else { 1.0 });
    }
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).map_err(|e| Error::Statistics(e.to_string()))?;
    Ok(1.0 - dist.cdf(m.mean / m.se))
}

/// One-sided exact sign test of `a > b` in more pairs than chance; ties are dropped.
pub fn sign_test_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Statistics("sign test needs equal lengths".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let n = a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
    if n == 0 {
        return Ok(1.0);
    }
    let dist = Binomial::new(0.5, n).map_err(|e| Error::Statistics(e.to_string()))?;
    Ok(if wins == 0 { 1.0 } else { dist.sf(wins - 1) })
}
