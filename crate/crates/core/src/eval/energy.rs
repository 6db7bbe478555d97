//! Energy distance with a permutation test, the sample-quality proxy.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Smallest sample size accepted on either side.
pub const MIN_SAMPLES: usize = 100;
/// Smallest number of label permutations accepted.
pub const MIN_PERMUTATIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    /// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with V-statistic means.
    pub distance: f64,
    /// `(1 + #{permuted >= observed}) / (1 + permutations)`.
    pub p_value: f64,
    /// Standard deviation of the permutation null, a scale for comparing distances.
    pub null_sd: f64,
    pub permutations: usize,
}

struct Pooled<'a> {
    rows: &'a [f64],
    dim: usize,
    n: usize,
    matrix: Option<Vec<f64>>,
}

impl Pooled<'_> {
    fn dist(&self, i: usize, j: usize) -> f64 {
        match &self.matrix {
            Some(m) => m[i * self.n + j],
            None => euclid(&self.rows[i * self.dim..(i + 1) * self.dim], &self.rows[j * self.dim..(j + 1) * self.dim]),
        }
    }

    /// Statistic for the split where `in_a[i]` marks the first sample.
    fn statistic(&self, in_a: &[bool], na: usize) -> f64 {
        let nb = self.n - na;
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d = self.dist(i, j);
                match (in_a[i], in_a[j]) {
                    (true, true) => saa += d,
                    (false, false) => sbb += d,
                    _ => sab += d,
                }
            }
        }
        let (na, nb) = (na as f64, nb as f64);
        2.0 * sab / (na * nb) - 2.0 * saa / (na * na) - 2.0 * sbb / (nb * nb)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pooled sizes up to this bound use a cached distance matrix.
const MATRIX_LIMIT: usize = 5000;

/// Energy distance between two samples (rows of length `dim`) and its permutation p-value.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize, permutations: usize, seed: u64) -> Result<EnergyTest> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Shape { expected: dim, got: a.len() % dim.max(1) + b.len() % dim.max(1) });
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < MIN_SAMPLES || nb < MIN_SAMPLES {
        return Err(Error::Statistics(format!("energy distance needs at least {MIN_SAMPLES} samples per side, got {na} and {nb}")));
    }
    if permutations < MIN_PERMUTATIONS {
        return Err(Error::Statistics(format!("at least {MIN_PERMUTATIONS} permutations required, got {permutations}")));
    }
    let rows: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = na + nb;
    let matrix = (n <= MATRIX_LIMIT).then(|| {
        let mut m = vec![0.0; n * n];
        m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = euclid(&rows[i * dim..(i + 1) * dim], &rows[j * dim..(j + 1) * dim]);
            }
        });
        m
    });
    let pooled = Pooled { rows: &rows, dim, n, matrix };
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let observed = pooled.statistic(&labels, na).max(0.0);
    let null: Vec<f64> = (0..permutations)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, &[tag::PERMUTATION, k as u64]);
            let mut l = labels.clone();
            l.shuffle(&mut r);
            pooled.statistic(&l, na)
        })
        .collect();
    let exceed = null.iter().filter(|&&s| s >= observed).count();
    let mean = null.iter().sum::<f64>() / permutations as f64;
    let null_sd = (null.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (permutations - 1) as f64).sqrt();
    Ok(EnergyTest { distance: observed, p_value: (1 + exceed) as f64 / (1 + permutations) as f64, null_sd, permutations })
}
