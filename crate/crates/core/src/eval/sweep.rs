//! The threshold sweep: one evaluation per switching time plus the two base experts.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::dataset::Splits;
use crate::eval::energy::{energy_distance, EnergyTest};
use crate::expert::Expert;
use crate::field::ScoreField;
use crate::integrate::{sample, Method, SolverConfig};
use crate::likelihood::{continuous_nll, dequantized_nll, Bound, Dequantization, DivergenceConfig, NllResult};
use crate::merge::MergedExpert;
use crate::schedule::{switching_bounds, NoiseSchedule, SwitchingBounds};
use crate::stats::MeanSe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Switching times; the default grid is used when absent.
    pub etas: Option<Vec<f64>>,
    pub n_samples: usize,
    /// Upper bound on the number of test points used for likelihoods.
    pub n_test: Option<usize>,
    pub ode: SolverConfig,
    /// Fixed-step stochastic sampler; skipped when absent.
    pub stochastic: Option<SolverConfig>,
    pub divergence: DivergenceConfig,
    pub dequantization: Dequantization,
    /// Time samples per datum for the variational bound; zero skips it.
    pub vlb_mc_t: usize,
    pub permutations: usize,
    pub include_base: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            etas: None,
            n_samples: 1000,
            n_test: None,
            ode: SolverConfig::default(),
            stochastic: Some(SolverConfig { method: Method::Ancestral, ..SolverConfig::default() }),
            divergence: DivergenceConfig::default(),
            dequantization: Dequantization::Uniform,
            vlb_mc_t: 16,
            permutations: 200,
            include_base: true,
            seed: 0,
        }
    }
}

/// `{eta_min, 0.1, ..., 0.8, eta_max}`.
pub fn default_grid(bounds: SwitchingBounds<f64>) -> Vec<f64> {
    let mut g = vec![bounds.eta_min];
    g.extend((1..=8).map(|k| k as f64 / 10.0).filter(|&e| e > bounds.eta_min && e < bounds.eta_max));
    g.push(bounds.eta_max);
    g
}

/// Evaluation of one column of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Switching time; absent for the standalone base experts.
    pub eta: Option<f64>,
    pub nll: Option<NllResult>,
    pub vlb: Option<NllResult>,
    /// Quality of probability-flow ODE samples.
    pub quality: Option<EnergyTest>,
    /// Quality of stochastic-sampler samples.
    pub quality_stochastic: Option<EnergyTest>,
    pub nfe_sampling: Option<f64>,
    pub nfe_sampling_stochastic: Option<f64>,
    pub nfe_nll: Option<f64>,
    pub seeds: Vec<u64>,
    /// Metrics left out, each with its reason.
    pub absent: Vec<String>,
    pub error: Option<String>,
}

pub const QUALITY_LABEL: &str = "quality";
pub const LIKELIHOOD_LABEL: &str = "likelihood";

pub fn eta_label(eta: f64) -> String {
    format!("eta={eta:.4}")
}

impl EvalReport {
    fn empty(label: String, eta: Option<f64>, seed: u64) -> Self {
        Self {
            label,
            eta,
            nll: None,
            vlb: None,
            quality: None,
            quality_stochastic: None,
            nfe_sampling: None,
            nfe_sampling_stochastic: None,
            nfe_nll: None,
            seeds: vec![seed],
            absent: Vec::new(),
            error: None,
        }
    }

    /// The NLL in bits per dimension for quantized data, else nats per dimension.
    pub fn headline_nll(&self) -> Option<MeanSe> {
        self.nll.as_ref().map(|n| n.bpd.unwrap_or(n.nats_per_dim))
    }
}

fn test_slice(splits: &Splits, cfg: &SweepConfig) -> (Vec<f64>, Option<Vec<u32>>) {
    let d = splits.dim;
    let n = cfg.n_test.map_or(splits.n_test(), |k| k.min(splits.n_test()));
    (splits.test[..n * d].to_vec(), splits.test_symbols.as_ref().map(|s| s[..n * d].to_vec()))
}

fn nll_with(field: &dyn ScoreField<f64>, splits: &Splits, cfg: &SweepConfig, bound: &Bound) -> Result<NllResult> {
    let (test, symbols) = test_slice(splits, cfg);
    match (symbols, splits.bit_depth) {
        (Some(s), Some(b)) => dequantized_nll(field, &s, b, cfg.dequantization, bound),
        _ => continuous_nll(field, &test, bound),
    }
}

fn quality_of(field: &dyn ScoreField<f64>, splits: &Splits, cfg: &SweepConfig, solver: &SolverConfig) -> Result<(EnergyTest, f64)> {
    let batch = sample(field, cfg.n_samples, solver)?;
    let e = energy_distance(&batch.samples, &splits.test, splits.dim, cfg.permutations, cfg.seed)?;
    Ok((e, batch.nfe_mean()))
}

/// Evaluates one field on the test split with common random numbers across columns.
pub fn evaluate(field: &dyn ScoreField<f64>, label: String, eta: Option<f64>, splits: &Splits, cfg: &SweepConfig) -> EvalReport {
    let mut r = EvalReport::empty(label, eta, cfg.seed);
    let ode = SolverConfig { seed: cfg.seed, ..cfg.ode.clone() };
    let run = |r: &mut EvalReport| -> Result<()> {
        let nll = nll_with(field, splits, cfg, &Bound::Ode { solver: ode.clone(), div: cfg.divergence.clone() })?;
        r.nfe_nll = Some(nll.nfe);
        r.nll = Some(nll);
        if cfg.vlb_mc_t > 0 {
            r.vlb = Some(nll_with(field, splits, cfg, &Bound::Vlb { mc_t: cfg.vlb_mc_t, seed: cfg.seed })?);
        } else {
            r.absent.push("vlb: disabled (vlb_mc_t = 0)".into());
        }
        if cfg.n_samples > 0 {
            let (q, nfe) = quality_of(field, splits, cfg, &ode)?;
            r.quality = Some(q);
            r.nfe_sampling = Some(nfe);
            match &cfg.stochastic {
                Some(s) => {
                    let (q, nfe) = quality_of(field, splits, cfg, &SolverConfig { seed: cfg.seed, ..s.clone() })?;
                    r.quality_stochastic = Some(q);
                    r.nfe_sampling_stochastic = Some(nfe);
                }
                None => r.absent.push("stochastic sampler: disabled".into()),
            }
        } else {
            r.absent.push("sample quality: n_samples = 0".into());
        }
        Ok(())
    };
    if let Err(e) = run(&mut r) {
        r.error = Some(e.to_string());
    }
    r
}

/// Sweeps the switching time between two experts.
///
/// Reports already present in `done` (matched by label) are reused without recomputation;
/// `on_report` sees each new report as soon as it is finished.
pub fn eta_sweep(
    quality: Arc<Expert<f64>>,
    likelihood: Arc<Expert<f64>>,
    target: NoiseSchedule<f64>,
    splits: &Splits,
    cfg: &SweepConfig,
    done: &[EvalReport],
    on_report: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<Vec<EvalReport>> {
    if quality.dim != splits.dim || likelihood.dim != splits.dim {
        return Err(Error::Shape { expected: splits.dim, got: quality.dim.max(likelihood.dim) });
    }
    let bounds = switching_bounds(quality.gamma_range(), likelihood.gamma_range(), &target)?;
    let etas = cfg.etas.clone().unwrap_or_else(|| default_grid(bounds));
    if let Some(&bad) = etas.iter().find(|&&e| !bounds.contains(e)) {
        return Err(Error::Config(format!(
            "eta = {bad} outside the feasible interval [eta_min = {}, eta_max = {}]",
            bounds.eta_min, bounds.eta_max
        )));
    }
    let mut columns: Vec<(String, Option<f64>)> = Vec::new();
    if cfg.include_base {
        columns.push((QUALITY_LABEL.into(), None));
    }
    columns.extend(etas.iter().map(|&e| (eta_label(e), Some(e))));
    if cfg.include_base {
        columns.push((LIKELIHOOD_LABEL.into(), None));
    }
    let mut out = Vec::with_capacity(columns.len());
    for (label, eta) in columns {
        if let Some(prev) = done.iter().find(|r| r.label == label) {
            out.push(prev.clone());
            continue;
        }
        let report = match eta {
            None if label == QUALITY_LABEL => evaluate(quality.as_ref(), label, None, splits, cfg),
            None => evaluate(likelihood.as_ref(), label, None, splits, cfg),
            Some(e) => match MergedExpert::new(quality.clone(), likelihood.clone(), target.clone(), e) {
                Ok(m) => evaluate(&m, label, Some(e), splits, cfg),
                Err(err) => {
                    let mut r = EvalReport::empty(label, Some(e), cfg.seed);
                    r.error = Some(err.to_string());
                    r
                }
            },
        };
        on_report(&report)?;
        out.push(report);
    }
    Ok(out)
}

/// Which sampler's quality a comparison uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualitySource {
    Ode,
    Stochastic,
}

impl EvalReport {
    pub fn quality_of(&self, src: QualitySource) -> Option<&EnergyTest> {
        match src {
            QualitySource::Ode => self.quality.as_ref(),
            QualitySource::Stochastic => self.quality_stochastic.as_ref(),
        }
    }
}

/// Paired mean difference `a - b` of per-datum NLL with its standard error.
pub fn paired_nll_difference(a: &EvalReport, b: &EvalReport) -> Option<MeanSe> {
    let (na, nb) = (a.nll.as_ref()?, b.nll.as_ref()?);
    if na.per_datum.len() != nb.per_datum.len() || na.per_datum.is_empty() {
        return None;
    }
    let d: Vec<f64> = na.per_datum.iter().zip(&nb.per_datum).map(|(x, y)| x.nats_per_dim - y.nats_per_dim).collect();
    Some(MeanSe::of(&d))
}

/// Whether `r` is no worse than `base` on both NLL and energy distance, up to
/// `k` paired standard errors on NLL and `k` permutation-null deviations on distance.
pub fn weakly_dominates(r: &EvalReport, base: &EvalReport, src: QualitySource, k: f64) -> Option<bool> {
    let dn = paired_nll_difference(r, base)?;
    let (qr, qb) = (r.quality_of(src)?, base.quality_of(src)?);
    let ed_tol = k * qr.null_sd.max(qb.null_sd);
    Some(dn.mean <= k * dn.se && qr.distance - qb.distance <= ed_tol)
}

/// Labels of the switched columns that weakly dominate both base experts.
pub fn dominating_labels(reports: &[EvalReport], src: QualitySource, k: f64) -> Vec<String> {
    let q = reports.iter().find(|r| r.label == QUALITY_LABEL);
    let l = reports.iter().find(|r| r.label == LIKELIHOOD_LABEL);
    let (Some(q), Some(l)) = (q, l) else { return Vec::new() };
    reports
        .iter()
        .filter(|r| r.eta.is_some())
        .filter(|r| weakly_dominates(r, q, src, k) == Some(true) && weakly_dominates(r, l, src, k) == Some(true))
        .map(|r| r.label.clone())
        .collect()
}
