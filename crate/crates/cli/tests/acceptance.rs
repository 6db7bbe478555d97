//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p diffmerge-cli --test acceptance`.

use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use diffmerge::eval::sweep::{dominating_labels, eta_sweep, EvalReport, QualitySource, SweepConfig};
use diffmerge::eval::ToyDataset;
use diffmerge::expert::{BoxSpec, GaussianMixtureSpec};
use diffmerge::integrate::{Method, SolverConfig};
use diffmerge::likelihood::{
    bpd_convert, bpd_to_nats, dequantized_nll, divergence, hutchinson_terms, ode_loglik, Bound, Dequantization,
    DivergenceConfig, LinearField, ProbeDist,
};
use diffmerge::merge::adapt_score;
use diffmerge::schedule::switching_bounds;
use diffmerge::stats::{paired_t_greater, spearman, MeanSe};
use diffmerge::train::{train_expert, TrainConfig, Weighting};
use diffmerge::verify::{self, LIKELIHOOD_RANGE, QUALITY_RANGE};
use diffmerge::{rng, Expert, ExpertModel, NoiseSchedule, ParamKind, Result};

const SEED: u64 = 20_240_601;
const MERGED: (f64, f64) = (-13.3, 8.764);

type Outcome = Result<(bool, String)>;

fn merged() -> NoiseSchedule<f64> {
    NoiseSchedule::linear(MERGED.0, MERGED.1).unwrap()
}

/// Linear negative log-SNR written out by hand.
fn gamma_linear(t: f64) -> f64 {
    MERGED.0 + (MERGED.1 - MERGED.0) * t
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_pair(r: &mut rng::StreamRng, sd: f64) -> [f64; 2] {
    [sd * rng::normal::<f64, _>(r), sd * rng::normal::<f64, _>(r)]
}

fn switching_constants() -> Outcome {
    let b = switching_bounds(QUALITY_RANGE, LIKELIHOOD_RANGE, &merged())?;
    // On a linear schedule the bounds are where gamma reaches the inner endpoints.
    let span = MERGED.1 - MERGED.0;
    let oracle = ((QUALITY_RANGE.0 - MERGED.0) / span, (LIKELIHOOD_RANGE.1 - MERGED.0) / span);
    let ok = (b.eta_min - 0.0394).abs() < 5e-4
        && (b.eta_max - 0.8294).abs() < 5e-4
        && (b.eta_min - oracle.0).abs() < 1e-12
        && (b.eta_max - oracle.1).abs() < 1e-12;
    Ok((ok, format!("eta_min {:.5}, eta_max {:.5}", b.eta_min, b.eta_max)))
}

fn gaussian_oracle() -> Outcome {
    let s = merged();
    let solver = SolverConfig { atol: 1e-5, rtol: 1e-5, ..SolverConfig::default() };
    let div = DivergenceConfig::exact();
    let mut r = rng::stream(SEED, &[2]);
    let mut worst = [0.0f64; 2];
    for (k, var) in [1.0f64, 0.25].into_iter().enumerate() {
        let e = Expert::analytic_gmm(GaussianMixtureSpec::gaussian(vec![0.0, 0.0], var)?, s)?;
        for i in 0..100 {
            let z = normal_pair(&mut r, var.sqrt());
            let want = -0.5 * (z[0] * z[0] + z[1] * z[1]) / var - (2.0 * std::f64::consts::PI * var).ln();
            let got = ode_loglik(&e, &z, &solver, &div, i)?.log_prob;
            worst[k] = worst[k].max((got - want).abs() / 2.0);
        }
    }
    let ok = worst.iter().all(|&w| w < 1e-3);
    Ok((ok, format!("max error nats/dim: N(0,I) {:.1e}, N(0,0.25I) {:.1e}", worst[0], worst[1])))
}

fn adaptation() -> Outcome {
    let s = merged();
    let (m, v) = ([0.3, -0.6], 0.2);
    let spec = GaussianMixtureSpec::gaussian(m.to_vec(), v)?;
    let b = switching_bounds(QUALITY_RANGE, LIKELIHOOD_RANGE, &s)?;
    let experts = [
        (Expert::analytic_gmm(spec.clone(), NoiseSchedule::linear(LIKELIHOOD_RANGE.0, LIKELIHOOD_RANGE.1)?)?, 0.0, b.eta_max),
        (Expert::analytic_gmm(spec, NoiseSchedule::linear(QUALITY_RANGE.0, QUALITY_RANGE.1)?)?, b.eta_min, 1.0),
    ];
    let mut r = rng::stream(SEED, &[3]);
    let mut out = [0.0; 2];
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (e, lo, hi) = &experts[i % 2];
        let t = lo + (hi - lo) * rng::uniform::<f64, _>(&mut r);
        let z = normal_pair(&mut r, 1.0);
        adapt_score(e, &s, &z, t, &mut out)?;
        // VP marginal of N(m, v I): N(alpha m, (alpha^2 v + sigma^2) I).
        let g = gamma_linear(t);
        let (a2, s2) = (sigmoid(-g), sigmoid(g));
        for k in 0..2 {
            let want = -(z[k] - a2.sqrt() * m[k]) / (a2 * v + s2);
            worst = worst.max((out[k] - want).abs() / want.abs().max(1.0));
        }
    }
    let scaled = verify::check_adaptation(&s, SEED);
    let ok = worst < 1e-10 && scaled.passed;
    Ok((ok, format!("VP closed form {worst:.1e}; {}", scaled.detail)))
}

fn divergence_estimators() -> Outcome {
    let d = 5;
    let mut r = rng::stream(SEED, &[4]);
    let a: Vec<f64> = (0..d * d).map(|_| rng::normal(&mut r)).collect();
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let field = LinearField::new(a, vec![0.0; d])?;
    let z = vec![0.1; d];
    let exact_err = (divergence(&field, &z, 0.5, &DivergenceConfig::exact(), &mut r)? - trace).abs();
    let terms = hutchinson_terms(&field, &z, 0.5, 10_000, ProbeDist::Rademacher, &mut r)?;
    let m = MeanSe::of(&terms);
    let zscore = (m.mean - trace).abs() / m.se;
    let rate = verify::check_divergence(SEED);
    let ok = exact_err < 1e-12 && zscore < 3.0 && rate.passed;
    Ok((ok, format!("exact error {exact_err:.1e}, 1e4-probe |z| {zscore:.2}; {}", rate.detail)))
}

fn bound_ordering() -> Outcome {
    let c = verify::check_bound_ordering(&merged(), SEED);
    Ok((c.passed, c.detail))
}

fn trajectory_prefix() -> Outcome {
    let c = verify::check_trajectory_prefix(&merged(), SEED);
    Ok((c.passed, c.detail))
}

const TRADEOFF_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn tradeoff_seed(seed: u64) -> Result<Vec<EvalReport>> {
    let splits = ToyDataset { seed, n_train: 20_000, n_test: 400, ..ToyDataset::default() }.generate()?;
    let base = TrainConfig {
        steps: 10_000,
        batch_size: 128,
        hidden: vec![32; 3],
        ema_decay: 0.995,
        seed,
        ..TrainConfig::default()
    };
    let lik = NoiseSchedule::linear(LIKELIHOOD_RANGE.0, LIKELIHOOD_RANGE.1)?;
    let qual = NoiseSchedule::linear(QUALITY_RANGE.0, QUALITY_RANGE.1)?;
    let l = train_expert(&TrainConfig { weighting: Weighting::Elbo, ..base.clone() }, &splits.train, 2, lik)?;
    let q = train_expert(
        &TrainConfig { weighting: Weighting::SimpleHighNoise, seed: seed + 1000, ..base },
        &splits.train,
        2,
        qual,
    )?;
    let cfg = SweepConfig {
        n_samples: 1000,
        stochastic: Some(SolverConfig { method: Method::Ancestral, fixed_steps: 256, ..SolverConfig::default() }),
        divergence: DivergenceConfig::exact(),
        vlb_mc_t: 0,
        seed,
        ..SweepConfig::default()
    };
    eta_sweep(Arc::new(q.expert), Arc::new(l.expert), merged(), &splits, &cfg, &[], &mut |_| Ok(()))
}

fn tradeoff() -> Outcome {
    let mut nll_by_eta: Vec<Vec<f64>> = Vec::new();
    let mut etas = Vec::new();
    let (mut ed_lo, mut ed_hi, mut ode_lo, mut ode_hi) = (vec![], vec![], vec![], vec![]);
    let mut dominated = 0;
    for &seed in &TRADEOFF_SEEDS {
        let reports = tradeoff_seed(seed)?;
        if let Some(r) = reports.iter().find(|r| r.error.is_some()) {
            return Ok((false, format!("seed {seed}: {} failed: {:?}", r.label, r.error)));
        }
        let grid: Vec<&EvalReport> = reports.iter().filter(|r| r.eta.is_some()).collect();
        if etas.is_empty() {
            etas = grid.iter().map(|r| r.eta.unwrap()).collect();
            nll_by_eta = vec![Vec::new(); etas.len()];
        }
        for (i, r) in grid.iter().enumerate() {
            nll_by_eta[i].push(r.headline_nll().unwrap().mean);
        }
        let (first, last) = (grid[0], grid[grid.len() - 1]);
        ed_lo.push(first.quality_stochastic.unwrap().distance);
        ed_hi.push(last.quality_stochastic.unwrap().distance);
        ode_lo.push(first.quality.unwrap().distance);
        ode_hi.push(last.quality.unwrap().distance);
        if !dominating_labels(&reports, QualitySource::Stochastic, 2.0).is_empty() {
            dominated += 1;
        }
    }
    let mean_nll: Vec<f64> = nll_by_eta.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let rho = spearman(&etas, &mean_nll)?;
    let p_ed = paired_t_greater(&ed_hi, &ed_lo)?;
    let p_ode = paired_t_greater(&ode_hi, &ode_lo)?;
    let ok = rho.p_negative < 0.05 && p_ed < 0.05 && dominated >= 4;
    Ok((
        ok,
        format!(
            "(a) spearman rho {:.2} p {:.3}; (b) ancestral ED p {p_ed:.3} (ode p {p_ode:.3}); (c) dominating eta in {dominated}/5 seeds",
            rho.rho, rho.p_negative
        ),
    ))
}

fn dequantization() -> Outcome {
    let e = Expert::new(ExpertModel::AnalyticBox(BoxSpec::cube(2, -1.0, 1.0)?), merged(), ParamKind::Score)?;
    let mut r = rng::stream(SEED, &[8]);
    let data: Vec<u32> = (0..400).map(|_| u32::from(rng::uniform::<f64, _>(&mut r) < 0.5)).collect();
    let bound = Bound::Ode { solver: SolverConfig::default(), div: DivergenceConfig::exact() };
    let bpd = dequantized_nll(&e, &data, 1, Dequantization::Uniform, &bound)?.bpd.unwrap();
    let mut worst = 0.0f64;
    for (nats, dim, bits) in [(1.3862943611198906, 2, 1), (12.5, 3, 8), (0.0, 1, 5), (-3.25, 784, 16)] {
        let back = bpd_to_nats(bpd_convert(nats, dim, bits), dim, bits);
        // Rounding is relative to the larger of the two summands in the bpd value.
        let scale = f64::max(nats.abs(), (bits - 1) as f64 * dim as f64 * std::f64::consts::LN_2).max(1.0);
        worst = worst.max((back - nats).abs() / scale);
    }
    let one_bit = bpd_convert(2.0 * std::f64::consts::LN_2, 2, 1);
    let ok = (bpd.mean - 1.0).abs() <= 0.02 && worst <= 4.0 * f64::EPSILON && one_bit == 1.0;
    Ok((ok, format!("fair bits {:.4} ± {:.4} bpd; round-trip relative error {worst:.1e}", bpd.mean, bpd.se)))
}

fn verify_command() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_diffmerge");
    let t0 = Instant::now();
    let ok_run = Command::new(bin).arg("verify").output()?;
    let secs = t0.elapsed().as_secs_f64();
    let fault = Command::new(bin).args(["verify", "--inject-fault", "flip-gamma-sign"]).output()?;
    let passes = String::from_utf8_lossy(&ok_run.stdout).lines().filter(|l| l.starts_with("PASS")).count();
    let ok = ok_run.status.success() && passes == 7 && secs < 300.0 && fault.status.code() == Some(1);
    Ok((ok, format!("{passes}/7 checks pass in {secs:.1}s; fault run exits {:?}", fault.status.code())))
}

fn main() -> ExitCode {
    // libtest flags such as `--quiet` are accepted and ignored.
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("switching-time constants", switching_constants),
        ("gaussian likelihood oracle", gaussian_oracle),
        ("score adaptation identity", adaptation),
        ("divergence estimators", divergence_estimators),
        ("bound ordering", bound_ordering),
        ("trajectory prefix", trajectory_prefix),
        ("trade-off reproduction", tradeoff),
        ("dequantization calibration", dequantization),
        ("verify command", verify_command),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!("{} {}. {name}: {detail} ({:.1}s)", if ok { "PASS" } else { "FAIL" }, i + 1, t0.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
