use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use diffmerge::eval::report::{ALL_FORMATS, JSONL_FILE};
use diffmerge::eval::{dominating_labels, emit_report, eta_sweep, EvalReport, QualitySource, Splits};
use diffmerge::expert::{checkpoint, GaussianMixtureSpec};
use diffmerge::field::ScoreField;
use diffmerge::integrate::{self, Method};
use diffmerge::likelihood::{continuous_nll, dequantized_nll, Bound, NllResult};
use diffmerge::schedule::merged_schedule;
use diffmerge::train::{train_expert, TrainStatus};
use diffmerge::verify::{run_suite, VerifyOptions};
use diffmerge::{Expert, MergedExpert, NoiseSchedule};
use serde_json::json;

use crate::config::{BoundChoice, ModelSection, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::OutDir;

pub const CHECKPOINT_FILE: &str = "checkpoint.dmck";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const SAMPLES_BIN_FILE: &str = "samples.bin";
pub const SAMPLES_CSV_FILE: &str = "samples.csv";
pub const SAMPLE_SUMMARY_FILE: &str = "sample_summary.jsonl";
pub const NLL_SUMMARY_FILE: &str = "nll.jsonl";
pub const DOMINANCE_FILE: &str = "dominance.json";
pub const VERIFY_FILE: &str = "verify.json";

/// Tolerance, in paired standard errors and permutation-null deviations, for weak dominance.
pub const DOMINANCE_K: f64 = 2.0;

fn load_splits(cfg: &RunConfig) -> CliResult<Splits> {
    Ok(match &cfg.dataset.path {
        Some(p) => Splits::load(p)?,
        None => cfg.dataset.toy.generate()?,
    })
}

fn load_expert(path: &std::path::Path) -> CliResult<Expert<f64>> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    Ok(checkpoint::load::<f64>(path)?.expert)
}

struct Model {
    field: Box<dyn ScoreField<f64>>,
    label: String,
    eta: Option<f64>,
}

fn build_model(m: &ModelSection) -> CliResult<Model> {
    let pair = m.quality.is_some() || m.likelihood.is_some();
    let chosen = usize::from(m.checkpoint.is_some()) + usize::from(m.analytic.is_some()) + usize::from(pair);
    if chosen != 1 {
        return Err(CliError::Config(
            "[model] needs exactly one of: checkpoint, analytic, or quality + likelihood + eta".into(),
        ));
    }
    if let Some(a) = &m.analytic {
        let sched = NoiseSchedule::linear(a.gamma_min, a.gamma_max)?;
        let spec = a.mixture.clone().unwrap_or_else(|| GaussianMixtureSpec::standard_normal(a.dim));
        if spec.dim() != a.dim {
            return Err(CliError::Config(format!("analytic mixture has dim {}, expected {}", spec.dim(), a.dim)));
        }
        let e = Expert::analytic_gmm(spec, sched)?;
        return Ok(Model { field: Box::new(e), label: "analytic".into(), eta: None });
    }
    if let Some(p) = &m.checkpoint {
        return Ok(Model { field: Box::new(load_expert(p)?), label: p.display().to_string(), eta: None });
    }
    let (Some(q), Some(l), Some(eta)) = (&m.quality, &m.likelihood, m.eta) else {
        return Err(CliError::Config("a merged model needs quality, likelihood and eta".into()));
    };
    let q = Arc::new(load_expert(q)?);
    let l = Arc::new(load_expert(l)?);
    let target = merged_schedule(&q.native_schedule, &l.native_schedule)?;
    let merged = MergedExpert::new(q, l, target, eta)?;
    Ok(Model { field: Box::new(merged), label: diffmerge::eval::sweep::eta_label(eta), eta: Some(eta) })
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let splits = load_splits(cfg)?;
    let schedule = cfg.train_schedule()?;
    cfg.train.validate()?;
    let out = OutDir::claim(&cfg.out_dir())?;
    out.write_config(cfg)?;
    let start = Instant::now();
    let o = train_expert(&cfg.train, &splits.train, splits.dim, schedule)?;
    checkpoint::save(&out.file(CHECKPOINT_FILE), &o.expert, Some(&o.raw_params))?;
    let mut w = csv::Writer::from_writer(out.create(TRAIN_LOG_FILE)?);
    w.write_record(["step", "loss", "grad_norm"])?;
    for r in &o.log {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.grad_norm.to_string()])?;
    }
    w.flush()?;
    let summary = json!({
        "status": o.status,
        "steps": cfg.train.steps,
        "weighting": cfg.train.weighting,
        "schedule": schedule,
        "optimizer": { "kind": "adam", "beta1": 0.9, "beta2": 0.999, "learning_rate": cfg.train.learning_rate },
        "ema_decay": cfg.train.ema_decay,
        "dim": splits.dim,
        "n_train": splits.train.len() / splits.dim,
        "final_loss": o.log.last().map(|r| r.loss),
    });
    std::fs::write(out.file(TRAIN_SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!("trained {} steps in {:.1}s", cfg.train.steps, start.elapsed().as_secs_f64());
    match o.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { step, reason } => Err(CliError::Failed(format!(
            "training diverged at step {step} ({reason}); last finite parameters written to {}",
            out.file(CHECKPOINT_FILE).display()
        ))),
    }
}

pub fn sample(cfg: &RunConfig) -> CliResult<()> {
    cfg.solver.validate()?;
    let model = build_model(&cfg.model)?;
    let out = OutDir::claim(&cfg.out_dir())?;
    out.write_config(cfg)?;
    let start = Instant::now();
    let batch = integrate::sample(model.field.as_ref(), cfg.sample.n, &cfg.solver)?;
    let wall = start.elapsed().as_secs_f64();

    let mut bin = out.create(SAMPLES_BIN_FILE)?;
    for v in &batch.samples {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;
    let mut w = csv::Writer::from_writer(out.create(SAMPLES_CSV_FILE)?);
    w.write_record((0..batch.dim).map(|j| format!("z{j}")))?;
    for i in 0..batch.len() {
        w.write_record(batch.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    let summary = json!({
        "model": model.label,
        "eta": model.eta,
        "seed": cfg.solver.seed,
        "method": cfg.solver.method,
        "n": batch.len(),
        "dim": batch.dim,
        "nfe_mean": batch.nfe_mean(),
        "nfe_max": batch.nfe_max(),
        "wall_seconds": wall,
    });
    let mut s = out.create(SAMPLE_SUMMARY_FILE)?;
    writeln!(s, "{summary}")?;
    s.flush()?;
    println!("{summary}");
    Ok(())
}

pub fn nll(cfg: &RunConfig) -> CliResult<()> {
    if cfg.solver.method != Method::Rk45 {
        return Err(CliError::Config("likelihood solves need solver.method = \"rk45\"".into()));
    }
    cfg.solver.validate()?;
    cfg.divergence.validate()?;
    cfg.nll.dequantization.validate()?;
    let splits = load_splits(cfg)?;
    let model = build_model(&cfg.model)?;
    if model.field.dim() != splits.dim {
        return Err(CliError::Config(format!("model dim {} does not match data dim {}", model.field.dim(), splits.dim)));
    }
    let out = OutDir::claim(&cfg.out_dir())?;
    out.write_config(cfg)?;
    let mut bounds = Vec::new();
    if matches!(cfg.nll.bound, BoundChoice::Ode | BoundChoice::Both) {
        bounds.push(Bound::Ode { solver: cfg.solver.clone(), div: cfg.divergence.clone() });
    }
    if matches!(cfg.nll.bound, BoundChoice::Vlb | BoundChoice::Both) {
        bounds.push(Bound::Vlb { mc_t: cfg.nll.vlb_mc_t, seed: cfg.solver.seed });
    }
    let d = splits.dim;
    let n = cfg.nll.n_test.map_or(splits.n_test(), |k| k.min(splits.n_test()));
    let mut summary = out.create(NLL_SUMMARY_FILE)?;
    for bound in &bounds {
        let r: NllResult = match (&splits.test_symbols, splits.bit_depth) {
            (Some(s), Some(b)) => dequantized_nll(model.field.as_ref(), &s[..n * d], b, cfg.nll.dequantization, bound)?,
            _ => continuous_nll(model.field.as_ref(), &splits.test[..n * d], bound)?,
        };
        let kind = r.bound_kind.as_str();
        let mut w = csv::Writer::from_writer(out.create(&format!("nll_{kind}.csv"))?);
        w.write_record(["index", "nats", "nats_per_dim", "nfe"])?;
        for (i, p) in r.per_datum.iter().enumerate() {
            w.write_record([
                i.to_string(),
                (p.nats_per_dim * d as f64).to_string(),
                p.nats_per_dim.to_string(),
                p.nfe.to_string(),
            ])?;
        }
        w.flush()?;
        let line = json!({
            "model": model.label,
            "eta": model.eta,
            "bound": kind,
            "n": r.per_datum.len(),
            "nats_per_dim": r.nats_per_dim.mean,
            "nats_per_dim_se": r.nats_per_dim.se,
            "bpd": r.bpd.map(|b| b.mean),
            "bpd_se": r.bpd.map(|b| b.se),
            "nfe": r.nfe,
        });
        writeln!(summary, "{line}")?;
        println!("{line}");
    }
    summary.flush()?;
    Ok(())
}

/// Reports already on disk; a truncated last line from an interrupted run is ignored.
fn completed_reports(path: &std::path::Path) -> CliResult<Vec<EvalReport>> {
    let f = std::fs::File::open(path)?;
    let mut done = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EvalReport>(&line) {
            Ok(r) if r.error.is_none() => done.push(r),
            Ok(_) => {}
            Err(_) => break,
        }
    }
    Ok(done)
}

pub fn sweep(cfg: &RunConfig) -> CliResult<()> {
    let (Some(qp), Some(lp)) = (&cfg.model.quality, &cfg.model.likelihood) else {
        return Err(CliError::Config("sweep needs [model] quality and likelihood checkpoints".into()));
    };
    let splits = load_splits(cfg)?;
    let q = Arc::new(load_expert(qp)?);
    let l = Arc::new(load_expert(lp)?);
    let target = merged_schedule(&q.native_schedule, &l.native_schedule)?;
    let out = OutDir::claim(&cfg.out_dir())?;
    let jsonl = out.file(JSONL_FILE);
    let done = if jsonl.exists() {
        if out.previous_config().as_deref() != Some(cfg.resolved_toml()?.as_str()) {
            return Err(CliError::Config(format!(
                "{} holds a sweep with a different configuration; choose another --out",
                out.path.display()
            )));
        }
        completed_reports(&jsonl)?
    } else {
        Vec::new()
    };
    out.write_config(cfg)?;
    // Completed columns are rewritten first so the file stays a clean prefix.
    let mut log = std::io::BufWriter::new(OpenOptions::new().create(true).write(true).truncate(true).open(&jsonl)?);
    for r in &done {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
    }
    log.flush()?;
    if !done.is_empty() {
        eprintln!("resuming: {} columns already complete", done.len());
    }
    let reports = eta_sweep(q, l, target, &splits, &cfg.sweep, &done, &mut |r| {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
        log.flush()?;
        let nll = r.headline_nll().map_or("-".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.se));
        eprintln!("{:>12}  nll {nll}  {}", r.label, r.error.as_deref().unwrap_or(""));
        Ok(())
    })?;
    drop(log);
    emit_report(&reports, &out.path, &ALL_FORMATS)?;
    let dom = json!({
        "k": DOMINANCE_K,
        "ode": dominating_labels(&reports, QualitySource::Ode, DOMINANCE_K),
        "stochastic": dominating_labels(&reports, QualitySource::Stochastic, DOMINANCE_K),
    });
    std::fs::write(out.file(DOMINANCE_FILE), serde_json::to_string_pretty(&dom)? + "\n")?;
    println!("weakly dominating thresholds: {dom}");
    Ok(())
}

pub fn verify(cfg: &RunConfig) -> CliResult<()> {
    let opts = VerifyOptions { seed: cfg.seed.unwrap_or(0), fault: cfg.verify.fault };
    let start = Instant::now();
    let report = run_suite(&opts, &mut |c| {
        println!("{} {:<28} {} ({:.1}s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail, c.seconds);
    });
    println!("verify: {} checks in {:.1}s", report.checks.len(), start.elapsed().as_secs_f64());
    if cfg.out.is_some() {
        let out = OutDir::claim(&cfg.out_dir())?;
        out.write_config(cfg)?;
        std::fs::write(out.file(VERIFY_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} of {} checks failed", report.failures().len(), report.checks.len())))
    }
}
