//! Denoising score matching for the network experts, with Adam and EMA tracking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{Expert, ParamKind, ScoreNet};
use crate::field::ScoreField;
use crate::rng::{self, tag, StreamRng};
use crate::schedule::{alpha_sigma_from_gamma, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Continuous-time ELBO weight, `dgamma/dt / 2` in noise-prediction form.
    Elbo,
    /// Unit weight in noise-prediction form with `t ~ Beta(2, 1)`.
    SimpleHighNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    Uniform,
    /// One draw per equal-width bin of the batch.
    Stratified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weighting: Weighting,
    pub time_sampling: TimeSampling,
    pub ema_decay: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub param_kind: ParamKind,
    /// Steps between run-log rows.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            learning_rate: 2e-3,
            lr_schedule: LrSchedule::Cosine,
            weighting: Weighting::Elbo,
            time_sampling: TimeSampling::Stratified,
            ema_decay: 0.999,
            seed: 0,
            hidden: vec![128, 128, 128],
            param_kind: ParamKind::Noise,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// Time and weight of sample `i` of a batch of `n`.
fn draw_time(weighting: Weighting, sampling: TimeSampling, i: usize, n: usize, r: &mut StreamRng) -> f64 {
    let u: f64 = rng::uniform(r);
    let v = match sampling {
        TimeSampling::Uniform => u,
        TimeSampling::Stratified => (i as f64 + u) / n as f64,
    };
    match weighting {
        Weighting::Elbo => v,
        // Inverse CDF of Beta(2, 1): density 2t.
        Weighting::SimpleHighNoise => v.sqrt(),
    }
}

fn loss_weight(weighting: Weighting, schedule: &NoiseSchedule<f64>, t: f64) -> Result<f64> {
    Ok(match weighting {
        Weighting::Elbo => 0.5 * schedule.gamma_derivative(t)?,
        Weighting::SimpleHighNoise => 1.0,
    })
}

/// Draws for one training example.
struct Draw {
    t: f64,
    x_index: usize,
    eps: Vec<f64>,
}

fn draw(cfg: (Weighting, TimeSampling), seed: u64, step: u64, i: usize, n: usize, n_data: usize, dim: usize) -> Draw {
    let mut r = rng::stream(seed, &[tag::TRAIN, step, i as u64]);
    let t = draw_time(cfg.0, cfg.1, i, n, &mut r);
    let x_index = (rng::uniform::<f64, _>(&mut r) * n_data as f64) as usize % n_data;
    let mut eps = vec![0.0; dim];
    rng::fill_normal(&mut r, &mut eps);
    Draw { t, x_index, eps }
}

/// Loss value and parameter gradient of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_data(data: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::Data(format!("training data of length {} is not a nonempty multiple of dimension {dim}", data.len())));
    }
    Ok(data.len() / dim)
}

const CHUNK: usize = 32;

/// Denoising score-matching loss of a network and its parameter gradient.
///
/// Each example draws `t`, a data index and `eps` from the stream `(seed, TRAIN, step, i)`,
/// forms `z_t = alpha_t x + sigma_t eps` and penalizes `w(t) |eps_hat - eps|^2`, with
/// `eps_hat` the network's noise prediction. The result is the batch mean.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss(
    net: &ScoreNet<f64>,
    param_kind: ParamKind,
    schedule: &NoiseSchedule<f64>,
    data: &[f64],
    batch_size: usize,
    weighting: Weighting,
    sampling: TimeSampling,
    seed: u64,
    step: u64,
) -> Result<LossGrad> {
    let d = net.dim();
    let n_data = check_data(data, d)?;
    if batch_size == 0 {
        return Err(Error::Config("batch must be nonempty".into()));
    }
    let (g0, g1) = schedule.range();
    let inv_b = 1.0 / batch_size as f64;
    let chunks: Vec<Result<(f64, Vec<f64>)>> = (0..batch_size.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = vec![0.0; net.n_params()];
            let mut loss = 0.0;
            let (mut z, mut raw, mut gout, mut gz) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            for i in c * CHUNK..((c + 1) * CHUNK).min(batch_size) {
                let dr = draw((weighting, sampling), seed, step, i, batch_size, n_data, d);
                let gamma = schedule.gamma(dr.t)?;
                let (a, s) = alpha_sigma_from_gamma(gamma);
                let x = &data[dr.x_index * d..(dr.x_index + 1) * d];
                for k in 0..d {
                    z[k] = a * x[k] + s * dr.eps[k];
                }
                let tape = net.forward_taped(&z, (gamma - g0) / (g1 - g0), &mut raw)?;
                let (ca, cb) = param_kind.noise_affine(a, s);
                let w = loss_weight(weighting, schedule, dr.t)?;
                let mut li = 0.0;
                for k in 0..d {
                    let r = ca * raw[k] + cb * z[k] - dr.eps[k];
                    li += r * r;
                    gout[k] = 2.0 * w * r * ca * inv_b;
                }
                let li = w * li;
                if !li.is_finite() {
                    return Err(Error::Training(format!("non-finite loss at t = {} (gamma = {gamma})", dr.t)));
                }
                loss += li;
                net.backward(&tape, &gout, Some(&mut grad), &mut gz);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = LossGrad { loss: 0.0, grad: vec![0.0; net.n_params()] };
    let mut bad = Vec::new();
    for c in chunks {
        match c {
            Ok((l, g)) => {
                total.loss += l;
                total.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            Err(Error::Training(m)) => bad.push(m),
            Err(e) => return Err(e),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Training(bad.join("; ")));
    }
    total.loss *= inv_b;
    Ok(total)
}

/// Loss value of an arbitrary score field under the same objective, written in
/// noise-prediction form `eps_hat = -sigma_t s(z_t, t)`.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss_value(
    field: &dyn ScoreField<f64>,
    data: &[f64],
    batch_size: usize,
    weighting: Weighting,
    sampling: TimeSampling,
    seed: u64,
    step: u64,
) -> Result<f64> {
    let d = field.dim();
    let n_data = check_data(data, d)?;
    let schedule = field.schedule();
    let parts: Vec<Result<f64>> = (0..batch_size)
        .into_par_iter()
        .map(|i| {
            let dr = draw((weighting, sampling), seed, step, i, batch_size, n_data, d);
            let (a, s) = schedule.alpha_sigma(dr.t)?;
            let x = &data[dr.x_index * d..(dr.x_index + 1) * d];
            let z: Vec<f64> = (0..d).map(|k| a * x[k] + s * dr.eps[k]).collect();
            let mut sc = vec![0.0; d];
            field.score(&z, dr.t, &mut sc)?;
            let r: f64 = (0..d).map(|k| (-s * sc[k] - dr.eps[k]).powi(2)).sum();
            Ok(loss_weight(weighting, schedule, dr.t)? * r)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / batch_size as f64)
}

/// `ema <- decay * ema + (1 - decay) * theta`.
pub fn ema_update(ema: &mut [f64], theta: &[f64], decay: f64) {
    for (e, &t) in ema.iter_mut().zip(theta) {
        *e = decay * *e + (1.0 - decay) * t;
    }
}

/// Adam with `beta = (0.9, 0.999)`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum TrainStatus {
    Completed,
    /// Stopped early; the returned parameters are the last finite ones.
    Diverged { step: usize, reason: String },
}

pub struct TrainOutcome {
    /// Expert carrying the EMA parameters.
    pub expert: Expert<f64>,
    pub raw_params: Vec<f64>,
    pub log: Vec<LogRow>,
    pub status: TrainStatus,
}

/// Loss above which training is considered divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Trains a network expert on `data` (rows of length `dim`) under `schedule`.
pub fn train_expert(cfg: &TrainConfig, data: &[f64], dim: usize, schedule: NoiseSchedule<f64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data, dim)?;
    let schedule = schedule.validated()?;
    let mut net = ScoreNet::init(dim, &cfg.hidden, cfg.seed)?;
    let mut ema = net.params().to_vec();
    let mut good = (net.params().to_vec(), ema.clone());
    let mut opt = Adam::new(net.n_params(), cfg.learning_rate);
    let mut log = Vec::new();
    let mut status = TrainStatus::Completed;
    for step in 0..cfg.steps {
        let lg = match dsm_loss(&net, cfg.param_kind, &schedule, data, cfg.batch_size, cfg.weighting, cfg.time_sampling, cfg.seed, step as u64) {
            Ok(lg) if lg.loss > DIVERGENCE_LOSS => {
                status = TrainStatus::Diverged { step, reason: format!("loss {} exceeds {DIVERGENCE_LOSS}", lg.loss) };
                break;
            }
            Ok(lg) => lg,
            Err(Error::Training(reason)) => {
                status = TrainStatus::Diverged { step, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = lg.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(LogRow { step, loss: lg.loss, grad_norm });
        }
        opt.lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::Cosine => {
                0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
            }
        };
        opt.step(net.params_mut(), &lg.grad);
        ema_update(&mut ema, net.params(), cfg.ema_decay);
        if net.params().iter().any(|p| !p.is_finite()) {
            status = TrainStatus::Diverged { step, reason: "non-finite parameters after update".into() };
            break;
        }
        good.0.copy_from_slice(net.params());
        good.1.copy_from_slice(&ema);
    }
    let raw_params = good.0;
    let ema_net = ScoreNet::from_params(dim, &cfg.hidden, good.1)?;
    let expert = Expert::net(ema_net, schedule, cfg.param_kind)?;
    Ok(TrainOutcome { expert, raw_params, log, status })
}

#[cfg(test)]
mod tests;
