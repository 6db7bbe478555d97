use super::*;
use crate::expert::Expert;

fn sched() -> NoiseSchedule<f64> {
    NoiseSchedule::linear(-13.3, 5.0).unwrap()
}

fn gaussian_data(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[tag::DATASET]);
    (0..n * dim).map(|_| rng::normal(&mut r)).collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { steps: 300, batch_size: 64, hidden: vec![16, 16], log_every: 10, ..TrainConfig::default() }
}

#[test]
fn gradient_matches_finite_differences() {
    let data = gaussian_data(50, 2, 1);
    for kind in [ParamKind::Noise, ParamKind::Score, ParamKind::Data, ParamKind::Velocity] {
        for weighting in [Weighting::Elbo, Weighting::SimpleHighNoise] {
            let mut net = ScoreNet::init(2, &[8, 8], 3).unwrap();
            let f = |n: &ScoreNet<f64>| {
                dsm_loss(n, kind, &sched(), &data, 16, weighting, TimeSampling::Stratified, 5, 2).unwrap()
            };
            let lg = f(&net);
            let mut r = rng::stream(9, &[]);
            for _ in 0..20 {
                let j = (rng::uniform::<f64, _>(&mut r) * net.n_params() as f64) as usize;
                let h = 1e-6 * (1.0 + net.params()[j].abs());
                net.params_mut()[j] += h;
                let lp = f(&net).loss;
                net.params_mut()[j] -= 2.0 * h;
                let lm = f(&net).loss;
                net.params_mut()[j] += h;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - lg.grad[j]).abs() / (fd.abs() + lg.grad[j].abs()).max(1e-8);
                assert!(err < 1e-4 || (fd - lg.grad[j]).abs() < 1e-9, "{kind:?} {weighting:?} param {j}: {fd} vs {}", lg.grad[j]);
            }
        }
    }
}

#[test]
fn ema_recursion_is_exact() {
    let mut ema = vec![1.0, -2.0];
    ema_update(&mut ema, &[3.0, 4.0], 0.75);
    assert_eq!(ema, vec![0.75 * 1.0 + 0.25 * 3.0, 0.75 * -2.0 + 0.25 * 4.0]);
    ema_update(&mut ema, &[5.0, 6.0], 0.0);
    assert_eq!(ema, vec![5.0, 6.0]);
}

#[test]
fn exact_score_reaches_the_variance_floor() {
    // Unit-Gaussian data with the exact score -z: E|eps_hat - eps|^2 = d alpha_t^2.
    let s = sched();
    let e = Expert::unit_gaussian(2, s);
    let data = gaussian_data(10_000, 2, 2);
    let sp = |x: f64| x.exp().ln_1p();
    let elbo = dsm_loss_value(&e, &data, 100_000, Weighting::Elbo, TimeSampling::Stratified, 1, 0).unwrap();
    let floor = 0.5 * 2.0 * (sp(13.3) - sp(-5.0));
    assert!((elbo - floor).abs() < 0.01 * floor, "{elbo} vs {floor}");
    // Beta(2, 1) times: floor is E_t[2 d alpha_t^2 t] by quadrature.
    let n = 200_000;
    let quad: f64 = (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) / n as f64;
            let g = s.gamma(t).unwrap();
            2.0 * t * 2.0 / (1.0 + g.exp())
        })
        .sum::<f64>()
        / n as f64;
    let simple = dsm_loss_value(&e, &data, 100_000, Weighting::SimpleHighNoise, TimeSampling::Stratified, 1, 0).unwrap();
    assert!((simple - quad).abs() < 0.02 * quad, "{simple} vs {quad}");
}

#[test]
fn training_is_deterministic_and_loss_falls() {
    let data = gaussian_data(500, 2, 3);
    let a = train_expert(&small_cfg(), &data, 2, sched()).unwrap();
    let b = train_expert(&small_cfg(), &data, 2, sched()).unwrap();
    assert_eq!(a.raw_params, b.raw_params);
    assert_eq!(a.status, TrainStatus::Completed);
    let losses: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
    let k = (losses.len() / 10).max(1);
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&losses[losses.len() - k..]) < median(&losses[..k]));
}

#[test]
fn divergence_returns_last_good_parameters() {
    let data = gaussian_data(100, 2, 4);
    let cfg = TrainConfig { learning_rate: 1e6, steps: 200, ..small_cfg() };
    let out = train_expert(&cfg, &data, 2, sched()).unwrap();
    assert!(matches!(out.status, TrainStatus::Diverged { .. }));
    assert!(out.raw_params.iter().all(|p| p.is_finite()));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = gaussian_data(10, 2, 4);
    for cfg in [
        TrainConfig { ema_decay: 1.0, ..small_cfg() },
        TrainConfig { learning_rate: 0.0, ..small_cfg() },
        TrainConfig { hidden: vec![], ..small_cfg() },
    ] {
        assert!(matches!(train_expert(&cfg, &data, 2, sched()), Err(Error::Config(_))));
    }
    assert!(matches!(train_expert(&small_cfg(), &data[..3], 2, sched()), Err(Error::Data(_))));
}
