use super::*;
use crate::expert::{BoxSpec, Expert, ExpertModel, GaussianMixtureSpec, ParamKind};
use crate::schedule::NoiseSchedule;

fn merged() -> NoiseSchedule<f64> {
    NoiseSchedule::linear(-13.3, 8.764).unwrap()
}

fn points(n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[99]);
    (0..n)
        .map(|_| (0..2).map(|_| scale * rng::normal::<f64, _>(&mut r)).collect())
        .collect()
}

fn exact_solver() -> (SolverConfig, DivergenceConfig) {
    (SolverConfig::default(), DivergenceConfig::exact())
}

fn random_linear(d: usize, seed: u64) -> LinearField<f64> {
    let mut r = rng::stream(seed, &[1]);
    let a = (0..d * d).map(|_| rng::normal(&mut r)).collect();
    let b = (0..d).map(|_| rng::normal(&mut r)).collect();
    LinearField::new(a, b).unwrap()
}

#[test]
fn exact_trace_of_linear_field() {
    let f = random_linear(5, 3);
    let z = [0.1, -0.2, 0.3, 0.0, 1.0];
    let mut r = rng::stream(0, &[]);
    let div = divergence(&f, &z, 0.5, &DivergenceConfig::exact(), &mut r).unwrap();
    assert!((div - f.trace()).abs() < 1e-12);
}

#[test]
fn hutchinson_within_three_standard_errors() {
    let f = random_linear(4, 5);
    let z = [0.0; 4];
    let mut r = rng::stream(1, &[]);
    let terms = hutchinson_terms(&f, &z, 0.5, 10_000, ProbeDist::Rademacher, &mut r).unwrap();
    let m = MeanSe::of(&terms);
    assert!((m.mean - f.trace()).abs() < 3.0 * m.se, "{m:?} vs {}", f.trace());
}

#[test]
fn constant_field_has_zero_divergence() {
    let f = LinearField::new(vec![0.0; 9], vec![1.0, 2.0, 3.0]).unwrap();
    let mut r = rng::stream(1, &[]);
    for cfg in [DivergenceConfig::exact(), DivergenceConfig::hutchinson(7)] {
        assert_eq!(divergence(&f, &[0.5, 0.5, 0.5], 0.1, &cfg, &mut r).unwrap(), 0.0);
    }
}

#[test]
fn unit_gaussian_loglik_matches_closed_form() {
    let e = Expert::unit_gaussian(2, merged());
    let (s, d) = exact_solver();
    for (i, z) in points(30, 1.5, 1).iter().enumerate() {
        let r = ode_loglik(&e, z, &s, &d, i as u64).unwrap();
        assert!((r.log_prob - std_normal_logpdf(z)).abs() / 2.0 < 1e-3);
    }
}

#[test]
fn narrow_gaussian_loglik_matches_closed_form() {
    let spec = GaussianMixtureSpec::gaussian(vec![0.0, 0.0], 0.25).unwrap();
    let e = Expert::analytic_gmm(spec.clone(), merged()).unwrap();
    let (s, d) = exact_solver();
    for (i, z) in points(30, 0.5, 2).iter().enumerate() {
        let r = ode_loglik(&e, z, &s, &d, i as u64).unwrap();
        assert!((r.log_prob - spec.log_density(z)).abs() / 2.0 < 1e-3, "{} vs {}", r.log_prob, spec.log_density(z));
    }
}

#[test]
fn mixture_loglik_matches_closed_form() {
    let spec = GaussianMixtureSpec::new(vec![0.3, 0.7], vec![vec![-1.0, 0.5], vec![1.0, -0.5]], vec![0.1, 0.2]).unwrap();
    let e = Expert::analytic_gmm(spec.clone(), merged()).unwrap();
    let (s, d) = exact_solver();
    // Test points drawn from the mixture itself.
    let mut r = rng::stream(3, &[]);
    let pts: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let k = usize::from(r.random::<f64>() > 0.3);
            (0..2).map(|j| spec.means[k][j] + spec.variances[k].sqrt() * rng::normal::<f64, _>(&mut r)).collect()
        })
        .collect();
    for (i, z) in pts.iter().enumerate() {
        // Off-centre mixtures leave q(z_1) slightly away from N(0, I); scoring the end
        // state under the exact terminal marginal isolates the solver error.
        let r = ode_loglik(&e, z, &s, &d, i as u64).unwrap();
        let lp = spec.log_density_at_gamma(&r.trajectory.z, 8.764) + r.trajectory.logp_delta;
        assert!((lp - spec.log_density(z)).abs() / 2.0 < 5e-3, "{z:?}: {lp} vs {}", spec.log_density(z));
    }
}

#[test]
fn hutchinson_solves_agree_with_exact() {
    let spec = GaussianMixtureSpec::new(vec![0.5, 0.5], vec![vec![-1.0, 0.6], vec![1.0, -0.4]], vec![0.2, 0.3]).unwrap();
    let e = Expert::analytic_gmm(spec, merged()).unwrap();
    let z = [0.3, -0.4];
    let s = SolverConfig::default();
    let exact = ode_loglik(&e, &z, &s, &DivergenceConfig::exact(), 0).unwrap().log_prob;
    let est: Vec<f64> = (0..1000u64)
        .into_par_iter()
        .map(|i| ode_loglik(&e, &z, &s, &DivergenceConfig::hutchinson(1), i).unwrap().log_prob)
        .collect();
    let m = MeanSe::of(&est);
    assert!((m.mean - exact).abs() < 4.0 * m.se, "{m:?} vs {exact}");
}

#[test]
fn loglik_is_deterministic_per_datum() {
    let e = Expert::unit_gaussian(2, merged());
    let s = SolverConfig { seed: 4, ..SolverConfig::default() };
    let d = DivergenceConfig::hutchinson(2);
    let a = ode_loglik(&e, &[0.2, 0.1], &s, &d, 9).unwrap();
    let b = ode_loglik(&e, &[0.2, 0.1], &s, &d, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.trajectory.nfe > 0);
}

#[test]
fn density_integrates_to_one() {
    let spec = GaussianMixtureSpec::new(vec![0.4, 0.6], vec![vec![-0.8, 0.0], vec![0.8, 0.3]], vec![0.15, 0.1]).unwrap();
    let e = Expert::analytic_gmm(spec, merged()).unwrap();
    let (s, d) = exact_solver();
    let (lo, hi, n) = (-2.6, 2.6, 40);
    let h = (hi - lo) / n as f64;
    let cells: Vec<[f64; 2]> = (0..n * n)
        .map(|k| [lo + (k / n) as f64 * h + h / 2.0, lo + (k % n) as f64 * h + h / 2.0])
        .collect();
    let mass: f64 = cells
        .par_iter()
        .map(|z| ode_loglik(&e, z, &s, &d, 0).unwrap().log_prob.exp() * h * h)
        .sum();
    assert!((0.98..=1.02).contains(&mass), "{mass}");
}

#[test]
fn prior_term_vanishes_for_very_noisy_endpoint() {
    let e = Expert::unit_gaussian(2, NoiseSchedule::linear(-13.3, 40.0).unwrap());
    let v = vlb(&e, &[0.5, -1.0], 4, 0, 0).unwrap();
    assert!(v.prior.abs() < 1e-12);
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn diffusion_term_matches_closed_form_for_gaussian_data() {
    let sched = merged();
    let e = Expert::unit_gaussian(2, sched);
    let x = [0.7, -1.2];
    let v = vlb(&e, &x, 20_000, 3, 0).unwrap();
    let (g0, g1) = (-13.3, 8.764);
    let f = |g: f64| sig(g).ln() + sig(-g);
    let xx = x[0] * x[0] + x[1] * x[1];
    let want = 0.5 * (xx * (sig(g1) - sig(g0)) + 2.0 * (f(g1) - f(g0)));
    assert!((v.diffusion.mean - want).abs() < 4.0 * v.diffusion.se, "{:?} vs {want}", v.diffusion);
}

#[test]
fn vlb_is_looser_than_ode_bound() {
    let e = Expert::unit_gaussian(2, merged());
    let data: Vec<f64> = points(100, 1.0, 7).concat();
    let ode = continuous_nll(&e, &data, &Bound::Ode { solver: SolverConfig::default(), div: DivergenceConfig::exact() }).unwrap();
    let v = continuous_nll(&e, &data, &Bound::Vlb { mc_t: 64, seed: 1 }).unwrap();
    let slack = 4.0 * (ode.nats_per_dim.se.powi(2) + v.nats_per_dim.se.powi(2)).sqrt();
    assert!(v.nats_per_dim.mean + slack >= ode.nats_per_dim.mean);
    assert_eq!(v.bound_kind, BoundKind::Vlb);
    assert!(v.bpd.is_none());
}

#[test]
fn bpd_arithmetic() {
    let ln2 = std::f64::consts::LN_2;
    assert!((bpd_convert(3.0 * ln2, 3, 1) - 1.0).abs() < 1e-15);
    assert_eq!(bpd_convert(0.0, 4, 8), 7.0);
    for &(n, d, b) in &[(1.234, 2, 5), (-3.0, 10, 8), (0.0, 1, 1)] {
        assert!((bpd_to_nats(bpd_convert(n, d, b), d, b) - n).abs() < 1e-12);
    }
}

#[test]
fn truncated_normal_density_is_normalized() {
    let q = Dequantization::truncated_normal();
    let mut r = rng::stream(0, &[]);
    let draws: Vec<(f64, f64)> = (0..20_000).map(|_| q.draw(&mut r)).collect();
    assert!(draws.iter().all(|&(u, _)| (0.0..1.0).contains(&u)));
    // E_q[1/q] = 1 (the bin width).
    let m = MeanSe::of(&draws.iter().map(|&(_, lq)| (-lq).exp()).collect::<Vec<_>>());
    assert!((m.mean - 1.0).abs() < 4.0 * m.se);
}

#[test]
fn fair_bits_cost_one_bit_per_dimension() {
    let e = Expert::new(
        ExpertModel::AnalyticBox(BoxSpec::cube(2, -1.0, 1.0).unwrap()),
        merged(),
        ParamKind::Score,
    )
    .unwrap();
    let mut r = rng::stream(5, &[]);
    let data: Vec<u32> = (0..200).map(|_| r.random_range(0..2u32)).collect();
    let res = dequantized_nll(&e, &data, 1, Dequantization::Uniform, &Bound::Ode { solver: SolverConfig::default(), div: DivergenceConfig::exact() }).unwrap();
    let bpd = res.bpd.unwrap();
    assert!((bpd.mean - 1.0).abs() < 0.02, "{bpd:?}");
}

#[test]
fn out_of_range_symbols_are_data_errors() {
    let e = Expert::unit_gaussian(2, merged());
    let b = Bound::Vlb { mc_t: 2, seed: 0 };
    assert!(matches!(dequantized_nll(&e, &[0, 4], 2, Dequantization::Uniform, &b), Err(Error::Data(_))));
    assert!(matches!(dequantized_nll(&e, &[0, 1, 2], 2, Dequantization::Uniform, &b), Err(Error::Shape { .. })));
}
