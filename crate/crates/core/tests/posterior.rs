use gpabc_core::gp::{fit, Hyper, Prediction, TrainingSet};
use gpabc_core::oracle::{gaussian_threshold_mc, pa_mc, random_instance};
use gpabc_core::posterior::{
    acceptance_prob, ccd_design, delta_log_var, gaussian_threshold_moments, grad_log_unnorm_post, pa_moments,
    log_unnorm_post, mc_design, pa_pdf, post_cdf, post_quantile, CcdOptions, Ensemble, Member,
};
use gpabc_core::samplers::McmcConfig;
use gpabc_core::{Bounds, HyperPrior, Prior};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pred(mean: f64, var: f64) -> Prediction {
    Prediction { mean, var }
}

proptest! {
    #[test]
    fn pa_variance_nonnegative(m in -5.0f64..5.0, v2 in 0.0f64..10.0, sn in 0.01f64..3.0, eps in -5.0f64..5.0) {
        let mo = pa_moments(pred(m, v2), sn * sn, eps, 1.0);
        prop_assert!(mo.var >= 0.0);
        prop_assert!(mo.mean >= 0.0 && mo.mean <= 1.0);
        prop_assert!(mo.var <= mo.mean * (1.0 - mo.mean) + 1e-15);
    }

    #[test]
    fn cdf_is_monotone(m in -3.0f64..3.0, v2 in 0.01f64..4.0, sn in 0.05f64..2.0, z1 in 0.0f64..1.0, z2 in 0.0f64..1.0) {
        let (lo, hi) = if z1 < z2 { (z1, z2) } else { (z2, z1) };
        let pr = pred(m, v2);
        prop_assert!(post_cdf(pr, sn * sn, 0.0, 1.0, lo) <= post_cdf(pr, sn * sn, 0.0, 1.0, hi) + 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf(m in -3.0f64..3.0, v2 in 0.01f64..4.0, sn in 0.05f64..2.0, alpha in 0.01f64..0.99, pi in 0.1f64..3.0) {
        let pr = pred(m, v2);
        let q = post_quantile(pr, sn * sn, 0.0, pi, alpha).unwrap();
        prop_assume!(q > 1e-12 * pi && q < (1.0 - 1e-9) * pi);
        prop_assert!((post_cdf(pr, sn * sn, 0.0, pi, q) - alpha).abs() < 1e-9);
    }

    #[test]
    fn ensemble_variance_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(1, 6, &mut rng);
        let k = rng.random_range(1..6);
        let members: Vec<Member> = (0..k)
            .map(|_| {
                let mut h = inst.gp.hyper().clone();
                h.lengthscales[0] *= rng.random_range(0.5..2.0);
                h.signal_var *= rng.random_range(0.5..2.0);
                Member { weight: rng.random_range(0.01..1.0), gp: fit(&inst.gp.training_set(), &h).unwrap() }
            })
            .collect();
        let ens = Ensemble::from_unnormalised(members).unwrap();
        let x = [rng.random_range(-2.0..2.0)];
        prop_assert!(ens.moments(&x, inst.eps, &inst.prior).var >= 0.0);
    }
}

#[test]
fn pa_moments_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (m, v2, sn, eps, pi) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(0.01..2.0),
            rng.random_range(0.1..1.5),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.1..2.0),
        );
        let mo = pa_moments(pred(m, v2), sn * sn, eps, pi);
        let mc = pa_mc(m, v2, sn * sn, eps, pi, 200_000, &mut rng);
        assert!((mo.mean - mc.mean).abs() <= 4.0 * mc.se_mean, "{mo:?} {mc:?}");
        assert!((mo.var - mc.var).abs() <= 4.0 * mc.se_var, "{mo:?} {mc:?}");
    }
}

#[test]
fn pdf_integrates_to_one() {
    // substitute z = Φ(q) so the endpoint singularities become Gaussian tails
    for &(m, v2, sn2, eps) in &[(0.0, 1.0, 0.5, 0.0), (1.0, 0.2, 0.1, 0.5), (-1.0, 1.5, 1.0, -1.5), (0.0, 1.0, 1.0, 0.3)] {
        let mass = gpabc_core::quadrature::adaptive_gauss_kronrod(
            |q| pa_pdf(pred(m, v2), sn2, eps, gpabc_core::special::norm_cdf(q)) * gpabc_core::special::norm_pdf(q),
            -37.0,
            8.0,
            1e-12,
        );
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }
}

#[test]
fn acceptance_prob_is_half_at_threshold() {
    assert_eq!(acceptance_prob(pred(1.25, 0.7), 0.3, 1.25), 0.5);
}

#[test]
fn delta_method_agrees_for_small_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let sn: f64 = rng.random_range(0.1..2.0);
        let v = rng.random_range(0.001..0.1) * sn;
        let m = rng.random_range(-2.0..2.0);
        let eps = m + sn * rng.random_range(-3.0..3.0);
        let pi = rng.random_range(0.1..3.0);
        let exact = -pa_moments(pred(m, v * v), sn * sn, eps, pi).var.ln();
        let approx = delta_log_var(pred(m, v * v), sn * sn, eps, pi) + (2.0 * std::f64::consts::PI * sn * sn).ln();
        assert!((exact - approx).abs() <= 0.15 * exact.abs().max(1.0), "{exact} vs {approx}");
    }
    assert_eq!(delta_log_var(pred(0.0, 0.0), 1.0, 0.0, 1.0), f64::INFINITY);
    assert!(delta_log_var(pred(0.0, 0.1), 1.0, 1.0, 1.0) < delta_log_var(pred(0.0, 0.1), 1.0, 2.0, 1.0));
}

#[test]
fn gaussian_threshold_zero_variance() {
    for &(m, sn2, me, ve) in &[(0.5, 0.1, 0.0, 0.2), (-2.0, 1.0, 1.0, 3.0), (10.0, 0.01, 0.0, 0.01)] {
        let mo = gaussian_threshold_moments(pred(m, 0.0), sn2, me, ve, 1.3);
        assert!(mo.var.abs() <= 1e-14 * mo.mean * mo.mean, "{mo:?}");
    }
}

#[test]
fn gaussian_threshold_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let (m, v2, sn2, me, ve, pi) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(0.01..1.0),
            rng.random_range(0.05..0.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.5..2.0),
        );
        let mo = gaussian_threshold_moments(pred(m, v2), sn2, me, ve, pi);
        let mc = gaussian_threshold_mc(m, v2, sn2, me, ve, pi, 200_000, &mut rng);
        assert!((mo.mean - mc.mean).abs() <= 4.0 * mc.se_mean, "{mo:?} {mc:?}");
        assert!((mo.var - mc.var).abs() <= 4.0 * mc.se_var, "{mo:?} {mc:?}");
    }
}

#[test]
fn single_member_ensemble_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = random_instance(2, 8, &mut rng);
    let ens = Ensemble::single(inst.gp.clone());
    for _ in 0..50 {
        let x = inst.prior.bounds().sample_uniform(&mut rng);
        let a = ens.moments(&x, inst.eps, &inst.prior);
        let b = pa_moments(inst.gp.predict(&x), inst.gp.noise_var(), inst.eps, inst.prior.pdf(&x));
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.var, b.var);
    }
}

fn ccd_instance() -> (TrainingSet, Hyper, HyperPrior, Prior, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let bounds = Bounds::cube(1, -3.0, 3.0);
    let points: Vec<Vec<f64>> = (0..25).map(|i| vec![-3.0 + 6.0 * i as f64 / 24.0]).collect();
    let values = points.iter().map(|x| x[0] * x[0] + 0.3 * rng.random_range(-1.0..1.0)).collect();
    let ts = TrainingSet::from_parts(bounds.clone(), points, values).unwrap();
    let hp = HyperPrior::default_for(&ts);
    let map = gpabc_core::gp::map_hyperparams(&ts, &hp, None, &Default::default(), &mut rng).unwrap();
    (ts, map.hyper, hp, Prior::uniform(bounds), 1.0)
}

#[test]
fn ccd_and_mc_means_agree() {
    let (ts, map, hp, prior, eps) = ccd_instance();
    let ccd = ccd_design(&ts, &hp, &map, &CcdOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mc = mc_design(&ts, &hp, &map, 200, &McmcConfig::default(), &mut rng).unwrap();
    assert!(ccd.len() > 1);
    for &x in &[-0.8, -0.4, 0.0, 0.3, 0.7] {
        let a = ccd.moments(&[x], eps, &prior).mean;
        let b = mc.moments(&[x], eps, &prior).mean;
        assert!((a - b).abs() <= 0.05 * b, "x={x}: ccd {a} mc {b}");
    }
}

#[test]
fn ccd_weights_sum_to_one() {
    let (ts, map, hp, _, _) = ccd_instance();
    let ccd = ccd_design(&ts, &hp, &map, &CcdOptions::default()).unwrap();
    let total: f64 = ccd.members().iter().map(|m| m.weight).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let only = ccd_design(&ts, &hp, &map, &CcdOptions { centre_only: true, ..Default::default() }).unwrap();
    assert_eq!(only.len(), 1);
}

#[test]
fn log_posterior_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let inst = random_instance(2, 10, &mut rng);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.8..1.8)).collect();
        let g = grad_log_unnorm_post(&inst.gp, &x, inst.eps, &inst.prior).unwrap();
        for d in 0..2 {
            let h = 1e-5;
            let mut xp = x.clone();
            xp[d] += h;
            let mut xm = x.clone();
            xm[d] -= h;
            let fd = (log_unnorm_post(&inst.gp, &xp, inst.eps, &inst.prior)
                - log_unnorm_post(&inst.gp, &xm, inst.eps, &inst.prior))
                / (2.0 * h);
            assert!((g[d] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", g[d]);
        }
    }
}
