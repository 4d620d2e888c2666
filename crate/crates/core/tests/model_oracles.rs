//! Scoring primitives against independent oracles.

use nalgebra::{DMatrix, DVector};
use nlscore::model::{
    build_enrollment_model, estimate_domain_stats, marginal_log_density, nl_log_score,
    predictive_log_density, DomainStats, StatsOptions,
};
use nlscore::{Embedding, LabeledDataset, Record};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn emb(v: Vec<f64>) -> Embedding {
    Embedding::new(v).unwrap()
}

/// log N(z; 0, C) through a Cholesky factor.
fn gaussian_log_density(z: &DVector<f64>, cov: DMatrix<f64>) -> f64 {
    let n = z.len() as f64;
    let chol = cov.cholesky().expect("positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = z.dot(&chol.solve(z));
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Two-covariance PLDA log-likelihood ratio of "same speaker" against
/// "different speakers", computed from the full joint Gaussian of the stacked
/// enrollment and test vectors.
fn plda_llr(b: f64, w: f64, enroll: &[Vec<f64>], test: &[f64]) -> f64 {
    let d = test.len();
    let joint_cov = |k: usize| {
        DMatrix::from_fn(k * d, k * d, |i, j| {
            let same_dim = i % d == j % d;
            match (same_dim, i == j) {
                (_, true) => b + w,
                (true, false) => b,
                _ => 0.0,
            }
        })
    };
    let stack = |vs: &[&[f64]]| {
        DVector::from_iterator(vs.len() * d, vs.iter().flat_map(|v| v.iter().copied()))
    };
    let mut all: Vec<&[f64]> = enroll.iter().map(Vec::as_slice).collect();
    let enroll_only = stack(&all);
    all.push(test);
    let joint = stack(&all);
    let n = enroll.len();
    gaussian_log_density(&joint, joint_cov(n + 1))
        - gaussian_log_density(&enroll_only, joint_cov(n))
        - gaussian_log_density(&DVector::from_column_slice(test), joint_cov(1))
}

#[test]
fn nl_score_differences_match_two_covariance_plda() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 8;
    let center = gauss(&mut rng, dim, 0.5);
    let stats = DomainStats::new(1.3, 0.4, center.clone()).unwrap();
    let mut nl = Vec::new();
    let mut llr = Vec::new();
    for t in 0..1000 {
        let n = 1 + t % 4;
        let mu = gauss(&mut rng, dim, 1.3f64.sqrt());
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let e = gauss(rng, dim, 0.4f64.sqrt());
            (0..dim).map(|i| center[i] + mu[i] + e[i]).collect()
        };
        let enroll: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let test = if t % 2 == 0 {
            draw(&mut rng)
        } else {
            gauss(&mut rng, dim, 1.5)
        };
        let embs: Vec<Embedding> = enroll.iter().cloned().map(emb).collect();
        let refs: Vec<&Embedding> = embs.iter().collect();
        let model = build_enrollment_model(&stats, "m", &refs).unwrap();
        nl.push(nl_log_score(&model, &emb(test.clone()), &stats).unwrap());
        let centered =
            |v: &[f64]| -> Vec<f64> { v.iter().zip(&center).map(|(a, c)| a - c).collect() };
        let enroll_c: Vec<Vec<f64>> = enroll.iter().map(|v| centered(v)).collect();
        llr.push(plda_llr(1.3, 0.4, &enroll_c, &centered(&test)));
    }
    let worst = (1..nl.len())
        .map(|i| ((nl[i] - nl[0]) - (llr[i] - llr[0])).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-8, "max difference deviation {worst:e}");
}

/// ∫ N(x; μ, σ) N(μ; 0, ε) dμ by the trapezoid rule on a wide grid.
fn quadrature_marginal_1d(x: f64, eps: f64, sigma: f64) -> f64 {
    let n1 = |v: f64, var: f64| {
        (-(v * v) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    };
    let half = 12.0 * eps.sqrt() + x.abs();
    let steps = 40_000;
    let h = 2.0 * half / steps as f64;
    (0..=steps)
        .map(|i| {
            let mu = -half + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            w * n1(x - mu, sigma) * n1(mu, eps)
        })
        .sum::<f64>()
        * h
}

#[test]
fn marginal_matches_grid_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let eps = rng.random_range(0.2..3.0);
        let sigma = rng.random_range(0.1..2.0);
        let center = gauss(&mut rng, 5, 1.0);
        let x = gauss(&mut rng, 5, 1.5);
        let stats = DomainStats::new(eps, sigma, center.clone()).unwrap();
        let oracle: f64 = x
            .iter()
            .zip(&center)
            .map(|(v, c)| quadrature_marginal_1d(v - c, eps, sigma).ln())
            .sum();
        let got = marginal_log_density(&stats, &emb(x)).unwrap();
        assert!((got - oracle).abs() < 1e-3, "{got} vs {oracle}");
    }
}

/// Predictive density by absorbing enrollment samples one at a time into a
/// Gaussian posterior over the speaker mean, one dimension at a time.
fn sequential_predictive(eps: f64, sigma: f64, enroll: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut total = 0.0;
    for d in 0..x.len() {
        let (mut mean, mut var) = (0.0, eps);
        for e in enroll {
            let post_var = 1.0 / (1.0 / var + 1.0 / sigma);
            mean = post_var * (mean / var + e[d] / sigma);
            var = post_var;
        }
        let pv = var + sigma;
        let r = x[d] - mean;
        total += -0.5 * (2.0 * std::f64::consts::PI * pv).ln() - r * r / (2.0 * pv);
    }
    total
}

#[test]
fn predictive_matches_sequential_bayes_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..=8 {
        let eps = rng.random_range(0.1..4.0);
        let sigma = rng.random_range(0.05..2.0);
        let stats = DomainStats::centered_at_origin(6, eps, sigma).unwrap();
        let enroll: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut rng, 6, 1.0)).collect();
        let x = gauss(&mut rng, 6, 1.0);
        let embs: Vec<Embedding> = enroll.iter().cloned().map(emb).collect();
        let refs: Vec<&Embedding> = embs.iter().collect();
        let model = build_enrollment_model(&stats, "m", &refs).unwrap();
        let got = predictive_log_density(&model, &emb(x.clone()), &stats).unwrap();
        let oracle = sequential_predictive(eps, sigma, &enroll, &x);
        assert!((got - oracle).abs() < 1e-10, "n={n}: {got} vs {oracle}");
    }
}

#[test]
fn predictive_matches_monte_carlo_over_the_prior() {
    // p(x | X) = E_μ[N(x; μ) Π N(x_i; μ)] / E_μ[Π N(x_i; μ)], μ ~ N(0, ε)
    let (eps, sigma): (f64, f64) = (1.0, 0.6);
    let enroll = [vec![0.7, -0.3], vec![0.4, 0.1]];
    let x = vec![0.5, -0.2];
    let log_lik = |v: &[f64], mu: &[f64]| -> f64 {
        v.iter()
            .zip(mu)
            .map(|(a, m)| {
                -0.5 * (2.0 * std::f64::consts::PI * sigma).ln() - (a - m).powi(2) / (2.0 * sigma)
            })
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..400_000 {
        let mu = gauss(&mut rng, 2, eps.sqrt());
        let w: f64 = enroll.iter().map(|e| log_lik(e, &mu)).sum::<f64>().exp();
        den += w;
        num += w * log_lik(&x, &mu).exp();
    }
    let mc = num / den;
    let stats = DomainStats::centered_at_origin(2, eps, sigma).unwrap();
    let embs: Vec<Embedding> = enroll.iter().cloned().map(emb).collect();
    let refs: Vec<&Embedding> = embs.iter().collect();
    let model = build_enrollment_model(&stats, "m", &refs).unwrap();
    let exact = predictive_log_density(&model, &emb(x), &stats)
        .unwrap()
        .exp();
    assert!((mc / exact - 1.0).abs() < 1e-2, "mc {mc} exact {exact}");
}

#[test]
fn many_enrollment_samples_reach_the_known_mean_limit() {
    let stats = DomainStats::centered_at_origin(3, 0.8, 0.3).unwrap();
    let xbar = emb(vec![0.4, -1.0, 2.0]);
    let refs = vec![&xbar; 1_000_000];
    let model = build_enrollment_model(&stats, "m", &refs).unwrap();
    for (m, x) in model.pred_mean().iter().zip(xbar.as_slice()) {
        assert!((m - x).abs() < 1e-4);
    }
    assert!((model.pred_var() - 0.3).abs() < 1e-4);
}

#[test]
fn scores_are_invariant_to_a_shared_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shift = gauss(&mut rng, 4, 3.0);
    let enroll: Vec<Vec<f64>> = (0..3).map(|_| gauss(&mut rng, 4, 1.0)).collect();
    let x = gauss(&mut rng, 4, 1.0);
    let moved = |v: &[f64]| emb(v.iter().zip(&shift).map(|(a, s)| a + s).collect());
    let score = |stats: &DomainStats, enroll: Vec<Embedding>, x: Embedding| {
        let refs: Vec<&Embedding> = enroll.iter().collect();
        let model = build_enrollment_model(stats, "m", &refs).unwrap();
        nl_log_score(&model, &x, stats).unwrap()
    };
    let base = DomainStats::centered_at_origin(4, 1.1, 0.5).unwrap();
    let shifted = base.with_center(shift.clone()).unwrap();
    let a = score(
        &base,
        enroll.iter().cloned().map(emb).collect(),
        emb(x.clone()),
    );
    let b = score(
        &shifted,
        enroll.iter().map(|v| moved(v)).collect(),
        moved(&x),
    );
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn estimated_variances_recover_the_generating_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (dim, eps, sigma) = (8, 1.0, 0.5);
    let mut records = Vec::new();
    for k in 0..500 {
        let mu = gauss(&mut rng, dim, f64::sqrt(eps));
        for u in 0..20 {
            let e = gauss(&mut rng, dim, f64::sqrt(sigma));
            records.push(Record {
                utt_id: format!("u{k}-{u}"),
                spk_id: format!("s{k}"),
                domain_id: "A".into(),
                embedding: emb(mu.iter().zip(&e).map(|(m, e)| m + e).collect()),
            });
        }
    }
    let data = LabeledDataset::new(dim, records).unwrap();
    let est = estimate_domain_stats(&data, &StatsOptions::default()).unwrap();
    assert!(
        (est.epsilon() / eps - 1.0).abs() < 0.10,
        "epsilon {}",
        est.epsilon()
    );
    assert!(
        (est.sigma() / sigma - 1.0).abs() < 0.05,
        "sigma {}",
        est.sigma()
    );
}

proptest! {
    #[test]
    fn enrollment_model_shrinks_toward_the_center(
        eps in 1e-3f64..10.0,
        sigma in 1e-3f64..10.0,
        n in 1usize..50,
        xbar in prop::collection::vec(-10.0f64..10.0, 1..6),
    ) {
        let dim = xbar.len();
        let stats = DomainStats::centered_at_origin(dim, eps, sigma).unwrap();
        let e = emb(xbar.clone());
        let model = build_enrollment_model(&stats, "m", &vec![&e; n]).unwrap();
        prop_assert!(model.pred_var() >= sigma && model.pred_var() <= sigma + eps + 1e-12);
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(norm(model.pred_mean()) <= norm(&xbar) * (1.0 + 1e-12));
        let more = build_enrollment_model(&stats, "m", &vec![&e; n + 1]).unwrap();
        prop_assert!(more.pred_var() <= model.pred_var());
    }
}
