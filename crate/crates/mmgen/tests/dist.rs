//! Distribution primitives against quadrature oracles and hand values.

use mmgen::dist::{
    kl_diag_gaussians, poe_combine, reparam_sample, BernoulliLikelihood, CategoricalLikelihood,
    DiagGaussian,
};
use ndarray::arr1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tape::Tensor;

fn gauss1(mean: f64, var: f64) -> DiagGaussian {
    DiagGaussian::new(
        Tensor::constant(arr1(&[mean]).into_dyn()),
        Tensor::constant(arr1(&[var.ln()]).into_dyn()),
    )
    .unwrap()
}

fn density(mean: f64, var: f64, x: f64) -> f64 {
    (-0.5 * (x - mean) * (x - mean) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// ∫ q ln(q/p) on a dense grid; the independent oracle for closed-form KL.
fn quadrature_kl(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    let lo = mq.min(mp) - 12.0 * vq.sqrt().max(vp.sqrt());
    let hi = mq.max(mp) + 12.0 * vq.sqrt().max(vp.sqrt());
    let n = 400_000;
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * h;
        let q = density(mq, vq, x);
        if q > 0.0 {
            acc += q * (q / density(mp, vp, x)).ln() * h;
        }
    }
    acc
}

#[test]
fn kl_identical_is_zero() {
    let q = gauss1(0.0, 1.0);
    assert_eq!(kl_diag_gaussians(&q, &q).unwrap().scalar(), 0.0);
}

#[test]
fn kl_matches_quadrature_oracle() {
    let cases = [(1.0, 1.0, 0.0, 1.0, 0.5), (0.0, 0.25, 0.0, 1.0, 0.3181)];
    for (mq, vq, mp, vp, expected) in cases {
        let closed = kl_diag_gaussians(&gauss1(mq, vq), &gauss1(mp, vp)).unwrap().scalar();
        assert!((closed - expected).abs() < 1e-3, "hand value: got {closed}");
        let quad = quadrature_kl(mq, vq, mp, vp);
        assert!((closed - quad).abs() < 1e-5, "quadrature: {closed} vs {quad}");
    }
}

#[test]
fn kl_nonnegative_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let d = rng.gen_range(1..5);
        let mk = |rng: &mut ChaCha8Rng| {
            let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            DiagGaussian::new(
                Tensor::constant(arr1(&mean).into_dyn()),
                Tensor::constant(arr1(&lv).into_dyn()),
            )
            .unwrap()
        };
        let q = mk(&mut rng);
        let p = mk(&mut rng);
        assert!(kl_diag_gaussians(&q, &p).unwrap().scalar() >= 0.0);
    }
}

#[test]
fn kl_dimension_mismatch_is_contract_error() {
    let q = gauss1(0.0, 1.0);
    let p = DiagGaussian::standard(&[2]);
    assert!(kl_diag_gaussians(&q, &p).is_err());
}

#[test]
fn poe_hand_examples() {
    let unit = || gauss1(0.0, 1.0);
    let r = poe_combine(&[unit()], Some(&unit())).unwrap();
    assert!((r.mean.scalar() - 0.0).abs() < 1e-12);
    assert!((r.log_variance.exp().scalar() - 0.5).abs() < 1e-12);

    let r = poe_combine(&[unit(), unit()], Some(&unit())).unwrap();
    assert!((r.log_variance.exp().scalar() - 1.0 / 3.0).abs() < 1e-12);

    let r = poe_combine(&[gauss1(2.0, 1.0), unit()], Some(&unit())).unwrap();
    assert!((r.mean.scalar() - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.log_variance.exp().scalar() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn poe_empty_experts_no_prior_is_error() {
    assert!(poe_combine(&[], None).is_err());
    // A bare prior (missing both modalities) is a legal degenerate case.
    let p = poe_combine(&[], Some(&gauss1(1.0, 2.0))).unwrap();
    assert!((p.mean.scalar() - 1.0).abs() < 1e-12);
}

#[test]
fn poe_order_invariance_exact() {
    let a = gauss1(1.5, 0.5);
    let b = gauss1(-0.3, 2.0);
    let prior = gauss1(0.0, 1.0);
    let ab = poe_combine(&[a.clone(), b.clone()], Some(&prior)).unwrap();
    let ba = poe_combine(&[b, a], Some(&prior)).unwrap();
    assert_eq!(ab.mean.scalar(), ba.mean.scalar());
    assert_eq!(ab.log_variance.scalar(), ba.log_variance.scalar());
}

#[test]
fn poe_matches_quadrature_product() {
    // Normalize prior × Π experts pointwise on a grid, then compare the
    // grid mean/variance against the closed form.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let params: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0_f64).exp()))
            .collect();
        let experts: Vec<DiagGaussian> =
            params[1..].iter().map(|&(m, v)| gauss1(m, v)).collect();
        let prior = gauss1(params[0].0, params[0].1);
        let combined = poe_combine(&experts, Some(&prior)).unwrap();

        let (lo, hi, n) = (-40.0, 40.0, 800_000);
        let h = (hi - lo) / n as f64;
        let (mut mass, mut mean) = (0.0, 0.0);
        let prod = |x: f64| -> f64 {
            params.iter().map(|&(m, v)| density(m, v, x)).product()
        };
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            let p = prod(x);
            mass += p * h;
            mean += x * p * h;
        }
        mean /= mass;
        let mut var = 0.0;
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            var += (x - mean) * (x - mean) * prod(x) * h;
        }
        var /= mass;
        assert!((combined.mean.scalar() - mean).abs() < 1e-4, "PoE mean vs quadrature");
        assert!((combined.log_variance.exp().scalar() - var).abs() < 1e-4, "PoE var vs quadrature");
    }
}

#[test]
fn reparam_hand_examples() {
    let d = gauss1(1.0, 4.0);
    let z = reparam_sample(&d, &Tensor::constant(arr1(&[0.5]).into_dyn())).unwrap();
    assert!((z.scalar() - 2.0).abs() < 1e-12);

    let d = gauss1(3.0, 1.7);
    let z = reparam_sample(&d, &Tensor::zeros(&[1])).unwrap();
    assert!((z.scalar() - 3.0).abs() < 1e-12);

    let std = DiagGaussian::standard(&[3]);
    let e = Tensor::constant(arr1(&[0.3, -1.2, 2.0]).into_dyn());
    let z = reparam_sample(&std, &e).unwrap();
    assert_eq!(z.array(), e.array());
}

#[test]
fn reparam_gradient_matches_finite_differences() {
    let mean = Tensor::var(arr1(&[0.7, -0.2]).into_dyn());
    let logvar = Tensor::var(arr1(&[0.3, -0.8]).into_dyn());
    let noise = Tensor::constant(arr1(&[0.9, -1.4]).into_dyn());
    let build = |m: &Tensor, lv: &Tensor| {
        let d = DiagGaussian::new(m.clone(), lv.clone()).unwrap();
        reparam_sample(&d, &noise).unwrap().sq_norm()
    };
    let loss = build(&mean, &logvar);
    let grads = tape::grad(&loss, &[&mean, &logvar]);
    let h = 1e-5;
    for (ti, t) in [&mean, &logvar].iter().enumerate() {
        let base = t.array();
        for ci in 0..2 {
            let mut plus = base.clone();
            plus[[ci]] += h;
            t.set(plus);
            let fp = build(&mean, &logvar).scalar();
            let mut minus = base.clone();
            minus[[ci]] -= h;
            t.set(minus);
            let fm = build(&mean, &logvar).scalar();
            t.set(base.clone());
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[ti].array()[[ci]];
            assert!(
                (numeric - analytic).abs() / numeric.abs().max(1.0) < 1e-4,
                "reparam grad: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn reparam_sample_mean_within_three_standard_errors() {
    let d = gauss1(0.8, 2.25);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        acc += reparam_sample(&d, &Tensor::constant(arr1(&[e]).into_dyn()))
            .unwrap()
            .scalar();
    }
    let sample_mean = acc / n as f64;
    let se = 1.5 / (n as f64).sqrt();
    assert!(
        (sample_mean - 0.8).abs() < 3.0 * se,
        "sample mean {sample_mean} vs 0.8 ± {}",
        3.0 * se
    );
}

#[test]
fn bernoulli_hand_values_and_errors() {
    let lik = BernoulliLikelihood::new(Tensor::zeros(&[1])).unwrap();
    let lp = lik.log_prob(&Tensor::ones(&[1])).unwrap().scalar();
    assert!((lp - 0.5_f64.ln()).abs() < 1e-12);

    let lik = BernoulliLikelihood::new(Tensor::constant(arr1(&[20.0, -20.0]).into_dyn())).unwrap();
    let lp = lik
        .log_prob(&Tensor::constant(arr1(&[1.0, 0.0]).into_dyn()))
        .unwrap()
        .scalar();
    assert!(lp.abs() < 1e-6, "saturated likelihood should be ~0, got {lp}");
    assert!(lp <= 0.0, "log-probability of binary data must be ≤ 0");

    let bad = lik.log_prob(&Tensor::constant(arr1(&[1.5, 0.0]).into_dyn()));
    assert!(bad.is_err(), "out-of-range observation must be rejected");
    let mismatch = lik.log_prob(&Tensor::ones(&[3]));
    assert!(mismatch.is_err());
}

#[test]
fn categorical_hand_values_and_errors() {
    let lik = CategoricalLikelihood::new(Tensor::zeros(&[10])).unwrap();
    for idx in [0usize, 3, 9] {
        let lp = lik.log_prob(&[idx]).unwrap().scalar();
        assert!((lp - 0.1_f64.ln()).abs() < 1e-12);
    }
    assert!(lik.log_prob(&[10]).is_err(), "out-of-range class index");
    assert!(lik.log_prob(&[0, 1]).is_err(), "wrong observation count");
}

#[test]
fn categorical_normalization_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = tape::init::normal(&[4, 7], 0.0, 3.0, &mut rng);
    let lik = CategoricalLikelihood::new(Tensor::constant(logits)).unwrap();
    let probs = lik.logits.log_softmax().exp().array();
    for row in probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn log_variance_is_clamped() {
    let d = DiagGaussian::new(
        Tensor::zeros(&[2]),
        Tensor::constant(arr1(&[50.0, -50.0]).into_dyn()),
    )
    .unwrap();
    let lv = d.log_variance.array();
    assert_eq!(lv[[0]], 10.0);
    assert_eq!(lv[[1]], -10.0);
}

#[test]
fn non_finite_parameters_rejected() {
    let bad = DiagGaussian::new(
        Tensor::constant(arr1(&[f64::NAN]).into_dyn()),
        Tensor::zeros(&[1]),
    );
    assert!(bad.is_err());
}
