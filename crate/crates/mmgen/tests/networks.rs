//! Builder contracts: shapes, determinism, bitwise seed reproducibility,
//! gradient coverage, text masking, PoE fusion, critic differentiability,
//! flow invertibility against a dense-Jacobian oracle, and checkpoint
//! round-trips.

use mmgen::dist::{kl_diag_gaussians, reparam_sample, DiagGaussian};
use mmgen::networks::*;
use mmgen::objectives::{flow_log_marginal, lipschitz_penalty, Flow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tape::ndarray::{ArrayD, IxDyn};
use tape::optim::{Adam, ParamStore};
use tape::{grad, grad_seeded, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::var(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
}

fn rand01(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::var(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        latent_dim: 4,
        hidden: 8,
        conv_stages: 3,
        base_channels: 2,
        embed_dim: 6,
        rnn_hidden: 8,
        word_dropout: 0.3,
        coupling_layers: 4,
        flow_hidden: 16,
        max_text_len: 8,
    }
}

fn img_spec() -> ModalitySpec {
    ModalitySpec::image("img", 1)
}

fn label_spec() -> ModalitySpec {
    ModalitySpec::label("lab", 5)
}

fn text_spec() -> ModalitySpec {
    ModalitySpec::text("txt", FIRST_WORD + 8)
}

#[test]
fn config_and_spec_validation() {
    assert!(tiny_config().validate().is_ok());
    let mut c = tiny_config();
    c.word_dropout = 1.0;
    assert!(c.validate().is_err());
    c.word_dropout = -0.1;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.conv_stages = 5;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.latent_dim = 0;
    assert!(c.validate().is_err());

    let bad = ModalitySpec { name: "x".into(), kind: ModalityKind::Image, shape: vec![1, 28, 28], vocab_size: None };
    assert!(bad.validate().is_err());
    let bad = ModalitySpec { name: "y".into(), kind: ModalityKind::Label, shape: vec![1], vocab_size: Some(1) };
    assert!(bad.validate().is_err());
}

#[test]
fn image_encoder_shape_contract_and_determinism() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = build_image_encoder(&img_spec(), &tiny_config(), &mut store, "enc", &mut rng).unwrap();
    let x = rand01(&[3, 1, 32, 32], 10);
    let q = enc.forward(&x).unwrap();
    assert_eq!(q.mean.shape(), &[3, 4]);
    assert_eq!(q.log_variance.shape(), &[3, 4]);
    let q2 = enc.forward(&x).unwrap();
    assert_eq!(q.mean.array(), q2.mean.array());
    assert_eq!(q.log_variance.array(), q2.log_variance.array());
}

#[test]
fn image_decoder_shape_contract() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dec = build_image_decoder(&img_spec(), &tiny_config(), &mut store, "dec", &mut rng).unwrap();
    let z = randn(&[3, 4], 11);
    let lik = dec.forward(&z).unwrap();
    let x = rand01(&[3, 1, 32, 32], 12);
    let lp = lik.log_prob_each(&x).unwrap();
    assert_eq!(lp.shape(), &[3]);
    assert!(lp.array().iter().all(|v| v.is_finite()));
    assert_eq!(dec.generate(&z).shape(), &[3, 1, 32, 32]);

    let mut four = tiny_config();
    four.conv_stages = 4;
    let mut store4 = ParamStore::new();
    let dec4 =
        build_image_decoder(&img_spec(), &four, &mut store4, "dec", &mut rng).unwrap();
    assert_eq!(dec4.logits(&z).shape(), &[3, 1, 32, 32]);
}

#[test]
fn builders_are_bitwise_reproducible_per_seed() {
    let a = build_vae_components(&img_spec(), &label_spec(), &tiny_config(), JointMode::Dedicated, 7).unwrap();
    let b = build_vae_components(&img_spec(), &label_spec(), &tiny_config(), JointMode::Dedicated, 7).unwrap();
    assert_eq!(a.store.names(), b.store.names());
    for name in a.store.names() {
        let va = a.store.get(&name).unwrap().array();
        let vb = b.store.get(&name).unwrap().array();
        assert_eq!(va.shape(), vb.shape(), "{name}");
        for (x, y) in va.iter().zip(vb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{name}");
        }
    }
    let c = build_vae_components(&img_spec(), &label_spec(), &tiny_config(), JointMode::Dedicated, 8).unwrap();
    let differs = a.store.names().iter().any(|n| {
        let va = a.store.get(n).unwrap().array();
        let vc = c.store.get(n).unwrap().array();
        va.iter().zip(vc.iter()).any(|(x, y)| x != y)
    });
    assert!(differs, "different seeds must give different parameters");
}

#[test]
fn same_specs_give_same_parameter_inventory() {
    let a = build_vae_components(&img_spec(), &text_spec(), &tiny_config(), JointMode::Poe, 1).unwrap();
    let b = build_vae_components(&img_spec(), &text_spec(), &tiny_config(), JointMode::Poe, 99).unwrap();
    assert_eq!(a.store.names(), b.store.names());
    assert_eq!(a.store.param_count(), b.store.param_count());
}

#[test]
fn gradient_reaches_every_parameter() {
    let comps =
        build_vae_components(&img_spec(), &label_spec(), &tiny_config(), JointMode::Dedicated, 3)
            .unwrap();
    let x = rand01(&[4, 1, 32, 32], 20);
    let labels = [0usize, 2, 4, 1];
    let y = YData::Label(&labels);
    let prior = DiagGaussian::standard(&[4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let q_x = comps.enc_x.forward(&x).unwrap();
    let q_y = comps.enc_y.forward(&y).unwrap();
    let q_xy = comps.joint.posterior(&x, &y, &q_x, &q_y, &prior).unwrap();
    let mut loss = Tensor::zeros(&[1]).sum_all();
    for q in [&q_x, &q_y, &q_xy] {
        let z = reparam_sample(q, &randn(&[4, 4], 22)).unwrap();
        let lik = comps.dec_x.forward(&z).unwrap();
        loss = loss - lik.log_prob(&x).unwrap().mean_all();
        loss = loss - comps.dec_y.log_likelihood(&z, &y, false, &mut rng).unwrap().mean_all();
        loss = loss + kl_diag_gaussians(q, &prior).unwrap().mean_all();
    }

    let params = comps.store.tensors();
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = grad(&loss, &refs);
    for (name, g) in comps.store.names().iter().zip(&grads) {
        let arr = g.array();
        assert!(arr.iter().all(|v| v.is_finite()), "{name} gradient not finite");
        assert!(arr.iter().any(|v| v.abs() > 0.0), "{name} received no gradient");
    }
}

#[test]
fn text_codec_gradient_sweep_and_batch_masking() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (enc, dec) =
        build_text_codec(&text_spec(), &tiny_config(), &mut store, "txt", &mut rng).unwrap();

    let s1 = vec![FIRST_WORD, FIRST_WORD + 1];
    let s2 = vec![FIRST_WORD + 2, FIRST_WORD + 3, FIRST_WORD + 4];
    let batch = [s1.clone(), s2.clone()];
    let prior = DiagGaussian::standard(&[2, 4]);

    let q = enc.forward(&batch).unwrap();
    assert_eq!(q.mean.shape(), &[2, 4]);
    let z = reparam_sample(&q, &randn(&[2, 4], 30)).unwrap();
    let ll = dec.log_likelihood(&z, &batch, false, &mut rng).unwrap();
    assert_eq!(ll.shape(), &[2]);
    let loss =
        kl_diag_gaussians(&q, &prior).unwrap().mean_all() - ll.mean_all();

    let params = store.tensors();
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = grad(&loss, &refs);
    for (name, g) in store.names().iter().zip(&grads) {
        assert!(g.array().iter().any(|v| v.abs() > 0.0), "{name} received no gradient");
    }

    // Padding must not leak into either direction: each sequence scores the
    // same alone as inside a ragged batch.
    for (i, s) in [s1, s2].into_iter().enumerate() {
        let single = [s];
        let q1 = enc.forward(&single).unwrap();
        let d_mean = (&q1.mean - &q.mean.slice_axis(0, i, 1)).array();
        assert!(d_mean.iter().all(|v| v.abs() < 1e-12));
        let z1 = z.slice_axis(0, i, 1);
        let ll1 = dec.log_likelihood(&z1, &single, false, &mut rng).unwrap();
        assert!((ll1.array()[[0]] - ll.array()[[i]]).abs() < 1e-12);
    }
}

#[test]
fn word_dropout_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gold = vec![SOS, FIRST_WORD, FIRST_WORD + 3, EOS, PAD, UNK];
    assert_eq!(word_dropout_inputs(&gold, 0.0, &mut rng), gold);
    let all = word_dropout_inputs(&gold, 1.0, &mut rng);
    assert_eq!(all, vec![SOS, UNK, UNK, EOS, PAD, UNK]);
}

#[test]
fn eval_mode_text_likelihood_is_deterministic() {
    let mut cfg = tiny_config();
    cfg.word_dropout = 0.9;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (_, dec) = build_text_codec(&text_spec(), &cfg, &mut store, "txt", &mut rng).unwrap();
    let z = randn(&[2, 4], 40);
    let batch = [vec![FIRST_WORD, FIRST_WORD + 1], vec![FIRST_WORD + 2]];
    let a = dec.log_likelihood(&z, &batch, false, &mut rng).unwrap().array();
    let b = dec.log_likelihood(&z, &batch, false, &mut rng).unwrap().array();
    assert_eq!(a, b);
}

#[test]
fn per_step_likelihood_normalizes_over_vocab() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = text_spec();
    let vocab = spec.vocab_size.unwrap();
    let (_, dec) = build_text_codec(&spec, &tiny_config(), &mut store, "txt", &mut rng).unwrap();
    let z = randn(&[2, 4], 41);
    let batch = [vec![FIRST_WORD, FIRST_WORD + 5], vec![FIRST_WORD + 1]];
    let steps = dec.step_likelihoods(&z, &batch, false, &mut rng).unwrap();
    assert_eq!(steps.len(), 3);
    for lik in &steps {
        for row in 0..2 {
            let mut total = 0.0;
            for c in 0..vocab {
                let lp = lik.log_prob_each_position(&[c, c]).unwrap().array();
                total += lp[[row]].exp();
            }
            assert!((total - 1.0).abs() < 1e-6, "step distribution sums to {total}");
        }
    }
}

#[test]
fn overlong_sequences_are_rejected() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (enc, dec) =
        build_text_codec(&text_spec(), &tiny_config(), &mut store, "txt", &mut rng).unwrap();
    let long = vec![vec![FIRST_WORD; 9]];
    assert!(enc.forward(&long).is_err());
    let z = randn(&[1, 4], 42);
    assert!(dec.log_likelihood(&z, &long, false, &mut rng).is_err());
}

#[test]
fn greedy_decode_terminates_within_max_len() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (_, dec) = build_text_codec(&text_spec(), &tiny_config(), &mut store, "txt", &mut rng).unwrap();
    let z = randn(&[3, 4], 43);
    let outs = dec.greedy_decode(&z);
    assert_eq!(outs.len(), 3);
    for s in outs {
        assert!(s.len() <= tiny_config().max_text_len);
    }
}

#[test]
fn poe_joint_with_unit_experts_gives_one_third_variance() {
    let joint = JointEncoder::Poe;
    let prior = DiagGaussian::standard(&[2, 4]);
    let x = rand01(&[2, 1, 32, 32], 50);
    let labels = [0usize, 1];
    let q = joint
        .posterior(&x, &YData::Label(&labels), &prior, &prior, &prior)
        .unwrap();
    for v in q.mean.array().iter() {
        assert!(v.abs() < 1e-12);
    }
    for v in q.log_variance.array().iter() {
        assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }
}

#[test]
fn poe_joint_is_order_invariant() {
    let joint = JointEncoder::Poe;
    let prior = DiagGaussian::standard(&[3, 4]);
    let q_x = DiagGaussian::new(randn(&[3, 4], 51), randn(&[3, 4], 52)).unwrap();
    let q_y = DiagGaussian::new(randn(&[3, 4], 53), randn(&[3, 4], 54)).unwrap();
    let x = rand01(&[3, 1, 32, 32], 55);
    let labels = [0usize, 1, 2];
    let y = YData::Label(&labels);
    let a = joint.posterior(&x, &y, &q_x, &q_y, &prior).unwrap();
    let b = joint.posterior(&x, &y, &q_y, &q_x, &prior).unwrap();
    let dm = (&a.mean - &b.mean).array();
    let dv = (&a.log_variance - &b.log_variance).array();
    assert!(dm.iter().all(|v| v.abs() < 1e-12));
    assert!(dv.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn dedicated_joint_shape_contract() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let joint = build_joint_encoder(
        &img_spec(),
        &text_spec(),
        &tiny_config(),
        JointMode::Dedicated,
        &mut store,
        "joint",
        &mut rng,
    )
    .unwrap();
    assert!(store.param_count() > 0);
    let x = rand01(&[2, 1, 32, 32], 56);
    let toks = [vec![FIRST_WORD], vec![FIRST_WORD + 1, FIRST_WORD + 2]];
    let y = YData::Text(&toks);
    let prior = DiagGaussian::standard(&[2, 4]);
    let q = joint.posterior(&x, &y, &prior, &prior, &prior).unwrap();
    assert_eq!(q.mean.shape(), &[2, 4]);
    assert_eq!(q.log_variance.shape(), &[2, 4]);
}

#[test]
fn critic_shapes_arity_and_eval_determinism() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let uni = build_critic(&img_spec(), None, &tiny_config(), CriticArity::Unimodal, &mut store, "c1", &mut rng).unwrap();
    let multi = build_critic(
        &img_spec(),
        Some(&label_spec()),
        &tiny_config(),
        CriticArity::Multimodal,
        &mut store,
        "c2",
        &mut rng,
    )
    .unwrap();
    assert!(build_critic(&img_spec(), None, &tiny_config(), CriticArity::Multimodal, &mut store, "c3", &mut rng).is_err());

    let x = rand01(&[3, 1, 32, 32], 60);
    let z = randn(&[3, 4], 61);
    let labels = [0usize, 1, 4];
    let y = YData::Label(&labels);

    let s = uni.score(&x, None, &z, true).unwrap();
    assert_eq!(s.shape(), &[3]);
    assert!(uni.score(&x, Some(&y), &z, true).is_err());
    assert!(multi.score(&x, None, &z, true).is_err());
    assert_eq!(multi.score(&x, Some(&y), &z, true).unwrap().shape(), &[3]);

    // Train mode refreshed the running stats; eval mode must now be frozen.
    let e1 = uni.score(&x, None, &z, false).unwrap().array();
    let e2 = uni.score(&x, None, &z, false).unwrap().array();
    assert_eq!(e1, e2);
}

#[test]
fn critic_supports_second_order_gradients() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let critic =
        build_critic(&img_spec(), None, &tiny_config(), CriticArity::Unimodal, &mut store, "c", &mut rng).unwrap();
    let x = rand01(&[2, 1, 32, 32], 62);
    let z = randn(&[2, 4], 63);
    let penalty = lipschitz_penalty(&|t: &Tensor| critic.score(t, None, &z, true).unwrap(), &x);
    assert!(penalty.array()[[]].is_finite());

    let params = store.tensors();
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = grad(&penalty, &refs);
    let mut any = false;
    for g in &grads {
        let arr = g.array();
        assert!(arr.iter().all(|v| v.is_finite()));
        any |= arr.iter().any(|v| v.abs() > 0.0);
    }
    assert!(any, "penalty gradient vanished everywhere");
}

#[test]
fn nvp_zero_init_is_identity_with_zero_logdet() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let flow = build_nvp_flow(8, &tiny_config(), &mut store, "flow", &mut rng).unwrap();
    let x = randn(&[5, 8], 70);
    let (z, logdet) = flow.to_latent(&x);
    let dz = (&z - &x).array();
    assert!(dz.iter().all(|v| v.abs() < 1e-14));
    assert!(logdet.array().iter().all(|v| v.abs() < 1e-14));
}

fn scramble_flow_outputs(store: &ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in store.names() {
        if name.ends_with(".out.w") || name.ends_with(".out.b") {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, tape::init::normal(&shape, 0.0, 0.5, &mut rng));
        }
    }
}

#[test]
fn nvp_inverse_round_trip() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let flow = build_nvp_flow(8, &tiny_config(), &mut store, "flow", &mut rng).unwrap();
    scramble_flow_outputs(&store, 140);
    let x = randn(&[6, 8], 71);
    let (z, ld_f) = flow.to_latent(&x);
    let (back, ld_b) = flow.to_data(&z);
    let dx = (&back - &x).array();
    assert!(dx.iter().all(|v| v.abs() < 1e-5));
    let ld = (&ld_f + &ld_b).array();
    assert!(ld.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn nvp_logdet_matches_dense_jacobian() {
    let dim = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let flow = build_nvp_flow(dim, &tiny_config(), &mut store, "flow", &mut rng).unwrap();
    scramble_flow_outputs(&store, 150);

    for seed in 0..3u64 {
        let x = randn(&[1, dim], 80 + seed);
        let (z, logdet) = flow.to_latent(&x);
        let mut jac = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            let mut seed_arr = ArrayD::zeros(IxDyn(&[1, dim]));
            seed_arr[[0, i]] = 1.0;
            let row = grad_seeded(&z, &Tensor::constant(seed_arr), &[&x])[0].array();
            for j in 0..dim {
                jac[(i, j)] = row[[0, j]];
            }
        }
        let det = jac.determinant();
        assert!((det.abs().ln() - logdet.array()[[0]]).abs() < 1e-5);
    }
}

#[test]
fn nvp_stays_invertible_after_training_steps() {
    let dim = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let flow = build_nvp_flow(dim, &tiny_config(), &mut store, "flow", &mut rng).unwrap();
    let base = DiagGaussian::standard(&[16, dim]);
    let data = randn(&[16, dim], 90).mul_s(2.0).add_s(0.5);

    let params = store.tensors();
    let refs: Vec<&Tensor> = params.iter().collect();
    let mut opt = Adam::new(1e-3);
    for _ in 0..10 {
        let nll = -flow_log_marginal(&data, &flow, &base).unwrap().mean_all();
        let grads = grad(&nll, &refs);
        let arrays: Vec<_> = grads.iter().map(|g| g.array()).collect();
        opt.step(&params, &arrays);
    }

    let x = randn(&[4, dim], 91);
    let (z, _) = flow.to_latent(&x);
    let (back, _) = flow.to_data(&z);
    let dx = (&back - &x).array();
    assert!(dx.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn logit_transform_matches_finite_difference_jacobian() {
    let alpha = 0.05;
    let x = rand01(&[2, 3], 95);
    let (_, logdet) = logit_transform(&x, alpha);
    let h = 1e-6;
    let arr = x.array();
    for b in 0..2 {
        let mut expected = 0.0;
        for j in 0..3 {
            let v = arr[[b, j]];
            let f = |u: f64| {
                let s = alpha + (1.0 - 2.0 * alpha) * u;
                (s / (1.0 - s)).ln()
            };
            expected += ((f(v + h) - f(v - h)) / (2.0 * h)).abs().ln();
        }
        assert!((logdet.array()[[b]] - expected).abs() < 1e-5);
    }
}

#[test]
fn dequantize_keeps_unit_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand01(&[4, 16], 96).array();
    let d = dequantize(&x, 256.0, &mut rng);
    for v in d.iter() {
        assert!(*v >= 0.0 && *v < 1.0);
    }
}

#[test]
fn checkpoint_round_trip_restores_bitwise() {
    use mmgen::checkpoint::*;
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let comps =
        build_vae_components(&img_spec(), &label_spec(), &cfg, JointMode::Dedicated, 31).unwrap();
    let meta = CheckpointMeta {
        family: "vaevae".into(),
        x_spec: img_spec(),
        y_spec: label_spec(),
        config: cfg.clone(),
        joint_mode: JointMode::Dedicated,
        seed: 31,
        data_fingerprint: Some("deadbeef".into()),
    };
    let manifest = save_checkpoint(dir.path(), &meta, &comps.store).unwrap();
    assert_eq!(manifest.params.len(), comps.store.len());
    assert!(!manifest.build.is_empty());

    let (loaded_manifest, values) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded_manifest.family, "vaevae");
    assert_eq!(loaded_manifest.seed, 31);

    let fresh =
        build_vae_components(&img_spec(), &label_spec(), &cfg, JointMode::Dedicated, 999).unwrap();
    restore_params(&fresh.store, &values).unwrap();
    let x = rand01(&[2, 1, 32, 32], 97);
    let qa = comps.enc_x.forward(&x).unwrap().mean.array();
    let qb = fresh.enc_x.forward(&x).unwrap().mean.array();
    for (a, b) in qa.iter().zip(qb.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn checkpoint_detects_corruption_and_mismatch() {
    use mmgen::checkpoint::*;
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let comps =
        build_vae_components(&img_spec(), &label_spec(), &cfg, JointMode::Dedicated, 32).unwrap();
    let meta = CheckpointMeta {
        family: "vaevae".into(),
        x_spec: img_spec(),
        y_spec: label_spec(),
        config: cfg.clone(),
        joint_mode: JointMode::Dedicated,
        seed: 32,
        data_fingerprint: None,
    };
    let manifest = save_checkpoint(dir.path(), &meta, &comps.store).unwrap();

    // A PoE build has no joint parameters, so the name sets cannot match.
    let (_, values) = load_checkpoint(dir.path()).unwrap();
    let poe = build_vae_components(&img_spec(), &label_spec(), &cfg, JointMode::Poe, 32).unwrap();
    assert!(restore_params(&poe.store, &values).is_err());

    let blob = dir.path().join(&manifest.params[0].file);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, &bytes).unwrap();
    let err = load_checkpoint(dir.path());
    assert!(err.is_err(), "corrupted blob must fail the digest check");
}
