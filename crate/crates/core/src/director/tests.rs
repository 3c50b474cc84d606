use super::train::sample_loss;
use super::*;
use crate::nn::{grad_check, OptimConfig, ParamSet};
use rand::Rng;

fn perturb(ps: &mut ParamSet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in ps.values_mut() {
        for v in m.data.iter_mut() {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
    }
}

fn tiny(variant: Variant) -> NetConfig {
    NetConfig {
        variant,
        layers: 2,
        hidden: 8,
        heads: 2,
        ff_mult: 2,
        dropout: 0.0,
        drop_path: 0.0,
        max_frames: 16,
        max_tokens: 8,
        ..Default::default()
    }
}

fn toy_sample(n: usize, seed: u64) -> DirectorSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DirectorSample {
        feature: TrajFeature {
            data: Mat::from_fn(n, FEATURE_DIM, |_, _| rng.gen_range(-1.0..1.0)),
            mask: vec![true; n],
        },
        hips: Some(Mat::from_fn(n, HIP_DIM, |i, j| (i + j) as f64 * 0.3)),
        tokens: vec![2, 3, 11, 17],
    }
}

fn random_model(variant: Variant, seed: u64) -> DirectorModel {
    let mut m = DirectorModel::new(tiny(variant), DiffusionConfig::default(), FeatureNorm::identity()).unwrap();
    perturb(&mut m.net.params, seed, 0.3);
    m
}

#[test]
fn timestep_embedding() {
    let m = random_model(Variant::B, 1);
    let a = m.net.timestep_embed(0.5);
    assert_eq!(a, m.net.timestep_embed(0.5));
    assert_ne!(a, m.net.timestep_embed(0.51));
    for k in 0..=60 {
        let sigma = 10f64.powf(-3.0 + k as f64 * 0.1);
        assert!(m.net.timestep_embed(sigma).is_finite());
    }
}

#[test]
fn adaln_reduces_to_layer_norm() {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let x = g.input(Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.7 - 2.0));
    let z = g.input(Mat::zeros(1, 4));
    let y = adaln(&mut g, x, z, z);
    let ln = g.layer_norm(x);
    assert_eq!(g.value(y), g.value(ln));
}

#[test]
fn adaln_gradient_in_gamma() {
    let mut ps = ParamSet::new();
    ps.add("gamma", Mat::row_vec(vec![0.2, -0.4, 0.1, 0.3]));
    ps.add("beta", Mat::row_vec(vec![0.5, 0.0, -0.2, 0.1]));
    let x = Mat::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin());
    let w = Mat::from_fn(3, 4, |i, j| ((i + 2 * j) as f64).cos());
    let (err, name) = grad_check(&ps, 1e-5, 1e-12, |p| {
        let mut g = Graph::new(p);
        let xi = g.input(x.clone());
        let gm = g.param(0);
        let bt = g.param(1);
        let y = adaln(&mut g, xi, gm, bt);
        let y = g.mul_const(y, w.clone());
        let l = g.sum(y);
        (g.scalar(l), g.backward(l))
    });
    assert!(err < 1e-4, "{err} on {name}");
}

#[test]
fn zero_network_gives_skip_only() {
    for v in [Variant::A, Variant::B, Variant::C] {
        let m = DirectorModel::new(tiny(v), DiffusionConfig::default(), FeatureNorm::identity()).unwrap();
        let s = toy_sample(5, 2);
        let cond = m.cond(s.hips.as_ref(), 5, &s.tokens, false).unwrap();
        for sigma in [0.01, 0.5, 7.0] {
            let d = m.denoise(&s.feature.data, sigma, &cond, &s.feature.mask).unwrap();
            let want = s.feature.data.scaled(c_skip(sigma, 0.5));
            assert_eq!(d, want);
        }
    }
}

#[test]
fn precondition_identity_for_random_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let x = Mat::from_fn(3, 9, |_, _| rng.gen_range(-2.0..2.0));
        let f = Mat::from_fn(3, 9, |_, _| rng.gen_range(-2.0..2.0));
        let sigma: f64 = rng.gen_range(0.01..50.0);
        let d = precondition(&x, &f, sigma, 0.5);
        for k in 0..x.data.len() {
            let want = 0.25 / (sigma * sigma + 0.25) * x.data[k] + sigma * 0.5 / (sigma * sigma + 0.25).sqrt() * f.data[k];
            assert!((d.data[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn variant_b_blocks_are_identity_at_init() {
    let m = DirectorModel::new(tiny(Variant::B), DiffusionConfig::default(), FeatureNorm::identity()).unwrap();
    let s = toy_sample(6, 3);
    let cond = m.cond(s.hips.as_ref(), 6, &s.tokens, false).unwrap();
    let mut g = Graph::new(&m.net.params);
    let x = g.input(s.feature.data.clone());
    let body = m.net.body_output(&mut g, x, 0.1, &cond, &s.feature.mask);
    let emb = m.net.embed_input(&mut g, x);
    assert_eq!(g.value(body), g.value(emb));
}

#[test]
fn masked_frames_do_not_leak() {
    for v in [Variant::A, Variant::B, Variant::C] {
        let m = random_model(v, 7);
        let mut s = toy_sample(7, 5);
        s.feature.mask = vec![true, true, true, true, true, false, false];
        let run = |data: &Mat, hips: &Mat| {
            let cond = m.cond(Some(hips), 7, &s.tokens, false).unwrap();
            m.denoise(data, 0.8, &cond, &s.feature.mask).unwrap()
        };
        let hips = s.hips.clone().unwrap();
        let a = run(&s.feature.data, &hips);
        let mut d2 = s.feature.data.clone();
        let mut h2 = hips.clone();
        for i in 5..7 {
            for j in 0..9 {
                d2.set(i, j, 50.0 + j as f64);
            }
            for j in 0..3 {
                h2.set(i, j, -30.0);
            }
        }
        let b = run(&d2, &h2);
        assert_eq!(&a.data[..45], &b.data[..45], "variant {v:?}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for v in [Variant::A, Variant::B, Variant::C] {
        let model = random_model(v, 9);
        let s = toy_sample(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = Mat::from_fn(4, 9, |_, _| rng.gen_range(-1.0..1.0));
        for drop in [false, true] {
            let (err, name) = grad_check(&model.net.params, 1e-5, 1e-10, |p| {
                let mut m = model.clone();
                m.net.params = p.clone();
                sample_loss(&m, &s, 0.7, &noise, drop, &mut Regularizer::off()).unwrap()
            });
            assert!(err < 1e-4, "variant {v:?} drop {drop}: {err} on {name}");
        }
    }
}

#[test]
fn score_loss_examples() {
    let x = Mat::from_fn(4, 9, |i, j| (i * 9 + j) as f64 * 0.01);
    let mask = vec![true; 4];
    assert_eq!(score_loss(&x, &x, &mask, 1.0, 0.5), 0.0);
    let r = 0.3;
    let d = x.map(|v| v + r);
    for sigma in [0.01, 0.3, 2.0, 40.0] {
        let lam = (sigma * sigma + 0.25) / (sigma * 0.5f64).powi(2);
        let got = score_loss(&d, &x, &mask, sigma, 0.5);
        assert!((got - lam * r * r).abs() < 1e-9 * lam);
    }
    let mut d2 = d.clone();
    for j in 0..9 {
        d2.set(3, j, 100.0);
    }
    let m2 = vec![true, true, true, false];
    assert_eq!(score_loss(&d, &x, &m2, 0.5, 0.5), score_loss(&d2, &x, &m2, 0.5, 0.5));
}

#[test]
fn cfg_combine_examples() {
    let c = Mat::row_vec(vec![1.0, -2.0, 0.5]);
    let u = Mat::row_vec(vec![0.3, 0.7, -0.1]);
    assert_eq!(cfg_combine(&c, &u, 1.0), c);
    assert_eq!(cfg_combine(&c, &u, 0.0), u);
    let w2 = cfg_combine(&c, &u, 2.0);
    for k in 0..3 {
        assert!((w2.data[k] - (2.0 * c.data[k] - u.data[k])).abs() < 1e-15);
    }
}

fn gaussian_denoiser(sd: f64) -> impl Fn(&Mat, f64) -> Result<Mat> {
    move |x, s| Ok(x.scaled(sd * sd / (sd * sd + s * s)))
}

#[test]
fn heun_single_step_is_euler() {
    let cfg = DiffusionConfig::default();
    let sig = sigma_schedule(&cfg, 1);
    assert_eq!(sig, vec![80.0, 0.0]);
    let x0 = Mat::row_vec(vec![12.0, -40.0]);
    let out = heun_sample(x0.clone(), &sig, gaussian_denoiser(0.5)).unwrap();
    // x + (0 - 80) * (x - D) / 80 = D
    let d = x0.scaled(0.25 / (0.25 + 6400.0));
    for k in 0..2 {
        assert!((out.data[k] - d.data[k]).abs() < 1e-12);
    }
}

#[test]
fn schedule_endpoints() {
    let cfg = DiffusionConfig::default();
    let s = sigma_schedule(&cfg, 32);
    assert_eq!(s.len(), 33);
    assert!((s[0] - 80.0).abs() < 1e-9);
    assert!((s[31] - 0.002).abs() < 1e-12);
    assert_eq!(s[32], 0.0);
    assert!(s.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn sampler_divergence_is_reported() {
    let cfg = DiffusionConfig::default();
    let sig = sigma_schedule(&cfg, 4);
    let err = heun_sample(Mat::row_vec(vec![1.0]), &sig, |x, s| {
        Ok(if s < 10.0 { x.map(|_| f64::NAN) } else { x.clone() })
    });
    assert!(matches!(err, Err(Error::SamplerDivergence { .. })));
}

#[test]
fn cond_drop_one_ignores_tokens() {
    let data: Vec<_> = (0..3).map(|k| toy_sample(6, k)).collect();
    let diffusion = DiffusionConfig {
        cond_drop_prob: 1.0,
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps: 5,
        batch: 2,
        ..Default::default()
    };
    let (m, _) = train_director(&data, tiny(Variant::C), diffusion, &cfg, |_| {}).unwrap();
    let x = Mat::from_fn(6, 9, |i, j| ((i + j) as f64).sin());
    let a = m.denoise(&x, 0.5, &m.cond(None, 6, &[2, 3, 4], true).unwrap(), &[true; 6]).unwrap();
    let b = m.denoise(&x, 0.5, &m.cond(None, 6, &[9, 8, 7, 6, 5], true).unwrap(), &[true; 6]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic_and_overfits() {
    let data = vec![toy_sample(8, 1)];
    let cfg = TrainConfig {
        steps: 200,
        batch: 4,
        optim: OptimConfig {
            lr: 3e-3,
            warmup_steps: 10,
            ..Default::default()
        },
        seed: 3,
    };
    let (_, c1) = train_director(&data, tiny(Variant::B), DiffusionConfig::default(), &cfg, |_| {}).unwrap();
    let (_, c2) = train_director(&data, tiny(Variant::B), DiffusionConfig::default(), &cfg, |_| {}).unwrap();
    assert_eq!(c1, c2);
    let head: f64 = c1[..40].iter().sum::<f64>() / 40.0;
    let tail: f64 = c1[160..].iter().sum::<f64>() / 40.0;
    assert!(tail < head, "windowed loss {head} -> {tail}");
}

#[test]
fn features_round_trip_through_camera() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses = (0..10)
        .map(|i| Se3Pose::new(crate::geom::random_rotation(&mut rng), Vector3::new(i as f64, 0.5, -1.0)))
        .collect();
    let cam = CameraTrajectory::new(25.0, poses).unwrap();
    let f = TrajFeature::from_camera(&cam).unwrap();
    let back = f.to_camera(25.0).unwrap();
    for (a, b) in cam.poses.iter().zip(&back.poses) {
        assert!((a.rotation - b.rotation).amax() < 1e-9);
        assert_eq!(a.translation, b.translation);
    }
}

#[test]
fn shape_errors() {
    let m = random_model(Variant::A, 1);
    let h = Mat::zeros(4, 3);
    assert!(matches!(m.cond(Some(&h), 5, &[2], false), Err(Error::Shape(_))));
    let cond = m.cond(None, 5, &[], false).unwrap();
    assert!(matches!(m.denoise(&Mat::zeros(5, 9), 1.0, &cond, &[true; 5]), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_and_vocab_check() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.ckpt");
    let m = random_model(Variant::B, 21);
    m.save(&p).unwrap();
    let back = DirectorModel::load(&p).unwrap();
    assert_eq!(back.net.cfg, m.net.cfg);
    let s = toy_sample(6, 22);
    let cond = m.cond(s.hips.as_ref(), 6, &s.tokens, false).unwrap();
    let x = m.norm.normalize(&s.feature.data, 0.5);
    let a = m.denoise(&x, 1.3, &cond, &s.feature.mask).unwrap();
    let b = back.denoise(&x, 1.3, &cond, &s.feature.mask).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(u, v)| (u - v).abs() < 1e-4));

    let q = dir.path().join("other.ckpt");
    crate::io::write_checkpoint(&q, CHECKPOINT_KIND, "deadbeef", serde_json::json!({}), &m.net.params).unwrap();
    assert!(matches!(DirectorModel::load(&q), Err(Error::VocabMismatch { .. })));
}
