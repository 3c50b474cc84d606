use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::*;
use crate::nn::grad_check;

fn tiny() -> ClatrConfig {
    ClatrConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ff_mult: 2,
        dropout: 0.0,
        latent_dim: 4,
        max_frames: 8,
        max_tokens: 8,
        ..Default::default()
    }
}

fn feature(n: usize, rng: &mut ChaCha8Rng) -> TrajFeature {
    TrajFeature {
        data: Mat::from_fn(n, FEATURE_DIM, |_, _| rng.gen_range(-1.0..1.0)),
        mask: vec![true; n],
    }
}

fn pairs(k: usize, n: usize, seed: u64) -> Vec<ClatrPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|i| ClatrPair {
            feature: feature(n, &mut rng),
            tokens: vec![2, 3, 11 + i % 4, 16 + i % 2],
        })
        .collect()
}

fn model(cfg: ClatrConfig) -> ClatrModel {
    ClatrModel::new(cfg, FeatureNorm::identity()).unwrap()
}

#[test]
fn encoders_are_deterministic_and_ignore_masked_tail() {
    let m = model(tiny());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut f = feature(6, &mut rng);
    f.mask[4] = false;
    f.mask[5] = false;
    let a = m.encode_traj(&f).unwrap();
    assert_eq!(a, m.encode_traj(&f).unwrap());
    for j in 0..FEATURE_DIM {
        f.data.set(4, j, 100.0);
        f.data.set(5, j, -7.0);
    }
    let b = m.encode_traj(&f).unwrap();
    for (x, y) in a.mu.iter().zip(&b.mu).chain(a.logvar.iter().zip(&b.logvar)) {
        assert!((x - y).abs() < 1e-12);
    }
    let t = m.encode_text(&[2, 3, 11]).unwrap();
    assert_eq!(t, m.encode_text(&[2, 3, 11]).unwrap());
    assert!(t.logvar.iter().all(|v| (LOGVAR_MIN..=LOGVAR_MAX).contains(v)));
}

#[test]
fn shape_errors() {
    let m = model(tiny());
    assert!(matches!(m.encode_text(&[]), Err(Error::Shape(_))));
    assert!(matches!(m.encode_text(&[999]), Err(Error::Shape(_))));
    let empty = TrajFeature {
        data: Mat::zeros(0, FEATURE_DIM),
        mask: vec![],
    };
    assert!(matches!(m.encode_traj(&empty), Err(Error::Shape(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(m.encode_traj(&feature(9, &mut rng)).is_err());
    assert!(m.decode(&[0.0; 3], 4).is_err());
}

#[test]
fn decode_is_deterministic_and_finite() {
    let m = model(ClatrConfig {
        max_frames: 50,
        ..tiny()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut z: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = rng.gen_range(0.0..10.0) / z.iter().map(|x| x * x).sum::<f64>().sqrt();
        z.iter_mut().for_each(|x| *x *= r);
        let a = m.decode(&z, 50).unwrap();
        assert!(a.data.is_finite());
        assert_eq!(a, m.decode(&z, 50).unwrap());
    }
}

#[test]
fn kl_closed_forms() {
    let p = LatentDist {
        mu: vec![0.3, -1.0, 2.0],
        logvar: vec![0.1, -0.5, 1.0],
    };
    assert!(kl_divergence(&p, &p).abs() < 1e-15);
    let std = LatentDist {
        mu: vec![0.0; 3],
        logvar: vec![0.0; 3],
    };
    assert_eq!(kl_divergence(&std, &std), 0.0);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mut draw = |s: f64| (0..4).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
        let p = LatentDist {
            mu: draw(1.0),
            logvar: draw(0.7),
        };
        let q = LatentDist {
            mu: draw(1.0),
            logvar: draw(0.7),
        };
        let closed = kl_divergence(&p, &q) * 4.0;
        let log_density = |x: &[f64], d: &LatentDist| -> f64 {
            (0..4)
                .map(|k| {
                    let v = d.logvar[k].exp();
                    -0.5 * ((x[k] - d.mu[k]).powi(2) / v + d.logvar[k] + (2.0 * std::f64::consts::PI).ln())
                })
                .sum()
        };
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut x = [0.0; 4];
        for _ in 0..n {
            for k in 0..4 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[k] = p.mu[k] + (0.5 * p.logvar[k]).exp() * z;
            }
            acc += log_density(&x, &p) - log_density(&x, &q);
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() <= 0.02 * closed, "mc {mc} closed {closed}");
    }
}

#[test]
fn info_nce_aligned_orthogonal_pairs() {
    let b = 6;
    let eye = Mat::from_fn(b, b, |i, j| if i == j { 1.0 } else { 0.0 });
    let (aligned, _, _) = info_nce(eye.clone(), eye.clone(), 0.1);
    assert!(aligned < (b as f64).ln() / 2.0, "{aligned}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Mat::from_fn(b, b, |_, _| rng.gen_range(-1.0..1.0));
    let mut prev = f64::INFINITY;
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mixed = Mat::from_fn(b, b, |i, j| t * eye.get(i, j) + (1.0 - t) * noise.get(i, j));
        let (l, _, _) = info_nce(eye.clone(), mixed, 0.1);
        assert!(l < prev, "t {t}: {l} vs {prev}");
        prev = l;
    }
}

#[test]
fn info_nce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
    let m = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
    let (_, ga, gm) = info_nce(a.clone(), m.clone(), 0.1);
    let h = 1e-6;
    for (which, grad) in [(0, &ga), (1, &gm)] {
        for k in 0..12 {
            let bump = |d: f64| {
                let (mut a2, mut m2) = (a.clone(), m.clone());
                if which == 0 {
                    a2.data[k] += d
                } else {
                    m2.data[k] += d
                }
                info_nce(a2, m2, 0.1).0
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((num - grad.data[k]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }
}

fn loss_fn(m: &ClatrModel, batch: &[ClatrPair], noise: &[PairNoise]) -> impl Fn(&ParamSet) -> (f64, crate::nn::Grads) {
    let m = m.clone();
    let batch = batch.to_vec();
    let noise = noise.to_vec();
    move |ps: &ParamSet| {
        let mut mm = m.clone();
        mm.params = ps.clone();
        let refs: Vec<&ClatrPair> = batch.iter().collect();
        let (b, g) = clatr_loss(&mm, &refs, &noise, false).unwrap();
        (b.total, g)
    }
}

#[test]
fn full_loss_gradient_check() {
    // raise the small weights so every term registers in the check
    let cfg = ClatrConfig {
        weights: LossWeights {
            recon: 1.0,
            latent: 0.3,
            kl: 0.2,
            contrastive: 0.5,
        },
        ..tiny()
    };
    let m = model(cfg);
    let mut batch = pairs(3, 4, 7);
    batch[1].feature.mask[3] = false;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise: Vec<PairNoise> = (0..3).map(|_| PairNoise::draw(4, &mut rng)).collect();
    let (worst, name) = grad_check(&m.params, 1e-5, 1e-9, loss_fn(&m, &batch, &noise));
    assert!(worst < 1e-4, "{name}: {worst}");

    let m = model(tiny());
    let (worst, name) = grad_check(&m.params, 1e-5, 1e-9, loss_fn(&m, &batch, &noise));
    assert!(worst < 1e-4, "default weights {name}: {worst}");
}

#[test]
fn breakdown_terms_match_closed_forms() {
    let m = model(tiny());
    let batch = pairs(1, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let noise = vec![PairNoise::draw(4, &mut rng)];
    let (b, _) = clatr_loss(&m, &[&batch[0]], &noise, false).unwrap();
    assert!(b.contrastive_skipped);
    assert_eq!(b.contrastive, 0.0);
    let tr = m.encode_traj(&batch[0].feature).unwrap();
    let tx = m.encode_text(&batch[0].tokens).unwrap();
    let std = LatentDist {
        mu: vec![0.0; 4],
        logvar: vec![0.0; 4],
    };
    assert!((b.kl_traj - kl_divergence(&tr, &std)).abs() < 1e-12);
    assert!((b.kl_text - kl_divergence(&tx, &std)).abs() < 1e-12);
    assert!((b.kl_traj_text - kl_divergence(&tr, &tx)).abs() < 1e-12);
    assert!((b.kl_text_traj - kl_divergence(&tx, &tr)).abs() < 1e-12);
    let labels: Vec<String> = b.components().into_iter().map(|c| c.0).collect();
    assert_eq!(labels, ["recon*1e0", "kl*1e-5", "latent*1e-5", "contrastive*1e-1"]);
}

#[test]
fn retrieval_identical_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v: Vec<Vec<f64>> = (0..20).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let r = retrieval_metrics(&v, &v).unwrap();
    assert_eq!(r.text_to_traj.r1, 100.0);
    assert_eq!(r.traj_to_text.medr, 1.0);
    // duplicated vectors tie; the lower index wins
    let dup = vec![vec![1.0, 0.0]; 4];
    let r = retrieval_metrics(&dup, &dup).unwrap();
    assert_eq!(r.text_to_traj.r1, 25.0);
    assert!(retrieval_metrics(&v, &v[..3]).is_err());
}

#[test]
fn retrieval_random_latents_near_chance() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..100).map(|_| (0..32).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
        };
        let (a, b) = (draw(), draw());
        let r = retrieval_metrics(&a, &b).unwrap();
        for rc in [r.text_to_traj, r.traj_to_text] {
            assert!(rc.r1 <= rc.r2 && rc.r2 <= rc.r3 && rc.r3 <= rc.r5 && rc.r5 <= rc.r10);
            assert!(rc.medr >= 1.0);
        }
        total += r.text_to_traj.r1;
    }
    let mean = total / 10.0;
    assert!((0.0..=5.0).contains(&mean), "{mean}");
}

#[test]
fn retrieval_invariant_to_orthogonal_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 6;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let q = DMatrix::from_fn(d, d, |_, _| normal.sample(&mut rng)).qr().q();
    let mut draw = || -> Vec<Vec<f64>> { (0..30).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect() };
    let (a, b) = (draw(), draw());
    let rot = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        v.iter()
            .map(|x| (&q * nalgebra::DVector::from_vec(x.clone())).iter().copied().collect())
            .collect()
    };
    let r1 = retrieval_metrics(&a, &b).unwrap();
    let r2 = retrieval_metrics(&rot(&a), &rot(&b)).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn training_is_deterministic_and_components_nonnegative() {
    let data = pairs(6, 5, 13);
    let tcfg = ClatrTrainConfig {
        steps: 8,
        batch: 4,
        ..ClatrTrainConfig::desk()
    };
    let cfg = ClatrConfig {
        dropout: 0.1,
        ..tiny()
    };
    let mut logs = Vec::new();
    let (_, c1) = train_clatr(&data, cfg.clone(), &tcfg, |l| logs.push(l.loss.clone())).unwrap();
    let (_, c2) = train_clatr(&data, cfg, &tcfg, |_| {}).unwrap();
    assert_eq!(c1, c2);
    for b in &logs {
        assert!(b.is_finite());
        for v in [b.recon, b.kl_traj, b.kl_text, b.kl_traj_text, b.kl_text_traj, b.latent, b.contrastive] {
            assert!(v >= 0.0, "{b:?}");
        }
    }
}

#[test]
fn overfits_a_few_pairs() {
    let data = pairs(4, 6, 14);
    let tcfg = ClatrTrainConfig {
        steps: 300,
        batch: 4,
        optim: crate::nn::OptimConfig {
            lr: 3e-3,
            ..Default::default()
        },
        seed: 1,
    };
    let cfg = ClatrConfig {
        hidden: 16,
        latent_dim: 8,
        ..tiny()
    };
    let mut recon = Vec::new();
    let (m, _) = train_clatr(&data, cfg, &tcfg, |l| recon.push(l.loss.recon)).unwrap();
    let first: f64 = recon[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = recon[recon.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.3 * first, "{first} -> {last}");
    let z = m.encode_traj(&data[0].feature).unwrap().mu;
    let back = m.decode(&z, 6).unwrap();
    let target = m.norm.normalize(&data[0].feature.data, 1.0);
    let got = m.norm.normalize(&back.data, 1.0);
    let mse: f64 = got.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 54.0;
    assert!(mse < 0.5 * last.max(0.1), "{mse}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    let m = model(tiny());
    m.save(&p).unwrap();
    let back = ClatrModel::load(&p).unwrap();
    let a = m.encode_text(&[2, 3, 13]).unwrap();
    let b = back.encode_text(&[2, 3, 13]).unwrap();
    assert!(a.mu.iter().zip(&b.mu).all(|(u, v)| (u - v).abs() < 1e-4));
    assert!(matches!(crate::director::DirectorModel::load(&p), Err(Error::Format { .. })));
}
