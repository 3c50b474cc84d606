use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClatrConfig, ClatrModel, ClatrPair, LossWeights};
use crate::director::FeatureNorm;
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamW, Grads, Graph, Mat, OptimConfig, ParamSet, Regularizer, Var};
use crate::par;

/// Per-pair randomness: reparameterization noise and the dropout seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNoise {
    pub eps_traj: Vec<f64>,
    pub eps_text: Vec<f64>,
    pub reg_seed: u64,
}

impl PairNoise {
    pub fn draw<R: Rng + ?Sized>(latent_dim: usize, rng: &mut R) -> Self {
        let mut v = || (0..latent_dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let eps_traj = v();
        let eps_text = v();
        Self {
            eps_traj,
            eps_text,
            reg_seed: rng.gen(),
        }
    }
}

/// Batch-mean loss components and the weights applied to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Masked squared error of the decodes from both latents, summed.
    pub recon: f64,
    pub kl_traj: f64,
    pub kl_text: f64,
    pub kl_traj_text: f64,
    pub kl_text_traj: f64,
    /// Sum of the four KL terms.
    pub kl: f64,
    pub latent: f64,
    pub contrastive: f64,
    pub contrastive_skipped: bool,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `(label, weight, value)` per weighted term; labels carry the weight.
    pub fn components(&self) -> Vec<(String, f64, f64)> {
        let w = &self.weights;
        [
            ("recon", w.recon, self.recon),
            ("kl", w.kl, self.kl),
            ("latent", w.latent, self.latent),
            ("contrastive", w.contrastive, self.contrastive),
        ]
        .into_iter()
        .map(|(n, w, v)| (format!("{n}*{w:e}"), w, v))
        .collect()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.recon,
            self.kl_traj,
            self.kl_text,
            self.kl_traj_text,
            self.kl_text_traj,
            self.latent,
            self.contrastive,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        v["labels"] = self.components().iter().map(|c| c.0.clone()).collect::<Vec<_>>().into();
        v
    }
}

fn kl_graph(g: &mut Graph, mu_p: Var, lv_p: Var, mu_q: Option<(Var, Var)>) -> Var {
    // 0.5 * mean(lv_q - lv_p + (exp(lv_p) + (mu_p - mu_q)^2) / exp(lv_q) - 1)
    let var_p = g.exp(lv_p);
    let (d, lv_q) = match mu_q {
        Some((m, l)) => (g.sub(mu_p, m), Some(l)),
        None => (mu_p, None),
    };
    let d2 = g.square(d);
    let num = g.add(var_p, d2);
    let (frac, diff) = match lv_q {
        Some(l) => {
            let neg = g.scale(l, -1.0);
            let inv = g.exp(neg);
            let frac = g.mul(num, inv);
            (frac, g.sub(l, lv_p))
        }
        None => (num, g.scale(lv_p, -1.0)),
    };
    let s = g.add(frac, diff);
    let s = g.add_scalar(s, -1.0);
    let m = g.mean(s);
    g.scale(m, 0.5)
}

fn reparam(g: &mut Graph, mu: Var, lv: Var, eps: &[f64]) -> Var {
    let half = g.scale(lv, 0.5);
    let std = g.exp(half);
    let e = g.mul_const(std, Mat::row_vec(eps.to_vec()));
    g.add(mu, e)
}

fn masked_mse(g: &mut Graph, pred: Var, target: &Mat, mask: &[bool]) -> Var {
    let t = g.input(target.clone());
    let d = g.sub(pred, t);
    let sq = g.square(d);
    let m = Mat::from_fn(target.rows, target.cols, |i, _| if mask[i] { 1.0 } else { 0.0 });
    let sq = g.mul_const(sq, m);
    let s = g.sum(sq);
    let valid = mask.iter().filter(|b| **b).count().max(1);
    g.scale(s, 1.0 / (valid * target.cols) as f64)
}

fn regularizer(model: &ClatrModel, seed: u64, train: bool) -> Regularizer {
    if train {
        Regularizer::new(model.cfg.dropout, 0.0, seed)
    } else {
        Regularizer::off()
    }
}

/// Symmetric InfoNCE over normalized means and its gradients with respect to
/// the text and trajectory means.
pub(crate) fn info_nce(mu_text: Mat, mu_traj: Mat, temperature: f64) -> (f64, Mat, Mat) {
    let empty = ParamSet::new();
    let b = mu_text.rows;
    let mut g = Graph::new(&empty);
    let a = g.input(mu_text);
    let m = g.input(mu_traj);
    let an = g.l2_normalize_rows(a);
    let mn = g.l2_normalize_rows(m);
    let s = g.matmul_bt(an, mn);
    let s = g.scale(s, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    let l1 = g.softmax_cross_entropy(s, &targets);
    let st = g.transpose(s);
    let l2 = g.softmax_cross_entropy(st, &targets);
    let l = g.add(l1, l2);
    let l = g.scale(l, 0.5);
    let (_, mut ig) = g.backward_with_inputs(l, &[a, m]);
    let gm = ig.pop().unwrap();
    let ga = ig.pop().unwrap();
    (g.scalar(l), ga, gm)
}

/// Batch loss and parameter gradients. The contrastive term couples the
/// batch, so means are computed first, the InfoNCE gradient on them is taken
/// in closed graph form, and each pair's graph then adds it as a linear term.
pub fn clatr_loss(model: &ClatrModel, batch: &[&ClatrPair], noise: &[PairNoise], train: bool) -> Result<(LossBreakdown, Grads)> {
    let b = batch.len();
    if b == 0 || noise.len() != b {
        return Err(Error::Input("clatr loss needs a nonempty batch with one noise draw per pair".into()));
    }
    for p in batch {
        model.check_traj(&p.feature)?;
        model.check_tokens(&p.tokens)?;
    }
    let w = model.cfg.weights;
    let xs: Vec<Mat> = batch.iter().map(|p| model.normalized(&p.feature)).collect();

    let skipped = b < 2;
    let (nce, g_text, g_traj) = if skipped {
        (0.0, None, None)
    } else {
        let mus = par::map_range(b, |i| {
            let mut g = Graph::new(&model.params);
            let mut reg = regularizer(model, noise[i].reg_seed, train);
            let (mm, _) = model.traj_graph(&mut g, &xs[i], &batch[i].feature.mask, &mut reg);
            let (mt, _) = model.text_graph(&mut g, &batch[i].tokens, &mut reg);
            (g.value(mt).data.clone(), g.value(mm).data.clone())
        });
        let l = model.cfg.latent_dim;
        let mt = Mat::from_vec(b, l, mus.iter().flat_map(|m| m.0.clone()).collect());
        let mm = Mat::from_vec(b, l, mus.iter().flat_map(|m| m.1.clone()).collect());
        let (v, ga, gm) = info_nce(mt, mm, model.cfg.temperature);
        (v, Some(ga), Some(gm))
    };

    let per = par::map_range(b, |i| {
        let p = batch[i];
        let mask = &p.feature.mask;
        let n = xs[i].rows;
        let mut g = Graph::new(&model.params);
        let mut reg = regularizer(model, noise[i].reg_seed, train);
        let (mu_m, lv_m) = model.traj_graph(&mut g, &xs[i], mask, &mut reg);
        let (mu_t, lv_t) = model.text_graph(&mut g, &p.tokens, &mut reg);

        let z_m = reparam(&mut g, mu_m, lv_m, &noise[i].eps_traj);
        let z_t = reparam(&mut g, mu_t, lv_t, &noise[i].eps_text);
        let dm = model.decode_graph(&mut g, z_m, n, mask, &mut reg);
        let dt = model.decode_graph(&mut g, z_t, n, mask, &mut reg);
        let rm = masked_mse(&mut g, dm, &xs[i], mask);
        let rt = masked_mse(&mut g, dt, &xs[i], mask);
        let recon = g.add(rm, rt);

        let k1 = kl_graph(&mut g, mu_m, lv_m, None);
        let k2 = kl_graph(&mut g, mu_t, lv_t, None);
        let k3 = kl_graph(&mut g, mu_m, lv_m, Some((mu_t, lv_t)));
        let k4 = kl_graph(&mut g, mu_t, lv_t, Some((mu_m, lv_m)));
        let k12 = g.add(k1, k2);
        let k34 = g.add(k3, k4);
        let kl = g.add(k12, k34);
        let dz = g.sub(z_m, z_t);
        let dz2 = g.square(dz);
        let latent = g.mean(dz2);

        let inv = 1.0 / b as f64;
        let a = g.scale(recon, w.recon * inv);
        let c = g.scale(kl, w.kl * inv);
        let d = g.scale(latent, w.latent * inv);
        let mut total = g.add(a, c);
        total = g.add(total, d);
        if let (Some(ga), Some(gm)) = (&g_text, &g_traj) {
            let lt = g.mul_const(mu_t, Mat::row_vec(ga.row(i).to_vec()));
            let lm = g.mul_const(mu_m, Mat::row_vec(gm.row(i).to_vec()));
            let s = g.add(lt, lm);
            let s = g.sum(s);
            let s = g.scale(s, w.contrastive);
            total = g.add(total, s);
        }
        let vals = [g.scalar(recon), g.scalar(k1), g.scalar(k2), g.scalar(k3), g.scalar(k4), g.scalar(latent)];
        (vals, g.backward(total))
    });

    let mut grads = Grads::zeros_like(&model.params);
    let mut sums = [0.0; 6];
    for (v, gr) in per {
        grads.add_assign(&gr);
        sums.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let m = sums.map(|s| s / b as f64);
    let kl = m[1] + m[2] + m[3] + m[4];
    let total = w.recon * m[0] + w.kl * kl + w.latent * m[5] + w.contrastive * nce;
    Ok((
        LossBreakdown {
            total,
            recon: m[0],
            kl_traj: m[1],
            kl_text: m[2],
            kl_traj_text: m[3],
            kl_text_traj: m[4],
            kl,
            latent: m[5],
            contrastive: nce,
            contrastive_skipped: skipped,
            weights: w,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClatrTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ClatrTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            optim: OptimConfig {
                lr: 1e-5,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl ClatrTrainConfig {
    /// Faster schedule for the desk-scale model.
    pub fn desk() -> Self {
        Self {
            steps: 600,
            batch: 32,
            optim: OptimConfig {
                lr: 1e-3,
                warmup_steps: 50,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClatrStepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Trains from scratch on shuffled epochs; every step's breakdown goes to
/// `on_step`.
pub fn train_clatr(
    data: &[ClatrPair],
    cfg: ClatrConfig,
    tcfg: &ClatrTrainConfig,
    mut on_step: impl FnMut(&ClatrStepLog),
) -> Result<(ClatrModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if tcfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let norm = FeatureNorm::fit_features(data.iter().map(|p| &p.feature));
    let mut model = ClatrModel::new(cfg, norm)?;
    let mut opt = AdamW::new(tcfg.optim.clone(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let batch = tcfg.batch.min(data.len());
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let pairs: Vec<&ClatrPair> = idx.iter().map(|&i| &data[i]).collect();
        let noise: Vec<PairNoise> = (0..batch).map(|_| PairNoise::draw(model.cfg.latent_dim, &mut rng)).collect();
        let (loss, grads) = clatr_loss(&model, &pairs, &noise, true)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::ClatrNanLoss {
                step,
                breakdown: loss.to_json().to_string(),
            });
        }
        let lr = cosine_lr(tcfg.optim.lr, step, tcfg.optim.warmup_steps, tcfg.steps);
        let grad_norm = opt.step(&mut model.params, &grads, lr);
        curve.push(loss.total);
        on_step(&ClatrStepLog {
            step,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok((model, curve))
}
