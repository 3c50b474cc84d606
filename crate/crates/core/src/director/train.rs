use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{hips_matrix, c_in, c_noise, c_out, c_skip, loss_weight, DiffusionConfig, DirectorModel, FeatureNorm, NetConfig, TrajFeature};
use crate::caption::Tokenizer;
use crate::geom::{CameraTrajectory, CharacterTrajectory};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamW, Grads, Graph, Mat, OptimConfig, Regularizer};
use crate::par;

/// One training pair: raw features, optional raw hips (`N x 3`) and caption
/// token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectorSample {
    pub feature: TrajFeature,
    pub hips: Option<Mat>,
    pub tokens: Vec<usize>,
}

impl DirectorSample {
    pub fn new(camera: &CameraTrajectory, character: Option<&CharacterTrajectory>, caption: &str, tok: &Tokenizer) -> Result<Self> {
        if let Some(c) = character {
            if c.len() != camera.len() {
                return Err(Error::Shape(format!("character has {} frames, camera {}", c.len(), camera.len())));
            }
        }
        Ok(Self {
            feature: TrajFeature::from_camera(camera)?,
            hips: character.map(|c| hips_matrix(&c.hips)),
            tokens: tok.encode(caption),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            optim: OptimConfig {
                lr: 1e-3,
                weight_decay: 0.1,
                warmup_steps: 100,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Loss and gradients for one noised sample.
pub fn sample_loss(
    model: &DirectorModel,
    sample: &DirectorSample,
    sigma: f64,
    noise: &Mat,
    drop: bool,
    reg: &mut Regularizer,
) -> Result<(f64, Grads)> {
    let sd = model.diffusion.sigma_data;
    let x = model.norm.normalize(&sample.feature.data, sd);
    let n = x.rows;
    let mask = &sample.feature.mask;
    let cond = model.cond(sample.hips.as_ref(), n, &sample.tokens, drop)?;
    model.net.check_inputs(n, mask, &cond)?;

    let x_noisy = Mat::from_vec(n, x.cols, x.data.iter().zip(&noise.data).map(|(a, e)| a + sigma * e).collect());
    let mut g = Graph::new(&model.net.params);
    let xin = g.input(x_noisy.scaled(c_in(sigma, sd)));
    let f = model.net.forward(&mut g, xin, c_noise(sigma), &cond, mask, reg);
    // D - x = c_out * F + (c_skip * x_noisy - x)
    let offset = Mat::from_vec(
        n,
        x.cols,
        x_noisy.data.iter().zip(&x.data).map(|(xn, xc)| c_skip(sigma, sd) * xn - xc).collect(),
    );
    let scaled = g.scale(f, c_out(sigma, sd));
    let off = g.input(offset);
    let resid = g.add(scaled, off);
    let sq = g.square(resid);
    let valid = mask.iter().filter(|b| **b).count().max(1);
    let m = Mat::from_fn(n, x.cols, |i, _| if mask[i] { 1.0 } else { 0.0 });
    let sq = g.mul_const(sq, m);
    let total = g.sum(sq);
    let loss = g.scale(total, loss_weight(sigma, sd) / (valid * x.cols) as f64);
    Ok((g.scalar(loss), g.backward(loss)))
}

/// Score-matching training with joint condition dropout. `on_step` receives
/// every step's log.
pub fn train_director(
    data: &[DirectorSample],
    net_cfg: NetConfig,
    diffusion: DiffusionConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(DirectorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let norm = FeatureNorm::fit(data);
    let mut model = DirectorModel::new(net_cfg, diffusion, norm)?;
    let mut opt = AdamW::new(cfg.optim.clone(), &model.net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ln_sigma = Normal::new(model.diffusion.p_mean, model.diffusion.p_std)
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // draw everything random on this thread so results do not depend on
        // the thread count
        let jobs: Vec<(usize, f64, bool, u64)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.gen_range(0..data.len());
                let sigma = ln_sigma.sample(&mut rng).exp();
                let drop = rng.gen::<f64>() < model.diffusion.cond_drop_prob;
                (idx, sigma, drop, rng.gen::<u64>())
            })
            .collect();
        let m = &model;
        let results = par::map_slice(&jobs, |&(idx, sigma, drop, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = &data[idx];
            let noise = Mat::from_fn(s.feature.data.rows, s.feature.data.cols, |_, _| StandardNormal.sample(&mut r));
            let mut reg = Regularizer::new(m.net.cfg.dropout, m.net.cfg.drop_path, r.gen());
            sample_loss(m, s, sigma, &noise, drop, &mut reg).map(|(l, g)| (l, g, sigma))
        });
        let mut grads = Grads::zeros_like(&model.net.params);
        let mut loss = 0.0;
        for r in results {
            let (l, g, sigma) = r?;
            if !l.is_finite() {
                return Err(Error::NanLoss { step, sigma });
            }
            loss += l;
            grads.add_assign(&g);
        }
        let inv = 1.0 / cfg.batch as f64;
        grads.scale(inv);
        loss *= inv;
        if !grads.is_finite() {
            return Err(Error::NanLoss {
                step,
                sigma: jobs.last().map(|j| j.1).unwrap_or(f64::NAN),
            });
        }
        let lr = cosine_lr(cfg.optim.lr, step, cfg.optim.warmup_steps, cfg.steps);
        let grad_norm = opt.step(&mut model.net.params, &grads, lr);
        curve.push(loss);
        on_step(&StepLog {
            step,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok((model, curve))
}
