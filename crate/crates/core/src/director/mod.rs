//! Text- and character-conditioned camera trajectory diffusion.

mod net;
mod train;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use net::{adaln, CondInput, DirectorNet, NetConfig, Variant, FEATURE_DIM, HIP_DIM};
pub use train::{sample_loss, train_director, DirectorSample, StepLog, TrainConfig};

use std::path::Path;

use crate::caption::Tokenizer;
use crate::error::{Error, Result};
use crate::io::{fill_params, read_model_checkpoint, write_checkpoint};
use crate::geom::{rot_from_6d, rot_to_6d, CameraTrajectory, CharacterTrajectory, Rot6D, Se3Pose};
use crate::nn::{Graph, Mat, Regularizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    pub steps: usize,
    pub guidance_w: f64,
    pub cond_drop_prob: f64,
    /// Mean and std of ln(sigma) during training.
    pub p_mean: f64,
    pub p_std: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            rho: 7.0,
            steps: 32,
            guidance_w: 2.0,
            cond_drop_prob: 0.1,
            p_mean: -1.2,
            p_std: 1.2,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config("need 0 < sigma_min < sigma_max".into()));
        }
        if !(self.sigma_data > 0.0 && self.rho > 0.0 && self.p_std > 0.0) {
            return Err(Error::Config("sigma_data, rho and p_std must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.guidance_w >= 0.0) {
            return Err(Error::Config("guidance_w must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("cond_drop_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-frame 9-vector features (6D rotation then translation) with a
/// validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajFeature {
    pub data: Mat,
    pub mask: Vec<bool>,
}

impl TrajFeature {
    pub fn from_camera(traj: &CameraTrajectory) -> Result<Self> {
        traj.check_model_length()?;
        let mut rows = Vec::with_capacity(traj.len());
        for p in &traj.poses {
            let r = rot_to_6d(&p.rotation)?;
            let mut row = r.0.to_vec();
            row.extend_from_slice(p.translation.as_slice());
            rows.push(row);
        }
        Ok(Self {
            data: Mat::from_rows(&rows),
            mask: traj.mask.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.rows
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows == 0
    }

    pub fn to_camera(&self, fps: f64) -> Result<CameraTrajectory> {
        let poses = (0..self.data.rows)
            .map(|i| {
                let r = self.data.row(i);
                let rot = rot_from_6d(&Rot6D([r[0], r[1], r[2], r[3], r[4], r[5]]))?;
                Ok(Se3Pose::new(rot, Vector3::new(r[6], r[7], r[8])))
            })
            .collect::<Result<Vec<_>>>()?;
        CameraTrajectory::with_mask(fps, poses, self.mask.clone())
    }
}

/// Per-channel standardization of features and hips; normalized features are
/// scaled to `sigma_data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub hip_mean: Vec<f64>,
    pub hip_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 0.05;

fn channel_stats<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for r in rows {
        n += 1.0;
        for k in 0..dim {
            sum[k] += r[k];
            sq[k] += r[k] * r[k];
        }
    }
    if n == 0.0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = (0..dim)
        .map(|k| ((sq[k] / n - mean[k] * mean[k]).max(0.0)).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

impl FeatureNorm {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FEATURE_DIM],
            std: vec![1.0; FEATURE_DIM],
            hip_mean: vec![0.0; HIP_DIM],
            hip_std: vec![1.0; HIP_DIM],
        }
    }

    /// Statistics over valid frames of the dataset.
    pub fn fit(samples: &[DirectorSample]) -> Self {
        let feats = samples
            .iter()
            .flat_map(|s| (0..s.feature.data.rows).filter(move |&i| s.feature.mask[i]).map(move |i| s.feature.data.row(i)));
        let (mean, std) = channel_stats(feats, FEATURE_DIM);
        let hips = samples
            .iter()
            .filter_map(|s| s.hips.as_ref())
            .flat_map(|h| (0..h.rows).map(move |i| h.row(i)));
        let (hip_mean, hip_std) = channel_stats(hips, HIP_DIM);
        Self {
            mean,
            std,
            hip_mean,
            hip_std,
        }
    }

    /// Feature statistics only; hip statistics stay at identity.
    pub fn fit_features<'a>(feats: impl IntoIterator<Item = &'a TrajFeature>) -> Self {
        let feats: Vec<&TrajFeature> = feats.into_iter().collect();
        let rows = feats
            .iter()
            .flat_map(|f| (0..f.data.rows).filter(move |&i| f.mask[i]).map(move |i| f.data.row(i)));
        let (mean, std) = channel_stats(rows, FEATURE_DIM);
        Self {
            mean,
            std,
            ..Self::identity()
        }
    }

    pub fn normalize(&self, raw: &Mat, sigma_data: f64) -> Mat {
        Mat::from_fn(raw.rows, raw.cols, |i, j| (raw.get(i, j) - self.mean[j]) / self.std[j] * sigma_data)
    }

    pub fn denormalize(&self, x: &Mat, sigma_data: f64) -> Mat {
        Mat::from_fn(x.rows, x.cols, |i, j| x.get(i, j) / sigma_data * self.std[j] + self.mean[j])
    }

    pub fn normalize_hips(&self, raw: &Mat) -> Mat {
        Mat::from_fn(raw.rows, raw.cols, |i, j| (raw.get(i, j) - self.hip_mean[j]) / self.hip_std[j])
    }
}

pub fn c_skip(sigma: f64, sd: f64) -> f64 {
    sd * sd / (sigma * sigma + sd * sd)
}

pub fn c_out(sigma: f64, sd: f64) -> f64 {
    sigma * sd / (sigma * sigma + sd * sd).sqrt()
}

pub fn c_in(sigma: f64, sd: f64) -> f64 {
    1.0 / (sigma * sigma + sd * sd).sqrt()
}

pub fn c_noise(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// Loss weight `(sigma^2 + sd^2) / (sigma * sd)^2`.
pub fn loss_weight(sigma: f64, sd: f64) -> f64 {
    (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
}

/// `c_skip * x + c_out * f` given the raw network output `f`.
pub fn precondition(x: &Mat, f: &Mat, sigma: f64, sd: f64) -> Mat {
    let (a, b) = (c_skip(sigma, sd), c_out(sigma, sd));
    Mat::from_vec(x.rows, x.cols, x.data.iter().zip(&f.data).map(|(x, f)| a * x + b * f).collect())
}

/// Weighted mean squared error over valid frames.
pub fn score_loss(d_out: &Mat, x_clean: &Mat, mask: &[bool], sigma: f64, sd: f64) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 0..d_out.rows {
        if mask[i] {
            for j in 0..d_out.cols {
                let r = d_out.get(i, j) - x_clean.get(i, j);
                s += r * r;
            }
            count += d_out.cols;
        }
    }
    loss_weight(sigma, sd) * s / count.max(1) as f64
}

/// `d_uncond + w * (d_cond - d_uncond)`.
pub fn cfg_combine(d_cond: &Mat, d_uncond: &Mat, w: f64) -> Mat {
    Mat::from_vec(
        d_cond.rows,
        d_cond.cols,
        d_cond.data.iter().zip(&d_uncond.data).map(|(c, u)| u + w * (c - u)).collect(),
    )
}

/// Decreasing noise levels `sigma_0 .. sigma_{steps-1}` followed by 0.
pub fn sigma_schedule(cfg: &DiffusionConfig, steps: usize) -> Vec<f64> {
    let (a, b) = (cfg.sigma_max.powf(1.0 / cfg.rho), cfg.sigma_min.powf(1.0 / cfg.rho));
    let mut out: Vec<f64> = (0..steps)
        .map(|i| {
            let t = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
            (a + t * (b - a)).powf(cfg.rho)
        })
        .collect();
    out.push(0.0);
    out
}

/// Deterministic second-order (Heun) sampler over a denoiser `d(x, sigma)`.
pub fn heun_sample(
    mut x: Mat,
    sigmas: &[f64],
    mut denoise: impl FnMut(&Mat, f64) -> Result<Mat>,
) -> Result<Mat> {
    for i in 0..sigmas.len().saturating_sub(1) {
        let (s, s_next) = (sigmas[i], sigmas[i + 1]);
        let d0 = denoise(&x, s)?;
        let slope: Vec<f64> = x.data.iter().zip(&d0.data).map(|(x, d)| (x - d) / s).collect();
        let h = s_next - s;
        let mut x_next = Mat::from_vec(x.rows, x.cols, x.data.iter().zip(&slope).map(|(x, d)| x + h * d).collect());
        if s_next > 0.0 {
            let d1 = denoise(&x_next, s_next)?;
            x_next = Mat::from_vec(
                x.rows,
                x.cols,
                (0..x.data.len())
                    .map(|k| {
                        let slope2 = (x_next.data[k] - d1.data[k]) / s_next;
                        x.data[k] + h * 0.5 * (slope[k] + slope2)
                    })
                    .collect(),
            );
        }
        if !x_next.is_finite() {
            return Err(Error::SamplerDivergence { step: i });
        }
        x = x_next;
    }
    Ok(x)
}

/// Trained network with its normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectorModel {
    pub net: DirectorNet,
    pub norm: FeatureNorm,
    pub diffusion: DiffusionConfig,
}

impl DirectorModel {
    pub fn new(net_cfg: NetConfig, diffusion: DiffusionConfig, norm: FeatureNorm) -> Result<Self> {
        diffusion.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(net_cfg.init_seed);
        Ok(Self {
            net: DirectorNet::new(net_cfg, &mut rng)?,
            norm,
            diffusion,
        })
    }

    /// Builds the conditioning input from raw hips (absent hips mean a static
    /// character at the origin).
    pub fn cond(&self, hips: Option<&Mat>, n: usize, tokens: &[usize], drop: bool) -> Result<CondInput> {
        let raw = match hips {
            Some(h) => {
                if h.shape() != (n, HIP_DIM) {
                    return Err(Error::Shape(format!("character has {} frames, trajectory {n}", h.rows)));
                }
                h.clone()
            }
            None => Mat::zeros(n, HIP_DIM),
        };
        Ok(CondInput {
            hips: self.norm.normalize_hips(&raw),
            tokens: tokens.to_vec(),
            drop,
        })
    }

    /// Preconditioned denoiser on normalized features.
    pub fn denoise(&self, x: &Mat, sigma: f64, cond: &CondInput, mask: &[bool]) -> Result<Mat> {
        self.net.check_inputs(x.rows, mask, cond)?;
        let sd = self.diffusion.sigma_data;
        let mut g = Graph::new(&self.net.params);
        let xin = g.input(x.scaled(c_in(sigma, sd)));
        let f = self.net.forward(&mut g, xin, c_noise(sigma), cond, mask, &mut Regularizer::off());
        Ok(precondition(x, g.value(f), sigma, sd))
    }

    /// Guided denoiser: conditional and null-conditioned passes combined.
    pub fn guided_denoise(&self, x: &Mat, sigma: f64, cond: &CondInput, mask: &[bool], w: f64) -> Result<Mat> {
        let dc = self.denoise(x, sigma, cond, mask)?;
        if w == 1.0 {
            return Ok(dc);
        }
        let uncond = CondInput {
            drop: true,
            ..cond.clone()
        };
        let du = self.denoise(x, sigma, &uncond, mask)?;
        Ok(cfg_combine(&dc, &du, w))
    }

    /// Samples a normalized feature sequence of `n` frames.
    pub fn sample_features(&self, cond: &CondInput, n: usize, steps: usize, w: f64, seed: u64) -> Result<Mat> {
        let mask = vec![true; n];
        self.net.check_inputs(n, &mask, cond)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigmas = sigma_schedule(&self.diffusion, steps.max(1));
        let x0 = Mat::from_fn(n, FEATURE_DIM, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sigmas[0]
        });
        heun_sample(x0, &sigmas, |x, s| self.guided_denoise(x, s, cond, &mask, w))
    }

    /// Samples and decodes a camera trajectory.
    pub fn sample(
        &self,
        tokens: &[usize],
        character: Option<&CharacterTrajectory>,
        n: usize,
        fps: f64,
        steps: usize,
        w: f64,
        seed: u64,
    ) -> Result<CameraTrajectory> {
        let hips = character.map(|c| hips_matrix(&c.hips));
        let cond = self.cond(hips.as_ref(), n, tokens, false)?;
        let x = self.sample_features(&cond, n, steps, w, seed)?;
        let raw = self.norm.denormalize(&x, self.diffusion.sigma_data);
        TrajFeature {
            data: raw,
            mask: vec![true; n],
        }
        .to_camera(fps)
    }
}

pub const CHECKPOINT_KIND: &str = "director";

#[derive(Serialize, Deserialize)]
struct DirectorMeta {
    net: NetConfig,
    diffusion: DiffusionConfig,
    norm: FeatureNorm,
}

impl DirectorModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = DirectorMeta {
            net: self.net.cfg.clone(),
            diffusion: self.diffusion.clone(),
            norm: self.norm.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Input(e.to_string()))?;
        write_checkpoint(path, CHECKPOINT_KIND, &Tokenizer::default().hash(), meta, &self.net.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mats) = read_model_checkpoint(path, CHECKPOINT_KIND, &Tokenizer::default().hash())?;
        let meta: DirectorMeta = serde_json::from_value(h.meta.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Self::new(meta.net, meta.diffusion, meta.norm)?;
        fill_params(path, &mut model.net.params, &h, mats)?;
        Ok(model)
    }
}

pub fn hips_matrix(hips: &[Vector3<f64>]) -> Mat {
    Mat::from_fn(hips.len(), HIP_DIM, |i, j| hips[i][j])
}

/// Rotation of a 6D feature row, for inspection.
pub fn row_rotation(row: &[f64]) -> Result<Matrix3<f64>> {
    rot_from_6d(&Rot6D([row[0], row[1], row[2], row[3], row[4], row[5]]))
}

#[cfg(test)]
mod tests;
