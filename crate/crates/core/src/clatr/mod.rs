//! Contrastive language-trajectory embedding: a VAE with trajectory and text
//! encoders, a shared decoder and retrieval metrics.

mod train;

#[cfg(test)]
use train::info_nce;
pub use train::{clatr_loss, train_clatr, ClatrStepLog, ClatrTrainConfig, LossBreakdown, PairNoise};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{Tokenizer, WORDS};
use crate::director::{FeatureNorm, TrajFeature, FEATURE_DIM};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{fill_params, read_model_checkpoint, write_checkpoint};
use crate::geom::{CameraTrajectory, MAX_FRAMES};
use crate::nn::{sinusoid_table, EncoderBlock, Graph, LayerNorm, Linear, Mat, ParamSet, Regularizer, Var};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recon: f64,
    /// Cross-modal embedding similarity.
    pub latent: f64,
    /// Applied to the sum of the four KL terms.
    pub kl: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            latent: 1e-5,
            kl: 1e-5,
            contrastive: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClatrConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub latent_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub weights: LossWeights,
    pub temperature: f64,
    pub init_seed: u64,
}

impl Default for ClatrConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 256,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            latent_dim: 256,
            max_frames: MAX_FRAMES,
            max_tokens: 64,
            vocab_size: WORDS.len(),
            weights: LossWeights::default(),
            temperature: 0.1,
            init_seed: 0,
        }
    }
}

impl ClatrConfig {
    /// Small model for CPU experiments.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            latent_dim: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_mult == 0 || self.latent_dim == 0 {
            return bad("clatr sizes must be positive");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden must be divisible by heads");
        }
        if self.max_frames == 0 || self.max_tokens == 0 || self.vocab_size == 0 {
            return bad("max_frames, max_tokens and vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        let w = &self.weights;
        if [w.recon, w.latent, w.kl, w.contrastive].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDist {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// A trajectory and its caption tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ClatrPair {
    pub feature: TrajFeature,
    pub tokens: Vec<usize>,
}

impl ClatrPair {
    pub fn new(camera: &CameraTrajectory, caption: &str, tok: &Tokenizer) -> Result<Self> {
        Ok(Self {
            feature: TrajFeature::from_camera(camera)?,
            tokens: tok.encode(caption),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    pos: usize,
    dist: usize,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    mu: Linear,
    logvar: Linear,
}

impl Encoder {
    fn new(ps: &mut ParamSet, name: &str, cfg: &ClatrConfig, rows: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        Self {
            pos: ps.add(format!("{name}.pos"), sinusoid_table(rows, d)),
            dist: ps.normal(format!("{name}.dist"), 2, d, 0.02, rng),
            blocks: (0..cfg.layers)
                .map(|l| EncoderBlock::new(ps, &format!("{name}.block{l}"), d, cfg.heads, d * cfg.ff_mult, rng))
                .collect(),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), d),
            mu: Linear::new(ps, &format!("{name}.mu"), d, cfg.latent_dim, rng),
            logvar: Linear::new(ps, &format!("{name}.logvar"), d, cfg.latent_dim, rng),
        }
    }

    /// Two distribution tokens read out `mu` and the clamped `logvar`.
    fn forward(&self, g: &mut Graph, emb: Var, mask: &[bool], reg: &mut Regularizer) -> (Var, Var) {
        let n = g.shape(emb).0;
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, n);
        let x = g.add(emb, pos);
        let dist = g.param(self.dist);
        let mut x = g.concat_rows(&[dist, x]);
        let mut m = vec![true; 2];
        m.extend_from_slice(mask);
        for b in &self.blocks {
            x = b.forward(g, x, Some(&m), reg);
        }
        let x = self.ln.forward(g, x);
        let r0 = g.slice_rows(x, 0, 1);
        let r1 = g.slice_rows(x, 1, 1);
        let mu = self.mu.forward(g, r0);
        let lv = self.logvar.forward(g, r1);
        (mu, g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    z_in: Linear,
    pos: usize,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    out: Linear,
}

impl Decoder {
    fn new(ps: &mut ParamSet, cfg: &ClatrConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        Self {
            z_in: Linear::new(ps, "dec.z", cfg.latent_dim, d, rng),
            pos: ps.add("dec.pos", sinusoid_table(cfg.max_frames, d)),
            blocks: (0..cfg.layers)
                .map(|l| EncoderBlock::new(ps, &format!("dec.block{l}"), d, cfg.heads, d * cfg.ff_mult, rng))
                .collect(),
            ln: LayerNorm::new(ps, "dec.ln", d),
            out: Linear::new(ps, "dec.out", d, FEATURE_DIM, rng),
        }
    }

    /// A latent token followed by `n` positional queries.
    fn forward(&self, g: &mut Graph, z: Var, n: usize, mask: &[bool], reg: &mut Regularizer) -> Var {
        let zt = self.z_in.forward(g, z);
        let pos = g.param(self.pos);
        let q = g.slice_rows(pos, 0, n);
        let mut x = g.concat_rows(&[zt, q]);
        let mut m = vec![true];
        m.extend_from_slice(mask);
        for b in &self.blocks {
            x = b.forward(g, x, Some(&m), reg);
        }
        let x = g.slice_rows(x, 1, n);
        let x = self.ln.forward(g, x);
        self.out.forward(g, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClatrModel {
    pub cfg: ClatrConfig,
    pub params: ParamSet,
    pub norm: FeatureNorm,
    traj_in: Linear,
    traj: Encoder,
    tok: usize,
    text: Encoder,
    dec: Decoder,
}

impl ClatrModel {
    pub fn new(cfg: ClatrConfig, norm: FeatureNorm) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut ps = ParamSet::new();
        let traj_in = Linear::new(&mut ps, "traj.in", FEATURE_DIM, cfg.hidden, &mut rng);
        let traj = Encoder::new(&mut ps, "traj", &cfg, cfg.max_frames, &mut rng);
        let tok = ps.normal("text.tok", cfg.vocab_size, cfg.hidden, 1.0, &mut rng);
        let text = Encoder::new(&mut ps, "text", &cfg, cfg.max_tokens, &mut rng);
        let dec = Decoder::new(&mut ps, &cfg, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            norm,
            traj_in,
            traj,
            tok,
            text,
            dec,
        })
    }

    pub(crate) fn check_traj(&self, f: &TrajFeature) -> Result<()> {
        let n = f.data.rows;
        if n == 0 || n > self.cfg.max_frames {
            return Err(Error::Shape(format!("trajectory has {n} frames, expected 1..={}", self.cfg.max_frames)));
        }
        if f.data.cols != FEATURE_DIM || f.mask.len() != n {
            return Err(Error::Shape("feature must be N x 9 with an N-long mask".into()));
        }
        if !f.mask.iter().any(|b| *b) {
            return Err(Error::Shape("trajectory has no valid frames".into()));
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    pub(crate) fn normalized(&self, f: &TrajFeature) -> Mat {
        self.norm.normalize(&f.data, 1.0)
    }

    pub(crate) fn traj_graph(&self, g: &mut Graph, x_norm: &Mat, mask: &[bool], reg: &mut Regularizer) -> (Var, Var) {
        let x = g.input(x_norm.clone());
        let emb = self.traj_in.forward(g, x);
        self.traj.forward(g, emb, mask, reg)
    }

    pub(crate) fn text_graph(&self, g: &mut Graph, tokens: &[usize], reg: &mut Regularizer) -> (Var, Var) {
        let t = &tokens[..tokens.len().min(self.cfg.max_tokens)];
        let table = g.param(self.tok);
        let emb = g.gather(table, t);
        self.text.forward(g, emb, &vec![true; t.len()], reg)
    }

    pub(crate) fn decode_graph(&self, g: &mut Graph, z: Var, n: usize, mask: &[bool], reg: &mut Regularizer) -> Var {
        self.dec.forward(g, z, n, mask, reg)
    }

    fn read_dist(g: &Graph, mu: Var, lv: Var) -> LatentDist {
        LatentDist {
            mu: g.value(mu).data.clone(),
            logvar: g.value(lv).data.clone(),
        }
    }

    pub fn encode_traj(&self, f: &TrajFeature) -> Result<LatentDist> {
        self.check_traj(f)?;
        let mut g = Graph::new(&self.params);
        let (mu, lv) = self.traj_graph(&mut g, &self.normalized(f), &f.mask, &mut Regularizer::off());
        Ok(Self::read_dist(&g, mu, lv))
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<LatentDist> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new(&self.params);
        let (mu, lv) = self.text_graph(&mut g, tokens, &mut Regularizer::off());
        Ok(Self::read_dist(&g, mu, lv))
    }

    /// Decodes `n` frames of raw features from a latent vector.
    pub fn decode(&self, z: &[f64], n: usize) -> Result<TrajFeature> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latent has {} dims, expected {}", z.len(), self.cfg.latent_dim)));
        }
        if n == 0 || n > self.cfg.max_frames {
            return Err(Error::Shape(format!("cannot decode {n} frames")));
        }
        let mut g = Graph::new(&self.params);
        let zv = g.input(Mat::row_vec(z.to_vec()));
        let mask = vec![true; n];
        let out = self.decode_graph(&mut g, zv, n, &mask, &mut Regularizer::off());
        Ok(TrajFeature {
            data: self.norm.denormalize(g.value(out), 1.0),
            mask,
        })
    }
}

pub const CHECKPOINT_KIND: &str = "clatr";

#[derive(Serialize, Deserialize)]
struct ClatrMeta {
    config: ClatrConfig,
    norm: FeatureNorm,
}

impl ClatrModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ClatrMeta {
            config: self.cfg.clone(),
            norm: self.norm.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Input(e.to_string()))?;
        write_checkpoint(path, CHECKPOINT_KIND, &Tokenizer::default().hash(), meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mats) = read_model_checkpoint(path, CHECKPOINT_KIND, &Tokenizer::default().hash())?;
        let meta: ClatrMeta = serde_json::from_value(h.meta.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Self::new(meta.config, meta.norm)?;
        fill_params(path, &mut model.params, &h, mats)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub text_to_traj: Recall,
    pub traj_to_text: Recall,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// 1-based rank of each query's own match; ties go to the lower index.
fn ranks(queries: &[Vec<f64>], cands: &[Vec<f64>]) -> Vec<usize> {
    crate::par::map_range(queries.len(), |i| {
        let sims: Vec<f64> = cands.iter().map(|c| cosine(&queries[i], c)).collect();
        let own = sims[i];
        1 + sims
            .iter()
            .enumerate()
            .filter(|(j, s)| **s > own || (**s == own && *j < i))
            .count()
    })
}

fn recall(ranks: &[usize]) -> Recall {
    let n = ranks.len() as f64;
    let at = |k: usize| 100.0 * ranks.iter().filter(|r| **r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let medr = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    Recall {
        r1: at(1),
        r2: at(2),
        r3: at(3),
        r5: at(5),
        r10: at(10),
        medr,
    }
}

/// Recall at k (percent) and median rank in both directions; pairs match by
/// index and similarity is cosine.
pub fn retrieval_metrics(text: &[Vec<f64>], traj: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    if text.is_empty() || text.len() != traj.len() {
        return Err(Error::Shape(format!("need equal nonempty sets, got {} and {}", text.len(), traj.len())));
    }
    Ok(RetrievalMetrics {
        text_to_traj: recall(&ranks(text, traj)),
        traj_to_text: recall(&ranks(traj, text)),
    })
}

/// Closed-form KL(p || q) between diagonal Gaussians, averaged over dimensions.
pub fn kl_divergence(p: &LatentDist, q: &LatentDist) -> f64 {
    let n = p.mu.len() as f64;
    (0..p.mu.len())
        .map(|k| {
            let (m1, l1, m2, l2) = (p.mu[k], p.logvar[k], q.mu[k], q.logvar[k]);
            0.5 * (l2 - l1 + ((l1).exp() + (m1 - m2).powi(2)) / l2.exp() - 1.0)
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests;
