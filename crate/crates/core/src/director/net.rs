//! Denoiser network body for the three conditioning variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sinusoid, sinusoid_table, Attention, EncoderBlock, Graph, LayerNorm, Linear, Mat, Mlp, ParamSet, Regularizer, Var,
};

pub const FEATURE_DIM: usize = 9;
pub const HIP_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// In-context conditioning tokens.
    A,
    /// AdaLN modulation.
    B,
    /// Cross-attention to the full condition sequences.
    C,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub drop_path: f64,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::B,
            layers: 4,
            hidden: 64,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            drop_path: 0.1,
            max_frames: crate::geom::MAX_FRAMES,
            max_tokens: 64,
            vocab_size: crate::caption::WORDS.len(),
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            ..Default::default()
        }
    }

    pub fn full(variant: Variant) -> Self {
        Self {
            variant,
            layers: 8,
            hidden: 512,
            heads: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config("dropout rates must be in [0, 1)".into()));
        }
        if self.max_frames == 0 || self.max_tokens == 0 || self.vocab_size < 2 {
            return Err(Error::Config("max_frames, max_tokens and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Conditioning for one sample: normalized hips (`N x 3`), caption token ids,
/// and whether both conditions are replaced by the learned null embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CondInput {
    pub hips: Mat,
    pub tokens: Vec<usize>,
    pub drop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CrossBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    xattn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Body {
    A {
        blocks: Vec<EncoderBlock>,
    },
    B {
        cond: Linear,
        modulation: Vec<Linear>,
        attn: Vec<Attention>,
        mlp: Vec<Mlp>,
    },
    C {
        pre: Vec<EncoderBlock>,
        blocks: Vec<CrossBlock>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectorNet {
    pub cfg: NetConfig,
    pub params: ParamSet,
    in_proj: Linear,
    pos: usize,
    time1: Linear,
    time2: Linear,
    tok_emb: usize,
    tok_pos: usize,
    text_global: Linear,
    char_in: Linear,
    null_text: usize,
    null_char: usize,
    body: Body,
    final_ln: LayerNorm,
    out: Linear,
}

/// Scale applied to `c_noise` before the sinusoidal features.
const NOISE_FEATURE_SCALE: f64 = 1000.0;
const PRE_ENCODER_LAYERS: usize = 2;

impl DirectorNet {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let ff = d * cfg.ff_mult;
        let mut ps = ParamSet::new();
        let in_proj = Linear::new(&mut ps, "in_proj", FEATURE_DIM, d, rng);
        let pos = ps.add("pos", sinusoid_table(cfg.max_frames, d));
        let time1 = Linear::new(&mut ps, "time.fc1", d, d, rng);
        let time2 = Linear::new(&mut ps, "time.fc2", d, d, rng);
        let tok_emb = ps.normal("text.tok", cfg.vocab_size, d, 1.0, rng);
        let tok_pos = ps.normal("text.pos", cfg.max_tokens, d, 0.02, rng);
        let text_global = Linear::new(&mut ps, "text.global", d, d, rng);
        let char_in = Linear::new(&mut ps, "char.in", HIP_DIM, d, rng);
        let null_text = ps.normal("null.text", 1, d, 0.02, rng);
        let null_char = ps.normal("null.char", 1, d, 0.02, rng);
        let body = match cfg.variant {
            Variant::A => Body::A {
                blocks: (0..cfg.layers)
                    .map(|l| EncoderBlock::new(&mut ps, &format!("blk{l}"), d, cfg.heads, ff, rng))
                    .collect(),
            },
            Variant::B => {
                let cond = Linear::new(&mut ps, "cond", 2 * d, d, rng);
                let mut modulation = Vec::new();
                let mut attn = Vec::new();
                let mut mlp = Vec::new();
                for l in 0..cfg.layers {
                    modulation.push(Linear::zeroed(&mut ps, &format!("blk{l}.mod"), d, 6 * d));
                    attn.push(Attention::new(&mut ps, &format!("blk{l}.attn"), d, cfg.heads, rng));
                    mlp.push(Mlp::new(&mut ps, &format!("blk{l}.mlp"), d, ff, rng));
                }
                Body::B {
                    cond,
                    modulation,
                    attn,
                    mlp,
                }
            }
            Variant::C => {
                let pre = (0..PRE_ENCODER_LAYERS)
                    .map(|l| EncoderBlock::new(&mut ps, &format!("pre{l}"), d, cfg.heads, ff, rng))
                    .collect();
                let blocks = (0..cfg.layers)
                    .map(|l| {
                        let n = format!("blk{l}");
                        CrossBlock {
                            ln1: LayerNorm::new(&mut ps, &format!("{n}.ln1"), d),
                            attn: Attention::new(&mut ps, &format!("{n}.attn"), d, cfg.heads, rng),
                            ln2: LayerNorm::new(&mut ps, &format!("{n}.ln2"), d),
                            xattn: Attention::new(&mut ps, &format!("{n}.xattn"), d, cfg.heads, rng),
                            ln3: LayerNorm::new(&mut ps, &format!("{n}.ln3"), d),
                            mlp: Mlp::new(&mut ps, &format!("{n}.mlp"), d, ff, rng),
                        }
                    })
                    .collect();
                Body::C { pre, blocks }
            }
        };
        let final_ln = LayerNorm::new(&mut ps, "final.ln", d);
        let out = Linear::zeroed(&mut ps, "final.out", d, FEATURE_DIM);
        Ok(Self {
            cfg,
            params: ps,
            in_proj,
            pos,
            time1,
            time2,
            tok_emb,
            tok_pos,
            text_global,
            char_in,
            null_text,
            null_char,
            body,
            final_ln,
            out,
        })
    }

    pub fn check_inputs(&self, n: usize, mask: &[bool], cond: &CondInput) -> Result<()> {
        if n == 0 {
            return Err(Error::Shape("empty trajectory".into()));
        }
        if n > self.cfg.max_frames {
            return Err(Error::Shape(format!("{n} frames exceed the model limit {}", self.cfg.max_frames)));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!("mask length {} != {n}", mask.len())));
        }
        if cond.hips.shape() != (n, HIP_DIM) {
            return Err(Error::Shape(format!(
                "character has {} frames, trajectory {n}",
                cond.hips.rows
            )));
        }
        if cond.tokens.is_empty() {
            return Err(Error::Shape("empty caption".into()));
        }
        if let Some(t) = cond.tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Raw network `F(x_in, c_noise, cond)`; `x_in` is `N x 9`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_in: Var,
        c_noise: f64,
        cond: &CondInput,
        mask: &[bool],
        reg: &mut Regularizer,
    ) -> Var {
        self.run(g, x_in, c_noise, cond, mask, reg, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        g: &mut Graph,
        x_in: Var,
        c_noise: f64,
        cond: &CondInput,
        mask: &[bool],
        reg: &mut Regularizer,
        body_only: bool,
    ) -> Var {
        let n = g.shape(x_in).0;
        let ntok = cond.tokens.len().min(self.cfg.max_tokens);

        let pos = g.param(self.pos);
        let pos_n = g.slice_rows(pos, 0, n);
        let xs = self.in_proj.forward(g, x_in);
        let xs = g.add(xs, pos_n);

        let tf = g.input(sinusoid(NOISE_FEATURE_SCALE * c_noise, self.cfg.hidden));
        let t = self.time1.forward(g, tf);
        let t = g.silu(t);
        let t = self.time2.forward(g, t);

        // text: token sequence and its pooled global token
        let (text_seq, text_tok, char_seq, char_tok, char_mask): (Var, Var, Var, Var, Vec<bool>) = if cond.drop {
            let nt = g.param(self.null_text);
            let nc = g.param(self.null_char);
            (nt, nt, nc, nc, vec![true])
        } else {
            let table = g.param(self.tok_emb);
            let tp = g.param(self.tok_pos);
            let emb = g.gather(table, &cond.tokens[..ntok]);
            let tp = g.slice_rows(tp, 0, ntok);
            let seq = g.add(emb, tp);
            let pooled = g.mean_rows(seq, None);
            let global = self.text_global.forward(g, pooled);
            let h = g.input(cond.hips.clone());
            let ch = self.char_in.forward(g, h);
            let pooled_char = g.mean_rows(ch, Some(mask));
            let ch_seq = g.add(ch, pos_n);
            (seq, global, ch_seq, pooled_char, mask.to_vec())
        };

        let h = match &self.body {
            Body::A { blocks } => {
                let seq = g.concat_rows(&[t, text_tok, char_tok, xs]);
                let mut m = vec![true; 3];
                m.extend_from_slice(mask);
                let mut x = seq;
                for b in blocks {
                    x = b.forward(g, x, Some(&m), reg);
                }
                g.slice_rows(x, 3, n)
            }
            Body::B {
                cond: cond_lin,
                modulation,
                attn,
                mlp,
            } => {
                let cat = g.concat_cols(&[text_tok, char_tok]);
                let c = cond_lin.forward(g, cat);
                let c = g.add(c, t);
                let c = g.silu(c);
                let d = self.cfg.hidden;
                let mut x = xs;
                for l in 0..attn.len() {
                    let md = modulation[l].forward(g, c);
                    let part = |g: &mut Graph, k: usize| g.slice_cols(md, k * d, d);
                    let (g1, b1, l1) = (part(g, 0), part(g, 1), part(g, 2));
                    let (g2, b2, l2) = (part(g, 3), part(g, 4), part(g, 5));

                    let hh = adaln(g, x, g1, b1);
                    let a = attn[l].forward(g, hh, hh, Some(mask));
                    let a = g.mul_row(a, l1);
                    let a = reg.dropout(g, a);
                    let a = reg.drop_path(g, a);
                    x = g.add(x, a);

                    let hh = adaln(g, x, g2, b2);
                    let f = mlp[l].forward(g, hh, reg);
                    let f = g.mul_row(f, l2);
                    let f = reg.dropout(g, f);
                    let f = reg.drop_path(g, f);
                    x = g.add(x, f);
                }
                x
            }
            Body::C { pre, blocks } => {
                let mem = g.concat_rows(&[text_seq, char_seq]);
                let text_rows = g.shape(text_seq).0;
                let mut mem_mask = vec![true; text_rows];
                mem_mask.extend_from_slice(&char_mask);
                let mut mm = mem;
                for b in pre {
                    mm = b.forward(g, mm, Some(&mem_mask), reg);
                }
                let mut x = g.concat_rows(&[t, xs]);
                let mut m = vec![true];
                m.extend_from_slice(mask);
                for b in blocks {
                    let hh = b.ln1.forward(g, x);
                    let a = b.attn.forward(g, hh, hh, Some(&m));
                    let a = reg.dropout(g, a);
                    let a = reg.drop_path(g, a);
                    x = g.add(x, a);
                    let hh = b.ln2.forward(g, x);
                    let a = b.xattn.forward(g, hh, mm, Some(&mem_mask));
                    let a = reg.dropout(g, a);
                    let a = reg.drop_path(g, a);
                    x = g.add(x, a);
                    let hh = b.ln3.forward(g, x);
                    let f = b.mlp.forward(g, hh, reg);
                    let f = reg.dropout(g, f);
                    let f = reg.drop_path(g, f);
                    x = g.add(x, f);
                }
                g.slice_rows(x, 1, n)
            }
        };
        if body_only {
            return h;
        }
        let h = self.final_ln.forward(g, h);
        self.out.forward(g, h)
    }

    /// Time token for noise level `sigma`: sinusoidal features of
    /// `ln(sigma) / 4` through a two-layer perceptron.
    pub fn timestep_embed(&self, sigma: f64) -> Mat {
        let mut g = Graph::new(&self.params);
        let c = sigma.ln() / 4.0;
        let tf = g.input(sinusoid(NOISE_FEATURE_SCALE * c, self.cfg.hidden));
        let t = self.time1.forward(&mut g, tf);
        let t = g.silu(t);
        let t = self.time2.forward(&mut g, t);
        g.value(t).clone()
    }

    /// Embedded input stream `in_proj(x) + pos`.
    pub fn embed_input(&self, g: &mut Graph, x_in: Var) -> Var {
        let n = g.shape(x_in).0;
        let pos = g.param(self.pos);
        let pos_n = g.slice_rows(pos, 0, n);
        let xs = self.in_proj.forward(g, x_in);
        g.add(xs, pos_n)
    }

    /// Transformer body output for the frame rows, before the final norm.
    pub fn body_output(&self, g: &mut Graph, x_in: Var, c_noise: f64, cond: &CondInput, mask: &[bool]) -> Var {
        self.run(g, x_in, c_noise, cond, mask, &mut Regularizer::off(), true)
    }
}

/// `(1 + gamma) * LN(x) + beta` with `gamma`, `beta` as `1 x d` rows.
pub fn adaln(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let n = g.layer_norm(x);
    let s = g.add_scalar(gamma, 1.0);
    let y = g.mul_row(n, s);
    g.add_row(y, beta)
}

