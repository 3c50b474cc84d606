use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::mat::Mat;
use super::params::ParamSet;

/// Dropout and stochastic depth. Inactive instances are identities.
pub struct Regularizer {
    pub dropout: f64,
    pub drop_path: f64,
    rng: Option<ChaCha8Rng>,
}

impl Regularizer {
    pub fn off() -> Self {
        Self {
            dropout: 0.0,
            drop_path: 0.0,
            rng: None,
        }
    }

    pub fn new(dropout: f64, drop_path: f64, seed: u64) -> Self {
        Self {
            dropout,
            drop_path,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let p = self.dropout;
        match &mut self.rng {
            Some(rng) if p > 0.0 => {
                let (r, c) = g.shape(x);
                let keep = 1.0 / (1.0 - p);
                let m = Mat::from_fn(r, c, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep });
                g.mul_const(x, m)
            }
            _ => x,
        }
    }

    /// Drops a whole residual branch with probability `drop_path`.
    pub fn drop_path(&mut self, g: &mut Graph, branch: Var) -> Var {
        let p = self.drop_path;
        match &mut self.rng {
            Some(rng) if p > 0.0 => {
                if rng.gen::<f64>() < p {
                    g.scale(branch, 0.0)
                } else {
                    g.scale(branch, 1.0 / (1.0 - p))
                }
            }
            _ => branch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = ps.normal(format!("{name}.w"), din, dout, 1.0 / (din as f64).sqrt(), rng);
        let b = ps.zeros(format!("{name}.b"), 1, dout);
        Self { w, b }
    }

    pub fn zeroed(ps: &mut ParamSet, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.zeros(format!("{name}.w"), din, dout);
        let b = ps.zeros(format!("{name}.b"), 1, dout);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Mat::filled(1, d, 1.0));
        let beta = ps.zeros(format!("{name}.beta"), 1, d);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        let y = g.mul_row(n, gm);
        g.add_row(y, bt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Multi-head attention of `xq` over `xkv`; keys with `mask[j] == false`
    /// receive zero weight.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Option<&[bool]>) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_bt(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, mask);
            outs.push(g.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, reg: &mut Regularizer) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        let h = reg.dropout(g, h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: Attention::new(ps, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d, ff, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>, reg: &mut Regularizer) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, mask);
        let a = reg.dropout(g, a);
        let a = reg.drop_path(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h, reg);
        let m = reg.dropout(g, m);
        let m = reg.drop_path(g, m);
        g.add(x, m)
    }
}

/// Sinusoidal features `[sin(x w_k), cos(x w_k)]` with geometric frequencies.
pub fn sinusoid(x: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = (x * freq).sin();
        v[half + k] = (x * freq).cos();
    }
    Mat::row_vec(v)
}

/// Fixed sinusoidal position table used to initialize learned positions.
pub fn sinusoid_table(rows: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(rows, dim);
    for i in 0..rows {
        m.row_mut(i).copy_from_slice(&sinusoid(i as f64, dim).data);
    }
    m
}
