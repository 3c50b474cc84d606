//! Small dense autodiff engine for the sequence models.

mod graph;
mod layers;
mod mat;
mod optim;
mod params;

pub use graph::{Graph, Var};
pub use layers::{sinusoid, sinusoid_table, Attention, EncoderBlock, LayerNorm, Linear, Mlp, Regularizer};
pub use mat::{gemm, Mat};
pub use optim::{cosine_lr, AdamW, OptimConfig};
pub use params::{Grads, ParamSet};

/// Worst per-tensor relative error between analytic gradients and central
/// differences with step `h`. Tensors whose gradient norms are both below
/// `floor` count as matching.
pub fn grad_check(
    params: &ParamSet,
    h: f64,
    floor: f64,
    f: impl Fn(&ParamSet) -> (f64, Grads),
) -> (f64, String) {
    let (_, analytic) = f(params);
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for t in 0..params.len() {
        let mut num = Mat::zeros(params.value(t).rows, params.value(t).cols);
        for k in 0..num.data.len() {
            let orig = p.value(t).data[k];
            p.value_mut(t).data[k] = orig + h;
            let up = f(&p).0;
            p.value_mut(t).data[k] = orig - h;
            let down = f(&p).0;
            p.value_mut(t).data[k] = orig;
            num.data[k] = (up - down) / (2.0 * h);
        }
        let a = &analytic.0[t];
        let diff: f64 = a.data.iter().zip(&num.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale = a.norm_sq().sqrt().max(num.norm_sq().sqrt());
        let rel = if scale < floor { 0.0 } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, params.name(t).to_string());
        }
    }
    worst
}
