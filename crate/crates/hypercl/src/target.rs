//! The main classifier whose parameters come from the hypernetwork: a ReLU
//! MLP with per-task or shared output heads, plus predictive entropy for
//! task inference.

use crate::error::Result;
use crate::layout::{HeadSelector, MainNetLayout};
use crate::tape::{Tape, Var};

/// Forward pass: `x` is a B x input_dim batch, `theta` the structured
/// parameter vars in layout order. Differentiable w.r.t. both `x` and
/// `theta` (Fisher estimation needs the latter).
pub fn forward(
    tape: &mut Tape,
    x: Var,
    theta: &[Var],
    layout: &MainNetLayout,
    head: HeadSelector,
) -> Result<Var> {
    let mut act = x;
    for l in 0..layout.n_layers() {
        let (wi, bi) = layout.layer_entries(l);
        let z = tape.matmul(act, theta[wi])?;
        let zb = tape.add_row_broadcast(z, theta[bi])?;
        act = tape.relu(zb);
    }
    let (wi, bi) = layout.head_entries(head)?;
    let z = tape.matmul(act, theta[wi])?;
    tape.add_row_broadcast(z, theta[bi])
}

/// Shannon entropy of softmax(logits), in nats: 0 <= H <= ln K.
pub fn predictive_entropy(logits: &[f64]) -> f64 {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &v in logits {
        denom += (v - maxv).exp();
    }
    let log_denom = denom.ln() + maxv;
    let mut h = 0.0;
    for &v in logits {
        let logp = v - log_denom;
        h -= logp.exp() * logp;
    }
    h.max(0.0)
}

/// Per-row entropies of a B x K logits tensor.
pub fn batch_entropies(logits: &[f64], k: usize) -> Vec<f64> {
    logits.chunks(k).map(predictive_entropy).collect()
}

/// Row-wise argmax class.
pub fn batch_argmax(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}
