use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layout::{Branch, LinearIds, NetLayout, NormIds};
use super::{attention_mask_from, ModelConfig, TOKENS};
use crate::intention::ControlMask;
use crate::tape::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Tape plus the dropout stream. `rng = None` means evaluation mode.
pub struct Graph<'t, 'p> {
    pub tape: &'t mut Tape<'p>,
    pub rng: Option<&'t mut ChaCha8Rng>,
    pub dropout: f64,
}

impl Graph<'_, '_> {
    fn linear(&mut self, x: Var, ids: LinearIds) -> Var {
        let w = self.tape.param(ids.w);
        let b = self.tape.param(ids.b);
        self.tape.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Var {
        let g = self.tape.param(ids.gain);
        let b = self.tape.param(ids.bias);
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let (r, c) = self.tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let data = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::from_vec(r, c, data));
        self.tape.mul(x, m)
    }

    /// Input projection followed by Linear → LayerNorm → GELU → Dropout
    /// blocks with a residual around every pair.
    fn branch(&mut self, x: Var, b: &Branch) -> Var {
        let mut h = self.linear(x, b.input);
        let mut skip = h;
        for (l, block) in b.blocks.iter().enumerate() {
            let y = self.linear(h, block.linear);
            let y = self.norm(y, block.norm);
            let y = self.tape.gelu(y);
            h = self.dropout(y);
            if l % 2 == 1 {
                h = self.tape.add(h, skip);
                skip = h;
            }
        }
        h
    }
}

/// Sinusoidal encoding for the token axis, tiled over `batch` blocks.
fn positional(batch: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(batch * TOKENS, d);
    for b in 0..batch {
        for pos in 0..TOKENS {
            let row = t.row_mut(b * TOKENS + pos);
            for i in (0..d).step_by(2) {
                let freq = (10000f64).powf(-(i as f64) / d as f64);
                row[i] = (pos as f64 * freq).sin();
                if i + 1 < d {
                    row[i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    t
}

/// Shared body: `pose` (B × 135) and `second` (B × n) are the state token
/// inputs, `intent` is the standardized heading-frame intention (B × 22).
/// Returns the head output of token 0.
pub fn network(
    g: &mut Graph<'_, '_>,
    net: &NetLayout,
    cfg: &ModelConfig,
    pose: Var,
    second: Var,
    intent: Var,
    masks: &[ControlMask],
) -> Var {
    let batch = masks.len();
    let d = cfg.model_dim;
    let p = g.branch(pose, &net.pose);
    let s = g.branch(second, &net.second);
    let cat = g.tape.concat_cols(&[p, s]);
    let token0 = g.linear(cat, net.token0);

    let mut tokens = vec![token0];
    let pelvis_in = g.tape.slice_cols(intent, 0, 2);
    tokens.push(g.linear(pelvis_in, net.pelvis));
    let orient_in = g.tape.slice_cols(intent, 2, 2);
    tokens.push(g.linear(orient_in, net.orient));
    for (j, ids) in net.control.iter().enumerate() {
        let c = g.tape.slice_cols(intent, 4 + 3 * j, 3);
        tokens.push(g.linear(c, *ids));
    }
    let seq = g.tape.interleave_rows(&tokens);
    let pe = g.tape.constant(positional(batch, d));
    let mut x = g.tape.add(seq, pe);

    let allowed: Vec<bool> = masks
        .iter()
        .flat_map(attention_mask_from)
        .collect();
    for layer in &net.layers {
        let q = g.linear(x, layer.q);
        let k = g.linear(x, layer.k);
        let v = g.linear(x, layer.v);
        let a = g.tape.attention(q, k, v, TOKENS, cfg.heads, allowed.clone());
        let a = g.linear(a, layer.o);
        let a = g.dropout(a);
        let r = g.tape.add(x, a);
        x = g.norm(r, layer.norm1);
        let f = g.linear(x, layer.ff1);
        let f = g.tape.gelu(f);
        let f = g.linear(f, layer.ff2);
        let f = g.dropout(f);
        let r = g.tape.add(x, f);
        x = g.norm(r, layer.norm2);
    }
    let first = g
        .tape
        .gather_rows(x, (0..batch).map(|b| b * TOKENS).collect());
    g.linear(first, net.head)
}
