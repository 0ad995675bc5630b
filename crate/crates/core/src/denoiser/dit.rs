//! Tiny diffusion transformer: patch embedding, adaLN-conditioned
//! pre-norm blocks with zero-initialized modulation, linear decoder.

use super::{mlp, Denoiser, ModelConfig, ParamSource, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_embedding, Float, Graph, Var};
use crate::remix::{Init, ParamSpec};

pub(super) fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.width;
    let patch_dim = c.patch_size * c.patch_size * c.channels;
    let xavier = |fi, fo| Init::XavierUniform { fan_in: fi, fan_out: fo };
    let mut specs = mlp::embedding_specs(c);
    let dense = |specs: &mut Vec<ParamSpec>, layer: &str, fi: usize, fo: usize, init: Init| {
        specs.push(ParamSpec::new(&format!("{layer}.weight"), &[fi, fo], layer, init));
        specs.push(ParamSpec::new(&format!("{layer}.bias"), &[fo], layer, Init::Zeros));
    };
    dense(&mut specs, "patch", patch_dim, d, xavier(patch_dim, d));
    for l in 0..c.depth {
        let b = format!("blocks.{l}");
        dense(&mut specs, &format!("{b}.ada"), d, 6 * d, Init::Zeros);
        dense(&mut specs, &format!("{b}.qkv"), d, 3 * d, xavier(d, 3 * d));
        dense(&mut specs, &format!("{b}.proj"), d, d, xavier(d, d));
        dense(&mut specs, &format!("{b}.fc1"), d, 4 * d, xavier(d, 4 * d));
        dense(&mut specs, &format!("{b}.fc2"), 4 * d, d, xavier(4 * d, d));
    }
    dense(&mut specs, "final.ada", d, 2 * d, Init::Zeros);
    dense(&mut specs, "final.linear", d, patch_dim, xavier(d, patch_dim));
    specs
}

/// `[B, D]` to `[B, L, D]` by repeating over tokens.
fn per_token<F: Float>(g: &mut Graph<F>, v: Var, tokens: usize) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let [b, d] = s[..] else {
        return Err(Error::invalid(format!("expected a [B, D] condition, got {s:?}")));
    };
    let r = g.reshape(v, &[b, 1, d])?;
    g.broadcast_to(r, &[b, tokens, d])
}

/// `normed ⊙ (1 + scale) + shift` with `[B, D]` modulation over `[B, L, D]`.
pub fn modulate<F: Float>(g: &mut Graph<F>, normed: Var, shift: Var, scale: Var) -> Result<Var> {
    let tokens = g.shape(normed)[1];
    let scale = g.offset(scale, F::one())?;
    let scale = per_token(g, scale, tokens)?;
    let shift = per_token(g, shift, tokens)?;
    let y = g.mul(normed, scale)?;
    g.add(y, shift)
}

/// `gate ⊙ (scale ⊙ LN(hidden) + shift)`; `hidden` is `[B, L, D]`, the
/// modulation vectors are `[B, D]`.
pub fn adaln_modulate<F: Float>(g: &mut Graph<F>, hidden: Var, shift: Var, scale: Var, gate: Var) -> Result<Var> {
    let hs = g.shape(hidden).to_vec();
    if hs.len() != 3 {
        return Err(Error::invalid(format!("adaln_modulate expects [B, L, D], got {hs:?}")));
    }
    for v in [shift, scale, gate] {
        if g.shape(v) != [hs[0], hs[2]] {
            return Err(Error::ShapeMismatch {
                op: "adaln_modulate",
                lhs: hs.clone(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    let n = g.layer_norm(hidden, LN_EPS)?;
    let scale = per_token(g, scale, hs[1])?;
    let shift = per_token(g, shift, hs[1])?;
    let gate = per_token(g, gate, hs[1])?;
    let y = g.mul(n, scale)?;
    let y = g.add(y, shift)?;
    g.mul(gate, y)
}

fn chunks<F: Float>(g: &mut Graph<F>, v: Var, n: usize) -> Result<Vec<Var>> {
    let d = g.shape(v)[1] / n;
    (0..n).map(|j| g.slice(v, 1, j * d, (j + 1) * d)).collect()
}

fn gated_residual<F: Float>(g: &mut Graph<F>, x: Var, update: Var, gate: Var) -> Result<Var> {
    let tokens = g.shape(x)[1];
    let gate = per_token(g, gate, tokens)?;
    let u = g.mul(gate, update)?;
    g.add(x, u)
}

fn attention<F: Float>(
    net: &Denoiser,
    g: &mut Graph<F>,
    src: &mut dyn ParamSource<F>,
    h: Var,
    prefix: &str,
) -> Result<Var> {
    let (b, l, d) = match g.shape(h) {
        &[b, l, d] => (b, l, d),
        s => return Err(Error::invalid(format!("attention input {s:?}"))),
    };
    let heads = net.config().num_heads;
    let dh = d / heads;
    let qkv = net.dense(g, src, h, &format!("{prefix}.qkv"), true)?;
    let qkv = g.reshape(qkv, &[b, l, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, b * heads, l, dh])?;
    let mut parts = Vec::with_capacity(3);
    for j in 0..3 {
        let p = g.slice(qkv, 0, j, j + 1)?;
        parts.push(g.reshape(p, &[b * heads, l, dh])?);
    }
    let kt = g.permute(parts[1], &[0, 2, 1])?;
    let scores = g.matmul(parts[0], kt)?;
    let scores = g.scale(scores, F::lit(1.0 / (dh as f64).sqrt()))?;
    let attn = g.softmax(scores)?;
    let out = g.matmul(attn, parts[2])?;
    let out = g.reshape(out, &[b, heads, l, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, l, d])?;
    net.dense(g, src, out, &format!("{prefix}.proj"), true)
}

fn block<F: Float>(
    net: &Denoiser,
    g: &mut Graph<F>,
    src: &mut dyn ParamSource<F>,
    x: Var,
    cond: Var,
    l: usize,
) -> Result<Var> {
    let prefix = format!("blocks.{l}");
    let m = net.dense(g, src, cond, &format!("{prefix}.ada"), true)?;
    let m = chunks(g, m, 6)?;
    let h = g.layer_norm(x, LN_EPS)?;
    let h = modulate(g, h, m[0], m[1])?;
    let a = attention(net, g, src, h, &prefix)?;
    let x = gated_residual(g, x, a, m[2])?;
    let h = g.layer_norm(x, LN_EPS)?;
    let h = modulate(g, h, m[3], m[4])?;
    let h = net.dense(g, src, h, &format!("{prefix}.fc1"), true)?;
    let h = g.gelu(h)?;
    let h = net.dense(g, src, h, &format!("{prefix}.fc2"), true)?;
    gated_residual(g, x, h, m[5])
}

pub(super) fn forward<F: Float>(
    net: &Denoiser,
    g: &mut Graph<F>,
    src: &mut dyn ParamSource<F>,
    x: Var,
    ts: &[usize],
    labels: Option<&[usize]>,
) -> Result<Var> {
    let c = net.config();
    let (b, ch, p, side) = (ts.len(), c.channels, c.patch_size, c.image_size);
    let hp = side / p;
    let tokens = hp * hp;
    let d = c.width;

    let cond = net.condition(g, src, ts, labels)?;
    let cond = g.silu(cond)?;

    let patches = g.reshape(x, &[b, ch, hp, p, hp, p])?;
    let patches = g.permute(patches, &[0, 2, 4, 3, 5, 1])?;
    let patches = g.reshape(patches, &[b * tokens, p * p * ch])?;
    let h = net.dense(g, src, patches, "patch", true)?;
    let h = g.reshape(h, &[b, tokens, d])?;
    let pos: Vec<f64> = (0..tokens).map(|i| i as f64).collect();
    let pos = g.constant(sinusoidal_embedding(&pos, d).reshape(vec![1, tokens, d])?);
    let pos = g.broadcast_to(pos, &[b, tokens, d])?;
    let mut h = g.add(h, pos)?;

    for l in 0..c.depth {
        h = block(net, g, src, h, cond, l)?;
    }

    let m = net.dense(g, src, cond, "final.ada", true)?;
    let m = chunks(g, m, 2)?;
    let h = g.layer_norm(h, LN_EPS)?;
    let h = modulate(g, h, m[0], m[1])?;
    let out = net.dense(g, src, h, "final.linear", true)?;
    let out = g.reshape(out, &[b, hp, hp, p, p, ch])?;
    let out = g.permute(out, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(out, &[b, ch, side, side])
}

#[cfg(test)]
pub(super) fn block_for_test<F: Float>(
    net: &Denoiser,
    g: &mut Graph<F>,
    src: &mut dyn ParamSource<F>,
    x: Var,
    cond: Var,
) -> Result<Var> {
    block(net, g, src, x, cond, 0)
}
