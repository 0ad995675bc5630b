//! Time-conditioned MLP for low-dimensional data.
//!
//! `h_0 = x`, `h_{l+1} = silu(h_l·W_l + b_l + silu(c)·P_l)` for each of
//! `depth` layers, output `h·W_out + b_out`, where `c` is the conditioning
//! vector and `P_l` a per-layer projection.

use super::{Denoiser, ModelConfig, ParamSource};
use crate::error::Result;
use crate::numerics::{Float, Graph, Var};
use crate::remix::{Init, ParamSpec};

pub(super) fn embedding_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let w = c.width;
    let xavier = |fi, fo| Init::XavierUniform { fan_in: fi, fan_out: fo };
    let mut specs = vec![
        ParamSpec::new("temb.fc1.weight", &[c.time_embed_dim, w], "temb.fc1", Init::Normal(0.02)),
        ParamSpec::new("temb.fc1.bias", &[w], "temb.fc1", Init::Zeros),
        ParamSpec::new("temb.fc2.weight", &[w, w], "temb.fc2", xavier(w, w)),
        ParamSpec::new("temb.fc2.bias", &[w], "temb.fc2", Init::Zeros),
    ];
    if c.num_classes > 0 {
        specs.push(ParamSpec::new(
            "class_emb.table",
            &[c.num_classes + 1, w],
            "class_emb",
            Init::Normal(0.02),
        ));
    }
    specs
}

pub(super) fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let w = c.width;
    let xavier = |fi, fo| Init::XavierUniform { fan_in: fi, fan_out: fo };
    let mut specs = embedding_specs(c);
    for l in 0..c.depth {
        let fan_in = if l == 0 { c.data_dim } else { w };
        let layer = format!("layers.{l}");
        specs.push(ParamSpec::new(&format!("{layer}.weight"), &[fan_in, w], &layer, xavier(fan_in, w)));
        specs.push(ParamSpec::new(&format!("{layer}.bias"), &[w], &layer, Init::Zeros));
        let tproj = format!("layers.{l}.tproj");
        specs.push(ParamSpec::new(&format!("{tproj}.weight"), &[w, w], &tproj, xavier(w, w)));
    }
    specs.push(ParamSpec::new("out.weight", &[w, c.data_dim], "out", xavier(w, c.data_dim)));
    specs.push(ParamSpec::new("out.bias", &[c.data_dim], "out", Init::Zeros));
    specs
}

pub(super) fn forward<F: Float>(
    net: &Denoiser,
    g: &mut Graph<F>,
    src: &mut dyn ParamSource<F>,
    x: Var,
    ts: &[usize],
    labels: Option<&[usize]>,
) -> Result<Var> {
    let c = net.condition(g, src, ts, labels)?;
    let c = g.silu(c)?;
    let mut h = x;
    for l in 0..net.config().depth {
        let z = net.dense(g, src, h, &format!("layers.{l}"), true)?;
        let p = net.dense(g, src, c, &format!("layers.{l}.tproj"), false)?;
        let z = g.add(z, p)?;
        h = g.silu(z)?;
    }
    net.dense(g, src, h, "out", true)
}
