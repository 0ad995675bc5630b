//! Noise-prediction networks whose every trainable tensor can be served
//! either plainly or as a mixture of basis slices.

mod config;
mod dit;
mod mlp;
mod source;

pub use config::{Arch, ModelConfig};
pub use dit::{adaln_modulate, modulate};
pub use source::{AlphaVars, MixedSource, ParamSource, PlainSource};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_embedding, Float, Graph, Tensor, Var};
use crate::remix::{linear, BasisBank, Coefficients, ExpertParameters, ParamSpec};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Architecture description: config plus the ordered parameter specs.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
}

impl Denoiser {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut specs = match config.arch {
            Arch::Mlp => mlp::param_specs(&config),
            Arch::DitTiny => dit::param_specs(&config),
        };
        if !config.mix_embeddings {
            for s in specs.iter_mut().filter(|s| is_embedding(&s.name)) {
                s.mixed = false;
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Denoiser { config, specs, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Distinct layer names of mixed parameters, in declaration order.
    pub fn mixed_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.specs.iter().filter(|s| s.mixed) {
            if !out.contains(&s.layer) {
                out.push(s.layer.clone());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub(crate) fn param<F: Float>(&self, g: &mut Graph<F>, src: &mut dyn ParamSource<F>, name: &str) -> Result<Var> {
        let spec = self
            .index
            .get(name)
            .map(|&i| &self.specs[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        src.param(g, spec)
    }

    pub(crate) fn dense<F: Float>(
        &self,
        g: &mut Graph<F>,
        src: &mut dyn ParamSource<F>,
        x: Var,
        layer: &str,
        bias: bool,
    ) -> Result<Var> {
        let w = self.param(g, src, &format!("{layer}.weight"))?;
        let b = if bias { Some(self.param(g, src, &format!("{layer}.bias"))?) } else { None };
        linear(g, x, w, b)
    }

    /// Conditioning vector `[B, width]`: projected sinusoidal timestep
    /// features plus the class embedding when the model is conditional.
    pub(crate) fn condition<F: Float>(
        &self,
        g: &mut Graph<F>,
        src: &mut dyn ParamSource<F>,
        ts: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let feats = g.constant(sinusoidal_embedding(&tf, self.config.time_embed_dim));
        let h = self.dense(g, src, feats, "temb.fc1", true)?;
        let h = g.silu(h)?;
        let mut c = self.dense(g, src, h, "temb.fc2", true)?;
        if let Some(null) = self.config.null_class() {
            let rows: Vec<usize> = match labels {
                Some(l) => {
                    if l.len() != ts.len() {
                        return Err(Error::invalid(format!("{} labels for batch of {}", l.len(), ts.len())));
                    }
                    if let Some(&bad) = l.iter().find(|&&v| v > null) {
                        return Err(Error::OutOfRange {
                            what: "class label",
                            index: bad,
                            len: null + 1,
                        });
                    }
                    l.to_vec()
                }
                None => vec![null; ts.len()],
            };
            let table = self.param(g, src, "class_emb.table")?;
            let e = g.gather_rows(table, &rows)?;
            c = g.add(c, e)?;
        }
        Ok(c)
    }

    /// `ε̂(x_t, t)` on the graph. `x` is `[B, ...sample_shape]`; `ts` has one
    /// timestep per row. `labels = None` (or the null class) is the
    /// unconditional branch.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        src: &mut dyn ParamSource<F>,
        x: Var,
        ts: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let mut expect = vec![ts.len()];
        expect.extend(self.config.sample_shape());
        if shape != expect {
            return Err(Error::ShapeMismatch {
                op: "denoiser input",
                lhs: shape,
                rhs: expect,
            });
        }
        match self.config.arch {
            Arch::Mlp => mlp::forward(self, g, src, x, ts, labels),
            Arch::DitTiny => dit::forward(self, g, src, x, ts, labels),
        }
    }

    /// Forward with a plain parameter set, no gradient tracking.
    pub fn predict_plain<F: Float>(
        &self,
        params: &ExpertParameters<F>,
        x_t: &Tensor<F>,
        ts: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut src = PlainSource::frozen(params);
        let x = g.constant(x_t.clone());
        let y = self.forward(&mut g, &mut src, x, ts, labels)?;
        Ok(g.value(y).clone())
    }
}

fn is_embedding(name: &str) -> bool {
    name.starts_with("temb.") || name.starts_with("class_emb.")
}

/// A denoiser whose parameters live in a `K`-widened basis bank.
#[derive(Clone, Debug)]
pub struct MixedDenoiser<F: Float> {
    pub arch: Denoiser,
    pub bank: BasisBank<F>,
}

/// Build a mixed denoiser with independently initialized bases.
pub fn build_denoiser<F: Float, R: Rng + ?Sized>(config: ModelConfig, k: usize, rng: &mut R) -> Result<MixedDenoiser<F>> {
    let arch = Denoiser::new(config)?;
    let bank = BasisBank::random(arch.specs(), k, rng)?;
    Ok(MixedDenoiser { arch, bank })
}

impl<F: Float> MixedDenoiser<F> {
    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }

    /// `ε̂` under coefficients `alpha`, mixing inside every layer.
    pub fn predict_noise(
        &self,
        alpha: &Coefficients<F>,
        x_t: &Tensor<F>,
        ts: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut src = MixedSource::constant(&self.bank, &mut g, alpha)?;
        let x = g.constant(x_t.clone());
        let y = self.arch.forward(&mut g, &mut src, x, ts, labels)?;
        Ok(g.value(y).clone())
    }
}
