use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::remix::{BasisBank, Coefficients, ExpertParameters, MixerScope, ParamSpec, GLOBAL_TABLE};

/// Supplies the graph node for each parameter the forward pass asks for.
pub trait ParamSource<F: Float> {
    fn param(&mut self, g: &mut Graph<F>, spec: &ParamSpec) -> Result<Var>;
}

/// Parameters taken directly from a plain set.
pub struct PlainSource<'a, F: Float> {
    params: &'a ExpertParameters<F>,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'a, F: Float> PlainSource<'a, F> {
    pub fn trainable(params: &'a ExpertParameters<F>) -> Self {
        PlainSource {
            params,
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    pub fn frozen(params: &'a ExpertParameters<F>) -> Self {
        PlainSource {
            params,
            trainable: false,
            vars: BTreeMap::new(),
        }
    }

    /// Leaves registered so far, by parameter name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

impl<F: Float> ParamSource<F> for PlainSource<'_, F> {
    fn param(&mut self, g: &mut Graph<F>, spec: &ParamSpec) -> Result<Var> {
        if let Some(&v) = self.vars.get(&spec.name) {
            return Ok(v);
        }
        let t = self.params.get(&spec.name)?.clone();
        let v = if self.trainable { g.leaf(t) } else { g.constant(t) };
        self.vars.insert(spec.name.clone(), v);
        Ok(v)
    }
}

/// Coefficient nodes: one `[K]` vector for the global scope or one per
/// layer for the local scope.
#[derive(Clone, Debug)]
pub enum AlphaVars {
    Global(Var),
    Local(BTreeMap<String, Var>),
}

impl AlphaVars {
    fn for_layer(&self, layer: &str) -> Result<Var> {
        match self {
            AlphaVars::Global(v) => Ok(*v),
            AlphaVars::Local(map) => map
                .get(layer)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no coefficients for layer {layer:?}"))),
        }
    }

    pub fn scope(&self) -> MixerScope {
        match self {
            AlphaVars::Global(_) => MixerScope::Global,
            AlphaVars::Local(_) => MixerScope::Local,
        }
    }

    pub fn key_for<'a>(&self, layer: &'a str) -> &'a str {
        match self {
            AlphaVars::Global(_) => GLOBAL_TABLE,
            AlphaVars::Local(_) => layer,
        }
    }
}

/// Parameters produced on the fly by mixing widened bank tensors.
pub struct MixedSource<'a, F: Float> {
    bank: &'a BasisBank<F>,
    alphas: AlphaVars,
    trainable: bool,
    bank_vars: BTreeMap<String, Var>,
    mixed: BTreeMap<String, Var>,
}

impl<'a, F: Float> MixedSource<'a, F> {
    /// Bank tensors become leaves; `alphas` are caller-built nodes.
    pub fn trainable(bank: &'a BasisBank<F>, alphas: AlphaVars) -> Self {
        MixedSource {
            bank,
            alphas,
            trainable: true,
            bank_vars: BTreeMap::new(),
            mixed: BTreeMap::new(),
        }
    }

    /// Inference: bank and coefficients enter as constants.
    pub fn constant(bank: &'a BasisBank<F>, g: &mut Graph<F>, coeffs: &Coefficients<F>) -> Result<Self> {
        let k = bank.k();
        let vec_of = |a: &[F]| -> Result<Tensor<F>> { Tensor::new(vec![k], a.to_vec()) };
        let alphas = match coeffs {
            Coefficients::Global(a) => AlphaVars::Global(g.constant(vec_of(a)?)),
            Coefficients::Local(map) => {
                let mut vars = BTreeMap::new();
                for (layer, a) in map {
                    vars.insert(layer.clone(), g.constant(vec_of(a)?));
                }
                AlphaVars::Local(vars)
            }
        };
        Ok(MixedSource {
            bank,
            alphas,
            trainable: false,
            bank_vars: BTreeMap::new(),
            mixed: BTreeMap::new(),
        })
    }

    /// Widened leaves registered so far, by parameter name.
    pub fn bank_vars(&self) -> &BTreeMap<String, Var> {
        &self.bank_vars
    }

    pub fn alphas(&self) -> &AlphaVars {
        &self.alphas
    }
}

impl<F: Float> ParamSource<F> for MixedSource<'_, F> {
    fn param(&mut self, g: &mut Graph<F>, spec: &ParamSpec) -> Result<Var> {
        if let Some(&v) = self.mixed.get(&spec.name) {
            return Ok(v);
        }
        let widened = self.bank.widened(&spec.name)?.clone();
        let wv = if self.trainable { g.leaf(widened) } else { g.constant(widened) };
        self.bank_vars.insert(spec.name.clone(), wv);
        let v = if spec.mixed {
            let alpha = self.alphas.for_layer(&spec.layer)?;
            // At inference K=1 with α=[1] mixes to the basis itself.
            if !self.trainable && self.bank.k() == 1 && g.value(alpha).data()[0] == F::one() {
                g.reshape(wv, &spec.shape)?
            } else {
                g.mix(wv, alpha)?
            }
        } else {
            g.reshape(wv, &spec.shape)?
        };
        self.mixed.insert(spec.name.clone(), v);
        Ok(v)
    }
}
