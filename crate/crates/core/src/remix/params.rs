use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{numel, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// One trainable tensor of the base (un-widened) architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Layer the tensor belongs to; local mixers keep one table per layer.
    pub layer: String,
    pub init: Init,
    /// `false` keeps a single copy shared by all experts.
    pub mixed: bool,
}

impl ParamSpec {
    pub fn new(name: &str, shape: &[usize], layer: &str, init: Init) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            layer: layer.to_string(),
            init,
            mixed: true,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn sample<F: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<F> {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
            Init::Normal(std) => Tensor::randn(self.shape.clone(), std, rng),
            Init::XavierUniform { fan_in, fan_out } => {
                Tensor::uniform(self.shape.clone(), (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
            }
        }
    }
}

/// Plain parameter set of one denoiser (a basis slice or a materialized
/// expert), keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParameters<F: Float> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> ExpertParameters<F> {
    pub fn new(tensors: BTreeMap<String, Tensor<F>>) -> Self {
        ExpertParameters { tensors }
    }

    /// Draw every tensor in declaration order.
    pub fn random<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let tensors = specs.iter().map(|s| (s.name.clone(), s.sample(rng))).collect();
        ExpertParameters { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Every declared parameter present with its declared shape, and nothing else.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != specs.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameters",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn max_rel_diff(&self, other: &Self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, t) in &self.tensors {
            worst = worst.max(t.max_rel_diff(other.get(name)?)?);
        }
        Ok(worst)
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<F>> {
        self.tensors
    }
}
