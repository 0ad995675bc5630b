use std::collections::BTreeMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<F: Float> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    /// Per-row update counts for lazily updated tensors; `None` for dense.
    pub row_steps: Option<Vec<u64>>,
}

/// Adaptive-moment optimizer. Tensors registered as lazy are treated as
/// `[rows, ...]`; a row whose gradient is exactly zero is left untouched
/// (parameters and moments) and bias correction uses that row's own update
/// count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F: Float> {
    pub config: AdamConfig,
    step: u64,
    states: BTreeMap<String, MomentState<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn states(&self) -> &BTreeMap<String, MomentState<F>> {
        &self.states
    }

    /// Rebuild from persisted state.
    pub fn restore(config: AdamConfig, step: u64, states: BTreeMap<String, MomentState<F>>) -> Self {
        Adam {
            config,
            step,
            states,
        }
    }

    /// Advance the global step; call once before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<F>, grad: &Tensor<F>, lazy: bool) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        grad.check_finite("adam gradient")?;
        if self.step == 0 {
            return Err(Error::invalid("Adam::update before begin_step"));
        }
        let rows = if lazy { param.shape().first().copied().unwrap_or(1).max(1) } else { 1 };
        let state = self.states.entry(name.to_string()).or_insert_with(|| MomentState {
            m: Tensor::zeros(param.shape().to_vec()),
            v: Tensor::zeros(param.shape().to_vec()),
            row_steps: lazy.then(|| vec![0; rows]),
        });
        if state.m.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam state",
                lhs: state.m.shape().to_vec(),
                rhs: param.shape().to_vec(),
            });
        }

        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (lr, eps, wd) = (F::lit(c.lr), F::lit(c.eps), F::lit(c.weight_decay));
        let width = param.len() / rows;
        let g = grad.data();
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        let p = param.data_mut();

        for r in 0..rows {
            let span = r * width..(r + 1) * width;
            let t = match state.row_steps.as_mut() {
                Some(counts) => {
                    if g[span.clone()].iter().all(|&x| x == F::zero()) {
                        continue;
                    }
                    counts[r] += 1;
                    counts[r]
                }
                None => self.step,
            };
            let bc1 = F::one() - b1.powi(t as i32);
            let bc2 = F::one() - b2.powi(t as i32);
            for j in span {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut next = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
                if wd != F::zero() {
                    next -= lr * wd * p[j];
                }
                if !next.is_finite() {
                    return Err(Error::NonFinite(format!("adam update of {name}")));
                }
                p[j] = next;
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut [&mut Tensor<F>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = F::lit(max_norm / (total + 1e-6));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}
