//! Basis banks, interval partitions, mixing tables, and the mixing kernels
//! that turn `K` basis models into `N` timestep experts.

mod bank;
mod mixer;
mod params;
mod partition;

pub use bank::BasisBank;
pub use mixer::{one_hot_prior, softmax_row, Coefficients, MixerKind, MixerScope, MixerTable, GLOBAL_TABLE};
pub use params::{ExpertParameters, Init, ParamSpec};
pub use partition::{sequential_basis, IntervalPartition};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::kernels::mix_into;
use crate::numerics::{Float, Graph, Tensor, Var};

/// `θ = Σ_k α_k·basis_k` for every parameter, with per-layer rows taken
/// from `coeffs`. Shared (unmixed) parameters are copied.
pub fn materialize_with<F: Float>(bank: &BasisBank<F>, coeffs: &Coefficients<F>) -> Result<ExpertParameters<F>> {
    let mut out = BTreeMap::new();
    for spec in bank.specs() {
        let widened = bank.widened(&spec.name)?;
        let t = if spec.mixed {
            let alpha = coeffs.for_layer(&spec.layer)?;
            if alpha.len() != bank.k() {
                return Err(Error::ShapeMismatch {
                    op: "materialize",
                    lhs: vec![alpha.len()],
                    rhs: vec![bank.k()],
                });
            }
            let mut data = vec![F::zero(); spec.numel()];
            mix_into(&mut data, widened.data(), alpha);
            Tensor::new(spec.shape.clone(), data)?
        } else {
            widened.index_axis0(0)?
        };
        out.insert(spec.name.clone(), t);
    }
    Ok(ExpertParameters::new(out))
}

/// Expert from a single coefficient row shared by all layers.
pub fn materialize_expert<F: Float>(bank: &BasisBank<F>, alpha: &[F]) -> Result<ExpertParameters<F>> {
    materialize_with(bank, &Coefficients::Global(alpha.to_vec()))
}

/// All `N` experts, index `i` serving interval `i`.
pub fn precompute_experts<F: Float>(
    bank: &BasisBank<F>,
    mixer: &MixerTable<F>,
    partition: &IntervalPartition,
) -> Result<Vec<ExpertParameters<F>>> {
    if mixer.experts() != partition.experts() || mixer.bases() != bank.k() {
        return Err(Error::invalid(format!(
            "mixer is {}x{}, partition has {} experts and bank has K={}",
            mixer.experts(),
            mixer.bases(),
            partition.experts(),
            bank.k()
        )));
    }
    (0..partition.experts())
        .map(|i| materialize_with(bank, &mixer.coefficients_for_expert(i)?))
        .collect()
}

/// `y = x·W + b` over the last axis of `x`; `w` is `[in, out]`.
pub fn linear<F: Float>(g: &mut Graph<F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let in_dim = *shape.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
    let wshape = g.shape(w).to_vec();
    if wshape.len() != 2 || wshape[0] != in_dim {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: shape,
            rhs: wshape,
        });
    }
    let rows = g.value(x).len() / in_dim.max(1);
    let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, in_dim])? };
    let mut y = g.matmul(flat, w)?;
    if let Some(b) = b {
        y = g.add_row(y, b)?;
    }
    if shape.len() != 2 {
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(wshape[1]);
        y = g.reshape(y, &out_shape)?;
    }
    Ok(y)
}

/// Linear layer whose weight (`[K, in, out]`) and bias (`[K, out]`) are
/// averaged with `alpha` (`[K]`) before the product. Gradients reach `x`,
/// both widened tensors, and `alpha`.
pub fn mixed_linear_forward<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    widened_weight: Var,
    widened_bias: Option<Var>,
    alpha: Var,
) -> Result<Var> {
    let w = g.mix(widened_weight, alpha)?;
    let b = widened_bias.map(|b| g.mix(b, alpha)).transpose()?;
    linear(g, x, w, b)
}

/// Gradient of the loss with respect to each mixing coefficient of one
/// expert: entry `k` is the inner product `⟨∇θ_i, basis_k⟩` summed over
/// every mixed parameter (optionally only those of `layer`).
pub fn analytic_coeff_grad<F: Float>(
    grad_theta: &ExpertParameters<F>,
    bank: &BasisBank<F>,
    layer: Option<&str>,
) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); bank.k()];
    for spec in bank.specs() {
        if !spec.mixed || layer.is_some_and(|l| l != spec.layer) {
            continue;
        }
        let g = grad_theta.get(&spec.name)?;
        if g.shape() != spec.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "analytic_coeff_grad",
                lhs: g.shape().to_vec(),
                rhs: spec.shape.clone(),
            });
        }
        let widened = bank.widened(&spec.name)?;
        let inner = spec.numel();
        for (k, o) in out.iter_mut().enumerate() {
            let slice = &widened.data()[k * inner..(k + 1) * inner];
            *o += slice.iter().zip(g.data()).fold(F::zero(), |acc, (&w, &d)| acc + w * d);
        }
    }
    Ok(out)
}

/// Stored value counts for the bank versus `N` materialized experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeAudit {
    pub bases: usize,
    pub experts: usize,
    pub per_model: usize,
    pub bank_values: usize,
    pub expert_values: usize,
}

pub fn size_audit<F: Float>(bank: &BasisBank<F>, experts: usize) -> SizeAudit {
    SizeAudit {
        bases: bank.k(),
        experts,
        per_model: bank.per_basis_count(),
        bank_values: bank.stored_values(),
        expert_values: experts * bank.per_basis_count(),
    }
}

/// `coefficients.csv`: `expert,t_low,t_high,coef_0..coef_{K-1}` with
/// inclusive timestep bounds. Local mixers export the mean row over layers.
pub fn coefficients_csv<F: Float>(mixer: &MixerTable<F>, partition: &IntervalPartition) -> Result<String> {
    let k = mixer.bases();
    let mut out = String::from("expert,t_low,t_high");
    for c in 0..k {
        write!(out, ",coef_{c}").expect("write to string");
    }
    out.push('\n');
    let keys: Vec<String> = match (mixer.kind(), mixer.scope()) {
        (MixerKind::OneHot, _) | (_, MixerScope::Global) => vec![GLOBAL_TABLE.to_string()],
        (_, MixerScope::Local) => mixer.tables().keys().cloned().collect(),
    };
    for i in 0..mixer.experts() {
        let (lo, hi) = partition.bounds(i)?;
        let mut row = vec![0.0f64; k];
        for key in &keys {
            for (acc, v) in row.iter_mut().zip(mixer.row(key, i)?) {
                *acc += v.as_f64() / keys.len() as f64;
            }
        }
        write!(out, "{i},{lo},{}", hi - 1).expect("write to string");
        for v in row {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_coefficients_csv<F: Float>(path: &Path, mixer: &MixerTable<F>, partition: &IntervalPartition) -> Result<()> {
    std::fs::write(path, coefficients_csv(mixer, partition)?).map_err(|e| Error::io(path, e))
}
