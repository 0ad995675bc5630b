//! Dense tensors, reverse-mode differentiation, and the optimizer.

mod checkpoint;
mod float;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig, MomentState};
pub use tensor::{numel, Tensor};

/// Sinusoidal features of scalar positions: `[cos(t·f_j), sin(t·f_j)]` with
/// `f_j = 10000^(-j/half)`. Output is `[len(ts), dim]`; odd `dim` gets a
/// trailing zero column.
pub fn sinusoidal_embedding<F: Float>(ts: &[f64], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let start = data.len();
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            data.push(F::lit((t * freq).cos()));
        }
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            data.push(F::lit((t * freq).sin()));
        }
        data.resize(start + dim, F::zero());
    }
    Tensor::from_parts(vec![ts.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_at_zero_is_cos_one_sin_zero() {
        let e = sinusoidal_embedding::<f64>(&[0.0, 3.0], 6);
        assert_eq!(e.shape(), &[2, 6]);
        assert_eq!(&e.data()[..6], &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!((e.data()[6] - 3.0f64.cos()).abs() < 1e-15);
        assert!((e.data()[9] - 3.0f64.sin()).abs() < 1e-15);
    }
}
