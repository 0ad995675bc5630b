//! Hierarchical expert/timestep sampling, the per-interval denoising loss,
//! the annealed one-hot prior, and the training loop.

mod model;
mod trainer;

pub use model::{PrecomputedExperts, RemixModel, RuntimeMixer, Weights};
pub use trainer::{build_objective, build_objective_in, regularizer_only, stream_rng, Metrics, Objective, StepBatch, Trainer};
pub(crate) use trainer::gather;
pub use trainer::{STREAM_BATCHES, STREAM_MIXER, STREAM_PARAMS};

use rand::Rng;

use crate::denoiser::{Denoiser, ParamSource};
use crate::diffusion::{forward_diffuse_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Float, Graph, Tensor, Var};
use crate::remix::{one_hot_prior, IntervalPartition, MixerKind, MixerScope};

/// Floor applied inside the prior's logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub gamma0: f64,
    pub anneal_steps: usize,
    pub mixer_kind: MixerKind,
    pub mixer_scope: MixerScope,
    /// Expert count `N`.
    pub experts: usize,
    /// Basis count `K`.
    pub bases: usize,
    pub grad_clip: f64,
    pub label_dropout: f64,
    pub logit_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 20_000,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            gamma0: 0.1,
            anneal_steps: 10_000,
            mixer_kind: MixerKind::Softmax,
            mixer_scope: MixerScope::Global,
            experts: 20,
            bases: 4,
            grad_clip: 1.0,
            label_dropout: 0.1,
            logit_init_std: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.experts == 0 || self.experts > t_steps {
            return bad(format!("experts must be in 1..={t_steps}, got {}", self.experts));
        }
        if self.bases == 0 {
            return bad("bases must be >= 1".into());
        }
        if !(self.gamma0 >= 0.0) {
            return bad("gamma0 must be >= 0".into());
        }
        if self.anneal_steps > self.total_steps {
            return bad(format!(
                "anneal_steps {} exceeds total_steps {}",
                self.anneal_steps, self.total_steps
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return bad("label_dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// `γ0·max(0, 1 − step/anneal_steps)`; zero throughout when
/// `anneal_steps` is 0.
pub fn gamma_schedule(step: usize, anneal_steps: usize, gamma0: f64) -> f64 {
    if anneal_steps == 0 {
        return 0.0;
    }
    gamma0 * (1.0 - step as f64 / anneal_steps as f64).max(0.0)
}

/// One-hot prior `α*` (`[N, K]`).
pub fn prior_coefficients<F: Float>(experts: usize, bases: usize) -> Tensor<F> {
    one_hot_prior(experts, bases)
}

/// Expert `i` uniform on `[0, N)`, then `t` uniform on its interval.
pub fn sample_expert_and_timestep<R: Rng + ?Sized>(rng: &mut R, partition: &IntervalPartition) -> (usize, usize) {
    let (i, ts) = sample_expert_and_timesteps(rng, partition, 1);
    (i, ts[0])
}

/// One expert and `batch` timesteps drawn independently from its interval.
pub fn sample_expert_and_timesteps<R: Rng + ?Sized>(
    rng: &mut R,
    partition: &IntervalPartition,
    batch: usize,
) -> (usize, Vec<usize>) {
    let i = rng.random_range(0..partition.experts());
    let (lo, hi) = partition.bounds(i).expect("expert index in range");
    let ts = (0..batch).map(|_| rng.random_range(lo..hi)).collect();
    (i, ts)
}

/// `Σ_b ‖ε_b − ε̂_b‖² / B` as a graph node.
#[allow(clippy::too_many_arguments)]
pub fn expert_loss_graph<F: Float>(
    g: &mut Graph<F>,
    arch: &Denoiser,
    src: &mut dyn ParamSource<F>,
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    labels: Option<&[usize]>,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let xt = forward_diffuse_batch(x0, ts, eps, sched)?;
    let x = g.constant(xt);
    let pred = arch.forward(g, src, x, ts, labels)?;
    let target = g.constant(eps.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, F::lit(1.0 / ts.len().max(1) as f64))
}

/// Denoising loss of expert `i` under `alpha`. Every timestep must lie in
/// interval `i`.
#[allow(clippy::too_many_arguments)]
pub fn expert_loss<F: Float>(
    model: &RemixModel<F>,
    i: usize,
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    labels: Option<&[usize]>,
) -> Result<f64> {
    for &t in ts {
        let owner = model.partition.interval_of(t)?;
        if owner != i {
            return Err(Error::invalid(format!("timestep {t} belongs to expert {owner}, not {i}")));
        }
    }
    let params = model.expert_params(i)?;
    let mut g = Graph::new();
    let mut src = crate::denoiser::PlainSource::frozen(&params);
    let l = expert_loss_graph(&mut g, &model.arch, &mut src, x0, ts, eps, labels, &model.sched)?;
    Ok(g.value(l).item().as_f64())
}

/// `−γ·Σ α*·ln(max(α, 1e-12))` over the full `[N, K]` table.
pub fn prior_regularizer<F: Float>(alpha: &Tensor<F>, prior: &Tensor<F>, gamma: f64) -> Result<f64> {
    alpha.expect_shape(prior.shape(), "prior_regularizer")?;
    let ce: f64 = alpha
        .data()
        .iter()
        .zip(prior.data())
        .map(|(&a, &p)| p.as_f64() * a.as_f64().max(LOG_FLOOR).ln())
        .sum();
    Ok(-gamma * ce)
}

/// Graph form of [`prior_regularizer`] for a softmaxed table node.
pub fn prior_regularizer_graph<F: Float>(g: &mut Graph<F>, alpha: Var, prior: &Tensor<F>, gamma: f64) -> Result<Var> {
    let lg = g.ln_floor(alpha, LOG_FLOOR)?;
    let p = g.constant(prior.clone());
    let prod = g.mul(p, lg)?;
    let s = g.sum(prod)?;
    g.scale(s, F::lit(-gamma))
}
