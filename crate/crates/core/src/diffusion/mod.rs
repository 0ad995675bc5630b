//! DDPM forward process, ancestral sampling, and classifier-free guidance.

mod output;
mod schedule;

pub use output::{read_samples_csv, read_samples_npy, write_samples_csv, write_samples_npy};
pub use schedule::{DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit `ᾱ`.
pub fn diffuse_with_alpha_bar<F: Float>(x0: &Tensor<F>, alpha_bar: f64, eps: &Tensor<F>) -> Result<Tensor<F>> {
    let (a, b) = (F::lit(alpha_bar.sqrt()), F::lit((1.0 - alpha_bar).sqrt()));
    x0.zip_map(eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// Noised sample at schedule index `t`.
pub fn forward_diffuse<F: Float>(
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    check_index(t, sched)?;
    diffuse_with_alpha_bar(x0, sched.alpha_bar()[t], eps)
}

/// Per-row noising where each batch row has its own timestep. `x0` and
/// `eps` are `[B, ...]` and `ts` has length `B`.
pub fn forward_diffuse_batch<F: Float>(
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    x0.expect_shape(eps.shape(), "forward_diffuse")?;
    let b = x0.shape().first().copied().unwrap_or(0);
    if ts.len() != b {
        return Err(Error::invalid(format!("{} timesteps for batch of {b}", ts.len())));
    }
    let row = if b == 0 { 0 } else { x0.len() / b };
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        check_index(t, sched)?;
        let ab = sched.alpha_bar()[t];
        let (a, s) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
        let span = i * row..(i + 1) * row;
        out.extend(
            x0.data()[span.clone()]
                .iter()
                .zip(&eps.data()[span])
                .map(|(&x, &e)| a * x + s * e),
        );
    }
    Tensor::new(x0.shape().to_vec(), out)
}

fn check_index(t: usize, sched: &DiffusionSchedule) -> Result<()> {
    if t >= sched.len() {
        return Err(Error::OutOfRange {
            what: "timestep",
            index: t,
            len: sched.len(),
        });
    }
    Ok(())
}

pub fn standard_normal<F: Float, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// One ancestral step from schedule index `t` to `t − 1`:
/// `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z` with `σ_t² = β_t`; no noise at
/// `t = 0` or when `stochastic` is off.
pub fn ddpm_step<F: Float, R: Rng + ?Sized>(
    x_t: &Tensor<F>,
    eps_pred: &Tensor<F>,
    t: usize,
    sched: &DiffusionSchedule,
    stochastic: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    check_index(t, sched)?;
    let beta = sched.beta()[t];
    let coef = F::lit(beta / (1.0 - sched.alpha_bar()[t]).sqrt());
    let inv_sqrt_alpha = F::lit(1.0 / sched.alpha()[t].sqrt());
    let mean = x_t.zip_map(eps_pred, "ddpm_step", |x, e| (x - coef * e) * inv_sqrt_alpha)?;
    let out = if stochastic && t > 0 {
        let sigma = F::lit(beta.sqrt());
        let z: Tensor<F> = standard_normal(x_t.shape(), rng);
        mean.zip_map(&z, "ddpm_step", |m, z| m + sigma * z)?
    } else {
        mean
    };
    out.check_finite("ddpm_step")?;
    Ok(out)
}

/// `ε_u + w·(ε_c − ε_u)`
pub fn guided_eps<F: Float>(eps_cond: &Tensor<F>, eps_uncond: &Tensor<F>, w: f64) -> Result<Tensor<F>> {
    let w = F::lit(w);
    eps_cond.zip_map(eps_uncond, "guided_eps", |c, u| u + w * (c - u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub guidance_scale: f64,
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 100,
            guidance_scale: 1.5,
            stochastic: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > t_steps {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={t_steps}, got {}",
                self.n_steps
            )));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::invalid("guidance scale must be >= 0"));
        }
        Ok(())
    }
}

/// Resolves the denoiser serving model timestep `t` and evaluates it.
pub trait ExpertProvider<F: Float> {
    /// `labels = None` asks for the unconditional prediction.
    fn predict(&self, x_t: &Tensor<F>, t: usize, labels: Option<&[usize]>) -> Result<Tensor<F>>;
}

/// Ancestral sampling of `n` samples of `sample_shape`. With `labels` and a
/// guidance scale other than 1 the conditional and unconditional
/// predictions are combined by [`guided_eps`]. `observe` sees the state
/// after every reverse step.
pub fn sample_with<F: Float, P: ExpertProvider<F> + ?Sized>(
    provider: &P,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    sample_shape: &[usize],
    n: usize,
    labels: Option<&[usize]>,
    mut observe: impl FnMut(usize, &Tensor<F>),
) -> Result<Tensor<F>> {
    cfg.validate(sched.len())?;
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} samples", l.len())));
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    if n == 0 {
        return Tensor::new(shape, Vec::new());
    }
    let steps = sched.respace(cfg.n_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Tensor<F> = standard_normal(&shape, &mut rng);
    for j in (0..steps.len()).rev() {
        let t = steps.model_timestep(j);
        let eps = match labels {
            Some(l) if cfg.guidance_scale != 1.0 => {
                let cond = provider.predict(&x, t, Some(l))?;
                let uncond = provider.predict(&x, t, None)?;
                guided_eps(&cond, &uncond, cfg.guidance_scale)?
            }
            Some(l) => provider.predict(&x, t, Some(l))?,
            None => provider.predict(&x, t, None)?,
        };
        x = ddpm_step(&x, &eps, j, &steps, cfg.stochastic, &mut rng)?;
        observe(t, &x);
    }
    Ok(x)
}

pub fn sample<F: Float, P: ExpertProvider<F> + ?Sized>(
    provider: &P,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    sample_shape: &[usize],
    n: usize,
    labels: Option<&[usize]>,
) -> Result<Tensor<F>> {
    sample_with(provider, sched, cfg, sample_shape, n, labels, |_, _| {})
}

/// Bayes-optimal noise predictor for data `N(mean, diag(std²))`:
/// `E[ε | x_t] = √(1−ᾱ)·(x_t − √ᾱ·μ) / (ᾱ·s² + 1 − ᾱ)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sched: DiffusionSchedule,
}

impl<F: Float> ExpertProvider<F> for GaussianOracle {
    fn predict(&self, x_t: &Tensor<F>, t: usize, _labels: Option<&[usize]>) -> Result<Tensor<F>> {
        check_index(t, &self.sched)?;
        let d = self.mean.len();
        let ab = self.sched.alpha_bar()[t];
        let data = x_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (m, s) = (self.mean[i % d], self.std[i % d]);
                let var = ab * s * s + 1.0 - ab;
                F::lit((1.0 - ab).sqrt() * (x.as_f64() - ab.sqrt() * m) / var)
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![data.len()], data).unwrap()
    }

    #[test]
    fn forward_diffuse_limits_and_hand_value() {
        let x0 = t64(&[1.0, 0.0]);
        let eps = t64(&[0.0, 1.0]);
        assert_eq!(diffuse_with_alpha_bar(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(diffuse_with_alpha_bar(&x0, 0.0, &eps).unwrap(), eps);
        let x = diffuse_with_alpha_bar(&x0, 0.25, &eps).unwrap();
        assert!((x.data()[0] - 0.5).abs() < 1e-15);
        assert!((x.data()[1] - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn forward_diffuse_rejects_bad_input() {
        let s = DiffusionSchedule::scaled_linear(10).unwrap();
        assert!(forward_diffuse(&t64(&[1.0]), 0, &t64(&[1.0, 2.0]), &s).is_err());
        assert!(forward_diffuse(&t64(&[1.0]), 10, &t64(&[1.0]), &s).is_err());
    }

    #[test]
    fn single_step_inversion_recovers_x0() {
        let s = DiffusionSchedule::from_betas(vec![0.37]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = t64(&[0.3, -1.2, 2.5]);
        let eps = t64(&[1.1, 0.4, -0.9]);
        let xt = forward_diffuse(&x0, 0, &eps, &s).unwrap();
        let back = ddpm_step(&xt, &eps, 0, &s, false, &mut rng).unwrap();
        assert!(back.max_rel_diff(&x0).unwrap() < 1e-12);
        // t = 0 never adds noise
        let back2 = ddpm_step(&xt, &eps, 0, &s, true, &mut rng).unwrap();
        assert_eq!(back, back2);
    }

    #[test]
    fn guidance_scales() {
        let c = t64(&[2.0]);
        let u = t64(&[0.0]);
        assert_eq!(guided_eps(&c, &u, 0.0).unwrap(), u);
        assert_eq!(guided_eps(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guided_eps(&c, &u, 1.5).unwrap().data(), &[3.0]);
        assert!(guided_eps(&c, &t64(&[0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn sampler_validates_steps_and_handles_empty_batches() {
        let sched = DiffusionSchedule::scaled_linear(20).unwrap();
        let oracle = GaussianOracle {
            mean: vec![0.0],
            std: vec![1.0],
            sched: sched.clone(),
        };
        let cfg = SamplerConfig {
            n_steps: 21,
            ..Default::default()
        };
        assert!(sample::<f32, _>(&oracle, &sched, &cfg, &[1], 4, None).is_err());
        let cfg = SamplerConfig {
            n_steps: 5,
            ..Default::default()
        };
        let empty = sample::<f32, _>(&oracle, &sched, &cfg, &[2], 0, None).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
    }

    #[test]
    fn shifted_gaussian_is_recovered_by_oracle_chain() {
        let sched = DiffusionSchedule::scaled_linear(200).unwrap();
        let oracle = GaussianOracle {
            mean: vec![1.0, -0.5],
            std: vec![0.5, 1.5],
            sched: sched.clone(),
        };
        let cfg = SamplerConfig {
            n_steps: 200,
            seed: 3,
            ..Default::default()
        };
        let x = sample::<f64, _>(&oracle, &sched, &cfg, &[2], 4096, None).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = x.data().iter().skip(d).step_by(2).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / col.len() as f64;
            assert!((m - oracle.mean[d]).abs() < 0.1, "mean {m}");
            assert!((v - oracle.std[d].powi(2)).abs() < 0.1 * oracle.std[d].powi(2).max(1.0), "var {v}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let sched = DiffusionSchedule::scaled_linear(30).unwrap();
        let oracle = GaussianOracle {
            mean: vec![0.0],
            std: vec![1.0],
            sched: sched.clone(),
        };
        let cfg = SamplerConfig {
            n_steps: 30,
            seed: 9,
            ..Default::default()
        };
        let a = sample::<f32, _>(&oracle, &sched, &cfg, &[3], 16, None).unwrap();
        let b = sample::<f32, _>(&oracle, &sched, &cfg, &[3], 16, None).unwrap();
        assert_eq!(a, b);
    }
}
