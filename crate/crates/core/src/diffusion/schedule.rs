use crate::error::{Error, Result};

/// Forward-process variances for a `T`-step chain, kept in `f64`.
///
/// `timesteps[j]` is the model timestep that schedule index `j` stands for;
/// it is the identity for a base schedule and a strided subsequence after
/// [`DiffusionSchedule::respace`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl DiffusionSchedule {
    /// Linearly spaced `β` from `beta_start` to `beta_end` over `t_steps`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if t_steps == 1 {
            vec![beta_start]
        } else {
            (0..t_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// The 1000-step linear schedule rescaled to `t_steps` so the total noise
    /// injected stays comparable (`β` bounds multiplied by `1000 / T`).
    pub fn scaled_linear(t_steps: usize) -> Result<Self> {
        let scale = DEFAULT_T as f64 / t_steps.max(1) as f64;
        let end = (DEFAULT_BETA_END * scale).min(0.999);
        let start = (DEFAULT_BETA_START * scale).min(end);
        Self::linear(t_steps, start, end)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let timesteps = (0..beta.len()).collect();
        Ok(DiffusionSchedule {
            beta,
            alpha,
            alpha_bar,
            timesteps,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Model timestep for schedule index `j`.
    pub fn model_timestep(&self, j: usize) -> usize {
        self.timesteps[j]
    }

    /// Evenly strided timesteps `round(j·(T−1)/(n−1))`; `n = 1` keeps only
    /// the last step.
    pub fn strided_timesteps(t_steps: usize, n_steps: usize) -> Result<Vec<usize>> {
        if n_steps == 0 || n_steps > t_steps {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={t_steps}, got {n_steps}"
            )));
        }
        if n_steps == 1 {
            return Ok(vec![t_steps - 1]);
        }
        let stride = (t_steps - 1) as f64 / (n_steps - 1) as f64;
        Ok((0..n_steps).map(|j| (j as f64 * stride).round() as usize).collect())
    }

    /// Schedule over a strided subsequence of this chain. Betas are rebuilt
    /// from the retained `ᾱ` values so the marginals at kept steps match.
    pub fn respace(&self, n_steps: usize) -> Result<Self> {
        let keep = Self::strided_timesteps(self.len(), n_steps)?;
        if keep.len() == self.len() {
            return Ok(self.clone());
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(keep.len());
        for &t in &keep {
            let ab = self.alpha_bar[t];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut out = Self::from_betas(betas)?;
        out.timesteps = keep.iter().map(|&t| self.timesteps[t]).collect();
        Ok(out)
    }

    /// `ᾱ` strictly decreasing and equal to the running product of `α`.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prod = 1.0f64;
        for t in 0..self.len() {
            prod *= self.alpha[t];
            let rel = (self.alpha_bar[t] - prod).abs() / prod;
            if rel > 1e-12 {
                return Err(Error::invalid(format!("alpha_bar[{t}] deviates from product by {rel}")));
            }
            if t > 0 && self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::invalid(format!("alpha_bar not decreasing at {t}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_step_products() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        // direct products: 0.9, 0.9*0.8, 0.9*0.8*0.7, 0.9*0.8*0.7*0.6
        let expect = [0.9, 0.72, 0.504, 0.3024];
        for (a, b) in s.alpha_bar().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        s.check_invariants().unwrap();
    }

    #[test]
    fn linear_endpoints() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.4];
        for (a, b) in s.beta().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(), &[1.0 - 0.3]);
    }

    #[test]
    fn default_thousand_step_chain_reaches_noise() {
        let s = DiffusionSchedule::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        s.check_invariants().unwrap();
        // independent product oracle
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar()[999] - prod).abs() / prod < 1e-12);
        assert!(prod < 0.01);
    }

    #[test]
    fn scaled_desk_schedule_reaches_noise() {
        let s = DiffusionSchedule::scaled_linear(100).unwrap();
        s.check_invariants().unwrap();
        assert!(s.alpha_bar()[99] < 1e-3);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(DiffusionSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn respacing_keeps_marginals() {
        let s = DiffusionSchedule::scaled_linear(100).unwrap();
        let r = s.respace(10).unwrap();
        assert_eq!(r.len(), 10);
        assert_eq!(r.timesteps()[0], 0);
        assert_eq!(r.timesteps()[9], 99);
        for (j, &t) in r.timesteps().iter().enumerate() {
            assert!((r.alpha_bar()[j] - s.alpha_bar()[t]).abs() < 1e-12);
        }
        assert!(s.respace(101).is_err());
        assert!(s.respace(0).is_err());
        assert_eq!(s.respace(100).unwrap(), s);
    }
}
