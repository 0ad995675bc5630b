use crate::error::{Error, Result};

/// `N` equal half-open timestep intervals `[i·w, (i+1)·w)` with
/// `w = ⌊T/N⌋`; the last interval also absorbs the remainder up to `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntervalPartition {
    t_steps: usize,
    experts: usize,
    width: usize,
}

impl IntervalPartition {
    pub fn new(t_steps: usize, experts: usize) -> Result<Self> {
        if experts == 0 || experts > t_steps {
            return Err(Error::invalid(format!(
                "expert count must be in 1..={t_steps}, got {experts}"
            )));
        }
        Ok(IntervalPartition {
            t_steps,
            experts,
            width: t_steps / experts,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.t_steps
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn interval_of(&self, t: usize) -> Result<usize> {
        if t >= self.t_steps {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                len: self.t_steps,
            });
        }
        Ok((t / self.width).min(self.experts - 1))
    }

    /// Half-open `[lo, hi)` bounds of interval `i`.
    pub fn bounds(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.experts {
            return Err(Error::OutOfRange {
                what: "expert",
                index: i,
                len: self.experts,
            });
        }
        let lo = i * self.width;
        let hi = if i + 1 == self.experts { self.t_steps } else { lo + self.width };
        Ok((lo, hi))
    }
}

/// Basis assigned to expert `i` by the sequential one-hot rule
/// `⌊i·K/N⌋`.
pub fn sequential_basis(i: usize, experts: usize, bases: usize) -> usize {
    i * bases / experts
}
