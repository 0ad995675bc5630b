use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// Projections used by default for sliced Wasserstein.
pub const DEFAULT_PROJECTIONS: usize = 128;

/// Wasserstein-1 between two 1D empirical distributions given sorted
/// values: `∫₀¹ |F_a⁻¹(u) − F_b⁻¹(u)| du`, exact for unequal sizes.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Mean 1D Wasserstein-1 over `n_proj` random unit directions. Inputs are
/// `[n, ...]` and flattened per row.
pub fn sliced_wasserstein<F: Float>(a: &Tensor<F>, b: &Tensor<F>, n_proj: usize, seed: u64) -> Result<f64> {
    let (na, nb) = (a.shape().first().copied().unwrap_or(0), b.shape().first().copied().unwrap_or(0));
    if na == 0 || nb == 0 {
        return Err(Error::invalid("sliced Wasserstein of an empty sample set"));
    }
    let (da, db) = (a.len() / na, b.len() / nb);
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "sliced_wasserstein",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if n_proj == 0 {
        return Err(Error::invalid("n_proj must be >= 1"));
    }
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let dir = random_unit(da, &mut rng);
        let pa = project_sorted(&av, &dir);
        let pb = project_sorted(&bv, &dir);
        total += wasserstein_1d_sorted(&pa, &pb);
    }
    Ok(total / n_proj as f64)
}

pub fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn project_sorted(data: &[f64], dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = data
        .chunks(dir.len())
        .map(|row| row.iter().zip(dir).map(|(x, u)| x * u).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Cosine similarity of two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
