use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard deviation of each gauss8 component.
pub const GAUSS8_STD: f64 = 0.05;
/// Side of a tinyshapes image.
pub const TINY_SIDE: usize = 8;
pub const TINY_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gauss8,
    Checkerboard,
    TinyShapes,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(DatasetKind::Gauss8),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            "tinyshapes" => Ok(DatasetKind::TinyShapes),
            _ => Err(Error::Config(format!(
                "unknown dataset {s:?} (gauss8|checkerboard|tinyshapes)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Gauss8 => "gauss8",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::TinyShapes => "tinyshapes",
        })
    }
}

impl DatasetKind {
    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            DatasetKind::Gauss8 | DatasetKind::Checkerboard => vec![2],
            DatasetKind::TinyShapes => vec![1, TINY_SIDE, TINY_SIDE],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetKind::Gauss8 => 8,
            DatasetKind::Checkerboard => 0,
            DatasetKind::TinyShapes => TINY_CLASSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub kind: DatasetKind,
    /// `[n, ...sample_shape]`.
    pub samples: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean of gauss8 mode `m`: the unit circle at `m·45°`.
pub fn gauss8_center(m: usize) -> [f64; 2] {
    let a = m as f64 * PI / 4.0;
    [a.cos(), a.sin()]
}

/// Deterministic in `(kind, n, seed)`.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (data, labels) = match kind {
        DatasetKind::Gauss8 => {
            let mut data = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let m = rng.random_range(0..8);
                let c = gauss8_center(m);
                for v in c {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(v + GAUSS8_STD * z);
                }
                labels.push(m);
            }
            (data, Some(labels))
        }
        DatasetKind::Checkerboard => {
            // Four filled cells of a 4x4 board on [-2, 2]², scaled by 1/2.
            let mut data = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let x1: f64 = rng.random_range(-2.0..2.0);
                let x2: f64 = rng.random_range(0.0..1.0) - 2.0 * rng.random_range(0..2) as f64;
                let x2 = x2 + (x1.floor().rem_euclid(2.0));
                data.push(x1 / 2.0);
                data.push(x2 / 2.0);
            }
            (data, None)
        }
        DatasetKind::TinyShapes => {
            let mut data = Vec::with_capacity(n * TINY_SIDE * TINY_SIDE);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let class = rng.random_range(0..TINY_CLASSES);
                data.extend(tiny_shape(class, &mut rng));
                labels.push(class);
            }
            (data, Some(labels))
        }
    };
    let mut shape = vec![n];
    shape.extend(kind.sample_shape());
    Ok(SyntheticDataset {
        kind,
        samples: Tensor::new(shape, data)?,
        labels,
        seed,
    })
}

/// One 8×8 image in `[-1, 1]`: square outline, plus, filled disc, or
/// horizontal bar at a random offset, on a `-1` background.
fn tiny_shape<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Vec<f64> {
    let s = TINY_SIDE as i64;
    let mut img = vec![-1.0; TINY_SIDE * TINY_SIDE];
    let (cy, cx) = (rng.random_range(2..s - 2), rng.random_range(2..s - 2));
    let mut set = |y: i64, x: i64| {
        if (0..s).contains(&y) && (0..s).contains(&x) {
            img[(y * s + x) as usize] = 1.0;
        }
    };
    match class {
        0 => {
            for d in -2..=2 {
                set(cy - 2, cx + d);
                set(cy + 2, cx + d);
                set(cy + d, cx - 2);
                set(cy + d, cx + 2);
            }
        }
        1 => {
            for d in -2..=2 {
                set(cy, cx + d);
                set(cy + d, cx);
            }
        }
        2 => {
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    if dy * dy + dx * dx <= 4 {
                        set(cy + dy, cx + dx);
                    }
                }
            }
        }
        _ => {
            for d in -3..=3 {
                set(cy, cx + d);
                set(cy + 1, cx + d);
            }
        }
    }
    img
}
