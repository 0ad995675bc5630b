use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::partition::sequential_basis;
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    /// Fixed sequential assignment of bases to intervals; no learnables.
    OneHot,
    /// Unconstrained real coefficients.
    Raw,
    /// Softmax over learnable logits.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerScope {
    Global,
    Local,
}

impl FromStr for MixerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" => Ok(MixerKind::OneHot),
            "raw" => Ok(MixerKind::Raw),
            "softmax" => Ok(MixerKind::Softmax),
            _ => Err(Error::Config(format!("unknown mixer kind {s:?} (onehot|raw|softmax)"))),
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerKind::OneHot => "onehot",
            MixerKind::Raw => "raw",
            MixerKind::Softmax => "softmax",
        })
    }
}

impl FromStr for MixerScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MixerScope::Global),
            "local" => Ok(MixerScope::Local),
            _ => Err(Error::Config(format!("unknown mixer scope {s:?} (global|local)"))),
        }
    }
}

impl fmt::Display for MixerScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerScope::Global => "global",
            MixerScope::Local => "local",
        })
    }
}

pub const GLOBAL_TABLE: &str = "global";

/// Mixing logits, one `[N, K]` table for the global scope or one per mixed
/// layer for the local scope. One-hot mixers store no tables.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerTable<F: Float> {
    kind: MixerKind,
    scope: MixerScope,
    experts: usize,
    bases: usize,
    tables: BTreeMap<String, Tensor<F>>,
}

/// Coefficient rows for one expert.
#[derive(Clone, Debug, PartialEq)]
pub enum Coefficients<F: Float> {
    Global(Vec<F>),
    Local(BTreeMap<String, Vec<F>>),
}

impl<F: Float> Coefficients<F> {
    pub fn for_layer(&self, layer: &str) -> Result<&[F]> {
        match self {
            Coefficients::Global(a) => Ok(a),
            Coefficients::Local(map) => map
                .get(layer)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::invalid(format!("no coefficients for layer {layer:?}"))),
        }
    }
}

/// `[N, K]` one-hot prior with row `i` selecting basis `⌊i·K/N⌋`.
pub fn one_hot_prior<F: Float>(experts: usize, bases: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); experts * bases];
    for i in 0..experts {
        data[i * bases + sequential_basis(i, experts, bases)] = F::one();
    }
    Tensor::from_parts(vec![experts, bases], data)
}

pub fn softmax_row<F: Float>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<F: Float> MixerTable<F> {
    /// Logits drawn from `N(0, init_std²)`; `layers` names the mixed layers
    /// (used by the local scope).
    pub fn new<R: Rng + ?Sized>(
        kind: MixerKind,
        scope: MixerScope,
        experts: usize,
        bases: usize,
        layers: &[String],
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if experts == 0 || bases == 0 {
            return Err(Error::invalid("mixer needs N >= 1 and K >= 1"));
        }
        let mut tables = BTreeMap::new();
        if kind != MixerKind::OneHot {
            let keys: Vec<String> = match scope {
                MixerScope::Global => vec![GLOBAL_TABLE.to_string()],
                MixerScope::Local => layers.to_vec(),
            };
            for key in keys {
                tables.insert(key, Tensor::randn(vec![experts, bases], init_std, rng));
            }
        }
        Ok(MixerTable {
            kind,
            scope,
            experts,
            bases,
            tables,
        })
    }

    pub fn from_tables(
        kind: MixerKind,
        scope: MixerScope,
        experts: usize,
        bases: usize,
        tables: BTreeMap<String, Tensor<F>>,
    ) -> Result<Self> {
        for (name, t) in &tables {
            if t.shape() != [experts, bases] {
                return Err(Error::Checkpoint(format!(
                    "mixer table {name} has shape {:?}, expected [{experts}, {bases}]",
                    t.shape()
                )));
            }
        }
        if kind == MixerKind::OneHot && !tables.is_empty() {
            return Err(Error::invalid("one-hot mixer stores no logits"));
        }
        if kind != MixerKind::OneHot && scope == MixerScope::Global && !tables.contains_key(GLOBAL_TABLE) {
            return Err(Error::Checkpoint("global mixer is missing its table".into()));
        }
        Ok(MixerTable {
            kind,
            scope,
            experts,
            bases,
            tables,
        })
    }

    pub fn kind(&self) -> MixerKind {
        self.kind
    }

    pub fn scope(&self) -> MixerScope {
        self.scope
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn bases(&self) -> usize {
        self.bases
    }

    pub fn tables(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.tables
    }

    /// Table key serving `layer`.
    pub fn table_key<'a>(&self, layer: &'a str) -> &'a str {
        match self.scope {
            MixerScope::Global => GLOBAL_TABLE,
            MixerScope::Local => layer,
        }
    }

    fn check_expert(&self, i: usize) -> Result<()> {
        if i >= self.experts {
            return Err(Error::OutOfRange {
                what: "expert",
                index: i,
                len: self.experts,
            });
        }
        Ok(())
    }

    /// Coefficient row of expert `i` from table `key`.
    pub fn row(&self, key: &str, i: usize) -> Result<Vec<F>> {
        self.check_expert(i)?;
        match self.kind {
            MixerKind::OneHot => {
                let mut a = vec![F::zero(); self.bases];
                a[sequential_basis(i, self.experts, self.bases)] = F::one();
                Ok(a)
            }
            MixerKind::Raw | MixerKind::Softmax => {
                let t = self
                    .tables
                    .get(key)
                    .ok_or_else(|| Error::invalid(format!("no mixer table {key:?}")))?;
                let logits = &t.data()[i * self.bases..(i + 1) * self.bases];
                Ok(if self.kind == MixerKind::Softmax {
                    softmax_row(logits)
                } else {
                    logits.to_vec()
                })
            }
        }
    }

    /// Global coefficient row `α_i`; for local mixers, the row of the first
    /// table.
    pub fn coefficients(&self, i: usize) -> Result<Vec<F>> {
        let key = match self.scope {
            MixerScope::Global => GLOBAL_TABLE.to_string(),
            MixerScope::Local => self.tables.keys().next().cloned().unwrap_or_default(),
        };
        self.row(&key, i)
    }

    pub fn coefficients_for_expert(&self, i: usize) -> Result<Coefficients<F>> {
        match (self.scope, self.kind) {
            (MixerScope::Global, _) | (_, MixerKind::OneHot) => Ok(Coefficients::Global(self.row(GLOBAL_TABLE, i)?)),
            (MixerScope::Local, _) => {
                let mut map = BTreeMap::new();
                for key in self.tables.keys() {
                    map.insert(key.clone(), self.row(key, i)?);
                }
                Ok(Coefficients::Local(map))
            }
        }
    }

    /// `[N, K]` coefficient matrix of table `key`.
    pub fn coefficient_matrix(&self, key: &str) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(self.experts * self.bases);
        for i in 0..self.experts {
            data.extend(self.row(key, i)?);
        }
        Tensor::new(vec![self.experts, self.bases], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(kind: MixerKind, logits: &[f64], n: usize, k: usize) -> MixerTable<f64> {
        let mut tables = BTreeMap::new();
        if kind != MixerKind::OneHot {
            tables.insert(GLOBAL_TABLE.to_string(), Tensor::from_f64(vec![n, k], logits).unwrap());
        }
        MixerTable::from_tables(kind, MixerScope::Global, n, k, tables).unwrap()
    }

    #[test]
    fn softmax_reference_rows() {
        let m = table(MixerKind::Softmax, &[0.0, 0.0, 0.0, 0.0, 2f64.ln(), 0.0, 0.0, 0.0], 2, 4);
        assert_eq!(m.coefficients(0).unwrap(), vec![0.25; 4]);
        let row = m.coefficients(1).unwrap();
        for (a, b) in row.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(m.coefficients(2).is_err());
    }

    #[test]
    fn raw_rows_pass_through() {
        let m = table(MixerKind::Raw, &[-1.5, 3.0], 1, 2);
        assert_eq!(m.coefficients(0).unwrap(), vec![-1.5, 3.0]);
    }

    #[test]
    fn one_hot_rows() {
        let m = table(MixerKind::OneHot, &[], 20, 4);
        assert_eq!(m.coefficients(7).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!(m.tables().is_empty());
        assert_eq!(m.coefficient_matrix(GLOBAL_TABLE).unwrap(), one_hot_prior(20, 4));
    }

    #[test]
    fn local_scope_keeps_one_table_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec!["a".to_string(), "b".to_string()];
        let m = MixerTable::<f32>::new(MixerKind::Softmax, MixerScope::Local, 5, 3, &layers, 1.0, &mut rng).unwrap();
        assert_eq!(m.tables().len(), 2);
        let Coefficients::Local(rows) = m.coefficients_for_expert(2).unwrap() else {
            panic!("expected local coefficients");
        };
        assert_ne!(rows["a"], rows["b"]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let a = softmax_row(&logits);
            prop_assert!(a.iter().all(|&v| v >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = softmax_row(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
