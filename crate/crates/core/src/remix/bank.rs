use std::collections::BTreeMap;

use rand::Rng;

use super::params::{ExpertParameters, ParamSpec};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// `K` basis parameter sets stored as one widened tensor per parameter,
/// leading axis `K`. Parameters opted out of mixing keep a leading axis of 1
/// and are shared by every expert.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisBank<F: Float> {
    k: usize,
    specs: Vec<ParamSpec>,
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> BasisBank<F> {
    /// Stack `bases` (all matching `specs`) into a bank.
    pub fn from_bases(specs: &[ParamSpec], bases: &[ExpertParameters<F>]) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::invalid("a basis bank needs K >= 1"));
        }
        for b in bases {
            b.check_against(specs)?;
        }
        let mut tensors = BTreeMap::new();
        for s in specs {
            let widened = if s.mixed {
                let slices: Vec<Tensor<F>> = bases
                    .iter()
                    .map(|b| b.get(&s.name).cloned())
                    .collect::<Result<_>>()?;
                Tensor::stack(&slices)?
            } else {
                Tensor::stack(&[bases[0].get(&s.name)?.clone()])?
            };
            tensors.insert(s.name.clone(), widened);
        }
        Ok(BasisBank {
            k: bases.len(),
            specs: specs.to_vec(),
            tensors,
        })
    }

    /// Independent random draw per basis, basis-major, so basis 0 equals a
    /// plain draw from the same generator state.
    pub fn random<R: Rng + ?Sized>(specs: &[ParamSpec], k: usize, rng: &mut R) -> Result<Self> {
        let bases: Vec<_> = (0..k).map(|_| ExpertParameters::random(specs, rng)).collect();
        Self::from_bases(specs, &bases)
    }

    /// `K` exact copies of a pretrained parameter set.
    pub fn replicate(specs: &[ParamSpec], pretrained: &ExpertParameters<F>, k: usize) -> Result<Self> {
        let copies = vec![pretrained.clone(); k];
        Self::from_bases(specs, &copies)
    }

    /// Rebuild from widened tensors (e.g. a checkpoint).
    pub fn from_tensors(specs: &[ParamSpec], k: usize, tensors: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let bank = BasisBank {
            k,
            specs: specs.to_vec(),
            tensors,
        };
        bank.check_invariants()?;
        Ok(bank)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("a basis bank needs K >= 1"));
        }
        if self.tensors.len() != self.specs.len() {
            return Err(Error::invalid("bank tensors do not match the parameter specs"));
        }
        for s in &self.specs {
            let t = self.widened(&s.name)?;
            let lead = if s.mixed { self.k } else { 1 };
            if t.shape().first() != Some(&lead) || t.shape()[1..] != s.shape[..] {
                let mut expect = vec![lead];
                expect.extend_from_slice(&s.shape);
                return Err(Error::ShapeMismatch {
                    op: "basis bank",
                    lhs: t.shape().to_vec(),
                    rhs: expect,
                });
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Result<&ParamSpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn widened(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn widened_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    /// Parameter count of one basis (the plain architecture's `P`).
    pub fn per_basis_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Values actually stored.
    pub fn stored_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Basis `k` as a plain parameter set.
    pub fn basis(&self, k: usize) -> Result<ExpertParameters<F>> {
        if k >= self.k {
            return Err(Error::OutOfRange {
                what: "basis",
                index: k,
                len: self.k,
            });
        }
        let mut out = BTreeMap::new();
        for s in &self.specs {
            let t = self.widened(&s.name)?;
            out.insert(s.name.clone(), t.index_axis0(if s.mixed { k } else { 0 })?);
        }
        Ok(ExpertParameters::new(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remix::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        let mut shared = ParamSpec::new("emb", &[3, 2], "emb", Init::Normal(1.0));
        shared.mixed = false;
        vec![
            ParamSpec::new("w", &[2, 3], "lin", Init::Normal(1.0)),
            ParamSpec::new("b", &[3], "lin", Init::Zeros),
            shared,
        ]
    }

    #[test]
    fn widened_layout_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = BasisBank::<f32>::random(&specs(), 4, &mut rng).unwrap();
        assert_eq!(bank.widened("w").unwrap().shape(), &[4, 2, 3]);
        assert_eq!(bank.widened("emb").unwrap().shape(), &[1, 3, 2]);
        assert_eq!(bank.per_basis_count(), 6 + 3 + 6);
        assert_eq!(bank.stored_values(), 4 * 9 + 6);
    }

    #[test]
    fn basis_zero_matches_plain_draw() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let bank = BasisBank::<f64>::random(&specs(), 3, &mut a).unwrap();
        let plain = ExpertParameters::<f64>::random(&specs(), &mut b);
        assert_eq!(bank.basis(0).unwrap(), plain);
        assert_ne!(bank.basis(1).unwrap(), plain);
    }

    #[test]
    fn replication_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ExpertParameters::<f32>::random(&specs(), &mut rng);
        let bank = BasisBank::replicate(&specs(), &p, 3).unwrap();
        for k in 0..3 {
            assert_eq!(bank.basis(k).unwrap(), p);
        }
        assert!(bank.basis(3).is_err());
    }

    #[test]
    fn rejects_mismatched_tensors() {
        let mut t = BTreeMap::new();
        t.insert("w".to_string(), Tensor::<f32>::zeros(vec![2, 2, 3]));
        t.insert("b".to_string(), Tensor::<f32>::zeros(vec![3, 3]));
        t.insert("emb".to_string(), Tensor::<f32>::zeros(vec![1, 3, 2]));
        assert!(BasisBank::from_tensors(&specs(), 2, t).is_err());
    }
}
