use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::denoiser::{Arch, Denoiser, MixedSource, ModelConfig};
use crate::diffusion::{DiffusionSchedule, ExpertProvider};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Float, Graph, Tensor};
use crate::remix::{
    materialize_with, precompute_experts, BasisBank, Coefficients, ExpertParameters, IntervalPartition, MixerKind,
    MixerScope, MixerTable,
};

const BANK: &str = "bank/";
const MIXER: &str = "mixer/";
const PARAM: &str = "param/";

/// Trainable state: a single plain parameter set, or a basis bank plus
/// mixing logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights<F: Float> {
    Plain(ExpertParameters<F>),
    Remix { bank: BasisBank<F>, mixer: MixerTable<F> },
}

/// A denoiser with its schedule, interval partition, and weights.
#[derive(Clone, Debug)]
pub struct RemixModel<F: Float> {
    pub arch: Denoiser,
    pub sched: DiffusionSchedule,
    pub partition: IntervalPartition,
    pub weights: Weights<F>,
}

impl<F: Float> RemixModel<F> {
    /// Plain model with the architecture's initializers. `experts` only
    /// sets the partition used for timestep sampling and evaluation.
    pub fn plain<R: Rng + ?Sized>(
        config: ModelConfig,
        sched: DiffusionSchedule,
        experts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let arch = Denoiser::new(config)?;
        let partition = IntervalPartition::new(sched.len(), experts)?;
        let params = ExpertParameters::random(arch.specs(), rng);
        Ok(RemixModel {
            arch,
            sched,
            partition,
            weights: Weights::Plain(params),
        })
    }

    /// Independently initialized bases; logits come from `mixer_rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn remix<R: Rng + ?Sized, M: Rng + ?Sized>(
        config: ModelConfig,
        sched: DiffusionSchedule,
        experts: usize,
        bases: usize,
        kind: MixerKind,
        scope: MixerScope,
        logit_std: f64,
        rng: &mut R,
        mixer_rng: &mut M,
    ) -> Result<Self> {
        let arch = Denoiser::new(config)?;
        let partition = IntervalPartition::new(sched.len(), experts)?;
        let bank = BasisBank::random(arch.specs(), bases, rng)?;
        let mixer = MixerTable::new(kind, scope, experts, bases, &arch.mixed_layers(), logit_std, mixer_rng)?;
        Ok(RemixModel {
            arch,
            sched,
            partition,
            weights: Weights::Remix { bank, mixer },
        })
    }

    /// Bank holding `k` exact copies of a plain model's parameters.
    pub fn init_from_pretrained<M: Rng + ?Sized>(
        pretrained: &RemixModel<F>,
        k: usize,
        experts: usize,
        kind: MixerKind,
        scope: MixerScope,
        logit_std: f64,
        mixer_rng: &mut M,
    ) -> Result<Self> {
        let Weights::Plain(params) = &pretrained.weights else {
            return Err(Error::invalid("replication needs a plain pretrained model"));
        };
        let arch = pretrained.arch.clone();
        let bank = BasisBank::replicate(arch.specs(), params, k)?;
        let partition = IntervalPartition::new(pretrained.sched.len(), experts)?;
        let mixer = MixerTable::new(kind, scope, experts, k, &arch.mixed_layers(), logit_std, mixer_rng)?;
        Ok(RemixModel {
            arch,
            sched: pretrained.sched.clone(),
            partition,
            weights: Weights::Remix { bank, mixer },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }

    pub fn bases(&self) -> usize {
        match &self.weights {
            Weights::Plain(_) => 1,
            Weights::Remix { bank, .. } => bank.k(),
        }
    }

    pub fn experts(&self) -> usize {
        self.partition.experts()
    }

    pub fn mixer(&self) -> Option<&MixerTable<F>> {
        match &self.weights {
            Weights::Plain(_) => None,
            Weights::Remix { mixer, .. } => Some(mixer),
        }
    }

    pub fn coefficients_for_expert(&self, i: usize) -> Result<Coefficients<F>> {
        match &self.weights {
            Weights::Plain(_) => Ok(Coefficients::Global(vec![F::one()])),
            Weights::Remix { mixer, .. } => mixer.coefficients_for_expert(i),
        }
    }

    /// Materialized parameters of expert `i`.
    pub fn expert_params(&self, i: usize) -> Result<ExpertParameters<F>> {
        match &self.weights {
            Weights::Plain(p) => Ok(p.clone()),
            Weights::Remix { bank, mixer } => materialize_with(bank, &mixer.coefficients_for_expert(i)?),
        }
    }

    /// All experts materialized once.
    pub fn precompute(&self) -> Result<PrecomputedExperts<'_, F>> {
        let experts = match &self.weights {
            Weights::Plain(p) => vec![p.clone(); self.experts()],
            Weights::Remix { bank, mixer } => precompute_experts(bank, mixer, &self.partition)?,
        };
        Ok(PrecomputedExperts { model: self, experts })
    }

    /// Provider that mixes the bank inside every forward call.
    pub fn runtime_mixer(&self) -> RuntimeMixer<'_, F> {
        RuntimeMixer { model: self }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        let mut ck = Checkpoint::new();
        write_model_config(&mut ck, self.config());
        ck.set_meta("timesteps", self.sched.len());
        ck.set_meta("beta_start", format!("{:e}", self.sched.beta()[0]));
        ck.set_meta("beta_end", format!("{:e}", self.sched.beta()[self.sched.len() - 1]));
        ck.set_meta("experts", self.experts());
        match &self.weights {
            Weights::Plain(p) => {
                ck.set_meta("weights", "plain");
                for (name, t) in p.iter() {
                    ck.insert(&format!("{PARAM}{name}"), t.clone());
                }
            }
            Weights::Remix { bank, mixer } => {
                ck.set_meta("weights", "remix");
                ck.set_meta("bases", bank.k());
                ck.set_meta("mixer_kind", mixer.kind());
                ck.set_meta("mixer_scope", mixer.scope());
                for (name, t) in bank.iter() {
                    ck.insert(&format!("{BANK}{name}"), t.clone());
                }
                for (key, t) in mixer.tables() {
                    ck.insert(&format!("{MIXER}{key}"), t.clone());
                }
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<F>) -> Result<Self> {
        let config = read_model_config(ck)?;
        let arch = Denoiser::new(config)?;
        let t_steps: usize = parse_meta(ck, "timesteps")?;
        let beta_start: f64 = parse_meta(ck, "beta_start")?;
        let beta_end: f64 = parse_meta(ck, "beta_end")?;
        let sched = DiffusionSchedule::linear(t_steps, beta_start, beta_end)?;
        let experts: usize = parse_meta(ck, "experts")?;
        let partition = IntervalPartition::new(t_steps, experts)?;
        let weights = match ck.meta("weights")? {
            "plain" => {
                let mut map = BTreeMap::new();
                for s in arch.specs() {
                    map.insert(s.name.clone(), ck.tensor(&format!("{PARAM}{}", s.name))?.clone());
                }
                let p = ExpertParameters::new(map);
                p.check_against(arch.specs())?;
                Weights::Plain(p)
            }
            "remix" => {
                let k: usize = parse_meta(ck, "bases")?;
                let kind: MixerKind = parse_meta(ck, "mixer_kind")?;
                let scope: MixerScope = parse_meta(ck, "mixer_scope")?;
                let mut tensors = BTreeMap::new();
                for s in arch.specs() {
                    tensors.insert(s.name.clone(), ck.tensor(&format!("{BANK}{}", s.name))?.clone());
                }
                let bank = BasisBank::from_tensors(arch.specs(), k, tensors)?;
                let tables = ck
                    .tensors
                    .iter()
                    .filter_map(|(n, t)| n.strip_prefix(MIXER).map(|k| (k.to_string(), t.clone())))
                    .collect();
                let mixer = MixerTable::from_tables(kind, scope, experts, k, tables)?;
                Weights::Remix { bank, mixer }
            }
            other => return Err(Error::Checkpoint(format!("unknown weights kind {other:?}"))),
        };
        Ok(RemixModel {
            arch,
            sched,
            partition,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn predict_with(&self, i: usize, x_t: &Tensor<F>, t: usize, labels: Option<&[usize]>) -> Result<Tensor<F>> {
        let ts = vec![t; x_t.shape().first().copied().unwrap_or(0)];
        match &self.weights {
            Weights::Plain(p) => self.arch.predict_plain(p, x_t, &ts, labels),
            Weights::Remix { bank, mixer } => {
                let coeffs = mixer.coefficients_for_expert(i)?;
                let mut g = Graph::new();
                let mut src = MixedSource::constant(bank, &mut g, &coeffs)?;
                let x = g.constant(x_t.clone());
                let y = self.arch.forward(&mut g, &mut src, x, &ts, labels)?;
                Ok(g.value(y).clone())
            }
        }
    }
}

fn parse_meta<F: Float, T: std::str::FromStr>(ck: &Checkpoint<F>, key: &str) -> Result<T> {
    let raw = ck.meta(key)?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key}")))
}

fn write_model_config<F: Float>(ck: &mut Checkpoint<F>, c: &ModelConfig) {
    ck.set_meta("arch", c.arch);
    ck.set_meta("data_dim", c.data_dim);
    ck.set_meta("image_size", c.image_size);
    ck.set_meta("channels", c.channels);
    ck.set_meta("width", c.width);
    ck.set_meta("depth", c.depth);
    ck.set_meta("patch_size", c.patch_size);
    ck.set_meta("num_heads", c.num_heads);
    ck.set_meta("num_classes", c.num_classes);
    ck.set_meta("time_embed_dim", c.time_embed_dim);
    ck.set_meta("mix_embeddings", c.mix_embeddings);
}

fn read_model_config<F: Float>(ck: &Checkpoint<F>) -> Result<ModelConfig> {
    Ok(ModelConfig {
        arch: ck.meta("arch")?.parse::<Arch>()?,
        data_dim: parse_meta(ck, "data_dim")?,
        image_size: parse_meta(ck, "image_size")?,
        channels: parse_meta(ck, "channels")?,
        width: parse_meta(ck, "width")?,
        depth: parse_meta(ck, "depth")?,
        patch_size: parse_meta(ck, "patch_size")?,
        num_heads: parse_meta(ck, "num_heads")?,
        num_classes: parse_meta(ck, "num_classes")?,
        time_embed_dim: parse_meta(ck, "time_embed_dim")?,
        mix_embeddings: parse_meta(ck, "mix_embeddings")?,
    })
}

/// Serves interval `i` from expert `i` materialized ahead of time.
pub struct PrecomputedExperts<'a, F: Float> {
    model: &'a RemixModel<F>,
    experts: Vec<ExpertParameters<F>>,
}

impl<F: Float> PrecomputedExperts<'_, F> {
    pub fn experts(&self) -> &[ExpertParameters<F>] {
        &self.experts
    }
}

impl<F: Float> ExpertProvider<F> for PrecomputedExperts<'_, F> {
    fn predict(&self, x_t: &Tensor<F>, t: usize, labels: Option<&[usize]>) -> Result<Tensor<F>> {
        let i = self.model.partition.interval_of(t)?;
        let ts = vec![t; x_t.shape().first().copied().unwrap_or(0)];
        self.model.arch.predict_plain(&self.experts[i], x_t, &ts, labels)
    }
}

/// Serves interval `i` by mixing the bank with `α_i` on every call.
pub struct RuntimeMixer<'a, F: Float> {
    model: &'a RemixModel<F>,
}

impl<F: Float> ExpertProvider<F> for RuntimeMixer<'_, F> {
    fn predict(&self, x_t: &Tensor<F>, t: usize, labels: Option<&[usize]>) -> Result<Tensor<F>> {
        let i = self.model.partition.interval_of(t)?;
        self.model.predict_with(i, x_t, t, labels)
    }
}
