use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{RemixModel, Weights};
use super::{
    expert_loss_graph, gamma_schedule, prior_coefficients, prior_regularizer_graph, sample_expert_and_timesteps,
    TrainConfig,
};
use crate::denoiser::{AlphaVars, MixedSource, PlainSource};
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, Adam, AdamConfig, Checkpoint, Float, Graph, MomentState, Tensor, Var};
use crate::remix::{IntervalPartition, MixerKind, MixerScope, MixerTable};

/// Random streams derived from one seed.
pub const STREAM_PARAMS: u64 = 0;
pub const STREAM_MIXER: u64 = 1;
pub const STREAM_BATCHES: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One training example draw: an expert, its timesteps, data rows, noise.
#[derive(Clone, Debug)]
pub struct StepBatch<F: Float> {
    pub expert: usize,
    pub ts: Vec<usize>,
    pub x0: Tensor<F>,
    pub eps: Tensor<F>,
    pub labels: Option<Vec<usize>>,
}

impl<F: Float> StepBatch<F> {
    /// Draw order: expert, timesteps, row indices, noise, label dropout.
    /// `null_class` enables label dropout for conditional models.
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        partition: &IntervalPartition,
        data: &Tensor<F>,
        labels: Option<&[usize]>,
        batch: usize,
        null_class: Option<usize>,
        dropout: f64,
    ) -> Result<Self> {
        let n = data.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::invalid("training data is empty"));
        }
        let (expert, ts) = sample_expert_and_timesteps(rng, partition, batch);
        let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let x0 = gather(data, &rows)?;
        let eps = standard_normal(x0.shape(), rng);
        let labels = match (labels, null_class) {
            (Some(l), Some(null)) => Some(
                rows.iter()
                    .map(|&r| if rng.random::<f64>() < dropout { null } else { l[r] })
                    .collect(),
            ),
            _ => None,
        };
        Ok(StepBatch {
            expert,
            ts,
            x0,
            eps,
            labels,
        })
    }
}

pub(crate) fn gather<F: Float>(data: &Tensor<F>, rows: &[usize]) -> Result<Tensor<F>> {
    let n = data.shape()[0];
    let row = data.len() / n;
    let mut out = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        out.extend_from_slice(&data.data()[r * row..(r + 1) * row]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, out)
}

/// Graph of `w·loss + R` for one batch, with handles to every trainable
/// leaf.
pub struct Objective<F: Float> {
    pub graph: Graph<F>,
    pub total: Var,
    pub loss: Var,
    pub reg: Option<Var>,
    /// Optimizer name, leaf, and whether the tensor is updated lazily.
    pub leaves: Vec<(String, Var, bool)>,
}

/// Build the training objective. `loss_weight = 0` leaves only the prior.
pub fn build_objective<F: Float>(
    model: &RemixModel<F>,
    batch: &StepBatch<F>,
    gamma: f64,
    loss_weight: f64,
) -> Result<Objective<F>> {
    build_objective_in(Graph::new(), model, batch, gamma, loss_weight)
}

/// [`build_objective`] on a caller-prepared graph.
pub fn build_objective_in<F: Float>(
    mut g: Graph<F>,
    model: &RemixModel<F>,
    batch: &StepBatch<F>,
    gamma: f64,
    loss_weight: f64,
) -> Result<Objective<F>> {
    let mut leaves = Vec::new();
    let mut reg = None;
    let labels = batch.labels.as_deref();
    let loss = match &model.weights {
        Weights::Plain(params) => {
            let mut src = PlainSource::trainable(params);
            let l = expert_loss_graph(&mut g, &model.arch, &mut src, &batch.x0, &batch.ts, &batch.eps, labels, &model.sched)?;
            for (name, &v) in src.vars() {
                leaves.push((format!("bank/{name}"), v, false));
            }
            l
        }
        Weights::Remix { bank, mixer } => {
            let (alphas, logit_leaves, r) = coefficient_nodes(&mut g, mixer, batch.expert, gamma)?;
            reg = r;
            let mut src = MixedSource::trainable(bank, alphas);
            let l = expert_loss_graph(&mut g, &model.arch, &mut src, &batch.x0, &batch.ts, &batch.eps, labels, &model.sched)?;
            for (name, &v) in src.bank_vars() {
                leaves.push((format!("bank/{name}"), v, false));
            }
            for (key, v) in logit_leaves {
                leaves.push((format!("mixer/{key}"), v, true));
            }
            l
        }
    };
    let mut total = if loss_weight == 1.0 { loss } else { g.scale(loss, F::lit(loss_weight))? };
    if let Some(r) = reg {
        total = g.add(total, r)?;
    }
    Ok(Objective {
        graph: g,
        total,
        loss,
        reg,
        leaves,
    })
}

type CoeffNodes = (AlphaVars, Vec<(String, Var)>, Option<Var>);

/// Logit leaves, the coefficient nodes of expert `i`, and the prior term
/// (softmax kind with `γ > 0`). Each table is softmaxed once in full; row
/// `i` feeds the network and the whole table feeds the prior, which is
/// averaged over tables for the local scope.
fn coefficient_nodes<F: Float>(g: &mut Graph<F>, mixer: &MixerTable<F>, i: usize, gamma: f64) -> Result<CoeffNodes> {
    let k = mixer.bases();
    if mixer.kind() == MixerKind::OneHot {
        let row = mixer.row(crate::remix::GLOBAL_TABLE, i)?;
        let a = g.constant(Tensor::new(vec![k], row)?);
        return Ok((AlphaVars::Global(a), Vec::new(), None));
    }
    let prior = prior_coefficients::<F>(mixer.experts(), k);
    let tables = mixer.tables().len();
    let mut rows = BTreeMap::new();
    let mut leaves = Vec::new();
    let mut reg: Option<Var> = None;
    for (key, logits) in mixer.tables() {
        let leaf = g.leaf(logits.clone());
        leaves.push((key.clone(), leaf));
        let table = if mixer.kind() == MixerKind::Softmax { g.softmax(leaf)? } else { leaf };
        let row = g.slice(table, 0, i, i + 1)?;
        rows.insert(key.clone(), g.reshape(row, &[k])?);
        if mixer.kind() == MixerKind::Softmax && gamma > 0.0 {
            let r = prior_regularizer_graph(g, table, &prior, gamma / tables as f64)?;
            reg = Some(match reg {
                Some(acc) => g.add(acc, r)?,
                None => r,
            });
        }
    }
    let alphas = match mixer.scope() {
        MixerScope::Global => AlphaVars::Global(
            rows.remove(crate::remix::GLOBAL_TABLE)
                .ok_or_else(|| Error::invalid("global mixer has no table"))?,
        ),
        MixerScope::Local => AlphaVars::Local(rows),
    };
    Ok((alphas, leaves, reg))
}

/// Per-step log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub expert: usize,
    pub loss: f64,
    pub reg: f64,
    pub gamma: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "step,expert,loss,reg,gamma,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.step, self.expert, self.loss, self.reg, self.gamma, self.lr
        )
    }
}

/// Training loop state: model, optimizer, batch stream, data.
#[derive(Clone, Debug)]
pub struct Trainer<F: Float> {
    pub config: TrainConfig,
    pub model: RemixModel<F>,
    /// Weight of the denoising term; 1 for normal training.
    pub loss_weight: f64,
    opt: Adam<F>,
    rng: ChaCha8Rng,
    step: usize,
    data: Tensor<F>,
    labels: Option<Vec<usize>>,
}

impl<F: Float> Trainer<F> {
    /// `data` is `[n, ...sample_shape]`; `labels` (one per row) are used
    /// only by conditional models.
    pub fn new(config: TrainConfig, model: RemixModel<F>, data: Tensor<F>, labels: Option<Vec<usize>>) -> Result<Self> {
        config.validate(model.sched.len())?;
        let mut expect = vec![data.shape().first().copied().unwrap_or(0)];
        expect.extend(model.config().sample_shape());
        if data.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "training data",
                lhs: data.shape().to_vec(),
                rhs: expect,
            });
        }
        if let Some(l) = &labels {
            if l.len() != expect[0] {
                return Err(Error::invalid(format!("{} labels for {} rows", l.len(), expect[0])));
            }
            if let Some(null) = model.config().null_class() {
                if let Some(&bad) = l.iter().find(|&&v| v >= null) {
                    return Err(Error::OutOfRange {
                        what: "class label",
                        index: bad,
                        len: null,
                    });
                }
            }
        }
        Ok(Trainer {
            opt: Adam::new(config.adam()),
            rng: stream_rng(config.seed, STREAM_BATCHES),
            step: 0,
            loss_weight: 1.0,
            config,
            model,
            data,
            labels,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &Adam<F> {
        &self.opt
    }

    pub fn gamma(&self) -> f64 {
        gamma_schedule(self.step, self.config.anneal_steps, self.config.gamma0)
    }

    pub fn draw_batch(&mut self) -> Result<StepBatch<F>> {
        StepBatch::draw(
            &mut self.rng,
            &self.model.partition,
            &self.data,
            self.labels.as_deref(),
            self.config.batch_size,
            self.model.config().null_class(),
            self.config.label_dropout,
        )
    }

    /// One hierarchical draw, forward/backward, clip, and optimizer step.
    pub fn train_step(&mut self) -> Result<Metrics> {
        let batch = self.draw_batch()?;
        self.train_on(&batch).map(|(m, _)| m)
    }

    /// Like [`Trainer::train_step`] on a given batch; also returns the
    /// clipped gradients keyed by optimizer name.
    pub fn train_on(&mut self, batch: &StepBatch<F>) -> Result<(Metrics, BTreeMap<String, Tensor<F>>)> {
        for &t in &batch.ts {
            let owner = self.model.partition.interval_of(t)?;
            if owner != batch.expert {
                return Err(Error::invalid(format!(
                    "timestep {t} drawn for expert {} belongs to {owner}",
                    batch.expert
                )));
            }
        }
        let gamma = self.gamma();
        let obj = build_objective(&self.model, batch, gamma, self.loss_weight)?;
        let loss = obj.graph.value(obj.loss).item().as_f64();
        let reg = obj.reg.map(|r| obj.graph.value(r).item().as_f64()).unwrap_or(0.0);
        if !loss.is_finite() || !reg.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} / reg {reg} at step {}", self.step)));
        }
        let mut grads = obj.graph.backward(obj.total)?;
        let mut named: Vec<(String, Tensor<F>, bool)> = Vec::with_capacity(obj.leaves.len());
        for (name, v, lazy) in &obj.leaves {
            let gr = grads
                .take(*v)
                .ok_or_else(|| Error::invalid(format!("no gradient reached {name}")))?;
            named.push((name.clone(), gr, *lazy));
        }
        let grad_norm = {
            let mut refs: Vec<&mut Tensor<F>> = named.iter_mut().map(|(_, g, _)| g).collect();
            clip_global_norm(&mut refs, self.config.grad_clip)
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", self.step)));
        }
        self.opt.begin_step();
        for (name, grad, lazy) in &named {
            let param = param_mut(&mut self.model, name)?;
            self.opt.update(name, param, grad, *lazy)?;
        }
        let metrics = Metrics {
            step: self.step,
            expert: batch.expert,
            loss,
            reg,
            gamma,
            lr: self.config.learning_rate,
            grad_norm,
        };
        self.step += 1;
        Ok((metrics, named.into_iter().map(|(n, g, _)| (n, g)).collect()))
    }

    /// Run `steps` training steps, reporting each row to `on_step`.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&Metrics)) -> Result<()> {
        for _ in 0..steps {
            let m = self.train_step()?;
            on_step(&m);
        }
        Ok(())
    }

    /// Model checkpoint plus optimizer moments and step counters.
    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        let mut ck = self.model.to_checkpoint();
        ck.set_meta("train_step", self.step);
        ck.set_meta("opt_step", self.opt.step_count());
        for (name, st) in self.opt.states() {
            ck.insert(&format!("opt/m/{name}"), st.m.clone());
            ck.insert(&format!("opt/v/{name}"), st.v.clone());
            if let Some(rows) = &st.row_steps {
                let counts: Vec<f64> = rows.iter().map(|&c| c as f64).collect();
                if let Ok(t) = Tensor::from_f64(vec![counts.len()], &counts) {
                    ck.insert(&format!("opt/rows/{name}"), t);
                }
            }
        }
        ck
    }

    /// Restore optimizer state saved by [`Trainer::to_checkpoint`].
    pub fn restore_optimizer(&mut self, ck: &Checkpoint<F>) -> Result<()> {
        let parse = |key: &str| -> Result<u64> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {key}")))
        };
        let mut states = BTreeMap::new();
        for (name, m) in &ck.tensors {
            let Some(pname) = name.strip_prefix("opt/m/") else { continue };
            let v = ck.tensor(&format!("opt/v/{pname}"))?.clone();
            let row_steps = ck
                .tensors
                .get(&format!("opt/rows/{pname}"))
                .map(|t| t.data().iter().map(|c| c.as_f64() as u64).collect());
            states.insert(
                pname.to_string(),
                MomentState {
                    m: m.clone(),
                    v,
                    row_steps,
                },
            );
        }
        self.opt = Adam::restore(self.config.adam(), parse("opt_step")?, states);
        self.step = parse("train_step")? as usize;
        Ok(())
    }
}

fn param_mut<'a, F: Float>(model: &'a mut RemixModel<F>, name: &str) -> Result<&'a mut Tensor<F>> {
    match (&mut model.weights, name.split_once('/')) {
        (Weights::Plain(p), Some(("bank", n))) => p.get_mut(n),
        (Weights::Remix { bank, .. }, Some(("bank", n))) => bank.widened_mut(n),
        (Weights::Remix { mixer, .. }, Some(("mixer", key))) => mixer
            .tables_mut()
            .get_mut(key)
            .ok_or_else(|| Error::invalid(format!("no mixer table {key:?}"))),
        _ => Err(Error::invalid(format!("unknown trainable {name:?}"))),
    }
}

/// Optimize only the prior term `R` with fixed `γ`; returns `R` before
/// each update.
pub fn regularizer_only<F: Float>(
    mixer: &mut MixerTable<F>,
    gamma: f64,
    steps: usize,
    adam: AdamConfig,
) -> Result<Vec<f64>> {
    if mixer.kind() != MixerKind::Softmax {
        return Err(Error::invalid("the prior applies to softmax mixers"));
    }
    let prior = prior_coefficients::<F>(mixer.experts(), mixer.bases());
    let mut opt = Adam::new(adam);
    let mut trace = Vec::with_capacity(steps);
    let tables = mixer.tables().len() as f64;
    for _ in 0..steps {
        let mut g = Graph::new();
        let mut leaves = Vec::new();
        let mut total: Option<Var> = None;
        for (key, logits) in mixer.tables() {
            let leaf = g.leaf(logits.clone());
            let sm = g.softmax(leaf)?;
            let r = prior_regularizer_graph(&mut g, sm, &prior, gamma / tables)?;
            total = Some(match total {
                Some(acc) => g.add(acc, r)?,
                None => r,
            });
            leaves.push((key.clone(), leaf));
        }
        let total = total.ok_or_else(|| Error::invalid("mixer has no tables"))?;
        trace.push(g.value(total).item().as_f64());
        let mut grads = g.backward(total)?;
        opt.begin_step();
        for (key, leaf) in leaves {
            let gr = grads.take(leaf).unwrap_or_else(|| Tensor::zeros(g.shape(leaf).to_vec()));
            let table = mixer.tables_mut().get_mut(&key).expect("table exists");
            opt.update(&key, table, &gr, true)?;
        }
    }
    Ok(trace)
}
