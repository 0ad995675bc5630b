//! Central finite-difference checks of every differentiable graph op and of
//! the full training objective with respect to mixing logits and bank
//! entries. Everything runs in 64-bit.

use std::fmt::Write as _;

use rand::Rng;

use crate::config::RunConfig;
use crate::denoiser::ModelConfig;
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::remix::{sequential_basis, MixerKind, MixerScope};
use crate::training::{
    build_objective_in, sample_expert_and_timesteps, stream_rng, RemixModel, StepBatch, Weights, STREAM_BATCHES,
    STREAM_MIXER, STREAM_PARAMS,
};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst relative error, or the worst leaked magnitude for isolation.
    pub max_err: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            writeln!(
                s,
                "{} {:<28} max_err={:.3e} entries={}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_err,
                c.entries
            )
            .expect("write to String");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub timesteps: usize,
    pub experts: usize,
    pub bases: usize,
    pub kind: MixerKind,
    pub scope: MixerScope,
    pub batch: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Logit spread; large enough that softmax rows are far from uniform.
    pub logit_std: f64,
    /// Bank entries probed by finite differences.
    pub bank_probes: usize,
    /// Negative control: mixing backward reports a wrong coefficient gradient.
    pub corrupt_backward: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                width: 32,
                depth: 2,
                time_embed_dim: 16,
                ..ModelConfig::mlp()
            },
            timesteps: 100,
            experts: 5,
            bases: 3,
            kind: MixerKind::Softmax,
            scope: MixerScope::Global,
            batch: 8,
            seed: 0,
            gamma: 0.1,
            logit_std: 0.5,
            bank_probes: 24,
            corrupt_backward: false,
        }
    }
}

impl GradcheckConfig {
    /// Architecture, mixer and seed from a run config; batch stays at 8.
    pub fn from_run(run: &RunConfig) -> Self {
        GradcheckConfig {
            model: run.model.clone(),
            timesteps: run.timesteps,
            experts: run.train.experts,
            bases: run.train.bases,
            kind: run.train.mixer_kind,
            scope: run.train.mixer_scope,
            seed: run.train.seed,
            gamma: run.train.gamma0,
            ..GradcheckConfig::default()
        }
    }
}

/// Fixed output weights so the scalar loss depends on every output entry.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|j| (1.3 * j as f64 + 0.7).sin() + 0.25).collect()
}

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = Tensor::new(g.shape(y).to_vec(), probe_weights(g.value(y).len()))?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

/// Checks `∂ Σ w⊙op(inputs) / ∂ inputs` against central differences.
pub fn check_op(
    name: &str,
    inputs: &[Tensor<f64>],
    corrupt: bool,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<Check> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let l = weighted_sum(&mut g, y)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    g.set_corrupt_mix_backward(corrupt);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let l = weighted_sum(&mut g, y)?;
    let grads = g.backward(l)?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut vals = inputs.to_vec();
    for (a, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[a].len()]);
        for j in 0..inputs[a].len() {
            let x = inputs[a].data()[j];
            vals[a].data_mut()[j] = x + FD_STEP;
            let up = eval(&vals)?;
            vals[a].data_mut()[j] = x - FD_STEP;
            let down = eval(&vals)?;
            vals[a].data_mut()[j] = x;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * FD_STEP)));
            entries += 1;
        }
    }
    Ok(Check {
        name: format!("op/{name}"),
        max_err: worst,
        entries,
        passed: worst <= REL_TOL,
    })
}

/// One check per differentiable op on small random inputs.
pub fn op_suite(seed: u64, corrupt: bool) -> Result<Vec<Check>> {
    let mut rng = stream_rng(seed, STREAM_PARAMS);
    let mut r = |shape: &[usize]| -> Tensor<f64> { Tensor::randn(shape.to_vec(), 1.0, &mut rng) };
    let (a23, b23, a34, row3) = (r(&[2, 3]), r(&[2, 3]), r(&[3, 4]), r(&[3]));
    let (a234, b243, a14) = (r(&[2, 3, 4]), r(&[2, 4, 3]), r(&[1, 4]));
    let (bank, alpha) = (r(&[3, 2, 2]), r(&[3]));
    let (table, x5) = (r(&[4, 3]), r(&[2, 5]));
    let positive = a23.map(|v| v.abs() + 0.5);
    let mut out = Vec::new();
    out.push(check_op("add", &[a23.clone(), b23.clone()], corrupt, |g, v| g.add(v[0], v[1]))?);
    out.push(check_op("sub", &[a23.clone(), b23.clone()], corrupt, |g, v| g.sub(v[0], v[1]))?);
    out.push(check_op("mul", &[a23.clone(), b23.clone()], corrupt, |g, v| g.mul(v[0], v[1]))?);
    out.push(check_op("scale", std::slice::from_ref(&a23), corrupt, |g, v| g.scale(v[0], -1.7))?);
    out.push(check_op("offset", std::slice::from_ref(&a23), corrupt, |g, v| {
        let o = g.offset(v[0], 0.3)?;
        g.mul(o, o)
    })?);
    out.push(check_op("add_row", &[a23.clone(), row3], corrupt, |g, v| g.add_row(v[0], v[1]))?);
    out.push(check_op("broadcast_to", &[a14], corrupt, |g, v| g.broadcast_to(v[0], &[2, 3, 4]))?);
    out.push(check_op("matmul", &[a23.clone(), a34], corrupt, |g, v| g.matmul(v[0], v[1]))?);
    out.push(check_op("matmul_batched", &[a234.clone(), b243], corrupt, |g, v| g.matmul(v[0], v[1]))?);
    out.push(check_op("permute", std::slice::from_ref(&a234), corrupt, |g, v| g.permute(v[0], &[2, 0, 1]))?);
    out.push(check_op("reshape", std::slice::from_ref(&a234), corrupt, |g, v| g.reshape(v[0], &[6, 4]))?);
    out.push(check_op("slice", std::slice::from_ref(&a234), corrupt, |g, v| g.slice(v[0], 2, 1, 3))?);
    out.push(check_op("softmax", std::slice::from_ref(&a23), corrupt, |g, v| g.softmax(v[0]))?);
    out.push(check_op("silu", std::slice::from_ref(&x5), corrupt, |g, v| g.silu(v[0]))?);
    out.push(check_op("gelu", std::slice::from_ref(&x5), corrupt, |g, v| g.gelu(v[0]))?);
    out.push(check_op("layer_norm", &[x5], corrupt, |g, v| g.layer_norm(v[0], 1e-6))?);
    out.push(check_op("ln_floor", &[positive], corrupt, |g, v| g.ln_floor(v[0], 1e-12))?);
    out.push(check_op("sum", std::slice::from_ref(&a23), corrupt, |g, v| {
        let s = g.sum(v[0])?;
        g.mul(s, s)
    })?);
    out.push(check_op("mean", &[a23], corrupt, |g, v| {
        let s = g.mean(v[0])?;
        g.mul(s, s)
    })?);
    out.push(check_op("mix", &[bank, alpha], corrupt, |g, v| g.mix(v[0], v[1]))?);
    out.push(check_op("gather_rows", &[table], corrupt, |g, v| g.gather_rows(v[0], &[2, 0, 2]))?);
    Ok(out)
}

fn setup(cfg: &GradcheckConfig) -> Result<(RemixModel<f64>, StepBatch<f64>)> {
    let sched = crate::diffusion::DiffusionSchedule::scaled_linear(cfg.timesteps)?;
    let model = RemixModel::remix(
        cfg.model.clone(),
        sched,
        cfg.experts,
        cfg.bases,
        cfg.kind,
        cfg.scope,
        cfg.logit_std,
        &mut stream_rng(cfg.seed, STREAM_PARAMS),
        &mut stream_rng(cfg.seed, STREAM_MIXER),
    )?;
    let mut rng = stream_rng(cfg.seed, STREAM_BATCHES);
    let mut shape = vec![4 * cfg.batch];
    shape.extend(cfg.model.sample_shape());
    let data: Tensor<f64> = standard_normal(&shape, &mut rng);
    let labels: Option<Vec<usize>> = (cfg.model.num_classes > 0)
        .then(|| (0..shape[0]).map(|_| rng.random_range(0..cfg.model.num_classes)).collect());
    let batch = StepBatch::draw(
        &mut rng,
        &model.partition,
        &data,
        labels.as_deref(),
        cfg.batch,
        cfg.model.null_class(),
        0.0,
    )?;
    Ok((model, batch))
}

fn objective_value(model: &RemixModel<f64>, batch: &StepBatch<f64>, gamma: f64) -> Result<f64> {
    let obj = build_objective_in(Graph::new(), model, batch, gamma, 1.0)?;
    Ok(obj.graph.value(obj.total).item())
}

fn remix_parts(model: &mut RemixModel<f64>) -> Result<(&mut crate::remix::BasisBank<f64>, &mut crate::remix::MixerTable<f64>)> {
    match &mut model.weights {
        Weights::Remix { bank, mixer } => Ok((bank, mixer)),
        Weights::Plain(_) => Err(Error::invalid("gradient check needs a remix model")),
    }
}

/// Finite differences of `loss + R` against the analytic gradient, over
/// every mixing logit and a sample of bank entries.
pub fn objective_checks(cfg: &GradcheckConfig) -> Result<Vec<Check>> {
    let (mut model, batch) = setup(cfg)?;
    let mut g = Graph::new();
    g.set_corrupt_mix_backward(cfg.corrupt_backward);
    let obj = build_objective_in(g, &model, &batch, cfg.gamma, 1.0)?;
    let grads = obj.graph.backward(obj.total)?;
    let analytic: Vec<(String, Tensor<f64>)> = obj
        .leaves
        .iter()
        .map(|(name, v, _)| {
            let t = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(obj.graph.shape(*v).to_vec()));
            (name.clone(), t)
        })
        .collect();
    let mut checks = Vec::new();

    // Mixing logits.
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (name, grad) in analytic.iter().filter(|(n, _)| n.starts_with("mixer/")) {
        let key = &name["mixer/".len()..];
        for j in 0..grad.len() {
            let fd = {
                let (_, mixer) = remix_parts(&mut model)?;
                let x = mixer.tables()[key].data()[j];
                mixer.tables_mut().get_mut(key).expect("table").data_mut()[j] = x + FD_STEP;
                let up = objective_value(&model, &batch, cfg.gamma)?;
                let (_, mixer) = remix_parts(&mut model)?;
                mixer.tables_mut().get_mut(key).expect("table").data_mut()[j] = x - FD_STEP;
                let down = objective_value(&model, &batch, cfg.gamma)?;
                let (_, mixer) = remix_parts(&mut model)?;
                mixer.tables_mut().get_mut(key).expect("table").data_mut()[j] = x;
                (up - down) / (2.0 * FD_STEP)
            };
            worst = worst.max(rel_err(grad.data()[j], fd));
            entries += 1;
        }
    }
    if entries > 0 {
        checks.push(Check {
            name: "objective/mixer_logits".into(),
            max_err: worst,
            entries,
            passed: worst <= REL_TOL,
        });
    }

    // Bank entries, sampled.
    let bank_grads: Vec<&(String, Tensor<f64>)> = analytic.iter().filter(|(n, _)| n.starts_with("bank/")).collect();
    let mut rng = stream_rng(cfg.seed ^ 0x9e37, STREAM_BATCHES);
    let mut worst = 0.0f64;
    for _ in 0..cfg.bank_probes {
        let (name, grad) = bank_grads[rng.random_range(0..bank_grads.len())];
        let pname = &name["bank/".len()..];
        let j = rng.random_range(0..grad.len());
        let (bank, _) = remix_parts(&mut model)?;
        let x = bank.widened(pname)?.data()[j];
        bank.widened_mut(pname)?.data_mut()[j] = x + FD_STEP;
        let up = objective_value(&model, &batch, cfg.gamma)?;
        remix_parts(&mut model)?.0.widened_mut(pname)?.data_mut()[j] = x - FD_STEP;
        let down = objective_value(&model, &batch, cfg.gamma)?;
        remix_parts(&mut model)?.0.widened_mut(pname)?.data_mut()[j] = x;
        worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
    }
    checks.push(Check {
        name: "objective/bank_entries".into(),
        max_err: worst,
        entries: cfg.bank_probes,
        passed: worst <= REL_TOL,
    });
    Ok(checks)
}

/// With a one-hot mixer, every expert's step leaves the gradient blocks of
/// all other bases exactly zero.
pub fn isolation_check(cfg: &GradcheckConfig) -> Result<Check> {
    let (model, batch) = setup(&GradcheckConfig {
        kind: MixerKind::OneHot,
        ..cfg.clone()
    })?;
    let k = model.bases();
    let mut leaked = 0.0f64;
    let mut selected_live = true;
    let mut rng = stream_rng(cfg.seed, STREAM_BATCHES);
    for i in 0..model.experts() {
        let (_, ts) = sample_expert_and_timesteps(&mut rng, &model.partition, cfg.batch);
        let (lo, hi) = model.partition.bounds(i)?;
        let ts: Vec<usize> = ts.iter().map(|&t| lo + t % (hi - lo)).collect();
        let b = StepBatch {
            expert: i,
            ts,
            ..batch.clone()
        };
        let mut g = Graph::new();
        g.set_corrupt_mix_backward(cfg.corrupt_backward);
        let obj = build_objective_in(g, &model, &b, cfg.gamma, 1.0)?;
        let grads = obj.graph.backward(obj.total)?;
        let chosen = sequential_basis(i, model.experts(), k);
        let mut chosen_norm = 0.0;
        for (_, v, _) in &obj.leaves {
            let Some(gt) = grads.get(*v) else { continue };
            if gt.shape()[0] != k {
                continue;
            }
            let per = gt.len() / k;
            for basis in 0..k {
                let block = &gt.data()[basis * per..(basis + 1) * per];
                let m = block.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                if basis == chosen {
                    chosen_norm += m;
                } else {
                    leaked = leaked.max(m);
                }
            }
        }
        selected_live &= chosen_norm > 0.0;
    }
    Ok(Check {
        name: "onehot/isolation".into(),
        max_err: leaked,
        entries: model.experts(),
        passed: leaked == 0.0 && selected_live,
    })
}

/// Op checks, objective checks, and for one-hot mixers the isolation check.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = op_suite(cfg.seed, cfg.corrupt_backward)?;
    checks.extend(objective_checks(cfg)?);
    if cfg.kind == MixerKind::OneHot {
        checks.push(isolation_check(cfg)?);
    }
    Ok(GradcheckReport { checks })
}
