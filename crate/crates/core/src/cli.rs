//! `remix` command line: train, sample, analyze, bench, gradcheck, compare.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage or config error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, WeightsKind};
use crate::diffusion::{
    read_samples_csv, read_samples_npy, sample, write_samples_csv, write_samples_npy, ExpertProvider, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::evalbench::{
    bench_pair, coefficient_locality, loss_by_timestep, make_dataset, write_bench_csv, DatasetKind, EvalSet,
    DEFAULT_REPS, DEFAULT_WARMUP,
};
use crate::gradcheck::{run_suite, GradcheckConfig};
use crate::numerics::Tensor;
use crate::remix::{write_coefficients_csv, MixerScope, GLOBAL_TABLE};
use crate::training::{stream_rng, RemixModel, Trainer, STREAM_MIXER, STREAM_PARAMS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(name = "remix", version, about = "Multi-expert diffusion from mixed basis models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a plain or remix model; writes the checkpoint and metrics.csv.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Export coefficients.csv, losses.csv and summary statistics.
    Analyze(AnalyzeArgs),
    /// Runtime-mix vs. precomputed per-step latency; writes bench.csv.
    Bench(BenchArgs),
    /// 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Elementwise comparison of two sample files.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        for (k, v) in extra {
            cfg.set(k, v)?;
        }
        cfg.apply_env()?;
        cfg.resolve()
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Npy,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Materialize all experts once before sampling (default).
    #[arg(long, conflicts_with = "runtime_mix")]
    pub precompute: bool,
    /// Mix basis parameters inside every denoising step.
    #[arg(long)]
    pub runtime_mix: bool,
    /// Classifier-free guidance scale for conditional models.
    #[arg(long, default_value_t = 1.5)]
    pub guidance: f64,
    /// Reverse steps; defaults to the checkpoint's T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class for every sample; otherwise classes cycle.
    #[arg(long)]
    pub class: Option<usize>,
    /// Deterministic reverse chain (no injected noise).
    #[arg(long)]
    pub deterministic: bool,
    /// File format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "gauss8")]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation rows shared by every expert and timestep.
    #[arg(long, default_value_t = 2048)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Negative control: corrupt the mixing backward pass.
    #[arg(long)]
    pub corrupt_backward: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn build_model(cfg: &RunConfig) -> Result<RemixModel<f32>> {
    let sched = cfg.schedule()?;
    let t = &cfg.train;
    match (cfg.weights, &cfg.init_from) {
        (WeightsKind::Plain, _) => RemixModel::plain(
            cfg.model.clone(),
            sched,
            t.experts,
            &mut stream_rng(t.seed, STREAM_PARAMS),
        ),
        (WeightsKind::Remix, Some(path)) => {
            let pretrained = RemixModel::<f32>::load(path)?;
            if pretrained.config() != &cfg.model {
                return Err(Error::Config(format!(
                    "init_from {} was trained with a different architecture",
                    path.display()
                )));
            }
            if pretrained.sched != sched {
                return Err(Error::Config(format!(
                    "init_from {} uses a different noise schedule",
                    path.display()
                )));
            }
            RemixModel::init_from_pretrained(
                &pretrained,
                t.bases,
                t.experts,
                t.mixer_kind,
                t.mixer_scope,
                t.logit_init_std,
                &mut stream_rng(t.seed, STREAM_MIXER),
            )
        }
        (WeightsKind::Remix, None) => RemixModel::remix(
            cfg.model.clone(),
            sched,
            t.experts,
            t.bases,
            t.mixer_kind,
            t.mixer_scope,
            t.logit_init_std,
            &mut stream_rng(t.seed, STREAM_PARAMS),
            &mut stream_rng(t.seed, STREAM_MIXER),
        ),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let extra: Vec<(&str, String)> = a
        .out
        .iter()
        .map(|p| ("out_dir", p.display().to_string()))
        .collect();
    let cfg = a.cfg.resolve(&extra)?;
    create_dir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let ds = make_dataset(cfg.dataset, cfg.dataset_size, cfg.train.seed)?;
    let labels = if cfg.model.num_classes > 0 { ds.labels.clone() } else { None };
    let model = build_model(&cfg)?;
    let mut trainer = Trainer::new(cfg.train.clone(), model, ds.samples.cast::<f32>(), labels)?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut log = String::from(crate::training::Metrics::CSV_HEADER);
    log.push('\n');
    let total = cfg.train.total_steps;
    let every = (total / 20).max(1);
    let ck_dir = cfg.out_dir.join("checkpoints");
    for step in 0..total {
        let m = trainer.train_step()?;
        log.push_str(&m.csv_row());
        log.push('\n');
        if !a.quiet && ((step + 1) % every == 0 || step + 1 == total) {
            eprintln!(
                "step {:>6}/{total} expert {:>3} loss {:.5} reg {:.5} gamma {:.4}",
                step + 1,
                m.expert,
                m.loss,
                m.reg,
                m.gamma
            );
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total {
            create_dir(&ck_dir)?;
            trainer.to_checkpoint().save(&ck_dir.join(format!("step_{:06}.ckpt", step + 1)))?;
        }
    }
    fs::write(&metrics_path, log).map_err(|e| Error::io(&metrics_path, e))?;
    trainer.to_checkpoint().save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    if let Some(mixer) = trainer.model.mixer() {
        write_coefficients_csv(&cfg.out_dir.join("coefficients.csv"), mixer, &trainer.model.partition)?;
    }
    Ok(EXIT_OK)
}

fn sample_format(a: &SampleArgs) -> Format {
    a.format.unwrap_or_else(|| {
        if a.out.extension().is_some_and(|e| e == "npy") {
            Format::Npy
        } else {
            Format::Csv
        }
    })
}

pub fn cmd_sample(a: &SampleArgs) -> Result<i32> {
    let model = RemixModel::<f32>::load(&a.checkpoint)?;
    let cfg = SamplerConfig {
        n_steps: a.steps.unwrap_or(model.sched.len()),
        guidance_scale: a.guidance,
        stochastic: !a.deterministic,
        seed: a.seed,
    };
    cfg.validate(model.sched.len()).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    })?;
    let classes = model.config().num_classes;
    let labels: Option<Vec<usize>> = match (classes, a.class) {
        (0, Some(_)) => return Err(Error::Config("--class given for an unconditional model".into())),
        (0, None) => None,
        (c, Some(k)) if k >= c => return Err(Error::Config(format!("--class {k} out of range 0..{c}"))),
        (_, Some(k)) => Some(vec![k; a.n]),
        (c, None) => Some((0..a.n).map(|i| i % c).collect()),
    };
    let shape = model.config().sample_shape();
    let pre;
    let rt;
    let provider: &dyn ExpertProvider<f32> = if a.runtime_mix {
        rt = model.runtime_mixer();
        &rt
    } else {
        pre = model.precompute()?;
        &pre
    };
    let samples = sample(provider, &model.sched, &cfg, &shape, a.n, labels.as_deref())?;
    samples.check_finite("sampling")?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    match sample_format(a) {
        Format::Csv => write_samples_csv(&a.out, &samples, labels.as_deref())?,
        Format::Npy => write_samples_npy(&a.out, &samples)?,
    }
    Ok(EXIT_OK)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<i32> {
    let model = RemixModel::<f32>::load(&a.checkpoint)?;
    let kind: DatasetKind = a.dataset.parse()?;
    if kind.sample_shape() != model.config().sample_shape() {
        return Err(Error::Config(format!("dataset {kind} does not match the checkpoint's sample shape")));
    }
    create_dir(&a.out)?;
    let ds = make_dataset(kind, a.n_eval.max(1), a.seed)?;
    let labels = if model.config().num_classes > 0 { ds.labels.as_deref() } else { None };
    let eval = EvalSet::draw(&ds.samples.cast::<f32>(), labels, a.n_eval, a.seed)?;
    let t_grid: Vec<usize> = (0..model.sched.len()).collect();
    let grid = loss_by_timestep(&model, &eval, &t_grid)?;
    grid.write_csv(&a.out.join("losses.csv"))?;
    let mut summary = String::new();
    let n = model.experts();
    let (diag, off) = grid.diagonal_vs_off(2);
    summary.push_str(&format!("experts = {n}\nbases = {}\n", model.bases()));
    summary.push_str(&format!("diagonal_wins = {}/{n}\n", grid.diagonal_wins(2)));
    summary.push_str(&format!("mean_diagonal_loss = {diag:e}\nmean_offdiagonal_loss = {off:e}\n"));
    summary.push_str(&format!("max_row_ratio = {:e}\n", grid.max_row_ratio()));
    if let Some(mixer) = model.mixer() {
        write_coefficients_csv(&a.out.join("coefficients.csv"), mixer, &model.partition)?;
        let key = match mixer.scope() {
            MixerScope::Global => GLOBAL_TABLE.to_string(),
            MixerScope::Local => mixer.tables().keys().next().cloned().unwrap_or_default(),
        };
        if n >= 3 {
            let (adj, far) = coefficient_locality(&mixer.coefficient_matrix(&key)?)?;
            summary.push_str(&format!("adjacent_row_cosine = {adj:e}\nhalf_span_row_cosine = {far:e}\n"));
        }
    }
    let path = a.out.join("summary.txt");
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(EXIT_OK)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<i32> {
    let model = RemixModel::<f32>::load(&a.checkpoint)?;
    create_dir(&a.out)?;
    let stats = bench_pair(&model, a.batch, a.warmup, a.reps, a.seed)?;
    if stats[0].checksum != stats[1].checksum {
        eprintln!(
            "checksum mismatch: runtime-mix {} vs precomputed {}",
            stats[0].checksum, stats[1].checksum
        );
        return Ok(EXIT_CHECK);
    }
    write_bench_csv(&a.out.join("bench.csv"), &stats)?;
    let mut out = std::io::stdout().lock();
    for s in &stats {
        let _ = writeln!(out, "{:<12} mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms", s.mode, s.mean_ms, s.p50_ms, s.p95_ms);
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let run_cfg = a.cfg.resolve(&[])?;
    let mut cfg = if a.cfg.config.is_some() || !a.cfg.set.is_empty() {
        GradcheckConfig::from_run(&run_cfg)
    } else {
        GradcheckConfig::default()
    };
    cfg.corrupt_backward = a.corrupt_backward;
    let report = run_suite(&cfg)?;
    print!("{}", report.to_text());
    Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK })
}

fn read_any(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x93NUMPY") {
        read_samples_npy(path)
    } else {
        read_samples_csv(path).map(|(t, _)| t)
    }
}

pub fn cmd_compare(a: &CompareArgs) -> Result<i32> {
    let (x, y) = (read_any(&a.a)?, read_any(&a.b)?);
    if x.shape() != y.shape() {
        println!("shape mismatch: {:?} vs {:?}", x.shape(), y.shape());
        return Ok(EXIT_CHECK);
    }
    let worst = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max);
    println!("max_abs_diff = {worst:e} ({} values)", x.len());
    Ok(if worst <= a.tol { EXIT_OK } else { EXIT_CHECK })
}

