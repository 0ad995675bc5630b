//! Flat `key = value` run configuration with `#` comments.
//!
//! Unknown keys are rejected. Later assignments win, so command-line
//! `--set key=value` overrides are applied after the file. `REMIX_SEED`
//! overrides `seed` last.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::ModelConfig;
use crate::diffusion::{DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::evalbench::DatasetKind;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "REMIX_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";
/// Default diffusion length for desk-scale runs.
pub const DESK_T: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightsKind {
    Plain,
    Remix,
}

impl FromStr for WeightsKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(WeightsKind::Plain),
            "remix" => Ok(WeightsKind::Remix),
            _ => Err(Error::Config(format!("unknown weights {s:?} (plain|remix)"))),
        }
    }
}

impl std::fmt::Display for WeightsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightsKind::Plain => "plain",
            WeightsKind::Remix => "remix",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub weights: WeightsKind,
    pub timesteps: usize,
    /// Linear schedule endpoints; `None` scales the 1000-step defaults to
    /// `timesteps`.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub dataset: DatasetKind,
    pub dataset_size: usize,
    /// Plain checkpoint replicated into the bank before training.
    pub init_from: Option<PathBuf>,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    anneal_set: bool,
    sample_seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            model: ModelConfig::mlp(),
            sampler: SamplerConfig {
                seed: train.seed,
                ..SamplerConfig::default()
            },
            train,
            weights: WeightsKind::Remix,
            timesteps: DESK_T,
            beta_start: None,
            beta_end: None,
            dataset: DatasetKind::Gauss8,
            dataset_size: 20_000,
            init_from: None,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/default"),
            anneal_set: false,
            sample_seed_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for key {key}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)));
            };
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    /// `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies `REMIX_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", v.trim()),
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "arch" => m.arch = parse(key, value)?,
            "data_dim" => m.data_dim = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "num_heads" => m.num_heads = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "time_embed_dim" => m.time_embed_dim = parse(key, value)?,
            "mix_embeddings" => m.mix_embeddings = parse_bool(key, value)?,
            "timesteps" => self.timesteps = parse(key, value)?,
            "beta_start" => self.beta_start = Some(parse(key, value)?),
            "beta_end" => self.beta_end = Some(parse(key, value)?),
            "total_steps" => t.total_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "gamma0" => t.gamma0 = parse(key, value)?,
            "anneal_steps" => {
                t.anneal_steps = parse(key, value)?;
                self.anneal_set = true;
            }
            "mixer_kind" => t.mixer_kind = parse(key, value)?,
            "mixer_scope" => t.mixer_scope = parse(key, value)?,
            "experts" => t.experts = parse(key, value)?,
            "bases" => t.bases = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "label_dropout" => t.label_dropout = parse(key, value)?,
            "logit_init_std" => t.logit_init_std = parse(key, value)?,
            "weights" => self.weights = parse(key, value)?,
            "init_from" => self.init_from = optional_path(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "dataset" => self.dataset = parse(key, value)?,
            "dataset_size" => self.dataset_size = parse(key, value)?,
            "sample_steps" => self.sampler.n_steps = parse(key, value)?,
            "guidance_scale" => self.sampler.guidance_scale = parse(key, value)?,
            "stochastic" => self.sampler.stochastic = parse_bool(key, value)?,
            "sample_seed" => {
                self.sampler.seed = parse(key, value)?;
                self.sample_seed_set = true;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Fills derived defaults and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if !self.anneal_set {
            self.train.anneal_steps = self.train.total_steps / 2;
        }
        if !self.sample_seed_set {
            self.sampler.seed = self.train.seed;
        }
        if self.weights == WeightsKind::Plain {
            self.train.bases = 1;
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.sampler.n_steps > self.timesteps {
            self.sampler.n_steps = self.timesteps;
        }
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be >= 1".into()));
        }
        let shape = self.dataset.sample_shape();
        let model_shape = self.model.sample_shape();
        if shape != model_shape {
            return Err(Error::Config(format!(
                "dataset {} yields samples of shape {shape:?} but the model expects {model_shape:?}",
                self.dataset
            )));
        }
        if self.model.num_classes > 0 && self.model.num_classes != self.dataset.num_classes() {
            return Err(Error::Config(format!(
                "num_classes {} does not match dataset {} ({} classes)",
                self.model.num_classes,
                self.dataset,
                self.dataset.num_classes()
            )));
        }
        self.model.validate()?;
        self.train.validate(self.timesteps)?;
        self.schedule()?;
        self.anneal_set = true;
        self.sample_seed_set = true;
        Ok(self)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        match (self.beta_start, self.beta_end) {
            (None, None) => DiffusionSchedule::scaled_linear(self.timesteps),
            (Some(s), Some(e)) => DiffusionSchedule::linear(self.timesteps, s, e),
            _ => Err(Error::Config("set both beta_start and beta_end or neither".into())),
        }
    }

    /// Every key with its resolved value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.sampler;
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(out, "{k} = {v}").expect("write to String");
        };
        kv("arch", &m.arch);
        kv("data_dim", &m.data_dim);
        kv("image_size", &m.image_size);
        kv("channels", &m.channels);
        kv("width", &m.width);
        kv("depth", &m.depth);
        kv("patch_size", &m.patch_size);
        kv("num_heads", &m.num_heads);
        kv("num_classes", &m.num_classes);
        kv("time_embed_dim", &m.time_embed_dim);
        kv("mix_embeddings", &m.mix_embeddings);
        kv("timesteps", &self.timesteps);
        if let (Some(bs), Some(be)) = (self.beta_start, self.beta_end) {
            kv("beta_start", &format!("{bs:e}"));
            kv("beta_end", &format!("{be:e}"));
        }
        kv("weights", &self.weights);
        kv("experts", &t.experts);
        kv("bases", &t.bases);
        kv("mixer_kind", &t.mixer_kind);
        kv("mixer_scope", &t.mixer_scope);
        kv("logit_init_std", &t.logit_init_std);
        kv("total_steps", &t.total_steps);
        kv("batch_size", &t.batch_size);
        kv("learning_rate", &t.learning_rate);
        kv("weight_decay", &t.weight_decay);
        kv("grad_clip", &t.grad_clip);
        kv("gamma0", &t.gamma0);
        kv("anneal_steps", &t.anneal_steps);
        kv("label_dropout", &t.label_dropout);
        kv("seed", &t.seed);
        kv(
            "init_from",
            &self.init_from.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
        );
        kv("checkpoint_every", &self.checkpoint_every);
        kv("dataset", &self.dataset);
        kv("dataset_size", &self.dataset_size);
        kv("sample_steps", &s.n_steps);
        kv("guidance_scale", &s.guidance_scale);
        kv("stochastic", &s.stochastic);
        kv("sample_seed", &s.seed);
        kv("out_dir", &self.out_dir.display());
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Arch;
    use crate::remix::MixerKind;

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# run\n\nwidth = 32  # narrow\nmixer_kind=onehot\n").unwrap();
        assert_eq!(cfg.model.width, 32);
        assert_eq!(cfg.train.mixer_kind, MixerKind::OneHot);
    }

    #[test]
    fn unknown_key_and_bad_value_are_rejected() {
        let e = RunConfig::from_text("widht = 3").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("widht"), "{e}");
        assert!(RunConfig::from_text("width = many").is_err());
        assert!(RunConfig::from_text("just a line").is_err());
        assert!(RunConfig::from_text("stochastic = maybe").is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let mut cfg = RunConfig::from_text("depth = 2").unwrap();
        cfg.apply_override("depth=5").unwrap();
        assert_eq!(cfg.model.depth, 5);
        assert!(cfg.apply_override("depth").is_err());
    }

    #[test]
    fn resolve_fills_derived_defaults() {
        let cfg = RunConfig::from_text("total_steps = 10\nseed = 4").unwrap().resolve().unwrap();
        assert_eq!(cfg.train.anneal_steps, 5);
        assert_eq!(cfg.sampler.seed, 4);
        let cfg = RunConfig::from_text("total_steps = 10\nanneal_steps = 0").unwrap().resolve().unwrap();
        assert_eq!(cfg.train.anneal_steps, 0);
    }

    #[test]
    fn resolve_checks_dataset_against_model() {
        assert!(RunConfig::from_text("dataset = tinyshapes").unwrap().resolve().is_err());
        let ok = RunConfig::from_text("dataset = tinyshapes\narch = dit-tiny\nnum_classes = 4")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(ok.model.arch, Arch::DitTiny);
        assert!(RunConfig::from_text("num_classes = 3").unwrap().resolve().is_err());
        assert!(RunConfig::from_text("beta_start = 0.001").unwrap().resolve().is_err());
    }

    #[test]
    fn resolved_text_roundtrips() {
        let cfg = RunConfig::from_text("width = 24\nbeta_start = 1e-3\nbeta_end = 0.05\ninit_from = a/b.ck\nstochastic = false")
            .unwrap()
            .resolve()
            .unwrap();
        let again = RunConfig::from_text(&cfg.to_text()).unwrap().resolve().unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_text(), cfg.to_text());
    }
}
