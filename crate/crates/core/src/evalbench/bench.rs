use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::diffusion::{standard_normal, ExpertProvider};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::training::{stream_rng, RemixModel, STREAM_BATCHES};

pub const BENCH_CSV_HEADER: &str = "mode,mean_ms,p50_ms,p95_ms,batch,K,N";
pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_REPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    RuntimeMix,
    Precomputed,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::RuntimeMix => "runtime-mix",
            BenchMode::Precomputed => "precomputed",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "runtime-mix" => Ok(BenchMode::RuntimeMix),
            "precomputed" => Ok(BenchMode::Precomputed),
            _ => Err(Error::Config(format!("unknown bench mode {s:?} (runtime-mix|precomputed)"))),
        }
    }
}

/// Per-denoise-step wall-clock statistics of one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub mode: BenchMode,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub batch: usize,
    pub bases: usize,
    pub experts: usize,
    /// Sum of every measured output; equal across modes for equal inputs.
    pub checksum: f64,
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    fn from_samples(mode: BenchMode, samples_ms: Vec<f64>, checksum: f64, model_dims: (usize, usize, usize)) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let (batch, bases, experts) = model_dims;
        LatencyStats {
            mode,
            mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len().max(1) as f64,
            p50_ms: percentile(&sorted, 0.50),
            p95_ms: percentile(&sorted, 0.95),
            batch,
            bases,
            experts,
            checksum,
            samples_ms,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{}",
            self.mode, self.mean_ms, self.p50_ms, self.p95_ms, self.batch, self.bases, self.experts
        )
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Inputs<F: Float> {
    x: Tensor<F>,
    labels: Option<Vec<usize>>,
    /// Timestep of each rep; cycles through every expert.
    ts: Vec<usize>,
}

fn inputs<F: Float>(model: &RemixModel<F>, batch: usize, total: usize, seed: u64) -> Inputs<F> {
    let mut shape = vec![batch];
    shape.extend(model.config().sample_shape());
    let mut rng = stream_rng(seed, STREAM_BATCHES);
    let x = standard_normal(&shape, &mut rng);
    let labels = (model.config().num_classes > 0).then(|| (0..batch).map(|b| b % model.config().num_classes).collect());
    let t_steps = model.sched.len();
    let stride = model.partition.width().max(1);
    let ts = (0..total).map(|r| (r * stride + r / model.experts()) % t_steps).collect();
    Inputs { x, labels, ts }
}

fn timed<F: Float>(provider: &dyn ExpertProvider<F>, inp: &Inputs<F>, t: usize) -> Result<(f64, f64)> {
    let start = Instant::now();
    let y = provider.predict(&inp.x, t, inp.labels.as_deref())?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((ms, y.data().iter().map(|v| v.as_f64()).sum()))
}

/// Benchmarks one mode alone.
pub fn bench_latency<F: Float>(
    model: &RemixModel<F>,
    mode: BenchMode,
    batch: usize,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<LatencyStats> {
    check(batch, reps)?;
    let inp = inputs(model, batch, warmup + reps, seed);
    let pre;
    let rt;
    let provider: &dyn ExpertProvider<F> = match mode {
        BenchMode::Precomputed => {
            pre = model.precompute()?;
            &pre
        }
        BenchMode::RuntimeMix => {
            rt = model.runtime_mixer();
            &rt
        }
    };
    let mut samples = Vec::with_capacity(reps);
    let mut checksum = 0.0;
    for (r, &t) in inp.ts.iter().enumerate() {
        let (ms, sum) = timed(provider, &inp, t)?;
        if r >= warmup {
            samples.push(ms);
            checksum += sum;
        }
    }
    Ok(LatencyStats::from_samples(
        mode,
        samples,
        checksum,
        (batch, model.bases(), model.experts()),
    ))
}

/// Both modes on identical inputs, alternating every rep so drift in
/// machine load hits them equally. Returns `[runtime-mix, precomputed]`.
pub fn bench_pair<F: Float>(
    model: &RemixModel<F>,
    batch: usize,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<[LatencyStats; 2]> {
    check(batch, reps)?;
    let inp = inputs(model, batch, warmup + reps, seed);
    let pre = model.precompute()?;
    let rt = model.runtime_mixer();
    let providers: [&dyn ExpertProvider<F>; 2] = [&rt, &pre];
    let mut samples = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
    let mut checksums = [0.0; 2];
    for (r, &t) in inp.ts.iter().enumerate() {
        let order = if r % 2 == 0 { [0, 1] } else { [1, 0] };
        for m in order {
            let (ms, sum) = timed(providers[m], &inp, t)?;
            if r >= warmup {
                samples[m].push(ms);
                checksums[m] += sum;
            }
        }
    }
    let dims = (batch, model.bases(), model.experts());
    let [s_rt, s_pre] = samples;
    Ok([
        LatencyStats::from_samples(BenchMode::RuntimeMix, s_rt, checksums[0], dims),
        LatencyStats::from_samples(BenchMode::Precomputed, s_pre, checksums[1], dims),
    ])
}

fn check(batch: usize, reps: usize) -> Result<()> {
    if batch == 0 || reps == 0 {
        return Err(Error::invalid("bench needs batch >= 1 and reps >= 1"));
    }
    Ok(())
}

pub fn bench_csv(stats: &[LatencyStats]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for st in stats {
        writeln!(s, "{}", st.csv_row()).expect("write to String");
    }
    s
}

pub fn write_bench_csv(path: &Path, stats: &[LatencyStats]) -> Result<()> {
    std::fs::write(path, bench_csv(stats)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::diffusion::DiffusionSchedule;
    use crate::remix::{MixerKind, MixerScope};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(k: usize) -> RemixModel<f32> {
        let cfg = ModelConfig {
            width: 16,
            depth: 2,
            time_embed_dim: 8,
            ..ModelConfig::mlp()
        };
        let sched = DiffusionSchedule::scaled_linear(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mrng = ChaCha8Rng::seed_from_u64(1);
        RemixModel::remix(cfg, sched, 4, k, MixerKind::Softmax, MixerScope::Global, 0.5, &mut rng, &mut mrng).unwrap()
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn modes_see_identical_inputs() {
        let m = small(3);
        let [rt, pre] = bench_pair(&m, 8, 2, 10, 4).unwrap();
        assert_eq!(rt.checksum, pre.checksum);
        assert_eq!(rt.samples_ms.len(), 10);
        let alone = bench_latency(&m, BenchMode::Precomputed, 8, 2, 10, 4).unwrap();
        assert_eq!(alone.checksum, pre.checksum);
        assert!(rt.p50_ms <= rt.p95_ms);
    }

    #[test]
    fn csv_layout() {
        let m = small(2);
        let stats = bench_pair(&m, 4, 0, 3, 0).unwrap();
        let csv = bench_csv(&stats);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BENCH_CSV_HEADER);
        assert!(lines[1].starts_with("runtime-mix,") && lines[1].ends_with(",4,2,4"));
        assert!(lines[2].starts_with("precomputed,"));
        assert_eq!("precomputed".parse::<BenchMode>().unwrap(), BenchMode::Precomputed);
        assert!("fast".parse::<BenchMode>().is_err());
    }

    #[test]
    fn rejects_zero_reps() {
        assert!(bench_latency(&small(1), BenchMode::RuntimeMix, 4, 0, 0, 0).is_err());
    }
}
