//! Synthetic datasets, sample-quality metrics, loss/coefficient analysis
//! exports and the runtime-mix vs. precomputed latency benchmark.

mod analysis;
mod bench;
mod datasets;
mod metrics;

pub use analysis::{
    coefficient_locality, loss_by_timestep, per_interval_eval_loss, served_loss_curve, EvalSet, LossGrid,
    LOSSES_CSV_HEADER,
};
pub use bench::{
    bench_csv, bench_latency, bench_pair, percentile, write_bench_csv, BenchMode, LatencyStats, BENCH_CSV_HEADER,
    DEFAULT_REPS, DEFAULT_WARMUP,
};
pub use datasets::{gauss8_center, make_dataset, DatasetKind, SyntheticDataset, GAUSS8_STD, TINY_CLASSES, TINY_SIDE};
pub use metrics::{cosine, random_unit, sliced_wasserstein, wasserstein_1d_sorted, DEFAULT_PROJECTIONS};
