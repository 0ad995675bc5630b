use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::diffusion::{forward_diffuse_batch, standard_normal};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::remix::{ExpertParameters, IntervalPartition};
use crate::training::{gather, stream_rng, RemixModel, STREAM_BATCHES};

use super::metrics::cosine;

pub const LOSSES_CSV_HEADER: &str = "expert,interval,t_mid,loss";

/// Expert × interval matrix of mean denoising losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrid {
    /// `matrix[i][j]`: mean loss of expert `i` over interval `j`'s grid points.
    pub matrix: Vec<Vec<f64>>,
    pub t_grid: Vec<usize>,
    /// `per_t[i][g]`: loss of expert `i` at `t_grid[g]`.
    pub per_t: Vec<Vec<f64>>,
    /// `(t_low, t_high)` half-open bounds of each interval.
    pub bounds: Vec<(usize, usize)>,
}

/// Fixed evaluation draw shared by every expert and timestep.
pub struct EvalSet<F: Float> {
    pub x0: Tensor<F>,
    pub eps: Tensor<F>,
    pub labels: Option<Vec<usize>>,
}

impl<F: Float> EvalSet<F> {
    /// `n` rows drawn with replacement from `data` plus matching noise.
    /// Labels are kept only when `labels` is given.
    pub fn draw(data: &Tensor<F>, labels: Option<&[usize]>, n: usize, seed: u64) -> Result<Self> {
        let rows_avail = data.shape().first().copied().unwrap_or(0);
        if rows_avail == 0 || n == 0 {
            return Err(Error::invalid("evaluation needs data and n >= 1"));
        }
        if let Some(l) = labels {
            if l.len() != rows_avail {
                return Err(Error::invalid(format!("{} labels for {rows_avail} rows", l.len())));
            }
        }
        let mut rng = stream_rng(seed, STREAM_BATCHES);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows_avail)).collect();
        let x0 = gather(data, &rows)?;
        let eps = standard_normal(x0.shape(), &mut rng);
        let labels = labels.map(|l| rows.iter().map(|&r| l[r]).collect());
        Ok(EvalSet { x0, eps, labels })
    }

    fn loss_at(&self, model: &RemixModel<F>, params: &ExpertParameters<F>, t: usize) -> Result<f64> {
        let n = self.x0.shape()[0];
        let ts = vec![t; n];
        let xt = forward_diffuse_batch(&self.x0, &ts, &self.eps, &model.sched)?;
        let pred = model.arch.predict_plain(params, &xt, &ts, self.labels.as_deref())?;
        let se: f64 = pred
            .data()
            .iter()
            .zip(self.eps.data())
            .map(|(&p, &e)| {
                let d = p.as_f64() - e.as_f64();
                d * d
            })
            .sum();
        Ok(se / n as f64)
    }
}

fn check_grid(t_grid: &[usize], t_steps: usize) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::invalid("empty timestep grid"));
    }
    if let Some(&t) = t_grid.iter().find(|&&t| t >= t_steps) {
        return Err(Error::OutOfRange {
            what: "timestep grid",
            index: t,
            len: t_steps,
        });
    }
    Ok(())
}

/// Every expert evaluated at every grid timestep on one shared draw.
pub fn loss_by_timestep<F: Float>(model: &RemixModel<F>, eval: &EvalSet<F>, t_grid: &[usize]) -> Result<LossGrid> {
    let part = &model.partition;
    check_grid(t_grid, part.timesteps())?;
    let n = part.experts();
    let owner: Vec<usize> = t_grid.iter().map(|&t| part.interval_of(t)).collect::<Result<_>>()?;
    let mut per_t = Vec::with_capacity(n);
    let mut matrix = Vec::with_capacity(n);
    for i in 0..n {
        let params = model.expert_params(i)?;
        let row: Vec<f64> = t_grid.iter().map(|&t| eval.loss_at(model, &params, t)).collect::<Result<_>>()?;
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (&j, &l) in owner.iter().zip(&row) {
            sums[j] += l;
            counts[j] += 1;
        }
        matrix.push(
            sums.iter()
                .zip(&counts)
                .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
                .collect(),
        );
        per_t.push(row);
    }
    let bounds = (0..n).map(|j| part.bounds(j)).collect::<Result<_>>()?;
    Ok(LossGrid {
        matrix,
        t_grid: t_grid.to_vec(),
        per_t,
        bounds,
    })
}

/// Loss at every grid timestep using the expert that serves it.
pub fn served_loss_curve<F: Float>(model: &RemixModel<F>, eval: &EvalSet<F>, t_grid: &[usize]) -> Result<Vec<f64>> {
    check_grid(t_grid, model.partition.timesteps())?;
    let mut cache: Vec<Option<ExpertParameters<F>>> = vec![None; model.experts()];
    t_grid
        .iter()
        .map(|&t| {
            let i = model.partition.interval_of(t)?;
            if cache[i].is_none() {
                cache[i] = Some(model.expert_params(i)?);
            }
            eval.loss_at(model, cache[i].as_ref().expect("filled"), t)
        })
        .collect()
}

/// Mean over intervals of the serving expert's mean loss on that interval.
/// Comparable across models with different expert counts.
pub fn per_interval_eval_loss<F: Float>(
    model: &RemixModel<F>,
    eval: &EvalSet<F>,
    partition: &IntervalPartition,
) -> Result<f64> {
    let t_grid: Vec<usize> = (0..model.partition.timesteps()).collect();
    let curve = served_loss_curve(model, eval, &t_grid)?;
    let mut total = 0.0;
    for j in 0..partition.experts() {
        let (lo, hi) = partition.bounds(j)?;
        total += curve[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    }
    Ok(total / partition.experts() as f64)
}

impl LossGrid {
    pub fn experts(&self) -> usize {
        self.matrix.len()
    }

    /// Columns `j` where `(j, j) ≤ (i, j)` for every `|i − j| ≥ min_gap`.
    pub fn diagonal_wins(&self, min_gap: usize) -> usize {
        let n = self.experts();
        (0..n)
            .filter(|&j| {
                let d = self.matrix[j][j];
                (0..n).filter(|&i| i.abs_diff(j) >= min_gap).all(|i| d <= self.matrix[i][j])
            })
            .count()
    }

    /// `(mean diagonal, mean off-diagonal over |i − j| ≥ min_gap)`.
    pub fn diagonal_vs_off(&self, min_gap: usize) -> (f64, f64) {
        let n = self.experts();
        let diag = (0..n).map(|i| self.matrix[i][i]).sum::<f64>() / n as f64;
        let off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| i.abs_diff(j) >= min_gap).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[i][j])
            .collect();
        let off_mean = if off.is_empty() { f64::NAN } else { off.iter().sum::<f64>() / off.len() as f64 };
        (diag, off_mean)
    }

    /// Largest `max/min` ratio across rows.
    pub fn max_row_ratio(&self) -> f64 {
        self.matrix
            .iter()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                max / min
            })
            .fold(1.0, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.matrix.iter().flatten().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOSSES_CSV_HEADER);
        s.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, &loss) in row.iter().enumerate() {
                let (lo, hi) = self.bounds[j];
                let t_mid = (lo + hi - 1) as f64 / 2.0;
                writeln!(s, "{i},{j},{t_mid},{loss:e}").expect("write to String");
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `(mean cosine of adjacent rows, mean cosine of rows ⌊N/2⌋ apart)` of
/// an `[N, K]` coefficient matrix.
pub fn coefficient_locality<F: Float>(coeffs: &Tensor<F>) -> Result<(f64, f64)> {
    if coeffs.ndim() != 2 || coeffs.shape()[0] < 3 {
        return Err(Error::invalid(format!(
            "locality needs an [N, K] matrix with N >= 3, got {:?}",
            coeffs.shape()
        )));
    }
    let (n, k) = (coeffs.shape()[0], coeffs.shape()[1]);
    let v = coeffs.to_f64_vec();
    let row = |i: usize| &v[i * k..(i + 1) * k];
    let mean_lag = |lag: usize| (0..n - lag).map(|i| cosine(row(i), row(i + lag))).sum::<f64>() / (n - lag) as f64;
    Ok((mean_lag(1), mean_lag(n / 2)))
}
