//! Euler-Maruyama path simulation and Monte Carlo moment estimation.
//!
//! Gaussian increments come from a counter-based generator keyed by
//! `(seed, path, step)` and estimator reductions use ordered pairwise
//! summation, so results are bit-identical for any worker count.

use crate::coefficients::SdeModel;
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::observable::Observable;
use crate::rng::CounterRng;
use crate::scalar::Real;
use rayon::prelude::*;
use std::io::Write;

/// A batch of Euler-Maruyama sample paths on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch<R> {
    pub x0: R,
    pub dt: R,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Path-major storage: `values[p * (n_steps + 1) + k]` is path `p` at
    /// step `k`.
    pub values: Vec<R>,
    /// Number of step updates clamped at the work-interval boundary.
    pub clamped: u64,
}

impl<R: Real> PathBatch<R> {
    pub fn state(&self, path: usize, step: usize) -> R {
        self.values[path * (self.n_steps + 1) + step]
    }
}

/// One Monte Carlo estimate of `E^x[f(X_t)]` (or of the variance).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate<R> {
    pub t: R,
    pub x0: R,
    /// Observable descriptor (`s`, `s^2`, ..., or `variance`).
    pub f: String,
    pub mean: R,
    pub stderr: R,
    pub n_paths: usize,
}

#[inline]
fn em_step<R: Real>(model: &SdeModel<R>, x: R, dt: R, z: R, clamped: &mut u64) -> R {
    let b = model.drift.value(x);
    let s = model.diffusion.value(x);
    let mut next = x + b * dt + s * dt.sqrt() * z;
    let (lo, hi) = model.work_interval;
    if next < lo {
        next = lo;
        *clamped += 1;
    } else if next > hi {
        next = hi;
        *clamped += 1;
    }
    next
}

/// Simulates `n_paths` Euler-Maruyama paths started at `x0`.
///
/// Paths that exit the work interval are clamped to the boundary; the
/// number of clamped updates is reported in the batch.
pub fn simulate_paths<R: Real>(
    model: &SdeModel<R>,
    x0: R,
    dt: R,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch<R>> {
    if !(dt > R::zero()) {
        return Err(Error::Usage("dt must be positive".into()));
    }
    if n_paths == 0 {
        return Err(Error::Usage("n_paths must be at least 1".into()));
    }
    if !model.contains(x0) {
        return Err(Error::Usage(format!(
            "x0 = {x0} outside work interval [{}, {}]",
            model.work_interval.0, model.work_interval.1
        )));
    }
    let rng = CounterRng::new(seed);
    let row = n_steps + 1;
    let mut values = vec![R::zero(); n_paths * row];
    let clamped: u64 = values
        .par_chunks_mut(row)
        .enumerate()
        .map(|(p, states)| {
            let mut clamped = 0u64;
            let mut x = x0;
            states[0] = x0;
            for k in 1..=n_steps {
                let z = R::c(rng.standard_normal(p as u64, k as u64));
                x = em_step(model, x, dt, z, &mut clamped);
                states[k] = x;
            }
            clamped
        })
        .sum();
    Ok(PathBatch {
        x0,
        dt,
        n_steps,
        n_paths,
        seed,
        values,
        clamped,
    })
}

/// Time partition with uniform steps of at most `dt_max`, refined so every
/// requested observation time is hit exactly.
fn build_partition<R: Real>(t_grid: &[R], dt_max: R) -> Result<(Vec<R>, Vec<usize>)> {
    if t_grid.is_empty() {
        return Err(Error::Usage("t_grid must be nonempty".into()));
    }
    if !(dt_max > R::zero()) {
        return Err(Error::Usage("dt must be positive".into()));
    }
    let mut prev = R::zero();
    for &t in t_grid {
        if !(t > prev) {
            return Err(Error::Usage(
                "t_grid must be sorted, strictly increasing and positive".into(),
            ));
        }
        prev = t;
    }
    let mut times = vec![R::zero()];
    let mut obs = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let cur = *times.last().unwrap();
        let span = t - cur;
        let n_sub = (span / dt_max).ceil().to_f64_lossy().max(1.0) as usize;
        for i in 1..n_sub {
            times.push(cur + span * R::from_usize(i).unwrap() / R::from_usize(n_sub).unwrap());
        }
        times.push(t);
        obs.push(times.len() - 1);
    }
    Ok((times, obs))
}

/// Simulates paths through the partition and returns, per observation time,
/// the path states at that time (path-ordered) plus the clamp count.
fn mc_states<R: Real>(
    model: &SdeModel<R>,
    x0: R,
    t_grid: &[R],
    n_paths: usize,
    seed: u64,
    dt_max: R,
) -> Result<(Vec<Vec<R>>, u64)> {
    if n_paths == 0 {
        return Err(Error::Usage("n_paths must be at least 1".into()));
    }
    if !model.contains(x0) {
        return Err(Error::Usage(format!(
            "x0 = {x0} outside work interval [{}, {}]",
            model.work_interval.0, model.work_interval.1
        )));
    }
    let (times, obs_idx) = build_partition(t_grid, dt_max)?;
    let rng = CounterRng::new(seed);
    let per_path: Vec<(Vec<R>, u64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut clamped = 0u64;
            let mut x = x0;
            let mut out = Vec::with_capacity(obs_idx.len());
            let mut next_obs = 0usize;
            for k in 1..times.len() {
                let dt = times[k] - times[k - 1];
                let z = R::c(rng.standard_normal(p as u64, k as u64));
                x = em_step(model, x, dt, z, &mut clamped);
                if next_obs < obs_idx.len() && obs_idx[next_obs] == k {
                    out.push(x);
                    next_obs += 1;
                }
            }
            (out, clamped)
        })
        .collect();
    let clamped = per_path.iter().map(|(_, c)| c).sum();
    let mut states = vec![Vec::with_capacity(n_paths); t_grid.len()];
    for (row, _) in &per_path {
        for (i, &x) in row.iter().enumerate() {
            states[i].push(x);
        }
    }
    Ok((states, clamped))
}

fn mean_stderr<R: Real>(values: &[R]) -> (R, R) {
    let n = R::from_usize(values.len()).unwrap();
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, R::zero());
    }
    let sq: Vec<R> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - R::one());
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimates of `E^x0[f(X_t)]` over `t_grid`.
///
/// `dt_max` caps the Euler-Maruyama step; sub-steps are inserted so every
/// `t` in the grid is reached exactly.
pub fn mc_moment<R: Real>(
    model: &SdeModel<R>,
    x0: R,
    t_grid: &[R],
    f: &Observable<R>,
    n_paths: usize,
    seed: u64,
    dt_max: R,
) -> Result<Vec<MomentEstimate<R>>> {
    let (states, _) = mc_states(model, x0, t_grid, n_paths, seed, dt_max)?;
    Ok(t_grid
        .iter()
        .zip(states.iter())
        .map(|(&t, xs)| {
            let fx: Vec<R> = xs.iter().map(|&x| f.value(x)).collect();
            let (mean, stderr) = mean_stderr(&fx);
            MomentEstimate {
                t,
                x0,
                f: f.label(),
                mean,
                stderr,
                n_paths,
            }
        })
        .collect())
}

/// Monte Carlo estimates of the variance `V^x0[X_t]`, with delta-method
/// standard errors.
pub fn mc_variance<R: Real>(
    model: &SdeModel<R>,
    x0: R,
    t_grid: &[R],
    n_paths: usize,
    seed: u64,
    dt_max: R,
) -> Result<Vec<MomentEstimate<R>>> {
    let (states, _) = mc_states(model, x0, t_grid, n_paths, seed, dt_max)?;
    Ok(t_grid
        .iter()
        .zip(states.iter())
        .map(|(&t, xs)| {
            let n = R::from_usize(xs.len()).unwrap();
            let m1 = pairwise_sum(xs) / n;
            let d2: Vec<R> = xs.iter().map(|&x| (x - m1) * (x - m1)).collect();
            let var = if xs.len() < 2 {
                R::zero()
            } else {
                pairwise_sum(&d2) / (n - R::one())
            };
            let d4: Vec<R> = d2.iter().map(|&d| d * d).collect();
            let m4 = pairwise_sum(&d4) / n;
            let stderr = ((m4 - var * var).max(R::zero()) / n).sqrt();
            MomentEstimate {
                t,
                x0,
                f: "variance".into(),
                mean: var,
                stderr,
                n_paths,
            }
        })
        .collect())
}

/// Clamp count for an `mc_moment`/`mc_variance` style run; exposed so
/// callers can verify the truncation never bit.
pub fn mc_clamp_count<R: Real>(
    model: &SdeModel<R>,
    x0: R,
    t_grid: &[R],
    n_paths: usize,
    seed: u64,
    dt_max: R,
) -> Result<u64> {
    mc_states(model, x0, t_grid, n_paths, seed, dt_max).map(|(_, c)| c)
}

/// CSV export with header `t,x0,f,mean,stderr,n_paths`.
pub fn write_moment_csv<R: Real, W: Write>(
    estimates: &[MomentEstimate<R>],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "x0", "f", "mean", "stderr", "n_paths"])
        .map_err(csv_err)?;
    for e in estimates {
        w.write_record([
            format!("{}", e.t),
            format!("{}", e.x0),
            e.f.clone(),
            format!("{}", e.mean),
            format!("{}", e.stderr),
            format!("{}", e.n_paths),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
