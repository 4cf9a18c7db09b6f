//! Aggregation across seeds: success curves (best-so-far per seed, median
//! and standard deviation across seeds) and reward curves over normalized
//! episode time.

use mpr_core::error::{CoreError, CoreResult};
use mpr_core::reward::RewardStep;
use mpr_core::rl::EpisodeRow;
use serde::Serialize;

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Evaluation grid of a run: episodes that carry an eval result.
fn eval_grid(rows: &[EpisodeRow]) -> Vec<usize> {
    rows.iter()
        .filter(|r| r.eval_success.is_some())
        .map(|r| r.episode)
        .collect()
}

/// Best-so-far success at each eval point of one run.
fn best_so_far(rows: &[EpisodeRow], base_success: f64) -> Vec<f64> {
    let mut best = base_success;
    let mut out = Vec::new();
    for r in rows {
        if let Some(s) = r.eval_success {
            best = best.max(s);
            out.push(best);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ProviderAggregate {
    pub provider: String,
    pub seeds: Vec<u64>,
    pub final_successes: Vec<f64>,
    pub best_successes: Vec<f64>,
    pub median_final: f64,
    pub median_best: f64,
    pub std_final: f64,
}

/// Success-curve rows for the figure CSV: per provider and eval episode,
/// the across-seed median and std of best-so-far success.
pub fn success_curve_rows(
    provider: &str,
    per_seed_rows: &[&[EpisodeRow]],
    base_success: f64,
) -> CoreResult<Vec<(String, usize, f64, f64, f64)>> {
    if per_seed_rows.is_empty() {
        return Err(CoreError::config("aggregate: no runs"));
    }
    let grid = eval_grid(per_seed_rows[0]);
    for rows in per_seed_rows {
        if eval_grid(rows) != grid {
            return Err(CoreError::config(
                "aggregate: inconsistent eval grids across seeds",
            ));
        }
    }
    let curves: Vec<Vec<f64>> = per_seed_rows
        .iter()
        .map(|rows| best_so_far(rows, base_success))
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for (gi, &episode) in grid.iter().enumerate() {
        let mut vals: Vec<f64> = curves.iter().map(|c| c[gi]).collect();
        let std = std_dev(&vals);
        let med = median(&mut vals);
        out.push((provider.to_string(), episode, med, std, base_success));
    }
    Ok(out)
}

pub fn provider_aggregate(
    provider: &str,
    seeds: &[u64],
    finals: &[f64],
    bests: &[f64],
) -> ProviderAggregate {
    let mut f = finals.to_vec();
    let mut b = bests.to_vec();
    ProviderAggregate {
        provider: provider.to_string(),
        seeds: seeds.to_vec(),
        final_successes: finals.to_vec(),
        best_successes: bests.to_vec(),
        median_final: median(&mut f),
        median_best: median(&mut b),
        std_final: std_dev(finals),
    }
}

/// Reward-curve rows: per normalized-time bin, the mean and std of
/// per-step rewards pooled over a battery of episodes.
pub fn reward_curve_rows(
    provider: &str,
    batteries: &[Vec<RewardStep>],
    bins: usize,
) -> Vec<(String, f64, f64, f64)> {
    let mut by_bin: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for steps in batteries {
        let t_max = steps.len().max(1) as f64;
        for s in steps {
            let b = (((s.t as f64) / t_max) * bins as f64).floor() as usize;
            by_bin[b.min(bins - 1)].push(s.reward);
        }
    }
    by_bin
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(b, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (
                provider.to_string(),
                (b as f64 + 0.5) / bins as f64,
                mean,
                std_dev(v),
            )
        })
        .collect()
}

/// Pooled standard deviation of per-step rewards over a battery.
pub fn pooled_reward_std(batteries: &[Vec<RewardStep>]) -> f64 {
    let all: Vec<f64> = batteries
        .iter()
        .flat_map(|b| b.iter().map(|s| s.reward))
        .collect();
    std_dev(&all)
}

/// Mean raw (pre-shift) reward over every step of a battery.
pub fn mean_raw_reward(batteries: &[Vec<RewardStep>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for b in batteries {
        for s in b {
            sum += s.raw;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}
