//! WRITE-only oracle: the best total utility any subset of steps can reach
//! when each step costs its WRITE byte estimate.
//!
//! Budgets up to `dp_budget_limit` run an exact 0/1 knapsack DP over byte
//! capacity. Larger budgets use a density greedy: items sorted by
//! `value / weight` descending (ties by index), each taken if it still fits.
//! The greedy is exact whenever the whole stream fits.

use thiserror::Error;

use super::MetricsConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub utility: f64,
    pub approximate: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{values} values but {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("value at index {index} is negative or not finite ({value})")]
    BadValue { index: usize, value: f64 },
}

fn validate(values: &[f64], weights: &[u64]) -> Result<(), OracleError> {
    if values.len() != weights.len() {
        return Err(OracleError::LengthMismatch {
            values: values.len(),
            weights: weights.len(),
        });
    }
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(OracleError::BadValue { index, value });
    }
    Ok(())
}

/// Sum of `values` over `chosen`, in index order. Both oracles report their
/// totals this way so equal sets give bit-identical sums.
fn sum_chosen(values: &[f64], chosen: &[usize]) -> f64 {
    chosen.iter().map(|&i| values[i]).sum()
}

/// Exact 0/1 knapsack by dynamic programming over capacity. Returns the chosen
/// indices in ascending order.
pub fn knapsack_dp_set(values: &[f64], weights: &[u64], capacity: u64) -> Vec<usize> {
    let total: u64 = weights.iter().sum();
    let capacity = capacity.min(total) as usize;
    let words = capacity / 64 + 1;
    let mut best = vec![0.0f64; capacity + 1];
    // take[i] bit c: item i improved capacity c.
    let mut take = vec![vec![0u64; words]; values.len()];
    for (i, (&v, &w)) in values.iter().zip(weights).enumerate() {
        let w = w as usize;
        if w > capacity {
            continue;
        }
        for c in (w..=capacity).rev() {
            let with = best[c - w] + v;
            if with > best[c] {
                best[c] = with;
                take[i][c / 64] |= 1 << (c % 64);
            }
        }
    }
    let mut chosen = Vec::new();
    let mut c = capacity;
    for i in (0..values.len()).rev() {
        if take[i][c / 64] & (1 << (c % 64)) != 0 {
            chosen.push(i);
            c -= weights[i] as usize;
        }
    }
    chosen.reverse();
    chosen
}

pub fn knapsack_dp(values: &[f64], weights: &[u64], capacity: u64) -> f64 {
    sum_chosen(values, &knapsack_dp_set(values, weights, capacity))
}

/// Density greedy. Returns the chosen indices in ascending order.
pub fn knapsack_greedy_set(values: &[f64], weights: &[u64], capacity: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let density = |i: usize| {
        if weights[i] == 0 {
            f64::INFINITY
        } else {
            values[i] / weights[i] as f64
        }
    };
    order.sort_by(|&a, &b| density(b).total_cmp(&density(a)).then(a.cmp(&b)));
    let mut room = capacity;
    let mut chosen = Vec::new();
    for i in order {
        if weights[i] <= room {
            room -= weights[i];
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn knapsack_greedy(values: &[f64], weights: &[u64], capacity: u64) -> f64 {
    sum_chosen(values, &knapsack_greedy_set(values, weights, capacity))
}

pub fn oracle_write_only(
    values: &[f64],
    weights: &[u64],
    budget: u64,
    cfg: &MetricsConfig,
) -> Result<OracleResult, OracleError> {
    validate(values, weights)?;
    if budget <= cfg.dp_budget_limit {
        return Ok(OracleResult {
            utility: knapsack_dp(values, weights, budget),
            approximate: false,
        });
    }
    let fits_outright = weights.iter().sum::<u64>() <= budget;
    Ok(OracleResult {
        utility: knapsack_greedy(values, weights, budget),
        approximate: !fits_outright,
    })
}
