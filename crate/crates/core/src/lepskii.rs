//! The per-agent stopping rule and calibration of its constant.
//!
//! Scanning `k = K*, K*-1, ..., 2`, an agent stops at the first index where
//!
//! ```text
//! |g_k|_{D_j}^2 + lambda_k |g_k|_K^2  >=  C_LP lambda_{k-1}^2 Wbar_k
//! ```
//!
//! for the global approximation `g_k` of the ladder difference. If no index
//! qualifies the agent keeps `K*`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::krr::{Ladder, LocalDataset};

/// `c_lp * lambda_{k-1}^2 * w_bar_k`.
pub fn threshold_at(k: usize, c_lp: f64, w_bar_k: f64, ladder: &Ladder) -> Result<f64> {
    if k < 2 {
        return arg(format!("threshold needs k >= 2, got {k}"));
    }
    if k > ladder.k_cap() {
        return arg(format!("k = {k} exceeds the ladder cap {}", ladder.k_cap()));
    }
    if w_bar_k < 0.0 {
        return arg(format!("aggregated W must be non-negative, got {w_bar_k}"));
    }
    let prev = ladder.lambda(k - 1);
    Ok(c_lp * prev * prev * w_bar_k)
}

/// Largest `k` in `2..=k_star` with `seminorms[k] >= thresholds[k]`, or
/// `k_star` when there is none.
pub fn select_k(
    seminorms: &BTreeMap<usize, f64>,
    thresholds: &BTreeMap<usize, f64>,
    k_star: usize,
) -> Result<usize> {
    if k_star < 2 {
        return arg(format!("selection needs K* >= 2, got {k_star}"));
    }
    for k in (2..=k_star).rev() {
        let s = seminorms
            .get(&k)
            .ok_or_else(|| Error::Argument(format!("no seminorm for k = {k}")))?;
        let t = thresholds
            .get(&k)
            .ok_or_else(|| Error::Argument(format!("no threshold for k = {k}")))?;
        if s >= t {
            return Ok(k);
        }
    }
    Ok(k_star)
}

/// One line of a selection trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub seminorm: f64,
    pub threshold: f64,
    pub hit: bool,
}

/// An agent's choice with the full scan for auditing.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub k: usize,
    pub lambda: f64,
    /// Rows for `k = 2..=K*` in increasing order.
    pub trace: Vec<TraceRow>,
}

impl SelectionResult {
    /// Runs the stopping rule on per-`k` vectors whose entry `k - 2` belongs
    /// to ladder index `k`.
    pub fn from_scan(seminorms: &[f64], thresholds: &[f64], ladder: &Ladder) -> Result<Self> {
        if seminorms.len() != thresholds.len() {
            return arg("seminorm and threshold traces differ in length");
        }
        let k_star = seminorms.len() + 1;
        if k_star > ladder.k_cap() {
            return arg("trace is longer than the ladder");
        }
        let to_map = |v: &[f64]| -> BTreeMap<usize, f64> {
            v.iter().enumerate().map(|(i, x)| (i + 2, *x)).collect()
        };
        let k = select_k(&to_map(seminorms), &to_map(thresholds), k_star)?;
        let trace = seminorms
            .iter()
            .zip(thresholds)
            .enumerate()
            .map(|(i, (&seminorm, &threshold))| TraceRow {
                k: i + 2,
                seminorm,
                threshold,
                hit: seminorm >= threshold,
            })
            .collect();
        Ok(Self {
            k,
            lambda: ladder.lambda(k),
            trace,
        })
    }
}

/// The full adaptive pipeline as seen by the calibration loop.
pub trait ClpPipeline {
    type Prepared;

    /// Everything that does not depend on `C_LP`.
    fn prepare(&self, train: &[LocalDataset]) -> Result<Self::Prepared>;

    /// Mean squared prediction error over every validation sample.
    fn validation_mse(
        &self,
        prepared: &Self::Prepared,
        c_lp: f64,
        validation: &[LocalDataset],
    ) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationOptions {
    /// Share of each holdout used for training; the rest validates.
    pub train_fraction: f64,
    /// Shuffle holdouts with this seed before splitting. Prefix split when `None`.
    pub shuffle_seed: Option<u64>,
    /// Number of disjoint validation blocks to average over. Fold 0 is the
    /// plain split; fold `f` moves the validation block `f` blocks earlier.
    pub folds: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            shuffle_seed: None,
            folds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub c_lp: f64,
    /// `(candidate, validation MSE)` in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Splits one holdout into training and validation parts.
pub fn split_holdout(
    holdout: &LocalDataset,
    train_fraction: f64,
    shuffle_seed: Option<u64>,
) -> Result<(LocalDataset, LocalDataset)> {
    split_fold(holdout, train_fraction, shuffle_seed, 0)
}

fn split_fold(
    holdout: &LocalDataset,
    train_fraction: f64,
    shuffle_seed: Option<u64>,
    fold: usize,
) -> Result<(LocalDataset, LocalDataset)> {
    let n = holdout.len();
    if n < 2 {
        return arg(format!("a holdout of {n} sample(s) cannot be split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let shift = (fold * (n - n_train)) % n;
    order.rotate_right(shift);
    let data = holdout.permuted(&order);
    Ok((data.slice(0, n_train), data.slice(n_train, n)))
}

/// Picks the grid value with the lowest validation error; ties go to the
/// earlier candidate.
pub fn calibrate_clp<P: ClpPipeline>(
    holdouts: &[LocalDataset],
    grid: &[f64],
    pipeline: &P,
    options: CalibrationOptions,
) -> Result<Calibration> {
    if holdouts.is_empty() {
        return arg("calibration needs at least one holdout");
    }
    if grid.is_empty() {
        return arg("calibration grid is empty");
    }
    if grid.iter().any(|c| !(*c > 0.0)) {
        return arg("calibration candidates must be positive");
    }
    if !(options.train_fraction > 0.0 && options.train_fraction < 1.0) {
        return arg("train fraction must lie in (0, 1)");
    }
    if options.folds == 0 {
        return arg("calibration needs at least one fold");
    }
    let mut totals = vec![0.0; grid.len()];
    for fold in 0..options.folds {
        let mut train = Vec::with_capacity(holdouts.len());
        let mut valid = Vec::with_capacity(holdouts.len());
        for (j, h) in holdouts.iter().enumerate() {
            let seed = options.shuffle_seed.map(|s| s.wrapping_add(j as u64));
            let (t, v) = split_fold(h, options.train_fraction, seed, fold)?;
            train.push(t);
            valid.push(v);
        }
        let prepared = pipeline.prepare(&train)?;
        for (total, &c) in totals.iter_mut().zip(grid) {
            *total += pipeline.validation_mse(&prepared, c, &valid)?;
        }
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for (&c, total) in grid.iter().zip(totals) {
        let mse = total / options.folds as f64;
        scores.push((c, mse));
        if mse.is_finite() && best.is_none_or(|(_, b)| mse < b) {
            best = Some((c, mse));
        }
    }
    let (c_lp, _) = best.ok_or_else(|| {
        Error::Numeric("no calibration candidate produced a finite validation error".into())
    })?;
    Ok(Calibration { c_lp, scores })
}
