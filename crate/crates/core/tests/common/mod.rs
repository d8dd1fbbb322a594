//! Independent reference implementations used as test oracles. None of
//! these call into the library's metric, loss or eigen code.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-loop feature smoothing: for each present class, the mean squared
/// distance of its rows to their centroid; averaged over present classes.
pub fn fsl_oracle(features: &[f64], d: usize, labels: &[usize]) -> f64 {
    let max_label = labels.iter().copied().max().unwrap();
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..=max_label {
        let rows: Vec<&[f64]> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| &features[i * d..(i + 1) * d])
            .collect();
        if rows.is_empty() {
            continue;
        }
        present += 1;
        let mut centroid = vec![0.0; d];
        for r in &rows {
            for j in 0..d {
                centroid[j] += r[j];
            }
        }
        for v in centroid.iter_mut() {
            *v /= rows.len() as f64;
        }
        let mut sq = 0.0;
        for r in &rows {
            for j in 0..d {
                sq += (r[j] - centroid[j]).powi(2);
            }
        }
        total += sq / rows.len() as f64;
    }
    total / present as f64
}

#[derive(Debug, Clone)]
pub struct MetricOracle {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub recall_min: f64,
    pub confusion: Vec<Vec<u64>>,
}

fn population_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Counts true/false positives directly from the label and prediction
/// lists, class by class.
pub fn metric_oracle(labels: &[usize], preds: &[usize], classes: usize) -> MetricOracle {
    let mut o = MetricOracle {
        precision: vec![],
        recall: vec![],
        f1: vec![],
        support: vec![],
        accuracy: 0.0,
        macro_f1: 0.0,
        f1_std: 0.0,
        recall_mean: 0.0,
        recall_std: 0.0,
        recall_min: 0.0,
        confusion: vec![vec![0; classes]; classes],
    };
    for c in 0..classes {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for (&l, &p) in labels.iter().zip(preds) {
            match (l == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        o.precision.push(p);
        o.recall.push(r);
        o.f1.push(f);
        o.support.push(tp + fn_);
    }
    for (&l, &p) in labels.iter().zip(preds) {
        o.confusion[l][p] += 1;
    }
    let hits = labels.iter().zip(preds).filter(|(l, p)| l == p).count();
    o.accuracy = hits as f64 / labels.len() as f64;
    o.macro_f1 = o.f1.iter().sum::<f64>() / classes as f64;
    o.f1_std = population_std(&o.f1);
    o.recall_mean = o.recall.iter().sum::<f64>() / classes as f64;
    o.recall_std = population_std(&o.recall);
    o.recall_min = o.recall.iter().copied().fold(f64::INFINITY, f64::min);
    o
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` over all positive/negative pairs.
pub fn auc_oracle(scores: &[f64], positives: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positives[i] && !positives[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Event formulation of plateau reduction: the learning rate drops once
/// `patience` epochs have passed since the later of the last improvement
/// and the last reduction.
pub fn plateau_oracle(losses: &[f64], lr0: f64, patience: usize, factor: f64, min_delta: f64) -> Vec<f64> {
    let mut best = f64::INFINITY;
    let mut last_event = 0usize;
    let mut lr = lr0;
    let mut trace = Vec::new();
    for (i, &v) in losses.iter().enumerate() {
        let epoch = i + 1;
        if best - v > min_delta {
            best = v;
            last_event = epoch;
        } else if epoch - last_event >= patience {
            lr *= factor;
            last_event = epoch;
        }
        trace.push(lr);
    }
    trace
}

/// `(stop_epoch, best_epoch)`: stop once `patience` epochs have passed
/// since the last improvement; best is the first minimum seen so far.
pub fn early_stop_oracle(losses: &[f64], patience: usize, min_delta: f64) -> (Option<usize>, usize) {
    let mut best = f64::INFINITY;
    let mut last_improvement = 0usize;
    for (i, &v) in losses.iter().enumerate() {
        let epoch = i + 1;
        if best - v > min_delta {
            best = v;
            last_improvement = epoch;
        }
        if epoch - last_improvement >= patience {
            return (Some(epoch), argmin_first(&losses[..epoch]) + 1);
        }
    }
    (None, argmin_first(losses) + 1)
}

pub fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// Descending eigenvalues of the `N−1` sample covariance, via nalgebra.
pub fn covariance_eigenvalues(features: &[f64], n: usize, d: usize) -> Vec<f64> {
    let x = DMatrix::from_row_slice(n, d, features);
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut vals: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Random orthogonal `d×d` matrix (row-major) from a QR factorization.
pub fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let m = DMatrix::from_fn(d, d, |_, _| r.gen_range(-1.0..1.0));
    let q = m.qr().q();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(q[(i, j)]);
        }
    }
    out
}

/// Random probability rows, occasionally with exact ties.
pub fn random_probs(n: usize, c: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        let raw: Vec<f64> = if r.gen_bool(0.2) {
            (0..c).map(|_| r.gen_range(1..4) as f64).collect()
        } else {
            (0..c).map(|_| r.gen_range(0.01..1.0)).collect()
        };
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

pub fn class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class{i}")).collect()
}
