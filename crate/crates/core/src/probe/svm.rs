//! One-vs-rest linear SVM trained by deterministic full-batch subgradient
//! descent on the L2-regularized hinge loss.
//!
//! Per class, with labels `y in {-1, +1}` and `x~ = [x, 1]`:
//!
//! ```text
//! F(w~) = lambda/2 |w~|^2 + (1/n) sum_i max(0, 1 - y_i w~ . x~_i),   lambda = 1 / (C n)
//! ```
//!
//! Steps are `1 / (lambda t)` followed by projection onto the ball of radius
//! `1 / sqrt(lambda)`; the iterate with the lowest objective is kept.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{EmbeddingSet, ProbeError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub classes: Vec<String>,
    /// `[classes][width]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub c: f64,
}

impl LinearSvmModel {
    pub fn width(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, h: &[f32]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(h).map(|(a, x)| a * *x as f64).sum::<f64>() + b)
            .collect()
    }

    /// Index of the highest score; ties go to the earlier class.
    pub fn predict_index(&self, h: &[f32]) -> usize {
        argmax(&self.scores(h))
    }

    pub fn predict(&self, h: &[f32]) -> &str {
        &self.classes[self.predict_index(h)]
    }
}

pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Hinge objective of one binary problem at `w` (bias last).
pub fn binary_objective(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = x.iter().zip(y).map(|(xi, yi)| (1.0 - yi * dot(w, xi)).max(0.0)).sum();
    reg + hinge / x.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes [`binary_objective`]; returns the best iterate (bias last).
pub fn train_binary(x: &[Vec<f64>], y: &[f64], lambda: f64, iterations: usize) -> Vec<f64> {
    let n = x.len() as f64;
    let d = x[0].len();
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d];
    let mut best = (f64::INFINITY, w.clone());
    let mut step_dir = vec![0.0; d];
    for t in 1..=iterations {
        step_dir.iter_mut().for_each(|v| *v = 0.0);
        let mut hinge = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            let margin = 1.0 - yi * dot(&w, xi);
            if margin > 0.0 {
                hinge += margin;
                step_dir.iter_mut().zip(xi).for_each(|(s, v)| *s += yi * v);
            }
        }
        let norm2: f64 = w.iter().map(|v| v * v).sum();
        let objective = 0.5 * lambda * norm2 + hinge / n;
        if objective < best.0 {
            best = (objective, w.clone());
        }
        let eta = 1.0 / (lambda * t as f64);
        let shrink = 1.0 - eta * lambda;
        for (wi, s) in w.iter_mut().zip(&step_dir) {
            *wi = shrink * *wi + eta * s / n;
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > radius {
            w.iter_mut().for_each(|v| *v *= radius / norm);
        }
    }
    if binary_objective(x, y, &w, lambda) < best.0 {
        best.1 = w;
    }
    best.1
}

/// Trains one binary classifier per viewer against all others.
pub fn train_linear_svm(train: &EmbeddingSet, config: SvmConfig) -> Result<LinearSvmModel> {
    if !(config.c > 0.0 && config.c.is_finite()) {
        return Err(ProbeError::Contract(format!("C must be positive, got {}", config.c)));
    }
    if config.iterations == 0 {
        return Err(ProbeError::Contract("iteration budget must be positive".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in train.rows() {
        *counts.entry(r.viewer_id.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(ProbeError::Contract(format!(
            "linear SVM needs at least 2 classes, got {}",
            counts.len()
        )));
    }
    let classes: Vec<String> = counts.keys().map(|c| c.to_string()).collect();
    let x: Vec<Vec<f64>> = train
        .rows()
        .iter()
        .map(|r| r.h.iter().map(|v| *v as f64).chain([1.0]).collect())
        .collect();
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ProbeError::Contract("non-finite feature in training set".into()));
    }
    let lambda = 1.0 / (config.c * x.len() as f64);
    let solved: Vec<Vec<f64>> = classes
        .par_iter()
        .map(|class| {
            let y: Vec<f64> = train
                .rows()
                .iter()
                .map(|r| if &r.viewer_id == class { 1.0 } else { -1.0 })
                .collect();
            train_binary(&x, &y, lambda, config.iterations)
        })
        .collect();
    let width = train.width();
    Ok(LinearSvmModel {
        classes,
        biases: solved.iter().map(|w| w[width]).collect(),
        weights: solved.into_iter().map(|mut w| {
            w.truncate(width);
            w
        }).collect(),
        c: config.c,
    })
}
