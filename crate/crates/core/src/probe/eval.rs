use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::svm::{train_linear_svm, LinearSvmModel, SvmConfig};
use super::{EmbeddingSet, ProbeError, Result};
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub fingerprint: String,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`, pooled over all test rows.
    pub accuracy: f64,
    pub per_class: BTreeMap<String, ClassScore>,
    pub fold_accuracies: Vec<f64>,
    pub mean_fold_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Default)]
struct Tally {
    correct: usize,
    total: usize,
    per_class: BTreeMap<String, (usize, usize)>,
}

impl Tally {
    fn score(&mut self, model: &LinearSvmModel, test: &EmbeddingSet) -> Result<(usize, usize)> {
        let known: BTreeMap<&str, ()> = model.classes.iter().map(|c| (c.as_str(), ())).collect();
        if let Some(r) = test.rows().iter().find(|r| !known.contains_key(r.viewer_id.as_str())) {
            return Err(ProbeError::UnknownLabel(r.viewer_id.clone()));
        }
        if test.width() != model.width() {
            return Err(ProbeError::Contract(format!(
                "model expects width {}, embeddings have {}",
                model.width(),
                test.width()
            )));
        }
        let mut correct = 0;
        for r in test.rows() {
            let hit = model.predict(&r.h) == r.viewer_id;
            let entry = self.per_class.entry(r.viewer_id.clone()).or_default();
            entry.1 += 1;
            if hit {
                entry.0 += 1;
                correct += 1;
            }
        }
        self.correct += correct;
        self.total += test.len();
        Ok((correct, test.len()))
    }

    fn report(self, task: &str, split: String, fingerprint: &str) -> EvalReport {
        EvalReport {
            task: task.to_string(),
            split,
            fingerprint: fingerprint.to_string(),
            correct: self.correct,
            total: self.total,
            accuracy: ratio(self.correct, self.total),
            per_class: self
                .per_class
                .into_iter()
                .map(|(k, (c, t))| {
                    (
                        k,
                        ClassScore {
                            correct: c,
                            total: t,
                            accuracy: ratio(c, t),
                        },
                    )
                })
                .collect(),
            fold_accuracies: Vec::new(),
            mean_fold_accuracy: None,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores `model` on `test`; every test label must be a model class.
pub fn evaluate(model: &LinearSvmModel, test: &EmbeddingSet) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(ProbeError::Contract("cannot evaluate on an empty set".into()));
    }
    let mut tally = Tally::default();
    tally.score(model, test)?;
    Ok(tally.report("biometrics", "held-out".into(), ""))
}

/// Fold index per row. Each viewer's rows are shuffled with `seed` and dealt
/// round-robin, so every fold holds every viewer in counts that differ by at
/// most one.
pub fn viewer_folds(set: &EmbeddingSet, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(ProbeError::Contract(format!("need at least 2 folds, got {folds}")));
    }
    let mut by_viewer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.rows().iter().enumerate() {
        by_viewer.entry(r.viewer_id.as_str()).or_default().push(i);
    }
    let mut assignment = vec![0; set.len()];
    for (v, (viewer, mut rows)) in by_viewer.into_iter().enumerate() {
        if rows.len() < folds {
            return Err(ProbeError::InsufficientData(format!(
                "viewer `{viewer}` has {} recordings, fewer than {folds} folds",
                rows.len()
            )));
        }
        rows.shuffle(&mut substream(seed, Domain::Folds, v as u64, 0));
        for (rank, i) in rows.into_iter().enumerate() {
            assignment[i] = rank % folds;
        }
    }
    Ok(assignment)
}

/// Viewer-stratified k-fold linear probe. The pooled accuracy covers every
/// row exactly once; fold accuracies and their mean are reported too.
pub fn cross_validate(
    set: &EmbeddingSet,
    folds: usize,
    svm: SvmConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    let assignment = viewer_folds(set, folds, seed)?;
    let mut tally = Tally::default();
    let mut fold_accuracies = Vec::with_capacity(folds);
    for f in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| assignment[i] == f);
        let model = train_linear_svm(&set.subset(&train), svm)?;
        let (c, t) = tally.score(&model, &set.subset(&test))?;
        fold_accuracies.push(ratio(c, t));
    }
    let split = format!("viewer-stratified {folds}-fold, seed {seed}, C {}, {} iterations", svm.c, svm.iterations);
    let mut report = tally.report("biometrics", split, fingerprint);
    report.mean_fold_accuracy = Some(fold_accuracies.iter().sum::<f64>() / folds as f64);
    report.fold_accuracies = fold_accuracies;
    Ok(report)
}
