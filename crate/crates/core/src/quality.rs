//! Aggregation of redundant worker answers into one label per object.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateLabel {
    pub label: String,
    /// Answers agreeing with `label`.
    pub support: usize,
    pub total: usize,
    /// Whether another label reached the same score.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerAnswer {
    pub worker_id: String,
    pub label: String,
}

impl WorkerAnswer {
    pub fn new(worker_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum QualityError {
    #[error("object {0} has no answers")]
    EmptyAssignments(usize),
    #[error("answer {0:?} is outside the enumerated label space")]
    NonEnumeratedLabels(String),
    #[error("unknown quality-control method {0:?}")]
    UnknownMethod(String),
}

/// Majority vote over one object's answers. Ties go to the
/// lexicographically smallest label and are flagged.
pub fn vote<S: AsRef<str>>(labels: &[S]) -> Option<AggregateLabel> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    let max = *counts.values().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == max).map(|(l, _)| *l);
    let label = winners.next()?.to_string();
    Some(AggregateLabel {
        label,
        support: max,
        total: labels.len(),
        tie: winners.next().is_some(),
    })
}

pub fn majority_vote<S: AsRef<str>>(
    objects: &[Vec<S>],
) -> Result<Vec<AggregateLabel>, QualityError> {
    objects
        .iter()
        .enumerate()
        .map(|(i, labels)| vote(labels).ok_or(QualityError::EmptyAssignments(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerModel {
    pub worker_id: String,
    /// true label -> given label -> probability
    pub confusion: BTreeMap<String, BTreeMap<String, f64>>,
    pub prior: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmParams {
    pub max_iters: usize,
    pub tol: f64,
    pub smoothing: f64,
}

impl Default for EmParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            smoothing: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOutput {
    pub labels: Vec<AggregateLabel>,
    pub workers: Vec<WorkerModel>,
    /// Sorted label space; posterior columns follow this order.
    pub label_space: Vec<String>,
    pub posteriors: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Largest |sum(posterior) - 1| observed at any iteration.
    pub max_normalization_error: f64,
}

/// Dawid-Skene EM over per-worker confusion matrices, started from the
/// majority vote. The final label is the posterior argmax among labels the
/// object actually received.
pub fn em_dawid_skene(
    objects: &[Vec<WorkerAnswer>],
    label_space: &[String],
    params: EmParams,
) -> Result<EmOutput, QualityError> {
    let labels: Vec<String> = label_space
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let label_ix: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let workers: Vec<String> = objects
        .iter()
        .flatten()
        .map(|a| a.worker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let worker_ix: BTreeMap<&str, usize> = workers
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();

    // (worker, given label) per object
    let mut obs: Vec<Vec<(usize, usize)>> = Vec::with_capacity(objects.len());
    for (i, answers) in objects.iter().enumerate() {
        if answers.is_empty() {
            return Err(QualityError::EmptyAssignments(i));
        }
        let mut row = Vec::with_capacity(answers.len());
        for a in answers {
            let l = *label_ix
                .get(a.label.as_str())
                .ok_or_else(|| QualityError::NonEnumeratedLabels(a.label.clone()))?;
            row.push((worker_ix[a.worker_id.as_str()], l));
        }
        obs.push(row);
    }

    let k = labels.len();
    let n = objects.len();
    let mut post: Vec<Vec<f64>> = objects
        .iter()
        .map(|answers| {
            let mv = vote(&answers.iter().map(|a| a.label.as_str()).collect::<Vec<_>>())
                .expect("non-empty");
            let mut row = vec![0.0; k];
            row[label_ix[mv.label.as_str()]] = 1.0;
            row
        })
        .collect();

    let mut prior = vec![1.0 / k as f64; k];
    let mut confusion = vec![vec![vec![1.0 / k as f64; k]; k]; workers.len()];
    let mut iterations = 0;
    let mut max_norm_err: f64 = 0.0;

    while iterations < params.max_iters && n > 0 {
        iterations += 1;

        // M-step
        for (j, p) in prior.iter_mut().enumerate() {
            *p = post.iter().map(|row| row[j]).sum::<f64>() + params.smoothing;
        }
        let z: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= z);

        for m in confusion.iter_mut() {
            for row in m.iter_mut() {
                row.iter_mut().for_each(|c| *c = params.smoothing);
            }
        }
        for (i, row) in obs.iter().enumerate() {
            for &(w, given) in row {
                for t in 0..k {
                    confusion[w][t][given] += post[i][t];
                }
            }
        }
        for m in confusion.iter_mut() {
            for row in m.iter_mut() {
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|c| *c /= z);
            }
        }

        // E-step
        let mut delta: f64 = 0.0;
        for (i, row) in obs.iter().enumerate() {
            let mut logp: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
            for &(w, given) in row {
                for (t, lp) in logp.iter_mut().enumerate() {
                    *lp += confusion[w][t][given].ln();
                }
            }
            let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logp.iter().map(|lp| (lp - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let new_row: Vec<f64> = exps.iter().map(|e| e / z).collect();
            max_norm_err = max_norm_err.max((new_row.iter().sum::<f64>() - 1.0).abs());
            for (a, b) in new_row.iter().zip(&post[i]) {
                delta = delta.max((a - b).abs());
            }
            post[i] = new_row;
        }
        if delta < params.tol {
            break;
        }
    }

    let out_labels = objects
        .iter()
        .zip(&post)
        .map(|(answers, p)| {
            let seen: BTreeSet<usize> =
                answers.iter().map(|a| label_ix[a.label.as_str()]).collect();
            let best = seen.iter().map(|&j| p[j]).fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = seen
                .iter()
                .copied()
                .filter(|&j| (p[j] - best).abs() <= 1e-12)
                .collect();
            let label = labels[winners[0]].clone();
            let support = answers.iter().filter(|a| a.label == label).count();
            AggregateLabel {
                label,
                support,
                total: answers.len(),
                tie: winners.len() > 1,
            }
        })
        .collect();

    let prior_map: BTreeMap<String, f64> =
        labels.iter().cloned().zip(prior.iter().copied()).collect();
    let worker_models = workers
        .iter()
        .zip(&confusion)
        .map(|(w, m)| WorkerModel {
            worker_id: w.clone(),
            confusion: labels
                .iter()
                .zip(m)
                .map(|(t, row)| {
                    (
                        t.clone(),
                        labels.iter().cloned().zip(row.iter().copied()).collect(),
                    )
                })
                .collect(),
            prior: prior_map.clone(),
        })
        .collect();

    Ok(EmOutput {
        labels: out_labels,
        workers: worker_models,
        label_space: labels,
        posteriors: post,
        iterations,
        max_normalization_error: max_norm_err,
    })
}
