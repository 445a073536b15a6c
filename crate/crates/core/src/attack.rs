//! Trace-based inference attack and empirical Bayes-risk estimation.
//!
//! The adversary sees windows of `L` consecutive released points and
//! predicts the grid cell of the last true fix in the window with a k-NN
//! classifier, k = round(ln T) for T training windows. The held-out error
//! rate of that classifier is the Bayes-risk estimate.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geo::PlanarPoint;
use crate::ingest::{CellId, Grid};
use crate::rng::RngSeed;

/// Fewest samples accepted by [`estimate_bayes_risk`].
pub const MIN_SAMPLES: usize = 10;
/// Default held-out fraction.
pub const DEFAULT_EVAL_SPLIT: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("window length must be at least 1")]
    WindowLength,
    #[error("trace {index}: {true_len} true fixes but {released_len} released points")]
    Misaligned {
        index: usize,
        true_len: usize,
        released_len: usize,
    },
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("split must lie strictly between 0 and 1, got {0}")]
    Split(f64),
    #[error("feature length {got} does not match the model's {want}")]
    FeatureLength { got: usize, want: usize },
    #[error("empty training set")]
    EmptyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSample {
    /// Flattened (x, y) of the window's released points, oldest first.
    pub features: Vec<f64>,
    /// Cell of the window's last true fix.
    pub label: CellId,
}

/// Samples built from a set of traces, plus how many were skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackDataset {
    pub samples: Vec<AttackSample>,
    /// Traces shorter than the window.
    pub short_traces: usize,
    /// Windows whose labelled fix fell outside the grid.
    pub outside_grid: usize,
}

/// Slides a window of `window_len` over each (true, released) pair of
/// region-relative planar traces.
pub fn build_attack_dataset(
    traces: &[(Vec<PlanarPoint>, Vec<PlanarPoint>)],
    grid: &Grid,
    window_len: usize,
) -> Result<AttackDataset, AttackError> {
    if window_len == 0 {
        return Err(AttackError::WindowLength);
    }
    let mut out = AttackDataset::default();
    for (index, (truth, released)) in traces.iter().enumerate() {
        if truth.len() != released.len() {
            return Err(AttackError::Misaligned {
                index,
                true_len: truth.len(),
                released_len: released.len(),
            });
        }
        if truth.len() < window_len {
            out.short_traces += 1;
            continue;
        }
        for end in window_len..=truth.len() {
            let Ok(label) = grid.to_cell(truth[end - 1]) else {
                out.outside_grid += 1;
                continue;
            };
            let features = released[end - window_len..end]
                .iter()
                .flat_map(|p| [p.x, p.y])
                .collect();
            out.samples.push(AttackSample { features, label });
        }
    }
    Ok(out)
}

/// k for a training set of `t` samples: round(ln t), at least 1.
pub fn knn_k(t: usize) -> usize {
    if t <= 1 {
        return 1;
    }
    ((t as f64).ln().round() as usize).max(1)
}

/// Brute-force k-nearest-neighbor classifier over flat feature rows.
#[derive(Debug, Clone)]
pub struct KnnModel {
    features: Vec<f64>,
    labels: Vec<CellId>,
    dim: usize,
    k: usize,
}

impl KnnModel {
    /// Builds a model with k = [`knn_k`] of the training size.
    pub fn fit(samples: &[AttackSample]) -> Result<Self, AttackError> {
        Self::with_k(samples, knn_k(samples.len()))
    }

    pub fn with_k(samples: &[AttackSample], k: usize) -> Result<Self, AttackError> {
        let first = samples.first().ok_or(AttackError::EmptyModel)?;
        let dim = first.features.len();
        let mut features = Vec::with_capacity(dim * samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if s.features.len() != dim {
                return Err(AttackError::FeatureLength {
                    got: s.features.len(),
                    want: dim,
                });
            }
            features.extend_from_slice(&s.features);
            labels.push(s.label);
        }
        Ok(KnnModel {
            features,
            labels,
            dim,
            k: k.clamp(1, samples.len()),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Majority label among the k nearest training rows. Ties between
    /// labels go to the label of the nearest tied neighbor.
    pub fn predict(&self, query: &[f64]) -> Result<CellId, AttackError> {
        if query.len() != self.dim {
            return Err(AttackError::FeatureLength {
                got: query.len(),
                want: self.dim,
            });
        }
        let mut dists: Vec<(f64, u32)> = self
            .features
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, row)| {
                let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i as u32)
            })
            .collect();
        let by_dist = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dists.len() {
            dists.select_nth_unstable_by(self.k - 1, by_dist);
            dists.truncate(self.k);
        }
        dists.sort_unstable_by(by_dist);

        // label -> (votes, rank of nearest neighbor with that label)
        let mut votes: HashMap<CellId, (usize, usize)> = HashMap::with_capacity(self.k);
        for (rank, &(_, i)) in dists.iter().enumerate() {
            let e = votes.entry(self.labels[i as usize]).or_insert((0, rank));
            e.0 += 1;
        }
        let (label, _) = votes
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .expect("k >= 1");
        Ok(label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub bayes_risk: f64,
    pub n_eval: usize,
    pub n_train: usize,
    pub k: usize,
}

/// Held-out k-NN error on a random train/eval split. `split` is the eval
/// fraction.
pub fn estimate_bayes_risk(
    samples: &[AttackSample],
    split: f64,
    seed: RngSeed,
    exec: Execution,
) -> Result<RiskEstimate, AttackError> {
    if samples.len() < MIN_SAMPLES {
        return Err(AttackError::TooFewSamples(samples.len()));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(AttackError::Split(split));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed.stream());
    let n_eval = ((samples.len() as f64 * split).round() as usize).clamp(1, samples.len() - 1);
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let train: Vec<AttackSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let model = KnnModel::fit(&train)?;
    let wrong = exec
        .map(eval_idx, |&i| {
            let s = &samples[i];
            model.predict(&s.features).map(|p| usize::from(p != s.label))
        })
        .into_iter()
        .sum::<Result<usize, _>>()?;
    Ok(RiskEstimate {
        bayes_risk: wrong as f64 / n_eval as f64,
        n_eval,
        n_train: train.len(),
        k: model.k(),
    })
}
