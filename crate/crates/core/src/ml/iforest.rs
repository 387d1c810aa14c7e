//! Isolation forest outlier detection.
//!
//! Anomalies sit in sparse regions and take fewer random axis-aligned
//! splits to isolate, so their average path length across the ensemble
//! is short and their score `2^(-E[h]/c(n))` is high.

use super::{average_path_length, MlError};
use crate::features::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// One isolation tree over a subsample, stored as an index arena.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ITree {
    nodes: Vec<Node>,
    pub height_limit: usize,
}

impl ITree {
    fn build(rows: &[&[f64]], rng: &mut ChaCha8Rng, height_limit: usize) -> Self {
        let mut tree = ITree {
            nodes: Vec::new(),
            height_limit,
        };
        let idx: Vec<usize> = (0..rows.len()).collect();
        tree.grow(rows, idx, 0, rng);
        tree
    }

    fn grow(&mut self, rows: &[&[f64]], idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        if depth >= self.height_limit || idx.len() <= 1 {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return self.nodes.len() - 1;
        }
        let dim = rows[0].len();
        // Candidate features must spread at this node.
        let mut spread: Vec<(usize, f64, f64)> = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in &idx {
                let v = rows[i][j];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi > lo {
                spread.push((j, lo, hi));
            }
        }
        if spread.is_empty() {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return self.nodes.len() - 1;
        }
        let (feature, lo, hi) = spread[rng.random_range(0..spread.len())];
        let mut frac: f64 = rng.random();
        if frac == 0.0 {
            frac = 0.5;
        }
        let value = lo + frac * (hi - lo);

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| rows[i][feature] < value);

        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { size: 0 }); // placeholder
        let left = self.grow(rows, left_idx, depth + 1, rng);
        let right = self.grow(rows, right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        slot
    }

    fn path_length(&self, row: &[f64]) -> f64 {
        let mut cur = 0usize;
        let mut depth = 0.0;
        loop {
            match &self.nodes[cur] {
                Node::Leaf { size } => return depth + average_path_length(*size),
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    cur = if row[*feature] < *value { *left } else { *right };
                    depth += 1.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<ITree>,
    pub n_trees: usize,
    /// Effective subsample size (capped at the training row count).
    pub subsample_size: usize,
    pub contamination: f64,
    /// Scores at or above this were flagged at training time.
    pub score_threshold: f64,
    pub rng_seed: u64,
    dim: usize,
    #[serde(skip)]
    train_scores: Vec<f64>,
    #[serde(skip)]
    train_flags: Vec<bool>,
}

pub const DEFAULT_N_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;

impl IsolationForest {
    /// Fits an ensemble of `n_trees` trees on independent subsamples and
    /// fixes the flagging threshold so that a `contamination` fraction
    /// of the training rows is flagged.
    pub fn fit(
        x: &FeatureMatrix,
        contamination: f64,
        n_trees: usize,
        subsample_size: usize,
        seed: u64,
    ) -> Result<Self, MlError> {
        let n = x.n_rows();
        if n < 2 {
            return Err(MlError::TooFewSamples { need: 2, got: n });
        }
        assert!(
            contamination > 0.0 && contamination <= 0.5,
            "contamination must lie in (0, 0.5]"
        );
        let rows: Vec<&[f64]> = x.rows().collect();
        let sub = subsample_size.min(n).max(2);
        let height_limit = (sub as f64).log2().ceil() as usize;

        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let sample = sample_without_replacement(n, sub, &mut rng);
            let sample_rows: Vec<&[f64]> = sample.iter().map(|&i| rows[i]).collect();
            trees.push(ITree::build(&sample_rows, &mut rng, height_limit));
        }

        let mut forest = IsolationForest {
            trees,
            n_trees,
            subsample_size: sub,
            contamination,
            score_threshold: f64::MAX,
            rng_seed: seed,
            dim: x.n_cols(),
            train_scores: Vec::new(),
            train_flags: Vec::new(),
        };

        let scores: Vec<f64> = rows.iter().map(|r| forest.score_unchecked(r)).collect();
        let k = flag_count(n, contamination);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut flags = vec![false; n];
        for &i in order.iter().take(k) {
            flags[i] = true;
        }
        forest.score_threshold = if k > 0 { scores[order[k - 1]] } else { f64::MAX };
        forest.train_scores = scores;
        forest.train_flags = flags;
        Ok(forest)
    }

    fn score_unchecked(&self, row: &[f64]) -> f64 {
        let c = average_path_length(self.subsample_size);
        if c == 0.0 {
            return 1.0;
        }
        let mean_path: f64 =
            self.trees.iter().map(|t| t.path_length(row)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean_path / c)
    }

    /// Anomaly score in (0, 1); higher is more anomalous.
    pub fn score(&self, row: &[f64]) -> Result<f64, MlError> {
        if row.len() != self.dim {
            return Err(MlError::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        Ok(self.score_unchecked(row))
    }

    pub fn is_outlier(&self, row: &[f64]) -> Result<bool, MlError> {
        Ok(self.score(row)? >= self.score_threshold)
    }

    /// Scores of the training rows, in row order.
    pub fn train_scores(&self) -> &[f64] {
        &self.train_scores
    }

    /// Exactly `round-down(contamination * n)` training rows are true.
    pub fn train_flags(&self) -> &[bool] {
        &self.train_flags
    }

    /// Re-thresholds the already-fitted ensemble for a different
    /// contamination level; tree structure is independent of it.
    pub fn with_contamination(&self, contamination: f64) -> Self {
        assert!(
            contamination > 0.0 && contamination <= 0.5,
            "contamination must lie in (0, 0.5]"
        );
        let n = self.train_scores.len();
        let k = flag_count(n, contamination);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.train_scores[b]
                .partial_cmp(&self.train_scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut flags = vec![false; n];
        for &i in order.iter().take(k) {
            flags[i] = true;
        }
        Self {
            contamination,
            score_threshold: if k > 0 { self.train_scores[order[k - 1]] } else { f64::MAX },
            train_flags: flags,
            ..self.clone()
        }
    }

    #[cfg(test)]
    pub(crate) fn duplicate_trees(&self) -> Self {
        let mut doubled = self.clone();
        doubled.trees.extend(self.trees.iter().cloned());
        doubled
    }
}

fn flag_count(n: usize, contamination: f64) -> usize {
    ((contamination * n as f64) + 1e-9).floor() as usize
}

fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx
}
