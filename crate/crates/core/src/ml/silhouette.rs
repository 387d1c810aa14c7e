//! Silhouette coefficient for a labeled partition.

use super::MlError;
use crate::features::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const DEFAULT_SAMPLE_CAP: usize = 10_000;

/// Fixed seed for the subsample so repeated calls agree bit for bit.
const SUBSAMPLE_SEED: u64 = 0x51_1f_0e_77;

/// Mean over points of `(b - a) / max(a, b)` where `a` is the mean
/// intra-cluster distance and `b` the smallest mean distance to another
/// cluster. Points in singleton clusters contribute 0. Inputs larger
/// than `sample_cap` are reduced to a deterministic uniform subsample
/// (topped up so at least two clusters stay represented).
pub fn silhouette(
    x: &FeatureMatrix,
    labels: &[usize],
    sample_cap: usize,
) -> Result<f64, MlError> {
    assert_eq!(x.n_rows(), labels.len(), "label count must match rows");
    let n = x.n_rows();
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(MlError::SingleCluster);
    }

    let picked: Vec<usize> = if n <= sample_cap {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..sample_cap {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(sample_cap);
        let mut present: std::collections::BTreeSet<usize> =
            idx.iter().map(|&i| labels[i]).collect();
        if present.len() < 2 {
            for (i, &l) in labels.iter().enumerate() {
                if !present.contains(&l) {
                    idx.push(i);
                    present.insert(l);
                    if present.len() >= 2 {
                        break;
                    }
                }
            }
        }
        idx.sort_unstable();
        idx
    };

    // Compact cluster ids over the sampled points.
    let mut cluster_of: Vec<usize> = Vec::with_capacity(picked.len());
    let mut remap: HashMap<usize, usize> = HashMap::new();
    for &i in &picked {
        let next = remap.len();
        let c = *remap.entry(labels[i]).or_insert(next);
        cluster_of.push(c);
    }
    let n_clusters = remap.len();
    if n_clusters < 2 {
        return Err(MlError::SingleCluster);
    }
    let mut sizes = vec![0usize; n_clusters];
    for &c in &cluster_of {
        sizes[c] += 1;
    }

    let rows: Vec<&[f64]> = picked.iter().map(|&i| x.row(i)).collect();
    let m = rows.len();
    let dim = x.n_cols();

    let mut total = 0.0;
    let mut sums = vec![0.0; n_clusters];
    for i in 0..m {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let ri = rows[i];
        for j in 0..m {
            if i == j {
                continue;
            }
            let rj = rows[j];
            let mut d2 = 0.0;
            for d in 0..dim {
                let diff = ri[d] - rj[d];
                d2 += diff * diff;
            }
            sums[cluster_of[j]] += d2.sqrt();
        }
        let own = cluster_of[i];
        if sizes[own] <= 1 {
            continue; // singleton: contributes 0
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..n_clusters {
            if c != own && sizes[c] > 0 {
                b = b.min(sums[c] / sizes[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_from_rows(rows: &[Vec<f64>]) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("e{i}")).collect();
        let dim = rows[0].len();
        let cols: Vec<(&str, Vec<f64>)> = (0..dim)
            .map(|j| ("c", rows.iter().map(|r| r[j]).collect()))
            .collect();
        FeatureMatrix::from_raw_columns(ids, cols)
    }

    /// Textbook definition over all pairwise distances.
    pub(crate) fn brute_force(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = rows.len();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut total = 0.0;
        for i in 0..n {
            let own = labels[i];
            let own_size = labels.iter().filter(|&&l| l == own).count();
            if own_size <= 1 {
                continue;
            }
            let a: f64 = (0..n)
                .filter(|&j| j != i && labels[j] == own)
                .map(|j| dist(&rows[i], &rows[j]))
                .sum::<f64>()
                / (own_size - 1) as f64;
            let mut b = f64::INFINITY;
            let others: std::collections::BTreeSet<usize> =
                labels.iter().copied().filter(|&l| l != own).collect();
            for c in others {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                let mean = members.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>()
                    / members.len() as f64;
                b = b.min(mean);
            }
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
        total / n as f64
    }

    #[test]
    fn matches_oracle_on_two_tight_clusters() {
        // Raw-space rows; the matrix normalizes, so feed the oracle the
        // normalized rows.
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ];
        let labels = vec![0, 0, 1, 1];
        let x = matrix_from_rows(&rows);
        let norm: Vec<Vec<f64>> = x.rows().map(|r| r.to_vec()).collect();
        let got = silhouette(&x, &labels, DEFAULT_SAMPLE_CAP).unwrap();
        let want = brute_force(&norm, &labels);
        assert!((got - want).abs() < 1e-12);
        assert!(got > 0.85);
    }

    #[test]
    fn single_cluster_is_an_error() {
        let x = matrix_from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        assert_eq!(
            silhouette(&x, &[3, 3, 3], DEFAULT_SAMPLE_CAP).unwrap_err(),
            MlError::SingleCluster
        );
    }

    #[test]
    fn all_singletons_score_zero() {
        let x = matrix_from_rows(&[vec![0.0], vec![1.0], vec![5.0]]);
        assert_eq!(silhouette(&x, &[0, 1, 2], DEFAULT_SAMPLE_CAP).unwrap(), 0.0);
    }

    #[test]
    fn subsample_is_deterministic_and_keeps_two_clusters() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..3000 {
            rows.push(vec![(i % 13) as f64, (i % 7) as f64]);
            labels.push(0);
        }
        rows.push(vec![100.0, 100.0]);
        labels.push(1);
        let x = matrix_from_rows(&rows);
        let a = silhouette(&x, &labels, 200).unwrap();
        let b = silhouette(&x, &labels, 200).unwrap();
        assert_eq!(a, b);
    }
}
