//! Gaussian mixture model with full covariances, fitted by EM.

use super::MlError;
use crate::features::FeatureMatrix;
use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_REG_EPS: f64 = 1e-6;

/// Fitted mixture parameters, stored as flat arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmParams {
    pub k: usize,
    pub dim: usize,
    /// Component weights, sum 1.
    pub weights: Vec<f64>,
    /// `k * dim`, row per component.
    pub means: Vec<f64>,
    /// `k * dim * dim`, row-major per component; regularized SPD.
    pub covariances: Vec<f64>,
    /// Mean per-sample log-likelihood after each E-step; non-decreasing.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub rng_seed: u64,
}

impl GmmParams {
    pub fn mean_of(&self, comp: usize) -> &[f64] {
        &self.means[comp * self.dim..(comp + 1) * self.dim]
    }

    pub fn covariance_of(&self, comp: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.covariances[comp * d2..(comp + 1) * d2]
    }
}

/// Per-component Cholesky factor of the covariance, for fast repeated
/// density evaluation.
struct CompFactor {
    lower: Vec<f64>,
    log_det: f64,
}

fn factorize(cov: &[f64], dim: usize, reg_eps: f64) -> Result<CompFactor, MlError> {
    let mut extra = 0.0f64;
    for _ in 0..4 {
        let mut m = DMatrix::from_row_slice(dim, dim, cov);
        if extra > 0.0 {
            for d in 0..dim {
                m[(d, d)] += extra;
            }
        }
        if let Some(ch) = Cholesky::new(m) {
            let l = ch.l();
            let mut log_det = 0.0;
            let mut lower = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..=r {
                    lower[r * dim + c] = l[(r, c)];
                }
                log_det += 2.0 * l[(r, r)].ln();
            }
            if log_det.is_finite() {
                return Ok(CompFactor { lower, log_det });
            }
        }
        extra = if extra == 0.0 { reg_eps.max(1e-10) * 10.0 } else { extra * 100.0 };
    }
    Err(MlError::SingularCovariance)
}

/// Squared Mahalanobis distance via forward substitution with the
/// Cholesky factor.
fn mahalanobis_sq(factor: &CompFactor, diff: &mut [f64], dim: usize) -> f64 {
    let l = &factor.lower;
    let mut acc = 0.0;
    for r in 0..dim {
        let mut v = diff[r];
        for c in 0..r {
            v -= l[r * dim + c] * diff[c];
        }
        let y = v / l[r * dim + r];
        diff[r] = y;
        acc += y * y;
    }
    acc
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

struct LogDensityModel<'a> {
    dim: usize,
    log_weights: Vec<f64>,
    means: &'a [f64],
    factors: Vec<CompFactor>,
}

impl<'a> LogDensityModel<'a> {
    fn new(
        k: usize,
        dim: usize,
        weights: &[f64],
        means: &'a [f64],
        covs: &[f64],
        reg_eps: f64,
    ) -> Result<Self, MlError> {
        let factors = (0..k)
            .map(|i| factorize(&covs[i * dim * dim..(i + 1) * dim * dim], dim, reg_eps))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dim,
            log_weights: weights.iter().map(|w| w.max(1e-300).ln()).collect(),
            means,
            factors,
        })
    }

    /// Writes per-component weighted log densities into `out` and
    /// returns their log-sum-exp (the row's log-likelihood).
    fn row_log_densities(&self, row: &[f64], out: &mut [f64], scratch: &mut [f64]) -> f64 {
        let dim = self.dim;
        for (i, slot) in out.iter_mut().enumerate() {
            let mean = &self.means[i * dim..(i + 1) * dim];
            for d in 0..dim {
                scratch[d] = row[d] - mean[d];
            }
            let maha = mahalanobis_sq(&self.factors[i], scratch, dim);
            *slot = self.log_weights[i]
                - 0.5 * (dim as f64 * LN_2PI + self.factors[i].log_det + maha);
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = out.iter().map(|v| (v - max).exp()).sum();
        max + sum.ln()
    }
}

/// Log of the mixture density at `row` (the model's probability
/// density function evaluated pointwise).
pub fn log_density(params: &GmmParams, row: &[f64]) -> Result<f64, MlError> {
    if row.len() != params.dim {
        return Err(MlError::DimensionMismatch {
            expected: params.dim,
            got: row.len(),
        });
    }
    let model = LogDensityModel::new(
        params.k,
        params.dim,
        &params.weights,
        &params.means,
        &params.covariances,
        DEFAULT_REG_EPS,
    )?;
    let mut out = vec![0.0; params.k];
    let mut scratch = vec![0.0; params.dim];
    Ok(model.row_log_densities(row, &mut out, &mut scratch))
}

fn kmeanspp_means(rows: &[&[f64]], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len();
    let mut means = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    means.extend_from_slice(rows[first]);

    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut best: Vec<f64> = rows.iter().map(|r| dist2(r, rows[first])).collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                acc += d;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        means.extend_from_slice(rows[next]);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(rows[i], rows[next]));
        }
    }
    means
}

fn global_covariance(rows: &[&[f64]], dim: usize, reg_eps: f64) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            mean[d] += r[d];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        for a in 0..dim {
            let da = r[a] - mean[a];
            for b in a..dim {
                cov[a * dim + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[a * dim + b] / n;
            cov[a * dim + b] = v;
            cov[b * dim + a] = v;
        }
        cov[a * dim + a] += reg_eps;
    }
    cov
}

/// Fits a `k`-component mixture by EM. Iterates until the mean
/// log-likelihood moves less than `tol` or `max_iter` is reached;
/// `reg_eps` is added to covariance diagonals every M-step.
pub fn gmm_fit_em(
    x: &FeatureMatrix,
    k: usize,
    reg_eps: f64,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<GmmParams, MlError> {
    let n = x.n_rows();
    let dim = x.n_cols();
    if k < 1 || n < k {
        return Err(MlError::TooFewSamples { need: k.max(1), got: n });
    }
    let rows: Vec<&[f64]> = x.rows().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut weights = vec![1.0 / k as f64; k];
    let mut means = kmeanspp_means(&rows, k, dim, &mut rng);
    let init_cov = global_covariance(&rows, dim, reg_eps);
    let mut covs = Vec::with_capacity(k * dim * dim);
    for _ in 0..k {
        covs.extend_from_slice(&init_cov);
    }

    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_ll = f64::NEG_INFINITY;

    for _ in 0..max_iter {
        // E-step.
        let model = LogDensityModel::new(k, dim, &weights, &means, &covs, reg_eps)?;
        let mut ll_sum = 0.0;
        let mut scratch = vec![0.0; dim];
        for (i, row) in rows.iter().enumerate() {
            let slot = &mut resp[i * k..(i + 1) * k];
            let lse = model.row_log_densities(row, slot, &mut scratch);
            ll_sum += lse;
            for v in slot.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ll = ll_sum / n as f64;
        trace.push(ll);
        if (ll - prev_ll).abs() < tol {
            converged = true;
            break;
        }
        prev_ll = ll;

        // M-step.
        let mut nk = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                nk[c] += resp[i * k + c];
            }
        }
        for c in 0..k {
            nk[c] = nk[c].max(1e-12);
            weights[c] = nk[c] / n as f64;
        }
        means.iter_mut().for_each(|m| *m = 0.0);
        for (i, row) in rows.iter().enumerate() {
            for c in 0..k {
                let r = resp[i * k + c];
                let mean = &mut means[c * dim..(c + 1) * dim];
                for d in 0..dim {
                    mean[d] += r * row[d];
                }
            }
        }
        for c in 0..k {
            for d in 0..dim {
                means[c * dim + d] /= nk[c];
            }
        }
        covs.iter_mut().for_each(|v| *v = 0.0);
        let mut diff = vec![0.0; dim];
        for (i, row) in rows.iter().enumerate() {
            for c in 0..k {
                let r = resp[i * k + c];
                if r < 1e-12 {
                    continue;
                }
                let mean = &means[c * dim..(c + 1) * dim];
                for d in 0..dim {
                    diff[d] = row[d] - mean[d];
                }
                let cov = &mut covs[c * dim * dim..(c + 1) * dim * dim];
                for a in 0..dim {
                    let rda = r * diff[a];
                    for b in a..dim {
                        cov[a * dim + b] += rda * diff[b];
                    }
                }
            }
        }
        for c in 0..k {
            let cov = &mut covs[c * dim * dim..(c + 1) * dim * dim];
            for a in 0..dim {
                for b in a..dim {
                    let v = cov[a * dim + b] / nk[c];
                    cov[a * dim + b] = v;
                    cov[b * dim + a] = v;
                }
                cov[a * dim + a] += reg_eps;
            }
        }
    }

    Ok(GmmParams {
        k,
        dim,
        weights,
        means,
        covariances: covs,
        log_likelihood_trace: trace,
        converged,
        rng_seed: seed,
    })
}

/// Hard assignment plus the responsibility vector for one row. Ties go
/// to the lowest component index.
pub fn gmm_predict(params: &GmmParams, row: &[f64]) -> Result<(usize, Vec<f64>), MlError> {
    if row.len() != params.dim {
        return Err(MlError::DimensionMismatch {
            expected: params.dim,
            got: row.len(),
        });
    }
    let model = LogDensityModel::new(
        params.k,
        params.dim,
        &params.weights,
        &params.means,
        &params.covariances,
        DEFAULT_REG_EPS,
    )?;
    let mut dens = vec![0.0; params.k];
    let mut scratch = vec![0.0; params.dim];
    let lse = model.row_log_densities(row, &mut dens, &mut scratch);
    for v in dens.iter_mut() {
        *v = (*v - lse).exp();
    }
    let total: f64 = dens.iter().sum();
    for v in dens.iter_mut() {
        *v /= total;
    }
    let mut best = 0;
    for (i, &r) in dens.iter().enumerate() {
        if r > dens[best] {
            best = i;
        }
    }
    Ok((best, dens))
}

/// Batch hard assignments with the winning responsibility per row.
pub fn gmm_assign_all(params: &GmmParams, x: &FeatureMatrix) -> Result<Vec<(usize, f64)>, MlError> {
    if x.n_cols() != params.dim {
        return Err(MlError::DimensionMismatch {
            expected: params.dim,
            got: x.n_cols(),
        });
    }
    let model = LogDensityModel::new(
        params.k,
        params.dim,
        &params.weights,
        &params.means,
        &params.covariances,
        DEFAULT_REG_EPS,
    )?;
    let mut dens = vec![0.0; params.k];
    let mut scratch = vec![0.0; params.dim];
    let mut out = Vec::with_capacity(x.n_rows());
    for row in x.rows() {
        let lse = model.row_log_densities(row, &mut dens, &mut scratch);
        let mut best = 0;
        let mut total = 0.0;
        for v in dens.iter_mut() {
            *v = (*v - lse).exp();
            total += *v;
        }
        for (i, &r) in dens.iter().enumerate() {
            if r > dens[best] {
                best = i;
            }
        }
        out.push((best, dens[best] / total));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn matrix_from_rows(rows: &[Vec<f64>]) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("e{i}")).collect();
        let dim = rows[0].len();
        let cols: Vec<(&str, Vec<f64>)> = (0..dim)
            .map(|j| ("c", rows.iter().map(|r| r[j]).collect()))
            .collect();
        FeatureMatrix::from_raw_columns(ids, cols)
    }

    fn two_gaussians(seed: u64, per_cluster: usize) -> (Vec<Vec<f64>>, FeatureMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        for &center in &[0.0, 10.0] {
            for _ in 0..per_cluster {
                rows.push(vec![center + unit.sample(&mut rng), center + unit.sample(&mut rng)]);
            }
        }
        let m = matrix_from_rows(&rows);
        (rows, m)
    }

    #[test]
    fn single_component_recovers_mean_and_covariance() {
        let rows = vec![
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 0.0],
            vec![7.0, 6.0],
        ];
        let x = matrix_from_rows(&rows);
        let p = gmm_fit_em(&x, 1, 1e-6, 100, 1e-9, 0).unwrap();

        // Oracle: sample mean and biased covariance of the normalized rows.
        let norm: Vec<Vec<f64>> = x.rows().map(|r| r.to_vec()).collect();
        let n = norm.len() as f64;
        let mean: Vec<f64> = (0..2).map(|d| norm.iter().map(|r| r[d]).sum::<f64>() / n).collect();
        for d in 0..2 {
            assert!((p.mean_of(0)[d] - mean[d]).abs() < 1e-9);
        }
        for a in 0..2 {
            for b in 0..2 {
                let cov_ab: f64 = norm
                    .iter()
                    .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                    .sum::<f64>()
                    / n;
                let expect = cov_ab + if a == b { 1e-6 } else { 0.0 };
                assert!((p.covariance_of(0)[a * 2 + b] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recovers_two_planted_gaussians() {
        // Planted centers (0,0) and (10,10); in the min-max normalized
        // space they land at roughly 0.22 and 0.78 per axis, split by
        // the sample extremes. Compare against normalized truth.
        let (_, x) = two_gaussians(11, 500);
        let p = gmm_fit_em(&x, 2, 1e-6, 200, 1e-7, 3).unwrap();
        let truth: Vec<Vec<f64>> = vec![
            (0..2).map(|j| x.stats[j].apply(0.0)).collect(),
            (0..2).map(|j| x.stats[j].apply(10.0)).collect(),
        ];
        let spread: Vec<f64> = (0..2).map(|j| x.stats[j].max - x.stats[j].min).collect();
        let mut matched = [false; 2];
        for c in 0..2 {
            let m = p.mean_of(c);
            for (t, truth_mean) in truth.iter().enumerate() {
                // L2 in raw units below 0.3.
                let d2: f64 = (0..2)
                    .map(|j| ((m[j] - truth_mean[j]) * spread[j]).powi(2))
                    .sum();
                if d2.sqrt() < 0.3 {
                    matched[t] = true;
                }
            }
            assert!((p.weights[c] - 0.5).abs() < 0.05);
        }
        assert!(matched[0] && matched[1]);
    }

    #[test]
    fn log_likelihood_trace_is_non_decreasing() {
        let (_, x) = two_gaussians(23, 200);
        let p = gmm_fit_em(&x, 3, 1e-6, 200, 1e-9, 5).unwrap();
        for w in p.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace dipped: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn predict_is_confident_at_a_component_mean() {
        let (_, x) = two_gaussians(7, 400);
        let p = gmm_fit_em(&x, 2, 1e-6, 200, 1e-7, 1).unwrap();
        let (cluster, resp) = gmm_predict(&p, p.mean_of(1)).unwrap();
        assert_eq!(cluster, 1);
        assert!(resp[1] > 0.99);
        assert!((resp.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn symmetric_point_ties_to_lowest_index() {
        let params = GmmParams {
            k: 2,
            dim: 2,
            weights: vec![0.5, 0.5],
            means: vec![0.0, 0.0, 2.0, 0.0],
            covariances: vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            log_likelihood_trace: vec![],
            converged: true,
            rng_seed: 0,
        };
        let (cluster, resp) = gmm_predict(&params, &[1.0, 0.0]).unwrap();
        assert_eq!(cluster, 0);
        assert_eq!(resp[0], 0.5);
        assert_eq!(resp[1], 0.5);
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let (rows, x) = two_gaussians(3, 100);
        let p = gmm_fit_em(&x, 4, 1e-6, 100, 1e-6, 9).unwrap();
        for row in rows.iter().take(50) {
            let norm: Vec<f64> = (0..2).map(|j| x.stats[j].apply(row[j])).collect();
            let (_, resp) = gmm_predict(&p, &norm).unwrap();
            assert!((resp.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn density_integrates_to_one_in_2d() {
        // Monte Carlo check of the mixture density over a box that
        // captures essentially all the mass.
        let params = GmmParams {
            k: 2,
            dim: 2,
            weights: vec![0.3, 0.7],
            means: vec![0.0, 0.0, 1.5, -0.5],
            covariances: vec![1.0, 0.2, 0.2, 0.8, 0.5, 0.0, 0.0, 0.5],
            log_likelihood_trace: vec![],
            converged: true,
            rng_seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let (lo, hi) = (-7.0, 8.5);
        let vol = (hi - lo) * (hi - lo);
        let samples = 400_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let p = [
                lo + rng.random::<f64>() * (hi - lo),
                lo + rng.random::<f64>() * (hi - lo),
            ];
            acc += log_density(&params, &p).unwrap().exp();
        }
        let integral = vol * acc / samples as f64;
        assert!((integral - 1.0).abs() < 0.02, "integral = {integral}");
    }

    #[test]
    fn k_larger_than_rows_is_rejected() {
        let x = matrix_from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(matches!(
            gmm_fit_em(&x, 3, 1e-6, 10, 1e-6, 0),
            Err(MlError::TooFewSamples { .. })
        ));
    }
}
