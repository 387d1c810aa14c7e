//! Gaussian process regression in one dimension with a squared
//! exponential kernel, used as the surrogate for hyper-parameter
//! search.

use super::MlError;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_f: f64,
    pub length_scale: f64,
}

impl KernelParams {
    fn k(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.sigma_f * self.sigma_f * (-d * d / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Posterior mean and variance at a query point, under a zero prior
/// mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPosterior {
    pub mean: f64,
    pub variance: f64,
}

const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Standard GP regression: `mean = k*ᵀ K⁻¹ y`,
/// `var = k(x*,x*) − k*ᵀ K⁻¹ k*`. The Gram matrix gets diagonal jitter,
/// escalated on factorization failure up to 1e-4.
pub fn gp_fit_posterior(
    observations: &[(f64, f64)],
    query: f64,
    kernel: &KernelParams,
) -> Result<GpPosterior, MlError> {
    assert!(!observations.is_empty(), "GP needs at least one observation");
    let n = observations.len();
    let y = DVector::from_iterator(n, observations.iter().map(|&(_, y)| y));
    let k_star = DVector::from_iterator(n, observations.iter().map(|&(x, _)| kernel.k(x, query)));

    for &jitter in &JITTER_LADDER {
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                gram[(i, j)] = kernel.k(observations[i].0, observations[j].0);
            }
            gram[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(gram) {
            let alpha = chol.solve(&y);
            let v = chol.solve(&k_star);
            let mean = k_star.dot(&alpha);
            let variance = (kernel.k(query, query) - k_star.dot(&v)).max(0.0);
            if mean.is_finite() && variance.is_finite() {
                return Ok(GpPosterior { mean, variance });
            }
        }
    }
    Err(MlError::IllConditioned)
}

#[cfg(test)]
mod tests {
    use super::*;

    const KP: KernelParams = KernelParams {
        sigma_f: 1.0,
        length_scale: 0.3,
    };

    #[test]
    fn interpolates_observed_points() {
        let obs = vec![(0.0, 1.5), (0.5, -0.7), (1.0, 0.2)];
        for &(x, y) in &obs {
            let p = gp_fit_posterior(&obs, x, &KP).unwrap();
            assert!((p.mean - y).abs() < 1e-6, "mean {} vs {}", p.mean, y);
            assert!(p.variance < 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let obs = vec![(0.0, 2.0), (0.1, 2.1)];
        let p = gp_fit_posterior(&obs, 50.0, &KP).unwrap();
        assert!(p.mean.abs() < 1e-3);
        assert!((p.variance - KP.sigma_f * KP.sigma_f).abs() < 1e-3);
    }

    #[test]
    fn matches_closed_form_solve_at_midpoint() {
        // Three observations on the line y = x; solve K a = y directly
        // with Gaussian elimination (jitter included) and compare.
        let obs = [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)];
        let query = 0.25;
        let n = 3;
        let mut k = [[0.0f64; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = KP.k(obs[i].0, obs[j].0);
            }
            k[i][i] += 1e-8;
        }
        let mut y = [obs[0].1, obs[1].1, obs[2].1];
        // Forward elimination.
        for col in 0..n {
            for row in (col + 1)..n {
                let f = k[row][col] / k[col][col];
                for c2 in col..n {
                    k[row][c2] -= f * k[col][c2];
                }
                y[row] -= f * y[col];
            }
        }
        // Back substitution.
        let mut alpha = [0.0f64; 3];
        for row in (0..n).rev() {
            let mut acc = y[row];
            for c2 in (row + 1)..n {
                acc -= k[row][c2] * alpha[c2];
            }
            alpha[row] = acc / k[row][row];
        }
        let want: f64 = (0..n).map(|i| KP.k(obs[i].0, query) * alpha[i]).sum();

        let got = gp_fit_posterior(&obs, query, &KP).unwrap();
        assert!((got.mean - want).abs() < 1e-9, "{} vs {}", got.mean, want);
    }
}
