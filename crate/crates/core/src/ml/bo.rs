//! Bayesian optimization over a one-dimensional search space, using
//! the GP surrogate and expected improvement.

use super::gp::{gp_fit_posterior, KernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchSpace {
    Continuous { lo: f64, hi: f64 },
    /// Inclusive integer range; proposals are rounded and de-duplicated.
    Integer { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoConfig {
    pub space: SearchSpace,
    /// Total objective evaluations.
    pub budget: usize,
    /// Random evaluations before the surrogate takes over.
    pub n_init: usize,
    pub seed: u64,
}

pub const DEFAULT_BUDGET: usize = 25;
pub const DEFAULT_N_INIT: usize = 5;
const ACQ_GRID: usize = 1024;
const EI_XI: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct BoResult {
    pub best_x: f64,
    pub best_y: f64,
    /// Every evaluation in order; length equals the budget.
    pub history: Vec<(f64, f64)>,
}

fn expected_improvement(mean: f64, variance: f64, best: f64, normal: &Normal) -> f64 {
    let improvement = mean - best - EI_XI;
    let sigma = variance.sqrt();
    if sigma < 1e-12 {
        return improvement.max(0.0);
    }
    let z = improvement / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    improvement * normal.cdf(z) + sigma * pdf
}

/// Maximizes `objective` over the space within `config.budget`
/// evaluations: `n_init` seeded random probes, then expected
/// improvement maximized over a dense candidate grid. Integer spaces
/// are effectively enumerated once the budget covers them.
pub fn bo_gp_optimize(mut objective: impl FnMut(f64) -> f64, config: &BoConfig) -> BoResult {
    assert!(config.budget > config.n_init, "budget must exceed n_init");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = match config.space {
        SearchSpace::Continuous { lo, hi } => (lo, hi),
        SearchSpace::Integer { lo, hi } => (lo as f64, hi as f64),
    };
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let snap = |x: f64| -> f64 {
        match config.space {
            SearchSpace::Continuous { .. } => x.clamp(lo, hi),
            SearchSpace::Integer { lo: ilo, hi: ihi } => {
                (x.round() as i64).clamp(ilo, ihi) as f64
            }
        }
    };

    let mut history: Vec<(f64, f64)> = Vec::with_capacity(config.budget);
    let mut evaluated = std::collections::BTreeSet::new();
    let key = |x: f64| x.to_bits();
    let mut run = |x: f64, history: &mut Vec<(f64, f64)>, evaluated: &mut std::collections::BTreeSet<u64>| {
        let y = objective(x);
        history.push((x, y));
        evaluated.insert(key(x));
    };

    // Seed phase: without replacement on small integer spaces so the
    // enumeration guarantee holds, uniform otherwise.
    match config.space {
        SearchSpace::Integer { lo: ilo, hi: ihi } => {
            let count = (ihi - ilo + 1) as usize;
            let mut pool: Vec<i64> = (ilo..=ihi).collect();
            for i in 0..config.n_init.min(count) {
                let j = rng.random_range(i..count);
                pool.swap(i, j);
                run(pool[i] as f64, &mut history, &mut evaluated);
            }
            while history.len() < config.n_init {
                run(snap(lo + rng.random::<f64>() * width), &mut history, &mut evaluated);
            }
        }
        SearchSpace::Continuous { .. } => {
            for _ in 0..config.n_init {
                run(snap(lo + rng.random::<f64>() * width), &mut history, &mut evaluated);
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let kernel = KernelParams {
        sigma_f: 1.0, // rescaled per iteration from the observed spread
        length_scale: 0.1,
    };

    while history.len() < config.budget {
        // Center y and scale the kernel to the observed spread; x is
        // mapped to [0, 1].
        let y_mean = history.iter().map(|&(_, y)| y).sum::<f64>() / history.len() as f64;
        let y_std = (history.iter().map(|&(_, y)| (y - y_mean).powi(2)).sum::<f64>()
            / history.len() as f64)
            .sqrt();
        let kernel = KernelParams {
            sigma_f: y_std.max(1e-3),
            ..kernel
        };
        let obs: Vec<(f64, f64)> = history
            .iter()
            .map(|&(x, y)| ((x - lo) / width, y - y_mean))
            .collect();
        let best_y = history.iter().map(|&(_, y)| y).fold(f64::NEG_INFINITY, f64::max);

        let candidates: Vec<f64> = match config.space {
            SearchSpace::Continuous { .. } => (0..ACQ_GRID)
                .map(|i| lo + width * (i as f64 + 0.5) / ACQ_GRID as f64)
                .collect(),
            SearchSpace::Integer { lo: ilo, hi: ihi } => {
                let count = (ihi - ilo + 1) as usize;
                if count <= ACQ_GRID {
                    (ilo..=ihi).map(|v| v as f64).collect()
                } else {
                    (0..ACQ_GRID)
                        .map(|i| snap(lo + width * i as f64 / (ACQ_GRID - 1) as f64))
                        .collect()
                }
            }
        };

        let mut best_new: Option<(f64, f64)> = None; // (ei, x), fresh points only
        let mut best_any: Option<(f64, f64)> = None;
        for &c in &candidates {
            let u = (c - lo) / width;
            let Ok(post) = gp_fit_posterior(&obs, u, &kernel) else {
                continue;
            };
            let ei = expected_improvement(post.mean + y_mean, post.variance, best_y, &normal);
            if best_any.map_or(true, |(b, _)| ei > b) {
                best_any = Some((ei, c));
            }
            if !evaluated.contains(&key(c)) && best_new.map_or(true, |(b, _)| ei > b) {
                best_new = Some((ei, c));
            }
        }
        let next = best_new
            .or(best_any)
            .map(|(_, x)| x)
            .unwrap_or_else(|| snap(lo + rng.random::<f64>() * width));
        run(next, &mut history, &mut evaluated);
    }

    let mut best = 0;
    for (i, &(_, y)) in history.iter().enumerate() {
        if y > history[best].1 {
            best = i;
        }
    }
    BoResult {
        best_x: history[best].0,
        best_y: history[best].1,
        history,
    }
}
