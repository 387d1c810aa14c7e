//! Min-max scaling of feature columns into [0, 1].

use serde::{Deserialize, Serialize};

/// Per-column extrema recorded at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
}

impl ColumnStats {
    /// Scans a column for its extrema. Empty columns get `[0, 0]`.
    pub fn fit(column: &[f64]) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in column {
            if v < min {
                min = v;
            }
            if v > max {
                max = v;
            }
        }
        if column.is_empty() {
            return Self { min: 0.0, max: 0.0 };
        }
        Self { min, max }
    }

    /// Scales one value. Constant columns map to 0 and out-of-range
    /// values (possible when applying train-time stats to new data) are
    /// clamped into [0, 1].
    pub fn apply(&self, x: f64) -> f64 {
        if self.max <= self.min {
            return 0.0;
        }
        ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    /// Undoes `apply` for values produced from in-range inputs.
    pub fn invert(&self, xn: f64) -> f64 {
        if self.max <= self.min {
            return self.min;
        }
        self.min + xn * (self.max - self.min)
    }
}

/// Scales a whole column with the given stats.
pub fn minmax_normalize(column: &[f64], stats: ColumnStats) -> Vec<f64> {
    column.iter().map(|&x| stats.apply(x)).collect()
}

/// Linearly interpolated quantile (the common "type 7" definition).
/// `q` is clamped into [0, 1]; an empty slice yields 0.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Median of a slice; 0 for empty input.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_scales_to_half() {
        let stats = ColumnStats { min: 0.0, max: 10.0 };
        assert_eq!(stats.apply(5.0), 0.5);
    }

    #[test]
    fn boundaries_are_exact() {
        let stats = ColumnStats { min: 2.0, max: 8.0 };
        assert_eq!(stats.apply(2.0), 0.0);
        assert_eq!(stats.apply(8.0), 1.0);
    }

    #[test]
    fn small_column_normalizes_to_unit_range() {
        let col = [1.0, 2.0, 3.0];
        let stats = ColumnStats::fit(&col);
        assert_eq!(minmax_normalize(&col, stats), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let col = [4.2, 4.2, 4.2];
        let stats = ColumnStats::fit(&col);
        assert_eq!(minmax_normalize(&col, stats), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_values_clamp() {
        let stats = ColumnStats { min: 0.0, max: 1.0 };
        assert_eq!(stats.apply(-3.0), 0.0);
        assert_eq!(stats.apply(7.0), 1.0);
    }

    #[test]
    fn normalizing_normalized_column_is_identity() {
        let col = [0.0, 0.25, 0.5, 1.0];
        let stats = ColumnStats { min: 0.0, max: 1.0 };
        assert_eq!(minmax_normalize(&col, stats), col.to_vec());
    }

    #[test]
    fn invert_recovers_raw_values() {
        let col = [3.0, 9.5, -2.0, 7.25];
        let stats = ColumnStats::fit(&col);
        for &v in &col {
            assert!((stats.invert(stats.apply(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_interpolates() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&vals, 0.0), 1.0);
        assert_eq!(quantile(&vals, 1.0), 4.0);
        assert_eq!(quantile(&vals, 0.5), 2.5);
        assert!((quantile(&vals, 0.25) - 1.75).abs() < 1e-12);
    }
}
