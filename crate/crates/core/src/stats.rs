//! Small descriptive statistics shared by the summaries and diagnostics.

use serde::Serialize;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two values.
pub fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Quantile of sorted data by linear interpolation between order statistics
/// (position `p·(n−1)`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, SD and equal-tailed credible interval of one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

pub fn credible_interval(values: &[f64], level: f64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Empty("no draws to summarize".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("credible level must lie in (0, 1), got {level}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok(Interval {
        mean: mean(values),
        sd: sd(values),
        lower: quantile_sorted(&sorted, tail),
        upper: quantile_sorted(&sorted, 1.0 - tail),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_to_hundred_interval() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let ci = credible_interval(&xs, 0.95).unwrap();
        assert!((ci.lower - 3.475).abs() < 1e-12);
        assert!((ci.upper - 97.525).abs() < 1e-12);
        assert_eq!(ci.mean, 50.5);
    }

    #[test]
    fn constant_draws_collapse() {
        let ci = credible_interval(&[2.5; 7], 0.9).unwrap();
        assert_eq!((ci.lower, ci.mean, ci.upper, ci.sd), (2.5, 2.5, 2.5, 0.0));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(credible_interval(&[], 0.95).is_err());
        assert!(credible_interval(&[1.0], 1.0).is_err());
    }
}
