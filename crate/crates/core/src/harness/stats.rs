use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("empty series")]
    EmptySeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (n - 1 denominator); absent for n < 2.
    pub std_corrected: Option<f64>,
    #[serde(skip)]
    pub ecdf: Vec<(f64, f64)>,
}

pub fn summarize(values: &[f64]) -> Result<MetricsSummary, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let std_corrected = (n >= 2)
        .then(|| (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Ok(MetricsSummary {
        n,
        mean,
        median,
        min: sorted[0],
        max: sorted[n - 1],
        std_corrected,
        ecdf: ecdf_sorted(&sorted),
    })
}

/// Step points of the empirical CDF: one `(x, F(x))` per distinct value, ascending.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ecdf_sorted(&sorted))
}

fn ecdf_sorted(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = f,
            _ => out.push((v, f)),
        }
    }
    out
}

/// F(x) of a step ECDF.
pub fn ecdf_at(points: &[(f64, f64)], x: f64) -> f64 {
    points
        .iter()
        .take_while(|(v, _)| *v <= x)
        .last()
        .map_or(0.0, |p| p.1)
}

/// Fraction of values strictly below `x`.
pub fn fraction_below(values: &[f64], x: f64) -> f64 {
    values.iter().filter(|&&v| v < x).count() as f64 / values.len() as f64
}

/// Linear-interpolated percentile, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = p.clamp(0.0, 100.0) / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(s[lo] + (s[hi] - s[lo]) * (rank - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max), (2.0, 2.0, 1.0, 3.0));
        let s = summarize(&[2.0, 4.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert!((s.std_corrected.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[5.0]).unwrap().std_corrected, None);
        assert_eq!(summarize(&[]), Err(StatsError::EmptySeries));
        assert_eq!(ecdf(&[]), Err(StatsError::EmptySeries));
    }

    #[test]
    fn ecdf_examples() {
        let e = ecdf(&[5.0, 1.0, 3.0]).unwrap();
        assert_eq!(ecdf_at(&e, 3.0), 2.0 / 3.0);
        assert_eq!(ecdf_at(&e, 0.5), 0.0);
        assert_eq!(ecdf(&[7.0; 4]).unwrap(), vec![(7.0, 1.0)]);
        assert_eq!(e.last().unwrap().1, 1.0);
    }

    #[test]
    fn percentile_and_fraction() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), Some(95.0));
        assert_eq!(percentile(&[1.0, 2.0], 50.0), Some(1.5));
        assert_eq!(fraction_below(&[1.0, 2.0, 3.0, 4.0], 3.0), 0.5);
    }
}
