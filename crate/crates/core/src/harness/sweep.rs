//! Throughput sweep: backlog growth per rate and a latency-vs-rate trend test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::breakdown::assemble_breakdown;
use super::scenario::ScenarioConfig;
use super::sim::RunRecords;
use super::stats::percentile;
use super::{collect, ScenarioError};

/// Share of consecutive one-second windows whose mean backlog must rise for
/// a rate to count as saturated.
pub const GROWTH_FRACTION: f64 = 0.8;
const WINDOW_NS: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub rate_hz: f64,
    pub published: usize,
    pub completed: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// Mean backlog (published minus completed) per one-second window.
    pub backlog: Vec<f64>,
    pub growing_fraction: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeTest {
    pub rates: Vec<f64>,
    pub slope_ms_per_hz: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub points: Vec<RatePoint>,
    pub saturation_hz: Option<f64>,
    /// Trend of mean latency over the rates below saturation.
    pub slope: Option<SlopeTest>,
}

/// Mean backlog per window, sampled at every publish instant.
pub fn backlog_windows(published_at: &[u64], completed_at: &[Option<u64>]) -> Vec<f64> {
    let Some(&start) = published_at.first() else {
        return Vec::new();
    };
    let mut done: Vec<u64> = completed_at.iter().flatten().copied().collect();
    done.sort_unstable();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut finished = 0;
    for (i, &p) in published_at.iter().enumerate() {
        while finished < done.len() && done[finished] <= p {
            finished += 1;
        }
        let w = ((p - start) / WINDOW_NS) as usize;
        if sums.len() <= w {
            sums.resize(w + 1, (0.0, 0));
        }
        sums[w].0 += (i + 1 - finished) as f64;
        sums[w].1 += 1;
    }
    sums.into_iter()
        .filter(|s| s.1 > 0)
        .map(|(s, n)| s / n as f64)
        .collect()
}

pub fn growing_fraction(windows: &[f64]) -> f64 {
    if windows.len() < 2 {
        return 0.0;
    }
    let up = windows.windows(2).filter(|w| w[1] > w[0]).count();
    up as f64 / (windows.len() - 1) as f64
}

/// Ordinary least squares of y on x with a two-sided t-test on the slope.
pub fn slope_test(x: &[f64], y: &[f64]) -> Option<SlopeTest> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let dof = (n - 2) as f64;
    let se = (sse / dof / sxx).sqrt();
    let p_value = if se == 0.0 {
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = StudentsT::new(0.0, 1.0, dof).ok()?;
        2.0 * (1.0 - t.cdf((slope / se).abs()))
    };
    Some(SlopeTest {
        rates: x.to_vec(),
        slope_ms_per_hz: slope,
        p_value,
    })
}

fn rate_point(cfg: &ScenarioConfig, records: &RunRecords) -> RatePoint {
    let totals: Vec<f64> = records
        .samples
        .iter()
        .filter_map(|(_, r)| assemble_breakdown(r, cfg.topology).ok())
        .map(|b| b.total)
        .collect();
    let backlog = backlog_windows(&records.published_at, &records.completed_at);
    let growing = growing_fraction(&backlog);
    RatePoint {
        rate_hz: cfg.rate_hz,
        published: records.published_at.len(),
        completed: records.completed_at.iter().flatten().count(),
        mean_ms: if totals.is_empty() {
            f64::NAN
        } else {
            totals.iter().sum::<f64>() / totals.len() as f64
        },
        p95_ms: percentile(&totals, 95.0).unwrap_or(f64::NAN),
        backlog,
        growing_fraction: growing,
        saturated: growing >= GROWTH_FRACTION,
    }
}

/// Runs `base` once per rate for `window_s` seconds each. Every rate gets its
/// own seed so the trend test sees independent noise.
pub fn sweep_throughput(
    base: &ScenarioConfig,
    rates: &[f64],
    window_s: f64,
) -> Result<SaturationReport, ScenarioError> {
    let mut points = Vec::with_capacity(rates.len());
    for (i, &rate) in rates.iter().enumerate() {
        let mut cfg = ScenarioConfig {
            rate_hz: rate,
            sample_count: (rate * window_s).round().max(1.0) as usize,
            ..base.clone()
        };
        cfg.seed = base.seed.wrapping_add(i as u64);
        cfg.shaper.seed = base.shaper.seed.wrapping_add(i as u64);
        let records = collect(&cfg)?;
        let p = rate_point(&cfg, &records);
        tracing::info!(
            rate,
            mean_ms = p.mean_ms,
            growing = p.growing_fraction,
            "rate done"
        );
        points.push(p);
    }
    let saturation_hz = points.iter().find(|p| p.saturated).map(|p| p.rate_hz);
    let below: Vec<&RatePoint> = points
        .iter()
        .filter(|p| saturation_hz.is_none_or(|s| p.rate_hz < s) && p.mean_ms.is_finite())
        .collect();
    let x: Vec<f64> = below.iter().map(|p| p.rate_hz).collect();
    let y: Vec<f64> = below.iter().map(|p| p.mean_ms).collect();
    Ok(SaturationReport {
        points,
        saturation_hz,
        slope: slope_test(&x, &y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u64 = 1_000_000_000;

    #[test]
    fn steady_pipeline_has_flat_backlog() {
        // one publish every 100 ms, each done 50 ms later
        let p: Vec<u64> = (0..100).map(|i| i * S / 10).collect();
        let c: Vec<Option<u64>> = p.iter().map(|t| Some(t + S / 20)).collect();
        let w = backlog_windows(&p, &c);
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|v| *v == 1.0));
        assert_eq!(growing_fraction(&w), 0.0);
    }

    #[test]
    fn overloaded_pipeline_grows() {
        // completions at 8/s while publishing 10/s
        let p: Vec<u64> = (0..100).map(|i| i * S / 10).collect();
        let c: Vec<Option<u64>> = (0..100).map(|i| Some(i * S / 8 + S / 20)).collect();
        assert!(growing_fraction(&backlog_windows(&p, &c)) >= GROWTH_FRACTION);
    }

    #[test]
    fn slope_of_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let t = slope_test(&x, &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((t.slope_ms_per_hz - 2.0).abs() < 1e-12);
        assert_eq!(t.p_value, 0.0);
        let flat = slope_test(&x, &[5.0, 5.1, 4.9, 5.0]).unwrap();
        assert!(flat.p_value > 0.05);
    }
}
