//! Image error metrics on linear HDR values.

use serde::{Deserialize, Serialize};

use super::RenderError;

/// Denominator floor for the relative metrics.
pub const EPS_METRIC: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub smape: f64,
    pub mean_abs: f64,
    pub mean_sqr: f64,
    pub mean_rel_abs: f64,
    pub mean_rel_sqr: f64,
}

/// Metrics of `a` against the reference `b`, averaged over all channel
/// values.
pub fn compute_metrics(a: &[f32], b: &[f32]) -> Result<MetricReport, RenderError> {
    if a.len() != b.len() {
        return Err(RenderError::Dimension(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(MetricReport::default());
    }
    let mut r = MetricReport::default();
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        let d = (x - y).abs();
        let rel = y.abs() + EPS_METRIC;
        r.smape += d / (x.abs() + y.abs() + EPS_METRIC);
        r.mean_abs += d;
        r.mean_sqr += d * d;
        r.mean_rel_abs += d / rel;
        r.mean_rel_sqr += (d / rel) * (d / rel);
    }
    let n = a.len() as f64;
    r.smape /= n;
    r.mean_abs /= n;
    r.mean_sqr /= n;
    r.mean_rel_abs /= n;
    r.mean_rel_sqr /= n;
    Ok(r)
}
