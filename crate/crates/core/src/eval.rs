//! Error metrics and their aggregation across test samples.

use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::grid::Quadrature;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    NonlinearRbOffline,
    NonlinearRbOnline,
    Podnn,
    Projection,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::NonlinearRbOffline,
        Method::NonlinearRbOnline,
        Method::Podnn,
        Method::Projection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NonlinearRbOffline => "nonlinear-rb-offline",
            Method::NonlinearRbOnline => "nonlinear-rb-online",
            Method::Podnn => "podnn",
            Method::Projection => "projection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// How prediction and reference are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    /// `‖e‖ / ‖u‖`.
    #[default]
    Relative,
    /// `‖e‖² / ‖u‖²`.
    RelativeSquared,
}

impl ErrorNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorNorm::Relative => "relative-l2",
            ErrorNorm::RelativeSquared => "relative-l2-squared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ErrorNorm::Relative, ErrorNorm::RelativeSquared]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

/// Quadrature-weighted relative error of `pred` against `reference`.
pub fn relative_error(pred: &[f64], reference: &[f64], quad: &Quadrature) -> Result<f64> {
    relative_error_with(pred, reference, quad, ErrorNorm::Relative)
}

pub fn relative_error_with(pred: &[f64], reference: &[f64], quad: &Quadrature, norm: ErrorNorm) -> Result<f64> {
    let w = quad.weights();
    if pred.len() != reference.len() || pred.len() != w.len() {
        return Err(config_err("prediction, reference and quadrature lengths differ"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &r), &wj) in pred.iter().zip(reference).zip(w) {
        num += wj * (p - r) * (p - r);
        den += wj * r * r;
    }
    if !(den > 0.0) {
        return Err(Error::ZeroReference);
    }
    let sq = num / den;
    Ok(match norm {
        ErrorNorm::Relative => math::sqrt(sq),
        ErrorNorm::RelativeSquared => sq,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub mu: Vec<f64>,
    pub rel_error: f64,
    pub wall_time_s: f64,
}

/// Histogram over log-spaced edges; values outside the range land in the
/// first or last bin so the counts always sum to the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub const HISTOGRAM_MIN: f64 = 1e-6;
pub const HISTOGRAM_MAX: f64 = 1.0;
pub const HISTOGRAM_BINS_PER_DECADE: usize = 2;

pub fn log_histogram(values: &[f64], lo: f64, hi: f64, bins_per_decade: usize) -> Result<Histogram> {
    if !(lo > 0.0 && hi > lo) || bins_per_decade == 0 {
        return Err(config_err("histogram range must satisfy 0 < lo < hi"));
    }
    let (llo, lhi) = (math::log10(lo), math::log10(hi));
    let nbins = math::ceil((lhi - llo) * bins_per_decade as f64 - 1e-9).max(1.0) as usize;
    let step = (lhi - llo) / nbins as f64;
    let edges: Vec<f64> = (0..=nbins).map(|k| math::pow10(llo + step * k as f64)).collect();
    let mut counts = alloc::vec![0; nbins];
    for &v in values {
        let k = if v > 0.0 {
            math::floor((math::log10(v) - llo) / step)
        } else {
            -1.0
        };
        counts[k.clamp(0.0, (nbins - 1) as f64) as usize] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Mean over the largest tenth of the errors (at least one sample).
    pub worst10_mean: f64,
    pub max: f64,
    pub histogram: Histogram,
}

pub fn aggregate(errors: &[f64]) -> Result<Aggregates> {
    if errors.is_empty() {
        return Err(config_err("cannot aggregate an empty result set"));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(config_err("relative errors must be nonnegative numbers"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let k = decile_size(n);
    let worst = &sorted[n - k..];
    Ok(Aggregates {
        count: n,
        mean: mean(&sorted),
        median,
        worst10_mean: mean(worst),
        max: sorted[n - 1],
        histogram: log_histogram(errors, HISTOGRAM_MIN, HISTOGRAM_MAX, HISTOGRAM_BINS_PER_DECADE)?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn decile_size(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// Indices of the largest tenth of `errors`, largest first. Ties are broken
/// by index so the selection is deterministic.
pub fn worst_decile(errors: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    idx.truncate(if errors.is_empty() { 0 } else { decile_size(errors.len()) });
    idx
}
