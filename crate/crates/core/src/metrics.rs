//! Evaluation: sliced-Wasserstein distance, KS statistic, SNR-ratio curves
//! and Lipschitz-curve summaries.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lipschitz::LipschitzEstimate;
use crate::rng::{fill_normal, stream};
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub sample_sizes: Vec<usize>,
    pub config_hash: String,
}

/// Hex SHA-256 of the canonical JSON of `value`: object keys sorted at
/// every level, so the hash ignores key order.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let canonical = serde_json::to_string(&canonicalize(v))?;
    Ok(Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn canonicalize(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Quantile of sorted data at probability `p` with linear interpolation
/// between order statistics placed at `(i + 0.5) / n`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * n as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (n - 1) as f64 {
        return sorted[n - 1];
    }
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    sorted[i] * (1.0 - f) + sorted[i + 1] * f
}

/// 1-D 2-Wasserstein distance between empirical distributions.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / a.len() as f64).sqrt();
    }
    // resample the smaller set onto the larger one's quantile levels
    let (big, small) = if a.len() >= b.len() { (&*a, &*b) } else { (&*b, &*a) };
    let n = big.len();
    let s: f64 = big
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = quantile(small, (i as f64 + 0.5) / n as f64);
            (x - y) * (x - y)
        })
        .sum();
    (s / n as f64).sqrt()
}

/// Mean over `n_projections` random unit directions of the 1-D
/// 2-Wasserstein distance between the projected sets. The stderr is over
/// directions.
pub fn sliced_wasserstein(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<MetricReport> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Degenerate("sliced Wasserstein needs non-empty sample sets".into()));
    }
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::Dimension {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if n_projections == 0 {
        return Err(Error::InvalidSpec("need at least one projection".into()));
    }
    let d = a.ncols();
    let mut rng = stream(seed, 0);
    let mut vals = Vec::with_capacity(n_projections);
    let mut dir = vec![0.0; d];
    for _ in 0..n_projections {
        loop {
            fill_normal(&mut rng, &mut dir);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        let u = Array1::from(dir.clone());
        let mut pa = a.dot(&u).to_vec();
        let mut pb = b.dot(&u).to_vec();
        vals.push(wasserstein_1d(&mut pa, &mut pb));
    }
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(MetricReport {
        metric: "sliced_wasserstein".into(),
        value: mean,
        stderr: (var / m).sqrt(),
        sample_sizes: vec![a.nrows(), b.nrows()],
        config_hash: config_hash(&(n_projections, seed))?,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Degenerate("KS statistic needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub tau: f64,
    pub ratio: f64,
}

/// `snr_a(tau) / snr_b(tau)` on the grid. Points where both are infinite
/// report 1 only when the specs coincide; otherwise the limit is not
/// resolved and the point is rejected.
pub fn snr_ratio_curve(a: &ScheduleSpec, b: &ScheduleSpec, grid: &[f64]) -> Result<Vec<RatioPoint>> {
    grid.iter()
        .map(|&tau| {
            let (sa, sb) = (a.snr(tau)?, b.snr(tau)?);
            let ratio = if a == b {
                1.0
            } else if sb == 0.0 || (sa.is_infinite() && sb.is_infinite()) {
                return Err(Error::Domain {
                    what: "tau (SNR ratio undefined)",
                    value: tau,
                    domain: "times with finite, positive reference SNR",
                });
            } else {
                sa / sb
            };
            Ok(RatioPoint { tau, ratio })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub name: String,
    pub max: f64,
    pub argmax: f64,
    /// Trapezoid area over the part of the grid below the cutoff.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub grid: Vec<f64>,
    pub cutoff: f64,
    pub summaries: Vec<CurveSummary>,
    /// `rows[i][j]` is curve `j` at `grid[i]`.
    pub rows: Vec<Vec<f64>>,
}

/// Trapezoid area under `(t, k)` restricted to `t < cutoff`; a single point
/// has no extent and reports its value.
pub fn auc_below(points: &[(f64, f64)], cutoff: f64) -> f64 {
    let inside: Vec<&(f64, f64)> = points.iter().filter(|p| p.0 < cutoff).collect();
    match inside.len() {
        0 => 0.0,
        1 => inside[0].1,
        _ => inside.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum(),
    }
}

/// Merges named scans taken on a common grid.
pub fn lipschitz_report(curves: &[(&str, &[LipschitzEstimate])], cutoff: f64) -> Result<LipschitzReport> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Degenerate("no curves to report".into()))?;
    if first.1.is_empty() {
        return Err(Error::Degenerate(format!("curve `{}` is empty", first.0)));
    }
    let grid: Vec<f64> = first.1.iter().map(|e| e.t).collect();
    let mut summaries = Vec::new();
    for (name, c) in curves {
        if c.len() != grid.len() || c.iter().zip(&grid).any(|(e, t)| e.t != *t) {
            return Err(Error::InvalidSpec(format!("curve `{name}` is on a different grid")));
        }
        let (mut max, mut argmax) = (f64::NEG_INFINITY, grid[0]);
        for e in c.iter() {
            if e.k > max {
                max = e.k;
                argmax = e.t;
            }
        }
        let pts: Vec<(f64, f64)> = c.iter().map(|e| (e.t, e.k)).collect();
        summaries.push(CurveSummary {
            name: name.to_string(),
            max,
            argmax,
            auc: auc_below(&pts, cutoff),
        });
    }
    let rows = (0..grid.len())
        .map(|i| curves.iter().map(|(_, c)| c[i].k).collect())
        .collect();
    Ok(LipschitzReport {
        grid,
        cutoff,
        summaries,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianMixture;
    use ndarray::Array2;

    #[test]
    fn identical_sets_have_zero_distance() {
        let x = GaussianMixture::default_ring().sample(500, &mut stream(1, 0)).unwrap();
        let r = sliced_wasserstein(x.view(), x.view(), 64, 3).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(sliced_wasserstein(x.view(), Array2::zeros((0, 2)).view(), 8, 0).is_err());
    }

    #[test]
    fn shifted_gaussian_in_one_dimension() {
        let a = GaussianMixture::standard_normal(1).sample(100_000, &mut stream(2, 0)).unwrap();
        let b = a.mapv(|v| v + 0.5);
        let r = sliced_wasserstein(a.view(), b.view(), 4, 0).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
        let c = GaussianMixture::standard_normal(1).sample(100_000, &mut stream(2, 1)).unwrap() + 0.5;
        let r = sliced_wasserstein(a.view(), c.view(), 4, 0).unwrap();
        assert!((r.value - 0.5).abs() < 0.01, "{}", r.value);
    }

    #[test]
    fn symmetric_and_handles_unequal_sizes() {
        let g = GaussianMixture::standard_normal(2);
        let a = g.sample(1000, &mut stream(3, 0)).unwrap();
        let b = g.sample(700, &mut stream(3, 1)).unwrap();
        let ab = sliced_wasserstein(a.view(), b.view(), 32, 5).unwrap();
        let ba = sliced_wasserstein(b.view(), a.view(), 32, 5).unwrap();
        assert_eq!(ab.value, ba.value);
        assert!(ab.value < 0.15 && ab.stderr > 0.0);
    }

    #[test]
    fn interpolated_quantiles_reproduce_distribution() {
        let mut small: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut big: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 0.25).collect();
        assert!(wasserstein_1d(&mut big, &mut small) < 0.2);
    }

    #[test]
    fn ks_known_values() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[2.5]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn snr_ratio_shapes() {
        let lin = ScheduleSpec::linear();
        let grid = [0.0, 0.01, 0.5, 1.0];
        assert!(snr_ratio_curve(&lin, &lin, &grid).unwrap().iter().all(|p| p.ratio == 1.0));
        let mut mod_lin = lin;
        mod_lin.modified_ns = true;
        let c = snr_ratio_curve(&mod_lin, &lin, &grid[1..]).unwrap();
        assert!(c[0].ratio > 1.5 && (c[2].ratio - 1.0).abs() < 0.2, "{c:?}");
        let mut mod_quad = ScheduleSpec::quadratic();
        mod_quad.modified_ns = true;
        let end = snr_ratio_curve(&mod_quad, &ScheduleSpec::quadratic(), &[1.0]).unwrap()[0].ratio;
        assert!((0.99..=1.01).contains(&end), "{end}");
    }

    #[test]
    fn report_summaries() {
        let est = |t: f64, k: f64| LipschitzEstimate {
            t,
            t_prime: t + 1e-3,
            k,
            stderr: 0.0,
            samples: 1,
        };
        let single = [est(0.05, 3.0)];
        let r = lipschitz_report(&[("one", &single)], 0.1).unwrap();
        assert_eq!(r.summaries[0].max, 3.0);
        assert_eq!(r.summaries[0].argmax, 0.05);
        assert_eq!(r.summaries[0].auc, 3.0);
        let empty: [LipschitzEstimate; 0] = [];
        assert!(lipschitz_report(&[("none", &empty)], 0.1).is_err());
        let a = [est(0.0, 1.0), est(0.05, 1.0), est(0.2, 9.0)];
        let b = [est(0.0, 0.0), est(0.05, 0.0), est(0.2, 9.0)];
        let r = lipschitz_report(&[("a", &a), ("b", &b)], 0.1).unwrap();
        assert!((r.summaries[0].auc - 0.05).abs() < 1e-15);
        assert_eq!(r.summaries[1].auc, 0.0);
        let off = [est(0.0, 1.0), est(0.06, 1.0), est(0.2, 9.0)];
        assert!(lipschitz_report(&[("a", &a), ("off", &off)], 0.1).is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":{"b":2,"a":[1,{"q":1,"p":2}]}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":{"a":[1,{"p":2,"q":1}],"b":2},"x":1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
