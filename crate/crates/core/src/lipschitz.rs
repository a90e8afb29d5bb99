//! Monte-Carlo estimates of the time-Lipschitz constant of a predictor and
//! the input-perturbation probe.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::predictor::{to_eps, Predictor};
use crate::rng::{fill_normal, stream, StreamRng};
use crate::schedule::ScheduleSpec;

/// Rows per Monte-Carlo batch. Each batch draws from its own random stream,
/// so estimates depend on `(seed, n)` only.
pub const MC_BATCH: usize = 4096;

/// Draws `x ~ q_tau`.
pub trait MarginalSampler {
    fn dim(&self) -> usize;
    fn sample(&self, tau: f64, n: usize, rng: &mut StreamRng) -> Result<Array2<f64>>;
}

/// Exact ancestral sampling of the noised mixture marginal.
#[derive(Debug, Clone)]
pub struct ExactMarginal {
    pub data: GaussianMixture,
    pub spec: ScheduleSpec,
}

impl ExactMarginal {
    pub fn new(data: GaussianMixture, spec: ScheduleSpec) -> Self {
        Self { data, spec }
    }
}

impl MarginalSampler for ExactMarginal {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn sample(&self, tau: f64, n: usize, rng: &mut StreamRng) -> Result<Array2<f64>> {
        self.data.marginal_at(&self.spec, tau)?.sample(n, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub t: f64,
    pub t_prime: f64,
    /// `E ||pred(x,t) - pred(x,t')|| / |t - t'|`.
    pub k: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Running mean / variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub(crate) fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    pub(crate) fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn lane_seed(seed: u64, series: u64) -> u64 {
    // distinct series (grid points, probe scales) get unrelated key streams
    seed ^ series.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `K(t, t')` with `x ~ q_t`.
pub fn lipschitz_k<P: Predictor + ?Sized, S: MarginalSampler + ?Sized>(
    pred: &P,
    t: f64,
    t_prime: f64,
    sampler: &S,
    n: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let dt = (t_prime - t).abs();
    if !(dt >= 1e-12) {
        return Err(Error::Degenerate(format!(
            "Lipschitz difference needs |t - t'| >= 1e-12 (got {dt:e})"
        )));
    }
    if n == 0 {
        return Err(Error::Degenerate("Lipschitz estimate needs at least one sample".into()));
    }
    let mut acc = Moments::default();
    let mut done = 0;
    let mut lane = 0;
    while done < n {
        let m = MC_BATCH.min(n - done);
        let mut rng = stream(seed, lane);
        let xs = sampler.sample(t, m, &mut rng)?;
        let a = pred.predict_batch(xs.view(), t)?;
        let b = pred.predict_batch(xs.view(), t_prime)?;
        for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
            let d: f64 = ra.iter().zip(rb.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            acc.push(d.sqrt() / dt);
        }
        done += m;
        lane += 1;
    }
    Ok(LipschitzEstimate {
        t,
        t_prime,
        k: acc.mean(),
        stderr: acc.stderr(),
        samples: n,
    })
}

/// `K(t, t + dt)` along an ascending grid.
pub fn singularity_scan<P: Predictor + ?Sized, S: MarginalSampler + ?Sized>(
    pred: &P,
    grid: &[f64],
    dt: f64,
    sampler: &S,
    n: usize,
    seed: u64,
) -> Result<Vec<LipschitzEstimate>> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidSpec("scan grid must be strictly ascending".into()));
    }
    grid.iter()
        .enumerate()
        .map(|(i, &t)| lipschitz_k(pred, t, t + dt, sampler, n, lane_seed(seed, i as u64 + 1)))
        .collect()
}

/// Log-spaced grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(Error::InvalidSpec("log grid needs 0 < lo < hi and >= 2 points".into()));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|i| match i {
            0 => lo,
            _ if i == points - 1 => hi,
            _ => (a + (b - a) * i as f64 / (points - 1) as f64).exp(),
        })
        .collect())
}

/// How the clean-data estimate is formed in the perturbation probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// `(x - sigma eps(x, t)) / alpha`.
    OneStep,
    /// Deterministic DDIM from `t` down to the terminal floor with `steps`
    /// evaluations.
    Trajectory { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub scale: f64,
    pub mean_error: f64,
    pub stderr: f64,
}

/// Mean `||x0_hat(x + scale z) - x0_hat(x)||` with `x ~ q_t`, `z ~ N(0, I)`.
/// The same `(x, z)` pairs are reused for every scale.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_probe<P: Predictor + ?Sized, S: MarginalSampler + ?Sized>(
    pred: &P,
    spec: &ScheduleSpec,
    t: f64,
    scales: &[f64],
    sampler: &S,
    n: usize,
    seed: u64,
    mode: ProbeMode,
) -> Result<Vec<ProbePoint>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain {
            what: "probe time",
            value: t,
            domain: "(0, 1)",
        });
    }
    if let Some(&s) = scales.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain {
            what: "perturbation scale",
            value: s,
            domain: "[0, inf)",
        });
    }
    if n == 0 {
        return Err(Error::Degenerate("probe needs at least one sample".into()));
    }
    let mut acc = vec![Moments::default(); scales.len()];
    let d = sampler.dim();
    let mut done = 0;
    let mut lane = 0;
    while done < n {
        let m = MC_BATCH.min(n - done);
        let mut rng = stream(seed, lane);
        let xs = sampler.sample(t, m, &mut rng)?;
        let mut z = Array2::zeros((m, d));
        fill_normal(&mut rng, z.as_slice_mut().expect("standard layout"));
        let clean = denoise(pred, spec, &xs, t, mode)?;
        for (k, &scale) in scales.iter().enumerate() {
            if scale == 0.0 {
                (0..m).for_each(|_| acc[k].push(0.0));
                continue;
            }
            let moved = &xs + &(&z * scale);
            let est = denoise(pred, spec, &moved, t, mode)?;
            for (ra, rb) in est.outer_iter().zip(clean.outer_iter()) {
                let e: f64 = ra.iter().zip(rb.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                acc[k].push(e.sqrt());
            }
        }
        done += m;
        lane += 1;
    }
    Ok(scales
        .iter()
        .zip(acc)
        .map(|(&scale, a)| ProbePoint {
            scale,
            mean_error: a.mean(),
            stderr: a.stderr(),
        })
        .collect())
}

fn denoise<P: Predictor + ?Sized>(
    pred: &P,
    spec: &ScheduleSpec,
    xs: &Array2<f64>,
    t: f64,
    mode: ProbeMode,
) -> Result<Array2<f64>> {
    match mode {
        ProbeMode::OneStep => {
            let (alpha, sigma) = spec.alpha_sigma(t)?;
            let out = pred.predict_batch(xs.view(), t)?;
            let eps = to_eps(pred.parameterization(), out, xs.view(), alpha, sigma);
            Ok((xs - &(eps * sigma)) / alpha)
        }
        ProbeMode::Trajectory { steps } => {
            crate::sampler::deterministic_denoise(pred, spec, xs.clone(), t, steps, None)
        }
    }
}

/// Mean Euclidean norm of the rows.
pub fn mean_row_norm(xs: &Array2<f64>) -> f64 {
    xs.map_axis(Axis(1), |r| r.dot(&r).sqrt()).mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::AnalyticEps;

    fn stationary() -> (AnalyticEps, ExactMarginal) {
        let gm = GaussianMixture::standard_normal(2);
        let spec = ScheduleSpec::linear();
        (AnalyticEps::new(gm.clone(), spec), ExactMarginal::new(gm, spec))
    }

    #[test]
    fn stationary_case_matches_closed_form() {
        // eps = sigma x, so K = |sigma(t') - sigma(t)| / dt * E||x||, and for
        // d = 2, ||x|| is Rayleigh with mean sqrt(pi/2)
        let (pred, sampler) = stationary();
        let spec = ScheduleSpec::linear();
        let est = lipschitz_k(&pred, 0.5, 0.501, &sampler, 100_000, 11).unwrap();
        let slope = (spec.sigma(0.501).unwrap() - spec.sigma(0.5).unwrap()) / 0.001;
        let expect = slope * (std::f64::consts::PI / 2.0).sqrt();
        assert!((est.k - expect).abs() < 4.0 * est.stderr, "{} vs {expect} ± {}", est.k, est.stderr);
        assert!(est.stderr < 0.01 * est.k);
    }

    #[test]
    fn blow_up_near_zero() {
        let (pred, sampler) = stationary();
        let near = lipschitz_k(&pred, 1e-3, 2e-3, &sampler, 20_000, 1).unwrap();
        let mid = lipschitz_k(&pred, 0.5, 0.501, &sampler, 20_000, 2).unwrap();
        assert!(near.k / mid.k >= 10.0, "{}", near.k / mid.k);
    }

    #[test]
    fn degenerate_inputs() {
        let (pred, sampler) = stationary();
        assert!(lipschitz_k(&pred, 0.5, 0.5, &sampler, 10, 0).is_err());
        assert!(lipschitz_k(&pred, 0.5, 0.6, &sampler, 0, 0).is_err());
        assert!(singularity_scan(&pred, &[0.2, 0.1], 1e-3, &sampler, 10, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let (pred, sampler) = stationary();
        let a = singularity_scan(&pred, &[0.1, 0.2], 1e-3, &sampler, 5000, 9).unwrap();
        let b = singularity_scan(&pred, &[0.1, 0.2], 1e-3, &sampler, 5000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-5, 0.5, 7).unwrap();
        assert_eq!(g[0], 1e-5);
        assert_eq!(g[6], 0.5);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn one_step_probe_for_standard_normal() {
        // x0_hat(x) = (x - sigma^2 x)/alpha = alpha x, so the error is
        // scale * alpha * E||z||
        let (pred, sampler) = stationary();
        let spec = ScheduleSpec::linear();
        let t = 0.05;
        let pts = perturbation_probe(&pred, &spec, t, &[0.0, 0.01, 0.1], &sampler, 20_000, 3, ProbeMode::OneStep).unwrap();
        assert_eq!(pts[0].mean_error, 0.0);
        let alpha = spec.alpha(t).unwrap();
        for p in &pts[1..] {
            let expect = p.scale * alpha * (std::f64::consts::PI / 2.0).sqrt();
            assert!((p.mean_error - expect).abs() < 4.0 * p.stderr + 1e-12, "{p:?} vs {expect}");
        }
        assert!(pts.windows(2).all(|w| w[0].mean_error <= w[1].mean_error));
    }
}
