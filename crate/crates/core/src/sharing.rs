//! Condition sharing over early timesteps: the partition of `[0, t_tilde)`,
//! the shared-condition optimal predictor, and the error bound that
//! controls it.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::predictor::{check_dim, eps_optimal_batch, Parameterization, Predictor, PredictorKind};
use crate::quadrature::{self, Rule, Spacing};
use crate::rng::stream;
use crate::schedule::ScheduleSpec;

/// `n` equal sub-intervals of `[0, t_tilde)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionParts", into = "PartitionParts")]
pub struct PartitionSchedule {
    t_tilde: f64,
    n: usize,
    boundaries: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParts {
    pub t_tilde: f64,
    pub n: usize,
}

impl TryFrom<PartitionParts> for PartitionSchedule {
    type Error = Error;
    fn try_from(p: PartitionParts) -> Result<Self> {
        PartitionSchedule::new(p.t_tilde, p.n)
    }
}

impl From<PartitionSchedule> for PartitionParts {
    fn from(p: PartitionSchedule) -> Self {
        PartitionParts {
            t_tilde: p.t_tilde,
            n: p.n,
        }
    }
}

impl PartitionSchedule {
    pub fn new(t_tilde: f64, n: usize) -> Result<Self> {
        if !(t_tilde > 0.0 && t_tilde <= 1.0) {
            return Err(Error::Degenerate(format!(
                "shared interval length must lie in (0, 1] (got {t_tilde})"
            )));
        }
        if n == 0 {
            return Err(Error::Degenerate("partition needs at least one sub-interval".into()));
        }
        let mut boundaries: Vec<f64> = (0..=n).map(|i| t_tilde * i as f64 / n as f64).collect();
        boundaries[n] = t_tilde;
        Ok(Self {
            t_tilde,
            n,
            boundaries,
        })
    }

    pub fn t_tilde(&self) -> f64 {
        self.t_tilde
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Sub-interval width `t_tilde / n`.
    pub fn width(&self) -> f64 {
        self.t_tilde / self.n as f64
    }

    /// Index `i` of the sub-interval `[t_i, t_{i+1})` holding `t`, or `None`
    /// for `t >= t_tilde`.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if !(t < self.t_tilde) {
            return None;
        }
        let guess = ((t / self.t_tilde) * self.n as f64).floor().max(0.0) as usize;
        let mut i = guess.min(self.n - 1);
        // the division can land one cell off near a boundary
        while i + 1 < self.n && self.boundaries[i + 1] <= t {
            i += 1;
        }
        while i > 0 && self.boundaries[i] > t {
            i -= 1;
        }
        Some(i)
    }

    /// Left endpoint of the containing sub-interval below `t_tilde`,
    /// identity from `t_tilde` on.
    pub fn f_t(&self, t: f64) -> f64 {
        match self.interval_of(t) {
            Some(i) => self.boundaries[i],
            None => t,
        }
    }

    /// The same partition with boundaries floored onto the grid
    /// `{0, 1/T, ..., 1}`.
    pub fn on_grid(&self, steps: usize) -> Result<GridPartition> {
        GridPartition::new(self, steps)
    }
}

/// A partition with boundaries on the discrete grid `k / T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPartition {
    steps: usize,
    boundary_steps: Vec<usize>,
}

impl GridPartition {
    pub fn new(part: &PartitionSchedule, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSpec("grid needs at least one step".into()));
        }
        let boundary_steps = part
            .boundaries
            .iter()
            .map(|b| (b * steps as f64 + 1e-9).floor() as usize)
            .collect();
        Ok(Self {
            steps,
            boundary_steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn boundary_steps(&self) -> &[usize] {
        &self.boundary_steps
    }

    /// Boundary times `b_i / T`, shared region only (excludes the end).
    pub fn shared_conditions(&self) -> Vec<f64> {
        let n = self.boundary_steps.len() - 1;
        self.boundary_steps[..n]
            .iter()
            .map(|&b| b as f64 / self.steps as f64)
            .collect()
    }

    /// Discrete step index `k` to the step index the predictor sees.
    pub fn condition_step(&self, k: usize) -> usize {
        let end = *self.boundary_steps.last().expect("non-empty");
        if k >= end {
            return k;
        }
        let j = self.boundary_steps.partition_point(|&b| b <= k);
        self.boundary_steps[j.saturating_sub(1)]
    }

    /// Continuous time to the condition time; times are snapped to the grid
    /// first (floor, with a small tolerance for `k/T` round-off).
    pub fn condition(&self, tau: f64) -> f64 {
        let k = (tau * self.steps as f64 + 1e-9).floor() as usize;
        let end = *self.boundary_steps.last().expect("non-empty");
        if k >= end {
            return tau;
        }
        self.condition_step(k) as f64 / self.steps as f64
    }
}

/// Quadrature settings for the shared predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub order: usize,
    pub check_order: usize,
    pub tolerance: f64,
    pub max_panels: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            order: 32,
            check_order: 64,
            tolerance: 1e-10,
            max_panels: 256,
        }
    }
}

/// The optimal predictor when every `t` in a sub-interval shares one
/// condition: the average of the exact noise predictor over that
/// sub-interval.
#[derive(Debug)]
pub struct SharedAnalytic {
    data: GaussianMixture,
    spec: ScheduleSpec,
    partition: PartitionSchedule,
    quad: QuadratureConfig,
    rules: Vec<OnceLock<std::result::Result<Rule, String>>>,
}

impl SharedAnalytic {
    pub fn new(data: GaussianMixture, spec: ScheduleSpec, partition: PartitionSchedule) -> Result<Self> {
        Self::with_quadrature(data, spec, partition, QuadratureConfig::default())
    }

    pub fn with_quadrature(
        data: GaussianMixture,
        spec: ScheduleSpec,
        partition: PartitionSchedule,
        quad: QuadratureConfig,
    ) -> Result<Self> {
        if quad.order == 0 || quad.check_order <= quad.order || !(quad.tolerance > 0.0) || quad.max_panels == 0 {
            return Err(Error::InvalidSpec(format!("bad quadrature configuration {quad:?}")));
        }
        spec.validate()?;
        let rules = (0..partition.n()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            data,
            spec,
            partition,
            quad,
            rules,
        })
    }

    pub fn partition(&self) -> &PartitionSchedule {
        &self.partition
    }

    /// Normalised quadrature rule for sub-interval `i` (weights sum to 1).
    pub fn rule(&self, i: usize) -> Result<&Rule> {
        self.rules[i]
            .get_or_init(|| self.build_rule(i))
            .as_ref()
            .map_err(|e| Error::Degenerate(e.clone()))
    }

    fn build_rule(&self, i: usize) -> std::result::Result<Rule, String> {
        let b = self.partition.boundaries();
        let (lo, hi) = (b[i], b[i + 1]);
        // sigma ~ sqrt(tau) at the origin; the substitution makes the
        // integrand smooth there
        let spacing = if lo == 0.0 { Spacing::SquareRoot } else { Spacing::Affine };
        let base = quadrature::legendre(self.quad.order).map_err(|e| e.to_string())?;
        let check = quadrature::legendre(self.quad.check_order).map_err(|e| e.to_string())?;
        let probes = self.probe_points(0.5 * (lo + hi)).map_err(|e| e.to_string())?;
        let mut panels = 1;
        loop {
            let r = quadrature::composite(&base, lo, hi, panels, spacing);
            let c = quadrature::composite(&check, lo, hi, panels, spacing);
            let a = self.apply_rule(&r, probes.view(), hi - lo).map_err(|e| e.to_string())?;
            let z = self.apply_rule(&c, probes.view(), hi - lo).map_err(|e| e.to_string())?;
            let err = (&a - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            if err <= self.quad.tolerance * scale {
                let w = hi - lo;
                return Ok(Rule {
                    nodes: r.nodes,
                    weights: r.weights.into_iter().map(|v| v / w).collect(),
                });
            }
            if panels >= self.quad.max_panels {
                return Err(format!(
                    "shared-predictor quadrature on [{lo}, {hi}) did not reach {} (error {err:e} with {panels} panels)",
                    self.quad.tolerance
                ));
            }
            panels *= 2;
        }
    }

    /// Points where the integrand is checked: marginal draws around the
    /// interval plus the scaled component means.
    fn probe_points(&self, tau: f64) -> Result<Array2<f64>> {
        let m = self.data.marginal_at(&self.spec, tau)?;
        let draws = m.sample(8, &mut stream(0x5eed, 0))?;
        let d = self.data.dim();
        let k = m.n_components().min(8);
        let mut out = Array2::zeros((draws.nrows() + k, d));
        out.slice_mut(ndarray::s![..draws.nrows(), ..]).assign(&draws);
        for c in 0..k {
            out.row_mut(draws.nrows() + c).assign(&m.means()[c]);
        }
        Ok(out)
    }

    fn apply_rule(&self, rule: &Rule, xs: ArrayView2<f64>, width: f64) -> Result<Array2<f64>> {
        let mut acc = Array2::<f64>::zeros(xs.raw_dim());
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            acc.scaled_add(w / width, &eps_optimal_batch(&self.data, &self.spec, t, xs)?);
        }
        Ok(acc)
    }
}

impl Predictor for SharedAnalytic {
    fn kind(&self) -> PredictorKind {
        PredictorKind::SharedAnalytic
    }
    fn parameterization(&self) -> Parameterization {
        Parameterization::Eps
    }
    fn dim(&self) -> usize {
        self.data.dim()
    }
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        check_dim(&xs, self.data.dim())?;
        match self.partition.interval_of(t) {
            None => eps_optimal_batch(&self.data, &self.spec, t, xs),
            Some(i) => {
                let rule = self.rule(i)?;
                self.apply_rule(rule, xs, 1.0)
            }
        }
    }
}

/// `eps*(x, f(t))`, the mean of the exact noise predictor over the
/// sub-interval containing `t` (the exact predictor itself past `t_tilde`).
pub fn shared_optimal_eps(
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    part: &PartitionSchedule,
    x: ArrayView1<f64>,
    t: f64,
) -> Result<Array1<f64>> {
    let p = SharedAnalytic::new(gm.clone(), *spec, part.clone())?;
    p.predict(x, t)
}

/// Result of checking `||eps*(x, f(t)) - eps(x, t)|| <= sigma(t_tilde) K(x) dt + B(x) dsigma_max`
/// on a grid over `[0, t_tilde)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    /// Grid sup of `|score(x,t) - score(x,t')| / |t - t'|` (a lower bound on
    /// the true sup).
    pub k_x: f64,
    /// Grid sup of `||score(x, t)||`.
    pub b_x: f64,
    pub delta_sigma_max: f64,
    pub bound: f64,
    pub max_actual_error: f64,
    /// Where the actual error peaks.
    pub argmax_t: f64,
    pub grid_points: usize,
    pub holds: bool,
}

impl BoundRecord {
    /// `Err` when the actual error exceeds the bound.
    pub fn check(&self) -> Result<()> {
        if self.holds {
            Ok(())
        } else {
            Err(Error::BoundViolated {
                actual: self.max_actual_error,
                bound: self.bound,
            })
        }
    }
}

/// `max_i |sigma(t_i) - sigma(t_{i-1})|` over the partition.
pub fn delta_sigma_max(spec: &ScheduleSpec, part: &PartitionSchedule) -> Result<f64> {
    let sig: Vec<f64> = part.boundaries().iter().map(|&t| spec.sigma(t)).collect::<Result<_>>()?;
    Ok(sig.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max))
}

/// Grid times: `resolution` equally spaced points per sub-interval, left
/// endpoints included.
fn bound_grid(part: &PartitionSchedule, resolution: usize) -> Vec<(usize, f64)> {
    let b = part.boundaries();
    let mut out = Vec::with_capacity(part.n() * resolution);
    for i in 0..part.n() {
        let h = (b[i + 1] - b[i]) / resolution as f64;
        for j in 0..resolution {
            out.push((i, b[i] + h * j as f64));
        }
    }
    out
}

pub fn shared_error_bound(
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    part: &PartitionSchedule,
    x: ArrayView1<f64>,
    resolution: usize,
) -> Result<BoundRecord> {
    let shared = SharedAnalytic::new(gm.clone(), *spec, part.clone())?;
    bound_with(&shared, gm, spec, part, x, resolution)
}

fn bound_with(
    shared: &SharedAnalytic,
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    part: &PartitionSchedule,
    x: ArrayView1<f64>,
    resolution: usize,
) -> Result<BoundRecord> {
    if resolution < 2 {
        return Err(Error::InvalidSpec("bound grid needs at least 2 points per sub-interval".into()));
    }
    if x.len() != gm.dim() {
        return Err(Error::Dimension {
            expected: gm.dim(),
            got: x.len(),
        });
    }
    let xs = x.insert_axis(ndarray::Axis(0));
    let targets: Vec<Array1<f64>> = (0..part.n())
        .map(|i| Ok(shared.predict_batch(xs, part.boundaries()[i])?.row(0).to_owned()))
        .collect::<Result<_>>()?;
    let grid = bound_grid(part, resolution);
    let mut k_x = 0.0f64;
    let mut b_x = 0.0f64;
    let mut worst = (0.0f64, 0.0f64);
    let mut prev: Option<(f64, Array1<f64>)> = None;
    for &(i, t) in &grid {
        let dens = gm.marginal_at(spec, t)?.density()?;
        let s = dens.score(x)?;
        let sigma = spec.sigma(t)?;
        b_x = b_x.max(norm(s.view()));
        let err = norm((&targets[i] + &(&s * sigma)).view());
        if err > worst.0 {
            worst = (err, t);
        }
        if let Some((tp, sp)) = &prev {
            k_x = k_x.max(norm((&s - sp).view()) / (t - tp));
        }
        prev = Some((t, s));
    }
    let dsm = delta_sigma_max(spec, part)?;
    let bound = spec.sigma(part.t_tilde())? * k_x * part.width() + b_x * dsm;
    Ok(BoundRecord {
        k_x,
        b_x,
        delta_sigma_max: dsm,
        bound,
        max_actual_error: worst.0,
        argmax_t: worst.1,
        grid_points: grid.len(),
        holds: worst.0 <= bound,
    })
}

/// Same check for standard-normal data, where the score is `-x` at every
/// time: `K = 0`, `B = ||x||`, and the actual error is
/// `|mean sigma - sigma(t)| ||x||` with the mean taken by quadrature.
pub fn standard_normal_bound(
    spec: &ScheduleSpec,
    part: &PartitionSchedule,
    x: ArrayView1<f64>,
    resolution: usize,
) -> Result<BoundRecord> {
    let gm = GaussianMixture::standard_normal(x.len());
    let shared = SharedAnalytic::new(gm, *spec, part.clone())?;
    let nx = norm(x);
    let means: Vec<f64> = (0..part.n())
        .map(|i| Ok(shared.rule(i)?.integrate(|t| spec.sigma(t).unwrap_or(f64::NAN))))
        .collect::<Result<_>>()?;
    let mut worst = (0.0f64, 0.0f64);
    let grid = bound_grid(part, resolution);
    for &(i, t) in &grid {
        let e = (means[i] - spec.sigma(t)?).abs() * nx;
        if e > worst.0 {
            worst = (e, t);
        }
    }
    let dsm = delta_sigma_max(spec, part)?;
    let bound = nx * dsm;
    Ok(BoundRecord {
        k_x: 0.0,
        b_x: nx,
        delta_sigma_max: dsm,
        bound,
        max_actual_error: worst.0,
        argmax_t: worst.1,
        grid_points: grid.len(),
        holds: worst.0 <= bound,
    })
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub n: usize,
    pub dt: f64,
    pub max_error: f64,
    pub delta_sigma_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub points: Vec<ConvergencePoint>,
    /// Least-squares slope of `log max_error` against `log dt`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Largest absolute log-residual of the fit.
    pub max_residual: f64,
}

/// Ordinary least squares `y = intercept + slope x`; returns
/// `(slope, intercept, r_squared, max_abs_residual)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    let max_res = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).abs())
        .fold(0.0, f64::max);
    (slope, intercept, r2, max_res)
}

/// Empirical rate at which the shared predictor's worst error (over `xs`
/// and a grid of `resolution` points per sub-interval) shrinks with the
/// sub-interval width.
pub fn convergence_order(
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    t_tilde: f64,
    n_values: &[usize],
    xs: ArrayView2<f64>,
    resolution: usize,
) -> Result<ConvergenceReport> {
    let lo = n_values.iter().copied().min().unwrap_or(0);
    let hi = n_values.iter().copied().max().unwrap_or(0);
    if n_values.len() < 3 || lo == 0 || (hi as f64) < 100.0 * lo as f64 {
        return Err(Error::Degenerate(format!(
            "convergence fit needs >= 3 partition sizes spanning two decades (got {n_values:?})"
        )));
    }
    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let part = PartitionSchedule::new(t_tilde, n)?;
        let shared = SharedAnalytic::new(gm.clone(), *spec, part.clone())?;
        let mut worst = 0.0f64;
        for x in xs.outer_iter() {
            let r = bound_with(&shared, gm, spec, &part, x, resolution)?;
            worst = worst.max(r.max_actual_error);
        }
        points.push(ConvergencePoint {
            n,
            dt: part.width(),
            max_error: worst,
            delta_sigma_max: delta_sigma_max(spec, &part)?,
        });
    }
    if points.iter().any(|p| !(p.max_error > 0.0)) {
        return Err(Error::Degenerate("zero error at some partition size; no rate to fit".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.dt.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.max_error.ln()).collect();
    let (slope, intercept, r_squared, max_residual) = linear_fit(&lx, &ly);
    Ok(ConvergenceReport {
        points,
        slope,
        intercept,
        r_squared,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Composite Simpson with `m` (even) panels after `tau = u^2`.
    fn simpson_sqrt_oracle(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
        let g = |u: f64| {
            let tau = a + (b - a) * u * u;
            f(tau) * 2.0 * (b - a) * u
        };
        let h = 1.0 / m as f64;
        let mut s = g(0.0) + g(1.0);
        for k in 1..m {
            s += g(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn f_t_examples() {
        let p = PartitionSchedule::new(0.1, 5).unwrap();
        assert!((p.f_t(0.037) - 0.02).abs() < 1e-15);
        assert_eq!(p.f_t(0.1), 0.1);
        assert_eq!(p.f_t(0.0), 0.0);
        assert_eq!(p.f_t(0.5), 0.5);
        for &b in p.boundaries() {
            assert_eq!(p.f_t(b), b);
        }
        assert!(PartitionSchedule::new(0.0, 5).is_err());
        assert!(PartitionSchedule::new(0.1, 0).is_err());
    }

    #[test]
    fn boundaries_are_uniform() {
        let p = PartitionSchedule::new(0.3, 7).unwrap();
        let b = p.boundaries();
        assert_eq!(b[0], 0.0);
        assert_eq!(b[7], 0.3);
        for w in b.windows(2) {
            assert!((w[1] - w[0] - 0.3 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_partition_maps_to_floored_boundaries() {
        let p = PartitionSchedule::new(0.1, 5).unwrap();
        let g = p.on_grid(1000).unwrap();
        assert_eq!(g.boundary_steps(), &[0, 20, 40, 60, 80, 100]);
        assert_eq!(g.condition_step(1), 0);
        assert_eq!(g.condition_step(19), 0);
        assert_eq!(g.condition_step(20), 20);
        assert_eq!(g.condition_step(99), 80);
        assert_eq!(g.condition_step(100), 100);
        assert_eq!(g.condition(37.0 / 1000.0), 0.02);
        assert_eq!(g.condition(0.5), 0.5);
        let odd = PartitionSchedule::new(0.1, 3).unwrap().on_grid(100).unwrap();
        assert_eq!(odd.boundary_steps(), &[0, 3, 6, 10]);
    }

    #[test]
    fn standard_normal_shared_eps_is_mean_sigma_times_x() {
        let spec = ScheduleSpec::linear();
        let part = PartitionSchedule::new(0.1, 5).unwrap();
        let gm = GaussianMixture::standard_normal(2);
        let x = array![0.7, -1.3];
        let sig = |t: f64| spec.sigma(t).unwrap();
        for (i, t) in [(0usize, 0.013), (3, 0.071)] {
            let b = part.boundaries();
            let mean = simpson_sqrt_oracle(sig, b[i], b[i + 1], 4000) / (b[i + 1] - b[i]);
            let e = shared_optimal_eps(&gm, &spec, &part, x.view(), t).unwrap();
            for k in 0..2 {
                assert!((e[k] - mean * x[k]).abs() < 1e-9, "{} vs {}", e[k], mean * x[k]);
            }
        }
    }

    #[test]
    fn constant_within_sub_intervals_bit_exact() {
        let gm = GaussianMixture::default_ring();
        let spec = ScheduleSpec::linear();
        let shared = SharedAnalytic::new(gm, spec, PartitionSchedule::new(0.1, 5).unwrap()).unwrap();
        let xs = array![[0.3, 0.2], [1.0, -0.1]];
        let a = shared.predict_batch(xs.view(), 0.041).unwrap();
        let b = shared.predict_batch(xs.view(), 0.0599).unwrap();
        let c = shared.predict_batch(xs.view(), 0.04).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn converges_to_exact_predictor_as_interval_shrinks() {
        let gm = GaussianMixture::default_ring();
        let spec = ScheduleSpec::linear();
        let x = array![0.5, 0.5];
        let exact = crate::predictor::eps_optimal(&gm, &spec, 0.05, x.view()).unwrap();
        let mut last = f64::INFINITY;
        for n in [4, 40, 400] {
            let part = PartitionSchedule::new(0.1, n).unwrap();
            // t sits at a left endpoint for each n
            let e = shared_optimal_eps(&gm, &spec, &part, x.view(), 0.05).unwrap();
            let err = norm((&e - &exact).view());
            assert!(err < last);
            last = err;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn bound_dominates_on_ring_and_normal() {
        let spec = ScheduleSpec::linear();
        let part = PartitionSchedule::new(0.1, 5).unwrap();
        let ring = GaussianMixture::default_ring();
        for x in [array![0.9, 0.1], array![0.0, 0.0], array![-0.7, 0.7]] {
            let r = shared_error_bound(&ring, &spec, &part, x.view(), 256).unwrap();
            assert!(r.holds, "{r:?}");
            r.check().unwrap();
        }
        let r = standard_normal_bound(&spec, &part, array![1.0, 2.0].view(), 256).unwrap();
        assert!(r.holds && r.max_actual_error > 0.0, "{r:?}");
        // the worst sub-interval is the first one, where sigma rises fastest
        let s = spec.sigma(0.02).unwrap();
        assert!((r.delta_sigma_max - s).abs() < 1e-15);
        assert!((s - 0.0775).abs() < 1e-3);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x - 1.0).collect();
        let (s, i, r2, res) = linear_fit(&xs, &ys);
        assert!((s - 0.5).abs() < 1e-14 && (i + 1.0).abs() < 1e-14);
        assert!((r2 - 1.0).abs() < 1e-12 && res < 1e-14);
    }

    #[test]
    fn convergence_needs_two_decades() {
        let gm = GaussianMixture::standard_normal(1);
        let xs = array![[1.0]];
        assert!(convergence_order(&gm, &ScheduleSpec::linear(), 0.1, &[2, 4, 8], xs.view(), 16).is_err());
    }
}
