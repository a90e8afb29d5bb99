//! Reverse-time samplers: ancestral DDPM, reverse-SDE Euler–Maruyama, DDIM
//! and DPM-Solver 1–3, plus forward simulation of the noising SDE.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{to_eps, Predictor};
use crate::rng::{fill_normal, stream, StreamRng};
use crate::schedule::{ScheduleSpec, SdeCoeffs};
use crate::sharing::{GridPartition, PartitionSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    ReverseSdeEuler,
    Ddim,
    DpmSolver1,
    DpmSolver2,
    DpmSolver3,
    ForwardEuler,
}

impl SamplerKind {
    /// Predictor evaluations per solver step.
    pub fn order(self) -> usize {
        match self {
            SamplerKind::DpmSolver2 => 2,
            SamplerKind::DpmSolver3 => 3,
            _ => 1,
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ancestral" => Self::Ancestral,
            "reverse_sde_euler" => Self::ReverseSdeEuler,
            "ddim" => Self::Ddim,
            "dpm_solver1" => Self::DpmSolver1,
            "dpm_solver2" => Self::DpmSolver2,
            "dpm_solver3" => Self::DpmSolver3,
            "forward_euler" => Self::ForwardEuler,
            other => return Err(Error::InvalidSpec(format!("unknown sampler `{other}`"))),
        })
    }
}

/// Placement of solver time points between the start time and the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    /// Uniform in `t` for DDIM and the SDE solver, uniform in log-SNR for
    /// DPM-Solver (whose steps are sized in log-SNR).
    #[default]
    Auto,
    UniformT,
    UniformLogSnr,
}

impl TimeGrid {
    pub fn resolve(self, kind: SamplerKind) -> TimeGrid {
        match (self, kind) {
            (TimeGrid::Auto, SamplerKind::DpmSolver1 | SamplerKind::DpmSolver2 | SamplerKind::DpmSolver3) => {
                TimeGrid::UniformLogSnr
            }
            (TimeGrid::Auto, _) => TimeGrid::UniformT,
            (g, _) => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub nfe: usize,
    pub partition: Option<PartitionSchedule>,
    pub seed: u64,
    pub eta: f64,
    pub grid: TimeGrid,
    /// Keep a copy of the state every this many steps (0 keeps none).
    pub snapshot_every: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ancestral,
            nfe: 1000,
            partition: None,
            seed: 0,
            eta: 0.0,
            grid: TimeGrid::Auto,
            snapshot_every: 0,
        }
    }
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, nfe: usize) -> Self {
        Self {
            kind,
            nfe,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe < self.kind.order() || self.nfe == 0 {
            return Err(Error::InvalidSpec(format!(
                "{:?} needs nfe >= {} (got {})",
                self.kind,
                self.kind.order().max(1),
                self.nfe
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidSpec(format!("eta must be finite and >= 0 (got {})", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub snapshot: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub samples: Array2<f64>,
    pub config: SamplerConfig,
    /// Predictor evaluations actually made, including the final clean-data
    /// estimate of the continuous-time solvers.
    pub nfe_used: usize,
    pub wall_time_secs: f64,
}

/// Terminal time of the continuous solvers: the first grid point `1/T`.
pub fn time_floor(spec: &ScheduleSpec) -> f64 {
    1.0 / spec.steps as f64
}

/// Start time of the continuous solvers: `1`, or `1 - 1/T` when the
/// schedule reaches `alpha = 0` at `1` and log-SNR is unbounded there.
pub fn time_start(spec: &ScheduleSpec) -> Result<f64> {
    if spec.alpha(1.0)? > 0.0 {
        Ok(1.0)
    } else {
        Ok(1.0 - 1.0 / spec.steps as f64)
    }
}

/// Predictor access with the condition map and evaluation count.
struct Evaluator<'a, P: Predictor + ?Sized> {
    pred: &'a P,
    spec: &'a ScheduleSpec,
    grid: Option<GridPartition>,
    calls: usize,
}

impl<'a, P: Predictor + ?Sized> Evaluator<'a, P> {
    fn new(pred: &'a P, spec: &'a ScheduleSpec, partition: Option<&PartitionSchedule>) -> Result<Self> {
        let grid = partition.map(|p| p.on_grid(spec.steps)).transpose()?;
        Ok(Self {
            pred,
            spec,
            grid,
            calls: 0,
        })
    }

    fn condition(&self, tau: f64) -> f64 {
        match &self.grid {
            Some(g) => g.condition(tau),
            None => tau,
        }
    }

    /// Noise estimate at nominal time `tau`.
    fn eps(&mut self, xs: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
        self.calls += 1;
        let (alpha, sigma) = self.spec.alpha_sigma(tau)?;
        let out = self.pred.predict_batch(xs, self.condition(tau))?;
        Ok(to_eps(self.pred.parameterization(), out, xs, alpha, sigma))
    }
}

fn ensure_finite(x: &Array2<f64>, step: usize) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("entry {pos} of the state is {}", x.as_slice().map_or(f64::NAN, |s| s[pos])),
        });
    }
    Ok(())
}

/// One Gaussian row per chain, each from that chain's stream.
fn chain_noise(rngs: &mut [StreamRng], d: usize) -> Array2<f64> {
    let mut z = Array2::zeros((rngs.len(), d));
    for (mut row, rng) in z.outer_iter_mut().zip(rngs.iter_mut()) {
        fill_normal(rng, row.as_slice_mut().expect("row-major"));
    }
    z
}

fn chain_streams(seed: u64, n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|c| stream(seed, c)).collect()
}

/// One ancestral step from grid time `t` to `t_prev < t` (discrete indices
/// into `alphas`). `z` is ignored when `t_prev == 0`.
pub fn ancestral_update(
    x: &Array2<f64>,
    eps: &Array2<f64>,
    alpha_t: f64,
    alpha_prev: f64,
    z: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let sigma_t = (1.0 - alpha_t * alpha_t).sqrt();
    if !(sigma_t > 0.0) {
        return Err(Error::Domain {
            what: "sigma at ancestral step",
            value: sigma_t,
            domain: "(0, 1]",
        });
    }
    let beta = (1.0 - (alpha_t / alpha_prev).powi(2)).min(0.999);
    let mean = (x - &(eps * (beta / sigma_t))) / (1.0 - beta).sqrt();
    Ok(match z {
        Some(z) => mean + &(z * beta.sqrt()),
        None => mean,
    })
}

/// `x_{t-1}` from `x_t` on the discrete grid, querying the predictor at the
/// partition-mapped condition.
pub fn ancestral_step<P: Predictor + ?Sized>(
    pred: &P,
    spec: &ScheduleSpec,
    x: &Array2<f64>,
    t: usize,
    partition: Option<&PartitionSchedule>,
    z: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    if t == 0 || t > spec.steps {
        return Err(Error::Domain {
            what: "ancestral step index",
            value: t as f64,
            domain: "1..=T",
        });
    }
    let tf = spec.steps as f64;
    let mut ev = Evaluator::new(pred, spec, partition)?;
    let eps = ev.eps(x.view(), t as f64 / tf)?;
    let a_t = spec.alpha(t as f64 / tf)?;
    let a_p = spec.alpha((t - 1) as f64 / tf)?;
    ancestral_update(x, &eps, a_t, a_p, if t == 1 { None } else { z })
}

/// Reverse-time Euler–Maruyama step from `tau` to `tau - dtau` given the
/// score: `x - dtau (f x - g^2 score) + g sqrt(dtau) noise`.
pub fn reverse_sde_update(
    coeffs: SdeCoeffs,
    x: &Array2<f64>,
    score: &Array2<f64>,
    dtau: f64,
    noise: Option<&Array2<f64>>,
) -> Array2<f64> {
    let drift = x * coeffs.drift_coeff - &(score * coeffs.diffusion_sq);
    let mut out = x - &(drift * dtau);
    if let Some(z) = noise {
        out.scaled_add((coeffs.diffusion_sq * dtau).sqrt(), z);
    }
    out
}

/// One reverse-SDE step with the score recovered as `-eps / sigma`.
pub fn reverse_sde_euler_step<P: Predictor + ?Sized>(
    pred: &P,
    spec: &ScheduleSpec,
    x: &Array2<f64>,
    tau: f64,
    dtau: f64,
    noise: Option<&Array2<f64>>,
    partition: Option<&PartitionSchedule>,
) -> Result<Array2<f64>> {
    if !(dtau > 0.0) {
        return Err(Error::Domain {
            what: "dtau",
            value: dtau,
            domain: "(0, tau]",
        });
    }
    let mut ev = Evaluator::new(pred, spec, partition)?;
    let sigma = spec.sigma(tau)?;
    if sigma <= 0.0 {
        return Err(Error::Domain {
            what: "tau (score needs sigma > 0)",
            value: tau,
            domain: "(0, 1]",
        });
    }
    let score = ev.eps(x.view(), tau)? / -sigma;
    Ok(reverse_sde_update(spec.sde_coeffs(tau)?, x, &score, dtau, noise))
}

/// Forward Euler–Maruyama step from `tau` to `tau + dtau`.
pub fn forward_euler_step(
    spec: &ScheduleSpec,
    x: &Array2<f64>,
    tau: f64,
    dtau: f64,
    noise: &Array2<f64>,
) -> Result<Array2<f64>> {
    let c = spec.sde_coeffs(tau)?;
    let mut out = x + &(x * (c.drift_coeff * dtau));
    out.scaled_add((c.diffusion_sq * dtau).sqrt(), noise);
    Ok(out)
}

/// Integrates the forward SDE from 0 to `tau_end` in `steps` equal steps,
/// one random stream per row.
pub fn forward_simulate(
    spec: &ScheduleSpec,
    x0: &Array2<f64>,
    tau_end: f64,
    steps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Ok(x0.clone());
    }
    if !(tau_end > 0.0 && tau_end <= 1.0) {
        return Err(Error::Domain {
            what: "tau_end",
            value: tau_end,
            domain: "(0, 1]",
        });
    }
    let mut rngs = chain_streams(seed, x0.nrows());
    let h = tau_end / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let z = chain_noise(&mut rngs, x.ncols());
        x = forward_euler_step(spec, &x, h * k as f64, h, &z)?;
        ensure_finite(&x, k + 1)?;
    }
    Ok(x)
}

fn log_snr(spec: &ScheduleSpec, tau: f64) -> Result<f64> {
    let (a, s) = spec.alpha_sigma(tau)?;
    Ok(a.ln() - s.ln())
}

/// DDIM update from `t` to `s < t` with stochasticity `eta`.
pub fn ddim_update(
    spec: &ScheduleSpec,
    x: &Array2<f64>,
    eps: &Array2<f64>,
    t: f64,
    s: f64,
    eta: f64,
    z: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let (a_t, sig_t) = spec.alpha_sigma(t)?;
    let (a_s, sig_s) = spec.alpha_sigma(s)?;
    let x0 = (x - &(eps * sig_t)) / a_t;
    let c = if eta > 0.0 && sig_t > 0.0 {
        eta * (sig_s / sig_t) * (1.0 - (a_t / a_s).powi(2)).max(0.0).sqrt()
    } else {
        0.0
    };
    let dir = (sig_s * sig_s - c * c).max(0.0).sqrt();
    let mut out = x0 * a_s + &(eps * dir);
    if let (Some(z), true) = (z, c > 0.0) {
        out.scaled_add(c, z);
    }
    Ok(out)
}

/// First-order DPM-Solver update from `t` to `s`:
/// `(alpha_s/alpha_t) x - sigma_s expm1(h) eps`, `h = lambda_s - lambda_t`.
pub fn dpm1_update(spec: &ScheduleSpec, x: &Array2<f64>, eps: &Array2<f64>, t: f64, s: f64) -> Result<Array2<f64>> {
    let (a_t, _) = spec.alpha_sigma(t)?;
    let (a_s, sig_s) = spec.alpha_sigma(s)?;
    let h = log_snr(spec, s)? - log_snr(spec, t)?;
    Ok(x * (a_s / a_t) - &(eps * (sig_s * h.exp_m1())))
}

/// One DPM-Solver step of `order` in 1..=3 from `t` to `s`. Intermediate
/// points sit at fractions 1/2 (order 2) and 1/3, 2/3 (order 3) of the
/// log-SNR step.
fn dpm_step<P: Predictor + ?Sized>(
    ev: &mut Evaluator<'_, P>,
    x: &Array2<f64>,
    t: f64,
    s: f64,
    order: usize,
) -> Result<Array2<f64>> {
    let spec = *ev.spec;
    let eps_t = ev.eps(x.view(), t)?;
    if order == 1 {
        return dpm1_update(&spec, x, &eps_t, t, s);
    }
    let lam_t = log_snr(&spec, t)?;
    let h = log_snr(&spec, s)? - lam_t;
    let (a_t, _) = spec.alpha_sigma(t)?;
    let (a_s, sig_s) = spec.alpha_sigma(s)?;
    let base = x * (a_s / a_t) - &(&eps_t * (sig_s * h.exp_m1()));
    let inner = |r: f64| -> Result<(f64, f64, f64)> {
        let tau = spec.tau_from_log_snr(lam_t + r * h)?;
        let (a, sg) = spec.alpha_sigma(tau)?;
        Ok((tau, a, sg))
    };
    match order {
        2 => {
            let r1 = 0.5;
            let (s1, a1, sg1) = inner(r1)?;
            let u = x * (a1 / a_t) - &(&eps_t * (sg1 * (r1 * h).exp_m1()));
            let d1 = ev.eps(u.view(), s1)? - &eps_t;
            Ok(base - &(d1 * (sig_s / (2.0 * r1) * h.exp_m1())))
        }
        3 => {
            let (r1, r2) = (1.0 / 3.0, 2.0 / 3.0);
            let (s1, a1, sg1) = inner(r1)?;
            let (s2, a2, sg2) = inner(r2)?;
            let u1 = x * (a1 / a_t) - &(&eps_t * (sg1 * (r1 * h).exp_m1()));
            let d1 = ev.eps(u1.view(), s1)? - &eps_t;
            let phi2 = (r2 * h).exp_m1() / (r2 * h) - 1.0;
            let u2 = x * (a2 / a_t) - &(&eps_t * (sg2 * (r2 * h).exp_m1())) - &(d1 * (sg2 * r2 / r1 * phi2));
            let d2 = ev.eps(u2.view(), s2)? - &eps_t;
            let phi = h.exp_m1() / h - 1.0;
            Ok(base - &(d2 * (sig_s / r2 * phi)))
        }
        _ => Err(Error::Unsupported(format!("DPM-Solver order {order}"))),
    }
}

/// Step orders summing to `nfe`, highest order first.
pub fn dpm_orders(order: usize, nfe: usize) -> Vec<usize> {
    match order {
        3 => {
            let k = nfe / 3 + 1;
            match nfe % 3 {
                0 => {
                    let mut v = vec![3; k - 2];
                    v.extend([2, 1]);
                    v
                }
                1 => {
                    let mut v = vec![3; k - 1];
                    v.push(1);
                    v
                }
                _ => {
                    let mut v = vec![3; k - 1];
                    v.push(2);
                    v
                }
            }
        }
        2 => {
            let mut v = vec![2; nfe / 2];
            if nfe % 2 == 1 {
                v.push(1);
            }
            v
        }
        _ => vec![1; nfe],
    }
}

/// `steps + 1` decreasing times from `start` to `end`.
pub fn solver_times(spec: &ScheduleSpec, grid: TimeGrid, start: f64, end: f64, steps: usize) -> Result<Vec<f64>> {
    let mut ts: Vec<f64> = match grid {
        TimeGrid::UniformT | TimeGrid::Auto => (0..=steps)
            .map(|i| start + (end - start) * i as f64 / steps as f64)
            .collect(),
        TimeGrid::UniformLogSnr => {
            let (l0, l1) = (log_snr(spec, start)?, log_snr(spec, end)?);
            (0..=steps)
                .map(|i| spec.tau_from_log_snr(l0 + (l1 - l0) * i as f64 / steps as f64))
                .collect::<Result<_>>()?
        }
    };
    ts[0] = start;
    ts[steps] = end;
    Ok(ts)
}

/// `(x - sigma eps) / alpha` at the floor.
fn emit_clean<P: Predictor + ?Sized>(ev: &mut Evaluator<'_, P>, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    let (a, s) = ev.spec.alpha_sigma(t)?;
    let eps = ev.eps(x.view(), t)?;
    Ok((x - &(eps * s)) / a)
}

/// Deterministic DDIM from `t_start` down to the floor in `steps`
/// evaluations, then the one-step clean estimate.
pub fn deterministic_denoise<P: Predictor + ?Sized>(
    pred: &P,
    spec: &ScheduleSpec,
    x: Array2<f64>,
    t_start: f64,
    steps: usize,
    partition: Option<&PartitionSchedule>,
) -> Result<Array2<f64>> {
    let floor = time_floor(spec);
    let mut ev = Evaluator::new(pred, spec, partition)?;
    if steps == 0 || t_start <= floor {
        return emit_clean(&mut ev, &x, t_start);
    }
    let ts = solver_times(spec, TimeGrid::UniformT, t_start, floor, steps)?;
    let mut x = x;
    for (k, w) in ts.windows(2).enumerate() {
        let eps = ev.eps(x.view(), w[0])?;
        x = ddim_update(spec, &x, &eps, w[0], w[1], 0.0, None)?;
        ensure_finite(&x, k + 1)?;
    }
    emit_clean(&mut ev, &x, floor)
}

/// Runs the configured sampler from `x_T ~ N(0, I)` for `n_samples`
/// chains in dimension `d`.
pub fn sample<P: Predictor + ?Sized>(
    pred: &P,
    spec: &ScheduleSpec,
    config: &SamplerConfig,
    n_samples: usize,
    d: usize,
) -> Result<TrajectoryRecord> {
    config.validate()?;
    spec.validate()?;
    if d != pred.dim() {
        return Err(Error::Dimension {
            expected: pred.dim(),
            got: d,
        });
    }
    let started = Instant::now();
    let alpha_end = spec.alpha(1.0)?;
    if alpha_end > 0.05 {
        log::warn!("alpha(1) = {alpha_end:.3}; N(0, I) is a poor match for the terminal marginal");
    }
    let mut rngs = chain_streams(config.seed, n_samples);
    let mut x = chain_noise(&mut rngs, d);
    let mut ev = Evaluator::new(pred, spec, config.partition.as_ref())?;
    let mut steps = Vec::new();
    let mut record = |step: usize, t: f64, x: &Array2<f64>| {
        let keep = config.snapshot_every > 0 && step % config.snapshot_every == 0;
        steps.push(StepRecord {
            step,
            t,
            snapshot: keep.then(|| x.outer_iter().map(|r| r.to_vec()).collect()),
        });
    };
    let tf = spec.steps as f64;
    match config.kind {
        SamplerKind::Ancestral => {
            let nfe = config.nfe.min(spec.steps);
            // strided subsequence of the grid; the full grid when nfe == T
            let idx: Vec<usize> = (0..=nfe)
                .map(|k| ((k as f64) * tf / nfe as f64).round() as usize)
                .collect();
            record(0, 1.0, &x);
            for (k, w) in idx.windows(2).rev().enumerate() {
                let (t_prev, t) = (w[0], w[1]);
                let eps = ev.eps(x.view(), t as f64 / tf)?;
                let a_t = spec.alpha(t as f64 / tf)?;
                let a_p = spec.alpha(t_prev as f64 / tf)?;
                let z = (t_prev > 0).then(|| chain_noise(&mut rngs, d));
                x = ancestral_update(&x, &eps, a_t, a_p, z.as_ref())?;
                ensure_finite(&x, k + 1)?;
                record(k + 1, t_prev as f64 / tf, &x);
            }
        }
        SamplerKind::ReverseSdeEuler => {
            let start = time_start(spec)?;
            let floor = time_floor(spec);
            let ts = solver_times(spec, TimeGrid::UniformT, start, floor, config.nfe)?;
            record(0, start, &x);
            for (k, w) in ts.windows(2).enumerate() {
                let sigma = spec.sigma(w[0])?;
                let score = ev.eps(x.view(), w[0])? / -sigma;
                let z = chain_noise(&mut rngs, d);
                x = reverse_sde_update(spec.sde_coeffs(w[0])?, &x, &score, w[0] - w[1], Some(&z));
                ensure_finite(&x, k + 1)?;
                record(k + 1, w[1], &x);
            }
            x = emit_clean(&mut ev, &x, floor)?;
            ensure_finite(&x, ts.len())?;
        }
        SamplerKind::Ddim | SamplerKind::DpmSolver1 | SamplerKind::DpmSolver2 | SamplerKind::DpmSolver3 => {
            let start = time_start(spec)?;
            let floor = time_floor(spec);
            let orders = match config.kind {
                SamplerKind::Ddim => vec![1; config.nfe],
                k => dpm_orders(k.order(), config.nfe),
            };
            let ts = solver_times(spec, config.grid.resolve(config.kind), start, floor, orders.len())?;
            record(0, start, &x);
            for (k, (w, &order)) in ts.windows(2).zip(&orders).enumerate() {
                x = if config.kind == SamplerKind::Ddim {
                    let eps = ev.eps(x.view(), w[0])?;
                    let z = (config.eta > 0.0).then(|| chain_noise(&mut rngs, d));
                    ddim_update(spec, &x, &eps, w[0], w[1], config.eta, z.as_ref())?
                } else {
                    dpm_step(&mut ev, &x, w[0], w[1], order)?
                };
                ensure_finite(&x, k + 1)?;
                record(k + 1, w[1], &x);
            }
            x = emit_clean(&mut ev, &x, floor)?;
            ensure_finite(&x, ts.len())?;
        }
        SamplerKind::ForwardEuler => {
            return Err(Error::Unsupported(
                "forward_euler integrates the noising SDE; use forward_simulate".into(),
            ))
        }
    }
    Ok(TrajectoryRecord {
        steps,
        samples: x,
        config: config.clone(),
        nfe_used: ev.calls,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Sample mean of each coordinate.
pub fn column_means(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianMixture;
    use crate::predictor::{AnalyticEps, AnalyticV, Parameterization, PredictorKind};
    use std::cell::RefCell;

    /// Records every condition value it is asked about.
    struct Capture<P> {
        inner: P,
        seen: RefCell<Vec<f64>>,
    }

    impl<P: Predictor> Predictor for Capture<P> {
        fn kind(&self) -> PredictorKind {
            self.inner.kind()
        }
        fn parameterization(&self) -> Parameterization {
            self.inner.parameterization()
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
            self.seen.borrow_mut().push(t);
            self.inner.predict_batch(xs, t)
        }
    }

    fn normal_pred(spec: ScheduleSpec) -> AnalyticEps {
        AnalyticEps::new(GaussianMixture::standard_normal(2), spec)
    }

    #[test]
    fn dpm1_equals_ddim_eta0() {
        let spec = ScheduleSpec::linear();
        let mut rng = stream(5, 0);
        for &(t, s) in &[(1.0, 0.9), (0.5, 0.3), (0.02, 0.001)] {
            let mut x = Array2::zeros((16, 2));
            fill_normal(&mut rng, x.as_slice_mut().unwrap());
            let mut e = Array2::zeros((16, 2));
            fill_normal(&mut rng, e.as_slice_mut().unwrap());
            let a = ddim_update(&spec, &x, &e, t, s, 0.0, None).unwrap();
            let b = dpm1_update(&spec, &x, &e, t, s).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn orders_sum_to_nfe() {
        for order in 1..=3 {
            for nfe in order..40 {
                let v = dpm_orders(order, nfe);
                assert_eq!(v.iter().sum::<usize>(), nfe, "order {order} nfe {nfe}");
                assert!(v.iter().all(|&o| o <= order));
            }
        }
        assert_eq!(dpm_orders(3, 20), vec![3, 3, 3, 3, 3, 3, 2]);
    }

    #[test]
    fn same_seed_same_output() {
        let spec = ScheduleSpec::linear().with_steps(100);
        let pred = normal_pred(spec);
        let mut cfg = SamplerConfig::new(SamplerKind::Ancestral, 100);
        cfg.seed = 42;
        let a = sample(&pred, &spec, &cfg, 64, 2).unwrap();
        let b = sample(&pred, &spec, &cfg, 64, 2).unwrap();
        assert_eq!(a.samples, b.samples);
        cfg.seed = 43;
        let c = sample(&pred, &spec, &cfg, 64, 2).unwrap();
        assert_ne!(a.samples, c.samples);
        // chains do not depend on how many run together
        cfg.seed = 42;
        let d = sample(&pred, &spec, &cfg, 8, 2).unwrap();
        assert_eq!(d.samples.row(3), a.samples.row(3));
    }

    #[test]
    fn last_ancestral_step_is_deterministic() {
        let spec = ScheduleSpec::linear();
        let pred = normal_pred(spec);
        let x = Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap();
        let z = Array2::from_elem((1, 2), 5.0);
        let a = ancestral_step(&pred, &spec, &x, 1, None, Some(&z)).unwrap();
        let b = ancestral_step(&pred, &spec, &x, 1, None, None).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(ancestral_step(&pred, &spec, &x, 0, None, None).is_err());
    }

    #[test]
    fn partition_conditions_are_grid_boundaries() {
        let spec = ScheduleSpec::linear();
        let part = PartitionSchedule::new(0.1, 5).unwrap();
        let allowed = part.on_grid(spec.steps).unwrap().shared_conditions();
        for kind in [
            SamplerKind::Ancestral,
            SamplerKind::ReverseSdeEuler,
            SamplerKind::Ddim,
            SamplerKind::DpmSolver2,
            SamplerKind::DpmSolver3,
        ] {
            let pred = Capture {
                inner: normal_pred(spec),
                seen: RefCell::new(Vec::new()),
            };
            let mut cfg = SamplerConfig::new(kind, if kind == SamplerKind::Ancestral { 1000 } else { 30 });
            cfg.partition = Some(part.clone());
            let rec = sample(&pred, &spec, &cfg, 4, 2).unwrap();
            let seen = pred.seen.borrow();
            assert_eq!(seen.len(), rec.nfe_used);
            let below: Vec<f64> = seen.iter().copied().filter(|&t| t < 0.1).collect();
            assert!(!below.is_empty(), "{kind:?}");
            for t in below {
                assert!(allowed.contains(&t), "{kind:?} queried {t}");
            }
        }
    }

    #[test]
    fn multistep_inner_points_use_their_own_condition() {
        // one order-2 step straddling the shared boundary
        let spec = ScheduleSpec::linear();
        let part = PartitionSchedule::new(0.1, 5).unwrap();
        let pred = Capture {
            inner: normal_pred(spec),
            seen: RefCell::new(Vec::new()),
        };
        let mut ev = Evaluator::new(&pred, &spec, Some(&part)).unwrap();
        let x = Array2::from_elem((2, 2), 0.1);
        dpm_step(&mut ev, &x, 0.14, 0.02, 2).unwrap();
        let seen = pred.seen.borrow();
        assert_eq!(seen[0], 0.14);
        let mid = spec
            .tau_from_log_snr(0.5 * (log_snr(&spec, 0.14).unwrap() + log_snr(&spec, 0.02).unwrap()))
            .unwrap();
        assert!(mid < 0.1 && mid > 0.02);
        let g = part.on_grid(spec.steps).unwrap();
        assert!(g.shared_conditions().contains(&seen[1]));
        assert!((seen[1] - g.condition(mid)).abs() < 1e-15);
    }

    #[test]
    fn reverse_update_without_diffusion_is_drift_only() {
        let x = Array2::from_elem((1, 2), 1.0);
        let s = Array2::from_elem((1, 2), -1.0);
        let z = Array2::from_elem((1, 2), 3.0);
        let c = SdeCoeffs {
            drift_coeff: -2.0,
            diffusion_sq: 0.0,
        };
        let out = reverse_sde_update(c, &x, &s, 0.1, Some(&z));
        assert!(out.iter().all(|v| (v - 1.2).abs() < 1e-15));
    }

    #[test]
    fn forward_zero_steps_is_identity() {
        let x = Array2::from_elem((3, 2), 0.7);
        assert_eq!(forward_simulate(&ScheduleSpec::linear(), &x, 0.5, 0, 1).unwrap(), x);
    }

    #[test]
    fn v_predictor_samples_like_eps_predictor() {
        let spec = ScheduleSpec::linear();
        let gm = GaussianMixture::default_ring();
        let cfg = SamplerConfig::new(SamplerKind::Ddim, 20);
        let a = sample(&AnalyticEps::new(gm.clone(), spec), &spec, &cfg, 32, 2).unwrap();
        let b = sample(&AnalyticV::new(gm, spec), &spec, &cfg, 32, 2).unwrap();
        for (p, q) in a.samples.iter().zip(b.samples.iter()) {
            assert!((p - q).abs() < 1e-8, "{p} vs {q}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::new(SamplerKind::DpmSolver3, 2).validate().is_err());
        let mut c = SamplerConfig::new(SamplerKind::Ddim, 10);
        c.eta = -1.0;
        assert!(c.validate().is_err());
        let spec = ScheduleSpec::linear();
        assert!(sample(&normal_pred(spec), &spec, &SamplerConfig::new(SamplerKind::ForwardEuler, 10), 2, 2).is_err());
    }
}
