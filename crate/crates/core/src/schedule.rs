//! Continuous-time variance-preserving noise schedules.
//!
//! Every schedule is expressed on the canonical time axis `tau ∈ [0, 1]` with
//! `alpha(tau)^2 + sigma(tau)^2 = 1`. Discrete timesteps `t ∈ {1..T}` map to
//! `tau = t / T`.
//!
//! `sigma` is never formed as `sqrt(1 - alpha^2)` directly: each family
//! carries an expression for `sigma^2` that stays accurate when `alpha` is
//! within rounding of one, which is exactly the regime the Lipschitz probes
//! care about.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Quadratic,
    Cosine,
    CosineShift,
    ZeroTerminalSnr,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            "cosine" => Ok(Self::Cosine),
            "cosine_shift" => Ok(Self::CosineShift),
            "zero_terminal_snr" => Ok(Self::ZeroTerminalSnr),
            other => Err(Error::InvalidSpec(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// A noise schedule: family plus parameters.
///
/// `beta_min_bar` / `beta_max_bar` are the continuous-limit endpoints of
/// `beta(tau)` for the linear and quadratic families (and the base of the
/// zero-terminal-SNR rescaling). `cosine_offset` is the cosine offset `s`.
/// When `modified_ns` is set, the schedule is evaluated with the repair that
/// forces `dalpha/dtau = 0` at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub beta_min_bar: f64,
    pub beta_max_bar: f64,
    pub cosine_offset: f64,
    pub shift_factor: f64,
    pub modified_ns: bool,
    /// Discrete grid size `T`.
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            beta_min_bar: 0.1,
            beta_max_bar: 20.0,
            cosine_offset: 0.008,
            shift_factor: 0.25,
            modified_ns: false,
            steps: 1000,
        }
    }
}

/// Drift coefficient `f = d log alpha / dtau` and squared diffusion
/// `g^2 = 2 sigma^2 d log(sigma / alpha) / dtau` of the forward SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeCoeffs {
    pub drift_coeff: f64,
    pub diffusion_sq: f64,
}

/// One row of a schedule table. `dsigma_dtau` is `None` where it diverges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub tau: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub dalpha_dtau: f64,
    pub dsigma_dtau: Option<f64>,
    pub snr: f64,
}

/// Value, first and second derivative of alpha plus an accurate sigma^2.
#[derive(Debug, Clone, Copy)]
struct Eval {
    alpha: f64,
    sigma_sq: f64,
    d1: f64,
    d2: f64,
}

/// beta(tau) polynomial families after resolving the modified-NS repair.
#[derive(Debug, Clone, Copy)]
struct BetaPoly {
    quadratic: bool,
    bmin: f64,
    bmax: f64,
}

impl BetaPoly {
    fn beta(&self, tau: f64) -> f64 {
        if self.quadratic {
            let (a, c) = self.sqrt_coeffs();
            (a + c * tau).powi(2)
        } else {
            self.bmin + (self.bmax - self.bmin) * tau
        }
    }

    fn dbeta(&self, tau: f64) -> f64 {
        if self.quadratic {
            let (a, c) = self.sqrt_coeffs();
            2.0 * c * (a + c * tau)
        } else {
            self.bmax - self.bmin
        }
    }

    /// Closed-form `∫_0^tau beta(s) ds`.
    fn integral(&self, tau: f64) -> f64 {
        if self.quadratic {
            let (a, c) = self.sqrt_coeffs();
            a * a * tau + a * c * tau * tau + c * c * tau.powi(3) / 3.0
        } else {
            self.bmin * tau + 0.5 * (self.bmax - self.bmin) * tau * tau
        }
    }

    fn sqrt_coeffs(&self) -> (f64, f64) {
        let a = self.bmin.sqrt();
        (a, self.bmax.sqrt() - a)
    }

    fn eval(&self, tau: f64) -> Eval {
        let integral = self.integral(tau);
        let alpha = (-0.5 * integral).exp();
        let beta = self.beta(tau);
        Eval {
            alpha,
            sigma_sq: -(-integral).exp_m1(),
            d1: -0.5 * beta * alpha,
            d2: (0.25 * beta * beta - 0.5 * self.dbeta(tau)) * alpha,
        }
    }
}

fn cosine_eval(s: f64, tau: f64) -> Eval {
    let k = FRAC_PI_2 / (1.0 + s);
    let u0 = s * k;
    let u = (tau + s) * k;
    let c0 = u0.cos();
    // cos^2(u0) - cos^2(u) = sin(u + u0) sin(u - u0)
    let sigma_sq = ((u + u0).sin() * (u - u0).sin() / (c0 * c0)).clamp(0.0, 1.0);
    let alpha = if tau == 1.0 { 0.0 } else { u.cos() / c0 };
    Eval {
        alpha,
        sigma_sq,
        d1: -k * u.sin() / c0,
        d2: -k * k * alpha,
    }
}

impl ScheduleSpec {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn quadratic() -> Self {
        Self {
            kind: ScheduleKind::Quadratic,
            ..Self::default()
        }
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            ..Self::default()
        }
    }

    pub fn cosine_with_offset(s: f64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            cosine_offset: s,
            ..Self::default()
        }
    }

    pub fn cosine_shift() -> Self {
        Self {
            kind: ScheduleKind::CosineShift,
            ..Self::default()
        }
    }

    pub fn zero_terminal_snr() -> Self {
        Self {
            kind: ScheduleKind::ZeroTerminalSnr,
            ..Self::default()
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.steps < 1 {
            return bad("steps (T) must be a positive integer".into());
        }
        match self.kind {
            ScheduleKind::Linear | ScheduleKind::Quadratic | ScheduleKind::ZeroTerminalSnr => {
                let (lo, hi) = (self.beta_min_bar, self.beta_max_bar);
                if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi <= 0.0 || lo > hi {
                    return bad(format!(
                        "need 0 <= beta_min_bar <= beta_max_bar, beta_max_bar > 0 (got {lo}, {hi})"
                    ));
                }
                if lo == 0.0 && !self.modified_ns {
                    return bad("beta_min_bar must be positive unless modified_ns is set".into());
                }
                if self.modified_ns && self.kind == ScheduleKind::ZeroTerminalSnr {
                    return bad("modified_ns is not defined for zero_terminal_snr".into());
                }
            }
            ScheduleKind::Cosine | ScheduleKind::CosineShift => {
                if !(self.cosine_offset.is_finite() && self.cosine_offset >= 0.0) {
                    return bad(format!("cosine_offset must be >= 0 (got {})", self.cosine_offset));
                }
                if self.kind == ScheduleKind::CosineShift {
                    if !(self.shift_factor.is_finite() && self.shift_factor > 0.0) {
                        return bad(format!("shift_factor must be > 0 (got {})", self.shift_factor));
                    }
                    if self.modified_ns {
                        return bad("modified_ns is not defined for cosine_shift".into());
                    }
                }
            }
        }
        Ok(())
    }

    fn check_tau(tau: f64) -> Result<()> {
        if (0.0..=1.0).contains(&tau) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "tau",
                value: tau,
                domain: "[0, 1]",
            })
        }
    }

    fn beta_poly(&self) -> BetaPoly {
        let quadratic = self.kind == ScheduleKind::Quadratic;
        if !self.modified_ns {
            return BetaPoly {
                quadratic,
                bmin: self.beta_min_bar,
                bmax: self.beta_max_bar,
            };
        }
        let original = BetaPoly {
            quadratic,
            bmin: self.beta_min_bar,
            bmax: self.beta_max_bar,
        };
        let bmax = if quadratic {
            // With beta(0) = 0 the quadratic integral over [0, 1] is bmax / 3;
            // matching it to the original keeps alpha(1), hence SNR(1), fixed.
            3.0 * original.integral(1.0)
        } else {
            self.beta_max_bar
        };
        BetaPoly {
            quadratic,
            bmin: 0.0,
            bmax,
        }
    }

    fn cosine_s(&self) -> f64 {
        if self.modified_ns {
            0.0
        } else {
            self.cosine_offset
        }
    }

    fn eval(&self, tau: f64) -> Result<Eval> {
        Self::check_tau(tau)?;
        Ok(match self.kind {
            ScheduleKind::Linear | ScheduleKind::Quadratic => self.beta_poly().eval(tau),
            ScheduleKind::Cosine => cosine_eval(self.cosine_s(), tau),
            ScheduleKind::CosineShift => {
                let base = cosine_eval(self.cosine_offset, tau);
                let k = self.shift_factor;
                let ac = base.alpha;
                let denom = base.sigma_sq + k * k * ac * ac;
                let ddenom = 2.0 * (k * k - 1.0) * ac * base.d1;
                Eval {
                    alpha: k * ac / denom.sqrt(),
                    sigma_sq: base.sigma_sq / denom,
                    d1: k * base.d1 / denom.powf(1.5),
                    d2: k * (base.d2 / denom.powf(1.5) - 1.5 * base.d1 * ddenom / denom.powf(2.5)),
                }
            }
            ScheduleKind::ZeroTerminalSnr => {
                let poly = BetaPoly {
                    quadratic: false,
                    bmin: self.beta_min_bar,
                    bmax: self.beta_max_bar,
                };
                let base = poly.eval(tau);
                let terminal = poly.eval(1.0).alpha;
                let scale = 1.0 - terminal;
                let alpha = if tau == 1.0 {
                    0.0
                } else {
                    (base.alpha - terminal) / scale
                };
                // 1 - alpha = (1 - alpha_base) / (1 - alpha_base(1))
                let one_minus = -(-0.5 * poly.integral(tau)).exp_m1() / scale;
                Eval {
                    alpha,
                    sigma_sq: (one_minus * (1.0 + alpha)).clamp(0.0, 1.0),
                    d1: base.d1 / scale,
                    d2: base.d2 / scale,
                }
            }
        })
    }

    pub fn alpha(&self, tau: f64) -> Result<f64> {
        Ok(self.eval(tau)?.alpha)
    }

    pub fn sigma(&self, tau: f64) -> Result<f64> {
        Ok(self.eval(tau)?.sigma_sq.sqrt())
    }

    /// `(alpha, sigma)` from a single evaluation.
    pub fn alpha_sigma(&self, tau: f64) -> Result<(f64, f64)> {
        let e = self.eval(tau)?;
        Ok((e.alpha, e.sigma_sq.sqrt()))
    }

    pub fn dalpha_dt(&self, tau: f64) -> Result<f64> {
        Ok(self.eval(tau)?.d1)
    }

    pub fn d2alpha_dt2(&self, tau: f64) -> Result<f64> {
        Ok(self.eval(tau)?.d2)
    }

    /// `dalpha/dtau` at the origin; zero exactly when the schedule is regular there.
    pub fn dalpha_at_zero(&self) -> f64 {
        self.eval(0.0).map(|e| e.d1).unwrap_or(f64::NAN)
    }

    /// True when `dsigma/dtau` diverges as `tau -> 0`.
    pub fn is_singular_at_zero(&self) -> bool {
        self.dalpha_at_zero() != 0.0
    }

    /// `dsigma/dtau = -alpha / sqrt(1 - alpha^2) * dalpha/dtau`.
    ///
    /// At `tau = 0` this is [`Error::Singular`] when `dalpha/dtau|0 != 0`, and
    /// the limit `sqrt(-alpha''(0))` (from `sigma^2 ≈ -alpha''(0) tau^2`) otherwise.
    pub fn dsigma_dt(&self, tau: f64) -> Result<f64> {
        let e = self.eval(tau)?;
        if e.sigma_sq == 0.0 {
            if e.d1 != 0.0 {
                return Err(Error::Singular {
                    tau,
                    dalpha0: e.d1,
                });
            }
            return Ok((-e.d2).max(0.0).sqrt());
        }
        Ok(-e.alpha * e.d1 / e.sigma_sq.sqrt())
    }

    /// `alpha^2 / sigma^2`; `f64::INFINITY` where sigma vanishes.
    pub fn snr(&self, tau: f64) -> Result<f64> {
        let e = self.eval(tau)?;
        if e.sigma_sq == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(e.alpha * e.alpha / e.sigma_sq)
    }

    /// Half log-SNR, `lambda = log(alpha / sigma)`.
    pub fn log_snr(&self, tau: f64) -> Result<f64> {
        let e = self.eval(tau)?;
        Ok(e.alpha.ln() - 0.5 * e.sigma_sq.ln())
    }

    /// Inverse of [`log_snr`](Self::log_snr) by bisection (lambda is strictly
    /// decreasing in tau).
    pub fn tau_from_log_snr(&self, lambda: f64) -> Result<f64> {
        if lambda.is_nan() {
            return Err(Error::Domain {
                what: "lambda",
                value: lambda,
                domain: "finite reals",
            });
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.log_snr(mid)? > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Forward-SDE coefficients. `g^2` uses `sigma sigma' = -alpha alpha'`, so
    /// it stays finite at `tau = 0`; only `alpha = 0` is rejected.
    pub fn sde_coeffs(&self, tau: f64) -> Result<SdeCoeffs> {
        let e = self.eval(tau)?;
        if e.alpha <= 0.0 {
            return Err(Error::Domain {
                what: "tau",
                value: tau,
                domain: "times with alpha(tau) > 0",
            });
        }
        let drift_coeff = e.d1 / e.alpha;
        // 2 sigma^2 (sigma'/sigma - alpha'/alpha)
        let diffusion_sq = 2.0 * (-e.alpha * e.d1 - e.sigma_sq * drift_coeff);
        Ok(SdeCoeffs {
            drift_coeff,
            diffusion_sq,
        })
    }

    /// The discrete DDPM beta sequence `beta_1..beta_T` (linear or quadratic).
    pub fn discrete_betas(&self) -> Result<Vec<f64>> {
        let t_total = self.steps;
        if t_total < 2 {
            return Err(Error::InvalidSpec("discrete betas need T >= 2".into()));
        }
        let kind = self.kind;
        if !matches!(kind, ScheduleKind::Linear | ScheduleKind::Quadratic) {
            return Err(Error::Unsupported(format!(
                "{kind:?} defines alpha directly and has no discrete beta sequence"
            )));
        }
        let poly = self.beta_poly();
        let tf = t_total as f64;
        let (lo, hi) = (poly.bmin / tf, poly.bmax / tf);
        Ok((1..=t_total)
            .map(|t| {
                let frac = (t - 1) as f64 / (tf - 1.0);
                if poly.quadratic {
                    (lo.sqrt() + (hi.sqrt() - lo.sqrt()) * frac).powi(2)
                } else {
                    lo + (hi - lo) * frac
                }
            })
            .collect())
    }

    /// Continuous alpha sampled on the discrete grid: index `t` holds
    /// `alpha(t / T)`, so `[0]` is `alpha(0) = 1`.
    pub fn grid_alphas(&self) -> Result<Vec<f64>> {
        let tf = self.steps as f64;
        (0..=self.steps).map(|t| self.alpha(t as f64 / tf)).collect()
    }

    /// The schedule with the repair applied: `beta(0) = 0` for linear and
    /// quadratic (quadratic also rescales `beta_max_bar` so alpha(1) and the
    /// terminal SNR are unchanged), `s = 0` for cosine.
    pub fn apply_modified_ns(&self) -> Result<ScheduleSpec> {
        let mut out = self.clone();
        match self.kind {
            ScheduleKind::Linear | ScheduleKind::Quadratic => {
                let poly = self.beta_poly_forced();
                out.beta_min_bar = 0.0;
                out.beta_max_bar = poly.bmax;
            }
            ScheduleKind::Cosine => out.cosine_offset = 0.0,
            other => {
                return Err(Error::Unsupported(format!(
                    "modified noise schedule is not defined for {other:?}"
                )))
            }
        }
        out.modified_ns = true;
        Ok(out)
    }

    fn beta_poly_forced(&self) -> BetaPoly {
        let mut repaired = self.clone();
        repaired.modified_ns = true;
        repaired.beta_poly()
    }

    /// Rows of (tau, alpha, sigma, alpha', sigma', SNR) on a grid.
    pub fn table(&self, grid: &[f64]) -> Result<Vec<ScheduleRow>> {
        grid.iter()
            .map(|&tau| {
                let (alpha, sigma) = self.alpha_sigma(tau)?;
                let dsigma_dtau = match self.dsigma_dt(tau) {
                    Ok(v) => Some(v),
                    Err(Error::Singular { .. }) => None,
                    Err(e) => return Err(e),
                };
                Ok(ScheduleRow {
                    tau,
                    alpha,
                    sigma,
                    dalpha_dtau: self.dalpha_dt(tau)?,
                    dsigma_dtau,
                    snr: self.snr(tau)?,
                })
            })
            .collect()
    }
}

/// `dalpha/dtau` at zero for the cosine family with offset `s`, in closed form.
pub fn cosine_dalpha_at_zero(s: f64) -> f64 {
    -FRAC_PI_2 / (1.0 + s) * (s / (1.0 + s) * FRAC_PI_2).tan()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Composite Simpson quadrature, independent of the closed-form integrals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn alpha_endpoints() {
        assert_eq!(ScheduleSpec::linear().alpha(0.0).unwrap(), 1.0);
        let cos0 = ScheduleSpec::cosine_with_offset(0.0);
        assert_eq!(cos0.alpha(1.0).unwrap(), 0.0);
        assert_eq!(cos0.sigma(1.0).unwrap(), 1.0);
        for spec in [
            ScheduleSpec::linear(),
            ScheduleSpec::quadratic(),
            ScheduleSpec::cosine(),
            ScheduleSpec::cosine_shift(),
            ScheduleSpec::zero_terminal_snr(),
        ] {
            assert_eq!(spec.sigma(0.0).unwrap(), 0.0, "{:?}", spec.kind);
            assert_relative_eq!(spec.alpha(0.0).unwrap(), 1.0, epsilon = 1e-15);
        }
        assert_eq!(ScheduleSpec::zero_terminal_snr().alpha(1.0).unwrap(), 0.0);
    }

    #[test]
    fn linear_alpha_matches_quadrature_of_beta() {
        let spec = ScheduleSpec::linear();
        let integral = simpson(|s| 0.1 + 19.9 * s, 0.0, 0.5, 2000);
        let oracle = (-0.5 * integral).exp();
        assert_relative_eq!(spec.alpha(0.5).unwrap(), oracle, max_relative = 1e-12);
        assert!((oracle - 0.2811).abs() < 1e-4);
        assert!((spec.sigma(0.5).unwrap() - 0.9597).abs() < 1e-4);
        assert!((spec.snr(0.5).unwrap() - 0.0858).abs() < 1e-4);

        let quad = ScheduleSpec::quadratic();
        let (a, b) = (0.1_f64.sqrt(), 20_f64.sqrt());
        let integral = simpson(|s| (a + (b - a) * s).powi(2), 0.0, 0.7, 2000);
        assert_relative_eq!(quad.alpha(0.7).unwrap(), (-0.5 * integral).exp(), max_relative = 1e-12);
    }

    #[test]
    fn derivatives_at_zero() {
        assert_eq!(ScheduleSpec::linear().dalpha_dt(0.0).unwrap(), -0.05);
        assert_eq!(ScheduleSpec::quadratic().dalpha_dt(0.0).unwrap(), -0.05);
        assert_eq!(ScheduleSpec::cosine_with_offset(0.0).dalpha_dt(0.0).unwrap(), 0.0);
        let c = ScheduleSpec::cosine().dalpha_dt(0.0).unwrap();
        assert!((c - (-0.01943)).abs() < 1e-5, "{c}");
        assert_relative_eq!(c, cosine_dalpha_at_zero(0.008), max_relative = 1e-14);
    }

    #[test]
    fn domain_errors() {
        let spec = ScheduleSpec::linear();
        assert!(matches!(spec.alpha(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(spec.dalpha_dt(1.5), Err(Error::Domain { .. })));
        assert!(spec.alpha(f64::NAN).is_err());
    }

    #[test]
    fn dsigma_singular_vs_regular_at_zero() {
        assert!(matches!(
            ScheduleSpec::linear().dsigma_dt(0.0),
            Err(Error::Singular { .. })
        ));
        let cos0 = ScheduleSpec::cosine_with_offset(0.0);
        assert_relative_eq!(cos0.dsigma_dt(0.0).unwrap(), FRAC_PI_2, max_relative = 1e-12);
        let modified = ScheduleSpec::linear().apply_modified_ns().unwrap();
        assert_relative_eq!(modified.dsigma_dt(0.0).unwrap(), 10f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn dsigma_small_tau_and_mid() {
        let spec = ScheduleSpec::linear();
        let h = 1e-8;
        let fd = |tau: f64| (spec.sigma(tau + h).unwrap() - spec.sigma(tau - h).unwrap()) / (2.0 * h);
        let v = spec.dsigma_dt(1e-4).unwrap();
        // leading-order asymptotic 0.5 sqrt(beta_min / tau); next order is ~1.5%
        assert_relative_eq!(v, 0.5 * (0.1f64 / 1e-4).sqrt(), max_relative = 0.02);
        assert_relative_eq!(v, fd(1e-4), max_relative = 1e-5);
        let mid = spec.dsigma_dt(0.5).unwrap();
        assert!((mid - 0.4135).abs() < 1e-3, "{mid}");
        assert_relative_eq!(mid, fd(0.5), max_relative = 1e-6);
    }

    #[test]
    fn snr_values() {
        assert_eq!(ScheduleSpec::linear().snr(0.0).unwrap(), f64::INFINITY);
        let s = ScheduleSpec::cosine_with_offset(0.0).snr(0.5).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sde_coeffs_match_finite_differences() {
        let spec = ScheduleSpec::linear();
        let c0 = spec.sde_coeffs(0.0).unwrap();
        assert_eq!(c0.drift_coeff, -0.05);
        assert_relative_eq!(c0.diffusion_sq, 0.1, max_relative = 1e-14);
        assert_eq!(ScheduleSpec::cosine_with_offset(0.0).sde_coeffs(0.0).unwrap().drift_coeff, 0.0);

        let tau = 0.5;
        let h = 1e-6;
        let log_alpha = |t: f64| spec.alpha(t).unwrap().ln();
        let log_ratio = |t: f64| (spec.sigma(t).unwrap() / spec.alpha(t).unwrap()).ln();
        let f_fd = (log_alpha(tau + h) - log_alpha(tau - h)) / (2.0 * h);
        let s2 = spec.sigma(tau).unwrap().powi(2);
        let g2_fd = 2.0 * s2 * (log_ratio(tau + h) - log_ratio(tau - h)) / (2.0 * h);
        let c = spec.sde_coeffs(tau).unwrap();
        assert_relative_eq!(c.drift_coeff, f_fd, max_relative = 1e-7);
        assert_relative_eq!(c.diffusion_sq, g2_fd, max_relative = 1e-7);
        // variance preserving: g^2 = beta(tau)
        assert_relative_eq!(c.diffusion_sq, 0.1 + 19.9 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn discrete_betas_examples() {
        let b = ScheduleSpec::linear().discrete_betas().unwrap();
        assert_eq!(b.len(), 1000);
        assert_relative_eq!(b[0], 1e-4, max_relative = 1e-12);
        assert_relative_eq!(b[999], 0.02, max_relative = 1e-12);
        let q = ScheduleSpec::quadratic().with_steps(2).discrete_betas().unwrap();
        assert_relative_eq!(q[0], 0.1 / 2.0, max_relative = 1e-12);
        assert!(matches!(
            ScheduleSpec::cosine().discrete_betas(),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn modified_ns_examples() {
        let cos = ScheduleSpec::cosine().apply_modified_ns().unwrap();
        assert_eq!(cos.cosine_offset, 0.0);
        assert!(cos.modified_ns);
        let lin = ScheduleSpec::linear().apply_modified_ns().unwrap();
        assert_eq!(lin.beta_min_bar, 0.0);
        assert_eq!(lin.dalpha_dt(0.0).unwrap(), 0.0);
        assert!(matches!(
            ScheduleSpec::cosine_shift().apply_modified_ns(),
            Err(Error::Unsupported(_))
        ));
        assert!(ScheduleSpec::zero_terminal_snr().apply_modified_ns().is_err());
    }

    #[test]
    fn modified_quadratic_terminal_snr_matches_root_found_rescale() {
        let quad = ScheduleSpec::quadratic();
        let target = quad.snr(1.0).unwrap();
        // Oracle: bisection on beta_max_bar of a beta(0) = 0 quadratic until
        // SNR(1) matches, using only the public alpha/sigma evaluation.
        let snr_for = |bmax: f64| {
            // beta(0) = 0 quadratic evaluated as-is (no repair flag).
            let raw = ScheduleSpec {
                beta_min_bar: 0.0,
                beta_max_bar: bmax,
                ..ScheduleSpec::quadratic()
            };
            raw.snr(1.0).unwrap()
        };
        let (mut lo, mut hi) = (1.0, 200.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if snr_for(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let modified = quad.apply_modified_ns().unwrap();
        assert_relative_eq!(modified.beta_max_bar, 0.5 * (lo + hi), max_relative = 1e-9);
        let ratio = modified.snr(1.0).unwrap() / target;
        assert!((0.99..=1.01).contains(&ratio), "{ratio}");
        assert_eq!(modified.dalpha_dt(0.0).unwrap(), 0.0);
        // idempotent
        assert_eq!(modified.apply_modified_ns().unwrap(), modified);
    }

    #[test]
    fn log_snr_roundtrip() {
        for spec in [ScheduleSpec::linear(), ScheduleSpec::cosine()] {
            for &tau in &[1e-3, 0.1, 0.5, 0.9, 0.999] {
                let lambda = spec.log_snr(tau).unwrap();
                assert_relative_eq!(spec.tau_from_log_snr(lambda).unwrap(), tau, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec::linear().validate().is_ok());
        let mut s = ScheduleSpec::linear();
        s.beta_min_bar = 30.0;
        assert!(s.validate().is_err());
        s.beta_min_bar = 0.0;
        assert!(s.validate().is_err());
        s.modified_ns = true;
        assert!(s.validate().is_ok());
        let mut c = ScheduleSpec::cosine_shift();
        c.shift_factor = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn table_marks_divergence() {
        let rows = ScheduleSpec::linear().table(&[0.0, 0.5]).unwrap();
        assert!(rows[0].dsigma_dtau.is_none());
        assert!(rows[1].dsigma_dtau.is_some());
        assert_eq!(rows[0].snr, f64::INFINITY);
    }
}
