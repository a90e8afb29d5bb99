//! A uniform evaluation interface over analytic and learned predictors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    AnalyticEps,
    AnalyticV,
    SharedAnalytic,
    TrainedMlp,
    RemappedMlp,
}

/// What the output of a predictor estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The injected noise `eps`.
    Eps,
    /// `alpha * eps - sigma * x0`.
    V,
}

/// `pred(x, t)` for a batch of rows `x`. `t` is the time the caller asks
/// about; predictors that share or remap conditions apply that map
/// themselves, so evaluation is deterministic in `(x, t)`.
pub trait Predictor {
    fn kind(&self) -> PredictorKind;
    fn parameterization(&self) -> Parameterization;
    fn dim(&self) -> usize;
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>>;

    fn predict(&self, x: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        let xs = x.insert_axis(ndarray::Axis(0));
        Ok(self.predict_batch(xs, t)?.row(0).to_owned())
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn kind(&self) -> PredictorKind {
        (**self).kind()
    }
    fn parameterization(&self) -> Parameterization {
        (**self).parameterization()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        (**self).predict_batch(xs, t)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn kind(&self) -> PredictorKind {
        (**self).kind()
    }
    fn parameterization(&self) -> Parameterization {
        (**self).parameterization()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        (**self).predict_batch(xs, t)
    }
}

pub(crate) fn check_dim(xs: &ArrayView2<f64>, d: usize) -> Result<()> {
    if xs.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: xs.ncols(),
        });
    }
    Ok(())
}

/// `∇_x log q_tau(x)` for rows of `xs`.
pub fn score_batch(
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    tau: f64,
    xs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    gm.marginal_at(spec, tau)?.density()?.score_batch(xs)
}

pub fn score(gm: &GaussianMixture, spec: &ScheduleSpec, tau: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    gm.marginal_at(spec, tau)?.density()?.score(x)
}

/// The minimiser of the noise-prediction loss: `-sigma * score`.
pub fn eps_optimal_batch(
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    tau: f64,
    xs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let sigma = spec.sigma(tau)?;
    if sigma == 0.0 {
        check_dim(&xs, gm.dim())?;
        return Ok(Array2::zeros(xs.raw_dim()));
    }
    Ok(score_batch(gm, spec, tau, xs)? * -sigma)
}

pub fn eps_optimal(gm: &GaussianMixture, spec: &ScheduleSpec, tau: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let xs = x.insert_axis(ndarray::Axis(0));
    Ok(eps_optimal_batch(gm, spec, tau, xs)?.row(0).to_owned())
}

/// The minimiser of the v-prediction loss, `-(sigma/alpha)(x + score)`.
///
/// With `E[eps|x] = -sigma score` and `x0 = (x - sigma eps)/alpha` the
/// conditional mean of `alpha eps - sigma x0` reduces to this expression for
/// any data distribution, mixtures included.
pub fn v_optimal_batch(
    gm: &GaussianMixture,
    spec: &ScheduleSpec,
    tau: f64,
    xs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (alpha, sigma) = spec.alpha_sigma(tau)?;
    check_dim(&xs, gm.dim())?;
    if sigma == 0.0 {
        return Ok(Array2::zeros(xs.raw_dim()));
    }
    if alpha <= 0.0 {
        return Err(Error::Domain {
            what: "alpha (v-prediction divides by it)",
            value: alpha,
            domain: "(0, 1]",
        });
    }
    let s = score_batch(gm, spec, tau, xs)?;
    Ok((&xs + &s) * (-sigma / alpha))
}

pub fn v_optimal(gm: &GaussianMixture, spec: &ScheduleSpec, tau: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let xs = x.insert_axis(ndarray::Axis(0));
    Ok(v_optimal_batch(gm, spec, tau, xs)?.row(0).to_owned())
}

/// Exact noise predictor for mixture data.
#[derive(Debug, Clone)]
pub struct AnalyticEps {
    pub data: GaussianMixture,
    pub spec: ScheduleSpec,
}

impl AnalyticEps {
    pub fn new(data: GaussianMixture, spec: ScheduleSpec) -> Self {
        Self { data, spec }
    }
}

impl Predictor for AnalyticEps {
    fn kind(&self) -> PredictorKind {
        PredictorKind::AnalyticEps
    }
    fn parameterization(&self) -> Parameterization {
        Parameterization::Eps
    }
    fn dim(&self) -> usize {
        self.data.dim()
    }
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        eps_optimal_batch(&self.data, &self.spec, t, xs)
    }
}

/// Exact v predictor for mixture data.
#[derive(Debug, Clone)]
pub struct AnalyticV {
    pub data: GaussianMixture,
    pub spec: ScheduleSpec,
}

impl AnalyticV {
    pub fn new(data: GaussianMixture, spec: ScheduleSpec) -> Self {
        Self { data, spec }
    }
}

impl Predictor for AnalyticV {
    fn kind(&self) -> PredictorKind {
        PredictorKind::AnalyticV
    }
    fn parameterization(&self) -> Parameterization {
        Parameterization::V
    }
    fn dim(&self) -> usize {
        self.data.dim()
    }
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        v_optimal_batch(&self.data, &self.spec, t, xs)
    }
}

/// Converts a predictor output at time `tau` into a noise estimate.
pub fn to_eps(
    param: Parameterization,
    out: Array2<f64>,
    xs: ArrayView2<f64>,
    alpha: f64,
    sigma: f64,
) -> Array2<f64> {
    match param {
        Parameterization::Eps => out,
        // v = alpha eps - sigma x0 and x = alpha x0 + sigma eps give
        // eps = sigma x + alpha v
        Parameterization::V => out * alpha + &(&xs * sigma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn two_bumps() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![array![-1.0, 0.0], array![1.0, 0.0]],
            vec![Array2::eye(2) * 0.04, Array2::eye(2) * 0.04],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_eps_is_sigma_x() {
        let gm = GaussianMixture::standard_normal(2);
        let spec = ScheduleSpec::linear();
        let mut rng = stream(1, 0);
        for _ in 0..50 {
            let tau: f64 = rng.random();
            let x = array![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() - 0.5];
            let e = eps_optimal(&gm, &spec, tau, x.view()).unwrap();
            let s = spec.sigma(tau).unwrap();
            // alpha^2 + sigma^2 is 1 only to rounding
            assert_relative_eq!(e[0], s * x[0], max_relative = 1e-15);
            assert_relative_eq!(e[1], s * x[1], max_relative = 1e-15);
            let v = v_optimal(&gm, &spec, tau, x.view()).unwrap();
            let a = spec.alpha(tau).unwrap();
            assert!(v.iter().all(|c| c.abs() < 1e-15 * (s / a) * 4.0), "{v}");
        }
    }

    #[test]
    fn eps_at_zero_time_is_zero() {
        let e = eps_optimal(&two_bumps(), &ScheduleSpec::linear(), 0.0, array![0.3, 0.1].view()).unwrap();
        assert!(e.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_axis_score_has_no_off_axis_component() {
        let gm = two_bumps();
        let spec = ScheduleSpec::cosine();
        let x = array![0.4, 0.0];
        let s = score(&gm, &spec, 0.3, x.view()).unwrap();
        assert_eq!(s[1], 0.0);
        let dens = gm.marginal_at(&spec, 0.3).unwrap().density().unwrap();
        let h = 1e-6;
        let fd = (dens.log_density(array![0.4 + h, 0.0].view()).unwrap()
            - dens.log_density(array![0.4 - h, 0.0].view()).unwrap())
            / (2.0 * h);
        assert_relative_eq!(s[0], fd, max_relative = 1e-6);
    }

    #[test]
    fn score_matches_finite_differences_at_random_points() {
        let gm = GaussianMixture::default_ring();
        let mut rng = stream(2, 0);
        for spec in [ScheduleSpec::linear(), ScheduleSpec::cosine()] {
            for _ in 0..50 {
                let tau = 0.02 + 0.96 * rng.random::<f64>();
                let m = gm.marginal_at(&spec, tau).unwrap();
                let x = m.sample(1, &mut rng).unwrap().row(0).to_owned();
                let dens = m.density().unwrap();
                let s = dens.score(x.view()).unwrap();
                let h = 1e-5 * spec.sigma(tau).unwrap();
                for i in 0..2 {
                    let mut p = x.clone();
                    let mut q = x.clone();
                    p[i] += h;
                    q[i] -= h;
                    let fd = (dens.log_density(p.view()).unwrap() - dens.log_density(q.view()).unwrap()) / (2.0 * h);
                    let scale = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    assert!((s[i] - fd).abs() <= 1e-5 * scale.max(1.0), "{} vs {fd}", s[i]);
                }
            }
        }
    }

    #[test]
    fn v_matches_monte_carlo_conditional_mean() {
        // Condition on x_tau lying in a small ball by importance weighting
        // draws of x0 with the Gaussian kernel: E[v | x] = sum w_i v_i / sum w_i
        // where w_i = N(x; alpha x0_i, sigma^2 I), v_i = alpha eps_i - sigma x0_i
        // and eps_i = (x - alpha x0_i)/sigma.
        let gm = two_bumps();
        let spec = ScheduleSpec::linear();
        let tau = 0.1;
        let (a, s) = spec.alpha_sigma(tau).unwrap();
        let x = array![0.3, -0.2];
        let x0s = gm.sample(400_000, &mut stream(4, 0)).unwrap();
        let mut num = Array1::<f64>::zeros(2);
        let mut den = 0.0;
        for x0 in x0s.outer_iter() {
            let eps = (&x - &(&x0 * a)) / s;
            let w = (-0.5 * eps.dot(&eps)).exp();
            num = num + (&eps * a - &(&x0 * s)) * w;
            den += w;
        }
        let mc = num / den;
        let v = v_optimal(&gm, &spec, tau, x.view()).unwrap();
        for i in 0..2 {
            assert!((mc[i] - v[i]).abs() < 0.01 * (1.0 + v[i].abs()), "{mc} vs {v}");
        }
    }

    #[test]
    fn v_to_eps_conversion_recovers_eps() {
        let gm = two_bumps();
        let spec = ScheduleSpec::quadratic();
        let xs = array![[0.2, 0.1], [-1.0, 0.5]];
        let tau = 0.4;
        let (a, s) = spec.alpha_sigma(tau).unwrap();
        let v = AnalyticV::new(gm.clone(), spec).predict_batch(xs.view(), tau).unwrap();
        let e = to_eps(Parameterization::V, v, xs.view(), a, s);
        let exact = AnalyticEps::new(gm, spec).predict_batch(xs.view(), tau).unwrap();
        for (p, q) in e.iter().zip(exact.iter()) {
            assert_relative_eq!(*p, *q, epsilon = 1e-12);
        }
    }

    #[test]
    fn v_rejects_zero_alpha() {
        let spec = ScheduleSpec::cosine_with_offset(0.0);
        let gm = GaussianMixture::standard_normal(1);
        assert!(v_optimal(&two_bumps(), &spec, 1.0, array![0.0, 0.0].view()).is_err());
        assert!(v_optimal(&gm, &spec, 0.0, array![1.0].view()).unwrap()[0] == 0.0);
    }
}
