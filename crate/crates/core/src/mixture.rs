//! Gaussian-mixture data distributions and their exact noised marginals.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::fill_normal;
use crate::schedule::ScheduleSpec;

/// A finite mixture of full-covariance Gaussians in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureParts", into = "MixtureParts")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    covariances: Vec<Array2<f64>>,
}

/// Plain nested-vector form used for config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParts {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureParts> for GaussianMixture {
    type Error = Error;

    fn try_from(p: MixtureParts) -> Result<Self> {
        let means = p.means.into_iter().map(Array1::from).collect();
        let mut covs = Vec::with_capacity(p.covariances.len());
        for rows in p.covariances {
            let d = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let cov = Array2::from_shape_vec((d, flat.len() / d.max(1)), flat)
                .map_err(|e| Error::InvalidSpec(format!("covariance shape: {e}")))?;
            covs.push(cov);
        }
        GaussianMixture::new(p.weights, means, covs)
    }
}

impl From<GaussianMixture> for MixtureParts {
    fn from(g: GaussianMixture) -> Self {
        MixtureParts {
            weights: g.weights,
            means: g.means.into_iter().map(|m| m.to_vec()).collect(),
            covariances: g
                .covariances
                .into_iter()
                .map(|c| c.outer_iter().map(|r| r.to_vec()).collect())
                .collect(),
        }
    }
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        covariances: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidSpec(format!(
                "mixture needs matching non-empty weights/means/covariances (got {k}, {}, {})",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidSpec("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("mixture weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != d {
                return Err(Error::Dimension { expected: d, got: m.len() });
            }
            if c.dim() != (d, d) {
                return Err(Error::Dimension {
                    expected: d,
                    got: c.nrows().max(c.ncols()),
                });
            }
            for i in 0..d {
                for j in 0..i {
                    if (c[[i, j]] - c[[j, i]]).abs() > 1e-12 * (1.0 + c[[i, j]].abs()) {
                        return Err(Error::InvalidSpec("covariance is not symmetric".into()));
                    }
                }
            }
            linalg::cholesky(&c.iter().copied().collect::<Vec<_>>(), d)?;
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    /// `N(0, I_d)`.
    pub fn standard_normal(d: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![Array1::zeros(d)],
            covariances: vec![Array2::eye(d)],
        }
    }

    /// `components` isotropic Gaussians of standard deviation `std`, equally
    /// weighted and equally spaced on a circle of `radius` in the plane.
    pub fn ring(components: usize, radius: f64, std: f64) -> Result<Self> {
        if components == 0 || !(std > 0.0) {
            return Err(Error::InvalidSpec("ring needs components >= 1 and std > 0".into()));
        }
        let w = 1.0 / components as f64;
        let mut weights = vec![w; components];
        // keep the sum exactly representable as 1
        let rest: f64 = weights[1..].iter().sum();
        weights[0] = 1.0 - rest;
        let means = (0..components)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / components as f64;
                Array1::from(vec![radius * a.cos(), radius * a.sin()])
            })
            .collect();
        let covariances = vec![Array2::eye(2) * (std * std); components];
        Self::new(weights, means, covariances)
    }

    /// The default 2-D benchmark: 8 components, radius 1, std 0.05.
    pub fn default_ring() -> Self {
        Self::ring(8, 1.0, 0.05).expect("valid ring parameters")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Array1<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Array2<f64>] {
        &self.covariances
    }

    /// The noised marginal `q_tau = ∫ N(alpha x0, sigma^2 I) q0(dx0)`:
    /// components `N(alpha mu, alpha^2 Sigma + sigma^2 I)`, same weights.
    pub fn marginal_at(&self, spec: &ScheduleSpec, tau: f64) -> Result<GaussianMixture> {
        let (alpha, sigma) = spec.alpha_sigma(tau)?;
        Ok(self.scaled(alpha, sigma))
    }

    pub(crate) fn scaled(&self, alpha: f64, sigma: f64) -> GaussianMixture {
        let d = self.dim();
        let eye = Array2::<f64>::eye(d);
        GaussianMixture {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * alpha).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| c * (alpha * alpha) + &eye * (sigma * sigma))
                .collect(),
        }
    }

    pub fn density(&self) -> Result<MixtureDensity> {
        MixtureDensity::new(self)
    }

    /// Exact ancestral draws: component by weight, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let d = self.dim();
        let factors = self.cholesky_factors()?;
        let mut out = Array2::zeros((n, d));
        let mut z = vec![0.0; d];
        for mut row in out.outer_iter_mut() {
            let k = self.pick_component(rng.random::<f64>());
            fill_normal(rng, &mut z);
            let l = &factors[k];
            for i in 0..d {
                let mut v = self.means[k][i];
                for j in 0..=i {
                    v += l[i * d + j] * z[j];
                }
                row[i] = v;
            }
        }
        Ok(out)
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }

    fn cholesky_factors(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        self.covariances
            .iter()
            .map(|c| linalg::cholesky(&c.iter().copied().collect::<Vec<_>>(), d))
            .collect()
    }
}

/// A mixture prepared for repeated density and score evaluation.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    d: usize,
    log_norm: Vec<f64>,
    means: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl MixtureDensity {
    pub fn new(gm: &GaussianMixture) -> Result<Self> {
        let d = gm.dim();
        let chol = gm.cholesky_factors()?;
        let log_norm = gm
            .weights
            .iter()
            .zip(&chol)
            .map(|(w, l)| {
                w.ln() - 0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * linalg::log_det_from_cholesky(l, d)
            })
            .collect();
        Ok(Self {
            d,
            log_norm,
            means: gm.means.iter().map(|m| m.to_vec()).collect(),
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check(&self, x: &ArrayView1<f64>) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check(&x)?;
        let mut scratch = vec![0.0; self.d];
        let logs: Vec<f64> = (0..self.log_norm.len())
            .map(|k| self.component_log(k, &x, &mut scratch))
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// `∇ log q(x)` with responsibilities formed in the log domain.
    pub fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check(&x)?;
        let mut out = vec![0.0; self.d];
        let mut work = Workspace::new(self.d, self.log_norm.len());
        self.score_into(&x, &mut out, &mut work);
        Ok(Array1::from(out))
    }

    pub fn score_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if xs.ncols() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: xs.ncols(),
            });
        }
        let mut out = Array2::zeros(xs.raw_dim());
        let mut work = Workspace::new(self.d, self.log_norm.len());
        let mut buf = vec![0.0; self.d];
        for (x, mut o) in xs.outer_iter().zip(out.outer_iter_mut()) {
            self.score_into(&x, &mut buf, &mut work);
            for (dst, src) in o.iter_mut().zip(&buf) {
                *dst = *src;
            }
        }
        Ok(out)
    }

    /// log of `w_k N(x; mu_k, Sigma_k)`; leaves `L_k^{-1}(x - mu_k)` in `scratch`.
    fn component_log(&self, k: usize, x: &ArrayView1<f64>, scratch: &mut [f64]) -> f64 {
        for i in 0..self.d {
            scratch[i] = x[i] - self.means[k][i];
        }
        linalg::forward_solve(&self.chol[k], self.d, scratch);
        self.log_norm[k] - 0.5 * scratch.iter().map(|v| v * v).sum::<f64>()
    }

    fn score_into(&self, x: &ArrayView1<f64>, out: &mut [f64], work: &mut Workspace) {
        let d = self.d;
        let k_total = self.log_norm.len();
        for k in 0..k_total {
            let slot = &mut work.solved[k * d..(k + 1) * d];
            work.logs[k] = self.component_log(k, x, slot);
            linalg::backward_solve_transposed(&self.chol[k], d, slot);
        }
        let lse = log_sum_exp(&work.logs);
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..k_total {
            let r = (work.logs[k] - lse).exp();
            for i in 0..d {
                out[i] -= r * work.solved[k * d + i];
            }
        }
    }
}

struct Workspace {
    logs: Vec<f64>,
    solved: Vec<f64>,
}

impl Workspace {
    fn new(d: usize, k: usize) -> Self {
        Self {
            logs: vec![0.0; k],
            solved: vec![0.0; k * d],
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn validation() {
        let m = vec![array![0.0, 0.0]];
        assert!(GaussianMixture::new(vec![0.9], m.clone(), vec![Array2::eye(2)]).is_err());
        assert!(GaussianMixture::new(vec![1.0], m.clone(), vec![array![[1.0, 2.0], [2.0, 1.0]]]).is_err());
        assert!(GaussianMixture::new(vec![1.0], m.clone(), vec![array![[1.0, 0.1], [0.0, 1.0]]]).is_err());
        assert!(GaussianMixture::new(vec![1.0], m, vec![Array2::eye(3)]).is_err());
        assert!(GaussianMixture::default_ring().weights().iter().sum::<f64>() == 1.0);
    }

    #[test]
    fn standard_normal_marginal_is_stationary() {
        let gm = GaussianMixture::standard_normal(2);
        for spec in [ScheduleSpec::linear(), ScheduleSpec::cosine()] {
            for &tau in &[0.0, 0.3, 0.9] {
                let m = gm.marginal_at(&spec, tau).unwrap();
                assert!(m.means()[0].iter().all(|v| *v == 0.0));
                let c = &m.covariances()[0];
                assert_relative_eq!(c[[0, 0]], 1.0, epsilon = 1e-12);
                assert_eq!(c[[0, 1]], 0.0);
            }
        }
    }

    #[test]
    fn marginal_at_zero_and_half() {
        let gm = GaussianMixture::new(
            vec![1.0],
            vec![array![1.0, -2.0]],
            vec![array![[1e-6, 0.0], [0.0, 1e-6]]],
        )
        .unwrap();
        let spec = ScheduleSpec::linear();
        assert_eq!(gm.marginal_at(&spec, 0.0).unwrap(), gm);

        let g = GaussianMixture::new(
            vec![1.0],
            vec![array![1.0, -2.0]],
            vec![array![[2.0, 0.3], [0.3, 0.5]]],
        )
        .unwrap();
        let m = g.marginal_at(&spec, 0.5).unwrap();
        let (a, s) = spec.alpha_sigma(0.5).unwrap();
        assert!((a - 0.2811).abs() < 1e-4 && (s - 0.9597).abs() < 1e-4);
        assert_relative_eq!(m.means()[0][1], -2.0 * a, max_relative = 1e-14);
        assert_relative_eq!(m.covariances()[0][[0, 1]], 0.3 * a * a, max_relative = 1e-14);
        assert_relative_eq!(m.covariances()[0][[1, 1]], 0.5 * a * a + s * s, max_relative = 1e-14);
    }

    #[test]
    fn score_of_standard_normal_is_minus_x() {
        let dens = GaussianMixture::standard_normal(3).density().unwrap();
        let x = array![0.3, -1.2, 2.5];
        let s = dens.score(x.view()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(s[i], -x[i], epsilon = 1e-15);
        }
        assert!(dens.score(array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn score_matches_finite_difference_far_from_modes() {
        // log-sum-exp keeps responsibilities finite far in the tails
        let gm = GaussianMixture::default_ring();
        let dens = gm.density().unwrap();
        let x = array![40.0, -3.0];
        let s = dens.score(x.view()).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        let h = 1e-5;
        for i in 0..2 {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (dens.log_density(p.view()).unwrap() - dens.log_density(m.view()).unwrap()) / (2.0 * h);
            assert_relative_eq!(s[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn sampling_matches_moments() {
        let gm = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![array![-2.0], array![1.0]],
            vec![array![[0.5]], array![[0.1]]],
        )
        .unwrap();
        let xs = gm.sample(200_000, &mut stream(3, 0)).unwrap();
        let mean = xs.mean().unwrap();
        assert!((mean - (0.25 * -2.0 + 0.75)).abs() < 0.01, "{mean}");
        let var = xs.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let exact = 0.25 * (0.5 + 4.0) + 0.75 * (0.1 + 1.0) - 0.25f64.powi(2);
        assert!((var - exact).abs() < 0.02, "{var} vs {exact}");
    }

    #[test]
    fn serde_roundtrip_through_parts() {
        let gm = GaussianMixture::default_ring();
        let json = serde_json::to_string(&gm).unwrap();
        let back: GaussianMixture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, gm);
        let bad = r#"{"weights":[1.0],"means":[[0.0]],"covariances":[[[-1.0]]]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }
}
