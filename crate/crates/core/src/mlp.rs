//! A small fully connected network `f(x, c)` with a sinusoidal embedding of
//! the condition `c` and hand-written reverse-mode gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Even; half sines, half cosines.
    pub embedding_dim: usize,
    /// The condition is multiplied by this before embedding.
    pub condition_scale: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embedding_dim: 32,
            condition_scale: 1000.0,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec("all layer widths must be >= 1".into()));
        }
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return Err(Error::InvalidSpec(format!(
                "embedding_dim must be even and positive (got {})",
                self.embedding_dim
            )));
        }
        if !self.condition_scale.is_finite() {
            return Err(Error::InvalidSpec("condition_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.embedding_dim
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Sinusoidal embedding rows for the given conditions.
pub fn embed(conditions: &[f64], dim: usize, scale: f64) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((conditions.len(), dim));
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                (-(1e4f64).ln() * k as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    for (mut row, &c) in out.outer_iter_mut().zip(conditions) {
        for (k, f) in freqs.iter().enumerate() {
            let a = c * scale * f;
            row[k] = a.sin();
            row[half + k] = a.cos();
        }
    }
    out
}

/// Parameters live in one flat vector: per layer, `W` (fan_in x fan_out,
/// row-major) then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_params();
        Ok(Self { spec, params: vec![0.0; n] })
    }

    /// Weights and biases uniform on `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        let mut off = 0;
        for (fi, fo) in m.spec.layer_shapes() {
            let bound = 1.0 / (fi as f64).sqrt();
            for p in &mut m.params[off..off + fi * fo + fo] {
                *p = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
            off += fi * fo + fo;
        }
        Ok(m)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.n_params() {
            return Err(Error::Dimension {
                expected: spec.n_params(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let shapes = self.spec.layer_shapes();
        let off: usize = shapes[..l].iter().map(|(i, o)| i * o + o).sum();
        let (fi, fo) = shapes[l];
        let w = ArrayView2::from_shape((fi, fo), &self.params[off..off + fi * fo]).expect("layer shape");
        let b = ArrayView1::from(&self.params[off + fi * fo..off + fi * fo + fo]);
        (w, b)
    }

    fn input(&self, xs: ArrayView2<f64>, conditions: &[f64]) -> Result<Array2<f64>> {
        if xs.ncols() != self.spec.data_dim {
            return Err(Error::Dimension {
                expected: self.spec.data_dim,
                got: xs.ncols(),
            });
        }
        if conditions.len() != xs.nrows() {
            return Err(Error::Dimension {
                expected: xs.nrows(),
                got: conditions.len(),
            });
        }
        let d = self.spec.data_dim;
        let mut h = Array2::zeros((xs.nrows(), self.spec.input_dim()));
        h.slice_mut(s![.., ..d]).assign(&xs);
        h.slice_mut(s![.., d..])
            .assign(&embed(conditions, self.spec.embedding_dim, self.spec.condition_scale));
        Ok(h)
    }

    pub fn forward(&self, xs: ArrayView2<f64>, conditions: &[f64]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(xs, conditions)?.0)
    }

    pub fn forward_cached(&self, xs: ArrayView2<f64>, conditions: &[f64]) -> Result<(Array2<f64>, ForwardCache)> {
        let mut h = self.input(xs, conditions)?;
        let layers = self.spec.layer_shapes().len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers - 1),
        };
        let act = self.spec.activation;
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let z = h.dot(&w) + &b;
            cache.inputs.push(h);
            if l + 1 == layers {
                return Ok((z, cache));
            }
            h = z.mapv(|v| act.apply(v));
            cache.pre.push(z);
        }
        unreachable!("at least one layer")
    }

    /// Adds `d(sum of grad_out . f)/d(params)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>, grads: &mut [f64]) {
        let shapes = self.spec.layer_shapes();
        let act = self.spec.activation;
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (fi, fo) in &shapes {
            offsets.push(off);
            off += fi * fo + fo;
        }
        let mut dz = grad_out.to_owned();
        for l in (0..shapes.len()).rev() {
            let (fi, fo) = shapes[l];
            let o = offsets[l];
            {
                let mut gw = ArrayViewMut2::from_shape((fi, fo), &mut grads[o..o + fi * fo]).expect("layer shape");
                ndarray::linalg::general_mat_mul(1.0, &cache.inputs[l].t(), &dz, 1.0, &mut gw);
            }
            let db = dz.sum_axis(Axis(0));
            for (g, v) in grads[o + fi * fo..o + fi * fo + fo].iter_mut().zip(db.iter()) {
                *g += v;
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let mut da = dz.dot(&w.t());
            da.zip_mut_with(&cache.pre[l - 1], |g, &z| *g *= act.derivative(z));
            dz = da;
        }
    }
}

/// One regression batch, optionally with the time-difference penalty.
#[derive(Debug, Clone)]
pub struct Batch {
    pub xs: Array2<f64>,
    pub conditions: Vec<f64>,
    pub targets: Array2<f64>,
    pub penalty: Option<PenaltyTerm>,
}

/// `weight * mean_b ||f(x_b, c_b) - f(x_b, c'_b)|| / dt_b`.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    pub weight: f64,
    pub conditions_prime: Vec<f64>,
    /// Per-row `|t - t'|` in time units.
    pub dt: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// `mean_b sum_d (f - target)^2`.
    pub regression: f64,
    /// Unweighted penalty.
    pub penalty: f64,
    pub total: f64,
}

/// The time-difference penalty value alone.
pub fn penalty_value(mlp: &Mlp, xs: ArrayView2<f64>, c: &[f64], c_prime: &[f64], dt: &[f64]) -> Result<f64> {
    if dt.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain {
            what: "penalty time offset",
            value: dt.iter().copied().fold(f64::INFINITY, f64::min),
            domain: "(0, inf)",
        });
    }
    let a = mlp.forward(xs, c)?;
    let b = mlp.forward(xs, c_prime)?;
    let diff = a - b;
    let n = xs.nrows() as f64;
    Ok(diff
        .outer_iter()
        .zip(dt)
        .map(|(r, &h)| r.dot(&r).sqrt() / h)
        .sum::<f64>()
        / n)
}

/// Loss value and its gradient with respect to every parameter.
pub fn loss_and_grad(mlp: &Mlp, batch: &Batch) -> Result<(LossParts, Vec<f64>)> {
    let n = batch.xs.nrows();
    if batch.targets.dim() != (n, mlp.spec.data_dim) {
        return Err(Error::Dimension {
            expected: n * mlp.spec.data_dim,
            got: batch.targets.len(),
        });
    }
    let nf = n as f64;
    let mut grads = vec![0.0; mlp.params.len()];
    let (pred, cache) = mlp.forward_cached(batch.xs.view(), &batch.conditions)?;
    let resid = &pred - &batch.targets;
    let regression = resid.iter().map(|v| v * v).sum::<f64>() / nf;
    mlp.backward(&cache, (resid * (2.0 / nf)).view(), &mut grads);
    let mut penalty = 0.0;
    let mut total = regression;
    if let Some(p) = &batch.penalty {
        if p.conditions_prime.len() != n || p.dt.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: p.conditions_prime.len().min(p.dt.len()),
            });
        }
        if p.dt.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                what: "penalty time offset",
                value: p.dt.iter().copied().fold(f64::INFINITY, f64::min),
                domain: "(0, inf)",
            });
        }
        let (other, cache2) = mlp.forward_cached(batch.xs.view(), &p.conditions_prime)?;
        let mut diff = &pred - &other;
        for (mut row, &h) in diff.outer_iter_mut().zip(&p.dt) {
            let norm = row.dot(&row).sqrt();
            penalty += norm / h;
            // unit direction; zero difference contributes no gradient
            let g = if norm > 0.0 { p.weight / (h * norm * nf) } else { 0.0 };
            row.mapv_inplace(|v| v * g);
        }
        penalty /= nf;
        total += p.weight * penalty;
        mlp.backward(&cache, diff.view(), &mut grads);
        mlp.backward(&cache2, (-diff).view(), &mut grads);
    }
    Ok((
        LossParts {
            regression,
            penalty,
            total,
        },
        grads,
    ))
}

/// Loss value only.
pub fn loss_value(mlp: &Mlp, batch: &Batch) -> Result<f64> {
    let pred = mlp.forward(batch.xs.view(), &batch.conditions)?;
    let nf = batch.xs.nrows() as f64;
    let mut total = (&pred - &batch.targets).iter().map(|v| v * v).sum::<f64>() / nf;
    if let Some(p) = &batch.penalty {
        total += p.weight * penalty_value(mlp, batch.xs.view(), &batch.conditions, &p.conditions_prime, &p.dt)?;
    }
    Ok(total)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// `ema = decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Rows of a slice as a column of conditions.
pub fn conditions_column(c: &[f64]) -> Array1<f64> {
    Array1::from(c.to_vec())
}
