//! Training the MLP predictor: baseline, shared-condition, v-prediction,
//! time-difference penalty and remapped-condition variants.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::mlp::{ema_update, loss_and_grad, Adam, Batch, LossParts, Mlp, MlpSpec, PenaltyTerm};
use crate::predictor::{check_dim, Parameterization, Predictor, PredictorKind};
use crate::rng::{fill_normal, stream, StreamRng};
use crate::schedule::ScheduleSpec;
use crate::sharing::{GridPartition, PartitionSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    EpsPrediction,
    VPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapKind {
    /// `lambda = 1/t`.
    InverseT,
    /// `lambda = logit(t)`.
    InverseSigmoid,
}

impl RemapKind {
    /// `t -> lambda`, with `t` clamped into the grid range first.
    pub fn forward(self, t: f64, steps: usize) -> f64 {
        let lo = 1.0 / steps as f64;
        match self {
            RemapKind::InverseT => 1.0 / t.clamp(lo, 1.0),
            RemapKind::InverseSigmoid => {
                let t = t.clamp(lo, 1.0 - lo);
                (t / (1.0 - t)).ln()
            }
        }
    }

    /// `lambda -> t`, clamped into `[1/T, 1]` (`[1/T, 1 - 1/T]` for logit).
    pub fn inverse(self, lambda: f64, steps: usize) -> f64 {
        let lo = 1.0 / steps as f64;
        match self {
            RemapKind::InverseT => (1.0 / lambda).clamp(lo, 1.0),
            RemapKind::InverseSigmoid => (1.0 / (1.0 + (-lambda).exp())).clamp(lo, 1.0 - lo),
        }
    }

    /// Scale putting the remapped condition range on roughly `[0, 1000]`
    /// before the sinusoidal embedding.
    pub fn embedding_scale(self, steps: usize) -> f64 {
        match self {
            RemapKind::InverseT => 1000.0 / steps as f64,
            RemapKind::InverseSigmoid => 1000.0 / (2.0 * ((steps as f64) - 1.0).ln().max(1.0)),
        }
    }

    /// Range `lambda` is drawn from under uniform-lambda sampling.
    pub fn lambda_range(self, cap: f64) -> (f64, f64) {
        match self {
            RemapKind::InverseT => (0.0, cap),
            RemapKind::InverseSigmoid => (-cap, cap),
        }
    }
}

/// What the network is told about the time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionMap {
    #[default]
    Identity,
    Shared(PartitionSchedule),
    Remap { remap: RemapKind },
}

impl ConditionMap {
    pub fn remap(&self) -> Option<RemapKind> {
        match self {
            ConditionMap::Remap { remap } => Some(*remap),
            _ => None,
        }
    }

    pub fn embedding_scale(&self, steps: usize) -> f64 {
        match self {
            ConditionMap::Remap { remap } => remap.embedding_scale(steps),
            _ => 1000.0,
        }
    }
}

/// A condition map bound to a grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConditionMap {
    map: ConditionMap,
    steps: usize,
    grid: Option<GridPartition>,
}

impl BoundConditionMap {
    pub fn new(map: &ConditionMap, steps: usize) -> Result<Self> {
        let grid = match map {
            ConditionMap::Shared(p) => Some(p.on_grid(steps)?),
            _ => None,
        };
        Ok(Self {
            map: map.clone(),
            steps,
            grid,
        })
    }

    pub fn condition(&self, t: f64) -> f64 {
        match (&self.map, &self.grid) {
            (ConditionMap::Shared(_), Some(g)) => g.condition(t),
            (ConditionMap::Remap { remap }, _) => remap.forward(t, self.steps),
            _ => t,
        }
    }

    pub fn map(&self) -> &ConditionMap {
        &self.map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    /// `t = k/T` with `k` uniform on `1..=T`.
    #[default]
    UniformT,
    /// `lambda` uniform on `[0, cap]` (1/t) or `[-cap, cap]` (logit), mapped
    /// back to the nearest grid time.
    UniformLambda { cap: f64 },
}

/// How `t'` is chosen for the time-difference penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyOffset {
    /// `t' = t + dt` (or `t - dt` near 1).
    #[default]
    Fixed,
    /// `|t' - t|` uniform on `(0, dt]`, direction random.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub condition_map: ConditionMap,
    pub time_sampling: TimeSampling,
    pub reg_weight: f64,
    pub reg_dt: f64,
    pub reg_offset: PenaltyOffset,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::EpsPrediction,
            condition_map: ConditionMap::Identity,
            time_sampling: TimeSampling::UniformT,
            reg_weight: 0.0,
            reg_dt: 1e-3,
            reg_offset: PenaltyOffset::Fixed,
            lr: 1e-3,
            batch_size: 256,
            steps: 20_000,
            seed: 0,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let TimeSampling::UniformLambda { cap } = self.time_sampling {
            if self.condition_map.remap().is_none() {
                return Err(Error::InvalidSpec("uniform-lambda time sampling needs a remap condition map".into()));
            }
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::InvalidSpec(format!("lambda cap must be positive (got {cap})")));
            }
        }
        if !(self.reg_weight >= 0.0) || !(self.reg_dt > 0.0) {
            return Err(Error::InvalidSpec("reg_weight must be >= 0 and reg_dt > 0".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidSpec("lr must be > 0 and batch_size >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidSpec(format!("ema_decay must lie in [0, 1) (got {})", self.ema_decay)));
        }
        Ok(())
    }
}

/// A training batch together with the draws it was built from.
#[derive(Debug, Clone)]
pub struct DrawnBatch {
    pub batch: Batch,
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
    pub taus: Vec<f64>,
}

/// Loss above `DIVERGENCE_FACTOR` times the first loss for
/// `DIVERGENCE_PATIENCE` consecutive steps aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 1000;

#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) data: GaussianMixture,
    pub(crate) schedule: ScheduleSpec,
    pub(crate) config: TrainConfig,
    pub(crate) mlp: Mlp,
    pub(crate) ema: Vec<f64>,
    pub(crate) adam: Adam,
    pub(crate) rng: StreamRng,
    pub(crate) step: usize,
    pub(crate) losses: Vec<f64>,
    pub(crate) initial_loss: Option<f64>,
    pub(crate) over_count: usize,
    cmap: BoundConditionMap,
}

impl Trainer {
    /// Fresh parameters. The embedding scale of `mlp_spec` is replaced by
    /// the one matching the condition map.
    pub fn new(data: GaussianMixture, schedule: ScheduleSpec, mut mlp_spec: MlpSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if mlp_spec.data_dim != data.dim() {
            return Err(Error::Dimension {
                expected: data.dim(),
                got: mlp_spec.data_dim,
            });
        }
        mlp_spec.condition_scale = config.condition_map.embedding_scale(schedule.steps);
        let mut rng = stream(config.seed, 0);
        let mlp = Mlp::init(mlp_spec, &mut rng)?;
        let n = mlp.params().len();
        Self::assemble(data, schedule, config.clone(), mlp.clone(), mlp.params().to_vec(), Adam::new(config.lr, n), rng)
    }

    pub(crate) fn assemble(
        data: GaussianMixture,
        schedule: ScheduleSpec,
        config: TrainConfig,
        mlp: Mlp,
        ema: Vec<f64>,
        adam: Adam,
        rng: StreamRng,
    ) -> Result<Self> {
        let cmap = BoundConditionMap::new(&config.condition_map, schedule.steps)?;
        Ok(Self {
            data,
            schedule,
            config,
            mlp,
            ema,
            adam,
            rng,
            step: 0,
            losses: Vec::new(),
            initial_loss: None,
            over_count: 0,
            cmap,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }

    pub fn data(&self) -> &GaussianMixture {
        &self.data
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn ema_params(&self) -> &[f64] {
        &self.ema
    }

    pub fn condition_map(&self) -> &BoundConditionMap {
        &self.cmap
    }

    /// Draws a training time.
    pub fn sample_time(&mut self) -> f64 {
        let steps = self.schedule.steps;
        match self.config.time_sampling {
            TimeSampling::UniformT => self.rng.random_range(1..=steps) as f64 / steps as f64,
            TimeSampling::UniformLambda { cap } => {
                let remap = self.config.condition_map.remap().expect("validated");
                let (lo, hi) = remap.lambda_range(cap);
                let lambda = lo + (hi - lo) * self.rng.random::<f64>();
                let t = remap.inverse(lambda, steps);
                let k = (t * steps as f64).round().clamp(1.0, steps as f64);
                k / steps as f64
            }
        }
    }

    /// Builds the next batch: `x0 ~ data`, `t`, `eps ~ N(0, I)`,
    /// `x_t = alpha x0 + sigma eps`, condition and regression target.
    pub fn draw_batch(&mut self) -> Result<DrawnBatch> {
        let b = self.config.batch_size;
        let d = self.data.dim();
        let x0 = self.data.sample(b, &mut self.rng)?;
        let taus: Vec<f64> = (0..b).map(|_| self.sample_time()).collect();
        let mut eps = Array2::zeros((b, d));
        fill_normal(&mut self.rng, eps.as_slice_mut().expect("standard layout"));
        let mut xs = Array2::zeros((b, d));
        let mut targets = Array2::zeros((b, d));
        for i in 0..b {
            let (a, s) = self.schedule.alpha_sigma(taus[i])?;
            for j in 0..d {
                xs[[i, j]] = a * x0[[i, j]] + s * eps[[i, j]];
                targets[[i, j]] = match self.config.objective {
                    Objective::EpsPrediction => eps[[i, j]],
                    Objective::VPrediction => a * eps[[i, j]] - s * x0[[i, j]],
                };
            }
        }
        let conditions: Vec<f64> = taus.iter().map(|&t| self.cmap.condition(t)).collect();
        let penalty = if self.config.reg_weight > 0.0 {
            let mut cp = Vec::with_capacity(b);
            let mut dts = Vec::with_capacity(b);
            for &t in &taus {
                let h = match self.config.reg_offset {
                    PenaltyOffset::Fixed => self.config.reg_dt,
                    PenaltyOffset::Random => self.config.reg_dt * (1.0 - self.rng.random::<f64>()),
                };
                let up = match self.config.reg_offset {
                    PenaltyOffset::Fixed => t + h <= 1.0,
                    PenaltyOffset::Random => self.rng.random::<bool>() && t + h <= 1.0 || t - h < 0.0,
                };
                let tp = if up { t + h } else { t - h };
                cp.push(self.cmap.condition(tp));
                dts.push(h);
            }
            Some(PenaltyTerm {
                weight: self.config.reg_weight,
                conditions_prime: cp,
                dt: dts,
            })
        } else {
            None
        };
        Ok(DrawnBatch {
            batch: Batch {
                xs,
                conditions,
                targets,
                penalty,
            },
            x0,
            eps,
            taus,
        })
    }

    /// One optimiser step.
    pub fn step(&mut self) -> Result<LossParts> {
        let drawn = self.draw_batch()?;
        let (loss, grads) = loss_and_grad(&self.mlp, &drawn.batch)?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("training loss {}", loss.total),
            });
        }
        self.adam.update(self.mlp.params_mut(), &grads);
        ema_update(&mut self.ema, self.mlp.params(), self.config.ema_decay);
        self.step += 1;
        self.losses.push(loss.total);
        let initial = *self.initial_loss.get_or_insert(loss.total);
        if loss.total > DIVERGENCE_FACTOR * initial {
            self.over_count += 1;
            if self.over_count >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: loss.total,
                    initial,
                });
            }
        } else {
            self.over_count = 0;
        }
        Ok(loss)
    }

    /// Changes the step budget used by [`Trainer::run`].
    pub fn set_total_steps(&mut self, steps: usize) {
        self.config.steps = steps;
    }

    /// Steps until `config.steps` have been taken in total.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.steps)
    }

    pub fn run_until(&mut self, total: usize) -> Result<()> {
        while self.step < total {
            self.step()?;
            if self.step % 1000 == 0 {
                log::debug!("step {} loss {:.5}", self.step, self.losses[self.step - 1]);
            }
        }
        Ok(())
    }

    /// Predictor wrapping the EMA weights.
    pub fn predictor(&self) -> Result<TrainedPredictor> {
        let mlp = Mlp::from_params(self.mlp.spec().clone(), self.ema.clone())?;
        TrainedPredictor::new(mlp, &self.config, self.schedule.steps)
    }

    /// Predictor wrapping the raw (non-averaged) weights.
    pub fn raw_predictor(&self) -> Result<TrainedPredictor> {
        TrainedPredictor::new(self.mlp.clone(), &self.config, self.schedule.steps)
    }
}

/// Trains from scratch and returns the EMA predictor and per-step losses.
pub fn train(
    data: &GaussianMixture,
    schedule: &ScheduleSpec,
    mlp_spec: &MlpSpec,
    config: &TrainConfig,
) -> Result<(TrainedPredictor, Vec<f64>)> {
    let mut t = Trainer::new(data.clone(), *schedule, mlp_spec.clone(), config.clone())?;
    t.run()?;
    Ok((t.predictor()?, t.losses))
}

/// A trained network behind the predictor interface; applies its own
/// condition map to the requested time.
#[derive(Debug, Clone)]
pub struct TrainedPredictor {
    mlp: Mlp,
    cmap: BoundConditionMap,
    objective: Objective,
}

impl TrainedPredictor {
    pub fn new(mlp: Mlp, config: &TrainConfig, steps: usize) -> Result<Self> {
        Ok(Self {
            mlp,
            cmap: BoundConditionMap::new(&config.condition_map, steps)?,
            objective: config.objective,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn condition(&self, t: f64) -> f64 {
        self.cmap.condition(t)
    }

    pub fn condition_map(&self) -> &ConditionMap {
        self.cmap.map()
    }
}

impl Predictor for TrainedPredictor {
    fn kind(&self) -> PredictorKind {
        match self.cmap.map() {
            ConditionMap::Remap { .. } => PredictorKind::RemappedMlp,
            _ => PredictorKind::TrainedMlp,
        }
    }
    fn parameterization(&self) -> Parameterization {
        match self.objective {
            Objective::EpsPrediction => Parameterization::Eps,
            Objective::VPrediction => Parameterization::V,
        }
    }
    fn dim(&self) -> usize {
        self.mlp.spec().data_dim
    }
    fn predict_batch(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        check_dim(&xs, self.dim())?;
        let c = vec![self.cmap.condition(t); xs.nrows()];
        self.mlp.forward(xs, &c)
    }
}

/// Means and standard errors of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<(f64, f64)> {
    values
        .chunks_exact(window.max(1))
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let var = if c.len() > 1 {
                c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (m, (var / n).sqrt())
        })
        .collect()
}

/// First window whose mean exceeds the previous one by more than `z`
/// standard errors of the difference; `None` when the windowed loss never
/// rises significantly.
pub fn first_significant_rise(values: &[f64], window: usize, z: f64) -> Option<usize> {
    let w = window_means(values, window);
    w.windows(2).position(|p| {
        let se = (p[0].1.powi(2) + p[1].1.powi(2)).sqrt();
        p[1].0 > p[0].0 + z * se
    })
    .map(|i| i + 1)
}
