//! Run configuration: one TOML file per run, with dotted-key overrides.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `--set key=value` overrides, then dedicated flags such as `--seed`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use lipdiff::lipschitz::ProbeMode;
use lipdiff::mixture::GaussianMixture;
use lipdiff::mlp::MlpSpec;
use lipdiff::sampler::{SamplerConfig, SamplerKind};
use lipdiff::schedule::{ScheduleKind, ScheduleSpec};
use lipdiff::sharing::PartitionSchedule;
use lipdiff::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    StandardNormal {
        #[serde(default = "two")]
        dim: usize,
    },
    Ring {
        #[serde(default = "eight")]
        components: usize,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default = "ring_std")]
        std: f64,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// Full covariance matrices, one row per inner vector.
        covariances: Vec<Vec<Vec<f64>>>,
    },
}

fn two() -> usize {
    2
}
fn eight() -> usize {
    8
}
fn one() -> f64 {
    1.0
}
fn ring_std() -> f64 {
    0.05
}

impl DataSpec {
    pub fn build(&self) -> Result<GaussianMixture> {
        Ok(match self {
            DataSpec::StandardNormal { dim } => {
                if *dim == 0 {
                    bail!("data.dim must be >= 1");
                }
                GaussianMixture::standard_normal(*dim)
            }
            DataSpec::Ring {
                components,
                radius,
                std,
            } => GaussianMixture::ring(*components, *radius, *std)?,
            DataSpec::Mixture {
                weights,
                means,
                covariances,
            } => {
                let means = means.iter().map(|m| Array1::from(m.clone())).collect();
                let covs = covariances
                    .iter()
                    .map(|c| {
                        let d = c.len();
                        if c.iter().any(|r| r.len() != d) {
                            bail!("covariance matrices must be square");
                        }
                        Ok(Array2::from_shape_vec((d, d), c.concat())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                GaussianMixture::new(weights.clone(), means, covs)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub t_tilde: f64,
    pub n: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { t_tilde: 0.1, n: 5 }
    }
}

impl PartitionConfig {
    pub fn build(&self) -> Result<PartitionSchedule> {
        Ok(PartitionSchedule::new(self.t_tilde, self.n)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorChoice {
    AnalyticEps,
    AnalyticV,
    SharedAnalytic,
    /// Network loaded from `checkpoint`.
    Trained,
}

impl PredictorChoice {
    pub fn name(self) -> &'static str {
        match self {
            PredictorChoice::AnalyticEps => "analytic_eps",
            PredictorChoice::AnalyticV => "analytic_v",
            PredictorChoice::SharedAnalytic => "shared_analytic",
            PredictorChoice::Trained => "trained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleReportConfig {
    /// Schedules to tabulate; empty means the configured `[schedule]` only.
    pub kinds: Vec<ScheduleKind>,
    pub points: usize,
}

impl Default for ScheduleReportConfig {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            points: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LipschitzConfig {
    pub predictors: Vec<PredictorChoice>,
    pub n_samples: usize,
    pub dt: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            predictors: vec![PredictorChoice::AnalyticEps, PredictorChoice::SharedAnalytic],
            n_samples: 10_000,
            dt: 1e-6,
            t_min: 1e-5,
            t_max: 0.999,
            points: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    /// Partition sizes checked for dominance.
    pub n_values: Vec<usize>,
    /// Partition sizes for the convergence-rate fit; empty skips the fit.
    pub sweep: Vec<usize>,
    /// Data points `x` at which the bound is checked.
    pub n_points: usize,
    /// Grid points per sub-interval.
    pub resolution: usize,
    /// Least acceptable fitted rate.
    pub min_slope: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            n_values: vec![2, 5, 10, 50],
            sweep: vec![2, 4, 8, 16, 32, 64, 128, 256, 512],
            n_points: 4,
            resolution: 16,
            min_slope: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub predictor: PredictorChoice,
    pub n_samples: usize,
    pub projections: usize,
    /// Feed the sampler's predictor shared conditions below `t_tilde`.
    pub use_partition: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorChoice::AnalyticEps,
            n_samples: 10_000,
            projections: 128,
            use_partition: false,
        }
    }
}

/// Post-training evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    pub projections: usize,
    pub lipschitz_points: usize,
    pub lipschitz_samples: usize,
    pub lipschitz_dt: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::new(SamplerKind::Ddim, 50),
            n_samples: 2000,
            projections: 64,
            lipschitz_points: 24,
            lipschitz_samples: 2000,
            lipschitz_dt: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub predictors: Vec<PredictorChoice>,
    pub t: f64,
    pub scales: Vec<f64>,
    pub n_samples: usize,
    pub mode: ProbeMode,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            predictors: vec![PredictorChoice::AnalyticEps, PredictorChoice::SharedAnalytic],
            t: 0.05,
            scales: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
            n_samples: 4096,
            mode: ProbeMode::OneStep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Etsdm,
    DdpmR,
    ModifiedNs,
    RemapUniformT,
    RemapUniformLambda,
    VPrediction,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Etsdm => "etsdm",
            Method::DdpmR => "ddpm_r",
            Method::ModifiedNs => "modified_ns",
            Method::RemapUniformT => "remap_uniform_t",
            Method::RemapUniformLambda => "remap_uniform_lambda",
            Method::VPrediction => "v_prediction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    /// Partition sizes for the ablation grid; empty skips the grid.
    pub n_values: Vec<usize>,
    pub t_tilde_values: Vec<f64>,
    pub reg_weight: f64,
    pub lambda_cap: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::Baseline,
                Method::Etsdm,
                Method::DdpmR,
                Method::ModifiedNs,
                Method::RemapUniformT,
                Method::RemapUniformLambda,
            ],
            n_values: vec![2, 5, 10, 20, 50, 100],
            t_tilde_values: vec![0.05, 0.1, 0.2],
            reg_weight: 0.01,
            lambda_cap: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; copied into every seeded sub-section.
    pub seed: u64,
    pub data: Option<DataSpec>,
    pub schedule: ScheduleSpec,
    pub partition: PartitionConfig,
    /// Trained network used wherever a `trained` predictor is requested.
    pub checkpoint: Option<PathBuf>,
    pub schedule_report: ScheduleReportConfig,
    pub lipschitz: LipschitzConfig,
    pub bound: BoundConfig,
    pub sample: SampleConfig,
    pub sampler: SamplerConfig,
    pub mlp: MlpSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub perturb: PerturbConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            schedule: ScheduleSpec::linear(),
            partition: PartitionConfig::default(),
            checkpoint: None,
            schedule_report: ScheduleReportConfig::default(),
            lipschitz: LipschitzConfig::default(),
            bound: BoundConfig::default(),
            sample: SampleConfig::default(),
            sampler: SamplerConfig::default(),
            mlp: MlpSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            perturb: PerturbConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn data(&self) -> Result<GaussianMixture> {
        match &self.data {
            Some(d) => d.build().context("building [data]"),
            None => bail!("this subcommand needs a [data] section (kind = \"standard_normal\" | \"ring\" | \"mixture\")"),
        }
    }

    /// Copies the root seed into the seeded sub-sections.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.eval.sampler.seed = self.seed;
    }
}

/// Reads the config file (if any), applies `key=value` overrides and
/// deserialises.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is parsed as a TOML value and falls back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.data = Some(DataSpec::Ring {
            components: 8,
            radius: 1.0,
            std: 0.05,
        });
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_nest_and_parse() {
        let cfg = load(
            None,
            &[
                "seed=7".into(),
                "train.steps=12".into(),
                "data.kind=ring".into(),
                "sampler.kind=ddim".into(),
                "partition.t_tilde=0.2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.sampler.kind, SamplerKind::Ddim);
        assert_eq!(cfg.partition.t_tilde, 0.2);
        assert!(matches!(cfg.data, Some(DataSpec::Ring { components: 8, .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["lipschitz.bogus=1".into()]).is_err());
        assert!(load(None, &["no_equals".into()]).is_err());
    }

    #[test]
    fn custom_mixture_builds() {
        let d = DataSpec::Mixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0], vec![1.0]],
            covariances: vec![vec![vec![0.1]], vec![vec![0.2]]],
        };
        assert_eq!(d.build().unwrap().n_components(), 2);
    }
}
