//! Subcommand implementations. Each writes its files through [`Outputs`] and
//! returns the internal checks it ran.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::Serialize;

use lipdiff::lipschitz::{lipschitz_k, log_grid, perturbation_probe, singularity_scan, ExactMarginal, LipschitzEstimate};
use lipdiff::metrics::{lipschitz_report, sliced_wasserstein, MetricReport};
use lipdiff::mixture::GaussianMixture;
use lipdiff::predictor::{AnalyticEps, AnalyticV, Predictor};
use lipdiff::rng::stream;
use lipdiff::sampler::sample;
use lipdiff::schedule::{ScheduleKind, ScheduleSpec};
use lipdiff::sharing::{convergence_order, shared_error_bound, PartitionSchedule, SharedAnalytic};
use lipdiff::train::{
    first_significant_rise, window_means, ConditionMap, Objective, RemapKind, TimeSampling, TrainConfig, TrainedPredictor, Trainer,
};

use crate::config::{Method, PredictorChoice, RunConfig};
use crate::output::{num, Check, Outputs, Plot};

/// Sample streams for the reference data sets; far from the chain lanes.
const DATA_LANE: u64 = 1 << 40;
const FLOOR_LANE: u64 = (1 << 40) + 1;
const SWD_SEED_OFFSET: u64 = 0x5744;

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a mut Outputs,
    pub checks: Vec<Check>,
    pub inputs: Vec<String>,
}

impl Run<'_> {
    fn check(&mut self, c: Check) {
        if !c.passed {
            log::warn!("check failed: {} ({})", c.name, c.detail);
        }
        self.checks.push(c);
    }

    fn predictor(&mut self, choice: PredictorChoice, gm: &GaussianMixture) -> Result<Box<dyn Predictor>> {
        let spec = self.cfg.schedule;
        Ok(match choice {
            PredictorChoice::AnalyticEps => Box::new(AnalyticEps::new(gm.clone(), spec)),
            PredictorChoice::AnalyticV => Box::new(AnalyticV::new(gm.clone(), spec)),
            PredictorChoice::SharedAnalytic => {
                Box::new(SharedAnalytic::new(gm.clone(), spec, self.cfg.partition.build()?)?)
            }
            PredictorChoice::Trained => Box::new(self.trained()?),
        })
    }

    fn trained(&mut self) -> Result<TrainedPredictor> {
        let path = self
            .cfg
            .checkpoint
            .as_deref()
            .context("a `trained` predictor needs `checkpoint = \"PATH\"`")?;
        let trainer = Trainer::load(path).with_context(|| format!("loading {}", path.display()))?;
        if *trainer.schedule() != self.cfg.schedule {
            bail!("checkpoint {} was trained with a different [schedule]", path.display());
        }
        self.inputs.push(path.display().to_string());
        Ok(trainer.predictor()?)
    }
}

fn derivative_at_zero_expected(spec: &ScheduleSpec) -> Option<f64> {
    match spec.kind {
        ScheduleKind::Linear | ScheduleKind::Quadratic => Some(-spec.beta_min_bar / 2.0),
        ScheduleKind::Cosine => {
            let s = spec.cosine_offset;
            let h = std::f64::consts::FRAC_PI_2 / (1.0 + s);
            Some(-h * (h * s).tan())
        }
        _ => None,
    }
}

fn default_for(kind: ScheduleKind) -> ScheduleSpec {
    match kind {
        ScheduleKind::Linear => ScheduleSpec::linear(),
        ScheduleKind::Quadratic => ScheduleSpec::quadratic(),
        ScheduleKind::Cosine => ScheduleSpec::cosine(),
        ScheduleKind::CosineShift => ScheduleSpec::cosine_shift(),
        ScheduleKind::ZeroTerminalSnr => ScheduleSpec::zero_terminal_snr(),
    }
}

fn kind_name(kind: ScheduleKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub fn schedule(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let kinds = if cfg.schedule_report.kinds.is_empty() {
        vec![cfg.schedule.kind]
    } else {
        cfg.schedule_report.kinds.clone()
    };
    let points = cfg.schedule_report.points.max(2);
    let grid: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();

    let mut curve_rows = Vec::new();
    let mut report_rows = Vec::new();
    let mut plot = Plot {
        title: "alpha(tau)".into(),
        x_label: "tau".into(),
        y_label: "alpha".into(),
        ..Plot::default()
    };
    for kind in kinds {
        let base = if kind == cfg.schedule.kind {
            cfg.schedule
        } else {
            default_for(kind).with_steps(cfg.schedule.steps)
        };
        base.validate()?;
        let mut variants = vec![base];
        if !base.modified_ns {
            if let Ok(m) = base.apply_modified_ns() {
                variants.push(m);
            }
        }
        for spec in variants {
            let label = format!("{}{}", kind_name(kind), if spec.modified_ns { "+modified_ns" } else { "" });
            let table = spec.table(&grid)?;
            plot.series.push((label.clone(), table.iter().map(|r| (r.tau, r.alpha)).collect()));
            for r in &table {
                curve_rows.push(vec![
                    kind_name(kind),
                    spec.modified_ns.to_string(),
                    num(r.tau),
                    num(r.alpha),
                    num(r.sigma),
                    num(r.dalpha_dtau),
                    r.dsigma_dtau.map(num).unwrap_or_else(|| "inf".into()),
                    num(r.snr),
                ]);
            }
            let d0 = spec.dalpha_at_zero();
            let expected = derivative_at_zero_expected(&spec);
            if let Some(e) = expected {
                let tol = if spec.modified_ns { 1e-12 } else { 1e-10 };
                run.check(Check::new(
                    format!("dalpha_dtau_at_0[{label}]"),
                    (d0 - e).abs() <= tol,
                    format!("analytic {d0:e}, expected {e:e}, tol {tol:e}"),
                ));
            }
            report_rows.push(vec![
                kind_name(kind),
                spec.modified_ns.to_string(),
                num(d0),
                expected.map(num).unwrap_or_default(),
                spec.is_singular_at_zero().to_string(),
            ]);
        }
    }
    run.out.csv(
        "schedule.csv",
        &["schedule", "modified_ns", "tau", "alpha", "sigma", "dalpha_dtau", "dsigma_dtau", "snr"],
        &curve_rows,
    )?;
    run.out.csv(
        "derivative_at_zero.csv",
        &["schedule", "modified_ns", "dalpha_dtau_at_0", "expected", "dsigma_singular"],
        &report_rows,
    )?;
    run.out.svg("schedule.svg", &plot)
}

/// Checks `K = 0` wherever `t` and `t'` get the same condition.
fn zero_within_intervals(name: &str, est: &[LipschitzEstimate], same: impl Fn(f64, f64) -> bool) -> Option<Check> {
    let inside: Vec<&LipschitzEstimate> = est.iter().filter(|e| same(e.t, e.t_prime)).collect();
    if inside.is_empty() {
        return None;
    }
    let bad = inside.iter().filter(|e| e.k != 0.0).count();
    Some(Check::new(
        format!("zero_lipschitz_within_sub_intervals[{name}]"),
        bad == 0,
        format!("{} of {} in-interval pairs nonzero", bad, inside.len()),
    ))
}

fn same_interval(part: &PartitionSchedule) -> impl Fn(f64, f64) -> bool + '_ {
    move |a, b| matches!((part.interval_of(a), part.interval_of(b)), (Some(i), Some(j)) if i == j)
}

pub fn lipschitz(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let gm = cfg.data()?;
    let lc = &cfg.lipschitz;
    if lc.predictors.is_empty() {
        bail!("lipschitz.predictors is empty");
    }
    let part = cfg.partition.build()?;
    let grid = log_grid(lc.t_min, lc.t_max, lc.points)?;
    let sampler = ExactMarginal::new(gm.clone(), cfg.schedule);
    let mut curves = Vec::new();
    for &choice in &lc.predictors {
        let (est, check) = match choice {
            PredictorChoice::Trained => {
                let pred = run.trained()?;
                let est = singularity_scan(&pred, &grid, lc.dt, &sampler, lc.n_samples, cfg.seed)?;
                let check = trained_zero_check(choice.name(), &pred, &est);
                (est, check)
            }
            _ => {
                let pred = run.predictor(choice, &gm)?;
                let est = singularity_scan(&pred, &grid, lc.dt, &sampler, lc.n_samples, cfg.seed)?;
                let check = match choice {
                    PredictorChoice::SharedAnalytic => zero_within_intervals(choice.name(), &est, same_interval(&part)),
                    _ => None,
                };
                (est, check)
            }
        };
        if let Some(c) = check {
            run.check(c);
        }
        curves.push((choice.name(), est));
    }
    write_lipschitz(run.out, &curves, part.t_tilde(), "lipschitz")
}

fn write_lipschitz(out: &mut Outputs, curves: &[(&str, Vec<LipschitzEstimate>)], cutoff: f64, stem: &str) -> Result<()> {
    let mut rows = Vec::new();
    for (name, est) in curves {
        for e in est {
            rows.push(vec![name.to_string(), num(e.t), num(e.t_prime), num(e.k), num(e.stderr), e.samples.to_string()]);
        }
    }
    out.csv(&format!("{stem}.csv"), &["predictor", "t", "t_prime", "k", "stderr", "samples"], &rows)?;
    let refs: Vec<(&str, &[LipschitzEstimate])> = curves.iter().map(|(n, e)| (*n, e.as_slice())).collect();
    let report = lipschitz_report(&refs, cutoff)?;
    let summary: Vec<Vec<String>> = report
        .summaries
        .iter()
        .map(|s| vec![s.name.clone(), num(s.max), num(s.argmax), num(cutoff), num(s.auc)])
        .collect();
    out.csv(
        &format!("{stem}_summary.csv"),
        &["predictor", "max_k", "argmax_t", "cutoff", "auc_below_cutoff"],
        &summary,
    )?;
    out.svg(
        &format!("{stem}.svg"),
        &Plot {
            title: "K(t, t + dt)".into(),
            x_label: "t".into(),
            y_label: "K".into(),
            log_x: true,
            log_y: true,
            series: curves
                .iter()
                .map(|(n, e)| (n.to_string(), e.iter().map(|e| (e.t, e.k)).collect()))
                .collect(),
        },
    )
}

pub fn bound(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let gm = cfg.data()?;
    let bc = &cfg.bound;
    let spec = cfg.schedule;
    let t_tilde = cfg.partition.t_tilde;
    // validates t_tilde before any work
    cfg.partition.build()?;
    let xs = gm.sample(bc.n_points.max(1), &mut stream(cfg.seed, DATA_LANE))?;

    let mut rows = Vec::new();
    let mut violations = 0;
    let mut total = 0;
    for &n in &bc.n_values {
        let part = PartitionSchedule::new(t_tilde, n)?;
        for (i, x) in xs.outer_iter().enumerate() {
            let r = shared_error_bound(&gm, &spec, &part, x, bc.resolution)?;
            total += 1;
            violations += usize::from(!r.holds);
            rows.push(vec![
                n.to_string(),
                num(part.width()),
                i.to_string(),
                num(r.k_x),
                num(r.b_x),
                num(r.delta_sigma_max),
                num(r.bound),
                num(r.max_actual_error),
                num(r.argmax_t),
                r.holds.to_string(),
            ]);
        }
    }
    run.out.csv(
        "bound.csv",
        &["n", "dt", "point", "k_x", "b_x", "delta_sigma_max", "bound", "max_actual_error", "argmax_t", "holds"],
        &rows,
    )?;
    if total > 0 {
        run.check(Check::new("error_within_bound", violations == 0, format!("{violations} of {total} violated")));
    }

    if !bc.sweep.is_empty() {
        let rep = convergence_order(&gm, &spec, t_tilde, &bc.sweep, xs.view(), bc.resolution)?;
        let limit = (-2.0 * spec.dalpha_at_zero()).sqrt();
        let rows: Vec<Vec<String>> = rep
            .points
            .iter()
            .map(|p| {
                vec![
                    p.n.to_string(),
                    num(p.dt),
                    num(p.max_error),
                    num(p.delta_sigma_max),
                    num(p.delta_sigma_max / p.dt.sqrt()),
                ]
            })
            .collect();
        run.out.csv(
            "convergence.csv",
            &["n", "dt", "max_error", "delta_sigma_max", "delta_sigma_over_sqrt_dt"],
            &rows,
        )?;
        #[derive(Serialize)]
        struct Fit {
            slope: f64,
            intercept: f64,
            r_squared: f64,
            max_residual: f64,
            min_slope: f64,
            sqrt_dt_limit: f64,
        }
        run.out.json(
            "convergence_fit.json",
            &Fit {
                slope: rep.slope,
                intercept: rep.intercept,
                r_squared: rep.r_squared,
                max_residual: rep.max_residual,
                min_slope: bc.min_slope,
                sqrt_dt_limit: limit,
            },
        )?;
        run.check(Check::new(
            "convergence_slope",
            rep.slope >= bc.min_slope,
            format!("slope {:.4} (minimum {})", rep.slope, bc.min_slope),
        ));
        run.out.svg(
            "convergence.svg",
            &Plot {
                title: "max error vs sub-interval width".into(),
                x_label: "dt".into(),
                y_label: "max error".into(),
                log_x: true,
                log_y: true,
                series: vec![("max_error".into(), rep.points.iter().map(|p| (p.dt, p.max_error)).collect())],
            },
        )?;
    }
    Ok(())
}

struct SwdResult {
    generated: MetricReport,
    floor: MetricReport,
}

fn swd_vs_data(
    gm: &GaussianMixture,
    generated: &Array2<f64>,
    projections: usize,
    seed: u64,
) -> Result<SwdResult> {
    let n = generated.nrows();
    let a = gm.sample(n, &mut stream(seed, DATA_LANE))?;
    let b = gm.sample(n, &mut stream(seed, FLOOR_LANE))?;
    let pseed = seed.wrapping_add(SWD_SEED_OFFSET);
    Ok(SwdResult {
        generated: sliced_wasserstein(generated.view(), a.view(), projections, pseed)?,
        floor: sliced_wasserstein(b.view(), a.view(), projections, pseed)?,
    })
}

fn swd_rows(label: &str, r: &SwdResult) -> Vec<Vec<String>> {
    vec![
        vec![
            label.into(),
            "generated_vs_data".into(),
            num(r.generated.value),
            num(r.generated.stderr),
            r.generated.sample_sizes[0].to_string(),
        ],
        vec![
            label.into(),
            "data_vs_data".into(),
            num(r.floor.value),
            num(r.floor.stderr),
            r.floor.sample_sizes[0].to_string(),
        ],
    ]
}

const SWD_HEADER: [&str; 5] = ["predictor", "comparison", "swd", "stderr", "n"];

pub fn sample_cmd(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let gm = cfg.data()?;
    let sc = &cfg.sample;
    let mut sampler = cfg.sampler.clone();
    if sc.use_partition {
        sampler.partition = Some(cfg.partition.build()?);
    }
    let pred = run.predictor(sc.predictor, &gm)?;
    let rec = sample(&pred, &cfg.schedule, &sampler, sc.n_samples, gm.dim())?;
    let header: Vec<String> = (0..gm.dim()).map(|j| format!("x{j}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = rec.samples.outer_iter().map(|r| r.iter().map(|&v| num(v)).collect()).collect();
    run.out.csv("samples.csv", &header_refs, &rows)?;
    let swd = swd_vs_data(&gm, &rec.samples, sc.projections, cfg.seed)?;
    run.out.csv("swd.csv", &SWD_HEADER, &swd_rows(sc.predictor.name(), &swd))?;
    #[derive(Serialize)]
    struct Summary {
        nfe_used: usize,
        swd: f64,
        noise_floor: f64,
        ratio_to_floor: f64,
    }
    run.out.json(
        "sample_summary.json",
        &Summary {
            nfe_used: rec.nfe_used,
            swd: swd.generated.value,
            noise_floor: swd.floor.value,
            ratio_to_floor: swd.generated.value / swd.floor.value,
        },
    )
}

/// SWD and Lipschitz curve of a trained predictor.
struct Evaluation {
    swd: SwdResult,
    curve: Vec<LipschitzEstimate>,
    k_floor: f64,
    k_half: f64,
    auc: f64,
}

fn evaluate(pred: &TrainedPredictor, gm: &GaussianMixture, spec: &ScheduleSpec, cfg: &RunConfig) -> Result<Evaluation> {
    let ec = &cfg.eval;
    let rec = sample(pred, spec, &ec.sampler, ec.n_samples, gm.dim())?;
    let swd = swd_vs_data(gm, &rec.samples, ec.projections, cfg.seed)?;
    let floor = 1.0 / spec.steps as f64;
    let grid = log_grid(floor, 0.999 - ec.lipschitz_dt, ec.lipschitz_points.max(2))?;
    let marginal = ExactMarginal::new(gm.clone(), *spec);
    let curve = singularity_scan(pred, &grid, ec.lipschitz_dt, &marginal, ec.lipschitz_samples, cfg.seed)?;
    let k_half = lipschitz_k(pred, 0.5, 0.5 + ec.lipschitz_dt, &marginal, ec.lipschitz_samples, cfg.seed)?.k;
    let refs = [("trained", curve.as_slice())];
    let auc = lipschitz_report(&refs, cfg.partition.t_tilde)?.summaries[0].auc;
    Ok(Evaluation {
        k_floor: curve[0].k,
        swd,
        curve,
        k_half,
        auc,
    })
}

/// In-interval zero check for a network trained on shared conditions.
fn trained_zero_check(name: &str, pred: &TrainedPredictor, est: &[LipschitzEstimate]) -> Option<Check> {
    match pred.condition_map() {
        ConditionMap::Shared(part) => zero_within_intervals(name, est, |a, b| {
            a < part.t_tilde() && b < part.t_tilde() && pred.condition(a) == pred.condition(b)
        }),
        _ => None,
    }
}

pub fn train(run: &mut Run, resume: Option<&Path>, checkpoint_every: usize) -> Result<()> {
    let cfg = run.cfg;
    let mut trainer = match resume {
        Some(p) => {
            run.inputs.push(p.display().to_string());
            let mut t = Trainer::load(p).with_context(|| format!("loading {}", p.display()))?;
            let same = TrainConfig {
                steps: cfg.train.steps,
                ..t.config().clone()
            } == cfg.train;
            if !same {
                log::warn!("resuming with the checkpoint's training config; only train.steps is taken from this run");
            }
            t.set_total_steps(cfg.train.steps);
            t
        }
        None => Trainer::new(cfg.data()?, cfg.schedule, cfg.mlp.clone(), cfg.train.clone())?,
    };
    let ckpt = run.out.claim("checkpoint.bin");
    let total = cfg.train.steps;
    while trainer.step_count() < total {
        let next = match checkpoint_every {
            0 => total,
            k => (trainer.step_count() / k + 1) * k,
        }
        .min(total);
        trainer.run_until(next)?;
        trainer.save(&ckpt)?;
        log::info!("step {}/{}", trainer.step_count(), total);
    }
    trainer.save(&ckpt)?;

    let losses = trainer.losses();
    let rows: Vec<Vec<String>> = losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), num(*l)]).collect();
    run.out.csv("loss.csv", &["step", "loss"], &rows)?;
    let window = (losses.len() / 20).clamp(1, 500);
    run.out.svg(
        "loss.svg",
        &Plot {
            title: format!("training loss ({window}-step means)"),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_y: true,
            series: vec![(
                "loss".into(),
                window_means(losses, window)
                    .iter()
                    .enumerate()
                    .map(|(i, (m, _))| (((i + 1) * window) as f64, *m))
                    .collect(),
            )],
            ..Plot::default()
        },
    )?;

    let gm = trainer.data().clone();
    let spec = *trainer.schedule();
    let pred = trainer.predictor()?;
    let ev = evaluate(&pred, &gm, &spec, cfg)?;
    if let Some(c) = trained_zero_check("trained", &pred, &ev.curve) {
        run.check(c);
    }
    write_lipschitz(run.out, &[("trained", ev.curve.clone())], cfg.partition.t_tilde, "lipschitz")?;
    run.out.csv("swd.csv", &SWD_HEADER, &swd_rows("trained", &ev.swd))?;
    #[derive(Serialize)]
    struct Summary {
        steps: usize,
        final_window_loss: f64,
        first_significant_rise_window: Option<usize>,
        swd: f64,
        noise_floor: f64,
        k_at_floor: f64,
        k_at_half: f64,
        auc_below_t_tilde: f64,
    }
    run.out.json(
        "train_summary.json",
        &Summary {
            steps: trainer.step_count(),
            final_window_loss: window_means(losses, window).last().map_or(f64::NAN, |w| w.0),
            first_significant_rise_window: first_significant_rise(losses, window, 4.0),
            swd: ev.swd.generated.value,
            noise_floor: ev.swd.floor.value,
            k_at_floor: ev.k_floor,
            k_at_half: ev.k_half,
            auc_below_t_tilde: ev.auc,
        },
    )
}

pub fn perturb(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let gm = cfg.data()?;
    let pc = &cfg.perturb;
    let marginal = ExactMarginal::new(gm.clone(), cfg.schedule);
    let mut rows = Vec::new();
    let mut plot = Plot {
        title: format!("clean-data error under input perturbation at t = {}", pc.t),
        x_label: "perturbation scale".into(),
        y_label: "mean error".into(),
        ..Plot::default()
    };
    for &choice in &pc.predictors {
        let pred = run.predictor(choice, &gm)?;
        let pts = perturbation_probe(&pred, &cfg.schedule, pc.t, &pc.scales, &marginal, pc.n_samples, cfg.seed, pc.mode)?;
        for p in &pts {
            rows.push(vec![choice.name().into(), num(p.scale), num(p.mean_error), num(p.stderr)]);
        }
        plot.series.push((choice.name().into(), pts.iter().map(|p| (p.scale, p.mean_error)).collect()));
    }
    run.out.csv("perturb.csv", &["predictor", "scale", "mean_error", "stderr"], &rows)?;
    run.out.svg("perturb.svg", &plot)
}

fn method_setup(m: Method, cfg: &RunConfig) -> Result<(ScheduleSpec, TrainConfig)> {
    let base = TrainConfig {
        objective: Objective::EpsPrediction,
        condition_map: ConditionMap::Identity,
        time_sampling: TimeSampling::UniformT,
        reg_weight: 0.0,
        ..cfg.train.clone()
    };
    let mut spec = cfg.schedule;
    let train = match m {
        Method::Baseline => base,
        Method::Etsdm => TrainConfig {
            condition_map: ConditionMap::Shared(cfg.partition.build()?),
            ..base
        },
        Method::DdpmR => TrainConfig {
            reg_weight: cfg.compare.reg_weight,
            ..base
        },
        Method::ModifiedNs => {
            spec = spec.apply_modified_ns()?;
            base
        }
        Method::RemapUniformT => TrainConfig {
            condition_map: ConditionMap::Remap {
                remap: RemapKind::InverseT,
            },
            ..base
        },
        Method::RemapUniformLambda => TrainConfig {
            condition_map: ConditionMap::Remap {
                remap: RemapKind::InverseT,
            },
            time_sampling: TimeSampling::UniformLambda {
                cap: cfg.compare.lambda_cap,
            },
            ..base
        },
        Method::VPrediction => TrainConfig {
            objective: Objective::VPrediction,
            ..base
        },
    };
    Ok((spec, train))
}

pub fn compare(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let gm = cfg.data()?;
    let cc = &cfg.compare;
    let mut cells: Vec<(String, Method, RunConfig)> = cc
        .methods
        .iter()
        .map(|&m| ("method".to_string(), m, cfg.clone()))
        .collect();
    for &n in &cc.n_values {
        for &tt in &cc.t_tilde_values {
            let mut c = cfg.clone();
            c.partition.n = n;
            c.partition.t_tilde = tt;
            cells.push(("ablation".into(), Method::Etsdm, c));
        }
    }
    if cells.is_empty() {
        bail!("compare has no methods and no ablation grid");
    }
    let mut rows = Vec::new();
    for (i, (study, method, c)) in cells.iter().enumerate() {
        let (spec, train) = method_setup(*method, c)?;
        log::info!("cell {}/{}: {} {} n={} t_tilde={}", i + 1, cells.len(), study, method.name(), c.partition.n, c.partition.t_tilde);
        let mut trainer = Trainer::new(gm.clone(), spec, c.mlp.clone(), train)?;
        trainer.run()?;
        let pred = trainer.predictor()?;
        let ev = evaluate(&pred, &gm, &spec, c)?;
        let losses = trainer.losses();
        let tail = losses.len().min(500).max(1);
        let final_loss = losses[losses.len().saturating_sub(tail)..].iter().sum::<f64>() / tail as f64;
        rows.push(vec![
            study.clone(),
            method.name().into(),
            c.partition.n.to_string(),
            num(c.partition.t_tilde),
            trainer.step_count().to_string(),
            num(final_loss),
            num(ev.swd.generated.value),
            num(ev.swd.generated.stderr),
            num(ev.swd.floor.value),
            num(ev.k_floor),
            num(ev.k_half),
            num(ev.auc),
        ]);
    }
    let header = [
        "study",
        "method",
        "n",
        "t_tilde",
        "steps",
        "final_loss",
        "swd",
        "swd_stderr",
        "noise_floor",
        "k_at_floor",
        "k_at_half",
        "auc_below_t_tilde",
    ];
    run.out.csv("results.csv", &header, &rows)?;
    Ok(())
}
