//! `lipdiff` command-line entry point.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use lipdiff::metrics::config_hash;
use lipdiff::sampler::SamplerKind;
use lipdiff::schedule::ScheduleKind;

use crate::commands::Run;
use crate::config::RunConfig;
use crate::output::{Manifest, Outputs};

#[derive(Parser, Debug)]
#[command(name = "lipdiff", version, about = "Time-Lipschitz experiments for diffusion predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Root seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Dotted-key override such as `train.steps=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Schedule curves and the dalpha/dtau-at-zero report.
    Schedule {
        #[command(flatten)]
        common: Common,
        /// Schedule to tabulate; repeatable.
        #[arg(long, value_parser = parse_kind)]
        kind: Vec<ScheduleKind>,
    },
    /// Lipschitz scan K(t, t + dt) for the configured predictors.
    Lipschitz {
        #[command(flatten)]
        common: Common,
    },
    /// Error-bound dominance and convergence rate of the shared predictor.
    Bound {
        #[command(flatten)]
        common: Common,
    },
    /// Sample with any sampler and score against exact data.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        nfe: Option<usize>,
    },
    /// Train the MLP predictor, then evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Rewrite the checkpoint every this many steps (0: at the end only).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Clean-data error under input perturbation.
    Perturb {
        #[command(flatten)]
        common: Common,
    },
    /// Method comparison and partition ablation; each cell trains and evaluates.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ScheduleKind, String> {
    s.parse().map_err(|e: lipdiff::Error| e.to_string())
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    s.parse().map_err(|e: lipdiff::Error| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Schedule { .. } => "schedule",
            Command::Lipschitz { .. } => "lipschitz",
            Command::Bound { .. } => "bound",
            Command::Sample { .. } => "sample",
            Command::Train { .. } => "train",
            Command::Perturb { .. } => "perturb",
            Command::Compare { .. } => "compare",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Schedule { common, .. }
            | Command::Lipschitz { common }
            | Command::Bound { common }
            | Command::Sample { common, .. }
            | Command::Train { common, .. }
            | Command::Perturb { common }
            | Command::Compare { common } => common,
        }
    }

    /// Dedicated flags, expressed as overrides applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            Command::Schedule { kind, .. } if !kind.is_empty() => {
                let names: Vec<String> = kind
                    .iter()
                    .map(|k| format!("\"{}\"", serde_json::to_value(k).unwrap().as_str().unwrap()))
                    .collect();
                v.push(format!("schedule_report.kinds=[{}]", names.join(",")));
            }
            Command::Sample { sampler, nfe, .. } => {
                if let Some(s) = sampler {
                    v.push(format!("sampler.kind={}", serde_json::to_string(s).unwrap()));
                }
                if let Some(n) = nfe {
                    v.push(format!("sampler.nfe={n}"));
                }
            }
            Command::Train { steps: Some(s), .. } => v.push(format!("train.steps={s}")),
            _ => {}
        }
        if let Some(seed) = self.common().seed {
            v.push(format!("seed={seed}"));
        }
        v
    }
}

fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut overrides = common.overrides.clone();
    overrides.extend(cmd.flag_overrides());
    let mut cfg = config::load(common.config.as_deref(), &overrides)?;
    cfg.propagate_seed();
    Ok(cfg)
}

fn dispatch(cmd: &Command, run: &mut Run) -> Result<()> {
    match cmd {
        Command::Schedule { .. } => commands::schedule(run),
        Command::Lipschitz { .. } => commands::lipschitz(run),
        Command::Bound { .. } => commands::bound(run),
        Command::Sample { .. } => commands::sample_cmd(run),
        Command::Train {
            resume,
            checkpoint_every,
            ..
        } => commands::train(run, resume.as_deref(), *checkpoint_every),
        Command::Perturb { .. } => commands::perturb(run),
        Command::Compare { .. } => commands::compare(run),
    }
}

/// Runs the subcommand; `Ok(false)` means outputs were written but a check failed.
fn execute(cmd: &Command) -> Result<bool> {
    let started = Instant::now();
    let cfg = resolve(cmd)?;
    let hash = config_hash(&cfg)?;
    let stamp = format!("lipdiff {} seed={} config_hash={}", cmd.name(), cfg.seed, hash);
    let mut out = Outputs::new(&cmd.common().out, stamp)?;
    let mut inputs: Vec<String> = cmd.common().config.iter().map(|p| p.display().to_string()).collect();

    let mut run = Run {
        cfg: &cfg,
        out: &mut out,
        checks: Vec::new(),
        inputs: Vec::new(),
    };
    let result = dispatch(cmd, &mut run).and_then(|()| {
        let checks = std::mem::take(&mut run.checks);
        inputs.append(&mut run.inputs);
        finish(cmd, &cfg, &hash, &mut out, inputs, &checks, started)?;
        Ok(checks)
    });
    match result {
        Ok(checks) => {
            for c in &checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn finish(
    cmd: &Command,
    cfg: &RunConfig,
    hash: &str,
    out: &mut Outputs,
    inputs: Vec<String>,
    checks: &[output::Check],
    started: Instant,
) -> Result<()> {
    out.text("config.toml", &toml::to_string(cfg)?)?;
    out.claim("manifest.json");
    let manifest = Manifest {
        subcommand: cmd.name(),
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: hash,
        config: cfg,
        inputs,
        outputs: out.names(),
        checks,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    out.json("manifest.json", &manifest)?;
    log::info!("wrote {}", Path::new(out.dir()).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
