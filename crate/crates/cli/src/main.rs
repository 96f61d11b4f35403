use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use surgift_core::harness::theory::{run_balancedness, run_prop1, run_prop2, run_theorem1, FLOW_MAX_STEPS};
use surgift_core::harness::{
    build_world_cached, emit_report, run_sweep_cached, run_tta, write_csv, ExperimentConfig, Report, RunReport, Scenario,
    Strategy, SummaryRow,
};
use surgift_core::CheckpointMeta;

#[derive(Parser)]
#[command(name = "surgift", version, about = "Surgical fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Concurrent runs (defaults to the number of CPUs).
    #[arg(long)]
    workers: Option<usize>,
    /// Cache directory for pretrained source models.
    #[arg(long, env = "SURGIFT_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model for each seed and write its checkpoint.
    Pretrain(Common),
    /// Run a single strategy over the learning-rate grid.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Strategy label, e.g. `all`, `block1`, `last`, `auto_rgn`, `l1sp(0.01)`.
        #[arg(long)]
        strategy: String,
    },
    /// Run every strategy and seed of the config.
    Sweep(Common),
    /// Two-layer network scenarios; writes trajectory CSVs.
    Theory(Common),
    /// Test-time adaptation on a shifted stream.
    Tta(Common),
    /// Re-summarize an existing JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Config problems exit with 1, aborted runs with 2.
enum Failure {
    Config(anyhow::Error),
    Aborted(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<surgift_core::Error> for Failure {
    fn from(e: surgift_core::Error) -> Self {
        Failure::Config(e.into())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Aborted(n)) => {
            eprintln!("{n} run(s) aborted");
            ExitCode::from(2)
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(s) = common.seed {
        config.seeds = vec![s];
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(config)
}

fn workers(common: &Common) -> usize {
    common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Pretrain(c) => pretrain(&c),
        Command::Finetune { common, strategy } => {
            let mut config = load(&common)?;
            let s: Strategy = strategy.parse().context("--strategy")?;
            config.strategies = vec![s];
            config.validate()?;
            sweep(&common, &config)
        }
        Command::Sweep(c) => {
            let config = load(&c)?;
            sweep(&c, &config)
        }
        Command::Theory(c) => theory(&c),
        Command::Tta(c) => tta(&c),
        Command::Report { input, out } => {
            let report = Report::load(&input).with_context(|| format!("reading {}", input.display()))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("report.csv");
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&report.runs, f)?;
            print_summary(&Report::new(report.runs).summary);
            Ok(())
        }
    }
}

fn pretrain(c: &Common) -> std::result::Result<(), Failure> {
    let config = load(c)?;
    for &seed in &config.seeds {
        let world = build_world_cached(&config, seed, c.data_dir.as_deref())?;
        let path = c.out.join(format!("pretrained-seed{seed}.json"));
        world
            .pretrained
            .checkpoint(CheckpointMeta {
                seed,
                ..Default::default()
            })
            .save(&path)?;
        println!("seed {seed}: wrote {}", path.display());
    }
    Ok(())
}

fn sweep(c: &Common, config: &ExperimentConfig) -> std::result::Result<(), Failure> {
    let runs = run_sweep_cached(config, workers(c), c.data_dir.as_deref())?;
    emit_report(&runs, &c.out)?;
    write_traces(&runs, &c.out)?;
    print_summary(&Report::new(runs.clone()).summary);
    let aborted: Vec<&RunReport> = runs.iter().filter(|r| r.aborted.is_some()).collect();
    for r in &aborted {
        eprintln!("{} seed {}: {}", r.strategy, r.seed, r.aborted.as_deref().unwrap_or_default());
    }
    if aborted.is_empty() {
        Ok(())
    } else {
        Err(Failure::Aborted(aborted.len()))
    }
}

fn write_traces(runs: &[RunReport], out: &Path) -> Result<()> {
    for r in runs {
        if let Some(t) = &r.trace {
            let path = out.join(format!("trace-{}.csv", r.run_id));
            t.write_csv(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?)?;
        }
    }
    Ok(())
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<14} {:<16} {:>3} {:>10} {:>10} {:>10}", "scenario", "strategy", "n", "test", "stderr", "relative");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<14} {:<16} {:>3} {:>10.4} {:>10} {:>10}",
            r.scenario,
            r.strategy,
            r.n,
            r.test,
            opt(r.test_stderr),
            opt(r.relative)
        );
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn theory(c: &Common) -> std::result::Result<(), Failure> {
    let config = load(c)?;
    let mut failed = 0;
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let result: Result<serde_json::Value> = (|| match &config.scenario {
            Scenario::Theorem1(t1) => {
                let run = run_theorem1(t1, seed, FLOW_MAX_STEPS)?;
                for (mode, traj) in [("fl", &run.fl), ("ft", &run.ft)] {
                    let path = c.out.join(format!("theorem1-seed{seed}-{mode}.csv"));
                    traj.write_csv(&run.probes, fs::File::create(&path)?)?;
                }
                let mut bal_cfg = t1.clone();
                bal_cfg.heldout_n = 1;
                let bal = run_balancedness(&bal_cfg, seed, 1e-3, 10_000)?;
                println!(
                    "seed {seed}: fl held-out {:.3e}, ft min held-out {:.3e}, balancedness drift {:.3e}",
                    run.summary.fl_final_heldout, run.summary.ft_min_heldout, bal.drift
                );
                Ok(json!({ "seed": seed, "theorem1": run.summary, "balancedness": bal }))
            }
            Scenario::Prop1 { dims, trials } => {
                let s = run_prop1(*dims, *trials, seed)?;
                let worst = s.adapted_losses.iter().copied().fold(0.0, f64::max);
                println!(
                    "seed {seed}: worst adapted loss {worst:.3e}, negation best last-layer {:.6} vs mean(y^2) {:.6}",
                    s.negation_best_last_layer, s.negation_mean_square
                );
                Ok(json!({ "seed": seed, "prop1": s }))
            }
            Scenario::Prop2 { dims, scales, descent_steps } => {
                let s = run_prop2(*dims, scales, *descent_steps, seed)?;
                let best = s.negation_first_layer.iter().copied().fold(f64::INFINITY, f64::min);
                println!(
                    "seed {seed}: scaled losses {:?}, negation best first-layer {best:.6} vs mean(y^2) {:.6}",
                    s.scaled_losses, s.negation_mean_square
                );
                Ok(json!({ "seed": seed, "prop2": s }))
            }
            other => Err(anyhow::anyhow!("scenario `{}` is not a theory scenario", other.name())),
        })();
        match result {
            Ok(v) => results.push(v),
            Err(e) if !config.scenario.is_theory() => return Err(Failure::Config(e)),
            Err(e) => {
                eprintln!("seed {seed}: {e:#}");
                results.push(json!({ "seed": seed, "aborted": format!("{e:#}") }));
                failed += 1;
            }
        }
    }
    write_json(&c.out.join("theory.json"), &json!({ "scenario": config.scenario.name(), "results": results }))?;
    if failed > 0 {
        Err(Failure::Aborted(failed))
    } else {
        Ok(())
    }
}

fn tta(c: &Common) -> std::result::Result<(), Failure> {
    let config = load(c)?;
    if !matches!(config.scenario, Scenario::TtaStream(_)) {
        return Err(Failure::Config(anyhow::anyhow!("the tta command needs a `tta_stream` scenario")));
    }
    let mut failed = 0;
    let mut results = Vec::new();
    for &seed in &config.seeds {
        match run_tta(&config, seed) {
            Ok((summary, stream)) => {
                let path = c.out.join(format!("tta-seed{seed}.csv"));
                stream.write_csv(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?)?;
                println!(
                    "seed {seed}: accuracy {:.4} (no adaptation {:.4})",
                    summary.accuracy, summary.no_adaptation
                );
                results.push(serde_json::to_value(summary).map_err(anyhow::Error::from)?);
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                results.push(json!({ "seed": seed, "aborted": e.to_string() }));
                failed += 1;
            }
        }
    }
    write_json(&c.out.join("tta.json"), &json!({ "results": results }))?;
    if failed > 0 {
        Err(Failure::Aborted(failed))
    } else {
        Ok(())
    }
}
