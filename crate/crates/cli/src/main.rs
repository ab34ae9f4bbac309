mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iwol_core::envs::make_env;
use iwol_core::harness::{evaluate, Degradation, DegradationSpec, EvalReport};
use iwol_core::trainer::{eval_seed, read_metrics, IterationMetrics};
use iwol_core::{train, Checkpoint, EnvKind, RunConfig};

#[derive(Parser)]
#[command(name = "iwol", version, about = "Train and evaluate communicating multi-agent policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with degraded messages.
    Eval(EvalArgs),
    /// Train once per value of one config key.
    Sweep(SweepArgs),
    /// Render PNG charts from evaluation reports or metrics streams.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.latent_dim=8` or
    /// `--set latent_dim=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir={}", toml::Value::String(out.display().to_string())));
        }
        config::load(&self.config, &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DegradeKind {
    None,
    Quantize,
    Corrupt,
    /// Normal, 8-bit, 2-bit, and corrupted, one report each.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    TrafficJunction,
    SimpleNavigation,
    MaterialTransport,
}

impl From<EnvArg> for EnvKind {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::TrafficJunction => EnvKind::TrafficJunction,
            EnvArg::SimpleNavigation => EnvKind::SimpleNavigation,
            EnvArg::MaterialTransport => EnvKind::MaterialTransport,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on a different environment than the checkpoint was trained on.
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    /// Number of episodes (defaults to the run's eval_episodes).
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_enum, default_value = "none")]
    degrade: DegradeKind,
    /// Bits per message element for `--degrade quantize`.
    #[arg(long)]
    bits: Option<u32>,
    /// Seed of the corruption noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the first evaluation episode (defaults to one derived from
    /// the run seed).
    #[arg(long)]
    episode_seed: Option<u64>,
    /// Where to write the report (JSON); `--degrade all` writes one file per
    /// setting next to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Config key to vary.
    #[arg(long)]
    key: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Comma-separated seeds (defaults to the config seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Evaluation report files; draws success-rate bars.
    #[arg(long, num_args = 1.., conflicts_with = "metrics")]
    reports: Vec<PathBuf>,
    /// Metrics streams; draws one curve per file.
    #[arg(long, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Metrics field to draw.
    #[arg(long, default_value = "mean_return")]
    field: String,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.load()?;
    println!("# resolved configuration\n{}", config.to_toml()?);
    let summary = train(&config)?;
    if let Some(last) = summary.metrics.last() {
        println!(
            "finished: {} iterations, {} env steps, last mean return {}",
            last.iteration,
            last.env_steps,
            last.mean_return.map_or("n/a".into(), |r| format!("{r:.3}"))
        );
    }
    if let Some(dir) = &config.out_dir {
        println!("run directory: {}", dir.display());
    }
    Ok(())
}

fn degradation_settings(args: &EvalArgs) -> Result<Vec<(String, DegradationSpec)>> {
    Ok(match args.degrade {
        DegradeKind::None => vec![("none".into(), DegradationSpec::none())],
        DegradeKind::Quantize => {
            let bits = args.bits.context("--degrade quantize needs --bits")?;
            vec![(format!("quantize{bits}"), DegradationSpec::quantize(bits))]
        }
        DegradeKind::Corrupt => vec![("corrupt".into(), DegradationSpec::corrupt(args.seed))],
        DegradeKind::All => vec![
            ("none".into(), DegradationSpec::none()),
            ("quantize8".into(), DegradationSpec::quantize(8)),
            ("quantize2".into(), DegradationSpec::quantize(2)),
            ("corrupt".into(), DegradationSpec::corrupt(args.seed)),
        ],
    })
}

fn report_path(base: &Option<PathBuf>, checkpoint: &Path, label: &str, many: bool) -> PathBuf {
    match base {
        Some(p) if !many => p.clone(),
        Some(p) => {
            let stem = p.file_stem().map_or("eval".into(), |s| s.to_string_lossy().into_owned());
            p.with_file_name(format!("{stem}_{label}.json"))
        }
        None => checkpoint.join(format!("eval_{label}.json")),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let model = ck.build_model()?;
    let mut run = ck.run.clone();
    if let Some(env) = args.env {
        run.env = env.into();
    }
    let episodes = args.episodes.unwrap_or(run.eval_episodes);
    let first_seed = args.episode_seed.unwrap_or_else(|| eval_seed(run.train.seed));
    let settings = degradation_settings(&args)?;
    let many = settings.len() > 1;
    for (label, spec) in settings {
        let mut env = make_env(&run)?;
        let report = evaluate(&model, &ck.store, env.as_mut(), episodes, &spec, first_seed)?;
        let path = report_path(&args.report, &args.checkpoint, &label, many);
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!(
            "{label}: success_rate {:.3} ({}/{}) mean_return {:.3} collision_rate {:.3} -> {}",
            report.success_rate,
            report.successes,
            report.episodes,
            report.mean_return,
            report.collision_rate,
            path.display()
        );
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepRow {
    key: String,
    value: String,
    seed: u64,
    run_dir: String,
    final_train_return: Option<f64>,
    eval_success_rate: f64,
    eval_mean_return: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base_table = config::read_table(&args.config.config)?;
    let base = args.config.load()?;
    let root = base.out_dir.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    let seeds = if args.seeds.is_empty() { vec![base.train.seed] } else { args.seeds.clone() };
    let mut rows = Vec::new();
    for value in &args.values {
        for &seed in &seeds {
            let mut table = base_table.clone();
            for o in &args.config.overrides {
                let (k, v) = config::split_assignment(o)?;
                config::apply_override(&mut table, k, config::parse_value(v))?;
            }
            let key = config::apply_override(&mut table, &args.key, config::parse_value(value))?;
            let dir = root.join(format!("{key}={value}")).join(format!("seed{seed}"));
            config::apply_override(&mut table, "train.seed", toml::Value::Integer(seed as i64))?;
            config::apply_override(&mut table, "out_dir", toml::Value::String(dir.display().to_string()))?;
            let run = config::materialize(table)?;
            println!("sweep {key}={value} seed {seed} -> {}", dir.display());
            let summary = train(&run)?;
            let model = summary.checkpoint.build_model()?;
            let mut env = make_env(&run)?;
            let report: EvalReport = evaluate(
                &model,
                &summary.checkpoint.store,
                env.as_mut(),
                run.eval_episodes,
                &DegradationSpec::none(),
                eval_seed(seed),
            )?;
            rows.push(SweepRow {
                key: key.clone(),
                value: value.clone(),
                seed,
                run_dir: dir.display().to_string(),
                final_train_return: summary.metrics.last().and_then(|m| m.mean_return),
                eval_success_rate: report.success_rate,
                eval_mean_return: report.mean_return,
            });
        }
    }
    std::fs::create_dir_all(&root)?;
    let summary_path = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("{:<28} {:>6} {:>14} {:>14}", "setting", "seed", "eval success", "eval return");
    for r in &rows {
        println!(
            "{:<28} {:>6} {:>14.3} {:>14.3}",
            format!("{}={}", r.key, r.value),
            r.seed,
            r.eval_success_rate,
            r.eval_mean_return
        );
    }
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    Ok(if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    })
}

fn metric_field(m: &IterationMetrics, field: &str) -> Result<f64> {
    let v = serde_json::to_value(m)?;
    match v.get(field) {
        Some(serde_json::Value::Null) => Ok(f64::NAN),
        Some(x) => x.as_f64().with_context(|| format!("field `{field}` is not numeric")),
        None => bail!("metrics have no field `{field}`"),
    }
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let img = if !args.reports.is_empty() {
        let mut reports = Vec::new();
        for p in &args.reports {
            reports.extend(read_reports(p)?);
        }
        for r in &reports {
            let label = match r.degradation.kind {
                Degradation::None => "normal".to_string(),
                Degradation::Quantize { n_bits } => format!("{n_bits}-bit"),
                Degradation::Corrupt => "corrupt".to_string(),
            };
            println!("{label:>8}: {:.1}%", 100.0 * r.success_rate);
        }
        plot::success_bars(&reports)?
    } else if !args.metrics.is_empty() {
        let mut series = Vec::new();
        for p in &args.metrics {
            let metrics = read_metrics(p).with_context(|| format!("cannot read {}", p.display()))?;
            series.push(metrics.iter().map(|m| metric_field(m, &args.field)).collect::<Result<Vec<_>>>()?);
        }
        plot::curve(&series)?
    } else {
        bail!("give --reports or --metrics");
    };
    plot::save(&img, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
