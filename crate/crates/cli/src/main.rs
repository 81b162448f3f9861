//! `bdatp`: train, evaluate, ablate, sweep, gradient-check and export.
//!
//! Configuration is layered: defaults (or `--smoke`), then `--config FILE`,
//! then each `--set key=value`, then the dedicated flags. The resolved
//! configuration is written to the output directory before any work starts.
//! Failures print one `error kind=<kind> message=<json string>` line to
//! stderr and exit with status 2; a failing gradient check exits with 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use bdatp_core::bench::{run_experiment, run_lambda_sweep, AblationArm};
use bdatp_core::config::RunConfig;
use bdatp_core::diagnostics::{gradcheck_suite, COMPONENTS};
use bdatp_core::export::{replay_episode, scatter_text, trajectories_text, transition_matrix_of, transition_text};
use bdatp_core::metrics::summarize;
use bdatp_core::numerics::{Checkpoint, Precision, Scalar, ROUNDING_FLOOR};
use bdatp_core::policy::{evaluate, load_policy, train_run, EvalOutput, Setting, WorldBank};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "bdatp", version, about = "Desk-scale audio-visual navigation with binaural difference attention and action transition prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value config file (`key = value` per line, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Start from the small smoke-test configuration instead of the defaults.
    #[arg(long, global = true)]
    smoke: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Step environments one after another (bit-exact mode).
    #[arg(long, global = true, conflicts_with = "parallel")]
    serial: bool,
    /// Step environments on worker threads.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration; `--checkpoint` resumes from a checkpoint.
    Train {
        /// Stop after this many total updates instead of the step budget.
        #[arg(long)]
        updates: Option<u64>,
    },
    /// Greedy Heard/Unheard evaluation of `--checkpoint`.
    Eval {
        #[arg(long, value_enum, default_value_t = SettingArg::Both)]
        setting: SettingArg,
    },
    /// Four-arm ablation over seeds.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        /// Seeds (defaults to run.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Environment steps per run (defaults to run.budget_steps).
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Auxiliary-weight sweep with the concat audio encoder.
    SweepLambda {
        /// Weights (defaults to run.lambdas).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// 64-bit finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Plot-ready data files from a trained checkpoint.
    Export {
        #[arg(value_enum)]
        kind: ExportKind,
        #[arg(long, value_enum, default_value_t = SettingArg::Unheard)]
        setting: SettingArg,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SettingArg {
    Heard,
    Unheard,
    Both,
}

impl SettingArg {
    fn settings(self) -> Vec<Setting> {
        match self {
            SettingArg::Heard => vec![Setting::Heard],
            SettingArg::Unheard => vec![Setting::Unheard],
            SettingArg::Both => Setting::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExportKind {
    Trajectories,
    TransitionMatrix,
    BdaScatter,
}

impl ExportKind {
    fn file_stem(self) -> &'static str {
        match self {
            ExportKind::Trajectories => "trajectories",
            ExportKind::TransitionMatrix => "transition_matrix",
            ExportKind::BdaScatter => "bda_scatter",
        }
    }
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = if common.smoke { RunConfig::smoke() } else { RunConfig::default() };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if common.serial {
        cfg.parallel = false;
    }
    if common.parallel {
        cfg.parallel = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let path = out.join("config.txt");
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))?;
    println!("config {}", path.display());
    Ok(())
}

fn require_checkpoint(common: &Common) -> anyhow::Result<&Path> {
    match &common.checkpoint {
        Some(p) => Ok(p),
        None => bail!("this command needs --checkpoint PATH"),
    }
}

fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> anyhow::Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn evaluate_all<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    settings: &[Setting],
    scatter: bool,
) -> anyhow::Result<(Arc<WorldBank>, Vec<(Setting, EvalOutput)>)> {
    let ckpt = Checkpoint::<T>::load(ckpt)?;
    let (model, params) = load_policy(cfg, &ckpt)?;
    let world = Arc::new(WorldBank::build(cfg)?);
    let outs = settings
        .iter()
        .map(|&s| Ok((s, evaluate(&model, &params, &world, cfg, s, cfg.seed, scatter)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((world, outs))
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, common: &Common, updates: Option<u64>) -> anyhow::Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    echo_config(cfg, &out)?;
    let outcome = train_run::<T>(cfg, &out, common.checkpoint.as_deref(), updates)?;
    let last = outcome.stats.last();
    println!(
        "trained updates={} env_steps={} episodes={} last_total_loss={} checkpoint={}",
        outcome.updates,
        outcome.env_steps,
        outcome.training_episodes.len(),
        last.map_or("-".into(), |s| format!("{:.6}", s.total_loss)),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, common: &Common, setting: SettingArg) -> anyhow::Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    echo_config(cfg, &out)?;
    let (world, outs) = evaluate_all::<T>(cfg, require_checkpoint(common)?, &setting.settings(), false)?;
    let mut report = String::from("setting\tepisodes\tSR\tSPL\tSNA\tATP_acc\n");
    for (s, o) in &outs {
        let name = s.as_str();
        write_jsonl(&out.join(format!("records_{name}.jsonl")), &o.records)?;
        write_jsonl(&out.join(format!("headers_{name}.jsonl")), &o.headers)?;
        write_jsonl(&out.join(format!("trajectories_{name}.jsonl")), &o.trajectories)?;
        fs::write(out.join(format!("trajectories_{name}.tsv")), trajectories_text(o, &world))?;
        let m = summarize(&o.records)?;
        let atp = o.atp_accuracy().map_or("-".to_string(), |a| format!("{a:.4}"));
        report.push_str(&format!("{name}\t{}\t{:.4}\t{:.4}\t{:.4}\t{atp}\n", m.episodes, m.sr, m.spl, m.sna));
    }
    fs::write(out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_export<T: Scalar>(cfg: &RunConfig, common: &Common, kind: ExportKind, setting: SettingArg) -> anyhow::Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    echo_config(cfg, &out)?;
    let scatter = kind == ExportKind::BdaScatter;
    let (world, outs) = evaluate_all::<T>(cfg, require_checkpoint(common)?, &setting.settings(), scatter)?;
    for (s, o) in &outs {
        let text = match kind {
            ExportKind::Trajectories => {
                for h in &o.headers {
                    let steps: Vec<_> = o.trajectories.iter().filter(|t| t.episode == h.episode).collect();
                    let poses = replay_episode(cfg, &world, h, &steps.iter().map(|t| t.action).collect::<Vec<_>>())?;
                    if poses.iter().zip(&steps).any(|(p, t)| (p.cell.x, p.cell.y, p.heading) != (t.x, t.y, t.heading)) {
                        bail!("episode {} does not replay to its logged poses", h.episode);
                    }
                }
                trajectories_text(o, &world)
            }
            ExportKind::TransitionMatrix => transition_text(&transition_matrix_of(o)?),
            ExportKind::BdaScatter => scatter_text(&o.scatter),
        };
        let path = out.join(format!("{}_{}.tsv", kind.file_stem(), s.as_str()));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, instances: usize, tolerance: f64) -> anyhow::Result<bool> {
    if instances == 0 {
        bail!("--instances must be positive");
    }
    let started = std::time::Instant::now();
    let reports = gradcheck_suite(instances, cfg.seed)?;
    println!("component\tinstances\trejected\tcoords\tmax_rel_err(floor 1e-8)\tmax_rel_err(floor {ROUNDING_FLOOR:e})\tresult");
    let mut ok = true;
    for r in &reports {
        let pass = r.passes(tolerance);
        ok &= pass;
        println!(
            "{}\t{}\t{}\t{}\t{:.3e}\t{:.3e}\t{}",
            r.component,
            r.instances,
            r.rejected,
            r.coords_checked,
            r.max_rel_error,
            r.max_floored_error,
            if pass { "pass" } else { "FAIL" }
        );
    }
    debug_assert_eq!(reports.len(), COMPONENTS.len());
    println!("gradcheck {} tolerance={tolerance:e} seconds={:.1}", if ok { "pass" } else { "FAIL" }, started.elapsed().as_secs_f64());
    Ok(ok)
}

fn seeds_or(cfg: &RunConfig, seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        seeds.to_vec()
    }
}

fn run<T: Scalar>(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = &cli.common;
    match &cli.command {
        Command::Train { updates } => cmd_train::<T>(cfg, common, *updates)?,
        Command::Eval { setting } => cmd_eval::<T>(cfg, common, *setting)?,
        Command::Export { kind, setting } => cmd_export::<T>(cfg, common, *kind, *setting)?,
        Command::Ablate { arms, seeds, budget } => {
            let arms = if arms.is_empty() {
                AblationArm::ALL.to_vec()
            } else {
                arms.iter().map(|a| AblationArm::parse(a)).collect::<Result<Vec<_>, _>>()?
            };
            let table = run_experiment::<T>(cfg, &arms, &seeds_or(cfg, seeds), budget.unwrap_or(cfg.budget_steps), Path::new(&cfg.out_dir))?;
            print!("{}", table.render());
        }
        Command::SweepLambda { lambdas, seeds, budget } => {
            let lambdas = if lambdas.is_empty() { cfg.lambdas.clone() } else { lambdas.clone() };
            let table =
                run_lambda_sweep::<T>(cfg, &lambdas, &seeds_or(cfg, seeds), budget.unwrap_or(cfg.budget_steps), Path::new(&cfg.out_dir))?;
            print!("{}", table.render());
        }
        Command::Gradcheck { instances, tolerance } => return cmd_gradcheck(cfg, *instances, *tolerance),
    }
    Ok(true)
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<bdatp_core::Error>().map(|e| e.kind()))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("usage")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli.common).and_then(|cfg| match cfg.precision {
        Precision::F32 => run::<f32>(&cli, &cfg),
        Precision::F64 => run::<f64>(&cli, &cfg),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let message = serde_json::to_string(&format!("{e:#}")).unwrap_or_else(|_| "\"?\"".into());
            eprintln!("error kind={} message={message}", error_kind(&e));
            ExitCode::from(2)
        }
    }
}
