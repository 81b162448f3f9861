//! Experiment orchestration: ablation arms, the auxiliary-weight sweep, and
//! multi-seed aggregation into one report table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acoustics::category_manifest;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, summarize, MetricSummary};
use crate::numerics::{Checkpoint, Scalar};
use crate::policy::{evaluate, load_policy, train_run, EvalOutput, Setting, WorldBank};

/// Weight of the auxiliary loss in arms that keep it.
pub const ATP_WEIGHT: f64 = 0.1;
/// Auxiliary weights of the sweep.
pub const LAMBDA_SWEEP: [f64; 4] = [0.0, 0.001, 0.01, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationArm {
    Full,
    NoBda,
    NoAtp,
    None,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [AblationArm::None, AblationArm::NoAtp, AblationArm::NoBda, AblationArm::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::NoBda => "no_bda",
            AblationArm::NoAtp => "no_atp",
            AblationArm::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationArm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}; expected full, no_bda, no_atp or none")))
    }

    pub fn bda(self) -> bool {
        matches!(self, AblationArm::Full | AblationArm::NoAtp)
    }

    pub fn aux_weight(self) -> f64 {
        if matches!(self, AblationArm::Full | AblationArm::NoBda) {
            ATP_WEIGHT
        } else {
            0.0
        }
    }

    /// `base` with the two switches set for this arm.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.bda = self.bda();
        c.ppo.aux_weight = self.aux_weight();
        c
    }
}

/// Outcome of one trained seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub label: String,
    pub seed: u64,
    pub heard: MetricSummary,
    pub unheard: MetricSummary,
    pub atp_accuracy_heard: Option<f64>,
    pub atp_accuracy_unheard: Option<f64>,
    pub updates: u64,
    pub env_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell2 {
    pub mean: f64,
    pub std: f64,
}

impl Cell2 {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Cell2 { mean, std }
    }
}

/// One report row: mean and standard deviation over the usable seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub heard_sr: Cell2,
    pub heard_spl: Cell2,
    pub heard_sna: Cell2,
    pub unheard_sr: Cell2,
    pub unheard_spl: Cell2,
    pub unheard_sna: Cell2,
    pub atp_accuracy: Option<Cell2>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Seeds excluded for non-finite losses, with the diagnostic.
    pub flagged: Vec<(u64, String)>,
    pub results: Vec<SeedResult>,
}

impl ResultRow {
    pub fn aggregate(label: &str, results: Vec<SeedResult>, flagged: Vec<(u64, String)>) -> Self {
        let pick = |f: &dyn Fn(&SeedResult) -> f64| Cell2::of(&results.iter().map(f).collect::<Vec<_>>());
        let atp: Vec<f64> = results.iter().filter_map(|r| r.atp_accuracy_unheard).collect();
        ResultRow {
            label: label.into(),
            heard_sr: pick(&|r| r.heard.sr),
            heard_spl: pick(&|r| r.heard.spl),
            heard_sna: pick(&|r| r.heard.sna),
            unheard_sr: pick(&|r| r.unheard.sr),
            unheard_spl: pick(&|r| r.unheard.spl),
            unheard_sna: pick(&|r| r.unheard.sna),
            atp_accuracy: (!atp.is_empty()).then(|| Cell2::of(&atp)),
            episodes: results.first().map_or(0, |r| r.heard.episodes),
            seeds: results.iter().map(|r| r.seed).collect(),
            flagged,
            results,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub title: String,
    pub rows: Vec<ResultRow>,
    pub budget_steps: u64,
    /// Resolved base configuration, category manifest and code version.
    pub provenance: String,
}

fn pct(c: &Cell2) -> String {
    format!("{:5.1} ± {:4.1}", 100.0 * c.mean, 100.0 * c.std)
}

impl ResultTable {
    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text table, percentages as mean ± std over seeds.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.title);
        let _ = writeln!(s, "# budget_steps = {}", self.budget_steps);
        let _ = writeln!(
            s,
            "{:<12} | {:^12} | {:^12} | {:^12} | {:^12} | {:^12} | {:^12} | {:^12} | {:>8} | seeds",
            "setting", "Heard SR", "Heard SPL", "Heard SNA", "Unheard SR", "Unheard SPL", "Unheard SNA", "ATP acc", "episodes"
        );
        for r in &self.rows {
            let atp = r.atp_accuracy.as_ref().map_or("-".to_string(), pct);
            let seeds = r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                s,
                "{:<12} | {} | {} | {} | {} | {} | {} | {:>12} | {:>8} | {}",
                r.label,
                pct(&r.heard_sr),
                pct(&r.heard_spl),
                pct(&r.heard_sna),
                pct(&r.unheard_sr),
                pct(&r.unheard_spl),
                pct(&r.unheard_sna),
                atp,
                r.episodes,
                seeds
            );
            for (seed, why) in &r.flagged {
                let _ = writeln!(s, "#   {} seed {seed} excluded: {why}", r.label);
            }
        }
        s.push_str("\n# provenance\n");
        for line in self.provenance.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s
    }
}

pub fn provenance(cfg: &RunConfig, world: &WorldBank) -> String {
    format!(
        "code_version = {}\n{}{}",
        env!("CARGO_PKG_VERSION"),
        cfg.to_text(),
        category_manifest(&world.categories, cfg.category_seed)
    )
}

/// Greedy evaluation of a trained checkpoint on one setting.
pub fn evaluate_checkpoint<T: Scalar>(
    cfg: &RunConfig,
    world: &Arc<WorldBank>,
    ckpt: &Checkpoint<T>,
    setting: Setting,
    scatter: bool,
) -> Result<EvalOutput> {
    let (model, params) = load_policy(cfg, ckpt)?;
    evaluate(&model, &params, world, cfg, setting, cfg.seed, scatter)
}

fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).map_err(|e| Error::Invalid(e.to_string()))?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Train one seed to `budget_steps`, then evaluate Heard and Unheard. Writes
/// the run directory and its `result.json`.
pub fn run_seed<T: Scalar>(cfg: &RunConfig, label: &str, seed: u64, budget_steps: u64, dir: &Path) -> Result<SeedResult> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.budget_steps = budget_steps;
    let outcome = train_run::<T>(&c, dir, None, None)?;
    let world = Arc::new(WorldBank::build(&c)?);
    let ckpt = Checkpoint::<T>::load(&outcome.final_checkpoint)?;
    let heard = evaluate_checkpoint(&c, &world, &ckpt, Setting::Heard, false)?;
    let unheard = evaluate_checkpoint(&c, &world, &ckpt, Setting::Unheard, false)?;
    write_jsonl(&dir.join("records_heard.jsonl"), &heard.records)?;
    write_jsonl(&dir.join("records_unheard.jsonl"), &unheard.records)?;
    let result = SeedResult {
        label: label.into(),
        seed,
        heard: summarize(&heard.records)?,
        unheard: summarize(&unheard.records)?,
        atp_accuracy_heard: heard.atp_accuracy(),
        atp_accuracy_unheard: unheard.atp_accuracy(),
        updates: outcome.updates,
        env_steps: outcome.env_steps,
    };
    fs::write(
        dir.join("result.json"),
        serde_json::to_string_pretty(&result).map_err(|e| Error::Invalid(e.to_string()))?,
    )?;
    Ok(result)
}

fn run_row<T: Scalar>(cfg: &RunConfig, label: &str, seeds: &[u64], budget: u64, out: &Path) -> Result<ResultRow> {
    let mut results = Vec::new();
    let mut flagged = Vec::new();
    for &seed in seeds {
        match run_seed::<T>(cfg, label, seed, budget, &out.join(label).join(format!("seed{seed}"))) {
            Ok(r) => results.push(r),
            Err(Error::NonFinite(why)) => flagged.push((seed, why)),
            Err(e) => return Err(e),
        }
    }
    Ok(ResultRow::aggregate(label, results, flagged))
}

fn finish(title: &str, cfg: &RunConfig, rows: Vec<ResultRow>, budget: u64, out: &Path) -> Result<ResultTable> {
    let world = WorldBank::build(cfg)?;
    let table = ResultTable { title: title.into(), rows, budget_steps: budget, provenance: provenance(cfg, &world) };
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), table.render())?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&table).map_err(|e| Error::Invalid(e.to_string()))?,
    )?;
    Ok(table)
}

/// Every requested arm, every seed.
pub fn run_experiment<T: Scalar>(
    base: &RunConfig,
    arms: &[AblationArm],
    seeds: &[u64],
    budget_steps: u64,
    out: &Path,
) -> Result<ResultTable> {
    if seeds.is_empty() || arms.is_empty() {
        return Err(Error::Config("an experiment needs at least one arm and one seed".into()));
    }
    base.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), base.to_text())?;
    let rows = arms
        .iter()
        .map(|&arm| run_row::<T>(&arm.apply(base), arm.as_str(), seeds, budget_steps, out))
        .collect::<Result<Vec<_>>>()?;
    finish("ablation: per-ear difference attention (bda) x action-transition loss (atp)", base, rows, budget_steps, out)
}

/// Concat-encoder runs at each auxiliary weight.
pub fn run_lambda_sweep<T: Scalar>(
    base: &RunConfig,
    lambdas: &[f64],
    seeds: &[u64],
    budget_steps: u64,
    out: &Path,
) -> Result<ResultTable> {
    if seeds.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("a sweep needs at least one weight and one seed".into()));
    }
    let mut cfg = base.clone();
    cfg.model.bda = false;
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let rows = lambdas
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.ppo.aux_weight = l;
            c.validate()?;
            run_row::<T>(&c, &format!("lambda={l}"), seeds, budget_steps, out)
        })
        .collect::<Result<Vec<_>>>()?;
    finish("auxiliary weight sweep (concat audio encoder)", &cfg, rows, budget_steps, out)
}
