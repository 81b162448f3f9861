//! Flat `key = value` run configuration.
//!
//! Every tunable has a default. Lines starting with `#` are comments. Lists
//! are comma separated; integer lists also accept half-open ranges such as
//! `1000..1012`.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::acoustics::AcousticConfig;
use crate::encoders::{EncoderConfig, DEFAULT_CHANNELS, DEFAULT_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::numerics::Precision;
use crate::world::{Action, ViewConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub rooms: usize,
    pub max_steps: usize,
    pub view: ViewConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { width: 15, height: 15, rooms: 4, max_steps: 200, view: ViewConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub feature_dim: usize,
    /// Recurrent state size, the width of `s_t`.
    pub hidden: usize,
    pub aux_hidden: usize,
    pub bda: bool,
    /// When false the auxiliary loss is never built, whatever its weight.
    pub atp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: DEFAULT_CHANNELS,
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: 512,
            aux_hidden: 256,
            bda: true,
            atp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Weight of the action-transition loss in the total objective.
    pub aux_weight: f64,
    pub rollout_len: usize,
    pub lanes: usize,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            lr: 2.5e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            aux_weight: 0.1,
            rollout_len: 128,
            lanes: 8,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad(format!("ppo.aux_weight must be >= 0, got {}", self.aux_weight));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("ppo.clip must lie in (0,1), got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("ppo.gamma {} and ppo.gae_lambda {} must lie in [0,1]", self.gamma, self.gae_lambda));
        }
        if self.rollout_len < 2 {
            return bad(format!("ppo.rollout_len must be >= 2, got {}", self.rollout_len));
        }
        if self.lanes == 0 || self.minibatches == 0 || self.minibatches > self.lanes {
            return bad(format!("need 1 <= ppo.minibatches ({}) <= ppo.lanes ({})", self.minibatches, self.lanes));
        }
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || !(self.adam_eps > 0.0) {
            return bad("ppo.epochs, ppo.lr, ppo.max_grad_norm and ppo.adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Which maps and sound categories each phase may use.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_maps: Vec<u64>,
    pub test_maps: Vec<u64>,
    pub heard_categories: Vec<usize>,
    pub unheard_categories: Vec<usize>,
    pub episodes_per_eval: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_maps: (1000..1012).collect(),
            test_maps: (2000..2006).collect(),
            heard_categories: vec![0, 1, 2, 3],
            unheard_categories: vec![4, 5],
            episodes_per_eval: 200,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_maps.is_empty() || self.test_maps.is_empty() {
            return bad("split needs at least one train and one test map".into());
        }
        if self.heard_categories.is_empty() || self.unheard_categories.is_empty() {
            return bad("split needs at least one heard and one unheard category".into());
        }
        if let Some(m) = self.train_maps.iter().find(|m| self.test_maps.contains(m)) {
            return bad(format!("map seed {m} is both a train and a test map"));
        }
        if let Some(c) = self.heard_categories.iter().find(|c| self.unheard_categories.contains(c)) {
            return bad(format!("category {c} is both heard and unheard"));
        }
        if let Some(c) = self.heard_categories.iter().chain(&self.unheard_categories).find(|&&c| c >= num_categories) {
            return bad(format!("category {c} outside the {num_categories} generated categories"));
        }
        if self.episodes_per_eval == 0 {
            return bad("split.episodes_per_eval must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub acoustics: AcousticConfig,
    pub num_categories: usize,
    pub category_seed: u64,
    pub model: ModelConfig,
    pub ppo: PpoConfig,
    pub split: SplitSpec,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub budget_steps: u64,
    pub checkpoint_every: u64,
    pub eval_lanes: usize,
    pub parallel: bool,
    pub precision: Precision,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            acoustics: AcousticConfig::default(),
            num_categories: 6,
            category_seed: 7,
            model: ModelConfig::default(),
            ppo: PpoConfig::default(),
            split: SplitSpec::default(),
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            lambdas: vec![0.0, 0.001, 0.01, 0.1],
            budget_steps: 500_000,
            checkpoint_every: 10,
            eval_lanes: 8,
            parallel: false,
            precision: Precision::F32,
            out_dir: "runs/default".into(),
        }
    }
}

/// Text form of a configuration value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

fn parse_scalar<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.trim().parse().map_err(|e: T::Err| format!("cannot parse {s:?}: {e}"))
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                parse_scalar(s)
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool, String);

impl ConfigValue for Precision {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Precision::parse(s.trim()).ok_or_else(|| format!("unknown precision {s:?}"))
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

fn parse_int_list<T>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T: FromStr + TryFrom<u64>,
    T::Err: Display,
{
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let (a, b): (u64, u64) = (parse_scalar(a)?, parse_scalar(b)?);
            for v in a..b {
                out.push(T::try_from(v).map_err(|_| format!("{v} out of range"))?);
            }
        } else {
            out.push(parse_scalar(item)?);
        }
    }
    Ok(out)
}

fn render_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_int_list(s)
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl ConfigValue for Vec<u64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_int_list(s)
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(str::trim).filter(|i| !i.is_empty()).map(parse_scalar).collect()
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl ConfigValue for [usize; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = parse_int_list(s)?;
        v.try_into().map_err(|v: Vec<usize>| format!("expected 3 values, got {}", v.len()))
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

macro_rules! config_fields {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            /// Every recognised key, in echo order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_fields! {
    "world.width" => world.width,
    "world.height" => world.height,
    "world.rooms" => world.rooms,
    "world.max_steps" => world.max_steps,
    "world.depth_height" => world.view.depth_height,
    "world.depth_width" => world.view.depth_width,
    "world.max_range" => world.view.max_range,
    "acoustics.bins" => acoustics.bins,
    "acoustics.frames" => acoustics.frames,
    "acoustics.ild_strength" => acoustics.ild_strength,
    "acoustics.noise_std" => acoustics.noise_std,
    "acoustics.num_categories" => num_categories,
    "acoustics.category_seed" => category_seed,
    "model.channels" => model.channels,
    "model.feature_dim" => model.feature_dim,
    "model.hidden" => model.hidden,
    "model.aux_hidden" => model.aux_hidden,
    "model.bda" => model.bda,
    "model.atp" => model.atp,
    "ppo.gamma" => ppo.gamma,
    "ppo.gae_lambda" => ppo.gae_lambda,
    "ppo.clip" => ppo.clip,
    "ppo.epochs" => ppo.epochs,
    "ppo.minibatches" => ppo.minibatches,
    "ppo.lr" => ppo.lr,
    "ppo.value_coef" => ppo.value_coef,
    "ppo.entropy_coef" => ppo.entropy_coef,
    "ppo.aux_weight" => ppo.aux_weight,
    "ppo.rollout_len" => ppo.rollout_len,
    "ppo.lanes" => ppo.lanes,
    "ppo.max_grad_norm" => ppo.max_grad_norm,
    "ppo.adam_eps" => ppo.adam_eps,
    "split.train_maps" => split.train_maps,
    "split.test_maps" => split.test_maps,
    "split.heard" => split.heard_categories,
    "split.unheard" => split.unheard_categories,
    "split.episodes_per_eval" => split.episodes_per_eval,
    "run.seed" => seed,
    "run.seeds" => seeds,
    "run.lambdas" => lambdas,
    "run.budget_steps" => budget_steps,
    "run.checkpoint_every" => checkpoint_every,
    "run.eval_lanes" => eval_lanes,
    "run.parallel" => parallel,
    "run.precision" => precision,
    "run.out_dir" => out_dir,
}

impl RunConfig {
    /// A small model and short rollouts on the default world, for smoke runs
    /// and tests.
    pub fn smoke() -> Self {
        let mut c = RunConfig::default();
        c.model.channels = [4, 8, 8];
        c.model.feature_dim = 16;
        c.model.hidden = 16;
        c.model.aux_hidden = 16;
        c.world.view.depth_height = 12;
        c.world.view.depth_width = 13;
        c.world.max_steps = 60;
        c.ppo.rollout_len = 16;
        c.ppo.lanes = 4;
        c.ppo.minibatches = 2;
        c.ppo.epochs = 2;
        c.ppo.lr = 1e-3;
        c.split.episodes_per_eval = 12;
        c.budget_steps = 5_000;
        c.checkpoint_every = 5;
        c.eval_lanes = 4;
        c
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_text(&std::fs::read_to_string(path)?)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Fully resolved configuration, one key per line.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    /// Keys whose rendered values differ.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        Self::KEYS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.width < 9 || self.world.height < 9 || self.world.rooms == 0 || self.world.max_steps == 0 {
            return Err(Error::Config(format!(
                "world must be at least 9x9 with rooms and steps, got {}x{}, {} rooms, {} steps",
                self.world.width, self.world.height, self.world.rooms, self.world.max_steps
            )));
        }
        if self.world.view.depth_height == 0 || self.world.view.depth_width == 0 || !(self.world.view.max_range > 0.0) {
            return Err(Error::Config("depth view must be non-empty with positive range".into()));
        }
        self.acoustics.validate()?;
        self.ppo.validate()?;
        self.split.validate(self.num_categories)?;
        if Action::COUNT < 2 {
            return Err(Error::Config("need at least two actions".into()));
        }
        if self.model.hidden == 0 || self.model.aux_hidden == 0 {
            return Err(Error::Config("model.hidden and model.aux_hidden must be positive".into()));
        }
        if self.seeds.is_empty() || self.eval_lanes == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("run.seeds, run.eval_lanes and run.checkpoint_every must be non-empty/positive".into()));
        }
        self.encoder()?;
        Ok(())
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        EncoderConfig::new(
            self.model.channels,
            self.model.feature_dim,
            (self.world.view.depth_height, self.world.view.depth_width),
            (self.acoustics.bins, self.acoustics.frames),
        )
    }

    /// Environment steps per rollout.
    pub fn steps_per_update(&self) -> u64 {
        (self.ppo.rollout_len * self.ppo.lanes) as u64
    }

    /// Updates needed to reach the step budget.
    pub fn budget_updates(&self) -> u64 {
        self.budget_steps.div_ceil(self.steps_per_update())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::from_text(&text).unwrap(), c);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        assert!(text.contains("split.train_maps = 1000,1001"));
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = RunConfig::from_text("# comment\nppo.aux_weight = 0\nsplit.test_maps = 5..8\n").unwrap();
        assert_eq!(c.ppo.aux_weight, 0.0);
        assert_eq!(c.split.test_maps, vec![5, 6, 7]);
        c.apply_override("model.channels=4,4,4").unwrap();
        assert_eq!(c.model.channels, [4, 4, 4]);
        assert_eq!(c.diff(&RunConfig::default()), vec!["model.channels", "ppo.aux_weight", "split.test_maps"]);
        assert!(c.apply_override("model.channels=4,4").is_err());
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("ppo.lr").is_err());
        assert!(RunConfig::from_text("ppo.clip = x").is_err());
        let mut bad = RunConfig::default();
        bad.split.heard_categories.push(4);
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::default();
        bad.ppo.aux_weight = -0.1;
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::default();
        bad.split.test_maps.push(1000);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smoke_config_is_valid() {
        let c = RunConfig::smoke();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn budget_arithmetic() {
        let c = RunConfig::default();
        assert_eq!(c.steps_per_update(), 1024);
        assert_eq!(c.budget_updates(), 489);
    }
}
