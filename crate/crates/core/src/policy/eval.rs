//! Greedy evaluation on the held-out maps.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::atp::{argmax, atp_predict};
use super::model::{policy_forward, ActorCritic};
use super::trainer::WorldBank;
use crate::acoustics::Bearing;
use crate::config::RunConfig;
use crate::encoders::{channel_means, encode_audio_channels};
use crate::error::{Error, Result};
use crate::metrics::EpisodeRecord;
use crate::numerics::{Array, ParamSet, Scalar};
use crate::world::{Action, Env, EpisodeSpec, Heading, Observation, TrajectoryStep};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    Heard,
    Unheard,
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::Heard, Setting::Unheard];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Heard => "heard",
            Setting::Unheard => "unheard",
        }
    }

    pub fn categories(self, cfg: &RunConfig) -> &[usize] {
        match self {
            Setting::Heard => &cfg.split.heard_categories,
            Setting::Unheard => &cfg.split.unheard_categories,
        }
    }
}

/// Where an evaluation episode starts; enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode: u64,
    pub setting: Setting,
    pub map_id: String,
    pub map_index: usize,
    pub start_x: usize,
    pub start_y: usize,
    pub start_heading: Heading,
    pub source_x: usize,
    pub source_y: usize,
    pub category_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BearingBucket {
    Left,
    Center,
    Right,
}

impl BearingBucket {
    pub fn of(b: Bearing) -> Self {
        match b {
            Bearing::Left => BearingBucket::Left,
            Bearing::Right => BearingBucket::Right,
            Bearing::Ahead | Bearing::Behind => BearingBucket::Center,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BearingBucket::Left => "left",
            BearingBucket::Center => "center",
            BearingBucket::Right => "right",
        }
    }
}

/// Per-step mean activation of the left and right audio maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub episode: u64,
    pub step: usize,
    pub bucket: BearingBucket,
    pub mean_left: f64,
    pub mean_right: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub records: Vec<EpisodeRecord>,
    pub headers: Vec<EpisodeHeader>,
    pub trajectories: Vec<TrajectoryStep>,
    pub action_sequences: Vec<Vec<usize>>,
    pub atp_correct: usize,
    pub atp_total: usize,
    pub scatter: Vec<ScatterPoint>,
}

impl EvalOutput {
    pub fn atp_accuracy(&self) -> Option<f64> {
        (self.atp_total > 0).then(|| self.atp_correct as f64 / self.atp_total as f64)
    }
}

/// Deterministic episode list for one setting: maps cycle fastest, then
/// categories; poses come from a generator seeded by `seed` and the setting.
pub fn eval_episodes(cfg: &RunConfig, world: &WorldBank, setting: Setting, seed: u64) -> Result<Vec<(usize, EpisodeSpec)>> {
    let cats = setting.categories(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10 + setting as u64);
    let n = world.test_maps.len();
    (0..cfg.split.episodes_per_eval)
        .map(|i| {
            let map_index = i % n;
            let cat = cats[(i / n) % cats.len()];
            Ok((map_index, EpisodeSpec::sample(world.test_maps[map_index].clone(), cat, cfg.world.max_steps, &mut rng)?))
        })
        .collect()
}

fn noise_rng(seed: u64, setting: Setting, episode: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1_000_000 + 2 * episode as u64 + setting as u64);
    r
}

struct Slot<T> {
    episode: usize,
    env: Env<T>,
    rng: ChaCha8Rng,
    obs: Observation<T>,
    h: Vec<T>,
    predicted: Option<usize>,
    actions: Vec<usize>,
}

/// Run every episode of `setting` greedily, `cfg.eval_lanes` at a time, with
/// no parameter updates. Records come back in episode order.
pub fn evaluate<T: Scalar>(
    model: &ActorCritic,
    params: &ParamSet<T>,
    world: &Arc<WorldBank>,
    cfg: &RunConfig,
    setting: Setting,
    seed: u64,
    scatter: bool,
) -> Result<EvalOutput> {
    if scatter && !model.audio.is_bda() {
        return Err(Error::Config("binaural scatter export needs the per-ear audio encoder (model.bda = true)".into()));
    }
    let episodes = eval_episodes(cfg, world, setting, seed)?;
    let mut out = EvalOutput::default();
    let mut records: Vec<Option<EpisodeRecord>> = vec![None; episodes.len()];
    let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); episodes.len()];
    let mut trajectories: Vec<Vec<TrajectoryStep>> = vec![Vec::new(); episodes.len()];
    let mut scatters: Vec<Vec<ScatterPoint>> = vec![Vec::new(); episodes.len()];
    let mut next = 0usize;
    let mut slots: Vec<Slot<T>> = Vec::new();
    let m = model.hidden();
    loop {
        while slots.len() < cfg.eval_lanes && next < episodes.len() {
            let (map_index, spec) = episodes[next].clone();
            out.headers.push(EpisodeHeader {
                episode: next as u64,
                setting,
                map_id: spec.map.id().to_string(),
                map_index,
                start_x: spec.start.cell.x,
                start_y: spec.start.cell.y,
                start_heading: spec.start.heading,
                source_x: spec.source.x,
                source_y: spec.source.y,
                category_id: spec.category_id,
            });
            let category = world.categories[spec.category_id].clone();
            let env = Env::new(spec, category, cfg.acoustics.clone(), cfg.world.view.clone())?;
            let mut rng = noise_rng(seed, setting, next);
            let obs = env.observe(None, &mut rng)?;
            slots.push(Slot { episode: next, env, rng, obs, h: vec![T::zero(); m], predicted: None, actions: Vec::new() });
            next += 1;
        }
        if slots.is_empty() {
            break;
        }
        let d: Vec<&Array<T>> = slots.iter().map(|s| &s.obs.depth).collect();
        let a: Vec<&Array<T>> = slots.iter().map(|s| &s.obs.audio.values).collect();
        let (depth, audio) = (Array::stack(&d)?, Array::stack(&a)?);
        if scatter {
            let maps = encode_audio_channels(params, model.audio.stack(), &audio)?;
            for (s, (l, r)) in slots.iter().zip(channel_means(&maps)) {
                scatters[s.episode].push(ScatterPoint {
                    episode: s.episode as u64,
                    step: s.actions.len(),
                    bucket: BearingBucket::of(s.env.source_geometry().bearing),
                    mean_left: l,
                    mean_right: r,
                });
            }
        }
        let h = Array::new(&[slots.len(), m], slots.iter().flat_map(|s| s.h.iter().copied()).collect())?;
        let step = policy_forward(model, params, depth, audio, h, vec![false; slots.len()])?;
        let n = model.num_actions;
        let actions: Vec<usize> = (0..slots.len()).map(|i| argmax(&step.logits.data()[i * n..(i + 1) * n])).collect();
        let preds = atp_predict(params, &model.aux, &step.state, &actions)?;
        let mut keep = Vec::with_capacity(slots.len());
        for (i, mut s) in slots.into_iter().enumerate() {
            if let Some(p) = s.predicted {
                out.atp_total += 1;
                out.atp_correct += usize::from(p == actions[i]);
            }
            s.predicted = Some(argmax(&preds.data()[i * n..(i + 1) * n]));
            s.h = step.state.row(i).to_vec();
            s.actions.push(actions[i]);
            let res = s.env.step(Action::from_index(actions[i])?, &mut s.rng)?;
            let pose = s.env.pose();
            trajectories[s.episode].push(TrajectoryStep {
                episode: s.episode as u64,
                step: s.actions.len(),
                x: pose.cell.x,
                y: pose.cell.y,
                heading: pose.heading,
                action: Action::from_index(actions[i])?,
                reward: res.reward,
                done: res.done,
            });
            if res.done {
                records[s.episode] = s.env.record();
                seqs[s.episode] = std::mem::take(&mut s.actions);
            } else {
                s.obs = res.observation;
                keep.push(s);
            }
        }
        slots = keep;
    }
    out.headers.sort_by_key(|h| h.episode);
    out.records = records.into_iter().map(|r| r.expect("every episode finishes")).collect();
    out.action_sequences = seqs;
    out.trajectories = trajectories.into_iter().flatten().collect();
    out.scatter = scatters.into_iter().flatten().collect();
    Ok(out)
}
