//! Rollout collection, updates, and bit-exact checkpoint/resume.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{policy_forward, ActorCritic};
use super::ppo::{ppo_update, Adam, UpdateStats};
use super::rollout::{RolloutBuffer, Transition};
use crate::acoustics::{category_manifest, make_category_set, SoundCategory};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::EpisodeRecord;
use crate::numerics::{log_softmax_rows, Array, Checkpoint, ParamSet, Scalar};
use crate::world::{generate_map, Action, AgentPose, Cell, Env, EpisodeSpec, GridMap, Heading, Observation};

/// Stream of the trainer's own generator (minibatch order).
const TRAINER_STREAM: u64 = 1;
/// Lane `i` draws from stream `LANE_STREAM + i`.
const LANE_STREAM: u64 = 100;

/// Maps and sound categories shared by every lane.
#[derive(Clone, Debug)]
pub struct WorldBank {
    pub train_maps: Vec<Arc<GridMap>>,
    pub test_maps: Vec<Arc<GridMap>>,
    pub categories: Vec<SoundCategory>,
}

impl WorldBank {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let gen = |seeds: &[u64]| -> Result<Vec<Arc<GridMap>>> {
            seeds
                .iter()
                .map(|&s| generate_map(s, cfg.world.width, cfg.world.height, cfg.world.rooms).map(Arc::new))
                .collect()
        };
        Ok(WorldBank {
            train_maps: gen(&cfg.split.train_maps)?,
            test_maps: gen(&cfg.split.test_maps)?,
            categories: make_category_set(cfg.num_categories, cfg.acoustics.bins, cfg.acoustics.frames, cfg.category_seed)?,
        })
    }
}

/// Generator state as `seed_hex:stream:word_pos`.
pub fn rng_to_string(rng: &ChaCha8Rng) -> String {
    let mut s = String::new();
    for b in rng.get_seed() {
        let _ = write!(s, "{b:02x}");
    }
    format!("{s}:{}:{}", rng.get_stream(), rng.get_word_pos())
}

pub fn rng_from_string(s: &str) -> Result<ChaCha8Rng> {
    let bad = || Error::Checkpoint(format!("malformed generator state {s:?}"));
    let mut parts = s.split(':');
    let (hex, stream, pos) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.parse().map_err(|_| bad())?);
    rng.set_word_pos(pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

struct Lane<T> {
    env: Env<T>,
    map_index: usize,
    rng: ChaCha8Rng,
    obs: Observation<T>,
    h: Vec<T>,
    reset: bool,
    episode_return: f64,
}

fn sample_episode<R: Rng + ?Sized>(cfg: &RunConfig, world: &WorldBank, rng: &mut R) -> Result<(usize, EpisodeSpec)> {
    let map_index = rng.random_range(0..world.train_maps.len());
    let heard = &cfg.split.heard_categories;
    let category = heard[rng.random_range(0..heard.len())];
    let spec = EpisodeSpec::sample(world.train_maps[map_index].clone(), category, cfg.world.max_steps, rng)?;
    Ok((map_index, spec))
}

fn make_env<T: Scalar>(cfg: &RunConfig, world: &WorldBank, spec: EpisodeSpec) -> Result<Env<T>> {
    let category = world.categories[spec.category_id].clone();
    Env::new(spec, category, cfg.acoustics.clone(), cfg.world.view.clone())
}

/// Stepping one lane; a finished episode is replaced by a fresh one.
fn step_lane<T: Scalar>(
    lane: &mut Lane<T>,
    action: Action,
    cfg: &RunConfig,
    world: &WorldBank,
) -> Result<(f64, bool, Option<(EpisodeRecord, f64)>)> {
    let res = lane.env.step(action, &mut lane.rng)?;
    lane.episode_return += res.reward;
    if !res.done {
        lane.obs = res.observation;
        return Ok((res.reward, false, None));
    }
    let record = lane.env.record().expect("episode finished");
    let ret = lane.episode_return;
    let (map_index, spec) = sample_episode(cfg, world, &mut lane.rng)?;
    lane.env = make_env(cfg, world, spec)?;
    lane.map_index = map_index;
    lane.obs = lane.env.observe(None, &mut lane.rng)?;
    lane.episode_return = 0.0;
    Ok((res.reward, true, Some((record, ret))))
}

fn stack_obs<T: Scalar>(obs: &[&Observation<T>]) -> Result<(Array<T>, Array<T>)> {
    let d: Vec<&Array<T>> = obs.iter().map(|o| &o.depth).collect();
    let a: Vec<&Array<T>> = obs.iter().map(|o| &o.audio.values).collect();
    Ok((Array::stack(&d)?, Array::stack(&a)?))
}

/// Inverse-CDF draw from softmax probabilities computed in 64-bit.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(logits: &[T], rng: &mut R) -> usize {
    let max = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

/// One training run: model, optimizer, and the lanes' live episodes.
pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub model: ActorCritic,
    pub params: ParamSet<T>,
    pub adam: Adam<T>,
    pub world: Arc<WorldBank>,
    pub update: u64,
    pub env_steps: u64,
    lanes: Vec<Lane<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let world = Arc::new(WorldBank::build(&cfg)?);
        Self::with_world(cfg, world)
    }

    pub fn with_world(cfg: RunConfig, world: Arc<WorldBank>) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = ActorCritic::new::<T>(&cfg.model, &cfg.encoder()?, Action::COUNT, cfg.seed)?;
        let adam = Adam::new(&params, cfg.ppo.lr, cfg.ppo.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAINER_STREAM);
        let mut lanes = Vec::with_capacity(cfg.ppo.lanes);
        for i in 0..cfg.ppo.lanes {
            let mut lrng = ChaCha8Rng::seed_from_u64(cfg.seed);
            lrng.set_stream(LANE_STREAM + i as u64);
            let (map_index, spec) = sample_episode(&cfg, &world, &mut lrng)?;
            let env = make_env(&cfg, &world, spec)?;
            let obs = env.observe(None, &mut lrng)?;
            lanes.push(Lane {
                env,
                map_index,
                rng: lrng,
                obs,
                h: vec![T::zero(); model.hidden()],
                reset: true,
                episode_return: 0.0,
            });
        }
        Ok(Trainer { cfg, model, params, adam, world, update: 0, env_steps: 0, lanes, rng })
    }

    fn masked_h(&self) -> Result<Array<T>> {
        let m = self.model.hidden();
        let data = self.lanes.iter().flat_map(|l| if l.reset { vec![T::zero(); m] } else { l.h.clone() }).collect();
        Array::new(&[self.lanes.len(), m], data)
    }

    fn act(&self) -> Result<super::model::PolicyStep<T>> {
        let obs: Vec<&Observation<T>> = self.lanes.iter().map(|l| &l.obs).collect();
        let (depth, audio) = stack_obs(&obs)?;
        policy_forward(&self.model, &self.params, depth, audio, self.masked_h()?, vec![false; self.lanes.len()])
    }

    /// Collect `rollout_len` steps from every lane with the current policy.
    /// Returns the buffer and the episodes that finished, with their returns.
    pub fn collect_rollout(&mut self) -> Result<(RolloutBuffer<T>, Vec<(EpisodeRecord, f64)>)> {
        let (steps, nl, m) = (self.cfg.ppo.rollout_len, self.lanes.len(), self.model.hidden());
        let mut buf = RolloutBuffer::new(steps, nl, self.model.encoder.depth_hw, self.model.encoder.audio_hw, m);
        buf.h0 = self.masked_h()?;
        let mut finished = Vec::new();
        for t in 0..steps {
            let out = self.act()?;
            let logp = log_softmax_rows(&out.logits);
            let n = self.model.num_actions;
            let mut actions = Vec::with_capacity(nl);
            for (b, lane) in self.lanes.iter_mut().enumerate() {
                let a = sample_action(&out.logits.data()[b * n..(b + 1) * n], &mut lane.rng);
                actions.push(a);
            }
            for (b, lane) in self.lanes.iter().enumerate() {
                buf.store(
                    t,
                    b,
                    Transition {
                        depth: lane.obs.depth.data(),
                        audio: lane.obs.audio.values.data(),
                        action: actions[b],
                        log_prob: logp.data()[b * n + actions[b]],
                        value: out.value[b],
                        reward: 0.0,
                        done: false,
                        state: out.state.row(b),
                    },
                )?;
            }
            let results = self.step_lanes(&actions)?;
            for (b, (reward, done, fin)) in results.into_iter().enumerate() {
                let r = t * nl + b;
                buf.rewards[r] = reward;
                buf.dones[r] = done;
                let lane = &mut self.lanes[b];
                lane.h = out.state.row(b).to_vec();
                lane.reset = done;
                finished.extend(fin);
            }
        }
        let last = self.act()?;
        buf.bootstrap = last.value;
        self.env_steps += (steps * nl) as u64;
        Ok((buf, finished))
    }

    #[allow(clippy::type_complexity)]
    fn step_lanes(&mut self, actions: &[usize]) -> Result<Vec<(f64, bool, Option<(EpisodeRecord, f64)>)>> {
        let cfg = &self.cfg;
        let world = &*self.world;
        let acts: Vec<Action> = actions.iter().map(|&a| Action::from_index(a)).collect::<Result<_>>()?;
        if cfg.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .lanes
                    .iter_mut()
                    .zip(&acts)
                    .map(|(lane, &a)| s.spawn(move || step_lane(lane, a, cfg, world)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("lane thread panicked")).collect()
            })
        } else {
            self.lanes.iter_mut().zip(&acts).map(|(lane, &a)| step_lane(lane, a, cfg, world)).collect()
        }
    }

    /// Collect one rollout and apply one PPO update.
    pub fn train_update(&mut self) -> Result<(UpdateStats, Vec<EpisodeRecord>)> {
        let (buf, finished) = self.collect_rollout()?;
        let mut stats = ppo_update(
            &self.model,
            &mut self.params,
            &mut self.adam,
            &buf,
            &self.cfg.ppo,
            self.cfg.model.atp,
            &mut self.rng,
        )?;
        self.update += 1;
        stats.update = self.update;
        stats.env_steps = self.env_steps;
        stats.episodes = finished.len();
        stats.mean_return = (!finished.is_empty()).then(|| finished.iter().map(|f| f.1).sum::<f64>() / finished.len() as f64);
        Ok((stats, finished.into_iter().map(|f| f.0).collect()))
    }

    /// Full training state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::new();
        for key in RunConfig::KEYS {
            c.set_meta(format!("config.{key}"), self.cfg.get(key).expect("listed key"));
        }
        c.set_meta("update", self.update);
        c.set_meta("env_steps", self.env_steps);
        c.set_meta("rng", rng_to_string(&self.rng));
        c.set_meta("adam.step", self.adam.step);
        for p in self.params.iter() {
            c.push(format!("param/{}", p.name), p.value.clone());
        }
        for ((p, m), v) in self.params.iter().zip(&self.adam.m).zip(&self.adam.v) {
            c.push(format!("adam.m/{}", p.name), m.clone());
            c.push(format!("adam.v/{}", p.name), v.clone());
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            let spec = lane.env.spec();
            let k = |s: &str| format!("lane{i}.{s}");
            c.set_meta(k("map"), lane.map_index);
            c.set_meta(
                k("start"),
                format!("{},{},{}", spec.start.cell.x, spec.start.cell.y, spec.start.heading.index()),
            );
            c.set_meta(k("source"), format!("{},{}", spec.source.x, spec.source.y));
            c.set_meta(k("category"), spec.category_id);
            let acts: String = lane.env.actions().iter().map(|a| char::from(b'0' + a.index() as u8)).collect();
            c.set_meta(k("actions"), format!("a{acts}"));
            c.set_meta(k("prev_action"), lane.obs.prev_action.map_or("none".to_string(), |a| a.index().to_string()));
            c.set_meta(k("rng"), rng_to_string(&lane.rng));
            c.set_meta(k("reset"), lane.reset);
            c.set_meta(k("return"), format!("{:016x}", lane.episode_return.to_bits()));
            c.push(k("h"), Array::new(&[lane.h.len()], lane.h.clone()).expect("non-empty"));
            c.push(k("depth"), lane.obs.depth.clone());
            c.push(k("audio"), lane.obs.audio.values.clone());
        }
        c
    }

    /// Rebuild a trainer from a checkpoint written with an equivalent
    /// configuration. Architecture mismatches list every differing shape.
    pub fn restore(cfg: RunConfig, ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let mut diffs = Vec::new();
        for p in t.params.iter() {
            match ckpt.get(&format!("param/{}", p.name)) {
                None => diffs.push(format!("{}: {:?} vs missing", p.name, p.value.shape())),
                Some(a) if a.shape() != p.value.shape() => {
                    diffs.push(format!("{}: {:?} vs {:?}", p.name, p.value.shape(), a.shape()))
                }
                _ => {}
            }
        }
        let names: Vec<String> = t.params.iter().map(|p| format!("param/{}", p.name)).collect();
        for (name, a) in &ckpt.entries {
            if name.starts_with("param/") && !names.contains(name) {
                diffs.push(format!("{}: missing vs {:?}", &name[6..], a.shape()));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!("architecture mismatch (config vs checkpoint): {}", diffs.join("; "))));
        }
        let need = |name: String| ckpt.get(&name).cloned().ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")));
        let num = |key: String| -> Result<u64> {
            ckpt.meta(&key)?.parse().map_err(|_| Error::Checkpoint(format!("meta {key} is not an integer")))
        };
        for (i, p) in t.params.iter_mut().enumerate() {
            p.value = need(format!("param/{}", p.name))?;
            t.adam.m[i] = need(format!("adam.m/{}", p.name))?;
            t.adam.v[i] = need(format!("adam.v/{}", p.name))?;
        }
        t.adam.step = num("adam.step".into())?;
        t.update = num("update".into())?;
        t.env_steps = num("env_steps".into())?;
        t.rng = rng_from_string(ckpt.meta("rng")?)?;
        let lanes = t.lanes.len();
        if ckpt.meta(&format!("lane{lanes}.rng")).is_ok() || ckpt.meta(&format!("lane{}.rng", lanes - 1)).is_err() {
            return Err(Error::Checkpoint(format!("checkpoint lane count differs from ppo.lanes = {lanes}")));
        }
        for i in 0..lanes {
            let k = |s: &str| format!("lane{i}.{s}");
            let ints = |key: String| -> Result<Vec<usize>> {
                ckpt.meta(&key)?
                    .split(',')
                    .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("meta {key} malformed"))))
                    .collect()
            };
            let map_index = num(k("map"))? as usize;
            let map = t
                .world
                .train_maps
                .get(map_index)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("lane {i} map index {map_index} out of range")))?;
            let st = ints(k("start"))?;
            let so = ints(k("source"))?;
            if st.len() != 3 || so.len() != 2 {
                return Err(Error::Checkpoint(format!("lane {i} pose malformed")));
            }
            let start = AgentPose { cell: Cell::new(st[0], st[1]), heading: Heading::from_index(st[2]) };
            let spec = EpisodeSpec::new(map, start, Cell::new(so[0], so[1]), num(k("category"))? as usize, t.cfg.world.max_steps)?;
            let mut env = make_env(&t.cfg, &t.world, spec)?;
            let mut scratch = ChaCha8Rng::seed_from_u64(0);
            let acts = ckpt.meta(&k("actions"))?.strip_prefix('a').ok_or_else(|| Error::Checkpoint("actions malformed".into()))?;
            for ch in acts.chars() {
                let a = Action::from_index(ch.to_digit(10).ok_or_else(|| Error::Checkpoint("actions malformed".into()))? as usize)?;
                env.step(a, &mut scratch)?;
            }
            let prev = match ckpt.meta(&k("prev_action"))? {
                "none" => None,
                v => Some(Action::from_index(v.parse().map_err(|_| Error::Checkpoint("prev_action malformed".into()))?)?),
            };
            let bits = u64::from_str_radix(ckpt.meta(&k("return"))?, 16).map_err(|_| Error::Checkpoint("return malformed".into()))?;
            let lane = &mut t.lanes[i];
            lane.env = env;
            lane.map_index = map_index;
            lane.rng = rng_from_string(ckpt.meta(&k("rng"))?)?;
            lane.reset = ckpt.meta(&k("reset"))? == "true";
            lane.episode_return = f64::from_bits(bits);
            lane.h = need(k("h"))?.into_data();
            lane.obs = Observation {
                depth: need(k("depth"))?,
                audio: crate::acoustics::BinauralSpectrogram { values: need(k("audio"))? },
                prev_action: prev,
            };
        }
        Ok(t)
    }
}

/// Files produced by [`train_run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics_log: PathBuf,
    pub final_checkpoint: PathBuf,
    pub updates: u64,
    pub env_steps: u64,
    pub stats: Vec<UpdateStats>,
    pub training_episodes: Vec<EpisodeRecord>,
}

pub fn checkpoint_name(update: u64) -> String {
    format!("ckpt-{update:06}.bin")
}

/// Train until `updates` total updates (default: the step budget), echoing
/// the resolved config, appending one JSON line per update to
/// `metrics.jsonl`, and checkpointing every `run.checkpoint_every` updates.
pub fn train_run<T: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>, updates: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::restore(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::<T>::new(cfg.clone())?,
    };
    fs::write(out.join("categories.txt"), category_manifest(&trainer.world.categories, cfg.category_seed))?;
    let target = updates.unwrap_or_else(|| cfg.budget_updates());
    let log_path = out.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let mut all = Vec::new();
    let mut episodes = Vec::new();
    while trainer.update < target {
        let (stats, eps) = trainer.train_update()?;
        let line = serde_json::to_string(&stats).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(log, "{line}")?;
        episodes.extend(eps);
        all.push(stats);
        if trainer.update % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&out.join(checkpoint_name(trainer.update)))?;
        }
    }
    log.flush()?;
    let final_checkpoint = out.join("final.bin");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        metrics_log: log_path,
        final_checkpoint,
        updates: trainer.update,
        env_steps: trainer.env_steps,
        stats: all,
        training_episodes: episodes,
    })
}

/// Architecture from `cfg` with parameters read from a checkpoint.
pub fn load_policy<T: Scalar>(cfg: &RunConfig, ckpt: &Checkpoint<T>) -> Result<(ActorCritic, ParamSet<T>)> {
    let (model, mut params) = ActorCritic::new::<T>(&cfg.model, &cfg.encoder()?, Action::COUNT, cfg.seed)?;
    let mut stored = ParamSet::<T>::new();
    for (name, a) in &ckpt.entries {
        if let Some(n) = name.strip_prefix("param/") {
            stored.add(n, a.clone());
        }
    }
    let diff = ActorCritic::shape_diff(&params, &stored);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!("architecture mismatch (config vs checkpoint): {}", diff.join("; "))));
    }
    for p in params.iter_mut() {
        let id = stored.find(&p.name).expect("checked by shape_diff");
        p.value = stored.value(id).clone();
    }
    Ok((model, params))
}
