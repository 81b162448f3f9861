use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{optimal_action_count, raycast_depth, AgentPose, Cell, DistanceField, GridMap, Heading};
use crate::acoustics::{render_geometry, AcousticConfig, BinauralSpectrogram, SoundCategory, SourceGeometry};
use crate::error::{Error, Result};
use crate::metrics::EpisodeRecord;
use crate::numerics::{Array, Scalar};

pub const SUCCESS_REWARD: f64 = 10.0;
pub const STEP_PENALTY: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward = 0,
    Left = 1,
    Right = 2,
    Stop = 3,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Forward, Action::Left, Action::Right, Action::Stop];

    pub fn from_index(i: usize) -> Result<Action> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("action {i} outside [0, {})", Self::COUNT)))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Depth camera geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    pub depth_height: usize,
    pub depth_width: usize,
    pub max_range: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig { depth_height: 36, depth_width: 37, max_range: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeSpec {
    pub map: Arc<GridMap>,
    pub start: AgentPose,
    pub source: Cell,
    pub category_id: usize,
    pub max_steps: usize,
}

impl EpisodeSpec {
    pub const MIN_START_DISTANCE: u32 = 2;

    pub fn new(map: Arc<GridMap>, start: AgentPose, source: Cell, category_id: usize, max_steps: usize) -> Result<Self> {
        let field = DistanceField::new(&map, source);
        match field.get(start.cell) {
            None => Err(Error::Unreachable(format!(
                "source {source:?} unreachable from {:?} on {}",
                start.cell,
                map.id()
            ))),
            Some(d) if d < Self::MIN_START_DISTANCE => Err(Error::Invalid(format!(
                "start must be at least {} cells from the source, got {d}",
                Self::MIN_START_DISTANCE
            ))),
            Some(_) if max_steps == 0 => Err(Error::Invalid("max_steps must be positive".into())),
            Some(_) => Ok(EpisodeSpec { map, start, source, category_id, max_steps }),
        }
    }

    /// Uniform source cell, then a uniform start at least two cells away.
    pub fn sample<R: Rng + ?Sized>(map: Arc<GridMap>, category_id: usize, max_steps: usize, rng: &mut R) -> Result<Self> {
        let free = map.free_cells();
        for _ in 0..1000 {
            let source = free[rng.random_range(0..free.len())];
            let field = DistanceField::new(&map, source);
            let starts: Vec<Cell> = free
                .iter()
                .copied()
                .filter(|&c| field.get(c).is_some_and(|d| d >= Self::MIN_START_DISTANCE))
                .collect();
            if starts.is_empty() {
                continue;
            }
            let cell = starts[rng.random_range(0..starts.len())];
            let heading = Heading::from_index(rng.random_range(0..4));
            return EpisodeSpec::new(map, AgentPose { cell, heading }, source, category_id, max_steps);
        }
        Err(Error::Invalid(format!("map {} has no cell pair at distance >= 2", map.id())))
    }
}

#[derive(Clone, Debug)]
pub struct Observation<T> {
    pub depth: Array<T>,
    pub audio: BinauralSpectrogram<T>,
    pub prev_action: Option<Action>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub success: bool,
    pub geodesic_to_goal: f64,
}

#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub observation: Observation<T>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One line of a trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub episode: u64,
    pub step: usize,
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
}

/// One navigation episode. Randomness enters only through the rng handed to
/// [`Env::observe`] / [`Env::step`] (audio noise).
#[derive(Clone, Debug)]
pub struct Env<T> {
    spec: EpisodeSpec,
    category: SoundCategory,
    acoustic: AcousticConfig,
    view: ViewConfig,
    field: DistanceField,
    pose: AgentPose,
    steps: usize,
    done: bool,
    success: bool,
    path_length: u32,
    start_distance: u32,
    actions: Vec<Action>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Env<T> {
    pub fn new(spec: EpisodeSpec, category: SoundCategory, acoustic: AcousticConfig, view: ViewConfig) -> Result<Self> {
        if category.id != spec.category_id {
            return Err(Error::Invalid(format!(
                "episode wants category {}, got {}",
                spec.category_id, category.id
            )));
        }
        let field = DistanceField::new(&spec.map, spec.source);
        let start_distance = field
            .get(spec.start.cell)
            .ok_or_else(|| Error::Unreachable(format!("source {:?} unreachable", spec.source)))?;
        Ok(Env {
            pose: spec.start,
            spec,
            category,
            acoustic,
            view,
            field,
            steps: 0,
            done: false,
            success: false,
            path_length: 0,
            start_distance,
            actions: Vec::new(),
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn map(&self) -> &GridMap {
        &self.spec.map
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn geodesic(&self) -> u32 {
        self.field.get(self.pose.cell).expect("agent stays in the source's component")
    }

    pub fn source_geometry(&self) -> SourceGeometry {
        SourceGeometry::from_field(&self.spec.map, &self.field, &self.pose).expect("reachable by construction")
    }

    pub fn observe<R: Rng + ?Sized>(&self, prev_action: Option<Action>, rng: &mut R) -> Result<Observation<T>> {
        let depth = raycast_depth(
            &self.spec.map,
            &self.pose,
            self.view.depth_height,
            self.view.depth_width,
            self.view.max_range,
        );
        let audio = render_geometry(self.source_geometry(), &self.category, &self.acoustic, rng)?;
        Ok(Observation { depth, audio, prev_action })
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: Action, rng: &mut R) -> Result<StepResult<T>> {
        if self.done {
            return Err(Error::Invalid("step called on a finished episode".into()));
        }
        let before = self.geodesic();
        self.steps += 1;
        self.actions.push(action);
        let mut reward;
        match action {
            Action::Forward => {
                if let Some(next) = self.spec.map.neighbor(self.pose.cell, self.pose.heading) {
                    self.pose.cell = next;
                    self.path_length += 1;
                }
            }
            Action::Left => self.pose.heading = self.pose.heading.left(),
            Action::Right => self.pose.heading = self.pose.heading.right(),
            Action::Stop => {}
        }
        let after = self.geodesic();
        if action == Action::Stop {
            self.done = true;
            if self.pose.cell == self.spec.source {
                self.success = true;
                reward = SUCCESS_REWARD;
            } else {
                reward = -STEP_PENALTY;
            }
        } else {
            reward = before as f64 - after as f64 - STEP_PENALTY;
        }
        if self.steps >= self.spec.max_steps {
            self.done = true;
        }
        if !reward.is_finite() {
            reward = 0.0;
        }
        Ok(StepResult {
            observation: self.observe(Some(action), rng)?,
            reward,
            done: self.done,
            info: StepInfo { success: self.success, geodesic_to_goal: after as f64 },
        })
    }

    /// Summary of a finished episode.
    pub fn record(&self) -> Option<EpisodeRecord> {
        if !self.done {
            return None;
        }
        Some(EpisodeRecord {
            success: self.success,
            path_length: self.path_length,
            geodesic_optimum: self.start_distance,
            action_count: self.actions.len() as u32,
            optimal_action_count: optimal_action_count(&self.spec.map, self.spec.start, self.spec.source)
                .expect("reachable by construction"),
            category_id: self.spec.category_id,
            map_id: self.spec.map.id().to_string(),
        })
    }
}
