//! Procedural gridworld: maps, kinematics, depth rendering, episodes, and
//! the BFS shortest-path oracle.

mod env;
mod map;
mod path;
mod raycast;

pub use env::{
    Action, Env, EpisodeSpec, Observation, StepInfo, StepResult, TrajectoryStep, ViewConfig, STEP_PENALTY,
    SUCCESS_REWARD,
};
pub use map::{flood_fill, generate_map, AgentPose, Cell, GridMap, Heading};
pub use path::{optimal_action_count, shortest_path, DistanceField, ShortestPath};
pub use raycast::{cast_ray, ray_offset, raycast_depth};
