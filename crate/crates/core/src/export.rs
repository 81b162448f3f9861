//! Plot-ready delimited exports: trajectories, action-transition matrices
//! and per-ear activation scatter; plus trajectory replay.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustics::AcousticConfig;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{transition_matrix, TransitionMatrix};
use crate::policy::{EpisodeHeader, EvalOutput, ScatterPoint, WorldBank};
use crate::world::{Action, AgentPose, Cell, Env, EpisodeSpec, TrajectoryStep};

pub const ACTION_LABELS: [&str; Action::COUNT] = ["forward", "left", "right", "stop"];

fn heading_char(step: &TrajectoryStep) -> char {
    step.heading.as_char()
}

/// One tab-separated line per step, preceded by a `#` line per episode with
/// its map, start and source; test maps follow as ASCII art.
pub fn trajectories_text(out: &EvalOutput, world: &WorldBank) -> String {
    let mut s = String::from("episode\tstep\tx\ty\theading\taction\treward\tdone\n");
    for h in &out.headers {
        let _ = writeln!(
            s,
            "# episode {} setting {} map {} start {},{},{} source {},{} category {}",
            h.episode,
            h.setting.as_str(),
            h.map_id,
            h.start_x,
            h.start_y,
            h.start_heading.as_char(),
            h.source_x,
            h.source_y,
            h.category_id
        );
        for t in out.trajectories.iter().filter(|t| t.episode == h.episode) {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.episode,
                t.step,
                t.x,
                t.y,
                heading_char(t),
                ACTION_LABELS[t.action.index()],
                t.reward,
                t.done
            );
        }
    }
    for m in &world.test_maps {
        s.push_str("#\n");
        for line in m.to_text().lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    s
}

pub fn transition_matrix_of(out: &EvalOutput) -> Result<TransitionMatrix> {
    transition_matrix(&out.action_sequences, Action::COUNT)
}

pub fn transition_text(m: &TransitionMatrix) -> String {
    m.to_delimited(&ACTION_LABELS)
}

pub fn scatter_text(points: &[ScatterPoint]) -> String {
    let mut s = String::from("bucket\tepisode\tstep\tmean_left\tmean_right\n");
    for p in points {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.9}\t{:.9}", p.bucket.as_str(), p.episode, p.step, p.mean_left, p.mean_right);
    }
    s
}

/// Re-run an episode's actions from its header and return the pose after
/// every action. Poses do not depend on audio noise.
pub fn replay_episode(cfg: &RunConfig, world: &WorldBank, header: &EpisodeHeader, actions: &[Action]) -> Result<Vec<AgentPose>> {
    let map = world
        .test_maps
        .get(header.map_index)
        .filter(|m| m.id() == header.map_id)
        .ok_or_else(|| Error::Invalid(format!("no test map {} at index {}", header.map_id, header.map_index)))?
        .clone();
    let start = AgentPose { cell: Cell::new(header.start_x, header.start_y), heading: header.start_heading };
    let spec = EpisodeSpec::new(map, start, Cell::new(header.source_x, header.source_y), header.category_id, cfg.world.max_steps)?;
    let category = world
        .categories
        .get(header.category_id)
        .ok_or_else(|| Error::Invalid(format!("unknown category {}", header.category_id)))?
        .clone();
    let quiet = AcousticConfig { noise_std: 0.0, ..cfg.acoustics.clone() };
    let mut env = Env::<f32>::new(spec, category, quiet, cfg.world.view.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut poses = Vec::with_capacity(actions.len());
    for &a in actions {
        env.step(a, &mut rng)?;
        poses.push(env.pose());
    }
    Ok(poses)
}
