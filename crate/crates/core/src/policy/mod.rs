//! Recurrent actor-critic trained with PPO plus the action-transition
//! auxiliary loss: `L_total = L_PPO + lambda * L_aux`.

mod atp;
mod eval;
mod model;
mod ppo;
mod rollout;
mod trainer;

pub use atp::{argmax, atp_accuracy, atp_loss, atp_loss_on_tape, atp_pairs, atp_predict, AtpBatch, AtpTerm};
pub use eval::{eval_episodes, evaluate, BearingBucket, EpisodeHeader, EvalOutput, ScatterPoint, Setting};
pub use model::{policy_forward, ActorCritic, AuxNet, Gru, PolicyStep, SeqInput, SeqVars};
pub use ppo::{ppo_update, Adam, UpdateStats};
pub use rollout::{compute_gae, normalize_advantages, RolloutBuffer, Transition};
pub use trainer::{
    checkpoint_name, load_policy, rng_from_string, rng_to_string, sample_action, train_run, TrainOutcome, Trainer,
    WorldBank,
};

#[cfg(test)]
mod tests;
