//! Adam and the clipped PPO update with the auxiliary transition loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::atp::atp_loss_on_tape;
use super::model::ActorCritic;
use super::rollout::{normalize_advantages, RolloutBuffer};
use crate::config::PpoConfig;
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamSet, Scalar, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.value.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps, step: 0, m: zeros(), v: zeros() }
    }

    /// Apply one step from the gradients stored in `params`.
    pub fn apply(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powf(self.step as f64));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powf(self.step as f64));
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (lr, eps) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (pv, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..pv.len() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (T::one() - b1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (T::one() - b2) * g[i] * g[i];
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                pv[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// One line of the training metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: u64,
    pub env_steps: u64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub atp_accuracy: Option<f64>,
    pub atp_pairs: usize,
    pub grad_norm: f64,
    pub episodes: usize,
    pub mean_return: Option<f64>,
}

/// Contiguous near-equal chunks.
fn split_lanes(lanes: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = lanes.len();
    (0..parts).map(|i| lanes[i * n / parts..(i + 1) * n / parts].to_vec()).filter(|c| !c.is_empty()).collect()
}

/// Epochs of minibatch updates over whole lane sequences. Minibatch order is
/// drawn from `rng`. The auxiliary term is only recorded when `atp` is true.
pub fn ppo_update<T: Scalar, R: Rng + ?Sized>(
    model: &ActorCritic,
    params: &mut ParamSet<T>,
    adam: &mut Adam<T>,
    buffer: &RolloutBuffer<T>,
    cfg: &PpoConfig,
    atp: bool,
    rng: &mut R,
) -> Result<UpdateStats> {
    let (adv_raw, returns) = buffer.advantages(cfg.gamma, cfg.gae_lambda);
    let adv = normalize_advantages(&adv_raw);
    let cast = |v: &[f64], rows: &[usize]| rows.iter().map(|&r| T::from_f64_lossy(v[r])).collect::<Vec<T>>();
    let mut stats = UpdateStats::default();
    let (mut n, mut correct) = (0usize, 0usize);
    let mut order: Vec<usize> = (0..buffer.lanes).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb_index, mb) in split_lanes(&order, cfg.minibatches).into_iter().enumerate() {
            let rows = buffer.rows_for(&mb);
            let input = buffer.seq_input(&mb)?;
            let actions: Vec<usize> = rows.iter().map(|&r| buffer.actions[r]).collect();
            let dones: Vec<bool> = rows.iter().map(|&r| buffer.dones[r]).collect();
            let old: Vec<T> = rows.iter().map(|&r| buffer.log_probs[r]).collect();
            let mut tape = Tape::new(&*params);
            let out = model.forward_sequence(&mut tape, &input)?;
            let surr = tape.clipped_surrogate(out.logits, &actions, &old, &cast(&adv, &rows), T::from_f64_lossy(cfg.clip))?;
            let vloss = tape.mse(out.values, &cast(&returns, &rows))?;
            let ent = tape.entropy(out.logits)?;
            let mut terms = vec![
                (surr, T::one()),
                (vloss, T::from_f64_lossy(cfg.value_coef)),
                (ent, -T::from_f64_lossy(cfg.entropy_coef)),
            ];
            let mut aux_value = 0.0;
            if atp {
                if let Some(term) = atp_loss_on_tape(&mut tape, &model.aux, out.states, &actions, &dones, buffer.steps, mb.len())? {
                    terms.push((term.loss, T::from_f64_lossy(cfg.aux_weight)));
                    aux_value = tape.value(term.loss).item().to_f64_lossy();
                    n += term.pairs;
                    correct += term.correct;
                }
            }
            let total = tape.weighted_sum(&terms)?;
            let parts = [surr, vloss, ent, total].map(|v| tape.value(v).item().to_f64_lossy());
            let grads = tape.backward(total).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!(
                    "update aborted at epoch {epoch}, minibatch {mb_index}: policy {} value {} entropy {} aux {aux_value} total {}",
                    parts[0], parts[1], parts[2], parts[3]
                )),
                other => other,
            })?;
            params.zero_grad();
            params.accumulate(&grads.params)?;
            let norm = params.grad_norm().to_f64_lossy();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm {norm} at epoch {epoch}, minibatch {mb_index}")));
            }
            if norm > cfg.max_grad_norm {
                params.scale_grads(T::from_f64_lossy(cfg.max_grad_norm / norm));
            }
            adam.apply(params);
            stats.policy_loss += parts[0];
            stats.value_loss += parts[1];
            stats.entropy += parts[2];
            stats.total_loss += parts[3];
            stats.aux_loss += aux_value;
            stats.grad_norm += norm;
        }
    }
    let k = (cfg.epochs * split_lanes(&order, cfg.minibatches).len()) as f64;
    for f in [
        &mut stats.policy_loss,
        &mut stats.value_loss,
        &mut stats.entropy,
        &mut stats.total_loss,
        &mut stats.aux_loss,
        &mut stats.grad_norm,
    ] {
        *f /= k;
    }
    stats.atp_pairs = n / cfg.epochs;
    stats.atp_accuracy = (n > 0).then(|| correct as f64 / n as f64);
    Ok(stats)
}
