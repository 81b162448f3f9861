//! Rollout storage and advantage estimation.

use super::atp::AtpBatch;
use super::model::SeqInput;
use crate::error::{shape_err, Result};
use crate::numerics::{Array, Scalar};

/// `T x B` transitions, time-major (row `t * lanes + b`).
#[derive(Clone, Debug)]
pub struct RolloutBuffer<T> {
    pub steps: usize,
    pub lanes: usize,
    pub depth_hw: (usize, usize),
    pub audio_hw: (usize, usize),
    pub hidden: usize,
    pub depth: Vec<T>,
    pub audio: Vec<T>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<T>,
    pub values: Vec<T>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `s_t` seen when acting.
    pub states: Vec<T>,
    /// Masked hidden state entering step 0.
    pub h0: Array<T>,
    /// Value of the observation after the last step.
    pub bootstrap: Vec<T>,
}

/// Everything recorded for one `(t, b)`.
#[derive(Clone, Debug)]
pub struct Transition<'a, T> {
    pub depth: &'a [T],
    pub audio: &'a [T],
    pub action: usize,
    pub log_prob: T,
    pub value: T,
    pub reward: f64,
    pub done: bool,
    pub state: &'a [T],
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new(steps: usize, lanes: usize, depth_hw: (usize, usize), audio_hw: (usize, usize), hidden: usize) -> Self {
        let rows = steps * lanes;
        RolloutBuffer {
            steps,
            lanes,
            depth_hw,
            audio_hw,
            hidden,
            depth: vec![T::zero(); rows * depth_hw.0 * depth_hw.1],
            audio: vec![T::zero(); rows * 2 * audio_hw.0 * audio_hw.1],
            actions: vec![0; rows],
            log_probs: vec![T::zero(); rows],
            values: vec![T::zero(); rows],
            rewards: vec![0.0; rows],
            dones: vec![false; rows],
            states: vec![T::zero(); rows * hidden],
            h0: Array::zeros(&[lanes, hidden]),
            bootstrap: vec![T::zero(); lanes],
        }
    }

    pub fn rows(&self) -> usize {
        self.steps * self.lanes
    }

    fn depth_len(&self) -> usize {
        self.depth_hw.0 * self.depth_hw.1
    }

    fn audio_len(&self) -> usize {
        2 * self.audio_hw.0 * self.audio_hw.1
    }

    pub fn store(&mut self, t: usize, b: usize, tr: Transition<'_, T>) -> Result<()> {
        let (dl, al, m) = (self.depth_len(), self.audio_len(), self.hidden);
        if tr.depth.len() != dl || tr.audio.len() != al || tr.state.len() != m || t >= self.steps || b >= self.lanes {
            return Err(shape_err(
                "rollout_store",
                format!(
                    "step ({t},{b}) of {}x{}: depth {} / audio {} / state {} values, expected {dl} / {al} / {m}",
                    self.steps,
                    self.lanes,
                    tr.depth.len(),
                    tr.audio.len(),
                    tr.state.len()
                ),
            ));
        }
        let r = t * self.lanes + b;
        self.depth[r * dl..(r + 1) * dl].copy_from_slice(tr.depth);
        self.audio[r * al..(r + 1) * al].copy_from_slice(tr.audio);
        self.states[r * m..(r + 1) * m].copy_from_slice(tr.state);
        self.actions[r] = tr.action;
        self.log_probs[r] = tr.log_prob;
        self.values[r] = tr.value;
        self.rewards[r] = tr.reward;
        self.dones[r] = tr.done;
        Ok(())
    }

    /// Rows of the given lanes in time-major order.
    pub fn rows_for(&self, lanes: &[usize]) -> Vec<usize> {
        (0..self.steps).flat_map(|t| lanes.iter().map(move |&b| t * self.lanes + b)).collect()
    }

    /// Re-rollout input for a subset of lanes.
    pub fn seq_input(&self, lanes: &[usize]) -> Result<SeqInput<T>> {
        let rows = self.rows_for(lanes);
        let (dl, al, m) = (self.depth_len(), self.audio_len(), self.hidden);
        let gather = |src: &[T], w: usize| rows.iter().flat_map(|&r| src[r * w..(r + 1) * w].iter().copied()).collect::<Vec<T>>();
        let n = rows.len();
        let h0: Vec<T> = lanes.iter().flat_map(|&b| self.h0.row(b).iter().copied()).collect();
        let reset = rows.iter().map(|&r| r >= self.lanes && self.dones[r - self.lanes]).collect();
        Ok(SeqInput {
            steps: self.steps,
            lanes: lanes.len(),
            depth: Array::new(&[n, 1, self.depth_hw.0, self.depth_hw.1], gather(&self.depth, dl))?,
            audio: Array::new(&[n, 2, self.audio_hw.0, self.audio_hw.1], gather(&self.audio, al))?,
            h0: Array::new(&[lanes.len(), m], h0)?,
            reset,
        })
    }

    /// Acting-time states, for evaluating the transition head on this rollout.
    pub fn atp_batch(&self) -> Result<AtpBatch<T>> {
        Ok(AtpBatch {
            steps: self.steps,
            lanes: self.lanes,
            states: Array::new(&[self.rows(), self.hidden], self.states.clone())?,
            actions: self.actions.clone(),
            dones: self.dones.clone(),
        })
    }

    pub fn advantages(&self, gamma: f64, gae_lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let v: Vec<f64> = self.values.iter().map(|x| x.to_f64_lossy()).collect();
        let boot: Vec<f64> = self.bootstrap.iter().map(|x| x.to_f64_lossy()).collect();
        compute_gae(&self.rewards, &v, &self.dones, &boot, self.lanes, gamma, gae_lambda)
    }
}

/// Generalised advantage estimation over time-major rows. A done step does
/// not bootstrap. Returns raw `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    lanes: usize,
    gamma: f64,
    gae_lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let rows = rewards.len();
    let steps = rows / lanes;
    let mut adv = vec![0.0; rows];
    for b in 0..lanes {
        let mut running = 0.0;
        for t in (0..steps).rev() {
            let r = t * lanes + b;
            let cont = if dones[r] { 0.0 } else { 1.0 };
            let next = if t + 1 == steps { bootstrap[b] } else { values[r + lanes] };
            let delta = rewards[r] + gamma * next * cont - values[r];
            running = delta + gamma * gae_lambda * cont * running;
            adv[r] = running;
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shift to zero mean and scale to unit (population) standard deviation.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}
