//! Action-transition prediction: from `(s_t, a_t)` predict `a_{t+1}` of the
//! same lane, skipping pairs that straddle an episode boundary.

use super::model::AuxNet;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Array, ParamSet, Scalar, Tape, Var};

/// States and actions of a rollout, time-major (row `t * lanes + b`).
#[derive(Clone, Debug)]
pub struct AtpBatch<T> {
    pub steps: usize,
    pub lanes: usize,
    pub states: Array<T>,
    pub actions: Vec<usize>,
    /// `dones[t*lanes+b]`: the episode of lane `b` ended with action `t`.
    pub dones: Vec<bool>,
}

impl<T: Scalar> AtpBatch<T> {
    fn check(&self) -> Result<()> {
        let rows = self.steps * self.lanes;
        if self.steps < 2 {
            return Err(Error::Invalid(format!("action-transition loss needs T >= 2, got {}", self.steps)));
        }
        if self.states.ndim() != 2 || self.states.dim(0) != rows || self.actions.len() != rows || self.dones.len() != rows {
            return Err(shape_err(
                "atp_loss",
                format!(
                    "{}x{} rollout with states {:?}, {} actions, {} dones",
                    self.steps,
                    self.lanes,
                    self.states.shape(),
                    self.actions.len(),
                    self.dones.len()
                ),
            ));
        }
        Ok(())
    }
}

/// `(source rows, target rows)` of every included transition, lane-major
/// within each step.
pub fn atp_pairs(steps: usize, lanes: usize, dones: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for t in 0..steps.saturating_sub(1) {
        for b in 0..lanes {
            let r = t * lanes + b;
            if !dones[r] {
                src.push(r);
                dst.push(r + lanes);
            }
        }
    }
    (src, dst)
}

#[derive(Clone, Copy, Debug)]
pub struct AtpTerm {
    pub loss: Var,
    pub pairs: usize,
    pub correct: usize,
}

/// Record the mean cross-entropy over included pairs; `None` if every pair is
/// masked.
pub fn atp_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    aux: &AuxNet,
    states: Var,
    actions: &[usize],
    dones: &[bool],
    steps: usize,
    lanes: usize,
) -> Result<Option<AtpTerm>> {
    let (src, dst) = atp_pairs(steps, lanes, dones);
    if src.is_empty() {
        return Ok(None);
    }
    let s = tape.select_rows(states, &src)?;
    let a: Vec<usize> = src.iter().map(|&r| actions[r]).collect();
    let target: Vec<usize> = dst.iter().map(|&r| actions[r]).collect();
    let logits = aux.forward(tape, s, &a)?;
    let correct = count_correct(tape.value(logits), &target);
    let loss = tape.cross_entropy(logits, &target)?;
    Ok(Some(AtpTerm { loss, pairs: src.len(), correct }))
}

fn count_correct<T: Scalar>(logits: &Array<T>, target: &[usize]) -> usize {
    let n = logits.dim(1);
    target.iter().enumerate().filter(|&(i, &y)| argmax(&logits.data()[i * n..(i + 1) * n]) == y).count()
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Raw next-action logits for `s_t: [M,S]` and `a_t`.
pub fn atp_predict<T: Scalar>(params: &ParamSet<T>, aux: &AuxNet, s_t: &Array<T>, a_t: &[usize]) -> Result<Array<T>> {
    let mut tape = Tape::new(params);
    let s = tape.constant(s_t.clone());
    let l = aux.forward(&mut tape, s, a_t)?;
    Ok(tape.value(l).clone())
}

/// Mean next-action cross-entropy over the batch, 0 when every pair is masked.
pub fn atp_loss<T: Scalar>(params: &ParamSet<T>, aux: &AuxNet, batch: &AtpBatch<T>) -> Result<T> {
    batch.check()?;
    let mut tape = Tape::new(params);
    let s = tape.constant(batch.states.clone());
    Ok(match atp_loss_on_tape(&mut tape, aux, s, &batch.actions, &batch.dones, batch.steps, batch.lanes)? {
        Some(term) => tape.value(term.loss).item(),
        None => T::zero(),
    })
}

/// Fraction of included pairs whose argmax prediction is the executed next
/// action; `None` without pairs.
pub fn atp_accuracy<T: Scalar>(params: &ParamSet<T>, aux: &AuxNet, batch: &AtpBatch<T>) -> Result<Option<f64>> {
    batch.check()?;
    let mut tape = Tape::new(params);
    let s = tape.constant(batch.states.clone());
    Ok(atp_loss_on_tape(&mut tape, aux, s, &batch.actions, &batch.dones, batch.steps, batch.lanes)?
        .map(|t| t.correct as f64 / t.pairs as f64))
}
