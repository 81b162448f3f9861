//! Recurrent actor-critic and the action-transition head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{relu_bound, uniform_array, AudioEncoder, Dense, EncoderConfig, VisualEncoder};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{one_hot, Array, ParamId, ParamSet, Scalar, Tape, Var};

/// Stream of the trunk initialiser.
const TRUNK_STREAM: u64 = 2;
/// Separate stream so the head's initial values never shift the trunk's.
const AUX_STREAM: u64 = 3;

/// Gated recurrent unit: input projection `in -> 3m` plus recurrent weights.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Dense,
    pub wh: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

/// Two-layer head predicting the next action from `[s_t; onehot(a_t)]`.
#[derive(Clone, Debug)]
pub struct AuxNet {
    pub fc1: Dense,
    pub fc2: Dense,
    pub state_dim: usize,
    pub num_actions: usize,
}

impl AuxNet {
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        state_dim: usize,
        num_actions: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Dense::init(params, "aux.fc1", state_dim + num_actions, hidden, relu_bound(state_dim + num_actions), rng);
        let fc2 = Dense::init(params, "aux.fc2", hidden, num_actions, 1.0 / (hidden as f64).sqrt(), rng);
        AuxNet { fc1, fc2, state_dim, num_actions }
    }

    /// Logits `[M,N]` for states `[M,S]` and current actions.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, states: Var, actions: &[usize]) -> Result<Var> {
        let s = tape.shape(states);
        if s.len() != 2 || s[1] != self.state_dim || s[0] != actions.len() {
            return Err(shape_err(
                "atp_predict",
                format!("states {s:?} vs {} actions and state size {}", actions.len(), self.state_dim),
            ));
        }
        let oh = tape.constant(one_hot(actions, self.num_actions)?);
        let x = tape.concat(&[states, oh], 1)?;
        let h = self.fc1.forward_relu(tape, x)?;
        self.fc2.forward(tape, h)
    }
}

/// One batch of per-step inputs laid out time-major: row `t * lanes + b`.
#[derive(Clone, Debug)]
pub struct SeqInput<T> {
    pub steps: usize,
    pub lanes: usize,
    pub depth: Array<T>,
    pub audio: Array<T>,
    /// Hidden state entering step 0, `[lanes, m]`, already masked.
    pub h0: Array<T>,
    /// Zero the hidden state before step `t` of lane `b`.
    pub reset: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct SeqVars {
    /// `s_t` for every row, `[steps*lanes, m]`.
    pub states: Var,
    pub logits: Var,
    /// `[steps*lanes, 1]`.
    pub values: Var,
    pub last_h: Var,
}

#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub config: ModelConfig,
    pub encoder: EncoderConfig,
    pub num_actions: usize,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub fuse: Dense,
    pub gru: Gru,
    pub actor: Dense,
    pub critic: Dense,
    pub aux: AuxNet,
}

impl ActorCritic {
    /// Build the architecture and its freshly initialised parameters.
    pub fn new<T: Scalar>(
        config: &ModelConfig,
        encoder: &EncoderConfig,
        num_actions: usize,
        seed: u64,
    ) -> Result<(Self, ParamSet<T>)> {
        if num_actions < 2 {
            return Err(Error::Config(format!("need at least 2 actions, got {num_actions}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRUNK_STREAM);
        let mut params = ParamSet::new();
        let visual = VisualEncoder::init(&mut params, encoder, &mut rng);
        let audio = AudioEncoder::init(&mut params, encoder, config.bda, &mut rng);
        let d = encoder.feature_dim;
        let m = config.hidden;
        let fuse = Dense::init(&mut params, "fuse", 2 * d, m, relu_bound(2 * d), &mut rng);
        let gb = 1.0 / (m as f64).sqrt();
        let gru = Gru {
            input: Dense::init(&mut params, "gru.input", m, 3 * m, gb, &mut rng),
            wh: params.add("gru.wh", uniform_array(&[3 * m, m], gb, &mut rng)),
            bh: params.add("gru.bh", Array::zeros(&[3 * m])),
            hidden: m,
        };
        let actor = Dense::init(&mut params, "actor", m, num_actions, 0.01 * gb, &mut rng);
        let critic = Dense::init(&mut params, "critic", m, 1, gb, &mut rng);
        let mut aux_rng = ChaCha8Rng::seed_from_u64(seed);
        aux_rng.set_stream(AUX_STREAM);
        let aux = AuxNet::init(&mut params, m, num_actions, config.aux_hidden, &mut aux_rng);
        let model = ActorCritic {
            config: config.clone(),
            encoder: encoder.clone(),
            num_actions,
            visual,
            audio,
            fuse,
            gru,
            actor,
            critic,
            aux,
        };
        Ok((model, params))
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    /// Recurrent forward pass over a time-major sequence batch.
    pub fn forward_sequence<T: Scalar>(&self, tape: &mut Tape<'_, T>, input: &SeqInput<T>) -> Result<SeqVars> {
        let (steps, lanes, m) = (input.steps, input.lanes, self.hidden());
        let rows = steps * lanes;
        let (dh, dw) = self.encoder.depth_hw;
        let (af, at) = self.encoder.audio_hw;
        if input.depth.shape() != [rows, 1, dh, dw]
            || input.audio.shape() != [rows, 2, af, at]
            || input.h0.shape() != [lanes, m]
            || input.reset.len() != rows
        {
            return Err(shape_err(
                "policy_forward",
                format!(
                    "{steps}x{lanes} rows: depth {:?}, audio {:?}, h0 {:?}, {} reset flags; expected depth [{rows},1,{dh},{dw}], audio [{rows},2,{af},{at}], h0 [{lanes},{m}]",
                    input.depth.shape(),
                    input.audio.shape(),
                    input.h0.shape(),
                    input.reset.len()
                ),
            ));
        }
        let depth = tape.constant(input.depth.clone());
        let audio = tape.constant(input.audio.clone());
        let fv = self.visual.forward(tape, depth)?;
        let fa = self.audio.forward(tape, audio)?;
        let both = tape.concat(&[fv, fa], 1)?;
        let fused = self.fuse.forward_relu(tape, both)?;
        let gx_all = self.gru.input.forward(tape, fused)?;
        let (wh, bh) = (tape.param(self.gru.wh), tape.param(self.gru.bh));
        let mut h = tape.constant(input.h0.clone());
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let flags = &input.reset[t * lanes..(t + 1) * lanes];
            if flags.iter().any(|&r| r) {
                let keep: Vec<T> = flags.iter().map(|&r| if r { T::zero() } else { T::one() }).collect();
                h = tape.row_scale(h, &keep)?;
            }
            let gx = if steps == 1 {
                gx_all
            } else {
                let rows: Vec<usize> = (t * lanes..(t + 1) * lanes).collect();
                tape.select_rows(gx_all, &rows)?
            };
            h = tape.gru_step(gx, h, wh, bh)?;
            states.push(h);
        }
        let all = if steps == 1 { states[0] } else { tape.concat(&states, 0)? };
        let logits = self.actor.forward(tape, all)?;
        let values = self.critic.forward(tape, all)?;
        Ok(SeqVars { states: all, logits, values, last_h: h })
    }

    /// Parameters whose names or shapes differ from `other`, as readable lines.
    pub fn shape_diff<T: Scalar, U: Scalar>(mine: &ParamSet<T>, other: &ParamSet<U>) -> Vec<String> {
        let a: Vec<_> = mine.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        let b: Vec<_> = other.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        let mut out = Vec::new();
        for (name, shape) in &a {
            match b.iter().find(|(n, _)| n == name) {
                None => out.push(format!("{name}: {shape:?} vs missing")),
                Some((_, s)) if s != shape => out.push(format!("{name}: {shape:?} vs {s:?}")),
                _ => {}
            }
        }
        for (name, shape) in &b {
            if !a.iter().any(|(n, _)| n == name) {
                out.push(format!("{name}: missing vs {shape:?}"));
            }
        }
        out
    }
}

/// Outputs of a single-step policy evaluation.
#[derive(Clone, Debug)]
pub struct PolicyStep<T> {
    pub logits: Array<T>,
    pub value: Vec<T>,
    pub state: Array<T>,
}

/// One step for `lanes` environments; `h_prev` rows flagged in `reset` are
/// zeroed first. `s_t` and the new hidden state coincide.
pub fn policy_forward<T: Scalar>(
    model: &ActorCritic,
    params: &ParamSet<T>,
    depth: Array<T>,
    audio: Array<T>,
    h_prev: Array<T>,
    reset: Vec<bool>,
) -> Result<PolicyStep<T>> {
    let lanes = h_prev.dim(0);
    let input = SeqInput { steps: 1, lanes, depth, audio, h0: h_prev, reset };
    let mut tape = Tape::new(params);
    let v = model.forward_sequence(&mut tape, &input)?;
    Ok(PolicyStep {
        logits: tape.value(v.logits).clone(),
        value: tape.value(v.values).data().to_vec(),
        state: tape.value(v.states).clone(),
    })
}
