//! Finite-difference gradient checks of every differentiable component at
//! 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::encoders::{bda_fuse_on_tape, uniform_array, AudioEncoder, BdaGate, ConvStack, Dense, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{check_param_gradients, kink_margin, randomize_biases, Array, ParamSet, Tape, Var};
use crate::policy::{atp_loss_on_tape, ActorCritic, AuxNet, SeqInput};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Instances whose nearest ReLU/abs input is closer than this are redrawn.
pub const MIN_KINK_MARGIN: f64 = 1e-4;
/// Coordinates checked per parameter tensor.
pub const MAX_COORDS: usize = 40;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub component: &'static str,
    pub instances: usize,
    pub rejected: usize,
    pub coords_checked: usize,
    /// Relative error with denominator floor 1e-8.
    pub max_rel_error: f64,
    /// Relative error with denominator floor [`ROUNDING_FLOOR`]; the pass criterion.
    pub max_floored_error: f64,
    /// Parameter, flat index, analytic, numeric at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub const COMPONENTS: [&str; 6] = ["conv", "linear", "gru", "bda", "atp_loss", "composite"];

type Instance = Box<dyn Fn(&mut ParamSet<f64>, &mut ChaCha8Rng) -> Result<Box<dyn Fn(&mut Tape<f64>) -> Result<Var>>>>;

fn squared_sum(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let sq = t.mul(x, x)?;
    Ok(t.sum(sq))
}

fn instance(component: &str) -> Result<Instance> {
    Ok(match component {
        "conv" => Box::new(|p, rng| {
            let cfg = EncoderConfig::new([3, 4, 3], 5, (20, 20), (16, 8))?;
            let stack = ConvStack::init(p, "conv", 1, &cfg.visual_plan, rng);
            randomize_biases(p, 0.05, 0.3, rng);
            let x: Array<f64> = uniform_array(&[2, 1, 20, 20], 1.0, rng);
            Ok(Box::new(move |t: &mut Tape<f64>| {
                let c = t.constant(x.clone());
                let y = stack.forward(t, c)?;
                squared_sum(t, y)
            }))
        }),
        "linear" => Box::new(|p, rng| {
            let fc1 = Dense::init(p, "fc1", 7, 6, 0.5, rng);
            let fc2 = Dense::init(p, "fc2", 6, 4, 0.5, rng);
            randomize_biases(p, 0.05, 0.3, rng);
            let x: Array<f64> = uniform_array(&[3, 7], 1.0, rng);
            Ok(Box::new(move |t: &mut Tape<f64>| {
                let c = t.constant(x.clone());
                let h = fc1.forward_relu(t, c)?;
                let y = fc2.forward(t, h)?;
                squared_sum(t, y)
            }))
        }),
        "gru" => Box::new(|p, rng| {
            let m = 4;
            let input = Dense::init(p, "gru.input", 5, 3 * m, 0.5, rng);
            let wh = p.add("gru.wh", uniform_array(&[3 * m, m], 0.5, rng));
            let bh = p.add("gru.bh", uniform_array(&[3 * m], 0.3, rng));
            let xs: Vec<Array<f64>> = (0..3).map(|_| uniform_array(&[2, 5], 1.0, rng)).collect();
            let h0: Array<f64> = uniform_array(&[2, m], 0.5, rng);
            Ok(Box::new(move |t: &mut Tape<f64>| {
                let (w, b) = (t.param(wh), t.param(bh));
                let mut h = t.constant(h0.clone());
                for x in &xs {
                    let c = t.constant(x.clone());
                    let gx = input.forward(t, c)?;
                    h = t.gru_step(gx, h, w, b)?;
                }
                squared_sum(t, h)
            }))
        }),
        "bda" => Box::new(|p, rng| {
            let gate = BdaGate::init(p, "gate", 3, rng);
            let cfg = EncoderConfig::new([3, 4, 3], 5, (20, 20), (16, 8))?;
            let audio = AudioEncoder::init(p, &cfg, true, rng);
            randomize_biases(p, 0.05, 0.3, rng);
            let l: Array<f64> = uniform_array(&[2, 3, 2, 2], 1.0, rng);
            let r: Array<f64> = uniform_array(&[2, 3, 2, 2], 1.0, rng);
            let spec: Array<f64> = uniform_array(&[2, 2, 16, 8], 1.0, rng);
            Ok(Box::new(move |t: &mut Tape<f64>| {
                let (fl, fr) = (t.constant(l.clone()), t.constant(r.clone()));
                let fused = bda_fuse_on_tape(t, &gate, fl, fr)?;
                let a = squared_sum(t, fused.f_a_map)?;
                let s = t.constant(spec.clone());
                let enc = audio.forward(t, s)?;
                let b = squared_sum(t, enc)?;
                t.add(a, b)
            }))
        }),
        "atp_loss" => Box::new(|p, rng| {
            let aux = AuxNet::init(p, 6, 4, 8, rng);
            randomize_biases(p, 0.05, 0.3, rng);
            let (steps, lanes) = (4, 3);
            let rows = steps * lanes;
            let states: Array<f64> = uniform_array(&[rows, 6], 1.0, rng);
            let actions: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
            let mut dones: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.2)).collect();
            dones[0] = false;
            Ok(Box::new(move |t: &mut Tape<f64>| {
                let s = t.constant(states.clone());
                let term = atp_loss_on_tape(t, &aux, s, &actions, &dones, steps, lanes)?
                    .ok_or_else(|| Error::Invalid("instance has no transition pairs".into()))?;
                Ok(term.loss)
            }))
        }),
        "composite" => Box::new(|p, rng| {
            let cfg = ModelConfig { channels: [3, 4, 4], feature_dim: 6, hidden: 5, aux_hidden: 7, bda: rng.random_bool(0.5), atp: true };
            let enc = EncoderConfig::new(cfg.channels, cfg.feature_dim, (12, 13), (8, 4))?;
            let (model, fresh) = ActorCritic::new::<f64>(&cfg, &enc, 4, rng.random())?;
            *p = fresh;
            randomize_biases(p, 0.05, 0.3, rng);
            let actor = p.get_mut(model.actor.w);
            actor.value = uniform_array(actor.value.shape(), 0.5, rng);
            let (steps, lanes) = (3, 2);
            let rows = steps * lanes;
            let input = SeqInput {
                steps,
                lanes,
                depth: uniform_array::<f64, _>(&[rows, 1, 12, 13], 1.0, rng).map(f64::abs),
                audio: uniform_array::<f64, _>(&[rows, 2, 8, 4], 1.0, rng).map(f64::abs),
                h0: uniform_array(&[lanes, 5], 0.5, rng),
                reset: (0..rows).map(|_| rng.random_bool(0.2)).collect(),
            };
            let actions: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
            let dones: Vec<bool> = (0..rows).map(|r| r == 1).collect();
            let old: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..-0.5)).collect();
            let adv: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ret: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok(Box::new(move |t: &mut Tape<f64>| {
                let out = model.forward_sequence(t, &input)?;
                let surr = t.clipped_surrogate(out.logits, &actions, &old, &adv, 0.2)?;
                let v = t.mse(out.values, &ret)?;
                let e = t.entropy(out.logits)?;
                let aux = atp_loss_on_tape(t, &model.aux, out.states, &actions, &dones, steps, lanes)?
                    .ok_or_else(|| Error::Invalid("instance has no transition pairs".into()))?;
                t.weighted_sum(&[(surr, 1.0), (v, 0.5), (e, -0.01), (aux.loss, 0.1)])
            }))
        }),
        other => return Err(Error::Config(format!("unknown gradcheck component {other:?}; expected one of {COMPONENTS:?}"))),
    })
}

/// Check `instances` random instances of one component, redrawing any that
/// sit too close to a kink.
pub fn check_component(component: &str, instances: usize, seed: u64) -> Result<ComponentReport> {
    let make = instance(component)?;
    let name = COMPONENTS.iter().find(|c| **c == component).copied().expect("validated above");
    let mut report = ComponentReport {
        component: name,
        instances: 0,
        rejected: 0,
        coords_checked: 0,
        max_rel_error: 0.0,
        max_floored_error: 0.0,
        worst: None,
    };
    let max_draws = 50 * instances.max(1);
    for draw in 0..max_draws as u64 {
        if report.instances == instances {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(draw);
        let mut params = ParamSet::<f64>::new();
        let build = make(&mut params, &mut rng)?;
        if kink_margin(&params, &build)? < MIN_KINK_MARGIN {
            report.rejected += 1;
            continue;
        }
        let r = check_param_gradients(&mut params, FD_EPS, MAX_COORDS, draw, &build)?;
        report.instances += 1;
        report.coords_checked += r.coords_checked;
        report.max_floored_error = report.max_floored_error.max(r.max_floored_error);
        if r.max_rel_error >= report.max_rel_error {
            report.max_rel_error = r.max_rel_error;
            report.worst = r.worst;
        }
    }
    if report.instances < instances {
        return Err(Error::Invalid(format!(
            "{component}: only {} of {instances} instances cleared the kink margin",
            report.instances
        )));
    }
    Ok(report)
}

impl ComponentReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_floored_error <= tolerance
    }
}

pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<ComponentReport>> {
    COMPONENTS.iter().map(|c| check_component(c, instances, seed)).collect()
}
