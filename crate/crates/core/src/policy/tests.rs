use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::{ModelConfig, PpoConfig, RunConfig};
use crate::encoders::{uniform_array, EncoderConfig};
use crate::numerics::{check_param_gradients, kink_margin, randomize_biases, Array, ParamSet, Tape};
use crate::world::Action;

fn tiny_model(seed: u64, n: usize, bda: bool) -> (ActorCritic, ParamSet<f64>) {
    let cfg = ModelConfig { channels: [3, 4, 4], feature_dim: 6, hidden: 5, aux_hidden: 7, bda, atp: true };
    let enc = EncoderConfig::new(cfg.channels, cfg.feature_dim, (12, 13), (8, 4)).unwrap();
    ActorCritic::new::<f64>(&cfg, &enc, n, seed).unwrap()
}

fn random_input(model: &ActorCritic, steps: usize, lanes: usize, rng: &mut ChaCha8Rng) -> SeqInput<f64> {
    let rows = steps * lanes;
    let (dh, dw) = model.encoder.depth_hw;
    let (af, at) = model.encoder.audio_hw;
    SeqInput {
        steps,
        lanes,
        depth: uniform_array::<f64, _>(&[rows, 1, dh, dw], 1.0, rng).map(f64::abs),
        audio: uniform_array::<f64, _>(&[rows, 2, af, at], 1.0, rng).map(f64::abs),
        h0: uniform_array(&[lanes, model.hidden()], 0.5, rng),
        reset: (0..rows).map(|_| rng.random_bool(0.2)).collect(),
    }
}

/// AuxNet forward with explicit loops, independent of the tape.
fn aux_direct(params: &ParamSet<f64>, aux: &AuxNet, s: &[f64], a: usize) -> Vec<f64> {
    let mut x = s.to_vec();
    x.extend((0..aux.num_actions).map(|j| if j == a { 1.0 } else { 0.0 }));
    let dense = |w: &Array<f64>, b: &Array<f64>, x: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|o| b.data()[o] + (0..x.len()).map(|i| w.data()[o * x.len() + i] * x[i]).sum::<f64>()).collect()
    };
    let h: Vec<f64> = dense(params.value(aux.fc1.w), params.value(aux.fc1.b), &x).into_iter().map(|v| v.max(0.0)).collect();
    dense(params.value(aux.fc2.w), params.value(aux.fc2.b), &h)
}

fn atp_direct(params: &ParamSet<f64>, aux: &AuxNet, batch: &AtpBatch<f64>) -> (f64, usize) {
    let s = batch.states.dim(1);
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..batch.lanes {
        for t in 0..batch.steps - 1 {
            let r = t * batch.lanes + b;
            if batch.dones[r] {
                continue;
            }
            let z = aux_direct(params, aux, &batch.states.data()[r * s..(r + 1) * s], batch.actions[r]);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[batch.actions[r + batch.lanes]];
            count += 1;
        }
    }
    (if count == 0 { 0.0 } else { total / count as f64 }, count)
}

fn random_batch(rng: &mut ChaCha8Rng, steps: usize, lanes: usize, s: usize, n: usize) -> AtpBatch<f64> {
    AtpBatch {
        steps,
        lanes,
        states: uniform_array(&[steps * lanes, s], 1.0, rng),
        actions: (0..steps * lanes).map(|_| rng.random_range(0..n)).collect(),
        dones: (0..steps * lanes).map(|_| rng.random_bool(0.25)).collect(),
    }
}

#[test]
fn forward_shapes_and_reset_masking() {
    let (model, params) = tiny_model(0, 4, true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random_input(&model, 3, 2, &mut rng);
    let mut tape = Tape::new(&params);
    let out = model.forward_sequence(&mut tape, &input).unwrap();
    assert_eq!(tape.shape(out.logits), &[6, 4]);
    assert_eq!(tape.shape(out.values), &[6, 1]);
    assert_eq!(tape.shape(out.states), &[6, 5]);

    // A reset row behaves as if the lane started from a zero state.
    let mut a = random_input(&model, 1, 2, &mut rng);
    a.reset = vec![true, false];
    let mut b = a.clone();
    b.reset = vec![false, false];
    for v in &mut b.h0.data_mut()[..5] {
        *v = 0.0;
    }
    let pa = policy_forward(&model, &params, a.depth.clone(), a.audio.clone(), a.h0.clone(), a.reset.clone()).unwrap();
    let pb = policy_forward(&model, &params, b.depth, b.audio, b.h0, b.reset).unwrap();
    assert_eq!(pa.state, pb.state);
    assert_eq!(pa.logits.shape(), &[2, 4]);
    assert_eq!(pa.value.len(), 2);

    let mut bad = random_input(&model, 2, 2, &mut rng);
    bad.reset.pop();
    let mut tape = Tape::new(&params);
    assert!(model.forward_sequence(&mut tape, &bad).is_err());
}

#[test]
fn aux_input_width_and_uniform_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamSet::<f64>::new();
    let aux = AuxNet::init(&mut p, 512, 4, 256, &mut rng);
    assert_eq!(p.value(aux.fc1.w).shape(), &[256, 516]);
    for q in p.iter_mut() {
        q.value.fill(0.0);
    }
    let batch = random_batch(&mut rng, 4, 2, 512, 4);
    let l = atp_loss(&p, &aux, &batch).unwrap();
    let expect = if atp_pairs(4, 2, &batch.dones).0.is_empty() { 0.0 } else { 4f64.ln() };
    assert!((l - expect).abs() < 1e-12);
    assert!(atp_predict(&p, &aux, &Array::zeros(&[2, 512]), &[0, 4]).is_err());
    assert!(atp_predict(&p, &aux, &Array::zeros(&[2, 511]), &[0, 1]).is_err());
}

#[test]
fn saturated_predictions_give_near_zero_loss() {
    // fc1 copies the one-hot block, fc2 maps current action a to a large logit
    // on (a + 1) mod N; actions follow that rule.
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamSet::<f64>::new();
    let aux = AuxNet::init(&mut p, 3, n, n, &mut rng);
    let mut w1 = Array::zeros(&[n, 3 + n]);
    for j in 0..n {
        w1.data_mut()[j * (3 + n) + 3 + j] = 1.0;
    }
    let mut w2 = Array::zeros(&[n, n]);
    for a in 0..n {
        w2.data_mut()[((a + 1) % n) * n + a] = 1e4;
    }
    p.get_mut(aux.fc1.w).value = w1;
    p.get_mut(aux.fc2.w).value = w2;
    p.get_mut(aux.fc1.b).value.fill(0.0);
    p.get_mut(aux.fc2.b).value.fill(0.0);
    let steps = 5;
    let actions: Vec<usize> = (0..steps * 2).map(|r| (r / 2) % n).collect();
    let batch = AtpBatch { steps, lanes: 2, states: uniform_array(&[steps * 2, 3], 1.0, &mut rng), actions, dones: vec![false; 10] };
    assert!(atp_loss(&p, &aux, &batch).unwrap() <= 1e-6);
    assert_eq!(atp_accuracy(&p, &aux, &batch).unwrap(), Some(1.0));
}

#[test]
fn atp_loss_matches_direct_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let n = if case % 2 == 0 { 4 } else { 81 };
        let mut p = ParamSet::<f64>::new();
        let aux = AuxNet::init(&mut p, 6, n, 9, &mut rng);
        randomize_biases(&mut p, -0.2, 0.2, &mut rng);
        let (steps, lanes) = (rng.random_range(2..=8), rng.random_range(1..=4));
        let batch = random_batch(&mut rng, steps, lanes, 6, n);
        let (expect, count) = atp_direct(&p, &aux, &batch);
        let got = atp_loss(&p, &aux, &batch).unwrap();
        assert!((got - expect).abs() <= 1e-10, "{got} vs {expect}");
        let masked = batch.dones[..(batch.steps - 1) * batch.lanes].iter().filter(|&&d| d).count();
        assert_eq!(count, (batch.steps - 1) * batch.lanes - masked);
        assert_eq!(atp_pairs(batch.steps, batch.lanes, &batch.dones).0.len(), count);
    }
    let mut p = ParamSet::<f64>::new();
    let aux = AuxNet::init(&mut p, 2, 4, 3, &mut rng);
    let all_done = AtpBatch { steps: 3, lanes: 2, states: Array::zeros(&[6, 2]), actions: vec![0; 6], dones: vec![true; 6] };
    assert_eq!(atp_loss(&p, &aux, &all_done).unwrap(), 0.0);
    let short = AtpBatch { steps: 1, lanes: 2, states: Array::zeros(&[2, 2]), actions: vec![0; 2], dones: vec![false; 2] };
    assert!(atp_loss(&p, &aux, &short).is_err());
}

#[test]
fn atp_accuracy_is_lane_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::<f64>::new();
    let aux = AuxNet::init(&mut p, 4, 4, 8, &mut rng);
    let (steps, lanes) = (6, 4);
    let batch = random_batch(&mut rng, steps, lanes, 4, 4);
    let perm = [2, 0, 3, 1];
    let remap = |r: usize| (r / lanes) * lanes + perm[r % lanes];
    let mut states = Array::zeros(&[steps * lanes, 4]);
    for r in 0..steps * lanes {
        states.data_mut()[r * 4..r * 4 + 4].copy_from_slice(batch.states.row(remap(r)));
    }
    let shuffled = AtpBatch {
        steps,
        lanes,
        states,
        actions: (0..steps * lanes).map(|r| batch.actions[remap(r)]).collect(),
        dones: (0..steps * lanes).map(|r| batch.dones[remap(r)]).collect(),
    };
    assert_eq!(atp_accuracy(&p, &aux, &batch).unwrap(), atp_accuracy(&p, &aux, &shuffled).unwrap());
}

/// `A_t = sum_k (g l)^k delta_{t+k}`, truncated at the first done.
fn gae_direct(r: &[f64], v: &[f64], d: &[bool], boot: &[f64], lanes: usize, g: f64, l: f64) -> Vec<f64> {
    let steps = r.len() / lanes;
    let mut out = vec![0.0; r.len()];
    for b in 0..lanes {
        for t in 0..steps {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in t..steps {
                let i = k * lanes + b;
                let next = if d[i] { 0.0 } else if k + 1 == steps { boot[b] } else { v[i + lanes] };
                acc += w * (r[i] + g * next - v[i]);
                if d[i] {
                    break;
                }
                w *= g * l;
            }
            out[t * lanes + b] = acc;
        }
    }
    out
}

#[test]
fn gae_cases_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (steps, lanes) = (7, 3);
    let n = steps * lanes;
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
    let boot: Vec<f64> = (0..lanes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (adv, ret) = compute_gae(&r, &v, &d, &boot, lanes, 0.0, 0.7);
    for i in 0..n {
        assert!((adv[i] - (r[i] - v[i])).abs() < 1e-15);
        assert!((ret[i] - r[i]).abs() < 1e-15);
    }
    let (adv, _) = compute_gae(&vec![0.0; n], &vec![0.0; n], &d, &vec![0.0; lanes], lanes, 0.99, 0.95);
    assert!(adv.iter().all(|&a| a == 0.0));
    for _ in 0..20 {
        let (g, l) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let (adv, _) = compute_gae(&r, &v, &d, &boot, lanes, g, l);
        let want = gae_direct(&r, &v, &d, &boot, lanes, g, l);
        for i in 0..n {
            assert!((adv[i] - want[i]).abs() < 1e-10);
        }
    }
}

proptest! {
    #[test]
    fn normalized_advantages_have_unit_moments(v in proptest::collection::vec(-100.0f64..100.0, 2..200)) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-3));
        let a = normalize_advantages(&v);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn entropy_stays_within_bounds(logits in proptest::collection::vec(-30.0f64..30.0, 4..40)) {
        let rows = logits.len() / 4;
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Array::new(&[rows, 4], logits[..rows * 4].to_vec()).unwrap());
        let e = tape.entropy(x).unwrap();
        let h = tape.value(e).item();
        prop_assert!(h >= -1e-12 && h <= 4f64.ln() + 1e-12);
    }
}

/// Composite objective of one minibatch, as the update builds it.
fn composite<'p>(
    tape: &mut Tape<'p, f64>,
    model: &ActorCritic,
    input: &SeqInput<f64>,
    actions: &[usize],
    dones: &[bool],
    lambda: f64,
) -> crate::Result<(crate::numerics::Var, crate::numerics::Var)> {
    let rows = input.steps * input.lanes;
    let out = model.forward_sequence(tape, input)?;
    let old: Vec<f64> = (0..rows).map(|i| -1.0 - 0.1 * (i % 3) as f64).collect();
    let adv: Vec<f64> = (0..rows).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let ret: Vec<f64> = (0..rows).map(|i| 0.3 * (i % 4) as f64).collect();
    let surr = tape.clipped_surrogate(out.logits, actions, &old, &adv, 0.2)?;
    let v = tape.mse(out.values, &ret)?;
    let e = tape.entropy(out.logits)?;
    let ppo = tape.weighted_sum(&[(surr, 1.0), (v, 0.5), (e, -0.01)])?;
    let aux = atp_loss_on_tape(tape, &model.aux, out.states, actions, dones, input.steps, input.lanes)?.unwrap();
    let total = tape.weighted_sum(&[(surr, 1.0), (v, 0.5), (e, -0.01), (aux.loss, lambda)])?;
    Ok((ppo, total))
}

#[test]
fn composite_objective_gradients_and_lambda_zero() {
    let mut checked = 0;
    for seed in 0..20u64 {
        let (model, mut params) = tiny_model(seed, 4, seed % 2 == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        randomize_biases(&mut params, 0.05, 0.3, &mut rng);
        let input = random_input(&model, 3, 2, &mut rng);
        let actions: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let dones = vec![false, true, false, false, false, false];
        {
            let mut tape = Tape::new(&params);
            let (ppo, total) = composite(&mut tape, &model, &input, &actions, &dones, 0.0).unwrap();
            assert_eq!(tape.value(ppo).item().to_bits(), tape.value(total).item().to_bits());
        }
        let build = |t: &mut Tape<f64>| Ok(composite(t, &model, &input, &actions, &dones, 0.1)?.1);
        if kink_margin(&params, build).unwrap() < 1e-4 {
            continue;
        }
        let r = check_param_gradients(&mut params, 1e-5, 30, seed, build).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        checked += 1;
        if checked == 3 {
            break;
        }
    }
    assert_eq!(checked, 3);
}

#[test]
fn adam_descends_a_convex_toy() {
    let mut p = ParamSet::<f64>::new();
    let id = p.add("x", Array::new(&[1], vec![2.0]).unwrap());
    let loss = |p: &ParamSet<f64>| (p.value(id).item() - 0.5).powi(2);
    let mut adam = Adam::new(&p, 1e-3, 1e-8);
    for _ in 0..5 {
        let before = loss(&p);
        let mut tape = Tape::new(&p);
        let x = tape.param(id);
        let l = tape.mse(x, &[0.5]).unwrap();
        let g = tape.backward(l).unwrap();
        p.zero_grad();
        p.accumulate(&g.params).unwrap();
        adam.apply(&mut p);
        assert!(loss(&p) < before);
    }
}

#[test]
fn sample_action_follows_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = [0.0f32, (3.0f32).ln(), f32::NEG_INFINITY, 0.0];
    let mut counts = [0usize; 4];
    for _ in 0..20_000 {
        counts[sample_action(&logits, &mut rng)] += 1;
    }
    assert_eq!(counts[2], 0);
    assert!((counts[1] as f64 / 20_000.0 - 0.6).abs() < 0.02);
}

#[test]
fn rng_state_round_trips() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    r.set_stream(5);
    let _: u64 = r.random();
    let mut back = rng_from_string(&rng_to_string(&r)).unwrap();
    assert_eq!(r.random::<u64>(), back.random::<u64>());
    assert!(rng_from_string("zz:1:2").is_err());
}

#[test]
fn trainer_smoke_update_and_split_audit() {
    let cfg = RunConfig::smoke();
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    let mut episodes = Vec::new();
    for _ in 0..3 {
        let (stats, eps) = t.train_update().unwrap();
        assert!(stats.total_loss.is_finite());
        assert!(stats.entropy >= 0.0 && stats.entropy <= 4f64.ln() + 1e-6);
        episodes.extend(eps);
    }
    assert_eq!(t.env_steps, 3 * cfg.steps_per_update());
    let train_ids: Vec<String> = cfg.split.train_maps.iter().map(|s| format!("map-{s}")).collect();
    for e in &episodes {
        assert!(train_ids.contains(&e.map_id));
        assert!(cfg.split.heard_categories.contains(&e.category_id));
    }
    let mut ppo = PpoConfig::default();
    ppo.minibatches = 9;
    assert!(ppo.validate().is_err());
    let _ = Action::COUNT;
}
