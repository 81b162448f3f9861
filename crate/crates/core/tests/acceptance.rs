//! Acceptance suite: one `criterion N: PASS|FAIL|SKIP` line per criterion.
//!
//! Criteria 7 and 8 need the full training protocol (4 arms x 5 seeds x 500k
//! steps). They run only with `BDATP_FULL_PROTOCOL=1`; alternatively
//! `BDATP_REPORT=path/to/report.json` grades an existing ablation report and
//! prints the verdict as information without affecting the exit status.

use std::collections::VecDeque;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use bdatp_core::acoustics::{make_category_set, render_binaural, AcousticConfig, BinauralSpectrogram};
use bdatp_core::bench::{run_experiment, AblationArm, ResultTable};
use bdatp_core::config::RunConfig;
use bdatp_core::diagnostics::gradcheck_suite;
use bdatp_core::encoders::{bda_fuse, encode_audio_channels, uniform_array, AudioEncoder, BdaGate, ChannelFeatureMaps, EncoderConfig};
use bdatp_core::metrics::{sna, spl, transition_matrix, EpisodeRecord};
use bdatp_core::numerics::{Array, Checkpoint, ParamSet, Scalar, Tape};
use bdatp_core::policy::{atp_loss, atp_loss_on_tape, train_run, AtpBatch, AuxNet};
use bdatp_core::world::{generate_map, optimal_action_count, shortest_path, AgentPose, Cell, GridMap, Heading};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let reports = match gradcheck_suite(5, 0) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("suite error: {e}")),
    };
    let secs = started.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_floored_error).fold(0.0, f64::max);
    let per: Vec<String> = reports.iter().map(|r| format!("{}={:.1e}", r.component, r.max_floored_error)).collect();
    verdict(
        reports.iter().all(|r| r.passes(1e-4) && r.instances >= 5) && secs < 120.0,
        format!("max rel err {worst:.2e} <= 1e-4 over 5 instances each [{}], {secs:.1}s < 120s", per.join(" ")),
    )
}

// ---------------------------------------------------------------- 2

struct BdaCounts {
    trials: usize,
    zero_violations: usize,
    sum_violations: usize,
    bound_violations: usize,
}

fn bda_trial<T: Scalar>(rng: &mut ChaCha8Rng, counts: &mut BdaCounts) {
    let b = rng.random_range(1..=3);
    let c = rng.random_range(1..=4);
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut params = ParamSet::<T>::new();
    let gate = BdaGate::init(&mut params, "bda", c, rng);
    let gw = gate.w;
    let gb = gate.b;
    params.get_mut(gw).value = uniform_array(&[c, 2 * c, 1, 1], 3.0, rng);
    params.get_mut(gb).value = uniform_array(&[c], 1.0, rng);
    let shape = [b, c, h, w];
    // post-ReLU maps: nonnegative with some exact zeros
    let relu_map = |rng: &mut ChaCha8Rng| uniform_array::<T, _>(&shape, 1.0, rng).map(|v| if v < T::zero() { T::zero() } else { v });
    let f_al = relu_map(rng);
    let identical = rng.random_bool(0.3);
    let f_ar = if identical { f_al.clone() } else { relu_map(rng) };
    let (fused, inter) = bda_fuse(&params, &gate, &ChannelFeatureMaps { f_al: f_al.clone(), f_ar: f_ar.clone() }).unwrap();
    counts.trials += 1;
    if identical && fused.data().iter().any(|v| v.to_f64_lossy().to_bits() != 0) {
        counts.zero_violations += 1;
    }
    for i in 0..fused.len() {
        let d = inter.diff.data()[i];
        if inter.w_l.data()[i] + inter.w_r.data()[i] != d {
            counts.sum_violations += 1;
        }
        let (l, r) = (f_al.data()[i].to_f64_lossy(), f_ar.data()[i].to_f64_lossy());
        let d = d.to_f64_lossy();
        let (lo, hi) = (d * l.min(r), d * l.max(r));
        let tol = 8.0 * T::epsilon().to_f64_lossy() * hi.abs().max(lo.abs());
        let v = fused.data()[i].to_f64_lossy();
        if v < lo - tol || v > hi + tol {
            counts.bound_violations += 1;
        }
    }
}

/// Identical ear channels through the shared-weight encoder fuse to exact zeros.
fn bda_identical_spectrogram(rng: &mut ChaCha8Rng, counts: &mut BdaCounts) {
    let cfg = EncoderConfig::new([4, 4, 4], 8, (20, 20), (16, 8)).unwrap();
    let mut params = ParamSet::<f32>::new();
    let enc = AudioEncoder::init(&mut params, &cfg, true, rng);
    let AudioEncoder::Bda { stack, gate, .. } = &enc else { unreachable!() };
    let one: Array<f32> = uniform_array::<f32, _>(&[1, 1, 16, 8], 1.0, rng).map(f32::abs);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let spec = Array::new(&[1, 2, 16, 8], data).unwrap();
    let maps = encode_audio_channels(&params, stack, &spec).unwrap();
    let (fused, _) = bda_fuse(&params, gate, &maps).unwrap();
    counts.trials += 1;
    if maps.f_al != maps.f_ar || fused.data().iter().any(|v| v.to_bits() != 0) {
        counts.zero_violations += 1;
    }
}

fn bda_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = BdaCounts { trials: 0, zero_violations: 0, sum_violations: 0, bound_violations: 0 };
    for i in 0..1000 {
        match i % 4 {
            0 => bda_trial::<f32>(&mut rng, &mut counts),
            3 if i % 8 == 3 => bda_identical_spectrogram(&mut rng, &mut counts),
            _ => bda_trial::<f64>(&mut rng, &mut counts),
        }
    }
    let v = counts.zero_violations + counts.sum_violations + counts.bound_violations;
    verdict(
        v == 0,
        format!(
            "{} inputs: identical->zero violations {}, w_l+w_r==diff violations {}, bound violations {}",
            counts.trials, counts.zero_violations, counts.sum_violations, counts.bound_violations
        ),
    )
}

// ---------------------------------------------------------------- 3

fn aux_logits(params: &ParamSet<f64>, aux: &AuxNet, s: &[f64], a: usize) -> Vec<f64> {
    let mut x = s.to_vec();
    x.extend((0..aux.num_actions).map(|j| if j == a { 1.0 } else { 0.0 }));
    let dense = |w: &Array<f64>, b: &Array<f64>, x: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|o| b.data()[o] + (0..x.len()).map(|i| w.data()[o * x.len() + i] * x[i]).sum::<f64>()).collect()
    };
    let h: Vec<f64> = dense(params.value(aux.fc1.w), params.value(aux.fc1.b), &x).into_iter().map(|v| v.max(0.0)).collect();
    dense(params.value(aux.fc2.w), params.value(aux.fc2.b), &h)
}

fn atp_oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut count_mismatch = 0;
    for case in 0..100 {
        let steps = rng.random_range(2..=8);
        let lanes = rng.random_range(1..=4);
        let n = if case % 2 == 0 { 4 } else { 81 };
        let sdim = rng.random_range(2..=8);
        let mut params = ParamSet::<f64>::new();
        let aux = AuxNet::init(&mut params, sdim, n, rng.random_range(3..=10), &mut rng);
        let rows = steps * lanes;
        let batch = AtpBatch {
            steps,
            lanes,
            states: uniform_array(&[rows, sdim], 1.0, &mut rng),
            actions: (0..rows).map(|_| rng.random_range(0..n)).collect(),
            dones: (0..rows).map(|_| case % 3 != 0 && rng.random_bool(0.25)).collect(),
        };
        let (mut total, mut pairs) = (0.0, 0usize);
        for b in 0..lanes {
            for t in 0..steps - 1 {
                let r = t * lanes + b;
                if batch.dones[r] {
                    continue;
                }
                let z = aux_logits(&params, &aux, &batch.states.data()[r * sdim..(r + 1) * sdim], batch.actions[r]);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                total += m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[batch.actions[r + lanes]];
                pairs += 1;
            }
        }
        let oracle = if pairs == 0 { 0.0 } else { total / pairs as f64 };
        let got = atp_loss(&params, &aux, &batch).unwrap();
        worst = worst.max((got - oracle).abs());
        let mut tape = Tape::new(&params);
        let s = tape.constant(batch.states.clone());
        let term = atp_loss_on_tape(&mut tape, &aux, s, &batch.actions, &batch.dones, steps, lanes).unwrap();
        let counted = term.map_or(0, |t| t.pairs);
        let expect = if case % 3 == 0 { (steps - 1) * lanes } else { pairs };
        if counted != pairs || pairs != expect {
            count_mismatch += 1;
        }
    }
    verdict(
        worst <= 1e-10 && count_mismatch == 0,
        format!("100 buffers (T<=8, B<=4, N in {{4,81}}): max |diff| {worst:.2e} <= 1e-10, pair-count mismatches {count_mismatch}"),
    )
}

// ---------------------------------------------------------------- 4

fn random_records(rng: &mut ChaCha8Rng) -> Vec<EpisodeRecord> {
    (0..rng.random_range(1..=60))
        .map(|_| {
            let l = rng.random_range(1..40);
            let nstar = l + rng.random_range(1..6);
            EpisodeRecord {
                success: rng.random_bool(0.6),
                path_length: rng.random_range(0..120),
                geodesic_optimum: l,
                action_count: rng.random_range(1..200),
                optimal_action_count: nstar,
                category_id: rng.random_range(0..6),
                map_id: "m".into(),
            }
        })
        .collect()
}

/// Distances to `target` by repeated relaxation until nothing changes.
fn relax_distances(map: &GridMap, target: Cell) -> Vec<Option<u32>> {
    let (w, h) = (map.width(), map.height());
    let mut d = vec![None; w * h];
    d[target.y * w + target.x] = Some(0u32);
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if map.is_wall(Cell::new(x, y)) {
                    continue;
                }
                for (dx, dy) in [(0isize, -1isize), (1, 0), (0, 1), (-1, 0)] {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if map.is_wall_at(nx, ny) {
                        continue;
                    }
                    if let Some(nd) = d[ny as usize * w + nx as usize] {
                        if d[y * w + x].is_none_or(|cur| nd + 1 < cur) {
                            d[y * w + x] = Some(nd + 1);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return d;
        }
    }
}

/// Value iteration over (cell, heading): cost to reach `goal` plus the Stop.
fn action_values(map: &GridMap, goal: Cell) -> Vec<Option<u32>> {
    let w = map.width();
    let n = w * map.height() * 4;
    let idx = |c: Cell, h: Heading| (c.y * w + c.x) * 4 + h.index();
    let mut v = vec![None::<u32>; n];
    for h in Heading::ALL {
        v[idx(goal, h)] = Some(1);
    }
    loop {
        let mut changed = false;
        for c in map.free_cells() {
            if c == goal {
                continue;
            }
            for h in Heading::ALL {
                let fwd = map.neighbor(c, h).unwrap_or(c);
                let best = [v[idx(fwd, h)], v[idx(c, h.left())], v[idx(c, h.right())]].into_iter().flatten().min();
                if let Some(b) = best {
                    if v[idx(c, h)].is_none_or(|cur| b + 1 < cur) {
                        v[idx(c, h)] = Some(b + 1);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return v;
        }
    }
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let recs = random_records(&mut rng);
        let m = recs.len() as f64;
        let mut s_spl = 0.0;
        let mut s_sna = 0.0;
        for r in recs.iter().filter(|r| r.success) {
            let (p, l) = (r.path_length as f64, r.geodesic_optimum as f64);
            s_spl += if p > l { l / p } else { 1.0 };
            let (n, ns) = (r.action_count as f64, r.optimal_action_count as f64);
            s_sna += if n > ns { ns / n } else { 1.0 };
        }
        worst = worst.max((spl(&recs).unwrap() - s_spl / m).abs());
        worst = worst.max((sna(&recs).unwrap() - s_sna / m).abs());
        let seqs: Vec<Vec<usize>> = (0..rng.random_range(1..8))
            .map(|_| (0..rng.random_range(0..30)).map(|_| rng.random_range(0..4)).collect())
            .collect();
        let tm = transition_matrix(&seqs, 4).unwrap();
        let probs = tm.probabilities();
        for a in 0..4 {
            let mut row = [0u64; 4];
            for s in &seqs {
                for t in 1..s.len() {
                    if s[t - 1] == a {
                        row[s[t]] += 1;
                    }
                }
            }
            let total: u64 = row.iter().sum();
            for b in 0..4 {
                let p = if total == 0 { 0.0 } else { row[b] as f64 / total as f64 };
                worst = worst.max((probs[a * 4 + b] - p).abs());
                if tm.count(a, b) != row[b] {
                    worst = f64::INFINITY;
                }
            }
        }
    }
    let mut path_mismatch = 0usize;
    let mut path_checks = 0usize;
    let mut action_checks = 0usize;
    for seed in 0..100u64 {
        let map = generate_map(10_000 + seed, 15, 15, 4).unwrap();
        let free = map.free_cells();
        for _ in 0..3 {
            let goal = free[rng.random_range(0..free.len())];
            let dist = relax_distances(&map, goal);
            let values = action_values(&map, goal);
            for &c in &free {
                let oracle = dist[c.y * map.width() + c.x];
                let got = shortest_path(&map, c, goal).map(|p| p.distance);
                path_checks += 1;
                if got != oracle {
                    path_mismatch += 1;
                }
                if let (Some(sp), Some(d)) = (shortest_path(&map, c, goal), oracle) {
                    let first = Heading::ALL.into_iter().find(|&h| {
                        map.neighbor(c, h).and_then(|n| dist[n.y * map.width() + n.x]).is_some_and(|nd| nd + 1 == d)
                    });
                    if sp.first_step != first {
                        path_mismatch += 1;
                    }
                }
                for h in Heading::ALL {
                    action_checks += 1;
                    let got = optimal_action_count(&map, AgentPose { cell: c, heading: h }, goal);
                    if got != values[(c.y * map.width() + c.x) * 4 + h.index()] {
                        path_mismatch += 1;
                    }
                }
            }
        }
    }
    verdict(
        worst <= 1e-12 && path_mismatch == 0,
        format!(
            "100 record sets: max |diff| {worst:.1e} <= 1e-12; 100 maps: {path_checks} shortest paths, {action_checks} action counts, {path_mismatch} mismatches"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn bfs_first_step(map: &GridMap, from: Cell, to: Cell) -> Option<(Heading, bool)> {
    let w = map.width();
    let mut d = vec![None::<u32>; w * map.height()];
    d[to.y * w + to.x] = Some(0);
    let mut q = VecDeque::from([to]);
    while let Some(c) = q.pop_front() {
        for h in Heading::ALL {
            if let Some(n) = map.neighbor(c, h) {
                if d[n.y * w + n.x].is_none() {
                    d[n.y * w + n.x] = Some(d[c.y * w + c.x].unwrap() + 1);
                    q.push_back(n);
                }
            }
        }
    }
    let df = d[from.y * w + from.x]?;
    if df == 0 {
        return None;
    }
    let cands: Vec<Heading> = Heading::ALL
        .into_iter()
        .filter(|&h| map.neighbor(from, h).is_some_and(|n| d[n.y * w + n.x] == Some(df - 1)))
        .collect();
    Some((cands[0], cands.len() == 1))
}

fn acoustics_properties() -> Verdict {
    let cats = make_category_set(6, 32, 16, 7).unwrap();
    let quiet = AcousticConfig { noise_std: 0.0, ..AcousticConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let maps: Vec<GridMap> = (0..20).map(|s| generate_map(500 + s, 15, 15, 4).unwrap()).collect();
    let render = |map: &GridMap, pose: &AgentPose, src: Cell, cat: usize, rng: &mut ChaCha8Rng| -> BinauralSpectrogram<f64> {
        render_binaural(map, pose, src, &cats[cat], &quiet, rng).unwrap()
    };
    let (mut ild_worst, mut sign_bad, mut mirror_bad, mut mirror_checked) = (0.0f64, 0usize, 0usize, 0usize);
    for i in 0..1000 {
        let map = &maps[i % maps.len()];
        let free = map.free_cells();
        let src = free[rng.random_range(0..free.len())];
        let pose = AgentPose { cell: free[rng.random_range(0..free.len())], heading: Heading::from_index(rng.random_range(0..4)) };
        let base = render(map, &pose, src, 0, &mut rng);
        let ild0 = base.right_energy().ln() - base.left_energy().ln();
        if i < 200 {
            for c in 1..cats.len() {
                let s = render(map, &pose, src, c, &mut rng);
                ild_worst = ild_worst.max((s.right_energy().ln() - s.left_energy().ln() - ild0).abs());
            }
        }
        let (el, er) = (base.left_energy(), base.right_energy());
        let ok = match bfs_first_step(map, pose.cell, src) {
            None => el == er,
            Some((dir, _)) => match (dir.index() + 4 - pose.heading.index()) % 4 {
                1 => er > el,
                3 => el > er,
                _ => el == er,
            },
        };
        if !ok {
            sign_bad += 1;
        }
        // the N,E,S,W tie order is not mirror-symmetric; only unique first steps mirror exactly
        if bfs_first_step(map, pose.cell, src).is_none_or(|(_, unique)| unique) {
            let mirror = map.mirrored();
            let mpose = AgentPose { cell: map.mirror_cell(pose.cell), heading: pose.heading.mirrored() };
            let m = render(&mirror, &mpose, map.mirror_cell(src), 0, &mut rng);
            mirror_checked += 1;
            if m.channel(0) != base.channel(1) || m.channel(1) != base.channel(0) {
                mirror_bad += 1;
            }
        }
    }
    verdict(
        ild_worst <= 1e-9 && sign_bad == 0 && mirror_bad == 0 && mirror_checked > 0,
        format!(
            "ILD spread across 6 categories {ild_worst:.1e} <= 1e-9 (200 poses); lateralization errors {sign_bad}/1000; mirror-swap mismatches {mirror_bad}/{mirror_checked} (poses with a unique first step)"
        ),
    )
}

// ---------------------------------------------------------------- 6 and 9

fn param_entries(ckpt: &Checkpoint<f32>) -> Vec<(String, Vec<u32>)> {
    ckpt.entries
        .iter()
        .filter(|(n, _)| !n.starts_with("lane"))
        .map(|(n, a)| (n.clone(), a.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn lambda_zero_equivalence(dir: &Path) -> Verdict {
    let mut a = RunConfig::smoke();
    a.ppo.aux_weight = 0.0;
    a.model.atp = true;
    let mut b = RunConfig::smoke();
    b.model.atp = false;
    let run = |cfg: &RunConfig, name: &str| train_run::<f32>(cfg, &dir.join(name), None, Some(50)).unwrap();
    let (ra, rb) = (run(&a, "lambda0"), run(&b, "atp_off"));
    let ca = Checkpoint::<f32>::load(&ra.final_checkpoint).unwrap();
    let cb = Checkpoint::<f32>::load(&rb.final_checkpoint).unwrap();
    let (pa, pb) = (param_entries(&ca), param_entries(&cb));
    let differing = pa.iter().zip(&pb).filter(|(x, y)| x != y).count() + pa.len().abs_diff(pb.len());
    let same_losses = ra.stats.iter().zip(&rb.stats).all(|(x, y)| {
        x.policy_loss.to_bits() == y.policy_loss.to_bits() && x.value_loss.to_bits() == y.value_loss.to_bits()
    });
    verdict(
        differing == 0 && same_losses && ra.updates == 50,
        format!("50 updates serial: {differing} of {} parameter/optimizer tensors differ, policy/value losses identical: {same_losses}", pa.len()),
    )
}

fn determinism(dir: &Path) -> Verdict {
    let cfg = RunConfig::smoke();
    let run = |name: &str| train_run::<f32>(&cfg, &dir.join(name), None, Some(100)).unwrap();
    run("first");
    run("second");
    let mut files: Vec<String> = std::fs::read_dir(dir.join("first"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(dir.join("first").join(f)).ok() != std::fs::read(dir.join("second").join(f)).ok())
        .collect();
    let lines = std::fs::read_to_string(dir.join("first/metrics.jsonl")).unwrap().lines().count();
    verdict(
        differing.is_empty() && lines == 100,
        format!("100 updates twice: {} files compared (metrics log, {} checkpoints), differing: {differing:?}", files.len(), files.iter().filter(|f| f.ends_with(".bin")).count()),
    )
}

// ---------------------------------------------------------------- 7 and 8

fn mean_unheard_sr(t: &ResultTable, arm: &str) -> Option<f64> {
    t.row(arm).filter(|r| !r.seeds.is_empty()).map(|r| r.unheard_sr.mean)
}

fn grade_ordering(t: &ResultTable) -> (bool, String) {
    let get = |a| mean_unheard_sr(t, a).unwrap_or(f64::NAN);
    let (full, none, nb, na) = (get("full"), get("none"), get("no_bda"), get("no_atp"));
    let a = full - none >= 0.10;
    let between = |x: f64| x >= none && x <= full;
    let b = between(nb) && between(na);
    // lambda=0.1 vs lambda=0 with the concat encoder are the no_bda and none arms
    let c = nb > none;
    (
        a && b && c,
        format!(
            "mean Unheard SR full {:.1}% none {:.1}% no_bda {:.1}% no_atp {:.1}%: (a) full-none >= 10pt {a}, (b) single-module arms between {b}, (c) lambda 0.1 > 0 {c}",
            100.0 * full,
            100.0 * none,
            100.0 * nb,
            100.0 * na
        ),
    )
}

fn grade_atp(t: &ResultTable) -> (bool, String) {
    let acc = t.row("full").and_then(|r| r.atp_accuracy.as_ref()).map_or(f64::NAN, |c| c.mean);
    (acc >= 0.25 + 0.15, format!("full-arm held-out ATP accuracy {:.3} vs required 0.400", acc))
}

fn protocol_table() -> Option<(ResultTable, bool)> {
    if std::env::var("BDATP_FULL_PROTOCOL").is_ok_and(|v| v == "1") {
        let out = std::env::var("BDATP_PROTOCOL_OUT").unwrap_or_else(|_| "target/full-protocol".into());
        let cfg = RunConfig::default();
        let t = run_experiment::<f32>(&cfg, &AblationArm::ALL, &[0, 1, 2, 3, 4], 500_000, Path::new(&out)).unwrap();
        return Some((t, true));
    }
    let path = std::env::var("BDATP_REPORT").ok()?;
    let text = std::fs::read_to_string(&path).ok()?;
    serde_json::from_str(&text).ok().map(|t| (t, false))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "BDA analytic invariants", bda_invariants()),
        (3, "auxiliary loss oracle", atp_oracle_equivalence()),
        (4, "metric and path oracles", metric_oracles()),
        (5, "acoustics properties", acoustics_properties()),
        (6, "lambda=0 equivalence", lambda_zero_equivalence(tmp.path())),
    ];
    let protocol = protocol_table();
    let (v7, v8) = match &protocol {
        Some((t, true)) => {
            let (a, da) = grade_ordering(t);
            let (b, db) = grade_atp(t);
            (verdict(a, da), verdict(b, db))
        }
        Some((t, false)) => {
            let (a, da) = grade_ordering(t);
            let (b, db) = grade_atp(t);
            let tag = |ok: bool| if ok { "would pass" } else { "would fail" };
            let seeds = t.rows.first().map_or(0, |r| r.seeds.len());
            let note = format!("graded BDATP_REPORT (budget {} steps, {seeds} seeds), informational", t.budget_steps);
            (Verdict::Skip(format!("{note}: {} - {da}", tag(a))), Verdict::Skip(format!("{note}: {} - {db}", tag(b))))
        }
        None => (
            Verdict::Skip("full protocol (4 arms x 5 seeds x 500k steps) runs with BDATP_FULL_PROTOCOL=1".into()),
            Verdict::Skip("needs the full-protocol full arm; see criterion 7".into()),
        ),
    };
    results.push((7, "generalization ordering", v7));
    results.push((8, "auxiliary prediction signal", v8));
    results.push((9, "determinism", determinism(tmp.path())));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, v) in &results {
        match v {
            Verdict::Pass(d) => println!("criterion {n} ({name}): PASS - {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {d}")
            }
            Verdict::Skip(d) => println!("criterion {n} ({name}): SKIP - {d}"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
