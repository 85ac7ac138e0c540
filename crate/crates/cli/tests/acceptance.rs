//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release -p cactusnet-cli --test acceptance`.

#[path = "../../core/tests/support/reference.rs"]
mod reference;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use cactusnet::applicability::{layer_sweep, pair_separability, subset_average, SweepPlan};
use cactusnet::base::{default_base_layers, train_base, DEFAULT_TAPS};
use cactusnet::cactus::{
    classify_app, classify_or_flag, compute_thresholds, grow, replay, CactusNode, CactusTree,
    GrowthConfig, GrowthLog, VerdictKind,
};
use cactusnet::data::{
    build_splits, resolve_sources, stack_images, synthetic_manifest, DatasetManifest, SplitStore,
    SubsetCounts, SubsetLabel, SyntheticParams,
};
use cactusnet::nn::{
    load_checkpoint, one_hot, save_checkpoint, sgd_step, LayerSpec, LossKind, Network, Tensor,
    TrainConfig,
};
use cactusnet::predictor::{
    build_predictor, evaluate_predictor, layer_samples, train_predictor, HeldOutClass, SplitPart,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use reference::{items, RefNet};

/// Master seed for every trained experiment below, fixed before any run.
const SEED: u64 = 7;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1, 2: constants

fn thresholds_exact() -> Outcome {
    let t = compute_thresholds(0.986, 0.983, 0.923).map_err(|e| e.to_string())?;
    let ok = (t.tau1 - 0.985).abs() <= 1e-9 && (t.tau2 - 0.965).abs() <= 1e-9;
    check(ok, format!("tau1 = {:.12}, tau2 = {:.12}", t.tau1, t.tau2))
}

fn moth_row_mean() -> Outcome {
    let row = [
        0.98, 0.932, 0.952, 0.964, 0.976, 0.972, 0.98, 0.952, 0.952, 0.932,
    ];
    // Oracle: exact integer arithmetic in thousandths.
    let thousandths: i64 = row.iter().map(|v| (v * 1000.0f64).round() as i64).sum();
    let oracle = thousandths as f64 / 10_000.0;
    let records: Vec<_> = row
        .iter()
        .enumerate()
        .map(
            |(j, &accuracy)| cactusnet::applicability::SeparabilityRecord {
                target: 0,
                probe: j as u32 + 1,
                layer: 0,
                accuracy,
                seed: 0,
            },
        )
        .collect();
    let app = cactusnet::applicability::class_applicability(&records).map_err(|e| e.to_string())?;
    check(
        (app - 0.9592).abs() <= 1e-6 && (app - oracle).abs() <= 1e-12,
        format!("App = {app:.10}, oracle = {oracle:.10}"),
    )
}

// ---------------------------------------------------------------------------
// 3: gradients

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;

fn random_tensor(rng: &mut StdRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn away_from_zero(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn well_separated(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.02 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Worst relative error over all parameter and input gradients, and whether
/// every entry passed.
fn fd_check(net: &Network, x: &Tensor, t: &Tensor, loss: LossKind) -> (f64, bool) {
    let (grads, dx, _) = net.backward_full(x, t, loss).unwrap();
    let xs = items(x);
    let ts = items(t);
    let base = RefNet::from_network(net);
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut record = |a: f64, n: f64| {
        let d = (a - n).abs();
        let rel = d / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
        if d > ABS_FLOOR {
            ok &= rel < REL_TOL;
        }
        if a.abs().max(n.abs()) >= 1e-3 {
            worst = worst.max(rel);
        }
    };
    for (li, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for (which, analytic) in [(0, g.weights.data()), (1, g.bias.data())] {
            for (k, &a) in analytic.iter().enumerate() {
                let mut plus = RefNet::from_network(net);
                let mut minus = RefNet::from_network(net);
                let (pp, pm) = (
                    plus.params[li].as_mut().unwrap(),
                    minus.params[li].as_mut().unwrap(),
                );
                if which == 0 {
                    pp.w[k] += STEP;
                    pm.w[k] -= STEP;
                } else {
                    pp.b[k] += STEP;
                    pm.b[k] -= STEP;
                }
                let num = (plus.loss(&xs, &ts, loss) - minus.loss(&xs, &ts, loss)) / (2.0 * STEP);
                record(f64::from(a), num);
            }
        }
    }
    let item_len = x.item_len();
    for (flat, &a) in dx.data().iter().enumerate() {
        let (b, j) = (flat / item_len, flat % item_len);
        let (mut xp, mut xm) = (xs.clone(), xs.clone());
        xp[b][j] += STEP;
        xm[b][j] -= STEP;
        let num = (base.loss(&xp, &ts, loss) - base.loss(&xm, &ts, loss)) / (2.0 * STEP);
        record(f64::from(a), num);
    }
    (worst, ok)
}

fn gradient_case(kind: &str, seed: u64) -> (Network, Tensor, Tensor, LossKind) {
    let mut rng = StdRng::seed_from_u64(mix_kind(kind, seed));
    let targets = |rng: &mut StdRng, n: usize, c: usize| {
        one_hot(&(0..n).map(|_| rng.gen_range(0..c)).collect::<Vec<_>>(), c)
    };
    match kind {
        "conv2d" => {
            let side = rng.gen_range(3..=8);
            let c = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3.min(side));
            let net = Network::new(
                &[side, side, c],
                vec![
                    LayerSpec::conv(rng.gen_range(1..=3), k, rng.gen_range(1..=2)),
                    LayerSpec::flatten(),
                    LayerSpec::dense(3),
                    LayerSpec::softmax(),
                ],
                seed,
            )
            .unwrap();
            let x = random_tensor(&mut rng, &[2, side, side, c], -1.0, 1.0);
            let t = targets(&mut rng, 2, 3);
            (net, x, t, LossKind::CrossEntropy)
        }
        "dense" => {
            let d = rng.gen_range(1..=8);
            let net = Network::new(
                &[d],
                vec![LayerSpec::dense(rng.gen_range(1..=8)), LayerSpec::dense(4)],
                seed,
            )
            .unwrap();
            let x = random_tensor(&mut rng, &[3, d], -1.0, 1.0);
            let t = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
            (net, x, t, LossKind::Mse)
        }
        "relu" => {
            let d = rng.gen_range(1..=8);
            let net = Network::new(&[d], vec![LayerSpec::relu()], seed).unwrap();
            let x = away_from_zero(&mut rng, &[2, d]);
            let t = random_tensor(&mut rng, &[2, d], -1.0, 1.0);
            (net, x, t, LossKind::Mse)
        }
        "maxpool" => {
            let side = rng.gen_range(2..=8);
            let c = rng.gen_range(1..=3);
            let pool = rng.gen_range(1..=2.min(side));
            let net = Network::new(
                &[side, side, c],
                vec![
                    LayerSpec::max_pool(pool, rng.gen_range(1..=2)),
                    LayerSpec::flatten(),
                ],
                seed,
            )
            .unwrap();
            let x = well_separated(&mut rng, &[2, side, side, c]);
            let n_out: usize = net.output_shape().iter().product();
            let t = random_tensor(&mut rng, &[2, n_out], -1.0, 1.0);
            (net, x, t, LossKind::Mse)
        }
        "softmax" => {
            let d = rng.gen_range(2..=8);
            let net =
                Network::new(&[d], vec![LayerSpec::dense(d), LayerSpec::softmax()], seed).unwrap();
            let x = random_tensor(&mut rng, &[2, d], -2.0, 2.0);
            let t = targets(&mut rng, 2, d);
            (net, x, t, LossKind::CrossEntropy)
        }
        "flatten" => {
            let (h, w, c) = (
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=2),
            );
            let net = Network::new(
                &[h, w, c],
                vec![LayerSpec::flatten(), LayerSpec::dense(3)],
                seed,
            )
            .unwrap();
            let x = random_tensor(&mut rng, &[2, h, w, c], -1.0, 1.0);
            let t = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            (net, x, t, LossKind::Mse)
        }
        other => unreachable!("no gradient case {other}"),
    }
}

fn mix_kind(kind: &str, seed: u64) -> u64 {
    let tag = kind
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    cactusnet::seed::mix(&[tag, seed])
}

fn gradient_suite() -> Outcome {
    let mut lines = Vec::new();
    let mut all = true;
    for kind in ["conv2d", "dense", "relu", "maxpool", "softmax", "flatten"] {
        let mut worst = 0.0f64;
        let mut passed = 0;
        for seed in 0..20 {
            let (net, x, t, loss) = gradient_case(kind, seed);
            let (w, ok) = fd_check(&net, &x, &t, loss);
            worst = worst.max(w);
            passed += usize::from(ok);
        }
        all &= passed == 20;
        lines.push(format!("{kind} {passed}/20 worst {worst:.1e}"));
    }
    check(all, lines.join(", "))
}

// ---------------------------------------------------------------------------
// 4: freezing and head replacement

fn bits(net: &Network, i: usize) -> Option<Vec<u32>> {
    net.params(i).map(|p| {
        p.weights
            .data()
            .iter()
            .chain(p.bias.data())
            .map(|v| v.to_bits())
            .collect()
    })
}

fn freeze_contract() -> Outcome {
    let layers = default_base_layers(4);
    let mut rng = StdRng::seed_from_u64(SEED);
    let x = random_tensor(&mut rng, &[8, 16, 16, 1], 0.0, 1.0);
    let y = one_hot(&(0..8).map(|i| i % 4).collect::<Vec<_>>(), 4);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 1,
        batch_size: 8,
        seed: 0,
    };
    let mut frozen_ok = 0;
    let mut moved_ok = 0;
    let depth = layers.len();
    for i in 0..depth - 1 {
        let mut net = Network::new(&[16, 16, 1], layers.clone(), i as u64).unwrap();
        net.freeze_through(i);
        let before = net.clone();
        for _ in 0..10 {
            let (g, _) = net.backward(&x, &y, LossKind::CrossEntropy).unwrap();
            net = sgd_step(&net, &g, &cfg).unwrap();
        }
        if (0..=i).all(|j| bits(&net, j) == bits(&before, j)) {
            frozen_ok += 1;
        }
        let head = net.head_index().unwrap();
        if i >= head || bits(&net, head) != bits(&before, head) {
            moved_ok += 1;
        }
    }
    let net = Network::new(&[16, 16, 1], layers, 3).unwrap();
    let head = net.head_index().unwrap();
    let swapped = net.replace_head(2, 99).unwrap();
    let kept = (0..head).all(|j| bits(&net, j) == bits(&swapped, j));
    check(
        frozen_ok == depth - 1 && moved_ok == depth - 1 && kept && swapped.output_shape() == [2],
        format!(
            "frozen prefixes intact {frozen_ok}/{}, trainable head updated {moved_ok}/{}, replace_head keeps prefix: {kept}",
            depth - 1,
            depth - 1
        ),
    )
}

// ---------------------------------------------------------------------------
// 5, 6, 7: trained experiments on the synthetic corpus

struct Desk {
    manifest: DatasetManifest,
    splits: SplitStore,
    net: Network,
}

fn desk(counts: SubsetCounts) -> Desk {
    let params = SyntheticParams {
        per_family: (counts.known + counts.objective_unknown).max(counts.nonobjective_unknown),
        per_class: 300,
        image_side: 16,
        seed: SEED,
    };
    let manifest = synthetic_manifest(params, counts, 6, 2.0 / 3.0, SEED).unwrap();
    let sources = resolve_sources(&manifest, Path::new(".")).unwrap();
    let splits = build_splits(&manifest, &sources).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 12,
        batch_size: 32,
        seed: SEED,
    };
    let (net, _) = train_base(&splits, default_base_layers(counts.known), &cfg).unwrap();
    Desk {
        manifest,
        splits,
        net,
    }
}

fn job_budget() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.02,
        epochs: 4,
        batch_size: 32,
        seed: 0,
    }
}

fn sweep(d: &Desk) -> cactusnet::applicability::SweepOutcome {
    let plan = SweepPlan {
        classes: d.manifest.measured_classes(),
        probes: d.manifest.probe_set.clone(),
        layers: DEFAULT_TAPS.to_vec(),
        train: job_budget(),
        master_seed: SEED,
        workers: 4,
    };
    layer_sweep(&d.net, &d.splits, &plan).unwrap()
}

fn subset_trend(d: &Desk) -> Outcome {
    let out = sweep(d);
    if !out.failures.is_empty() {
        return Err(format!("{} sweep jobs failed", out.failures.len()));
    }
    let curves = subset_average(&out.table, &d.manifest.labels()).map_err(|e| e.to_string())?;
    let at = |s: SubsetLabel, layer: usize| {
        curves
            .iter()
            .find(|c| c.subset == s)
            .and_then(|c| c.at(layer))
            .unwrap_or(f64::NAN)
    };
    let (first, last) = (DEFAULT_TAPS[0], *DEFAULT_TAPS.last().unwrap());
    let k = at(SubsetLabel::ObjectiveKnown, last);
    let o = at(SubsetLabel::ObjectiveUnknown, last);
    let n = at(SubsetLabel::NonobjectiveUnknown, last);
    let n_first = at(SubsetLabel::NonobjectiveUnknown, first);
    let ordered = k >= o && o >= n && k - n >= 0.02;
    let declines = n < n_first;
    let curve_text: Vec<String> = curves
        .iter()
        .map(|c| {
            let pts: Vec<String> = c.points.iter().map(|(_, v)| format!("{v:.3}")).collect();
            format!("{} [{}]", c.subset, pts.join(" "))
        })
        .collect();
    check(
        ordered && declines,
        format!(
            "(a) {} (b) {}; {}",
            if ordered { "ordered" } else { "NOT ordered" },
            if declines {
                "declines"
            } else {
                "does NOT decline"
            },
            curve_text.join("; ")
        ),
    )
}

fn self_control(d: &Desk) -> Outcome {
    let head = d.net.head_index().unwrap();
    let classes: Vec<u32> = SubsetLabel::ALL
        .iter()
        .filter_map(|s| {
            d.manifest
                .measured_classes()
                .into_iter()
                .find(|c| d.manifest.subset_of(*c) == Some(*s))
        })
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &c in &classes {
        for layer in 0..head {
            let cfg =
                job_budget().with_seed(cactusnet::seed::mix(&[SEED, u64::from(c), layer as u64]));
            let r = pair_separability(&d.net, layer, c, c, &d.splits, &cfg)
                .map_err(|e| e.to_string())?;
            lo = lo.min(r.accuracy);
            hi = hi.max(r.accuracy);
        }
    }
    check(
        lo >= 0.4 && hi <= 0.6,
        format!("classes {classes:?} x layers 0..{head}: self separability in [{lo:.3}, {hi:.3}]"),
    )
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn predictor_fidelity(d: &Desk) -> Outcome {
    let out = sweep(d);
    let measured = d.manifest.measured_classes();
    let held: Vec<u32> = SubsetLabel::ALL
        .iter()
        .filter_map(|s| {
            measured
                .iter()
                .copied()
                .rfind(|c| d.manifest.subset_of(*c) == Some(*s))
        })
        .collect();
    let train_classes: Vec<u32> = measured
        .iter()
        .copied()
        .filter(|c| !held.contains(c))
        .collect();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 5,
        batch_size: 32,
        seed: SEED,
    };
    let mut worst = 0.0f64;
    let mut fidelity_ok = true;
    let mut control_ok = true;
    let mut parts = Vec::new();
    for layer in DEFAULT_TAPS {
        let train = layer_samples(
            &d.net,
            &d.splits,
            &out.table,
            layer,
            &train_classes,
            SplitPart::Train,
        )
        .map_err(|e| e.to_string())?;
        let spec = build_predictor(train.activations.item_shape()).map_err(|e| e.to_string())?;
        let (model, _) =
            train_predictor(&spec, layer, &train, None, &cfg).map_err(|e| e.to_string())?;
        let held_out: Vec<HeldOutClass> = held
            .iter()
            .map(|&c| {
                let s = layer_samples(&d.net, &d.splits, &out.table, layer, &[c], SplitPart::Test)
                    .unwrap();
                HeldOutClass {
                    class_id: c,
                    subset: d.manifest.subset_of(c).unwrap(),
                    actual_app: out.table.get(c, layer).unwrap(),
                    activations: s.activations,
                }
            })
            .collect();
        let ev = evaluate_predictor(&model, &held_out).map_err(|e| e.to_string())?;
        for r in &ev.rows {
            worst = worst.max(r.abs_err);
            fidelity_ok &= r.abs_err <= 0.05;
        }

        let mut shuffled = train.clone();
        shuffled
            .targets
            .shuffle(&mut StdRng::seed_from_u64(cactusnet::seed::mix(&[
                SEED,
                layer as u64,
            ])));
        let (control, _) =
            train_predictor(&spec, layer, &shuffled, None, &cfg).map_err(|e| e.to_string())?;
        let test = layer_samples(&d.net, &d.splits, &out.table, layer, &held, SplitPart::Test)
            .map_err(|e| e.to_string())?;
        let preds = control
            .predict_batch(&test.activations)
            .map_err(|e| e.to_string())?;
        let mse = preds
            .iter()
            .zip(&test.targets)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / preds.len() as f64;
        let var = variance(&test.targets);
        control_ok &= mse >= 0.9 * var;
        let errs: Vec<String> = ev
            .rows
            .iter()
            .map(|r| format!("{:.3}", r.abs_err))
            .collect();
        parts.push(format!(
            "L{layer} err [{}] control mse {:.2e} vs var {:.2e}",
            errs.join(" "),
            mse,
            var
        ));
    }
    check(
        fidelity_ok && control_ok,
        format!(
            "held-out {held:?}, worst |err| {worst:.3}{}{}; {}",
            if fidelity_ok { "" } else { " > 0.05" },
            if control_ok {
                ""
            } else {
                ", control beats variance by >10%"
            },
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 8, 9, 10: routing and growth

fn rank(v: VerdictKind) -> usize {
    match v {
        VerdictKind::Known => 0,
        VerdictKind::ObjectiveUnknown => 1,
        VerdictKind::NonobjectiveUnknown => 2,
    }
}

fn partition() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut counts = [0usize; 3];
    let mut bad = 0;
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rng.gen(), rng.gen());
        let (tau2, tau1) = if a <= b { (a, b) } else { (b, a) };
        let app: f64 = rng.gen();
        let arms = [app > tau1, app <= tau1 && app > tau2, app <= tau2];
        let fired = arms.iter().filter(|x| **x).count();
        let v = classify_app(app, tau1, tau2);
        counts[rank(v)] += 1;
        bad += usize::from(fired != 1 || !arms[rank(v)]);
        if tau1 > tau2 && classify_app(tau1, tau1, tau2) != VerdictKind::ObjectiveUnknown {
            bad += 1;
        }
    }
    check(
        bad == 0,
        format!(
            "10000 triples, {bad} violations; known/objective/nonobjective = {}/{}/{}",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn mock(_: &CactusNode, _: &Tensor, input: &Tensor) -> f64 {
    f64::from(input.data()[0])
}

fn stamped(app: f64, salt: usize) -> Tensor {
    let mut data: Vec<f32> = (0..256)
        .map(|i| (((i * 7 + salt * 13) % 17) as f32) / 17.0)
        .collect();
    data[0] = app as f32;
    Tensor::new(vec![16, 16, 1], data).unwrap()
}

fn toy_tree() -> CactusTree {
    let net = Network::new(&[16, 16, 1], default_base_layers(5), SEED).unwrap();
    let labels = (0..5).map(|i| format!("class-{i}")).collect();
    let mut t = CactusTree::from_trunk(&net, &DEFAULT_TAPS, labels, 2).unwrap();
    let th = compute_thresholds(0.986, 0.983, 0.923).unwrap();
    for id in t.trunk() {
        t.set_thresholds(id, th).unwrap();
    }
    t
}

fn regime_replay() -> Outcome {
    let t = toy_tree();
    let apps = [
        0.990, 0.992, 0.988, 0.995, 0.950, 0.987, 0.975, 0.970, 0.940,
    ];
    let mut hist = [0usize; 3];
    let mut verdicts = Vec::new();
    for (i, &a) in apps.iter().enumerate() {
        let d = classify_or_flag(&t, &stamped(a, i), &mock).map_err(|e| e.to_string())?;
        hist[rank(d.verdict.kind())] += 1;
        verdicts.push(rank(d.verdict.kind()));
    }
    check(
        hist == [5, 2, 2] && verdicts == [0, 0, 0, 0, 2, 0, 1, 1, 2],
        format!(
            "Known {}, ObjectiveUnknown {}, NonobjectiveUnknown {}",
            hist[0], hist[1], hist[2]
        ),
    )
}

fn trunk_output(t: &CactusTree, x: &Tensor) -> Vec<u32> {
    let mut act = x.clone().reshape(vec![1, 16, 16, 1]).unwrap();
    for id in t.trunk() {
        act = t.nodes[id].block.predict(&act).unwrap();
    }
    let head = t.nodes[*t.trunk().last().unwrap()].head.as_ref().unwrap();
    head.network
        .predict(&act)
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

fn growth_soundness() -> Outcome {
    let initial = toy_tree();
    let mut t = initial.clone();
    let probe = stamped(0.99, 100);
    let before = trunk_output(&t, &probe);
    let stream: Vec<Tensor> = (0..50).map(|i| stamped(0.93, i)).collect();
    let cfg = GrowthConfig {
        consolidation_window: 25,
        ..GrowthConfig::default()
    };
    let log = grow(&mut t, &stream, &mock, &cfg).map_err(|e| e.to_string())?;
    let one_branch = t.branch_count() == 1;
    let trunk_same = trunk_output(&t, &probe) == before;
    let parsed = GrowthLog::read_jsonl(log.to_jsonl().as_bytes()).map_err(|e| e.to_string())?;
    let rebuilt = replay(&initial, &parsed).map_err(|e| e.to_string())?;
    let replay_same = rebuilt == t;
    check(
        one_branch && trunk_same && replay_same,
        format!(
            "branches {}, absorbed {}, trunk bitwise unchanged: {trunk_same}, replay identical: {replay_same}",
            t.branch_count(),
            log.stats.absorbed
        ),
    )
}

// ---------------------------------------------------------------------------
// 11: round trips and reruns

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_cactusnet");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .env_remove("RUST_LOG")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "`cactusnet {}` exited {:?}: {}",
                args.join(" "),
                out.status.code(),
                String::from_utf8_lossy(&out.stderr).trim()
            ))
        }
    };
    let d = dir.to_str().unwrap();
    let cfg = dir.join("config.json");
    let cfg = cfg.to_str().unwrap();
    let stream = dir.join("stream.jsonl");
    run(&[
        "make-synthetic",
        "--out",
        d,
        "--seed",
        "11",
        "--per-class",
        "90",
        "--stream-per-class",
        "2",
    ])?;
    run(&["train-base", "--config", cfg])?;
    run(&["measure", "--config", cfg, "--workers", "2"])?;
    run(&["train-predictors", "--config", cfg])?;
    run(&[
        "cactus-run",
        "--config",
        cfg,
        "--input",
        stream.to_str().unwrap(),
    ])?;
    run(&["report", "--config", cfg])
}

fn round_trip_and_reruns(d: &Desk) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("base.ckpt");
    save_checkpoint(&d.net, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let known = d.splits.known_classes();
    let images: Vec<_> = known
        .iter()
        .flat_map(|c| d.splits.get(*c).unwrap().test.iter().take(10))
        .collect();
    let x = stack_images(images).map_err(|e| e.to_string())?;
    let to_bits = |t: Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let forward_same = to_bits(d.net.predict(&x).unwrap()) == to_bits(back.predict(&x).unwrap());

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same = fa.len() == fb.len() && differing.is_empty();
    check(
        forward_same && same,
        format!(
            "checkpoint forward bitwise: {forward_same}; {} pipeline files, identical across reruns: {same}{}",
            fa.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" (differ: {})", differing.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------

fn run_one(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id:>2} {tag} {name} ({secs:.1}s): {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let desk_small = std::cell::OnceCell::new();
    let small = || {
        desk_small.get_or_init(|| {
            desk(SubsetCounts {
                known: 5,
                objective_unknown: 6,
                nonobjective_unknown: 6,
            })
        })
    };
    let results = [
        run_one(1, "threshold exactness", thresholds_exact),
        run_one(2, "applicability mean oracle", moth_row_mean),
        run_one(3, "gradient suite", gradient_suite),
        run_one(4, "freeze/head contract", freeze_contract),
        run_one(5, "subset applicability trend", || subset_trend(small())),
        run_one(6, "self-control", || self_control(small())),
        run_one(7, "predictor fidelity", || {
            predictor_fidelity(&desk(SubsetCounts {
                known: 10,
                objective_unknown: 14,
                nonobjective_unknown: 20,
            }))
        }),
        run_one(8, "verdict partition", partition),
        run_one(9, "regime replay", regime_replay),
        run_one(10, "growth soundness", growth_soundness),
        run_one(11, "round trip and reruns", || {
            round_trip_and_reruns(small())
        }),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
