//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{attention_ref, desk_budget, desk_seed, matmul1_ref, matmul2_ref, single, table_params};
use uninas::builders::{build, seed_network, BuilderParams, BuilderVariant};
use uninas::cost::{block_cost, block_cost_with, network_cost, stage_entry_delta, Cost};
use uninas::graph::{check_search_rules, validated_shapes, BlockGraph, OpKind, INPUT, OUTPUT};
use uninas::interp::{forward, init_params, matmul1, matmul2, EvalContext};
use uninas::io::{self, protocol, ScaledLr, Task};
use uninas::mutation::{SearchStepConfig, Template};
use uninas::proxy::{deciles, fd_gradients, vkdnw_score, ProxyId};
use uninas::search::{evolve, random_walk, random_walk_observed, replay, EvoConfig, WalkConfig};
use uninas::tensor::normal_sample;
use uninas::{NetworkSpec, Rng, Shape, Skeleton, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

/// Block placing `op` at a node whose input shape is `at`, with whatever
/// partner the op needs to restore the block shape.
fn probe_block(op: OpKind, at: Shape) -> (BlockGraph, uninas::graph::NodeId) {
    match op {
        OpKind::ConvExp4 => {
            let mut b = BlockGraph::empty(at);
            let e = b.add_node(OpKind::ConvExp4);
            let r = b.add_node(OpKind::ConvRed4);
            b.connect(INPUT, 0, e, 0);
            b.connect(e, 0, r, 0);
            b.connect(r, 0, OUTPUT, 0);
            b.couple(e, r);
            (b, e)
        }
        OpKind::ConvRed4 => {
            let mut b = BlockGraph::empty(at.with_channels(at.c / 4));
            let e = b.add_node(OpKind::ConvExp4);
            let r = b.add_node(OpKind::ConvRed4);
            b.connect(INPUT, 0, e, 0);
            b.connect(e, 0, r, 0);
            b.connect(r, 0, OUTPUT, 0);
            b.couple(e, r);
            (b, r)
        }
        OpKind::ConvChunk3 => {
            let mut b = BlockGraph::empty(at);
            let q = b.add_node(OpKind::ConvChunk3);
            let m1 = b.add_node(OpKind::Matmul1);
            let m2 = b.add_node(OpKind::Matmul2);
            b.connect(INPUT, 0, q, 0);
            b.connect(q, 0, m1, 0);
            b.connect(q, 1, m1, 1);
            b.connect(m1, 0, m2, 0);
            b.connect(q, 2, m2, 1);
            b.connect(m2, 0, OUTPUT, 0);
            b.couple(q, m2);
            (b, q)
        }
        _ => {
            let b = single(op, at);
            let id = *b.nodes().keys().next().unwrap();
            (b, id)
        }
    }
}

fn random_shape(op: OpKind, rng: &mut Rng) -> Shape {
    match op {
        OpKind::RelPosBias => Shape::new(
            1 + rng.below(16),
            (1 + rng.below(6)).pow(2),
            (1 + rng.below(6)).pow(2),
        ),
        OpKind::ConvRed4 => Shape::new(4 * (1 + rng.below(24)), 1 + rng.below(12), 1 + rng.below(12)),
        _ => Shape::new(1 + rng.below(96), 1 + rng.below(12), 1 + rng.below(12)),
    }
}

fn c1_cost_oracle() -> Outcome {
    let t = Instant::now();
    let ops = [
        OpKind::Conv1,
        OpKind::Conv3,
        OpKind::ConvDepth3,
        OpKind::ConvDepth5,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::ConvChunk3,
        OpKind::ConvExp4,
        OpKind::ConvRed4,
        OpKind::RelPosBias,
    ];
    let mut rng = Rng::new(1);
    let mut checked = 0;
    for op in ops {
        for _ in 0..100 {
            let at = random_shape(op, &mut rng);
            let (block, id) = probe_block(op, at);
            let shapes = block.infer_shapes().map_err(|e| format!("{op} at {at}: {e}"))?;
            ensure(shapes.input_shape_of(id) == at, || format!("{op}: probe misplaced"))?;
            let store = init_params(&block, &mut rng).map_err(|e| e.to_string())?;
            let stored = store.node_scalars(id) as u64;
            let formula = table_params(op, at);
            let model = block_cost(&block)
                .map_err(|e| e.to_string())?
                .nodes
                .iter()
                .find(|n| n.node == id)
                .unwrap()
                .cost
                .params;
            ensure(model == formula, || format!("{op} at {at}: cost model {model} vs formula {formula}"))?;
            if op == OpKind::RelPosBias {
                // the offset table holds (2a-1)(2b-1) scalars; the formula counts half, rounded up
                let (a, b) = ((at.h as f64).sqrt() as u64, (at.w as f64).sqrt() as u64);
                ensure(stored == (2 * a - 1) * (2 * b - 1) && formula == stored.div_ceil(2), || {
                    format!("RelPosBias at {at}: table {stored} vs formula {formula}")
                })?;
            } else {
                ensure(stored == formula, || format!("{op} at {at}: interpreter {stored} vs formula {formula}"))?;
            }
            checked += 1;
        }
    }
    within(t.elapsed(), 10)?;
    Ok(format!("{checked} op/shape pairs"))
}

fn c2_matmul() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for c in 1..=4 {
        for h in 1..=4 {
            for w in 1..=4 {
                let s = Shape::new(c, h, w);
                let x = normal_sample(&mut rng, s, 0.0, 1.0);
                let y = normal_sample(&mut rng, s, 0.0, 1.0);
                let want = matmul1_ref(&x, &y);
                let got = matmul1(&x, &y);
                ensure(got.shape() == Shape::new(1, h * h, w * w), || format!("matmul1 shape at {s}"))?;
                let flat: Vec<f64> = want.iter().flatten().flatten().flatten().copied().collect();
                for (a, b) in got.data().iter().zip(&flat) {
                    worst = worst.max((a - b).abs());
                }
                let att = normal_sample(&mut rng, Shape::new(1, h * h, w * w), 0.0, 1.0);
                let mut att4 = vec![vec![vec![vec![0.0; w]; h]; w]; h];
                for (i, v) in att.data().iter().enumerate() {
                    let (q, k) = (i / (h * w), i % (h * w));
                    att4[q / w][q % w][k / w][k % w] = *v;
                }
                let want2 = matmul2_ref(&att4, &y);
                let got2 = matmul2(&att, &y);
                ensure(got2.shape() == s, || format!("matmul2 shape at {s}"))?;
                for (a, b) in got2.data().iter().zip(&want2) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst < 1e-12, || format!("max abs error {worst:e}"))?;
    within(t.elapsed(), 10)?;
    Ok(format!("64 shapes, max abs error {worst:.1e}"))
}

fn c3_attention() -> Outcome {
    let s = Shape::new(8, 16, 16);
    let block = build(BuilderParams {
        variant: BuilderVariant::SelfAttention2Head,
        input_shape: s,
    })
    .map_err(|e| e.to_string())?;
    let mut rng = Rng::new(3);
    let mut store = init_params(&block, &mut rng).map_err(|e| e.to_string())?;
    let ids: Vec<_> = store.nodes().map(|(id, _)| id).collect();
    for id in ids {
        for p in store.get_mut(id).unwrap() {
            if p.name == "bias" || p.name == "table" {
                p.data = rng.normal_vec(p.data.len(), 0.0, 0.5);
            }
        }
    }
    let batch: Vec<Tensor> = (0..2).map(|_| normal_sample(&mut rng, s, 0.0, 1.0)).collect();
    let out = forward(&block, &store, &batch, &mut EvalContext::deterministic()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut branch: f64 = 0.0;
    for (x, y) in batch.iter().zip(&out) {
        let want = attention_ref(&block, &store, x);
        ensure(want.len() == y.data().len(), || "output size differs from reference".into())?;
        for ((a, b), xi) in y.data().iter().zip(&want).zip(x.data()) {
            worst = worst.max((a - b).abs());
            branch = branch.max((a - xi).abs());
        }
    }
    ensure(branch > 1e-3, || "attention branch contributes nothing".into())?;
    ensure(worst < 1e-9, || format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:.1e}, branch magnitude {branch:.2}"))
}

const WALK_STEPS: usize = 100_000;
const WINDOW: usize = 10_000;
const FULL_COST_EVERY: usize = 1_000;
const UNTOUCHED_EVERY: usize = 100;

struct WalkStats {
    elapsed: Duration,
    failures: Vec<String>,
    seen: BTreeSet<OpKind>,
    window_flops: BTreeMap<OpKind, u128>,
    window_total: u128,
    accepted: usize,
}

fn desk_walk() -> WalkStats {
    let seed = desk_seed();
    let budget = desk_budget();
    let cfg = WalkConfig {
        steps: WALK_STEPS,
        step: SearchStepConfig::new(budget),
        record_every: WALK_STEPS,
        seed: 4,
    };
    let mut stats = WalkStats {
        elapsed: Duration::ZERO,
        failures: Vec::new(),
        seen: BTreeSet::new(),
        window_flops: Default::default(),
        window_total: 0,
        accepted: 0,
    };
    struct Cached {
        fingerprint: u64,
        in_network: Cost,
        op_flops: BTreeMap<OpKind, u64>,
    }
    let mut cache: Vec<Option<Cached>> = Vec::new();
    // stem and head
    let mut fixed: Option<(i128, i128)> = None;
    let t = Instant::now();
    let res = random_walk_observed(&seed, &cfg, |net, rec| {
        if rec.edit.is_some() {
            stats.accepted += 1;
        }
        if stats.failures.len() > 5 {
            return;
        }
        let full = cache.is_empty() || rec.step % FULL_COST_EVERY == 0;
        if cache.is_empty() {
            cache = net.blocks.iter().map(|_| None).collect();
        }
        if let Some(e) = &rec.edit {
            cache[e.block] = None;
        }
        let base = fixed.unwrap_or((0, 0));
        let mut total = base;
        for (i, b) in net.blocks.iter().enumerate() {
            let audit = rec.step % UNTOUCHED_EVERY == 0;
            match &cache[i] {
                Some(c) if !audit || c.fingerprint == b.fingerprint() => {}
                Some(_) => {
                    stats.failures.push(format!("step {}: block {i} changed without an edit", rec.step));
                    return;
                }
                None => {
                    let shapes = match validated_shapes(b) {
                        Ok(s) => s,
                        Err(report) => {
                            stats.failures.push(format!("step {} block {i}: {report}", rec.step));
                            return;
                        }
                    };
                    let breaches = check_search_rules(b, &shapes);
                    if !breaches.is_empty() {
                        stats.failures.push(format!("step {} block {i}: {breaches:?}", rec.step));
                    }
                    let bc = block_cost_with(b, &shapes).expect("validated");
                    let entry = stage_entry_delta(
                        net.projection_source(i),
                        b.leading_node().map(|(_, op)| op),
                        b.input_shape(),
                    )
                    .and_then(|d| bc.total.apply(d));
                    let Ok(in_network) = entry else {
                        stats.failures.push(format!("step {} block {i}: stage entry cost", rec.step));
                        return;
                    };
                    stats.seen.extend(b.nodes().values().copied());
                    cache[i] = Some(Cached {
                        fingerprint: b.fingerprint(),
                        in_network,
                        op_flops: bc.op_flops(),
                    });
                }
            }
            let c = cache[i].as_ref().unwrap();
            total.0 += c.in_network.params as i128;
            total.1 += c.in_network.flops as i128;
            if rec.step > WALK_STEPS - WINDOW {
                for (&op, &f) in &c.op_flops {
                    *stats.window_flops.entry(op).or_insert(0) += f as u128;
                    stats.window_total += f as u128;
                }
            }
        }
        if full {
            match network_cost(net) {
                Ok(r) => {
                    let p = r.total.params as i128 - (total.0 - base.0);
                    let f = r.total.flops as i128 - (total.1 - base.1);
                    if fixed.is_some_and(|x| x != (p, f)) {
                        stats.failures.push(format!("step {}: block sum disagrees with network cost", rec.step));
                    }
                    fixed = Some((p, f));
                    total = (r.total.params as i128, r.total.flops as i128);
                }
                Err(e) => {
                    stats.failures.push(format!("step {}: {e}", rec.step));
                    return;
                }
            }
        }
        let ledger = (rec.cost.params as i128, rec.cost.flops as i128);
        if total != ledger || !budget.contains(rec.cost) {
            stats.failures.push(format!("step {}: cost {total:?} (ledger {:?})", rec.step, rec.cost));
        }
    });
    if let Err(e) = res {
        stats.failures.push(e.to_string());
    }
    stats.elapsed = t.elapsed();
    stats
}

fn c4_walk_safety(w: &WalkStats) -> Outcome {
    ensure(w.failures.is_empty(), || w.failures.join("; "))?;
    within(w.elapsed, 300)?;
    Ok(format!(
        "{WALK_STEPS} steps, {} accepted edits, {:.1}s",
        w.accepted,
        w.elapsed.as_secs_f64()
    ))
}

fn c5_walk_coverage(w: &WalkStats) -> Outcome {
    ensure(w.window_total > 0, || "no block FLOPs in window".into())?;
    let (top_op, top) = w
        .window_flops
        .iter()
        .max_by_key(|(_, f)| **f)
        .map(|(op, f)| (*op, *f as f64 / w.window_total as f64))
        .unwrap();
    ensure(top <= 0.95, || format!("{top_op} holds {:.1}% of window FLOPs", 100.0 * top))?;
    let insertable: BTreeSet<OpKind> = Template::ALL.iter().flat_map(|t| t.ops().iter().copied()).collect();
    let missing: Vec<_> = insertable.difference(&w.seen).collect();
    ensure(missing.is_empty(), || format!("never inserted: {missing:?}"))?;
    Ok(format!(
        "largest share {top_op} {:.1}%, {} insertable ops all seen",
        100.0 * top,
        insertable.len()
    ))
}

fn c6_entropy() -> Outcome {
    let ln9 = 9f64.ln();
    let u = vkdnw_score(&[0.37; 9]);
    ensure((u - ln9).abs() < 1e-12, || format!("uniform deciles gave {u}"))?;
    let mut point = [0.0; 9];
    point[4] = 2.5;
    ensure(vkdnw_score(&point) == 0.0, || "point-mass deciles nonzero".into())?;
    let mut spike = vec![0.0; 10];
    spike[3] = 7.0;
    let from_spectrum = vkdnw_score(&deciles(&spike));
    ensure(from_spectrum == 0.0, || format!("single-eigenvalue spectrum gave {from_spectrum}"))?;
    let mut rng = Rng::new(6);
    let mut worst_scale: f64 = 0.0;
    for i in 0..10_000 {
        let n = 1 + rng.below(200);
        let spread = 10f64.powf(rng.uniform() * 12.0 - 6.0);
        let spec: Vec<f64> = (0..n)
            .map(|_| {
                if rng.uniform() < 0.2 {
                    0.0
                } else {
                    spread * rng.uniform().powi(1 + (i % 5) as i32)
                }
            })
            .collect();
        let s = vkdnw_score(&deciles(&spec));
        ensure((0.0..=ln9 + 1e-12).contains(&s), || format!("score {s} outside [0, ln 9]"))?;
        let c = 10f64.powf(rng.uniform() * 8.0 - 4.0);
        let scaled: Vec<f64> = spec.iter().map(|v| v * c).collect();
        worst_scale = worst_scale.max((vkdnw_score(&deciles(&scaled)) - s).abs());
    }
    ensure(worst_scale < 1e-12, || format!("scale drift {worst_scale:e}"))?;
    Ok(format!("10000 spectra in bounds, scale drift {worst_scale:.1e}"))
}

fn c7_fd_fidelity() -> Outcome {
    let s = Shape::new(16, 1, 1);
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let gelu_d = move |x: f64| cdf(x) + x * pdf(x);
    let sig_d = |x: f64| {
        let e = (-x).exp();
        e / ((1.0 + e) * (1.0 + e))
    };
    let probes: [(&str, Option<OpKind>, &dyn Fn(f64) -> f64); 3] = [
        ("RelPosBias", None, &|_| 1.0),
        ("RelPosBias+GELU", Some(OpKind::Gelu), &gelu_d),
        ("RelPosBias+Sigmoid", Some(OpKind::Sigmoid), &sig_d),
    ];
    let mut rng = Rng::new(7);
    let mut worst: f64 = 0.0;
    for (name, tail, df) in probes {
        let mut b = BlockGraph::empty(s);
        let r = b.add_node(OpKind::RelPosBias);
        b.connect(INPUT, 0, r, 0);
        match tail {
            Some(op) => {
                let n = b.add_node(op);
                b.connect(r, 0, n, 0);
                b.connect(n, 0, OUTPUT, 0);
            }
            None => b.connect(r, 0, OUTPUT, 0),
        }
        let mut store = init_params(&b, &mut rng).map_err(|e| e.to_string())?;
        ensure(store.len() == 1, || format!("{name}: {} parameters", store.len()))?;
        let theta = rng.standard_normal() * 0.5;
        *store.scalar_mut(0).unwrap() = theta;
        let batch: Vec<Tensor> = (0..8).map(|_| normal_sample(&mut rng, s, 0.0, 1.0)).collect();
        let u = rng.normal_vec(s.numel(), 0.0, 1.0);
        let g = fd_gradients(&b, &store, &batch, &u, 1e-4).map_err(|e| e.to_string())?;
        for (x, row) in batch.iter().zip(&g) {
            let analytic: f64 = x.data().iter().zip(&u).map(|(xi, ui)| ui * df(xi + theta)).sum();
            let rel = (row[0] - analytic).abs() / analytic.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    Ok(format!("3 probes, max relative error {worst:.1e}"))
}

fn evolve_run(threads: usize) -> Result<uninas::search::EvoResult, String> {
    let mut cfg = EvoConfig::new(desk_budget(), ProxyId::NegFlops, 8);
    cfg.total_steps = 200;
    cfg.population_size = 16;
    cfg.generation_size = 8;
    cfg.threads = Some(threads);
    evolve(&desk_seed(), &cfg).map_err(|e| e.to_string())
}

fn c8_evolve() -> Outcome {
    let seed_flops = network_cost(&desk_seed()).map_err(|e| e.to_string())?.total.flops;
    let serial = evolve_run(1)?;
    let threaded = evolve_run(4)?;
    ensure(serial.log.len() == 200, || format!("{} iterations logged", serial.log.len()))?;
    let best = serial.best.cost.flops;
    ensure(best <= seed_flops, || format!("best {best} FLOPs above seed {seed_flops}"))?;
    for w in serial.log.windows(2) {
        ensure(w[1].population_min >= w[0].population_min, || {
            format!("population min fell at iteration {}", w[1].iteration)
        })?;
    }
    ensure(serial.best.net == threaded.best.net && serial.log == threaded.log, || {
        "threaded run diverged from serial run".into()
    })?;
    Ok(format!("best {best} FLOPs vs seed {seed_flops}, serial == threaded"))
}

fn fuzzed_network(i: u64) -> Result<NetworkSpec, String> {
    let mut rng = Rng::derive(9, i);
    let pick = |rng: &mut Rng| BuilderVariant::ALL[rng.below(BuilderVariant::ALL.len())];
    let variants = [pick(&mut rng), pick(&mut rng)];
    let seed = seed_network(&Skeleton::desk(), &variants).map_err(|e| e.to_string())?;
    let cfg = WalkConfig {
        steps: 1 + rng.below(40),
        step: SearchStepConfig::new(uninas::Budget::unbounded()),
        record_every: usize::MAX,
        seed: rng.next_u64(),
    };
    Ok(random_walk(&seed, &cfg).map_err(|e| e.to_string())?.0)
}

fn c9_roundtrip() -> Outcome {
    for i in 0..1000 {
        let net = fuzzed_network(i)?;
        let text = io::serialize(&net).map_err(|e| e.to_string())?;
        let back = io::parse(&text).map_err(|e| format!("network {i}: {e}"))?;
        let same = net.blocks.len() == back.blocks.len()
            && net.blocks.iter().zip(&back.blocks).all(|(a, b)| a.is_isomorphic(b));
        ensure(same, || format!("network {i} changed shape in round trip"))?;
        let (c0, c1) = (network_cost(&net), network_cost(&back));
        ensure(c0.is_ok() && c0 == c1, || format!("network {i}: cost {c0:?} vs {c1:?}"))?;
    }
    let seed = desk_seed();
    let mut cfg = WalkConfig {
        steps: 1500,
        step: SearchStepConfig::new(desk_budget()),
        record_every: 500,
        seed: 10,
    };
    let mut log = random_walk(&seed, &cfg).map_err(|e| e.to_string())?.1;
    while log.edits().count() < 1000 {
        cfg.steps += 500;
        log = random_walk(&seed, &cfg).map_err(|e| e.to_string())?.1;
    }
    let cut = log
        .records
        .iter()
        .scan(0, |n, r| {
            *n += r.edit.is_some() as usize;
            Some(*n)
        })
        .position(|n| n == 1000)
        .unwrap();
    let records = &log.records[..=cut];
    let text = io::write_walk_log(records).map_err(|e| e.to_string())?;
    let read = io::read_walk_log(&text).map_err(|e| e.to_string())?;
    ensure(read == records, || "walk log changed in round trip".into())?;
    let truncated = WalkConfig {
        steps: records.last().unwrap().step,
        ..cfg
    };
    let end = random_walk(&seed, &truncated).map_err(|e| e.to_string())?.0;
    let replayed = replay(&seed, read.iter().filter_map(|r| r.edit.as_ref())).map_err(|e| e.to_string())?;
    let same = replayed.blocks.iter().zip(&end.blocks).all(|(a, b)| a.is_isomorphic(b));
    ensure(same, || "replayed network differs from walk result".into())?;
    Ok("1000 networks round-trip, 1000-edit log replays".into())
}

fn c10_protocol() -> Outcome {
    let n = 8u32;
    let nf = f64::from(n);
    let rows = [
        (Task::Classification, "ImageNet-1k", "FC", 150, 48, "cosine", nf * 1e-6, nf * 1e-4, vec!["rand-m15-n2-mstd0.5"], 0.2, [224, 224]),
        (Task::Detection, "COCO", "Mask R-CNN", 12, 4, "multi-step", nf * 2.5e-6, nf * 2.5e-5, vec!["RandFlip0.5"], 0.1, [1280, 800]),
        (Task::Segmentation, "ADE20K", "UperNet", 125, 4, "linear", 0.0, nf * 1.5e-5, vec!["PhotoMetricDist.", "RandFlip0.5"], 0.3, [512, 512]),
    ];
    let close = |got: &ScaledLr, want: f64| matches!(got, ScaledLr::Value(v) if (v - want).abs() <= 1e-15 * want.abs().max(1.0));
    for (task, data, head, epochs, batch, sched, min_lr, lr, aug, drop, res) in rows {
        let p = protocol(task, Some(n));
        let checks = [
            ("training data", p.training_data == data),
            ("network head", p.network_head == head),
            ("GPU count", p.gpu_count == Some(n)),
            ("epochs", p.epochs == epochs),
            ("warmup epochs", p.warmup_epochs == 5),
            ("batch size", p.batch_size_per_gpu == batch),
            ("optimizer", p.optimizer == "AdamW"),
            ("weight decay", p.weight_decay == 0.05),
            ("LR schedule", p.lr_schedule == sched),
            ("warmup LR", close(&p.warmup_lr, nf * 1e-7)),
            ("minimal LR", close(&p.min_lr, min_lr)),
            ("learning rate", close(&p.learning_rate, lr)),
            ("data aug.", p.data_augmentation == aug),
            ("gradient clip", p.gradient_clip == 1.0),
            ("drop path", p.drop_path == drop),
            ("input resolution", p.input_resolution == res),
        ];
        for (field, ok) in checks {
            ensure(ok, || format!("{task:?} {field}: {p:?}"))?;
        }
        let sym = protocol(task, None);
        ensure(matches!(sym.learning_rate, ScaledLr::Symbolic(ref s) if s.starts_with("N*")), || {
            format!("{task:?}: symbolic learning rate missing")
        })?;
    }
    Ok("3 tasks x 16 fields".into())
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, run: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let res = run();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  {id:>2} {name:<28} {secs:>7.2}s  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {id:>2} {name:<28} {secs:>7.2}s  {why}");
            }
        }
    };
    report(1, "cost oracle", &c1_cost_oracle);
    report(2, "matmul equivalence", &c2_matmul);
    report(3, "attention reconstruction", &c3_attention);
    let walk = desk_walk();
    report(4, "walk safety", &|| c4_walk_safety(&walk));
    report(5, "walk non-degeneracy", &|| c5_walk_coverage(&walk));
    report(6, "decile entropy", &c6_entropy);
    report(7, "finite differences", &c7_fd_fidelity);
    report(8, "evolve contract", &c8_evolve);
    report(9, "round-trip and replay", &c9_roundtrip);
    report(10, "protocol table", &c10_protocol);
    if failed == 0 {
        println!("acceptance: 10/10 passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 10 failed");
        ExitCode::FAILURE
    }
}
