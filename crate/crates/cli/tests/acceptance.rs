//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero when any criterion fails.
//!
//! `cargo test --test acceptance -- 4 6` runs a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gcpc::checkpoint::{load_policy, load_trajnet, save_policy, save_trajnet, PolicyCheckpoint, TrajNetCheckpoint};
use gcpc::data::{
    build_mask, return_to_go, sample_goal, Dataset, DatasetMeta, Goal, GoalMode, NormStats, Objective, Trajectory,
    MASK_RATIOS,
};
use gcpc::envs::{collect_dataset, CollectorConfig, EnvSpec};
use gcpc::eval::{aggregate_seeds, best_of_last_k};
use gcpc::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
use gcpc::pipeline::{default_recon_dims, run_eval, run_train_policy, run_train_trajnet, RunConfig};
use gcpc::policy::{
    decode_explicit_future, draw_policy_sample, train_policy, Conditioning, Observation, PolicyConfig, PolicyLayout,
    PolicyNet,
};
use gcpc::trajnet::{assemble, draw_sample, model_dims, train_trajnet, unmasked_input, TrajNet, TrajNetConfig};
use gcpc::{BoundParams, Error, ParamSet, RngStream, Tape, Tensor, Var};

type T64 = Tensor<f64>;
type Loss = Box<dyn Fn(&mut Tape<f64>, &BoundParams, &[Var]) -> Var>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, fn() -> Verdict); 10] = [
        (1, gradients),
        (2, masking),
        (3, goal_sampling),
        (4, training_sanity),
        (5, goal_conditioning),
        (6, end_to_end_ordering),
        (7, explicit_future),
        (8, protocol),
        (9, determinism),
        (10, checkpoints),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = std::panic::catch_unwind(run)
            .unwrap_or_else(|e| verdict(false, format!("panicked: {}", panic_message(&e))));
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {n}: {} ({:.1}s)", v.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn dataset(env: &EnvSpec, cfg: &CollectorConfig, seed: u64) -> (Dataset, NormStats) {
    let (meta, trajs) = collect_dataset(env, cfg, seed).unwrap();
    let ds = Dataset::new(meta, trajs).unwrap();
    let stats = NormStats::compute(&ds.meta, ds.train_trajectories()).unwrap();
    (ds, stats)
}

fn maze(layout: &str) -> EnvSpec {
    EnvSpec::minimaze(layout).unwrap()
}

// ----- 1: finite differences ---------------------------------------------

fn random(shape: &[usize], rng: &mut RngStream) -> T64 {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// `sum(out ⊙ r)` with a fixed random `r`.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let r = random(tape.shape(out), &mut RngStream::new(seed));
    let r = tape.constant(r);
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod).unwrap()
}

/// Central differences with h = 1e-6 over every parameter and input entry.
/// Returns `max|a − n| / max(max|a|, max|n|)` over the whole gradient.
fn fd_rel(params: &ParamSet<f64>, inputs: &[T64], f: &dyn Fn(&mut Tape<f64>, &BoundParams, &[Var]) -> Var) -> f64 {
    let h = 1e-6;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&mut tape, &p, &vars);
    let mut grads = tape.backward(loss).unwrap();
    let mut analytic: Vec<T64> =
        vars.iter().zip(inputs).map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))).collect();
    analytic.extend(p.collect_grads(params, &mut grads));

    let eval = |ps: &ParamSet<f64>, xs: &[T64]| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = f(&mut tape, &p, &vars);
        tape.value(l).item()
    };
    let (mut diff, mut scale) = (0.0f64, 1e-8f64);
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(params, &xs);
            xs[i].data_mut()[j] = orig - h;
            let down = eval(params, &xs);
            xs[i].data_mut()[j] = orig;
            let n = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    let mut ps = params.clone();
    for i in 0..ps.len() {
        for j in 0..ps.tensors()[i].len() {
            let orig = ps.tensors()[i].data()[j];
            ps.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = eval(&ps, inputs);
            ps.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = eval(&ps, inputs);
            ps.tensors_mut()[i].data_mut()[j] = orig;
            let n = (up - down) / (2.0 * h);
            let a = analytic[inputs.len() + i].data()[j];
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    diff / scale
}

fn perturb(params: &mut ParamSet<f64>, std: f64, rng: &mut RngStream) {
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
    }
}

fn dims(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

fn key_mask(batch: usize, seq: usize, rng: &mut RngStream) -> Vec<bool> {
    let mut m: Vec<bool> = (0..batch * seq).map(|_| rng.uniform_range(0.0, 1.0) < 0.4).collect();
    for b in 0..batch {
        m[b * seq + rng.index(seq)] = false;
    }
    m
}

const OP_KINDS: [&str; 21] = [
    "add", "sub", "mul", "scalar", "matmul", "batched_matmul", "linear", "linear_nobias", "softmax", "layer_norm",
    "gelu", "relu", "dropout", "attention", "masked_attention", "sum", "sse", "mse", "concat_slice",
    "reshape_expand", "mask_rows",
];

fn op_case(kind: &str, seed: u64) -> (Vec<T64>, Loss) {
    let mut rng = RngStream::new(seed);
    let (a, b, c) = (dims(&mut rng, 1, 3), dims(&mut rng, 2, 4), dims(&mut rng, 2, 5));
    let s = seed;
    match kind {
        "add" | "sub" | "mul" => {
            let x = random(&[a, b, c], &mut rng);
            let y = if rng.index(2) == 0 { random(&[c], &mut rng) } else { random(&[a, b, c], &mut rng) };
            let kind = kind.to_string();
            let f: Loss = Box::new(move |t, _, v| {
                let o = match kind.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }
                .unwrap();
                project(t, o, s)
            });
            (vec![x, y], f)
        }
        "scalar" => {
            let (k1, k2) = (rng.normal(), rng.normal());
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.add_scalar(v[0], k1).unwrap();
                let o = t.mul_scalar(o, k2).unwrap();
                let o = t.mul(o, v[0]).unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, c], &mut rng)], f)
        }
        "matmul" => {
            let n = dims(&mut rng, 1, 4);
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.matmul(v[0], v[1]).unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, b, c], &mut rng), random(&[c, n], &mut rng)], f)
        }
        "batched_matmul" => {
            let n = dims(&mut rng, 1, 4);
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.matmul(v[0], v[1]).unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, b, c], &mut rng), random(&[a, c, n], &mut rng)], f)
        }
        "linear" | "linear_nobias" => {
            let n = dims(&mut rng, 1, 4);
            let bias = kind == "linear";
            let mut inputs = vec![random(&[a, b, c], &mut rng), random(&[n, c], &mut rng)];
            if bias {
                inputs.push(random(&[n], &mut rng));
            }
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.linear(v[0], v[1], v.get(2).copied()).unwrap();
                project(t, o, s)
            });
            (inputs, f)
        }
        "softmax" | "gelu" | "relu" => {
            let kind = kind.to_string();
            let f: Loss = Box::new(move |t, _, v| {
                let o = match kind.as_str() {
                    "softmax" => t.softmax(v[0]),
                    "gelu" => t.gelu(v[0]),
                    _ => t.relu(v[0]),
                }
                .unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, b, c], &mut rng)], f)
        }
        "layer_norm" => {
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, b, c + 1], &mut rng), random(&[c + 1], &mut rng), random(&[c + 1], &mut rng)], f)
        }
        "dropout" => {
            let rate = rng.uniform_range(0.1, 0.6);
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.dropout(v[0], rate, &mut RngStream::new(s), true).unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, b, c], &mut rng)], f)
        }
        "attention" | "masked_attention" => {
            let heads = dims(&mut rng, 1, 2);
            let d = heads * dims(&mut rng, 1, 3);
            let mask = (kind == "masked_attention").then(|| key_mask(a, b, &mut rng));
            let f: Loss = Box::new(move |t, _, v| {
                let o = t.attention(v[0], v[1], v[2], heads, mask.as_deref()).unwrap();
                project(t, o, s)
            });
            (vec![random(&[a, b, d], &mut rng), random(&[a, b, d], &mut rng), random(&[a, b, d], &mut rng)], f)
        }
        "sum" => {
            let f: Loss = Box::new(move |t, _, v| {
                let sum = t.sum(v[0]).unwrap();
                t.mul(sum, sum).unwrap()
            });
            (vec![random(&[a, b, c], &mut rng)], f)
        }
        "sse" | "mse" => {
            let target = random(&[a, b, c], &mut rng);
            let weights: Vec<f64> = (0..a * b * c).map(|i| if i % 3 == 0 { 0.0 } else { rng.uniform_range(0.5, 2.0) }).collect();
            let sse = kind == "sse";
            let f: Loss = Box::new(move |t, _, v| {
                if sse {
                    t.sse(v[0], &target, &weights).unwrap()
                } else {
                    t.mse(v[0], &target, Some(&weights)).unwrap()
                }
            });
            (vec![random(&[a, b, c], &mut rng)], f)
        }
        "concat_slice" => {
            let f: Loss = Box::new(move |t, _, v| {
                let cat = t.concat(&[v[0], v[1]], 1).unwrap();
                let sl = t.slice(cat, 1, 1, b).unwrap();
                project(t, sl, s)
            });
            (vec![random(&[a, b, c], &mut rng), random(&[a, 2, c], &mut rng)], f)
        }
        "reshape_expand" => {
            let n = dims(&mut rng, 1, 3);
            let f: Loss = Box::new(move |t, _, v| {
                let r = t.reshape(v[0], &[a * b, c]).unwrap();
                let e = t.expand(r, n).unwrap();
                project(t, e, s)
            });
            (vec![random(&[a, b, c], &mut rng)], f)
        }
        "mask_rows" => {
            let mask: Vec<bool> = (0..a * b).map(|_| rng.index(2) == 0).collect();
            let f: Loss = Box::new(move |t, _, v| {
                let m = t.mask_rows(v[0], v[1], &mask).unwrap();
                project(t, m, s)
            });
            (vec![random(&[a, b, c], &mut rng), random(&[c], &mut rng)], f)
        }
        other => panic!("unknown op {other}"),
    }
}

const BLOCK_KINDS: [&str; 5] = ["linear", "layer_norm", "attention", "transformer_block", "mlp"];

fn block_case(kind: &str, seed: u64) -> (ParamSet<f64>, Vec<T64>, Loss) {
    let mut rng = RngStream::new(seed);
    let (batch, seq) = (dims(&mut rng, 1, 2), dims(&mut rng, 2, 4));
    let heads = dims(&mut rng, 1, 2);
    let width = heads * 2 * dims(&mut rng, 1, 2);
    let mut params = ParamSet::new();
    let s = seed;
    let x = random(&[batch, seq, width], &mut rng);
    let mask = (rng.index(2) == 0).then(|| key_mask(batch, seq, &mut rng));
    let f: Loss = match kind {
        "linear" => {
            let out = dims(&mut rng, 1, 5);
            let l = Linear::new(&mut params, "l", width, out, &mut rng);
            Box::new(move |t, p, v| {
                let o = l.forward(t, p, v[0]).unwrap();
                project(t, o, s)
            })
        }
        "layer_norm" => {
            let l = LayerNorm::new(&mut params, "ln", width);
            Box::new(move |t, p, v| {
                let o = l.forward(t, p, v[0]).unwrap();
                project(t, o, s)
            })
        }
        "attention" => {
            let a = MultiHeadAttention::new(&mut params, "attn", width, heads, &mut rng);
            Box::new(move |t, p, v| {
                let o = a.forward(t, p, v[0], mask.as_deref()).unwrap();
                project(t, o, s)
            })
        }
        "transformer_block" => {
            let dropout = if rng.index(2) == 0 { 0.0 } else { 0.2 };
            let b = TransformerBlock::new(&mut params, "block", width, heads, dropout, &mut rng);
            Box::new(move |t, p, v| {
                let o = b.forward(t, p, v[0], mask.as_deref(), &mut RngStream::new(s), true).unwrap();
                project(t, o, s)
            })
        }
        "mlp" => {
            let widths = [width, dims(&mut rng, 3, 6), dims(&mut rng, 3, 6), dims(&mut rng, 1, 3)];
            let m = Mlp::new(&mut params, "mlp", &widths, &mut rng);
            Box::new(move |t, p, v| {
                let o = m.forward(t, p, v[0]).unwrap();
                project(t, o, s)
            })
        }
        other => panic!("unknown block {other}"),
    };
    perturb(&mut params, 0.3, &mut rng);
    (params, vec![x], f)
}

fn trajnet_cases() -> Vec<(EnvSpec, TrajNetConfig)> {
    let small = |objective| TrajNetConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        n_slots: 2,
        k: 4,
        p: 3,
        objective,
        dropout: 0.0,
        ..Default::default()
    };
    let junction = maze("junction-T");
    let mut cases: Vec<(EnvSpec, TrajNetConfig)> = Objective::ALL.iter().map(|&o| (junction.clone(), small(o))).collect();
    cases.extend([
        (junction.clone(), TrajNetConfig { include_actions: true, ..small(Objective::MaeAll) }),
        (junction.clone(), TrajNetConfig { goal_conditioning: false, loss_masked_only: true, ..small(Objective::MaeH) }),
        (junction.clone(), TrajNetConfig { dropout: 0.2, encoder_layers: 2, ..small(Objective::MaeRc) }),
        (junction.clone(), TrajNetConfig { n_slots: 3, d_model: 12, n_heads: 3, ..small(Objective::MaeF) }),
        (EnvSpec::Linerun, TrajNetConfig { include_actions: true, ..small(Objective::MaeF) }),
        (EnvSpec::Linerun, small(Objective::AeH)),
        (EnvSpec::Linerun, TrajNetConfig { dropout: 0.1, ..small(Objective::MaeRc) }),
    ]);
    cases
}

fn trajnet_fd(env: &EnvSpec, config: &TrajNetConfig, seed: u64) -> f64 {
    let cfg = CollectorConfig { n_trajectories: 4, play_length: Some(40), ..Default::default() };
    let (ds, stats) = dataset(env, &cfg, seed);
    let md = model_dims(&ds, config, &default_recon_dims(&ds)).unwrap();
    let mut rng = RngStream::new(seed);
    let mut model = TrajNet::new(config.clone(), md, &mut rng).unwrap();
    perturb(&mut model.params, 0.1, &mut rng);
    let samples: Vec<_> = (0..3).map(|i| draw_sample(&ds, i % ds.trajectories.len(), config, &mut rng).unwrap()).collect();
    let batch = assemble(&ds, &stats, config, &model.dims, &samples).unwrap();
    let training = config.dropout > 0.0;
    let m = model.clone();
    let f = move |t: &mut Tape<f64>, p: &BoundParams, _: &[Var]| {
        let mut rng = RngStream::new(seed);
        let b = m.encode(t, p, &batch.input, &mut rng, training).unwrap();
        let r = m.decode(t, p, b, &mut rng, training).unwrap();
        m.loss(t, &r, &batch.targets).unwrap()
    };
    fd_rel(&model.params, &[], &f)
}

fn policy_fd(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let layout = PolicyLayout {
        state_dim: dims(&mut rng, 1, 5),
        goal_dim: dims(&mut rng, 1, 2),
        cond_width: dims(&mut rng, 0, 8),
        action_dim: dims(&mut rng, 1, 3),
    };
    let config = PolicyConfig { hidden_width: dims(&mut rng, 3, 8), hidden_layers: dims(&mut rng, 1, 2), ..Default::default() };
    let mut policy = PolicyNet::<f64>::new(config, layout, &mut rng).unwrap();
    for t in policy.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    }
    let n = dims(&mut rng, 1, 4);
    let x = random(&[n, layout.input_width()], &mut rng);
    let y = random(&[n, layout.action_dim], &mut rng);
    let net = policy.clone();
    let f = move |t: &mut Tape<f64>, p: &BoundParams, v: &[Var]| {
        let out = net.forward(t, p, v[0]).unwrap();
        t.mse(out, &y, None).unwrap()
    };
    fd_rel(&policy.params, &[x], &f)
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let tol = 1e-5;
    let mut results: Vec<(String, f64)> = Vec::new();
    for (i, kind) in OP_KINDS.iter().enumerate() {
        for rep in 0..3u64 {
            let seed = 100 + 10 * i as u64 + rep;
            let (inputs, f) = op_case(kind, seed);
            results.push((format!("op {kind} #{rep}"), fd_rel(&ParamSet::new(), &inputs, &*f)));
        }
    }
    for (i, kind) in BLOCK_KINDS.iter().enumerate() {
        for rep in 0..4u64 {
            let seed = 500 + 10 * i as u64 + rep;
            let (params, inputs, f) = block_case(kind, seed);
            results.push((format!("block {kind} #{rep}"), fd_rel(&params, &inputs, &*f)));
        }
    }
    for (i, (env, config)) in trajnet_cases().iter().enumerate() {
        results.push((format!("trajnet {} {:?} #{i}", config.objective, env), trajnet_fd(env, config, 700 + i as u64)));
    }
    for i in 0..10u64 {
        results.push((format!("policy #{i}"), policy_fd(900 + i)));
    }
    let elapsed = start.elapsed();
    let (worst_name, worst) = results.iter().fold((String::new(), 0.0f64), |acc, (n, e)| {
        if *e > acc.1 || e.is_nan() {
            (n.clone(), *e)
        } else {
            acc
        }
    });
    let n = results.len();
    let pass = n >= 100 && worst <= tol && secs(elapsed) < 120.0;
    verdict(pass, format!("{n} configurations, worst relative error {worst:.2e} ({worst_name}), tolerance {tol:.0e}, limit 120s"))
}

// ----- 2: masking -------------------------------------------------------------

fn masking() -> Verdict {
    let mut rng = RngStream::new(2);
    let mut errors = Vec::new();
    for o in Objective::ALL {
        for trial in 0..1000 {
            let k = 1 + rng.index(12);
            let p = 1 + rng.index(40);
            let m = build_mask(o, k, p, &mut rng).unwrap();
            let r = m.ratio;
            let rc = |n: usize| (r * n as f64).round() as usize;
            let (hist, fut, fut_in, fut_tgt) = match o {
                Objective::AeH => (0, 0, false, false),
                Objective::MaeH => (rc(k), 0, false, false),
                Objective::MaeF => (0, p, true, true),
                Objective::MaeRc => (rc(k), p, true, true),
                Objective::MaeAll => (rc(k), rc(p), true, true),
            };
            let ok = m.input_mask.len() == k + p
                && m.input_mask[..k].iter().filter(|&&b| b).count() == hist
                && m.input_mask[k..].iter().filter(|&&b| b).count() == fut
                && m.input_layout().len() == if fut_in { k + p } else { k }
                && m.target[..k].iter().all(|&b| b)
                && m.target[k..].iter().all(|&b| b == fut_tgt)
                && MASK_RATIOS.contains(&r);
            if !ok {
                errors.push(format!("{o} trial {trial} k={k} p={p} r={r}"));
            }
        }
    }
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let m = build_mask(Objective::MaeRc, 10, 40, &mut rng).unwrap();
        counts[MASK_RATIOS.iter().position(|&r| r == m.ratio).unwrap()] += 1;
    }
    let worst = counts.iter().map(|&c| (c as f64 / n as f64 / 0.2 - 1.0).abs()).fold(0.0, f64::max);
    let pass = errors.is_empty() && worst <= 0.02;
    verdict(
        pass,
        format!(
            "{} objectives x 1000 trials, {} mismatches{}; ratio counts {counts:?} over 1e5 draws, max relative deviation from 1/5 {:.4} (limit 0.02)",
            Objective::ALL.len(),
            errors.len(),
            errors.first().map(|e| format!(" (first: {e})")).unwrap_or_default(),
            worst
        ),
    )
}

// ----- 3: goal sampling ---------------------------------------------------------

fn test_meta(mode: GoalMode, h_max: usize) -> DatasetMeta {
    DatasetMeta {
        env_id: "acceptance".into(),
        layout: None,
        state_dim: 3,
        action_dim: 1,
        max_episode_steps: h_max,
        goal_mode: mode,
        goal_subspace: vec![0, 2],
        reference_scores: None,
        split_seed: 0,
    }
}

fn random_traj(rng: &mut RngStream, h: usize) -> Trajectory {
    Trajectory {
        states: (0..h).map(|_| (0..3).map(|_| rng.normal()).collect()).collect(),
        actions: (0..h).map(|_| vec![rng.uniform_range(-1.0, 1.0)]).collect(),
        rewards: Some((0..h).map(|_| rng.uniform_range(-2.0, 5.0)).collect()),
    }
}

fn goal_sampling() -> Verdict {
    let mut rng = RngStream::new(3);
    let trials = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let h = 1 + rng.index(80);
        let h_max = h + rng.index(30);
        let tr = random_traj(&mut rng, h);
        let t = rng.index(h);
        let Goal::ReturnToGo(v) = sample_goal(&tr, t, &test_meta(GoalMode::ReturnToGo, h_max), &mut rng).unwrap() else {
            return verdict(false, "return-to-go mode produced a target goal".into());
        };
        let rewards = tr.rewards.as_ref().unwrap();
        // 1-based step t1 = t + 1: (1 / (H_max − t1 + 1)) Σ_{i ≥ t1} r_i.
        let t1 = t + 1;
        let expected = rewards[t..].iter().sum::<f64>() / (h_max - t1 + 1) as f64;
        worst = worst.max((v - expected).abs()).max((return_to_go(rewards, t, h_max) - expected).abs());
    }
    let mut misses = 0;
    for _ in 0..trials {
        let h = 2 + rng.index(60);
        let tr = random_traj(&mut rng, h);
        let t = rng.index(h - 1);
        match sample_goal(&tr, t, &test_meta(GoalMode::TargetState, h), &mut rng).unwrap() {
            Goal::Target(g) if tr.states[t + 1..].iter().any(|s| s[0] == g[0] && s[2] == g[1] && g.len() == 2) => {}
            _ => misses += 1,
        }
    }
    let pass = worst <= 1e-12 && misses == 0;
    verdict(
        pass,
        format!("rtg max abs error {worst:.1e} over {trials} trials (limit 1e-12); target goals off a future state slice: {misses}/{trials}"),
    )
}

// ----- 4: training sanity -------------------------------------------------------

fn training_sanity() -> Verdict {
    let env = maze("corridor-S");
    let (ds, _) = dataset(&env, &CollectorConfig::default(), 0);
    let mut cfg = RunConfig::defaults_for(&env);
    cfg.trajnet.objective = Objective::MaeRc;
    cfg.trajnet.epochs = 20;
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let s = run_train_trajnet(&cfg, &ds, 0, dir.path()).unwrap();
    let elapsed = secs(start.elapsed());
    let ratio = s.final_validation_loss / s.first_validation_loss;
    let pass = ratio <= 0.5 && elapsed < 300.0 && ds.trajectories.len() == 200;
    verdict(
        pass,
        format!(
            "MAE-RC on {} corridor-S trajectories, 20 epochs: epoch-1 val {:.4}, final val {:.4}, ratio {ratio:.3} (limit 0.5), train time {elapsed:.0}s (limit 300s)",
            ds.trajectories.len(),
            s.first_validation_loss,
            s.final_validation_loss
        ),
    )
}

// ----- 5: goal conditioning -----------------------------------------------------

/// MAE-F schedule per run; six runs must share the ten minute budget.
const GOAL_ABLATION_EPOCHS: usize = 12;
const GOAL_ABLATION_BATCH: usize = 64;

fn goal_conditioning() -> Verdict {
    let env = maze("junction-T");
    let (ds, _) = dataset(&env, &CollectorConfig::default(), 0);
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3u64 {
        let mut losses = [0.0; 2];
        for (slot, gc) in [(0, true), (1, false)] {
            let mut cfg = RunConfig::defaults_for(&env);
            cfg.trajnet.objective = Objective::MaeF;
            cfg.trajnet.goal_conditioning = gc;
            cfg.trajnet.epochs = GOAL_ABLATION_EPOCHS;
            cfg.trajnet.batch_size = GOAL_ABLATION_BATCH;
            let dir = tempfile::tempdir().unwrap();
            losses[slot] = run_train_trajnet(&cfg, &ds, seed, dir.path()).unwrap().final_validation_loss;
        }
        let gain = 1.0 - losses[0] / losses[1];
        wins += usize::from(gain >= 0.10);
        lines.push(format!("seed {seed}: {:.4} vs {:.4} ({:.1}% lower)", losses[0], losses[1], 100.0 * gain));
    }
    let elapsed = secs(start.elapsed());
    let pass = wins == 3 && elapsed < 600.0;
    verdict(
        pass,
        format!(
            "junction-T MAE-F final val loss with vs without goal, {GOAL_ABLATION_EPOCHS} epochs at batch {GOAL_ABLATION_BATCH}: {}; {wins}/3 seeds >= 10% lower, {elapsed:.0}s (limit 600s)",
            lines.join("; ")
        ),
    )
}

// ----- 6: end-to-end ordering ---------------------------------------------------

/// Ordering-run schedule. Desk defaults (20 TrajNet epochs, 64 policy
/// samples per trajectory, 100 episodes) take ~17 min per seed on one core.
const ORDERING_TRAJNET_EPOCHS: usize = 10;
const ORDERING_POLICY_WINDOWS: usize = 32;
const ORDERING_EPISODES: usize = 50;

fn end_to_end_ordering() -> Verdict {
    let env = maze("corridor-S");
    let (ds, _) = dataset(&env, &CollectorConfig::default(), 0);
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let threads = gcpc::pipeline::threads_from_env().unwrap();
    let mut scores: [Vec<f64>; 3] = Default::default();
    let arms = [("bc", None), ("mae-rc", Some(Objective::MaeRc)), ("mae-h", Some(Objective::MaeH))];
    for seed in 0..3u64 {
        for (arm, (name, objective)) in arms.iter().enumerate() {
            let mut cfg = RunConfig::defaults_for(&env);
            cfg.trajnet.epochs = ORDERING_TRAJNET_EPOCHS;
            cfg.policy.windows_per_trajectory = ORDERING_POLICY_WINDOWS;
            cfg.eval.n_episodes = Some(ORDERING_EPISODES);
            let dir = root.path().join(format!("{name}-{seed}"));
            let trajnet = objective.map(|o| {
                cfg.trajnet.objective = o;
                run_train_trajnet(&cfg, &ds, seed, &dir).unwrap().checkpoint
            });
            cfg.policy.conditioning = if trajnet.is_some() { Conditioning::Bottleneck } else { Conditioning::None };
            run_train_policy(&cfg, &ds, trajnet.as_deref(), seed, &dir).unwrap();
            let report = run_eval(&[dir.clone()], &[seed], &cfg.eval, threads, None).unwrap();
            scores[arm].push(report.records[0].chosen);
        }
    }
    let elapsed = secs(start.elapsed());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (bc, rc, h) = (mean(&scores[0]), mean(&scores[1]), mean(&scores[2]));
    let pass = rc >= bc + 10.0 && rc >= h && elapsed < 1800.0;
    verdict(
        pass,
        format!(
            "corridor-S mean best-of-last-5 over 3 seeds: GCPC(MAE-RC) {rc:.1} {:?}, BC {bc:.1} {:?}, MAE-H {h:.1} {:?}; need MAE-RC >= BC + 10 and MAE-RC >= MAE-H; {elapsed:.0}s (limit 1800s)",
            scores[1], scores[0], scores[2]
        ),
    )
}

// ----- 7: explicit future -------------------------------------------------------

fn explicit_future() -> Verdict {
    let env = maze("junction-T");
    let cfg_data = CollectorConfig { n_trajectories: 16, play_length: Some(60), ..Default::default() };
    let (ds, stats) = dataset(&env, &cfg_data, 7);
    let mut cfg = RunConfig::defaults_for(&env);
    cfg.trajnet = TrajNetConfig {
        d_model: 16,
        n_heads: 2,
        encoder_layers: 1,
        n_slots: 2,
        k: 5,
        p: 6,
        epochs: 2,
        batch_size: 32,
        windows_per_trajectory: 4,
        validation_windows: 2,
        ..Default::default()
    };
    cfg.policy = PolicyConfig { hidden_width: 32, epochs: 2, batch_size: 32, windows_per_trajectory: 8, ..Default::default() };
    cfg.eval.n_episodes = Some(2);
    cfg.eval.episode_cap = Some(40);
    let root = tempfile::tempdir().unwrap();
    let t = run_train_trajnet(&cfg, &ds, 1, &root.path().join("t")).unwrap();
    let model = load_trajnet(&t.checkpoint).unwrap().model;

    let mut rng = RngStream::new(4);
    let obs: Vec<Observation> = (0..6).map(|i| draw_policy_sample(&ds, &stats, i, model.config.k, &mut rng).unwrap().obs).collect();
    let histories: Vec<_> = obs.iter().map(|o| o.history.clone()).collect();
    let goals: Vec<_> = obs.iter().map(|o| o.goal.clone()).collect();
    let input = unmasked_input(&model.config, &model.dims, &stats, &histories, None, Some(&goals)).unwrap();
    let b = model.bottleneck(&input).unwrap();
    let (states, _) = model.decode_values(&b).unwrap();
    let explicit = decode_explicit_future(&model, &stats, &b).unwrap();
    let (k, p, r) = (model.config.k, model.config.p, model.dims.recon_dims.len());
    let span = k + p;
    let mut exact = explicit.shape() == [obs.len(), p, r];
    for i in 0..obs.len() {
        for j in 0..p {
            for (d, &dim) in model.dims.recon_dims.iter().enumerate() {
                let z = states.data()[(i * span + k + j) * r + d];
                let want = z * stats.state_std[dim] + stats.state_mean[dim];
                exact &= explicit.data()[(i * p + j) * r + d].to_bits() == want.to_bits();
            }
        }
    }

    let mut smoke = Vec::new();
    for mode in [Conditioning::Bottleneck, Conditioning::ExplicitFuture] {
        let mut c = cfg.clone();
        c.policy.conditioning = mode;
        let dir = root.path().join(format!("{mode:?}"));
        let outcome = run_train_policy(&c, &ds, Some(&t.checkpoint), 1, &dir)
            .and_then(|_| run_eval(&[dir.clone()], &[0], &c.eval, 1, None));
        smoke.push(match outcome {
            Ok(rep) => format!("{mode:?} ok (score {:.0})", rep.records[0].chosen),
            Err(e) => format!("{mode:?} failed: {e}"),
        });
    }
    let smoke_ok = smoke.iter().all(|s| s.contains(" ok "));
    verdict(
        exact && smoke_ok,
        format!("explicit future bit-exact vs decoder tail: {exact}; 2-epoch smoke runs: {}", smoke.join(", ")),
    )
}

// ----- 8: protocol --------------------------------------------------------------

fn protocol() -> Verdict {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    check("last-5 of rising", best_of_last_k(&[10.0, 20.0, 30.0, 40.0, 50.0, 60.0], 5).unwrap() == 60.0);
    check("early peak ignored", best_of_last_k(&[5.0, 1.0, 2.0, 3.0, 4.0, 0.0], 5).unwrap() == 4.0);
    check("single checkpoint", best_of_last_k(&[7.0], 5).unwrap() == 7.0);
    check("empty rejected", best_of_last_k(&[], 5).is_err());
    let mut rng = RngStream::new(8);
    let never_below = (0..200).all(|_| {
        let n = 1 + rng.index(9);
        let s: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 100.0)).collect();
        best_of_last_k(&s, 5).unwrap() >= *s.last().unwrap()
    });
    check("chosen >= final", never_below);
    let iqm = aggregate_seeds(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    check("IQM([1,2,3,4]) = 2.5", iqm.iqm == 2.5);
    let c = aggregate_seeds(&[42.0; 5]).unwrap();
    check("constant seeds", (c.mean, c.std, c.median, c.iqm) == (42.0, 0.0, 42.0, 42.0));
    let two = aggregate_seeds(&[0.0, 100.0]).unwrap();
    check("sample std", two.mean == 50.0 && (two.std - 50.0 * 2f64.sqrt()).abs() < 1e-12);
    check("single seed", aggregate_seeds(&[3.0]).map(|a| (a.n_seeds, a.std)).ok() == Some((1, 0.0)));
    check("no seeds rejected", aggregate_seeds(&[]).is_err());
    check("order free", aggregate_seeds(&[4.0, 1.0, 3.0, 2.0]).unwrap() == iqm);
    verdict(fails.is_empty(), if fails.is_empty() { "11 examples reproduced".into() } else { format!("failed: {}", fails.join(", ")) })
}

// ----- 9: determinism -----------------------------------------------------------

const TINY: &str = r#"{
  "data": {"play_length": 60},
  "trajnet": {"d_model": 16, "n_heads": 2, "encoder_layers": 1, "n_slots": 2, "k": 5, "p": 8,
              "epochs": 3, "batch_size": 32, "windows_per_trajectory": 4, "validation_windows": 2},
  "policy": {"hidden_width": 32, "epochs": 6, "batch_size": 32, "windows_per_trajectory": 8},
  "eval": {"n_episodes": 4, "episode_cap": 60}
}"#;

fn gcpc_cmd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gcpc")).args(args).env("GCPC_THREADS", "1").output().unwrap()
}

fn pipeline_artifacts(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let _ = fs::remove_dir_all(root);
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let config = root.join("config.json");
    fs::write(&config, TINY).map_err(|e| e.to_string())?;
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let (data, t, pol) = (root.join("data"), root.join("trajnet"), root.join("policy"));
    let steps: [Vec<String>; 4] = [
        vec!["gen-data".into(), "--env".into(), "minimaze".into(), "--layout".into(), "junction-T".into(), "--n".into(), "24".into(), "--seed".into(), "5".into(), "--config".into(), p(&config), "--out".into(), p(&data)],
        vec!["train-trajnet".into(), "--config".into(), p(&config), "--data".into(), p(&data), "--seed".into(), "2".into(), "--out".into(), p(&t)],
        vec!["train-policy".into(), "--config".into(), p(&config), "--data".into(), p(&data), "--trajnet".into(), p(&t.join("trajnet.ckpt")), "--seed".into(), "2".into(), "--out".into(), p(&pol)],
        vec!["eval".into(), "--run".into(), p(&pol), "--seeds".into(), "0,1".into()],
    ];
    for args in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = gcpc_cmd(&args);
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    let mut files = Vec::new();
    for rel in ["trajnet/metrics.jsonl", "policy/metrics.jsonl", "policy/report.json"] {
        files.push((rel.to_string(), fs::read(root.join(rel)).map_err(|e| format!("{rel}: {e}"))?));
    }
    Ok(files)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let first = pipeline_artifacts(&root);
    let second = pipeline_artifacts(&root);
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
            let sizes: Vec<String> = a.iter().map(|(n, bytes)| format!("{n} {}B", bytes.len())).collect();
            verdict(
                differing.is_empty(),
                format!("two GCPC_THREADS=1 runs of gen-data, train-trajnet, train-policy, eval: {}; differing: {differing:?}", sizes.join(", ")),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

// ----- 10: checkpoints ----------------------------------------------------------

fn corrupt(path: &Path, name: &str, f: impl FnOnce(&mut Vec<u8>)) -> PathBuf {
    let mut bytes = fs::read(path).unwrap();
    f(&mut bytes);
    let out = path.with_file_name(name);
    fs::write(&out, bytes).unwrap();
    out
}

fn checkpoints() -> Verdict {
    let env = maze("junction-T");
    let cfg_data = CollectorConfig { n_trajectories: 8, play_length: Some(40), ..Default::default() };
    let (ds, stats) = dataset(&env, &cfg_data, 3);
    let config = TrajNetConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        n_slots: 2,
        k: 4,
        p: 3,
        epochs: 1,
        batch_size: 8,
        windows_per_trajectory: 2,
        ..Default::default()
    };
    let md = model_dims(&ds, &config, &default_recon_dims(&ds)).unwrap();
    let out = train_trajnet(&ds, &stats, &config, md, 0, |_| Ok(())).unwrap();
    let t = TrajNetCheckpoint { model: out.model, adam: Some(out.adam), stats: stats.clone(), dataset: ds.meta.clone(), epoch: 1 };
    let dir = tempfile::tempdir().unwrap();
    let tpath = dir.path().join("trajnet.ckpt");
    save_trajnet(&tpath, &t).unwrap();
    let back = load_trajnet(&tpath).unwrap();
    let mut rng = RngStream::new(2);
    let samples: Vec<_> = (0..4).map(|i| draw_sample(&ds, i, &config, &mut rng).unwrap()).collect();
    let batch = assemble(&ds, &stats, &config, &t.model.dims, &samples).unwrap();
    let (b0, b1) = (t.model.bottleneck(&batch.input).unwrap(), back.model.bottleneck(&batch.input).unwrap());
    let trajnet_exact = back.model.params.tensors() == t.model.params.tensors()
        && b0 == b1
        && t.model.decode_values(&b0).unwrap() == back.model.decode_values(&b1).unwrap();

    let mut policy_exact = true;
    let mut ppath = PathBuf::new();
    for mode in [Conditioning::Bottleneck, Conditioning::ExplicitFuture, Conditioning::None] {
        let pc = PolicyConfig { hidden_width: 8, epochs: 1, batch_size: 16, windows_per_trajectory: 4, conditioning: mode, ..Default::default() };
        let trained = train_policy(&ds, &stats, Some(&t.model), &pc, 0, |_| Ok(())).unwrap();
        let ckpt = PolicyCheckpoint { agent: trained.agent, adam: Some(trained.adam), dataset: ds.meta.clone(), epoch: 1 };
        ppath = dir.path().join(format!("policy-{mode:?}.ckpt"));
        save_policy(&ppath, &ckpt).unwrap();
        let loaded = load_policy(&ppath).unwrap();
        let k = ckpt.agent.trajnet.as_ref().map_or(1, |m| m.config.k);
        let mut rng = RngStream::new(6);
        let obs: Vec<Observation> = (0..4).map(|i| draw_policy_sample(&ds, &stats, i, k, &mut rng).unwrap().obs).collect();
        policy_exact &= loaded.agent.policy.params.tensors() == ckpt.agent.policy.params.tensors()
            && loaded.agent.act(&obs).unwrap() == ckpt.agent.act(&obs).unwrap();
    }

    let n = fs::read(&tpath).unwrap().len();
    let bad = [
        corrupt(&tpath, "magic.ckpt", |b| b[0] = b'X'),
        corrupt(&tpath, "version.ckpt", |b| b[4] = b[4].wrapping_add(1)),
        corrupt(&tpath, "truncated.ckpt", |b| b.truncate(n - 8)),
        corrupt(&tpath, "short.ckpt", |b| b.truncate(10)),
        corrupt(&tpath, "trailing.ckpt", |b| b.extend_from_slice(&[0; 8])),
        corrupt(&tpath, "flipped.ckpt", |b| b[n - 3] ^= 0x10),
        corrupt(&tpath, "header-length.ckpt", |b| b[8..16].copy_from_slice(&u64::MAX.to_le_bytes())),
        corrupt(&tpath, "json.ckpt", |b| b[16] = b'!'),
    ];
    let mut rejected = 0;
    let mut total = 0;
    for path in &bad {
        total += 1;
        let err = load_trajnet(path).unwrap_err();
        rejected += usize::from(matches!(err, Error::Format { .. }) && err.exit_code() == 3);
    }
    total += 2;
    rejected += usize::from(load_policy(&tpath).is_err_and(|e| e.exit_code() == 3));
    rejected += usize::from(load_trajnet(&ppath).is_err_and(|e| e.exit_code() == 3));

    let data = dir.path().join("data");
    gcpc::data::write_dataset(&data, &ds.meta, &ds.trajectories).unwrap();
    let cli = gcpc_cmd(&[
        "train-policy",
        "--data",
        data.to_str().unwrap(),
        "--trajnet",
        bad[5].to_str().unwrap(),
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    total += 1;
    rejected += usize::from(cli.status.code() == Some(3));

    let pass = trajnet_exact && policy_exact && rejected == total;
    verdict(
        pass,
        format!(
            "TrajNet round trip bit-exact: {trajnet_exact}; policy round trip bit-exact (3 modes): {policy_exact}; corrupt or mismatched files rejected with code 3: {rejected}/{total}"
        ),
    )
}
