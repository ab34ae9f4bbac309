//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use iwol_core::comm::{build_graph, GateMode, GraphScheduler, MessageProtocol};
use iwol_core::envs::make_env;
use iwol_core::harness::{evaluate, quantize_level, quantize_message, squash, unsquash, DegradationSpec, EvalReport};
use iwol_core::iwol::{mse, BatchInputs, IwolModel, ModelConfig, VariantMode};
use iwol_core::rollout::{compute_gae, compute_returns, EnvSpec};
use iwol_core::trainer::{composite_on_tape, policy_loss_on_tape, value_loss_on_tape, Trainer};
use iwol_core::{train, Algo, Checkpoint, EnvKind, GlobalConfig, RunConfig};
use iwol_neural::gradcheck::{check_inputs, check_params, DEFAULT_PROBE};
use iwol_neural::{gumbel, Activation, Mlp, ParameterStore, SelfAttentionBlock, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SEEDS: [u64; 4] = [1, 2, 3, 4];
const EVAL_EPISODES: usize = 200;

fn main() -> ExitCode {
    // optional criterion numbers on the command line select a subset
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL ({name}, {secs:.1}s): {detail}");
            }
        }
    };

    let junction = if (1..=3).any(wanted) {
        let start = Instant::now();
        let trained = train_junction_seeds();
        println!("trained {} junction seeds in {:.1}s", SEEDS.len(), start.elapsed().as_secs_f64());
        trained
    } else {
        Err("not trained".to_string())
    };
    run(1, "traffic-junction training", &mut || criterion_1(&junction));
    run(2, "bandwidth quantization", &mut || criterion_2(&junction));
    run(3, "message corruption", &mut || criterion_3(&junction));
    run(4, "implicit immunity", &mut criterion_4);
    run(5, "gradient correctness", &mut criterion_5);
    run(6, "oracle equivalences", &mut criterion_6);
    run(7, "baseline degeneration", &mut criterion_7);
    run(8, "latent-dimension trend", &mut criterion_8);
    run(9, "reproducibility", &mut criterion_9);

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Shared training setups
// ---------------------------------------------------------------------------

fn desk_scale(train: &mut GlobalConfig) {
    train.feat_dim = 32;
    train.msg_dim = 32;
    train.latent_dim = 32;
    train.hidden_dim = 64;
    train.graph_dim = 16;
    train.num_heads = 2;
    train.comm_rounds = 1;
    train.num_workers = 4;
    train.rollout_len = 100;
}

fn junction_config(algo: Algo, seed: u64, steps: u64) -> RunConfig {
    let mut c = RunConfig {
        env: EnvKind::TrafficJunction,
        algo,
        total_steps: steps,
        ..RunConfig::default()
    };
    c.traffic_junction.num_slots = 6;
    c.traffic_junction.n_max = 5;
    c.traffic_junction.p_arrive = 0.1;
    desk_scale(&mut c.train);
    c.train.entropy_coef = 0.05;
    c.train.seed = seed;
    c
}

struct TrainedJunction {
    checkpoints: Vec<Checkpoint>,
}

fn train_junction_seeds() -> Result<TrainedJunction, String> {
    let mut checkpoints = Vec::new();
    for seed in SEEDS {
        let summary = train(&junction_config(Algo::ExIwol, seed, 500_000)).map_err(err)?;
        checkpoints.push(summary.checkpoint);
    }
    Ok(TrainedJunction { checkpoints })
}

fn eval_checkpoint(ck: &Checkpoint, degradation: &DegradationSpec, episodes: usize) -> Result<EvalReport, String> {
    let model = ck.build_model().map_err(err)?;
    let mut env = make_env(&ck.run).map_err(err)?;
    evaluate(&model, &ck.store, env.as_mut(), episodes, degradation, 1_000_000 + ck.run.train.seed * 10_000).map_err(err)
}

fn mean_success(
    junction: &Result<TrainedJunction, String>,
    degradation: &DegradationSpec,
) -> Result<(f64, Vec<f64>), String> {
    let trained = junction.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let mut rates = Vec::new();
    for ck in &trained.checkpoints {
        rates.push(eval_checkpoint(ck, degradation, EVAL_EPISODES)?.success_rate);
    }
    Ok((rates.iter().sum::<f64>() / rates.len() as f64, rates))
}

fn pct(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:.1}%", 100.0 * x)).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------------------------------
// 1-3: traffic junction
// ---------------------------------------------------------------------------

fn criterion_1(junction: &Result<TrainedJunction, String>) -> Outcome {
    let (mean, rates) = mean_success(junction, &DegradationSpec::none())?;
    let worst = rates.iter().cloned().fold(1.0, f64::min);
    let detail = format!("mean success {:.1}% (per seed {})", 100.0 * mean, pct(&rates));
    ensure(mean >= 0.80 && worst >= 0.70, || format!("{detail}; need mean ≥ 80% and every seed ≥ 70%"))?;
    Ok(detail)
}

fn criterion_2(junction: &Result<TrainedJunction, String>) -> Outcome {
    let (normal, _) = mean_success(junction, &DegradationSpec::none())?;
    let (two, two_rates) = mean_success(junction, &DegradationSpec::quantize(2))?;
    let (eight, eight_rates) = mean_success(junction, &DegradationSpec::quantize(8))?;
    let detail = format!(
        "normal {:.1}%, 2-bit {:.1}% ({}), 8-bit {:.1}% ({})",
        100.0 * normal,
        100.0 * two,
        pct(&two_rates),
        100.0 * eight,
        pct(&eight_rates)
    );
    ensure(normal - two >= 0.05 && eight >= two, || {
        format!("{detail}; need a drop of at least 5 points at 2 bits and 8-bit ≥ 2-bit")
    })?;
    Ok(detail)
}

fn criterion_3(junction: &Result<TrainedJunction, String>) -> Outcome {
    let (normal, _) = mean_success(junction, &DegradationSpec::none())?;
    let (two, _) = mean_success(junction, &DegradationSpec::quantize(2))?;
    let (corrupt, rates) = mean_success(junction, &DegradationSpec::corrupt(3))?;
    let detail = format!(
        "drop under corruption {:.1} points ({}), under 2-bit {:.1} points",
        100.0 * (normal - corrupt),
        pct(&rates),
        100.0 * (normal - two)
    );
    ensure(normal - corrupt > normal - two, || format!("{detail}; corruption must hurt strictly more"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 4: implicit immunity
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let summary = train(&junction_config(Algo::ImIwol, 11, 20_000)).map_err(err)?;
    let ck = summary.checkpoint;
    let episodes = 50;
    let normal = eval_checkpoint(&ck, &DegradationSpec::none(), episodes)?;
    let specs = [
        DegradationSpec::quantize(1),
        DegradationSpec::quantize(2),
        DegradationSpec::quantize(8),
        DegradationSpec::corrupt(0),
        DegradationSpec::corrupt(3),
    ];
    for spec in &specs {
        let degraded = eval_checkpoint(&ck, spec, episodes)?;
        for (a, b) in normal.records.iter().zip(&degraded.records) {
            ensure(a.actions == b.actions, || {
                format!("episode seed {} acts differently under {:?}", a.seed, spec.kind)
            })?;
        }
        ensure(degraded.success_rate == normal.success_rate, || {
            format!("success {} vs {} under {:?}", degraded.success_rate, normal.success_rate, spec.kind)
        })?;
    }
    Ok(format!(
        "{} degradation settings × {episodes} episodes identical to normal (success {:.1}%)",
        specs.len(),
        100.0 * normal.success_rate
    ))
}

// ---------------------------------------------------------------------------
// 5: gradient checks
// ---------------------------------------------------------------------------

const DRAWS: u64 = 10;
const GRAD_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Scalar readout with a fixed random weighting of every output entry.
fn project(tape: &mut Tape, out: Var, seed: u64) -> iwol_neural::Result<Var> {
    let (r, c) = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(rand_tensor(&mut rng, r, c, 1.0));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn perturb_biases(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.path(id).ends_with(".bias") || store.path(id).ends_with(".beta") {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = rand_tensor(rng, r, c, 0.3);
        }
    }
}

struct GradSuite {
    worst: Vec<(String, f64)>,
}

impl GradSuite {
    fn record(&mut self, name: &str, err: f64) {
        match self.worst.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = entry.1.max(err),
            None => self.worst.push((name.to_string(), err)),
        }
    }

    fn inputs(
        &mut self,
        name: &str,
        seed: u64,
        inputs: &[Tensor],
        f: impl Fn(&mut Tape, &[Var]) -> iwol_core::Result<Var>,
    ) -> Result<(), String> {
        let r = check_inputs(inputs, DEFAULT_PROBE, |t, v| {
            let out = f(t, v).map_err(|e| iwol_neural::NeuralError::Contract(e.to_string()))?;
            project(t, out, seed)
        })
        .map_err(err)?;
        self.record(name, r.max_rel_error());
        Ok(())
    }

    fn params(
        &mut self,
        name: &str,
        seed: u64,
        store: &ParameterStore,
        f: impl Fn(&mut Tape, &ParameterStore) -> iwol_core::Result<Var>,
    ) -> Result<(), String> {
        let r = check_params(store, DEFAULT_PROBE, |t, s| {
            let out = f(t, s).map_err(|e| iwol_neural::NeuralError::Contract(e.to_string()))?;
            project(t, out, seed)
        })
        .map_err(err)?;
        self.record(name, r.max_rel_error());
        Ok(())
    }
}

fn tiny_spec(agents: usize) -> EnvSpec {
    EnvSpec {
        num_agents: agents,
        obs_dim: 5,
        obs_token_layout: vec![(0, 2), (2, 3)],
        num_actions: 3,
        max_steps: 10,
        privileged_dim: 4,
        has_positions: true,
    }
}

fn tiny_global() -> GlobalConfig {
    GlobalConfig {
        feat_dim: 4,
        msg_dim: 4,
        latent_dim: 3,
        hidden_dim: 5,
        graph_dim: 3,
        num_heads: 2,
        comm_rounds: 2,
        ..GlobalConfig::default()
    }
}

fn criterion_5() -> Outcome {
    let mut suite = GradSuite { worst: Vec::new() };
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);

        // mlp
        let mut store = ParameterStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[3, 6, 2], Activation::Tanh, 2f64.sqrt(), 1.0, &mut rng).map_err(err)?;
        perturb_biases(&mut store, &mut rng);
        let x = rand_tensor(&mut rng, 4, 3, 1.0);
        suite.params("mlp", seed, &store, |t, s| {
            let xv = t.constant(x.clone());
            Ok(mlp.forward(t, s, xv)?)
        })?;
        suite.inputs("mlp", seed, &[x], |t, v| Ok(mlp.forward(t, &store, v[0])?))?;

        // self-attention block, plain and gated
        let mut store = ParameterStore::new();
        let block = SelfAttentionBlock::new(&mut store, "attn", 4, 2, &mut rng).map_err(err)?;
        perturb_biases(&mut store, &mut rng);
        let x = rand_tensor(&mut rng, 6, 4, 1.0);
        suite.params("self-attention", seed, &store, |t, s| {
            let xv = t.constant(x.clone());
            Ok(block.forward(t, s, xv, 3, None)?)
        })?;
        let gate = Tensor::from_vec(6, 3, (0..18).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        suite.inputs("gated self-attention", seed, &[x, gate], |t, v| {
            Ok(block.forward(t, &store, v[0], 3, Some(v[1]))?)
        })?;

        // additive attention scores
        let mut store = ParameterStore::new();
        let scheduler = GraphScheduler::new(&mut store, "sched", 4, 3, &mut rng).map_err(err)?;
        let f = rand_tensor(&mut rng, 6, 4, 1.0);
        suite.params("additive attention", seed, &store, |t, s| {
            let fv = t.constant(f.clone());
            scheduler.scores(t, s, fv, 3)
        })?;
        suite.inputs("additive attention", seed, &[f.clone()], |t, v| scheduler.scores(t, &store, v[0], 3))?;

        // gumbel soft path through the graph and protocol
        let mut store2 = store.clone();
        let protocol = MessageProtocol::new(&mut store2, "proto", 4, 2, 2, &mut rng).map_err(err)?;
        perturb_biases(&mut store2, &mut rng);
        let noise = gumbel::sample_tensor(&mut rng, 6 * 3, 2);
        let active = vec![true; 6];
        let tau = rng.gen_range(0.5..2.0);
        suite.params("gumbel soft graph + protocol", seed, &store2, |t, s| {
            let fv = t.constant(f.clone());
            let g = build_graph(
                t,
                s,
                &scheduler,
                fv,
                None,
                &active,
                3,
                None,
                tau,
                GateMode::Sampled {
                    noise: &noise,
                    hard: false,
                },
            )?;
            protocol.forward(t, s, fv, g.adjacency, 3)
        })?;
        let logits = rand_tensor(&mut rng, 5, 2, 2.0);
        let noise2 = gumbel::sample_tensor(&mut rng, 5, 2);
        suite.inputs("gumbel soft path", seed, &[logits], |t, v| Ok(t.gumbel_softmax(v[0], &noise2, tau, false)?))?;

        // decoders and heads of full implicit and explicit models
        for mode in [VariantMode::Implicit, VariantMode::Explicit] {
            let mut store = ParameterStore::new();
            let cfg = ModelConfig::new(&tiny_spec(3), &tiny_global(), mode);
            let model = IwolModel::new(cfg.clone(), &mut store, &mut rng).map_err(err)?;
            perturb_biases(&mut store, &mut rng);
            let z = rand_tensor(&mut rng, 6, cfg.latent_dim, 1.0);
            let f = rand_tensor(&mut rng, 6, cfg.feat_dim, 1.0);
            let m = rand_tensor(&mut rng, 6, cfg.msg_dim, 1.0);
            let privileged = rand_tensor(&mut rng, 6, 4, 1.0);
            let weights: Vec<f64> = (0..6).map(|i| if i == 2 { 0.0 } else { 1.0 }).collect();
            suite.params("world decoder", seed, &store, |t, s| {
                let zv = t.constant(z.clone());
                let s_hat = model.decode_world(t, s, zv)?;
                mse(t, s_hat, &privileged, &weights)
            })?;
            if mode == VariantMode::Implicit {
                suite.params("interactive decoder", seed, &store, |t, s| {
                    let zv = t.constant(z.clone());
                    let (lw, li) = model.reconstruction_losses(t, s, zv, &privileged, &m, &weights)?;
                    Ok(t.add(lw, li.expect("implicit has L_I"))?)
                })?;
            }
            suite.params("policy head", seed, &store, |t, s| {
                let zv = t.constant(z.clone());
                let fv = t.constant(f.clone());
                model.policy_forward(t, s, Some(zv), fv)
            })?;
            suite.params("value head", seed, &store, |t, s| {
                let mv = t.constant(m.clone());
                let fv = t.constant(f.clone());
                model.value_forward(t, s, Some(mv), fv)
            })?;
            // whole model with the soft graph
            let obs = rand_tensor(&mut rng, 6, 5, 1.0);
            let positions: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen(), rng.gen()]).collect();
            let active = vec![true, true, false, true, true, true];
            let noise = gumbel::sample_tensor(&mut rng, 18, 2);
            suite.params("full forward", seed, &store, |t, s| {
                let inputs = BatchInputs {
                    obs: &obs,
                    positions: Some(&positions),
                    active: &active,
                };
                let out = model.forward(
                    t,
                    s,
                    &inputs,
                    GateMode::Sampled {
                        noise: &noise,
                        hard: false,
                    },
                    None,
                )?;
                let p = t.sum(out.logits);
                let v = t.sum(out.value);
                Ok(t.add(p, v)?)
            })?;
        }

        // losses
        let n = 8;
        let logits = rand_tensor(&mut rng, n, 3, 2.0);
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let logp_old: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..-0.2)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..n).map(|i| if i % 4 == 3 { 0.0 } else { 1.0 }).collect();
        suite.inputs("policy loss", seed, &[logits], |t, v| {
            Ok(policy_loss_on_tape(t, v[0], &actions, &logp_old, &adv, &weights, 0.2, 0.01)?.0)
        })?;
        let values = rand_tensor(&mut rng, n, 1, 3.0);
        let v_old: Vec<f64> = values.data().iter().map(|v| v + rng.gen_range(-0.6..0.6)).collect();
        let returns: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        suite.inputs("value loss", seed, &[values], |t, v| {
            value_loss_on_tape(t, v[0], &v_old, &returns, &weights, 0.2, 10.0)
        })?;
        let pred = rand_tensor(&mut rng, n, 4, 1.0);
        let target = rand_tensor(&mut rng, n, 4, 1.0);
        let parts = rand_tensor(&mut rng, 1, 3, 1.0);
        suite.inputs("reconstruction + composite loss", seed, &[pred, parts], |t, v| {
            let l = mse(t, v[0], &target, &weights)?;
            let rl = t.slice_cols(v[1], 0, 1)?;
            let li = t.slice_cols(v[1], 1, 1)?;
            let extra = t.slice_cols(v[1], 2, 1)?;
            let lw = t.add(l, extra)?;
            composite_on_tape(t, VariantMode::Implicit, rl, Some(lw), Some(li), 0.05, 0.07)
        })?;
    }
    let worst = suite.worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<String> = suite
        .worst
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n}: {e:.2e}"))
        .collect();
    ensure(failing.is_empty(), || format!("relative errors above {GRAD_TOL}: {}", failing.join(", ")))?;
    Ok(format!(
        "{} checks × {DRAWS} draws, worst relative error {worst:.2e}",
        suite.worst.len()
    ))
}

// ---------------------------------------------------------------------------
// 6: oracles
// ---------------------------------------------------------------------------

fn brute_returns(r: &[f64], d: &[bool], gamma: f64, boot: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut g = 0.0;
            let mut disc = 1.0;
            let mut k = t;
            loop {
                g += disc * r[k];
                if d[k] {
                    break g;
                }
                disc *= gamma;
                k += 1;
                if k == n {
                    break g + disc * boot;
                }
            }
        })
        .collect()
}

fn brute_gae(r: &[f64], v: &[f64], d: &[bool], gamma: f64, lam: f64, boot: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if d[t] {
                0.0
            } else if t + 1 == n {
                boot
            } else {
                v[t + 1]
            };
            r[t] + gamma * next - v[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            let mut w = 1.0;
            for k in t..n {
                a += w * delta[k];
                if d[k] {
                    break;
                }
                w *= gamma * lam;
            }
            a
        })
        .collect()
}

/// Round-half-to-even by explicit integer/fraction split.
fn reference_quantize(y: f64, bits: u32) -> f64 {
    let levels = ((1u64 << bits) - 1) as f64;
    let v = y.clamp(0.0, 1.0) * levels;
    let base = v.floor();
    let frac = v - base;
    let k = if frac > 0.5 {
        base + 1.0
    } else if frac < 0.5 {
        base
    } else if base % 2.0 == 0.0 {
        base
    } else {
        base + 1.0
    };
    k / levels
}

/// Runs each round on the sub-population `{j : g_ij = 1}` only, keeping the
/// agents in their original order.
fn neighborhood_oracle(
    protocol: &MessageProtocol,
    store: &ParameterStore,
    m0: &Tensor,
    adjacency: &[Vec<bool>],
) -> Result<Tensor, String> {
    let n = m0.rows();
    let mut h = m0.clone();
    for k in 0..protocol.num_rounds() {
        let mut next = Tensor::zeros(n, h.cols());
        for i in 0..n {
            let members: Vec<usize> = (0..n).filter(|&j| adjacency[i][j]).collect();
            let sub = Tensor::from_rows(&members.iter().map(|&j| h.row(j).to_vec()).collect::<Vec<_>>());
            let mut tape = Tape::inference();
            let x = tape.constant(sub);
            let gate = tape.constant(Tensor::filled(members.len(), members.len(), 1.0));
            let out = protocol
                .round(&mut tape, store, k, x, members.len(), Some(gate))
                .map_err(err)?;
            let pos = members.iter().position(|&j| j == i).expect("self edge");
            next.row_mut(i).copy_from_slice(tape.value(out).row(pos));
        }
        h = next;
    }
    Ok(h)
}

fn masked_passing_matches(
    protocol: &MessageProtocol,
    store: &ParameterStore,
    m0: &Tensor,
    adjacency: &[Vec<bool>],
) -> Result<bool, String> {
    let n = m0.rows();
    let g = Tensor::from_vec(
        n,
        n,
        adjacency.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(m0.clone());
    let gv = tape.constant(g);
    let out = protocol.forward(&mut tape, store, x, gv, n).map_err(err)?;
    let oracle = neighborhood_oracle(protocol, store, m0, adjacency)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(oracle.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let gamma = rng.gen_range(0.5..1.0);
        let lam = rng.gen_range(0.0..1.0);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let boot = rng.gen_range(-10.0..10.0);
        let ret = compute_returns(&r, &d, gamma, Some(boot)).map_err(err)?;
        let adv = compute_gae(&r, &v, &d, gamma, lam, Some(boot)).map_err(err)?;
        for (a, b) in ret.iter().zip(brute_returns(&r, &d, gamma, boot)) {
            ensure((a - b).abs() <= 1e-10, || format!("returns differ: {a} vs {b}"))?;
        }
        for (a, b) in adv.iter().zip(brute_gae(&r, &v, &d, gamma, lam, boot)) {
            ensure((a - b).abs() <= 1e-10, || format!("advantages differ: {a} vs {b}"))?;
        }
    }

    for bits in [2u32, 8] {
        for k in 0..10_000 {
            let y = k as f64 / 9_999.0;
            let q = quantize_level(y, bits).map_err(err)?;
            ensure(q == reference_quantize(y, bits), || format!("{bits}-bit level of {y}: {q}"))?;
        }
        // ties sit exactly on half levels
        let levels = ((1u64 << bits) - 1) as f64;
        for k in 0..(1u64 << bits) - 1 {
            let y = (k as f64 + 0.5) / levels;
            let q = quantize_level(y, bits).map_err(err)?;
            ensure(q == reference_quantize(y, bits), || format!("{bits}-bit tie at {y}: {q}"))?;
        }
        let xs: Vec<f64> = (0..10_000).map(|k| -8.0 + 16.0 * k as f64 / 9_999.0).collect();
        let m = Tensor::from_vec(100, 100, xs.clone()).unwrap();
        let q = quantize_message(&m, bits).map_err(err)?;
        for (x, got) in xs.iter().zip(q.data()) {
            let want = unsquash(reference_quantize(squash(*x), bits));
            ensure(*got == want, || format!("{bits}-bit message {x}: {got} vs {want}"))?;
        }
    }

    let mut graphs = 0usize;
    let mut store = ParameterStore::new();
    let protocol = MessageProtocol::new(&mut store, "p", 8, 2, 2, &mut rng).map_err(err)?;
    perturb_biases(&mut store, &mut rng);
    for agents in 1..=4usize {
        let free: Vec<(usize, usize)> = (0..agents)
            .flat_map(|i| (0..agents).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        for mask in 0u64..(1u64 << free.len()) {
            let mut adj = vec![vec![false; agents]; agents];
            for (i, row) in adj.iter_mut().enumerate() {
                row[i] = true;
            }
            for (b, &(i, j)) in free.iter().enumerate() {
                adj[i][j] = mask >> b & 1 == 1;
            }
            let m0 = rand_tensor(&mut rng, agents, 8, 1.5);
            ensure(masked_passing_matches(&protocol, &store, &m0, &adj)?, || {
                format!("masked passing differs on graph {adj:?}")
            })?;
            graphs += 1;
        }
    }
    for _ in 0..100 {
        let adj: Vec<Vec<bool>> = (0..6)
            .map(|i| (0..6).map(|j| i == j || rng.gen_bool(0.5)).collect())
            .collect();
        let m0 = rand_tensor(&mut rng, 6, 8, 1.5);
        ensure(masked_passing_matches(&protocol, &store, &m0, &adj)?, || {
            format!("masked passing differs on graph {adj:?}")
        })?;
        graphs += 1;
    }
    Ok(format!(
        "1000 return/GAE sequences, 2×10⁴ quantizer grid points, {graphs} graphs bitwise"
    ))
}

// ---------------------------------------------------------------------------
// 7: baseline degeneration
// ---------------------------------------------------------------------------

/// Stand-alone PPO loss from raw logits and values, written without the
/// tape or the library's loss helpers.
#[allow(clippy::too_many_arguments)]
fn standalone_mappo_loss(
    logits: &Tensor,
    values: &Tensor,
    actions: &[usize],
    logp_old: &[f64],
    adv: &[f64],
    v_old: &[f64],
    returns: &[f64],
    weights: &[f64],
    eps: f64,
    ent_coef: f64,
    delta: f64,
) -> f64 {
    let huber = |a: f64| {
        if a.abs() <= delta {
            0.5 * a * a
        } else {
            delta * (a.abs() - 0.5 * delta)
        }
    };
    let total_w: f64 = weights.iter().sum();
    let mut pi = 0.0;
    let mut vf = 0.0;
    for i in 0..weights.len() {
        if weights[i] == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let logp: Vec<f64> = row.iter().map(|x| x - lse).collect();
        let entropy: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
        let ratio = (logp[actions[i]] - logp_old[i]).exp();
        let surr = (ratio * adv[i]).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv[i]);
        pi += weights[i] * (-surr - ent_coef * entropy);
        let v = values.get(i, 0);
        let v_clip = v_old[i] + (v - v_old[i]).clamp(-eps, eps);
        vf += weights[i] * huber(returns[i] - v).max(huber(returns[i] - v_clip));
    }
    (pi + vf) / total_w
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = tiny_spec(3);
    let global = tiny_global();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut store = ParameterStore::new();
        let model = IwolModel::new(
            ModelConfig::new(&spec, &global, VariantMode::MappoBaseline),
            &mut store,
            &mut rng,
        )
        .map_err(err)?;
        perturb_biases(&mut store, &mut rng);
        let n = 3 * rng.gen_range(1..5);
        let obs = rand_tensor(&mut rng, n, 5, 1.0);
        let active: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let mut weights: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        weights[0] = 1.0;
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let logp_old: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.5..-0.1)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v_old: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let returns: Vec<f64> = (0..n).map(|_| rng.gen_range(-15.0..15.0)).collect();

        let mut tape = Tape::new();
        let inputs = BatchInputs {
            obs: &obs,
            positions: None,
            active: &active,
        };
        let out = model.forward(&mut tape, &store, &inputs, GateMode::AllKeep, None).map_err(err)?;
        let (pi, _) = policy_loss_on_tape(&mut tape, out.logits, &actions, &logp_old, &adv, &weights, 0.2, 0.01)
            .map_err(err)?;
        let vl = value_loss_on_tape(&mut tape, out.value, &v_old, &returns, &weights, 0.2, 10.0).map_err(err)?;
        let lw = tape.constant(Tensor::scalar(rng.gen_range(0.0..5.0)));
        let li = tape.constant(Tensor::scalar(rng.gen_range(0.0..5.0)));
        let rl = tape.add(pi, vl).map_err(err)?;
        let composite = composite_on_tape(&mut tape, VariantMode::Implicit, rl, Some(lw), Some(li), 0.0, 0.0)
            .map_err(err)?;
        let reference = standalone_mappo_loss(
            tape.value(out.logits),
            tape.value(out.value),
            &actions,
            &logp_old,
            &adv,
            &v_old,
            &returns,
            &weights,
            0.2,
            0.01,
            10.0,
        );
        let diff = (tape.value(composite).item() - reference).abs();
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-12, || format!("largest difference {worst:.3e}"))?;
    Ok(format!("100 batches, largest difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 8: latent-dimension trend
// ---------------------------------------------------------------------------

fn navigation_config(latent_dim: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig {
        env: EnvKind::SimpleNavigation,
        algo: Algo::ImIwol,
        total_steps: 200_000,
        ..RunConfig::default()
    };
    desk_scale(&mut c.train);
    c.train.latent_dim = latent_dim;
    c.train.seed = seed;
    c
}

fn criterion_8() -> Outcome {
    let mut finals = Vec::new();
    for d in [8usize, 32] {
        let mut per_seed = Vec::new();
        for seed in SEEDS {
            let ck = train(&navigation_config(d, seed)).map_err(err)?.checkpoint;
            per_seed.push(eval_checkpoint(&ck, &DegradationSpec::none(), 100)?.mean_return);
        }
        finals.push(per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    }
    let detail = format!("mean final return D=8 {:.3}, D=32 {:.3}", finals[0], finals[1]);
    ensure(finals[1] >= finals[0], || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9: reproducibility
// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let mut streams = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let mut c = junction_config(Algo::ExIwol, 5, 1_200);
        c.train.num_workers = 1;
        c.train.rollout_len = 200;
        c.eval_interval = 3;
        c.eval_episodes = 3;
        c.out_dir = Some(dir.path().to_path_buf());
        train(&c).map_err(err)?;
        streams.push(std::fs::read(dir.path().join("metrics.jsonl")).map_err(err)?);
    }
    ensure(!streams[0].is_empty() && streams[0] == streams[1], || {
        "metrics streams of identical runs differ".to_string()
    })?;

    let mut grads = Vec::new();
    let mut worker0 = Vec::new();
    for threads in [1usize, 2, 3] {
        let mut c = junction_config(Algo::ExIwol, 9, 1_000);
        c.train.num_workers = 3;
        c.train.rollout_threads = threads;
        c.train.rollout_len = 40;
        let mut t = Trainer::new(c).map_err(err)?;
        let mut segments = t.collect().map_err(err)?;
        worker0.push(segments[0].buffer.transitions().to_vec());
        let batch = t.prepare(&mut segments).map_err(err)?;
        let (g, _) = t.gradients(&batch).map_err(err)?;
        grads.push(g.iter().map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>());
    }
    ensure(grads.windows(2).all(|w| w[0] == w[1]), || {
        "first-iteration gradients depend on the rollout thread count".to_string()
    })?;

    let mut single = junction_config(Algo::ExIwol, 9, 1_000);
    single.train.num_workers = 1;
    single.train.rollout_len = 40;
    let mut t = Trainer::new(single).map_err(err)?;
    let seg = t.collect().map_err(err)?;
    ensure(seg[0].buffer.transitions() == worker0[0].as_slice(), || {
        "worker 0 of a multi-worker run diverges from the single-worker run".to_string()
    })?;
    Ok(format!(
        "identical {}-byte metrics streams; gradients bitwise equal across 1/2/3 threads",
        streams[0].len()
    ))
}
