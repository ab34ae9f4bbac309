//! Finite-difference checks for every differentiable tape operation.

use iwol_neural::gradcheck::{check_inputs, check_params, DEFAULT_PROBE};
use iwol_neural::{Activation, EdgeState, Mlp, ParameterStore, SelfAttentionBlock, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: u64 = 10;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduces any output to a scalar with a fixed random projection so every
/// output entry contributes a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> iwol_neural::Result<Var> {
    let (r, c) = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = tape.constant(rand_tensor(&mut rng, r, c, 1.0));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn assert_check(name: &str, seed: u64, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> iwol_neural::Result<Var>) {
    let report = check_inputs(inputs, DEFAULT_PROBE, |t, v| {
        let out = f(t, v)?;
        project(t, out, seed)
    })
    .unwrap();
    assert!(
        report.max_rel_error() < TOL,
        "{name} draw {seed}: rel errors {:?}",
        report.rel_errors
    );
}

#[test]
fn matmul_and_bias() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 4, 3, 1.0);
        let w = rand_tensor(&mut rng, 3, 5, 1.0);
        let b = rand_tensor(&mut rng, 1, 5, 1.0);
        assert_check("affine", seed, &[x, w, b], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            t.add_bias(h, v[2])
        });
    }
}

#[test]
fn elementwise_ops() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 3, 4, 2.0);
        let b = rand_tensor(&mut rng, 3, 4, 2.0);
        assert_check("elementwise", seed, &[a, b], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            let th = t.tanh(m);
            let sg = t.sigmoid(v[1]);
            let sc = t.scale(sg, -1.7);
            t.add(th, sc)
        });
    }
}

#[test]
fn layer_norm() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 5, 6, 3.0);
        let g = rand_tensor(&mut rng, 1, 6, 1.5);
        let b = rand_tensor(&mut rng, 1, 6, 1.0);
        assert_check("layer_norm", seed, &[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]));
    }
}

#[test]
fn shape_ops() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 6, 2, 1.0);
        let b = rand_tensor(&mut rng, 6, 3, 1.0);
        assert_check("shape", seed, &[a, b], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let s = t.slice_cols(c, 1, 3)?;
            let s2 = t.slice_cols(c, 0, 3)?;
            let il = t.interleave_rows(&[s, s2])?;
            let p = t.mean_pool(il, 3)?;
            let r = t.reshape(p, 2, 6)?;
            t.tanh(r).pipe_ok()
        });
    }
}

trait PipeOk {
    fn pipe_ok(self) -> iwol_neural::Result<Var>;
}
impl PipeOk for Var {
    fn pipe_ok(self) -> iwol_neural::Result<Var> {
        Ok(self)
    }
}

#[test]
fn attention_unmasked() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, 6, 4, 1.0);
        let k = rand_tensor(&mut rng, 6, 4, 1.0);
        let v = rand_tensor(&mut rng, 6, 4, 1.0);
        assert_check("attention", seed, &[q, k, v], |t, x| t.attention(x[0], x[1], x[2], 3, 2, None));
    }
}

#[test]
fn attention_with_soft_gate() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, 8, 4, 1.0);
        let k = rand_tensor(&mut rng, 8, 4, 1.0);
        let v = rand_tensor(&mut rng, 8, 4, 1.0);
        let gate = Tensor::from_vec(8, 4, (0..32).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        assert_check("gated attention", seed, &[q, k, v, gate], |t, x| {
            t.attention(x[0], x[1], x[2], 4, 2, Some(x[3]))
        });
    }
}

#[test]
fn attention_gate_with_hard_zeros_still_differentiates_free_entries() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, 3, 4, 1.0);
        let k = rand_tensor(&mut rng, 3, 4, 1.0);
        let v = rand_tensor(&mut rng, 3, 4, 1.0);
        let gate = rand_tensor(&mut rng, 3, 3, 1.0);
        let states = vec![
            EdgeState::On,
            EdgeState::Free,
            EdgeState::Off,
            EdgeState::Free,
            EdgeState::On,
            EdgeState::Free,
            EdgeState::Off,
            EdgeState::Free,
            EdgeState::On,
        ];
        assert_check("masked attention", seed, &[q, k, v, gate], |t, x| {
            let s = t.sigmoid(x[3]);
            let g = t.edge_mask(s, states.clone())?;
            t.attention(x[0], x[1], x[2], 3, 1, Some(g))
        });
    }
}

#[test]
fn pair_scores() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uv = rand_tensor(&mut rng, 6, 2, 1.0);
        assert_check("pair_scores", seed, &[uv], |t, x| t.pair_scores(x[0], 3));
    }
}

#[test]
fn gumbel_softmax_soft_path() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, 5, 3, 2.0);
        let noise = iwol_neural::gumbel::sample_tensor(&mut rng, 5, 3);
        let tau = rng.gen_range(0.5..2.0);
        assert_check("gumbel soft", seed, &[logits], |t, x| t.gumbel_softmax(x[0], &noise, tau, false));
    }
}

#[test]
fn straight_through_gradient_equals_soft_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = rand_tensor(&mut rng, 4, 3, 1.0);
    let noise = iwol_neural::gumbel::sample_tensor(&mut rng, 4, 3);
    let grad = |hard: bool| {
        let mut t = Tape::new();
        let l = t.input(logits.clone());
        let g = t.gumbel_softmax(l, &noise, 0.7, hard).unwrap();
        let o = project(&mut t, g, 5).unwrap();
        t.backward(o).unwrap().wrt(&t, l)
    };
    assert_eq!(grad(true), grad(false));
}

#[test]
fn softmax_family() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 4, 5, 3.0);
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        assert_check("softmax family", seed, &[x], |t, v| {
            let ls = t.log_softmax(v[0]);
            let picked = t.gather_cols(ls, &idx)?;
            let sm = t.softmax(v[0]);
            let ent = t.entropy(v[0]);
            let a = t.sum(sm);
            let b = t.add(picked, ent)?;
            let b = t.mean(b);
            let p = t.mul(a, b)?;
            t.add(p, b)
        });
    }
}

#[test]
fn row_loss_weights() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 6, 2, 1.0);
        let weights: Vec<f64> = (0..6).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        assert_check("row loss", seed, &[x], |t, v| {
            t.row_loss(v[0], &weights, |_, row, d| {
                d[0] = 2.0 * row[0] * row[1];
                d[1] = row[0] * row[0];
                row[0] * row[0] * row[1]
            })
        });
    }
}

#[test]
fn mlp_parameters() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 2], Activation::Tanh, 2f64.sqrt(), 1.0, &mut rng).unwrap();
        // perturb biases away from zero so they matter
        for layer in mlp.layers() {
            let c = store.value(layer.bias).cols();
            *store.value_mut(layer.bias) = rand_tensor(&mut rng, 1, c, 0.5);
        }
        let x = rand_tensor(&mut rng, 4, 3, 1.0);
        let report = check_params(&store, DEFAULT_PROBE, |t, s| {
            let xv = t.constant(x.clone());
            let y = mlp.forward(t, s, xv)?;
            project(t, y, seed)
        })
        .unwrap();
        assert!(report.max_rel_error() < TOL, "draw {seed}: {:?}", report.rel_errors);

        // and with respect to the input
        assert_check("mlp input", seed, &[x.clone()], |t, v| mlp.forward(t, &store, v[0]));
    }
}

#[test]
fn self_attention_block_parameters() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let block = SelfAttentionBlock::new(&mut store, "attn", 4, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, 6, 4, 1.0);
        let report = check_params(&store, DEFAULT_PROBE, |t, s| {
            let xv = t.constant(x.clone());
            let y = block.forward(t, s, xv, 3, None)?;
            project(t, y, seed)
        })
        .unwrap();
        assert!(report.max_rel_error() < TOL, "draw {seed}: {:?}", report.rel_errors);
        assert_check("attention block input", seed, &[x.clone()], |t, v| {
            block.forward(t, &store, v[0], 3, None)
        });
    }
}
