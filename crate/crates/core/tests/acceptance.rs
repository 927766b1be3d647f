//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line
//! (visible with `--nocapture`). Thresholds for the end-to-end run are
//! artifact targets on a deliberately separable synthetic task.

use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use hcl_core::detector::kmeans::{kmeans_cosine, KmeansOutcome};
use hcl_core::detector::quadtree::{
    children_flat_indices, downsample_majority, parent_index_map, quad_children, quad_parent,
};
use hcl_core::detector::{circle_loss, detect_masks};
use hcl_core::gradcheck::max_rel_error;
use hcl_core::image::Image;
use hcl_core::io::checkpoint::{
    deserialize_checkpoint, serialize_checkpoint, Checkpoint,
};
use hcl_core::io::config::RunConfig;
use hcl_core::io::pnm;
use hcl_core::metrics::{mask_metrics, psnr, MaskReport};
use hcl_core::network::{
    mask_bias, transformer_block, upsample_mask_nearest, window_partition, ParamSet,
};
use hcl_core::pipeline::detect_and_restore;
use hcl_core::synth::{make_dataset, CorruptionMask, DatasetSpec, NoiseSource};
use hcl_core::training::{load_samples, train_steps, TrainState};
use hcl_core::{Tape, Tensor, Var};

fn criterion(name: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    let result = std::panic::catch_unwind(body);
    match &result {
        Ok(()) => println!("[PASS] {name}"),
        Err(_) => println!("[FAIL] {name}"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

// ---- criterion 1: gradient correctness ----

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .unwrap()
        .with_grad()
}

/// Random linear readout so symmetric gradients cannot cancel.
fn readout(tape: &mut Tape, v: Var, w: &[f64]) -> hcl_core::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let c = tape.constant(shape, w.to_vec());
    let m = tape.mul(v, c)?;
    Ok(tape.sum_all(m))
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn check_op<F>(name: &str, instances: usize, mk: F)
where
    F: Fn(
        &mut ChaCha8Rng,
    ) -> (
        Vec<Tensor>,
        Box<dyn Fn(&mut Tape, &[Var]) -> hcl_core::Result<Var>>,
    ),
{
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
        let (inputs, build) = mk(&mut rng);
        let err = max_rel_error(&inputs, |t, v| build(t, v)).unwrap();
        assert!(err <= 1e-4, "{name} instance {seed}: rel err {err:.3e}");
    }
}

fn block_params(rng: &mut ChaCha8Rng, d: usize, win_area: usize) -> ParamSet {
    let mut ps = ParamSet::new();
    let mut add = |ps: &mut ParamSet, name: &str, shape: Vec<usize>, s: f64| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
        ps.insert(name, Tensor::new(shape, data).unwrap().with_grad());
    };
    add(&mut ps, "tb.ln1.g", vec![d], 0.5);
    add(&mut ps, "tb.ln1.b", vec![d], 0.2);
    add(&mut ps, "tb.ln2.g", vec![d], 0.5);
    add(&mut ps, "tb.ln2.b", vec![d], 0.2);
    add(&mut ps, "tb.pos", vec![win_area, d], 0.3);
    for n in ["wq", "wk", "wv", "wo"] {
        add(&mut ps, &format!("tb.attn.{n}"), vec![d, d], 0.5);
    }
    for n in ["bq", "bk", "bv", "bo"] {
        add(&mut ps, &format!("tb.attn.{n}"), vec![d], 0.2);
    }
    add(&mut ps, "tb.mlp.fc1.w", vec![d, 2 * d], 0.5);
    add(&mut ps, "tb.mlp.fc1.b", vec![2 * d], 0.2);
    add(&mut ps, "tb.mlp.fc2.w", vec![2 * d, d], 0.5);
    add(&mut ps, "tb.mlp.fc2.b", vec![d], 0.2);
    ps
}

fn run_block(tape: &mut Tape, x: Var, ps: &ParamSet, mask: &[f64]) -> hcl_core::Result<Var> {
    let bp = ps.bind(tape);
    let (windows, pos_index) = window_partition(4, 4, 2, false);
    let bias = std::rc::Rc::new(mask_bias(mask, 100.0)?);
    transformer_block(tape, x, bias, 2, windows, &pos_index, &bp, "tb")
}

/// Finite-difference check of the block's parameter gradients on `probes`
/// random coordinates; `max_rel_error` only perturbs the input tensor.
fn block_param_fd(
    ps: &ParamSet,
    x: &Tensor,
    mask: &[f64],
    w: &[f64],
    rng: &mut ChaCha8Rng,
    probes: usize,
) {
    let forward = |ps: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = run_block(&mut tape, xv, ps, mask).unwrap();
        let loss = readout(&mut tape, out, w).unwrap();
        tape.scalar_value(loss)
    };
    let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
    let step = 1e-4;
    for _ in 0..probes {
        let name = names[rng.random_range(0..names.len())].clone();
        let len = ps.get(&name).unwrap().data.len();
        let ei = rng.random_range(0..len);

        let mut plus = ps.clone();
        plus.get_mut(&name).unwrap().data[ei] += step;
        let mut minus = ps.clone();
        minus.get_mut(&name).unwrap().data[ei] -= step;
        let fd = (forward(&plus) - forward(&minus)) / (2.0 * step);

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let bp = ps.bind(&mut tape);
        let target = bp
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v)
            .unwrap();
        let bias = std::rc::Rc::new(mask_bias(mask, 100.0).unwrap());
        let (windows, pos_index) = window_partition(4, 4, 2, false);
        let out =
            transformer_block(&mut tape, xv, bias, 2, windows, &pos_index, &bp, "tb").unwrap();
        let loss = readout(&mut tape, out, w).unwrap();
        tape.backward(loss).unwrap();
        let a = tape.grad(target).map(|g| g[ei]).unwrap_or(0.0);

        let rel = (a - fd).abs() / (a.abs().max(fd.abs()) + 1e-6);
        assert!(rel <= 1e-4, "block param {name}[{ei}]: rel err {rel:.3e}");
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    criterion("criterion 1: gradient correctness of all primitives", || {
        let t0 = Instant::now();

        check_op("add", 20, |rng| {
            let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let w = weights(rng, 6);
            (vec![a, b], Box::new(move |t, v| {
                let s = t.add(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("sub", 20, |rng| {
            let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let w = weights(rng, 6);
            (vec![a, b], Box::new(move |t, v| {
                let s = t.sub(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("mul", 20, |rng| {
            let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let w = weights(rng, 6);
            (vec![a, b], Box::new(move |t, v| {
                let s = t.mul(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("scale+add_scalar", 20, |rng| {
            let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let c = rng.random_range(-2.0..2.0);
            let d = rng.random_range(-2.0..2.0);
            let w = weights(rng, 6);
            (vec![a], Box::new(move |t, v| {
                let s = t.scale(v[0], c);
                let s = t.add_scalar(s, d);
                readout(t, s, &w)
            }))
        });
        check_op("matmul", 20, |rng| {
            let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            let w = weights(rng, 8);
            (vec![a, b], Box::new(move |t, v| {
                let s = t.matmul(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("conv2d_s1", 20, |rng| {
            let x = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
            let k = rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let w = weights(rng, 3 * 16);
            (vec![x, k], Box::new(move |t, v| {
                let s = t.conv2d(v[0], v[1], 1, 1)?;
                readout(t, s, &w)
            }))
        });
        check_op("conv2d_s2", 20, |rng| {
            let x = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
            let k = rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let w = weights(rng, 3 * 4);
            (vec![x, k], Box::new(move |t, v| {
                let s = t.conv2d(v[0], v[1], 2, 1)?;
                readout(t, s, &w)
            }))
        });
        check_op("channel_bias", 20, |rng| {
            let x = rand_tensor(rng, &[3, 2, 2], -1.0, 1.0);
            let b = rand_tensor(rng, &[3], -1.0, 1.0);
            let w = weights(rng, 12);
            (vec![x, b], Box::new(move |t, v| {
                let s = t.channel_bias(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("row_bias", 20, |rng| {
            let x = rand_tensor(rng, &[4, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[3], -1.0, 1.0);
            let w = weights(rng, 12);
            (vec![x, b], Box::new(move |t, v| {
                let s = t.row_bias(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("chw_rows_roundtrip", 20, |rng| {
            let x = rand_tensor(rng, &[3, 2, 2], -1.0, 1.0);
            let w = weights(rng, 12);
            (vec![x], Box::new(move |t, v| {
                let s = t.chw_to_rows(v[0])?;
                let s = t.rows_to_chw(s, 2, 2)?;
                readout(t, s, &w)
            }))
        });
        check_op("gather_rows", 20, |rng| {
            let x = rand_tensor(rng, &[5, 3], -1.0, 1.0);
            let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
            let w = weights(rng, 21);
            (vec![x], Box::new(move |t, v| {
                let s = t.gather_rows(v[0], idx.clone())?;
                readout(t, s, &w)
            }))
        });
        check_op("add_rows_by_index", 20, |rng| {
            let x = rand_tensor(rng, &[4, 3], -1.0, 1.0);
            let tbl = rand_tensor(rng, &[6, 3], -1.0, 1.0);
            let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
            let w = weights(rng, 12);
            (vec![x, tbl], Box::new(move |t, v| {
                let s = t.add_rows_by_index(v[0], v[1], idx.clone())?;
                readout(t, s, &w)
            }))
        });
        check_op("repeat_rows", 20, |rng| {
            let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
            let w = weights(rng, 18);
            (vec![x], Box::new(move |t, v| {
                let s = t.repeat_rows(v[0], 3)?;
                readout(t, s, &w)
            }))
        });
        check_op("row_dot", 20, |rng| {
            let a = rand_tensor(rng, &[4, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[4, 3], -1.0, 1.0);
            let w = weights(rng, 4);
            (vec![a, b], Box::new(move |t, v| {
                let s = t.row_dot(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("sum_groups", 20, |rng| {
            let x = rand_tensor(rng, &[12], -1.0, 1.0);
            let w = weights(rng, 4);
            (vec![x], Box::new(move |t, v| {
                let s = t.sum_groups(v[0], 3)?;
                readout(t, s, &w)
            }))
        });
        check_op("sum_mean_all", 20, |rng| {
            let x = rand_tensor(rng, &[3, 3], -1.0, 1.0);
            (vec![x], Box::new(move |t, v| {
                let s = t.mean_all(v[0]);
                let u = t.sum_all(v[0]);
                t.add(s, u)
            }))
        });
        check_op("exp_ln", 20, |rng| {
            let x = rand_tensor(rng, &[2, 3], 0.5, 2.0);
            let w = weights(rng, 6);
            (vec![x], Box::new(move |t, v| {
                let s = t.ln(v[0]);
                let s = t.exp(s);
                readout(t, s, &w)
            }))
        });
        check_op("abs_relu", 20, |rng| {
            // keep inputs away from the kink at 0
            let mut x = rand_tensor(rng, &[2, 3], 0.2, 1.0);
            for (i, v) in x.data.iter_mut().enumerate() {
                if i % 2 == 0 {
                    *v = -*v;
                }
            }
            let w = weights(rng, 6);
            (vec![x], Box::new(move |t, v| {
                let a = t.abs(v[0]);
                let r = t.relu(v[0]);
                let s = t.add(a, r)?;
                readout(t, s, &w)
            }))
        });
        check_op("gelu_sigmoid_softplus", 20, |rng| {
            let x = rand_tensor(rng, &[2, 3], -2.0, 2.0);
            let w = weights(rng, 6);
            (vec![x], Box::new(move |t, v| {
                let a = t.gelu(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.softplus(v[0]);
                let s = t.add(a, b)?;
                let s = t.add(s, c)?;
                readout(t, s, &w)
            }))
        });
        check_op("softmax_rows", 20, |rng| {
            let x = rand_tensor(rng, &[3, 4], -2.0, 2.0);
            let w = weights(rng, 12);
            (vec![x], Box::new(move |t, v| {
                let s = t.softmax_rows(v[0]);
                readout(t, s, &w)
            }))
        });
        check_op("layernorm", 20, |rng| {
            let x = rand_tensor(rng, &[4, 5], -1.0, 1.0);
            let g = rand_tensor(rng, &[5], 0.5, 1.5);
            let b = rand_tensor(rng, &[5], -0.5, 0.5);
            let w = weights(rng, 20);
            (vec![x, g, b], Box::new(move |t, v| {
                let s = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                readout(t, s, &w)
            }))
        });
        check_op("l2_normalize_rows", 20, |rng| {
            // rows well away from the zero-norm branch point
            let x = rand_tensor(rng, &[4, 3], 0.3, 1.0);
            let w = weights(rng, 12);
            (vec![x], Box::new(move |t, v| {
                let s = t.l2_normalize_rows(v[0], 1e-9)?;
                readout(t, s, &w)
            }))
        });
        check_op("concat_cols", 20, |rng| {
            let a = rand_tensor(rng, &[3, 2], -1.0, 1.0);
            let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            let w = weights(rng, 18);
            (vec![a, b], Box::new(move |t, v| {
                let s = t.concat_cols(v[0], v[1])?;
                readout(t, s, &w)
            }))
        });
        check_op("upsample_nearest2", 20, |rng| {
            let x = rand_tensor(rng, &[2, 2, 2], -1.0, 1.0);
            let w = weights(rng, 32);
            (vec![x], Box::new(move |t, v| {
                let s = t.upsample_nearest2(v[0])?;
                readout(t, s, &w)
            }))
        });
        check_op("window_attention", 20, |rng| {
            let q = rand_tensor(rng, &[4, 4], -1.0, 1.0);
            let k = rand_tensor(rng, &[4, 4], -1.0, 1.0);
            let v = rand_tensor(rng, &[4, 4], -1.0, 1.0);
            let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..0.0)).collect();
            let w = weights(rng, 16);
            (vec![q, k, v], Box::new(move |t, vars| {
                let windows = std::rc::Rc::new(vec![vec![0usize, 1, 2, 3]]);
                let s = t.window_attention(
                    vars[0],
                    vars[1],
                    vars[2],
                    2,
                    windows,
                    std::rc::Rc::new(bias.clone()),
                )?;
                readout(t, s, &w)
            }))
        });

        // full transformer block: input gradient via the oracle, parameter
        // gradients via direct probing
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let ps = block_params(&mut rng, 4, 4);
            let mask: Vec<f64> = (0..16)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 })
                .collect();
            let x = rand_tensor(&mut rng, &[16, 4], -1.0, 1.0);
            let w = weights(&mut rng, 16 * 4);
            {
                let mask = mask.clone();
                let ps2 = ps.clone();
                let w2 = w.clone();
                let err = max_rel_error(&[x.clone()], move |t, v| {
                    let out = run_block(t, v[0], &ps2, &mask)?;
                    readout(t, out, &w2)
                })
                .unwrap();
                assert!(err <= 1e-4, "block input seed {seed}: rel err {err:.3e}");
            }
            block_param_fd(&ps, &x, &mask, &w, &mut rng, 3);
        }

        let elapsed = t0.elapsed().as_secs_f64();
        assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s");
    });
}

// ---- criterion 2: circle loss oracle + monotonicity ----

fn eval_circle(rows: &[Vec<f64>], q: &[usize], p: &[Vec<usize>], n: &[Vec<usize>], tau: f64) -> f64 {
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let e = tape.constant(vec![rows.len(), dim], flat);
    let l = circle_loss(&mut tape, e, q, p, n, tau).unwrap();
    tape.scalar_value(l)
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[test]
fn criterion_2_circle_loss() {
    criterion("criterion 2: circle loss oracles and monotonicity", || {
        // antipodal: log(1 + e^(-(1 - (-1)))) = log(1 + e^-2)
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let l = eval_circle(&rows, &[0], &[vec![1]], &[vec![2]], 1.0);
        assert!((l - 0.126928).abs() <= 1e-5, "antipodal {l}");

        // orthogonal: log(1 + e^0) = log 2
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let l = eval_circle(&rows, &[0], &[vec![1]], &[vec![2]], 1.0);
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-6, "orthogonal {l}");

        // 1000 random perturbations: pulling a positive toward the query
        // never raises the loss; pulling a negative toward it never lowers it
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rand_unit = |rng: &mut ChaCha8Rng| {
            unit((0..4).map(|_| rng.random_range(-1.0..1.0) + 1e-3).collect())
        };
        let pull = |v: &[f64], toward: &[f64], t: f64| {
            unit(v
                .iter()
                .zip(toward)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect())
        };
        for i in 0..1000 {
            let q = rand_unit(&mut rng);
            let p = rand_unit(&mut rng);
            let n = rand_unit(&mut rng);
            let tau = rng.random_range(0.1..1.0);
            let t = rng.random_range(0.05..0.5);
            let base = eval_circle(
                &[q.clone(), p.clone(), n.clone()],
                &[0],
                &[vec![1]],
                &[vec![2]],
                tau,
            );
            if i % 2 == 0 {
                let p2 = pull(&p, &q, t);
                let l2 = eval_circle(&[q.clone(), p2, n], &[0], &[vec![1]], &[vec![2]], tau);
                assert!(l2 <= base + 1e-12, "positive pull raised loss: {l2} > {base}");
            } else {
                let n2 = pull(&n, &q, t);
                let l2 = eval_circle(&[q, p, n2], &[0], &[vec![1]], &[vec![2]], tau);
                assert!(l2 >= base - 1e-12, "negative pull lowered loss: {l2} < {base}");
            }
        }
    });
}

// ---- criterion 3: masked-attention suppression ----

#[test]
fn criterion_3_masked_attention_suppression() {
    criterion("criterion 3: masked keys carry < 1e-30 attention mass", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in 0..100 {
            // d_head = 1 and an indicator value matrix turn the attention
            // output into the exact probability mass on masked keys
            let n = 16;
            let d = 2;
            let windows: Vec<Vec<usize>> = (0..4).map(|w| (4 * w..4 * w + 4).collect()).collect();
            let mut mask = vec![1.0; n];
            for w in 0..4 {
                // at least one masked and one unmasked key per window
                let masked = rng.random_range(1..4usize);
                let mut idx: Vec<usize> = (0..4).collect();
                idx.shuffle(&mut rng);
                for &i in idx.iter().take(masked) {
                    mask[4 * w + i] = 0.0;
                }
            }
            let bias = mask_bias(&mask, 100.0).unwrap();
            let qd: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.2..2.2)).collect();
            let kd: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.2..2.2)).collect();
            let vd: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let on = if mask[i] == 0.0 { 1.0 } else { 0.0 };
                    vec![on; d]
                })
                .collect();
            let mut tape = Tape::new();
            let q = tape.constant(vec![n, d], qd);
            let k = tape.constant(vec![n, d], kd);
            let v = tape.constant(vec![n, d], vd);
            let out = tape
                .window_attention(
                    q,
                    k,
                    v,
                    d, // one dimension per head -> logits are plain products
                    std::rc::Rc::new(windows),
                    std::rc::Rc::new(bias),
                )
                .unwrap();
            for (i, &mass) in tape.data(out).iter().enumerate() {
                assert!(
                    mass < 1e-30,
                    "instance {inst}: masked mass {mass:.3e} at output {i}"
                );
            }
        }
    });
}

// ---- criterion 4: quadtree bijection ----

#[test]
fn criterion_4_quadtree_bijection() {
    criterion("criterion 4: quadtree parent/children bijection to 32x32", || {
        for h in 1..=16usize {
            for w in 1..=16usize {
                let (fh, fw) = (2 * h, 2 * w);
                let mut seen = vec![false; fh * fw];
                for i in 0..h {
                    for j in 0..w {
                        for (ci, cj) in quad_children(i, j, h, w).unwrap() {
                            assert!(ci < fh && cj < fw);
                            assert_eq!(quad_parent(ci, cj), (i, j));
                            let f = ci * fw + cj;
                            assert!(!seen[f], "child ({ci},{cj}) claimed twice");
                            seen[f] = true;
                        }
                        let flat = children_flat_indices(i * w + j, h, w).unwrap();
                        let expect: Vec<usize> = quad_children(i, j, h, w)
                            .unwrap()
                            .iter()
                            .map(|&(a, b)| a * fw + b)
                            .collect();
                        assert_eq!(flat.to_vec(), expect);
                    }
                }
                assert!(seen.iter().all(|&s| s), "children do not cover {fh}x{fw}");
                let pmap = parent_index_map(h, w);
                for y in 0..fh {
                    for x in 0..fw {
                        let (pi, pj) = quad_parent(y, x);
                        assert_eq!(pmap[y * fw + x], pi * w + pj);
                    }
                }
                assert!(quad_children(h, 0, h, w).is_err());
            }
        }
    });
}

// ---- criterion 5: k-means ----

#[test]
fn criterion_5_kmeans() {
    criterion("criterion 5: k-means monotone objective and antipodal recovery", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut clustered = 0;
        for run in 0..200u64 {
            let n = rng.random_range(8..32);
            let dim = rng.random_range(3..8);
            let emb: Vec<Vec<f64>> = (0..n)
                .map(|_| unit((0..dim).map(|_| rng.random_range(-1.0..1.0) + 1e-3).collect()))
                .collect();
            // the final objective as a function of the iteration cap must be
            // non-increasing: each extra iteration can only improve it
            let full = match kmeans_cosine(&emb, None, 50, 64, run).unwrap() {
                KmeansOutcome::Clustered(r) => r,
                KmeansOutcome::Degenerate => continue,
            };
            clustered += 1;
            let mut prev = f64::INFINITY;
            for cap in 1..=full.iterations {
                let r = match kmeans_cosine(&emb, None, cap, 64, run).unwrap() {
                    KmeansOutcome::Clustered(r) => r,
                    KmeansOutcome::Degenerate => panic!("degenerate under cap"),
                };
                assert!(
                    r.objective <= prev + 1e-9,
                    "run {run}: objective rose {prev} -> {}",
                    r.objective
                );
                prev = r.objective;
            }
        }
        assert!(clustered >= 190, "only {clustered}/200 runs clustered");

        // planted antipodal clusters are recovered exactly
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = unit((0..4).map(|_| rng.random_range(-1.0..1.0) + 1e-2).collect());
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            let mut emb = Vec::new();
            let mut labels = Vec::new();
            for i in 0..24 {
                let take_u = i % 3 != 0;
                emb.push(if take_u { u.clone() } else { neg.clone() });
                labels.push(usize::from(take_u));
            }
            let KmeansOutcome::Clustered(r) = kmeans_cosine(&emb, None, 50, 64, seed).unwrap()
            else {
                panic!("degenerate on planted clusters");
            };
            let direct: Vec<usize> = labels.clone();
            let flipped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
            assert!(
                r.assignment == direct || r.assignment == flipped,
                "seed {seed}: planted clusters not recovered"
            );
        }
    });
}

// ---- criterion 6: metric oracles ----

#[test]
fn criterion_6_metric_oracles() {
    criterion("criterion 6: detection/restoration metric oracles", || {
        let mask = |vals: &[f64], h: usize, w: usize| CorruptionMask {
            width: w,
            height: h,
            values: vals.to_vec(),
            binary: true,
        };
        // pred corrupted {(0,0),(0,1)}, gt corrupted {(0,1),(1,1)}:
        // tp=1 fp=1 fn=1 -> F1 = 0.5, IoU = 1/3
        let pred = mask(&[0.0, 0.0, 1.0, 1.0], 2, 2);
        let gt = mask(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let prob = [1.0, 1.0, 0.0, 0.0];
        let r = mask_metrics(&pred, &prob, &gt).unwrap();
        assert!((r.f1 - 0.5).abs() <= 1e-12);
        assert!((r.iou - 1.0 / 3.0).abs() <= 1e-12);

        // uniform offsets 0.1 and 0.01 -> exactly 20 and 40 dB
        let a = Image::filled(3, 8, 8, 0.5);
        let b = Image::filled(3, 8, 8, 0.6);
        let c = Image::filled(3, 8, 8, 0.51);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() <= 1e-9);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() <= 1e-9);

        // F1 = 2 IoU / (1 + IoU) on random binary masks
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let pv: Vec<f64> = (0..16).map(|_| f64::from(rng.random_bool(0.5))).collect();
            let gv: Vec<f64> = (0..16).map(|_| f64::from(rng.random_bool(0.5))).collect();
            let prob: Vec<f64> = pv.iter().map(|v| 1.0 - v).collect();
            let r: MaskReport =
                mask_metrics(&mask(&pv, 4, 4), &prob, &mask(&gv, 4, 4)).unwrap();
            let expect = 2.0 * r.iou / (1.0 + r.iou);
            assert!((r.f1 - expect).abs() <= 1e-12);
        }
    });
}

// ---- criteria 7 & 8: end-to-end toy run, shared fixture ----

struct Toy {
    run: RunConfig,
    state: TrainState,
    test: Vec<ToySample>,
    train_secs: f64,
}

struct ToySample {
    input: Image,
    gt: Image,
    mask32: CorruptionMask,
}

/// Majority-pool a full-resolution binary mask down to the finest stage.
fn pool_mask(mask_img: &Image, fh: usize, fw: usize) -> CorruptionMask {
    let m = CorruptionMask::from_image(mask_img).unwrap().binarized();
    let (mut h, mut w) = (m.height, m.width);
    let mut vals = m.values;
    while h > fh {
        vals = downsample_majority(&vals, h, w).unwrap();
        h /= 2;
        w /= 2;
    }
    assert_eq!((h, w), (fh, fw));
    CorruptionMask {
        width: fw,
        height: fh,
        values: vals,
        binary: true,
    }
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let train_spec = DatasetSpec {
            count: 500,
            image_size: 64,
            ratio_lo: 0.1,
            ratio_hi: 0.4,
            noise: NoiseSource::ImagePatch,
            seed: 11,
            blend_band: 0,
        };
        let test_spec = DatasetSpec {
            count: 50,
            seed: 100_000,
            ..train_spec.clone()
        };
        let train_entries = make_dataset(&train_spec, &dir.path().join("train")).unwrap();
        let test_entries = make_dataset(&test_spec, &dir.path().join("test")).unwrap();
        let samples = load_samples(&train_entries).unwrap();

        let run = RunConfig::default();
        let mut state = TrainState::fresh(&run.net, &run.det, &run.train);
        train_steps(
            &mut state,
            &samples,
            2000,
            &run.train,
            &run.net,
            &run.det,
            |_| {},
        )
        .unwrap();

        let (fh, fw) = run.net.stage_dims(3);
        let test = test_entries
            .iter()
            .map(|e| {
                let input = pnm::read_image(&e.input_path).unwrap();
                let gt = pnm::read_image(&e.gt_path).unwrap();
                let mask_img = pnm::read_image(&e.mask_path).unwrap();
                ToySample {
                    input,
                    gt,
                    mask32: pool_mask(&mask_img, fh, fw),
                }
            })
            .collect();
        Toy {
            run,
            state,
            test,
            train_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

fn finest_iou(pred_vals: &[f64], gt: &CorruptionMask) -> f64 {
    let pred = CorruptionMask {
        width: gt.width,
        height: gt.height,
        values: pred_vals.to_vec(),
        binary: true,
    };
    let prob: Vec<f64> = pred_vals.iter().map(|v| 1.0 - v).collect();
    mask_metrics(&pred, &prob, gt).unwrap().iou
}

#[test]
fn criterion_7_end_to_end_toy_run() {
    criterion("criterion 7: toy run IoU >= 0.90, PSNR >= 25 dB, <= 30 min", || {
        let t0 = Instant::now();
        let toy = toy();
        let mut iou_sum = 0.0;
        let mut psnr_sum = 0.0;
        for (i, s) in toy.test.iter().enumerate() {
            let res = detect_and_restore(
                &s.input,
                &toy.state.params,
                &toy.run.net,
                &toy.run.det,
                i as u64,
            )
            .unwrap();
            iou_sum += finest_iou(&res.detection.multi.masks[2], &s.mask32);
            psnr_sum += psnr(&res.restored, &s.gt).unwrap();
        }
        let n = toy.test.len() as f64;
        let (iou, p) = (iou_sum / n, psnr_sum / n);
        let total = toy.train_secs + t0.elapsed().as_secs_f64();
        println!("  toy run: mean IoU {iou:.4}, mean PSNR {p:.2} dB, {total:.0}s");
        assert!(iou >= 0.90, "mean finest-stage IoU {iou:.4} < 0.90");
        assert!(p >= 25.0, "mean PSNR {p:.2} dB < 25");
        assert!(total <= 1800.0, "toy run took {total:.0}s > 30 min");
    });
}

#[test]
fn criterion_8_hierarchy_ablation() {
    criterion("criterion 8: hierarchical IoU >= upsampled stage-1 IoU", || {
        let toy = toy();
        let (fh, _fw) = toy.run.net.stage_dims(3);
        let (h1, w1) = toy.run.net.stage_dims(1);
        let mut full_ious = Vec::new();
        let mut coarse_ious = Vec::new();
        // median over three detection seeds on the shared trained model
        for seed in 0..3u64 {
            let mut full_sum = 0.0;
            let mut coarse_sum = 0.0;
            for s in &toy.test {
                let det = detect_masks(
                    &s.input,
                    &toy.state.params,
                    &toy.run.net,
                    &toy.run.det,
                    seed,
                )
                .unwrap();
                full_sum += finest_iou(&det.multi.masks[2], &s.mask32);
                let mut up = det.multi.masks[0].clone();
                let (mut h, mut w) = (h1, w1);
                while h < fh {
                    up = upsample_mask_nearest(&up, h, w);
                    h *= 2;
                    w *= 2;
                }
                coarse_sum += finest_iou(&up, &s.mask32);
            }
            full_ious.push(full_sum / toy.test.len() as f64);
            coarse_ious.push(coarse_sum / toy.test.len() as f64);
        }
        full_ious.sort_by(f64::total_cmp);
        coarse_ious.sort_by(f64::total_cmp);
        let (full, coarse) = (full_ious[1], coarse_ious[1]);
        println!("  ablation: hierarchical {full:.4} vs upsampled stage-1 {coarse:.4}");
        assert!(
            full >= coarse,
            "hierarchical IoU {full:.4} < upsampled stage-1 IoU {coarse:.4}"
        );
    });
}

// ---- criterion 9: determinism and resumption ----

#[test]
fn criterion_9_determinism_and_resumption() {
    criterion("criterion 9: bit-identical reruns and split-and-resume", || {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            count: 4,
            image_size: 16,
            ratio_lo: 0.1,
            ratio_hi: 0.4,
            noise: NoiseSource::ImagePatch,
            seed: 9,
            blend_band: 0,
        };
        let entries = make_dataset(&spec, &dir.path().join("d")).unwrap();
        let samples = load_samples(&entries).unwrap();

        let mut run = RunConfig::default();
        run.net.image_size = 16;
        run.net.stage_widths = [8, 6, 4];
        run.net.stem_width = 4;
        run.net.blocks_per_stage = 1;
        run.net.window = 2;
        run.det.embed_dim = 8;
        run.det.query_count = 16;
        run.det.pos_count = 4;
        run.det.neg_count = 4;
        run.det.rep_cap = 64;
        run.train.batch_size = 2;

        let train = |state: &mut TrainState, steps: usize| {
            train_steps(state, &samples, steps, &run.train, &run.net, &run.det, |_| {}).unwrap();
        };
        let bytes = |state: &TrainState| {
            serialize_checkpoint(&Checkpoint {
                config: run.clone(),
                state: state.clone(),
            })
        };

        let mut a = TrainState::fresh(&run.net, &run.det, &run.train);
        train(&mut a, 4);
        let mut b = TrainState::fresh(&run.net, &run.det, &run.train);
        train(&mut b, 4);
        assert_eq!(bytes(&a), bytes(&b), "same-seed reruns differ");

        // split 2+2 through a serialized checkpoint
        let mut c = TrainState::fresh(&run.net, &run.det, &run.train);
        train(&mut c, 2);
        let mut resumed = deserialize_checkpoint(&bytes(&c)).unwrap().state;
        train(&mut resumed, 2);
        assert_eq!(bytes(&a), bytes(&resumed), "split-and-resume differs");
    });
}
