use std::rc::Rc;

use approx::assert_abs_diff_eq;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::image::Image;
use crate::tensor::Tape;

fn tiny_cfg() -> NetworkConfig {
    NetworkConfig {
        image_size: 16,
        channels: 3,
        stage_widths: [8, 6, 4],
        stem_width: 4,
        blocks_per_stage: 1,
        heads: 2,
        window: 2,
        shift_windows: false,
        mlp_ratio: 2,
        gamma: 100.0,
    }
}

fn random_image(cfg: &NetworkConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(cfg.channels, cfg.image_size, cfg.image_size, 0.0);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    img
}

#[test]
fn window_partition_tiles_grid() {
    let (windows, pos) = window_partition(8, 8, 4, false);
    assert_eq!(windows.len(), 4);
    let mut seen = vec![false; 64];
    for w in windows.iter() {
        assert_eq!(w.len(), 16);
        for &t in w {
            assert!(!seen[t]);
            seen[t] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
    // token (0,0) sits at position 0 of its window; token (1,1) at 1*4+1
    assert_eq!(pos[0], 0);
    assert_eq!(pos[9], 5);
}

#[test]
fn window_partition_shift_rolls_membership() {
    let (plain, _) = window_partition(8, 8, 4, false);
    let (shifted, _) = window_partition(8, 8, 4, true);
    // token (0,0) and (7,7) land in the same shifted window (cyclic roll by 2)
    let find = |ws: &Vec<Vec<usize>>, t: usize| ws.iter().position(|w| w.contains(&t)).unwrap();
    assert_ne!(find(&plain, 0), find(&plain, 63));
    assert_eq!(find(&shifted, 63), find(&shifted, 0 * 8 + 0 + 6 * 8 + 6));
    // shifted windows still tile
    let total: usize = shifted.iter().map(|w| w.len()).sum();
    assert_eq!(total, 64);
}

#[test]
fn mask_bias_values_and_binary_check() {
    let b = mask_bias(&[1.0, 0.0, 1.0], 100.0).unwrap();
    assert_eq!(b, vec![0.0, -100.0, 0.0]);
    assert!(mask_bias(&[0.5], 100.0).is_err());
    assert!(mask_bias(&[1.0], 0.0).is_err());
}

#[test]
fn masked_keys_are_suppressed() {
    // one window of 4 tokens, only key 2 uncorrupted: every query's output
    // must collapse to row 2 of V up to an O(e^-100) correction.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let rand_mat = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let q = tape.constant(vec![4, 4], rand_mat(&mut rng));
    let k = tape.constant(vec![4, 4], rand_mat(&mut rng));
    let vdata = rand_mat(&mut rng);
    let v = tape.constant(vec![4, 4], vdata.clone());
    let windows = Rc::new(vec![vec![0, 1, 2, 3]]);
    let bias = Rc::new(mask_bias(&[0.0, 0.0, 1.0, 0.0], 100.0).unwrap());
    let out = tape
        .window_attention(q, k, v, 2, windows, bias)
        .unwrap();
    let out = tape.data(out);
    for row in 0..4 {
        for c in 0..4 {
            assert_abs_diff_eq!(out[row * 4 + c], vdata[2 * 4 + c], epsilon = 1e-12);
        }
    }
}

#[test]
fn encode_shape_contract() {
    for (size, cfg) in [(16usize, tiny_cfg()), (32, {
        let mut c = tiny_cfg();
        c.image_size = 32;
        c
    })] {
        let params = init_params(&cfg, 8, 1);
        let img = random_image(&cfg, 2);
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let enc = encode(&mut tape, &img, &cfg, &bp).unwrap();
        for s in 1..=3usize {
            let (h, w) = cfg.stage_dims(s);
            assert_eq!(h, size / (8 >> (s - 1)));
            assert_eq!(
                tape.shape(enc.tokens[s - 1]),
                &[h * w, cfg.stage_width(s)]
            );
        }
    }
}

#[test]
fn encode_rejects_indivisible_input() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 8, 1);
    let img = Image::filled(3, 12, 12, 0.5);
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    assert!(encode(&mut tape, &img, &cfg, &bp).is_err());
}

fn stage_mask_vecs(cfg: &NetworkConfig, fill: f64) -> [Vec<f64>; 3] {
    let mk = |s: usize| {
        let (h, w) = cfg.stage_dims(s);
        vec![fill; h * w]
    };
    [mk(1), mk(2), mk(3)]
}

fn forward_restored(cfg: &NetworkConfig, params: &ParamSet, img: &Image, masks: &[Vec<f64>; 3]) -> Vec<f64> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let enc = encode(&mut tape, img, cfg, &bp).unwrap();
    let (_, restored) = decode_restore(
        &mut tape,
        &enc,
        [&masks[0], &masks[1], &masks[2]],
        img,
        cfg,
        &bp,
    )
    .unwrap();
    tape.data(restored).to_vec()
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 8, 3);
    let img = random_image(&cfg, 4);
    let masks = stage_mask_vecs(&cfg, 0.0);
    let a = forward_restored(&cfg, &params, &img, &masks);
    let b = forward_restored(&cfg, &params, &img, &masks);
    assert_eq!(a, b); // bit exact
}

#[test]
fn all_ones_mask_composes_to_input() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 8, 5);
    let img = random_image(&cfg, 6);
    let masks = stage_mask_vecs(&cfg, 1.0);
    let restored = forward_restored(&cfg, &params, &img, &masks);
    for (r, i) in restored.iter().zip(&img.data) {
        assert_abs_diff_eq!(r, i, epsilon = 1e-12);
    }
}

#[test]
fn content_stays_in_unit_interval() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 8, 9);
    let img = random_image(&cfg, 10);
    let masks = stage_mask_vecs(&cfg, 0.0);
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let enc = encode(&mut tape, &img, &cfg, &bp).unwrap();
    let (content, _) = decode_restore(
        &mut tape,
        &enc,
        [&masks[0], &masks[1], &masks[2]],
        &img,
        &cfg,
        &bp,
    )
    .unwrap();
    assert!(tape.data(content).iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn upsample_mask_nearest_doubles() {
    let up = upsample_mask_nearest(&[1.0, 0.0, 0.0, 1.0], 2, 2);
    assert_eq!(
        up,
        vec![
            1.0, 1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 1.0, //
            0.0, 0.0, 1.0, 1.0,
        ]
    );
}

fn scalar_loss(cfg: &NetworkConfig, params: &ParamSet, img: &Image, masks: &[Vec<f64>; 3]) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let enc = encode(&mut tape, img, cfg, &bp).unwrap();
    let (_, restored) = decode_restore(
        &mut tape,
        &enc,
        [&masks[0], &masks[1], &masks[2]],
        img,
        cfg,
        &bp,
    )
    .unwrap();
    // squared values rather than a plain sum so no gradient cancels by symmetry
    let sq = tape.mul(restored, restored).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    let grads = bp
        .iter()
        .map(|(n, v)| (n.to_string(), tape.grad(v).map(|g| g.to_vec()).unwrap_or_default()))
        .collect();
    (tape.scalar_value(loss), grads)
}

#[test]
fn gradient_reaches_every_encoder_decoder_param() {
    let cfg = tiny_cfg();
    for seed in [11u64, 12, 13, 14, 15] {
        let params = init_params(&cfg, 8, seed);
        let img = random_image(&cfg, seed + 100);
        // mixed mask: a corrupted left half keeps the synthesis path live
        // while the uncorrupted half keeps encoder tokens flowing through
        // the decoder's gated inputs
        let mut masks = stage_mask_vecs(&cfg, 1.0);
        for m in &mut masks {
            let n = m.len();
            for v in m.iter_mut().take(n / 2) {
                *v = 0.0;
            }
        }
        let (_, grads) = scalar_loss(&cfg, &params, &img, &masks);
        for (name, g) in &grads {
            if name.starts_with("proj.") || name.starts_with("cls.") {
                continue; // not on this forward path
            }
            assert!(
                g.iter().any(|&v| v != 0.0),
                "seed {seed}: no gradient reached {name}"
            );
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 8, 21);
    let img = random_image(&cfg, 22);
    // mixed mask so both attention branches are exercised
    let mut masks = stage_mask_vecs(&cfg, 1.0);
    for m in masks.iter_mut() {
        for (i, v) in m.iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = 0.0;
            }
        }
    }
    let (_, grads) = scalar_loss(&cfg, &params, &img, &masks);
    let grad_of = |name: &str| -> &[f64] {
        &grads.iter().find(|(n, _)| n == name).unwrap().1
    };

    // probe a few coordinates spread across the net with central differences
    let probes = [
        ("enc.stem.w", 0usize),
        ("enc.s1.blk0.attn.wq", 3),
        ("enc.s2.blk0.mlp.fc1.w", 5),
        ("dec.s1.blk0.attn.wv", 2),
        ("dec.s3.blk0.ln1.g", 1),
        ("dec.out.w", 7),
    ];
    let h = 1e-4;
    for (name, idx) in probes {
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data[idx] -= h;
        let (lp, _) = scalar_loss(&cfg, &plus, &img, &masks);
        let (lm, _) = scalar_loss(&cfg, &minus, &img, &masks);
        let fd = (lp - lm) / (2.0 * h);
        let analytic = grad_of(name)[idx];
        let rel = (analytic - fd).abs() / (analytic.abs().max(fd.abs()) + 1e-6);
        assert!(
            rel <= 1e-4,
            "{name}[{idx}]: analytic {analytic} vs fd {fd} (rel {rel})"
        );
    }
}
