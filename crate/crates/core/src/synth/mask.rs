//! Irregular binary masks from random-walk brush strokes, plus alpha
//! blending of the boundary via an exact Euclidean distance transform.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::CorruptionMask;
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 50;

/// Generate a binary mask whose corruption ratio lands in [lo, hi].
///
/// 1-6 brush strokes per attempt: each walks from a random start with a
/// bounded heading change per step and stamps discs of a per-stroke
/// thickness in 3-9 px. Strokes are added until the ratio reaches `lo`;
/// overshooting `hi` discards the attempt.
pub fn generate_irregular_mask(
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<CorruptionMask> {
    if !(0.0..=0.9).contains(&lo) || !(0.0..=0.9).contains(&hi) || lo > hi {
        return Err(Error::contract(format!(
            "ratio range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 0.9"
        )));
    }
    if h < 8 || w < 8 {
        return Err(Error::contract(format!("mask size {h}x{w} must be >= 8x8")));
    }
    if hi == 0.0 {
        return Ok(CorruptionMask::all_ones(h, w));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_ratio = 0.0;
    for _ in 0..MAX_ATTEMPTS {
        let mut values = vec![1.0f64; h * w];
        let strokes = rng.random_range(1..=6usize);
        let mut ok = false;
        for _ in 0..strokes {
            stamp_stroke(&mut values, h, w, &mut rng);
            let ratio = corruption_ratio(&values);
            if ratio > hi {
                break;
            }
            if ratio >= lo {
                ok = true;
                break;
            }
        }
        last_ratio = corruption_ratio(&values);
        if ok || (last_ratio >= lo && last_ratio <= hi) {
            return Ok(CorruptionMask {
                width: w,
                height: h,
                values,
                binary: true,
            });
        }
    }
    Err(Error::MaskGeneration {
        achieved: last_ratio,
        lo,
        hi,
        attempts: MAX_ATTEMPTS,
    })
}

fn corruption_ratio(values: &[f64]) -> f64 {
    values.iter().map(|v| 1.0 - v).sum::<f64>() / values.len() as f64
}

fn stamp_stroke(values: &mut [f64], h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let mut y = rng.random_range(0.0..h as f64);
    let mut x = rng.random_range(0.0..w as f64);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let thickness = rng.random_range(3.0..=9.0f64);
    let radius = thickness / 2.0;
    let steps = rng.random_range(8..=(h.max(w) * 3 / 4).max(9));
    let step_len = (radius * 0.8).max(1.0);
    for _ in 0..steps {
        stamp_disc(values, h, w, y, x, radius);
        heading += rng.random_range(-0.6..0.6);
        y += heading.sin() * step_len;
        x += heading.cos() * step_len;
        y = y.clamp(0.0, h as f64 - 1.0);
        x = x.clamp(0.0, w as f64 - 1.0);
    }
}

fn stamp_disc(values: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, r: f64) {
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                values[y * w + x] = 0.0;
            }
        }
    }
}

/// Linearly ramp mask values across a `band`-pixel zone around region
/// boundaries. `band = 0` is the identity; masks without a boundary are
/// returned unchanged.
pub fn alpha_blend_mask(m: &CorruptionMask, band: usize) -> CorruptionMask {
    if band == 0 {
        return m.clone();
    }
    let (h, w) = (m.height, m.width);
    // distance to nearest pixel of the opposite binary value
    let zeros: Vec<bool> = m.values.iter().map(|&v| v < 0.5).collect();
    if zeros.iter().all(|&z| z) || zeros.iter().all(|&z| !z) {
        return m.clone();
    }
    let dist_to_zero = edt(h, w, &zeros);
    let dist_to_one = edt(h, w, &zeros.iter().map(|z| !z).collect::<Vec<_>>());
    let band = band as f64;
    let mut values = vec![0.0; h * w];
    for i in 0..h * w {
        let binary = m.values[i].round();
        let d = if binary >= 0.5 {
            dist_to_zero[i]
        } else {
            dist_to_one[i]
        };
        values[i] = if binary >= 0.5 {
            (0.5 + (d - 0.5) / band).min(1.0)
        } else {
            (0.5 - (d - 0.5) / band).max(0.0)
        };
    }
    let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
    CorruptionMask {
        width: w,
        height: h,
        values,
        binary,
    }
}

/// Exact Euclidean distance to the nearest seed pixel (Felzenszwalb-Huttenlocher
/// lower-envelope transform, rows then columns).
pub fn edt(h: usize, w: usize, seeds: &[bool]) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut g = vec![INF; h * w];
    for i in 0..h * w {
        if seeds[i] {
            g[i] = 0.0;
        }
    }
    let mut buf = vec![0.0; h.max(w)];
    // transform rows
    for y in 0..h {
        dt_1d(&g[y * w..(y + 1) * w], &mut buf[..w]);
        g[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    // transform columns
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        dt_1d(&col, &mut buf[..h]);
        for y in 0..h {
            g[y * w + x] = buf[y];
        }
    }
    g.iter().map(|v| v.sqrt()).collect()
}

/// 1-D squared distance transform of sampled function f.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}
