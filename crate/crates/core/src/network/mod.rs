//! Hierarchical encoder, mask-guided windowed-attention blocks, and the
//! coarse-to-fine restoration decoder.

mod params;

pub use params::{init_params, BoundParams, ParamSet};

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Var};

/// Desk-scale architecture knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Stage widths, coarse (s1) to fine (s3).
    pub stage_widths: [usize; 3],
    pub stem_width: usize,
    pub blocks_per_stage: usize,
    pub heads: usize,
    pub window: usize,
    pub shift_windows: bool,
    pub mlp_ratio: usize,
    /// Additive logit penalty on corrupted keys.
    pub gamma: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 64,
            channels: 3,
            stage_widths: [32, 24, 16],
            stem_width: 16,
            blocks_per_stage: 2,
            heads: 2,
            window: 4,
            shift_windows: true,
            mlp_ratio: 4,
            gamma: 100.0,
        }
    }
}

impl NetworkConfig {
    /// (h, w) of stage s features for this image size: s1 = H/8 .. s3 = H/2.
    pub fn stage_dims(&self, s: usize) -> (usize, usize) {
        let div = match s {
            1 => 8,
            2 => 4,
            3 => 2,
            _ => panic!("stage {s} out of range"),
        };
        (self.image_size / div, self.image_size / div)
    }

    pub fn stage_width(&self, s: usize) -> usize {
        self.stage_widths[s - 1]
    }
}

/// Token-index partition of an h x w grid into non-overlapping windows,
/// plus each token's within-window position. `shift` rolls the grid by
/// half a window cyclically.
pub fn window_partition(
    h: usize,
    w: usize,
    win: usize,
    shift: bool,
) -> (Rc<Vec<Vec<usize>>>, Vec<usize>) {
    assert!(h % win == 0 && w % win == 0, "grid {h}x{w} not tiled by {win}");
    let off = if shift { win / 2 } else { 0 };
    let mut windows = vec![Vec::with_capacity(win * win); (h / win) * (w / win)];
    let mut pos = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y + off) % h;
            let sx = (x + off) % w;
            let widx = (sy / win) * (w / win) + sx / win;
            pos[y * w + x] = (sy % win) * win + sx % win;
            windows[widx].push(y * w + x);
        }
    }
    (Rc::new(windows), pos)
}

/// Additive attention bias gamma * (m - 1): 0 on uncorrupted keys, -gamma on
/// corrupted keys. The mask must be binary.
pub fn mask_bias(mask: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if gamma <= 0.0 {
        return Err(Error::contract("mask_bias gamma must be > 0"));
    }
    if let Some(v) = mask.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::contract(format!(
            "mask_bias requires a binary mask, found value {v}"
        )));
    }
    Ok(mask.iter().map(|m| gamma * (m - 1.0)).collect())
}

/// Attention projection handles for one block.
struct AttnParams {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

impl AttnParams {
    fn fetch(bp: &BoundParams, prefix: &str) -> Self {
        AttnParams {
            wq: bp.var(&format!("{prefix}.attn.wq")),
            bq: bp.var(&format!("{prefix}.attn.bq")),
            wk: bp.var(&format!("{prefix}.attn.wk")),
            bk: bp.var(&format!("{prefix}.attn.bk")),
            wv: bp.var(&format!("{prefix}.attn.wv")),
            bv: bp.var(&format!("{prefix}.attn.bv")),
            wo: bp.var(&format!("{prefix}.attn.wo")),
            bo: bp.var(&format!("{prefix}.attn.bo")),
        }
    }
}

/// Multi-head contextual attention: windowed attention whose logits carry an
/// additive bias suppressing corrupted keys, followed by an output projection.
fn mca_attention(
    tape: &mut Tape,
    x: Var,
    key_bias: Rc<Vec<f64>>,
    heads: usize,
    windows: Rc<Vec<Vec<usize>>>,
    p: &AttnParams,
) -> Result<Var> {
    let q = tape.matmul(x, p.wq)?;
    let q = tape.row_bias(q, p.bq)?;
    let k = tape.matmul(x, p.wk)?;
    let k = tape.row_bias(k, p.bk)?;
    let v = tape.matmul(x, p.wv)?;
    let v = tape.row_bias(v, p.bv)?;
    let att = tape.window_attention(q, k, v, heads, windows, key_bias)?;
    let out = tape.matmul(att, p.wo)?;
    tape.row_bias(out, p.bo)
}

/// Standalone MCA entry point over a binary key mask (1 = uncorrupted).
pub fn mca_attention_masked(
    tape: &mut Tape,
    x: Var,
    mask: &[f64],
    gamma: f64,
    heads: usize,
    windows: Rc<Vec<Vec<usize>>>,
    bp: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let bias = Rc::new(mask_bias(mask, gamma)?);
    let p = AttnParams::fetch(bp, prefix);
    mca_attention(tape, x, bias, heads, windows, &p)
}

pub const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block:
/// x' = x + MCA(LN(x) + pos, M); x'' = x' + MLP(LN(x')).
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    key_bias: Rc<Vec<f64>>,
    heads: usize,
    windows: Rc<Vec<Vec<usize>>>,
    pos_index: &[usize],
    bp: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let ln1g = bp.var(&format!("{prefix}.ln1.g"));
    let ln1b = bp.var(&format!("{prefix}.ln1.b"));
    let h = tape.layernorm(x, ln1g, ln1b, LN_EPS)?;
    let pos = bp.var(&format!("{prefix}.pos"));
    let h = tape.add_rows_by_index(h, pos, pos_index.to_vec())?;
    let p = AttnParams::fetch(bp, prefix);
    let att = mca_attention(tape, h, key_bias, heads, windows, &p)?;
    let x1 = tape.add(x, att)?;

    let ln2g = bp.var(&format!("{prefix}.ln2.g"));
    let ln2b = bp.var(&format!("{prefix}.ln2.b"));
    let h2 = tape.layernorm(x1, ln2g, ln2b, LN_EPS)?;
    let h2 = tape.matmul(h2, bp.var(&format!("{prefix}.mlp.fc1.w")))?;
    let h2 = tape.row_bias(h2, bp.var(&format!("{prefix}.mlp.fc1.b")))?;
    let h2 = tape.gelu(h2);
    let h2 = tape.matmul(h2, bp.var(&format!("{prefix}.mlp.fc2.w")))?;
    let h2 = tape.row_bias(h2, bp.var(&format!("{prefix}.mlp.fc2.b")))?;
    tape.add(x1, h2)
}

/// Per-stage encoder outputs as token matrices [h*w, D], s1 coarsest.
pub struct EncodedStages {
    /// Indexed s-1; tokens of stage s.
    pub tokens: [Var; 3],
}

fn run_stage_blocks(
    tape: &mut Tape,
    mut x: Var,
    stage_prefix: &str,
    key_bias: Rc<Vec<f64>>,
    h: usize,
    w: usize,
    cfg: &NetworkConfig,
    bp: &BoundParams,
) -> Result<Var> {
    for b in 0..cfg.blocks_per_stage {
        let shift = cfg.shift_windows && b % 2 == 1;
        let (windows, pos_index) = window_partition(h, w, cfg.window, shift);
        x = transformer_block(
            tape,
            x,
            key_bias.clone(),
            cfg.heads,
            windows,
            &pos_index,
            bp,
            &format!("{stage_prefix}.blk{b}"),
        )?;
    }
    Ok(x)
}

/// Encode an input image into three scales of token features. Encoder
/// attention runs unbiased (all-ones mask): masks are unknown here.
pub fn encode(
    tape: &mut Tape,
    input: &Image,
    cfg: &NetworkConfig,
    bp: &BoundParams,
) -> Result<EncodedStages> {
    if input.height % 8 != 0 || input.width % 8 != 0 {
        return Err(Error::contract(format!(
            "input {}x{} must be divisible by 8",
            input.height, input.width
        )));
    }
    let x = tape.constant(
        vec![input.channels, input.height, input.width],
        input.data.clone(),
    );
    let x = tape.conv2d(x, bp.var("enc.stem.w"), 1, 2)?;
    let x = tape.channel_bias(x, bp.var("enc.stem.b"))?;
    let mut chw = tape.gelu(x);

    let mut tokens: [Option<Var>; 3] = [None, None, None];
    for s in [3usize, 2, 1] {
        let y = tape.conv2d(chw, bp.var(&format!("enc.down{s}.w")), 2, 1)?;
        let y = tape.channel_bias(y, bp.var(&format!("enc.down{s}.b")))?;
        let (h, w) = cfg.stage_dims(s);
        let t = tape.chw_to_rows(y)?;
        let zero_bias = Rc::new(vec![0.0; h * w]);
        let t = run_stage_blocks(tape, t, &format!("enc.s{s}"), zero_bias, h, w, cfg, bp)?;
        tokens[s - 1] = Some(t);
        if s > 1 {
            chw = tape.rows_to_chw(t, h, w)?;
        }
    }
    Ok(EncodedStages {
        tokens: [
            tokens[0].unwrap(),
            tokens[1].unwrap(),
            tokens[2].unwrap(),
        ],
    })
}

/// Nearest-neighbor 2x upsample of a stage mask (plain values, not on tape).
pub fn upsample_mask_nearest(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 4 * h * w];
    for y in 0..2 * h {
        for x in 0..2 * w {
            out[y * 2 * w + x] = values[(y / 2) * w + x / 2];
        }
    }
    out
}

/// Decode restored content guided by per-stage binary masks.
///
/// Returns (synthesized content, composed restoration): the composition
/// keeps input pixels where the finest mask (upsampled to image size) is 1
/// and synthesized content where it is 0.
pub fn decode_restore(
    tape: &mut Tape,
    enc: &EncodedStages,
    stage_masks: [&[f64]; 3],
    input: &Image,
    cfg: &NetworkConfig,
    bp: &BoundParams,
) -> Result<(Var, Var)> {
    for s in 1..=3usize {
        let (h, w) = cfg.stage_dims(s);
        if stage_masks[s - 1].len() != h * w {
            return Err(Error::contract(format!(
                "stage {s} mask has {} entries, expected {}",
                stage_masks[s - 1].len(),
                h * w
            )));
        }
    }
    // Mask-gate of encoder tokens: positions detected as corrupted enter the
    // decoder as zeros, so corrupted-region noise never rides the residual
    // stream into the synthesis path; their content is filled in purely by
    // attention from uncorrupted positions.
    let gate_tokens = |tape: &mut Tape, t: Var, s: usize| -> Result<Var> {
        let (h, w) = cfg.stage_dims(s);
        let d = cfg.stage_width(s);
        let gate: Vec<f64> = stage_masks[s - 1]
            .iter()
            .flat_map(|&m| std::iter::repeat(m).take(d))
            .collect();
        let g = tape.constant(vec![h * w, d], gate);
        tape.mul(t, g)
    };
    let mut x = gate_tokens(tape, enc.tokens[0], 1)?;
    for s in 1..=3usize {
        let (h, w) = cfg.stage_dims(s);
        if s > 1 {
            // Same-scale gated skip from the encoder: clean detail only.
            let skip = gate_tokens(tape, enc.tokens[s - 1], s)?;
            x = tape.add(x, skip)?;
        }
        let bias = Rc::new(mask_bias(stage_masks[s - 1], cfg.gamma)?);
        x = run_stage_blocks(tape, x, &format!("dec.s{s}"), bias, h, w, cfg, bp)?;
        let chw = tape.rows_to_chw(x, h, w)?;
        let up = tape.upsample_nearest2(chw)?;
        if s < 3 {
            let y = tape.conv2d(up, bp.var(&format!("dec.up{}.w", s + 1)), 1, 1)?;
            let y = tape.channel_bias(y, bp.var(&format!("dec.up{}.b", s + 1)))?;
            let y = tape.gelu(y);
            x = tape.chw_to_rows(y)?;
        } else {
            let y = tape.conv2d(up, bp.var("dec.out.w"), 1, 2)?;
            let y = tape.channel_bias(y, bp.var("dec.out.b"))?;
            x = y;
        }
    }
    let content = tape.sigmoid(x); // [C,H,W] in (0,1)

    let (h3, w3) = cfg.stage_dims(3);
    let fine = upsample_mask_nearest(stage_masks[2], h3, w3);
    let hw = input.height * input.width;
    let mut mask_c = Vec::with_capacity(input.channels * hw);
    let mut inv_c = Vec::with_capacity(input.channels * hw);
    for _ in 0..input.channels {
        mask_c.extend(fine.iter().copied());
        inv_c.extend(fine.iter().map(|m| 1.0 - m));
    }
    let shape = vec![input.channels, input.height, input.width];
    let m = tape.constant(shape.clone(), mask_c);
    let minv = tape.constant(shape.clone(), inv_c);
    let inp = tape.constant(shape, input.data.clone());
    let kept = tape.mul(inp, m)?;
    let synth = tape.mul(content, minv)?;
    let restored = tape.add(kept, synth)?;
    Ok((content, restored))
}

#[cfg(test)]
mod tests;
