//! Named parameter tensors, deterministic initialization, and tape binding.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::NetworkConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Ordered name -> tensor table covering the encoder, decoder, projection
/// heads, inter-stage mappings, and the cluster-center classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Record every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t)))
            .collect();
        BoundParams { vars }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for one bound ParamSet.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

fn ones(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).unwrap().with_grad()
}

fn small_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * 0.02
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn add_linear(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, din: usize, dout: usize) {
    ps.insert(format!("{prefix}.w"), xavier(rng, vec![din, dout], din, dout));
    ps.insert(format!("{prefix}.b"), zeros(vec![dout]));
}

fn add_block(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, wa: usize, mlp: usize) {
    ps.insert(format!("{prefix}.ln1.g"), ones(vec![d]));
    ps.insert(format!("{prefix}.ln1.b"), zeros(vec![d]));
    ps.insert(format!("{prefix}.pos"), small_normal(rng, vec![wa, d]));
    for proj in ["wq", "wk", "wv", "wo"] {
        ps.insert(format!("{prefix}.attn.{proj}"), xavier(rng, vec![d, d], d, d));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        ps.insert(format!("{prefix}.attn.{bias}"), zeros(vec![d]));
    }
    ps.insert(format!("{prefix}.ln2.g"), ones(vec![d]));
    ps.insert(format!("{prefix}.ln2.b"), zeros(vec![d]));
    add_linear(ps, rng, &format!("{prefix}.mlp.fc1"), d, mlp * d);
    add_linear(ps, rng, &format!("{prefix}.mlp.fc2"), mlp * d, d);
}

fn add_conv(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dout: usize,
    din: usize,
    k: usize,
) {
    ps.insert(
        format!("{prefix}.w"),
        xavier(rng, vec![dout, din, k, k], din * k * k, dout * k * k),
    );
    ps.insert(format!("{prefix}.b"), zeros(vec![dout]));
}

/// Build every trainable tensor for the given configuration.
///
/// `embed_dim` is the contrastive embedding width of the projection heads.
pub fn init_params(cfg: &NetworkConfig, embed_dim: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let wa = cfg.window * cfg.window;
    let widths = cfg.stage_widths; // coarse (s1) to fine (s3)

    add_conv(&mut ps, &mut rng, "enc.stem", cfg.stem_width, cfg.channels, 5);
    // encoder: fine to coarse
    let down_in = [cfg.stem_width, widths[2], widths[1]];
    let down_out = [widths[2], widths[1], widths[0]];
    for (i, s) in [3usize, 2, 1].iter().enumerate() {
        add_conv(&mut ps, &mut rng, &format!("enc.down{s}"), down_out[i], down_in[i], 3);
        for b in 0..cfg.blocks_per_stage {
            add_block(
                &mut ps,
                &mut rng,
                &format!("enc.s{s}.blk{b}"),
                down_out[i],
                wa,
                cfg.mlp_ratio,
            );
        }
    }
    // decoder: coarse to fine
    for s in 1..=3usize {
        let d = widths[s - 1];
        for b in 0..cfg.blocks_per_stage {
            add_block(&mut ps, &mut rng, &format!("dec.s{s}.blk{b}"), d, wa, cfg.mlp_ratio);
        }
        if s < 3 {
            add_conv(&mut ps, &mut rng, &format!("dec.up{}", s + 1), widths[s], d, 3);
        }
    }
    add_conv(&mut ps, &mut rng, "dec.out", cfg.channels, widths[2], 5);

    // projection heads: s1 sees its own features, s2/s3 concatenate the
    // mapped parent embedding
    for s in 1..=3usize {
        let feat = widths[s - 1];
        let input = if s == 1 { feat } else { feat + embed_dim };
        let hidden = input.max(embed_dim * 2);
        add_linear(&mut ps, &mut rng, &format!("proj.s{s}.fc1"), input, hidden);
        add_linear(&mut ps, &mut rng, &format!("proj.s{s}.fc2"), hidden, embed_dim);
        if s > 1 {
            ps.insert(
                format!("proj.s{s}.map.w"),
                xavier(&mut rng, vec![embed_dim, embed_dim], embed_dim, embed_dim),
            );
        }
    }

    // cluster-center classifier: two fully connected layers with ReLU
    add_linear(&mut ps, &mut rng, "cls.fc1", embed_dim, embed_dim);
    add_linear(&mut ps, &mut rng, "cls.fc2", embed_dim, 1);

    ps
}
