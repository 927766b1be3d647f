//! Flat key = value run configuration covering every tunable knob.
//!
//! Parsing starts from defaults and applies overrides; unknown keys are
//! rejected. `serialize` emits the canonical form, and parse-serialize is a
//! fixed point.

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub det: DetectorConfig,
    pub train: TrainConfig,
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("line {line}: '{value}' is not a valid value for {key}"))
    })
}

fn parse_bool(value: &str, key: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: '{value}' is not true/false for {key}"
        ))),
    }
}

impl RunConfig {
    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let n = &mut self.net;
        let d = &mut self.det;
        let t = &mut self.train;
        match key {
            "net.image_size" => n.image_size = parse_num(value, key, line)?,
            "net.channels" => n.channels = parse_num(value, key, line)?,
            "net.stage_width1" => n.stage_widths[0] = parse_num(value, key, line)?,
            "net.stage_width2" => n.stage_widths[1] = parse_num(value, key, line)?,
            "net.stage_width3" => n.stage_widths[2] = parse_num(value, key, line)?,
            "net.stem_width" => n.stem_width = parse_num(value, key, line)?,
            "net.blocks_per_stage" => n.blocks_per_stage = parse_num(value, key, line)?,
            "net.heads" => n.heads = parse_num(value, key, line)?,
            "net.window" => n.window = parse_num(value, key, line)?,
            "net.shift_windows" => n.shift_windows = parse_bool(value, key, line)?,
            "net.mlp_ratio" => n.mlp_ratio = parse_num(value, key, line)?,
            "net.gamma" => n.gamma = parse_num(value, key, line)?,
            "det.embed_dim" => d.embed_dim = parse_num(value, key, line)?,
            "det.tau_loss" => d.tau_loss = parse_num(value, key, line)?,
            "det.tau_conf" => d.tau_conf = parse_num(value, key, line)?,
            "det.theta_hi" => d.theta_hi = parse_num(value, key, line)?,
            "det.theta_lo" => d.theta_lo = parse_num(value, key, line)?,
            "det.query_count" => d.query_count = parse_num(value, key, line)?,
            "det.pos_count" => d.pos_count = parse_num(value, key, line)?,
            "det.neg_count" => d.neg_count = parse_num(value, key, line)?,
            "det.rep_cap" => d.rep_cap = parse_num(value, key, line)?,
            "det.kmeans_max_iter" => d.kmeans_max_iter = parse_num(value, key, line)?,
            "det.kmeans_candidates" => d.kmeans_candidates = parse_num(value, key, line)?,
            "det.negated_confidence" => d.negated_confidence = parse_bool(value, key, line)?,
            "train.lambda_pixel" => t.lambda_pixel = parse_num(value, key, line)?,
            "train.lambda_perceptual" => t.lambda_perceptual = parse_num(value, key, line)?,
            "train.lambda_contrastive" => t.lambda_contrastive = parse_num(value, key, line)?,
            "train.lambda_adversarial" => t.lambda_adversarial = parse_num(value, key, line)?,
            "train.lambda_cls" => t.lambda_cls = parse_num(value, key, line)?,
            "train.lr" => t.lr = parse_num(value, key, line)?,
            "train.beta1" => t.beta1 = parse_num(value, key, line)?,
            "train.beta2" => t.beta2 = parse_num(value, key, line)?,
            "train.adam_eps" => t.adam_eps = parse_num(value, key, line)?,
            "train.batch_size" => t.batch_size = parse_num(value, key, line)?,
            "train.steps" => t.steps = parse_num(value, key, line)?,
            "train.seed" => t.seed = parse_num(value, key, line)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(value, key, line)?,
            _ => {
                return Err(Error::Config(format!("line {line}: unknown key '{key}'")));
            }
        }
        Ok(())
    }

    /// Parse key = value lines over the defaults. Blank lines and lines
    /// starting with '#' are skipped; unknown keys fail.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    i + 1
                )));
            };
            cfg.apply(key.trim(), value.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    /// Canonical serialization; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let n = &self.net;
        let d = &self.det;
        let t = &self.train;
        let mut s = String::new();
        let kv: Vec<(&str, String)> = vec![
            ("net.image_size", n.image_size.to_string()),
            ("net.channels", n.channels.to_string()),
            ("net.stage_width1", n.stage_widths[0].to_string()),
            ("net.stage_width2", n.stage_widths[1].to_string()),
            ("net.stage_width3", n.stage_widths[2].to_string()),
            ("net.stem_width", n.stem_width.to_string()),
            ("net.blocks_per_stage", n.blocks_per_stage.to_string()),
            ("net.heads", n.heads.to_string()),
            ("net.window", n.window.to_string()),
            ("net.shift_windows", n.shift_windows.to_string()),
            ("net.mlp_ratio", n.mlp_ratio.to_string()),
            ("net.gamma", n.gamma.to_string()),
            ("det.embed_dim", d.embed_dim.to_string()),
            ("det.tau_loss", d.tau_loss.to_string()),
            ("det.tau_conf", d.tau_conf.to_string()),
            ("det.theta_hi", d.theta_hi.to_string()),
            ("det.theta_lo", d.theta_lo.to_string()),
            ("det.query_count", d.query_count.to_string()),
            ("det.pos_count", d.pos_count.to_string()),
            ("det.neg_count", d.neg_count.to_string()),
            ("det.rep_cap", d.rep_cap.to_string()),
            ("det.kmeans_max_iter", d.kmeans_max_iter.to_string()),
            ("det.kmeans_candidates", d.kmeans_candidates.to_string()),
            ("det.negated_confidence", d.negated_confidence.to_string()),
            ("train.lambda_pixel", t.lambda_pixel.to_string()),
            ("train.lambda_perceptual", t.lambda_perceptual.to_string()),
            ("train.lambda_contrastive", t.lambda_contrastive.to_string()),
            ("train.lambda_adversarial", t.lambda_adversarial.to_string()),
            ("train.lambda_cls", t.lambda_cls.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ];
        for (k, v) in kv {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}
