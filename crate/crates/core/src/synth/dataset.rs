//! Dataset generation and the tab-separated manifest format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    alpha_blend_mask, compose_corrupted, generate_irregular_mask, smooth_image, NoiseSource,
};
use crate::error::{Error, Result};
use crate::io::pnm;

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub count: usize,
    pub image_size: usize,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub noise: NoiseSource,
    pub seed: u64,
    pub blend_band: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub gt_path: PathBuf,
    pub mask_path: PathBuf,
    pub input_path: PathBuf,
    pub ratio: f64,
    pub seed: u64,
}

/// Generate `count` triples under `out_dir` and write `manifest.tsv`.
/// Per-sample seeds are `seed + index`, so generation is order-independent.
pub fn make_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let entries: Vec<ManifestEntry> = (0..spec.count)
        .into_par_iter()
        .map(|i| generate_sample(spec, out_dir, i))
        .collect::<Result<_>>()?;
    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{}\n",
            e.index,
            file_name(&e.gt_path),
            file_name(&e.mask_path),
            file_name(&e.input_path),
            e.ratio,
            e.seed
        ));
    }
    let mpath = out_dir.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}

fn generate_sample(spec: &DatasetSpec, out_dir: &Path, index: usize) -> Result<ManifestEntry> {
    let sample_seed = spec.seed.wrapping_add(index as u64);
    let s = spec.image_size;

    let mask = generate_irregular_mask(s, s, spec.ratio_lo, spec.ratio_hi, sample_seed)?;
    let blended = alpha_blend_mask(&mask, spec.blend_band);

    let mut gt_rng = ChaCha8Rng::seed_from_u64(sample_seed);
    gt_rng.set_stream(1);
    let gt = smooth_image(3, s, s, &mut gt_rng);

    let noise = spec.noise.sample(3, s, s, sample_seed.wrapping_mul(0x9e37_79b9).wrapping_add(2));
    let sample = compose_corrupted(&gt, &blended, &noise)?;

    let gt_path = out_dir.join(format!("gt_{index:05}.ppm"));
    let mask_path = out_dir.join(format!("mask_{index:05}.pgm"));
    let input_path = out_dir.join(format!("input_{index:05}.ppm"));
    pnm::write_image(&gt_path, &gt)?;
    pnm::write_image(&mask_path, &mask.to_image())?;
    pnm::write_image(&input_path, &sample.input)?;

    Ok(ManifestEntry {
        index,
        gt_path,
        mask_path,
        input_path,
        ratio: mask.corruption_ratio(),
        seed: sample_seed,
    })
}

/// Parse `manifest.tsv` from a dataset directory; paths come back absolute.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mpath = dir.join("manifest.tsv");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 6 {
            return Err(Error::Format {
                path: mpath.display().to_string(),
                offset: ln,
                msg: format!("expected 6 tab-separated fields, got {}", parts.len()),
            });
        }
        let parse_err = |msg: &str| Error::Format {
            path: mpath.display().to_string(),
            offset: ln,
            msg: msg.into(),
        };
        out.push(ManifestEntry {
            index: parts[0].parse().map_err(|_| parse_err("bad index"))?,
            gt_path: dir.join(parts[1]),
            mask_path: dir.join(parts[2]),
            input_path: dir.join(parts[3]),
            ratio: parts[4].parse().map_err(|_| parse_err("bad ratio"))?,
            seed: parts[5].parse().map_err(|_| parse_err("bad seed"))?,
        });
    }
    Ok(out)
}
