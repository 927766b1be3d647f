use std::fs;
use std::path::Path;

use rayon::prelude::*;

use hcl_core::detector::quadtree::downsample_majority;
use hcl_core::image::Image;
use hcl_core::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hcl_core::io::config::RunConfig;
use hcl_core::io::pnm;
use hcl_core::metrics::{mask_metrics, psnr, ssim, MaskReport};
use hcl_core::pipeline::detect_and_restore;
use hcl_core::synth::{
    make_dataset, read_manifest, CorruptionMask, DatasetSpec, ManifestEntry, NoiseSource,
};
use hcl_core::training::{load_samples, train_steps, TrainState};
use hcl_core::Error as CoreError;

use crate::error::AppError;

type AppResult<T = ()> = Result<T, AppError>;

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

fn parse_ratio(spec: &str) -> AppResult<(f64, f64)> {
    let (lo, hi) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("--ratio expects LO:HI, got '{spec}'")))?;
    let lo: f64 = lo
        .parse()
        .map_err(|_| usage(format!("--ratio: '{lo}' is not a number")))?;
    let hi: f64 = hi
        .parse()
        .map_err(|_| usage(format!("--ratio: '{hi}' is not a number")))?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(usage(format!(
            "--ratio bounds must satisfy 0 <= LO <= HI <= 1, got {lo}:{hi}"
        )));
    }
    Ok((lo, hi))
}

fn parse_noise(spec: &str) -> AppResult<NoiseSource> {
    match spec {
        "image" => Ok(NoiseSource::ImagePatch),
        "constant" => Ok(NoiseSource::Constant(0.5)),
        "uniform" => Ok(NoiseSource::UniformRandom { lo: 0.0, hi: 1.0 }),
        other => {
            if let Some(v) = other.strip_prefix("constant:") {
                let v: f64 = v
                    .parse()
                    .map_err(|_| usage(format!("--noise constant:'{v}' is not a number")))?;
                return Ok(NoiseSource::Constant(v));
            }
            Err(usage(format!(
                "--noise must be constant[:V], uniform, or image, got '{other}'"
            )))
        }
    }
}

pub fn gen_data(
    out: &Path,
    count: usize,
    size: usize,
    ratio: &str,
    noise: &str,
    seed: u64,
    blend_band: usize,
) -> AppResult {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let (ratio_lo, ratio_hi) = parse_ratio(ratio)?;
    let spec = DatasetSpec {
        count,
        image_size: size,
        ratio_lo,
        ratio_hi,
        noise: parse_noise(noise)?,
        seed,
        blend_band,
    };
    let entries = make_dataset(&spec, out)?;
    println!("wrote {} samples to {}", entries.len(), out.display());
    Ok(())
}

pub fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> AppResult {
    let (mut run, mut state) = match resume {
        Some(ckpt_path) => {
            if config.is_some() {
                return Err(usage("--config cannot be combined with --resume"));
            }
            if seed.is_some() {
                return Err(usage("--seed cannot be combined with --resume"));
            }
            let ckpt = load_checkpoint(ckpt_path)?;
            (ckpt.config, ckpt.state)
        }
        None => {
            let mut run = RunConfig::default();
            if let Some(path) = config {
                let text = fs::read_to_string(path)
                    .map_err(|e| CoreError::io(path.display().to_string(), e))?;
                run = RunConfig::parse(&text)?;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let state = TrainState::fresh(&run.net, &run.det, &run.train);
            (run, state)
        }
    };
    if let Some(s) = steps {
        run.train.steps = s;
    }

    let entries = read_manifest(data)?;
    let samples = load_samples(&entries)?;

    let save = |state: &TrainState| -> AppResult {
        let ckpt = Checkpoint {
            config: run.clone(),
            state: state.clone(),
        };
        save_checkpoint(out, &ckpt)?;
        Ok(())
    };

    while state.step < run.train.steps {
        let remaining = run.train.steps - state.step;
        let chunk = if run.train.checkpoint_every == 0 {
            remaining
        } else {
            run.train.checkpoint_every.min(remaining)
        };
        // a failed chunk exits without saving, so the file on disk always
        // holds the last healthy state
        train_steps(
            &mut state,
            &samples,
            chunk,
            &run.train,
            &run.net,
            &run.det,
            |r| println!("{}", r.log_line()),
        )?;
        save(&state)?;
    }
    save(&state)?;
    println!("trained to step {} -> {}", state.step, out.display());
    Ok(())
}

fn mask_to_image(values: &[f64], h: usize, w: usize) -> Image {
    Image {
        channels: 1,
        height: h,
        width: w,
        data: values.to_vec(),
    }
}

pub fn detect(
    ckpt_path: &Path,
    image: &Path,
    out_mask: &Path,
    emit_scales: Option<&Path>,
    seed: u64,
) -> AppResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let img = pnm::read_image(image)?;
    let det = hcl_core::detector::detect_masks(
        &img,
        &ckpt.state.params,
        &ckpt.config.net,
        &ckpt.config.det,
        seed,
    )?;
    let (fh, fw) = ckpt.config.net.stage_dims(3);
    pnm::write_image(out_mask, &mask_to_image(&det.multi.masks[2], fh, fw))?;
    if let Some(dir) = emit_scales {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
        for s in 1..=3usize {
            let (h, w) = ckpt.config.net.stage_dims(s);
            let path = dir.join(format!("scale{s}.pgm"));
            pnm::write_image(&path, &mask_to_image(&det.multi.masks[s - 1], h, w))?;
        }
    }
    Ok(())
}

pub fn inpaint(ckpt_path: &Path, image: &Path, out: &Path, seed: u64) -> AppResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let img = pnm::read_image(image)?;
    let res = detect_and_restore(
        &img,
        &ckpt.state.params,
        &ckpt.config.net,
        &ckpt.config.det,
        seed,
    )?;
    pnm::write_image(out, &res.restored)?;
    Ok(())
}

fn eval_entry(
    entry: &ManifestEntry,
    ckpt: &Checkpoint,
    seed: u64,
) -> hcl_core::Result<(MaskReport, f64, f64)> {
    let input = pnm::read_image(&entry.input_path)?;
    let gt = pnm::read_image(&entry.gt_path)?;
    let mask_img = pnm::read_image(&entry.mask_path)?;
    let res = detect_and_restore(
        &input,
        &ckpt.state.params,
        &ckpt.config.net,
        &ckpt.config.det,
        seed.wrapping_add(entry.index as u64),
    )?;

    // bring the full-resolution ground truth down to the finest detector
    // stage by repeated majority pooling
    let (fh, fw) = ckpt.config.net.stage_dims(3);
    let gmask = CorruptionMask::from_image(&mask_img)?.binarized();
    let (mut gh, mut gw) = (gmask.height, gmask.width);
    let mut vals = gmask.values;
    while gh > fh && gw > fw {
        vals = downsample_majority(&vals, gh, gw)?;
        gh /= 2;
        gw /= 2;
    }
    if (gh, gw) != (fh, fw) {
        return Err(CoreError::contract(format!(
            "ground-truth mask {gh}x{gw} cannot be pooled to detector stage {fh}x{fw}"
        )));
    }
    let gt_mask = CorruptionMask {
        width: fw,
        height: fh,
        values: vals,
        binary: true,
    };
    let pred = CorruptionMask {
        width: fw,
        height: fh,
        values: res.detection.multi.masks[2].clone(),
        binary: true,
    };
    let prob: Vec<f64> = if res.detection.clusters.len() == 3 {
        let c = &res.detection.clusters[2];
        (0..fh * fw)
            .map(|i| {
                if c.assignment[i] == c.corrupted_index {
                    c.confidence[i]
                } else {
                    1.0 - c.confidence[i]
                }
            })
            .collect()
    } else {
        // degenerate detection carries no confidence signal
        vec![0.5; fh * fw]
    };

    let report = mask_metrics(&pred, &prob, &gt_mask)?;
    let p = psnr(&res.restored, &gt)?;
    let s = ssim(&res.restored, &gt)?;
    Ok((report, p, s))
}

pub fn eval(ckpt_path: &Path, data: &Path, report: &Path, seed: u64) -> AppResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let entries = read_manifest(data)?;
    if entries.is_empty() {
        return Err(usage(format!("no samples in {}", data.display())));
    }
    let per_sample: Vec<(MaskReport, f64, f64)> = entries
        .par_iter()
        .map(|e| eval_entry(e, &ckpt, seed))
        .collect::<hcl_core::Result<_>>()?;

    let n = per_sample.len() as f64;
    let mean = |f: &dyn Fn(&(MaskReport, f64, f64)) -> f64| {
        per_sample.iter().map(f).sum::<f64>() / n
    };
    let text = format!(
        "count {}\nbce {:.6}\naccuracy {:.6}\nf1 {:.6}\niou {:.6}\npsnr {:.6}\nssim {:.6}\n",
        per_sample.len(),
        mean(&|r| r.0.bce),
        mean(&|r| r.0.accuracy),
        mean(&|r| r.0.f1),
        mean(&|r| r.0.iou),
        mean(&|r| r.1),
        mean(&|r| r.2),
    );
    fs::write(report, &text).map_err(|e| CoreError::io(report.display().to_string(), e))?;
    print!("{text}");
    Ok(())
}
