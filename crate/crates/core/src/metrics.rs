//! Detection metrics (BCE, accuracy, F1, IoU on the corrupted class) and
//! restoration metrics (PSNR, SSIM).

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::CorruptionMask;

pub const PSNR_CAP: f64 = 99.0;
const BCE_CLAMP: f64 = 1e-7;

/// Per-mask detection scores. Positive class = corrupted (mask value 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskReport {
    pub bce: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub iou: f64,
}

impl MaskReport {
    /// Flat key-value serialization, 6 decimals, one metric per line.
    pub fn serialize(&self) -> String {
        format!(
            "bce {:.6}\naccuracy {:.6}\nf1 {:.6}\niou {:.6}\n",
            self.bce, self.accuracy, self.f1, self.iou
        )
    }
}

/// Compare a predicted binary mask (plus the detector's corrupted-probability
/// map) against a binary ground-truth mask.
pub fn mask_metrics(
    pred: &CorruptionMask,
    corrupted_prob: &[f64],
    gt: &CorruptionMask,
) -> Result<MaskReport> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape {
            op: "mask_metrics",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    if corrupted_prob.len() != pred.values.len() {
        return Err(Error::contract(format!(
            "probability map length {} != mask size {}",
            corrupted_prob.len(),
            pred.values.len()
        )));
    }
    if !gt.binary {
        return Err(Error::contract("ground-truth mask must be binary"));
    }
    let n = pred.values.len();
    let (mut tp, mut fp, mut fne, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut bce = 0.0;
    for i in 0..n {
        let pred_corrupted = pred.values[i] < 0.5;
        let gt_corrupted = gt.values[i] < 0.5;
        match (pred_corrupted, gt_corrupted) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
        if pred_corrupted == gt_corrupted {
            correct += 1;
        }
        let p = corrupted_prob[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let y = if gt_corrupted { 1.0 } else { 0.0 };
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    let denom_f1 = 2 * tp + fp + fne;
    let denom_iou = tp + fp + fne;
    Ok(MaskReport {
        bce: bce / n as f64,
        accuracy: correct as f64 / n as f64,
        f1: if denom_f1 == 0 {
            1.0
        } else {
            2.0 * tp as f64 / denom_f1 as f64
        },
        iou: if denom_iou == 0 {
            1.0
        } else {
            tp as f64 / denom_iou as f64
        },
    })
}

/// 10·log10(1/MSE) for images in [0,1]; identical images return the 99 dB cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) || a.channels != b.channels {
        return Err(Error::Shape {
            op: "psnr",
            lhs: vec![a.channels, a.height, a.width],
            rhs: vec![b.channels, b.height, b.width],
        });
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over non-overlapping 8x8 windows on channel-mean
/// grayscale, K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) || a.channels != b.channels {
        return Err(Error::Shape {
            op: "ssim",
            lhs: vec![a.channels, a.height, a.width],
            rhs: vec![b.channels, b.height, b.width],
        });
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "image {}x{} smaller than SSIM window {}",
            a.height, a.width, SSIM_WINDOW
        )));
    }
    let ga = a.to_gray();
    let gb = b.to_gray();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..h / SSIM_WINDOW {
        for wx in 0..w / SSIM_WINDOW {
            let mut xs = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
            let mut ys = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let p = (wy * SSIM_WINDOW + dy) * w + wx * SSIM_WINDOW + dx;
                    xs[dy * SSIM_WINDOW + dx] = ga[p];
                    ys[dy * SSIM_WINDOW + dx] = gb[p];
                }
            }
            let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / n;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mask_from(vals: &[f64], h: usize, w: usize) -> CorruptionMask {
        CorruptionMask {
            width: w,
            height: h,
            values: vals.to_vec(),
            binary: vals.iter().all(|&v| v == 0.0 || v == 1.0),
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt = mask_from(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let prob = [0.0, 1.0, 0.0, 1.0];
        let r = mask_metrics(&gt, &prob, &gt).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.iou, 1.0);
        assert!(r.bce <= 1e-6);
    }

    #[test]
    fn complemented_prediction_on_half_corrupted() {
        let gt = mask_from(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        let pred = mask_from(&[0.0, 0.0, 1.0, 1.0], 2, 2);
        let prob = [1.0, 1.0, 0.0, 0.0];
        let r = mask_metrics(&pred, &prob, &gt).unwrap();
        assert_eq!(r.iou, 0.0);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn counting_oracle_2x2() {
        // pred corrupted {(0,0),(0,1)}, gt corrupted {(0,1),(1,1)}
        let pred = mask_from(&[0.0, 0.0, 1.0, 1.0], 2, 2);
        let gt = mask_from(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let prob = [1.0, 1.0, 0.0, 0.0];
        let r = mask_metrics(&pred, &prob, &gt).unwrap();
        assert_abs_diff_eq!(r.f1, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.iou, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.accuracy, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn psnr_values() {
        let a = Image::filled(3, 8, 8, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Image::filled(3, 8, 8, 0.6);
        // uniform squared error 0.01 -> 20 dB
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        let c = Image::filled(3, 8, 8, 0.51);
        assert_abs_diff_eq!(psnr(&a, &c).unwrap(), 40.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(0.2..0.8)).collect();
        let a = Image::new(3, 16, 16, base.clone()).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let data: Vec<f64> = base.iter().map(|v| (v + amp).clamp(0.0, 1.0)).collect();
            let b = Image::new(3, 16, 16, data).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last, "psnr not decreasing at amplitude {amp}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Image::new(
            3,
            16,
            16,
            (0..3 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let b = Image::new(
            3,
            16,
            16,
            (0..3 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::filled(1, 8, 8, 0.5);
        let b = Image::filled(1, 8, 8, 0.7);
        let c1 = 1e-4;
        let expected = (2.0 * 0.35 + c1) / (0.25 + 0.49 + c1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), expected, epsilon = 1e-3);
        assert_abs_diff_eq!(expected, 0.946, epsilon = 1e-3);
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = Image::filled(1, 4, 4, 0.5);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_serialization_format() {
        let r = MaskReport {
            bce: 0.1,
            accuracy: 0.9,
            f1: 0.5,
            iou: 1.0 / 3.0,
        };
        assert_eq!(
            r.serialize(),
            "bce 0.100000\naccuracy 0.900000\nf1 0.500000\niou 0.333333\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn f1_iou_identity(bits in proptest::collection::vec(0u8..4, 16)) {
            // decode two random 4x4 binary masks from two bits per pixel
            let pred: Vec<f64> = bits.iter().map(|b| f64::from(b & 1)).collect();
            let gt: Vec<f64> = bits.iter().map(|b| f64::from((b >> 1) & 1)).collect();
            let prob: Vec<f64> = pred.iter().map(|v| 1.0 - v).collect();
            let r = mask_metrics(
                &mask_from(&pred, 4, 4),
                &prob,
                &mask_from(&gt, 4, 4),
            ).unwrap();
            let expected_f1 = 2.0 * r.iou / (1.0 + r.iou);
            prop_assert!((r.f1 - expected_f1).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!((0.0..=1.0).contains(&r.iou));
            prop_assert!(r.bce >= 0.0);
        }
    }
}
