//! Scratch diagnostic: per-stage IoU and error locality of the detector.

use hcl_core::detector::quadtree::downsample_majority;
use hcl_core::detector::{detect_masks, kmeans::kmeans_cosine, kmeans::KmeansOutcome, project_grid};
use hcl_core::io::checkpoint::load_checkpoint;
use hcl_core::io::pnm;
use hcl_core::network::encode;
use hcl_core::synth::CorruptionMask;
use hcl_core::Tape;

fn pool(mask_img: &hcl_core::image::Image, target: usize) -> Vec<f64> {
    let m = CorruptionMask::from_image(mask_img).unwrap().binarized();
    let (mut h, mut w) = (m.height, m.width);
    let mut vals = m.values;
    while h > target {
        vals = downsample_majority(&vals, h, w).unwrap();
        h /= 2;
        w /= 2;
    }
    vals
}

fn iou(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (*p == 0.0, *g == 0.0);
        if p && g {
            i += 1.0;
        }
        if p || g {
            u += 1.0;
        }
    }
    if u == 0.0 {
        1.0
    } else {
        i / u
    }
}

fn boundary_share(pred: &[f64], gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let mut wrong = 0;
    let mut wrong_boundary = 0;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if pred[p] != gt[p] {
                wrong += 1;
                let mut mixed = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0
                            && nx >= 0
                            && (ny as usize) < h
                            && (nx as usize) < w
                            && gt[ny as usize * w + nx as usize] != gt[p]
                        {
                            mixed = true;
                        }
                    }
                }
                if mixed {
                    wrong_boundary += 1;
                }
            }
        }
    }
    (wrong, wrong_boundary)
}

fn main() {
    let path = std::env::args().nth(1).unwrap_or("/tmp/toy/model.ckpt".into());
    let test_dir = std::env::var("TESTDIR").unwrap_or("/tmp/toy/test".into());
    let ckpt = load_checkpoint(&path).unwrap();
    let net = &ckpt.config.net;
    let mut det = ckpt.config.det.clone();
    if let Some(v) = std::env::args().nth(2) {
        det.theta_lo = v.parse().unwrap();
    }
    if let Some(v) = std::env::args().nth(3) {
        det.theta_hi = v.parse().unwrap();
    }
    if let Some(v) = std::env::args().nth(4) {
        det.tau_conf = v.parse().unwrap();
    }
    let det = &det;
    let mut s_iou = [0.0; 3];
    let mut oracle_iou = [0.0; 3];
    let (mut wrong_t, mut wrongb_t) = (0, 0);
    let n = 20;
    for i in 0..n {
        let input = pnm::read_image(format!("{test_dir}/input_{i:05}.ppm")).unwrap();
        let mask_img = pnm::read_image(format!("{test_dir}/mask_{i:05}.pgm")).unwrap();

        let d = detect_masks(&input, &ckpt.state.params, net, det, i as u64).unwrap();
        for s in 0..3 {
            let (h, w) = net.stage_dims(s + 1);
            let gt = pool(&mask_img, h);
            s_iou[s] += iou(&d.multi.masks[s], &gt);
            if s == 2 {
                let (wr, wb) = boundary_share(&d.multi.masks[s], &gt, h, w);
                wrong_t += wr;
                wrongb_t += wb;
            }
        }

        // oracle: flat k-means on each stage's full embedding grid, best polarity
        let mut tape = Tape::new();
        let bp = ckpt.state.params.bind(&mut tape);
        let enc = encode(&mut tape, &input, net, &bp).unwrap();
        let mut parent: Option<hcl_core::Var> = None;
        let mut parent_dims = (0usize, 0usize);
        for s in 1..=3usize {
            let dims = net.stage_dims(s);
            let gt = pool(&mask_img, dims.0);
            let (pv, grid) =
                project_grid(&mut tape, enc.tokens[s - 1], parent, s, parent_dims, dims, &bp)
                    .unwrap();
            let emb = grid.rows();
            if let KmeansOutcome::Clustered(r) =
                kmeans_cosine(&emb, None, 50, emb.len().min(64), 1234 + s as u64).unwrap()
            {
                let m0: Vec<f64> = r.assignment.iter().map(|&a| if a == 0 { 1.0 } else { 0.0 }).collect();
                let m1: Vec<f64> = m0.iter().map(|v| 1.0 - v).collect();
                oracle_iou[s - 1] += iou(&m0, &gt).max(iou(&m1, &gt));
            }
            parent = Some(pv);
            parent_dims = dims;
        }
    }
    let nf = n as f64;
    println!(
        "pipeline IoU  s1 {:.4}  s2 {:.4}  s3 {:.4}",
        s_iou[0] / nf,
        s_iou[1] / nf,
        s_iou[2] / nf
    );
    println!(
        "oracle   IoU  s1 {:.4}  s2 {:.4}  s3 {:.4}  (flat k-means, best polarity)",
        oracle_iou[0] / nf,
        oracle_iou[1] / nf,
        oracle_iou[2] / nf
    );
    println!(
        "stage-3 wrong cells {wrong_t}, of which boundary-adjacent {wrongb_t} ({:.1}%)",
        100.0 * wrongb_t as f64 / wrong_t.max(1) as f64
    );
}
