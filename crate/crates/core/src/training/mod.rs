//! Joint training: pixel reconstruction, per-stage contrastive losses with
//! confidence-driven sample selection, and the center classifier, all under
//! one Adam optimizer.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detector::kmeans::{kmeans_cosine, KmeansOutcome};
use crate::detector::quadtree::{children_flat_indices, downsample_majority};
use crate::detector::{
    circle_loss, classifier_score, confidence, project_grid, refine_uncertain,
    select_samples_with_fallback, ClusterResult, DetectorConfig, PixelEmbeddingGrid,
    SampleSelection,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{decode_restore, encode, NetworkConfig, ParamSet};
use crate::tensor::{AdamState, Tape, Var};

/// Loss weights and optimizer knobs.
///
/// The perceptual and adversarial weights exist to make their absence
/// explicit: they must stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_pixel: f64,
    pub lambda_perceptual: f64,
    pub lambda_contrastive: f64,
    pub lambda_adversarial: f64,
    pub lambda_cls: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_pixel: 1.0,
            lambda_perceptual: 0.0,
            lambda_contrastive: 0.01,
            lambda_adversarial: 0.0,
            lambda_cls: 0.01,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pixel", self.lambda_pixel),
            ("lambda_contrastive", self.lambda_contrastive),
            ("lambda_cls", self.lambda_cls),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.lambda_perceptual != 0.0 || self.lambda_adversarial != 0.0 {
            return Err(Error::Config(
                "perceptual and adversarial loss terms are out of scope; their weights must be 0"
                    .into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub l_pixel: f64,
    pub l_cl: [f64; 3],
    pub l_cls: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl TrainRecord {
    /// total must equal the weighted term sum.
    pub fn consistent(&self, cfg: &TrainConfig) -> bool {
        let expect = cfg.lambda_pixel * self.l_pixel
            + cfg.lambda_contrastive * (self.l_cl[0] + self.l_cl[1] + self.l_cl[2])
            + cfg.lambda_cls * self.l_cls;
        (self.total - expect).abs() <= 1e-9
    }

    /// Tab-separated log line: step, L_pixel, L_CL1..3, L_cls, total.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step,
            self.l_pixel,
            self.l_cl[0],
            self.l_cl[1],
            self.l_cl[2],
            self.l_cls,
            self.total
        )
    }
}

/// One loaded training sample with per-stage ground-truth masks.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub gt: Image,
    pub input: Image,
    /// Full-resolution binary mask, 1 = uncorrupted.
    pub mask: Vec<f64>,
    /// Majority-vote downsampled masks at stage resolutions (coarse first).
    pub stage_masks: [Vec<f64>; 3],
}

impl TrainSample {
    pub fn new(gt: Image, input: Image, mask_img: &Image) -> Result<Self> {
        if !gt.same_size(&input) || !gt.same_size(mask_img) {
            return Err(Error::contract("sample images must share dimensions"));
        }
        let mask: Vec<f64> = mask_img.data[..gt.height * gt.width]
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        let s3 = downsample_majority(&mask, gt.height, gt.width)?;
        let s2 = downsample_majority(&s3, gt.height / 2, gt.width / 2)?;
        let s1 = downsample_majority(&s2, gt.height / 4, gt.width / 4)?;
        Ok(TrainSample {
            gt,
            input,
            mask,
            stage_masks: [s1, s2, s3],
        })
    }
}

/// Everything that evolves during training; checkpoints serialize this.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamSet,
    /// Adam moments aligned with the parameter table order.
    pub adam: Vec<AdamState>,
    pub step: usize,
    /// Words consumed from the master RNG stream (one per step).
    pub rng_word_pos: u128,
}

impl TrainState {
    pub fn fresh(net: &NetworkConfig, det: &DetectorConfig, cfg: &TrainConfig) -> Self {
        let params = crate::network::init_params(net, det.embed_dim, cfg.seed);
        let adam = params
            .iter()
            .map(|(_, t)| AdamState::new(t.data.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps))
            .collect();
        TrainState {
            params,
            adam,
            step: 0,
            rng_word_pos: 0,
        }
    }
}

/// Mean absolute difference between a tape image and its ground truth.
pub fn pixel_loss(tape: &mut Tape, restored: Var, gt: &Image) -> Result<Var> {
    let shape = tape.shape(restored).to_vec();
    if shape != [gt.channels, gt.height, gt.width] {
        return Err(Error::Shape {
            op: "pixel_loss",
            lhs: shape,
            rhs: vec![gt.channels, gt.height, gt.width],
        });
    }
    let g = tape.constant(shape, gt.data.clone());
    let d = tape.sub(restored, g)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// Combine already-evaluated loss terms into the weighted total and its
/// record. Rejects non-finite terms by name.
pub fn total_loss(
    step: usize,
    l_pixel: f64,
    l_cl: [f64; 3],
    l_cls: f64,
    cfg: &TrainConfig,
    wall_ms: f64,
) -> Result<TrainRecord> {
    for (name, v) in [
        ("L_pixel", l_pixel),
        ("L_CL1", l_cl[0]),
        ("L_CL2", l_cl[1]),
        ("L_CL3", l_cl[2]),
        ("L_cls", l_cls),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                step,
            });
        }
    }
    let total = cfg.lambda_pixel * l_pixel
        + cfg.lambda_contrastive * (l_cl[0] + l_cl[1] + l_cl[2])
        + cfg.lambda_cls * l_cls;
    Ok(TrainRecord {
        step,
        l_pixel,
        l_cl,
        l_cls,
        total,
        wall_ms,
    })
}

// ---- query construction ----

/// Draw `count` items from `pool` with a seeded RNG (with replacement when
/// the pool is smaller than `count`).
fn draw(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Split pixel indices by ground-truth label (1 = uncorrupted).
fn split_by_label(gt_mask: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut uncorrupted = Vec::new();
    let mut corrupted = Vec::new();
    for (i, &v) in gt_mask.iter().enumerate() {
        if v == 1.0 {
            uncorrupted.push(i);
        } else {
            corrupted.push(i);
        }
    }
    (uncorrupted, corrupted)
}

struct QuerySet {
    queries: Vec<usize>,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

/// Assemble queries with ground-truth-labeled positives and negatives.
/// Positives share the query's GT label, negatives take the opposite one,
/// both preferring the supplied pools. Returns None when one GT region is
/// empty at this stage.
fn build_queries(
    candidate_queries: &[usize],
    gt_mask: &[f64],
    pos_pool_pref: Option<(&[usize], &[usize])>,
    det: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> Option<QuerySet> {
    let (unc, cor) = split_by_label(gt_mask);
    if unc.is_empty() || cor.is_empty() || candidate_queries.is_empty() {
        return None;
    }
    let queries = draw(candidate_queries, det.query_count.min(candidate_queries.len()), rng);
    let pools: (&[usize], &[usize]) = match pos_pool_pref {
        Some((pool_unc, pool_cor)) if !pool_unc.is_empty() && !pool_cor.is_empty() => {
            (pool_unc, pool_cor)
        }
        _ => (&unc, &cor),
    };
    let mut positives = Vec::with_capacity(queries.len());
    let mut negatives = Vec::with_capacity(queries.len());
    for &q in &queries {
        let (same, other) = if gt_mask[q] == 1.0 {
            (pools.0, pools.1)
        } else {
            (pools.1, pools.0)
        };
        positives.push(draw(same, det.pos_count, rng));
        negatives.push(draw(other, det.neg_count, rng));
    }
    Some(QuerySet {
        queries,
        positives,
        negatives,
    })
}

// ---- per-sample forward/backward ----

struct SampleResult {
    l_pixel: f64,
    l_cl: [f64; 3],
    l_cls: f64,
    /// Gradients aligned with the parameter table order.
    grads: Vec<Vec<f64>>,
}

/// Build the selection-driven stage pipeline on plain embedding data,
/// mirroring inference: kmeans at stage 1, refine upward.
fn stage_clusters(
    grids: &[PixelEmbeddingGrid; 3],
    params: &ParamSet,
    det: &DetectorConfig,
    seed: u64,
) -> Option<(Vec<ClusterResult>, Vec<SampleSelection>)> {
    let outcome = kmeans_cosine(
        &grids[0].rows(),
        None,
        det.kmeans_max_iter,
        det.kmeans_candidates,
        seed,
    )
    .ok()?;
    let KmeansOutcome::Clustered(km) = outcome else {
        return None;
    };
    let confidence_map: Vec<f64> = (0..grids[0].h * grids[0].w)
        .map(|i| {
            confidence(
                grids[0].row(i),
                &km.centers,
                km.assignment[i],
                det.tau_conf,
                det.negated_confidence,
            )
        })
        .collect();
    let mut cluster = ClusterResult {
        h: grids[0].h,
        w: grids[0].w,
        centers: km.centers,
        assignment: km.assignment,
        corrupted_index: 0, // polarity irrelevant for selection
        confidence: confidence_map,
    };
    let mut clusters = vec![cluster.clone()];
    let mut selections = Vec::new();
    for s in 2..=3usize {
        let sel = select_samples_with_fallback(&cluster, det, seed.wrapping_add(s as u64));
        match refine_uncertain(&cluster, &grids[s - 1], &sel, params, det) {
            Ok((next, _)) => cluster = next,
            Err(_) => return None,
        }
        selections.push(sel);
        clusters.push(cluster.clone());
    }
    Some((clusters, selections))
}

fn sample_pass(
    sample: &TrainSample,
    params: &ParamSet,
    net: &NetworkConfig,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SampleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);

    let enc = encode(&mut tape, &sample.input, net, &bp)?;
    let (_, restored) = decode_restore(
        &mut tape,
        &enc,
        [
            &sample.stage_masks[0],
            &sample.stage_masks[1],
            &sample.stage_masks[2],
        ],
        &sample.input,
        net,
        &bp,
    )?;
    let lp = pixel_loss(&mut tape, restored, &sample.gt)?;

    let mut emb_vars = Vec::new();
    let mut grids = Vec::new();
    for s in 1..=3usize {
        let dims = net.stage_dims(s);
        let parent_dims = if s > 1 { net.stage_dims(s - 1) } else { (0, 0) };
        let parent = if s > 1 { Some(emb_vars[s - 2]) } else { None };
        let (v, grid) =
            project_grid(&mut tape, enc.tokens[s - 1], parent, s, parent_dims, dims, &bp)?;
        emb_vars.push(v);
        grids.push(grid);
    }
    let grids: [PixelEmbeddingGrid; 3] = [
        grids[0].clone(),
        grids[1].clone(),
        grids[2].clone(),
    ];

    let pipeline = stage_clusters(&grids, params, det, seed.wrapping_mul(0x9e3779b97f4a7c15));

    // contrastive losses: stage 1 queries uniformly, later stages follow the
    // model's own uncertain/representative split when available
    let mut cl_vars: [Option<Var>; 3] = [None, None, None];
    for s in 1..=3usize {
        let gt_mask = &sample.stage_masks[s - 1];
        let n = gt_mask.len();
        let all: Vec<usize> = (0..n).collect();
        let (candidates, pools): (Vec<usize>, Option<(Vec<usize>, Vec<usize>)>) = if s == 1 {
            (all, None)
        } else {
            match &pipeline {
                Some((_, selections)) => {
                    let sel = &selections[s - 2];
                    let prev_dims = net.stage_dims(s - 1);
                    let mut unc_children = Vec::new();
                    for &u in &sel.uncertain {
                        unc_children.extend(children_flat_indices(u, prev_dims.0, prev_dims.1)?);
                    }
                    let mut rep_children = Vec::new();
                    for &r in &sel.representatives {
                        rep_children.extend(children_flat_indices(r, prev_dims.0, prev_dims.1)?);
                    }
                    let mut cand = unc_children;
                    cand.extend(rep_children.iter().copied());
                    let (pu, pc): (Vec<usize>, Vec<usize>) =
                        rep_children.iter().partition(|&&c| gt_mask[c] == 1.0);
                    (cand, Some((pu, pc)))
                }
                None => (all, None),
            }
        };
        let pools_ref = pools.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
        if let Some(qs) = build_queries(&candidates, gt_mask, pools_ref, det, &mut rng) {
            cl_vars[s - 1] = Some(circle_loss(
                &mut tape,
                emb_vars[s - 1],
                &qs.queries,
                &qs.positives,
                &qs.negatives,
                det.tau_loss,
            )?);
        }
    }

    // classifier BCE on every stage's centers (polarity is re-decided per
    // stage at inference, so the classifier must know all three embedding
    // spaces); the center whose cluster overlaps the true corrupted region
    // most is labeled corrupted
    let mut cls_var: Option<Var> = None;
    if let Some((clusters, _)) = &pipeline {
        let mut terms = Vec::new();
        for (cl, gt_mask) in clusters.iter().zip(&sample.stage_masks) {
            let overlap: [usize; 2] = {
                let mut o = [0usize; 2];
                for (i, &a) in cl.assignment.iter().enumerate() {
                    if gt_mask[i] == 0.0 {
                        o[a] += 1;
                    }
                }
                o
            };
            let corrupted_label = if overlap[1] > overlap[0] { 1 } else { 0 };
            for c in 0..2 {
                let y = if c == corrupted_label { 1.0 } else { 0.0 };
                let center = tape.constant(vec![1, cl.centers[c].len()], cl.centers[c].clone());
                let p = classifier_score(&mut tape, center, &bp)?;
                let lp1 = tape.ln(p);
                let pm = tape.scale(p, -1.0);
                let pm = tape.add_scalar(pm, 1.0);
                let lp0 = tape.ln(pm);
                let t1 = tape.scale(lp1, -y);
                let t0 = tape.scale(lp0, -(1.0 - y));
                terms.push(tape.add(t1, t0)?);
            }
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t)?;
        }
        let mean = tape.scale(sum, 1.0 / clusters.len() as f64);
        cls_var = Some(tape.sum_all(mean));
    }

    // weighted total on the tape so one backward covers every term
    let zero = tape.constant_scalar(0.0);
    let cl_sum = cl_vars
        .iter()
        .flatten()
        .try_fold(zero, |acc, &v| tape.add(acc, v))?;
    let mut loss = tape.scale(lp, cfg.lambda_pixel);
    let cl_weighted = tape.scale(cl_sum, cfg.lambda_contrastive);
    loss = tape.add(loss, cl_weighted)?;
    if let Some(c) = cls_var {
        let cw = tape.scale(c, cfg.lambda_cls);
        loss = tape.add(loss, cw)?;
    }
    tape.backward(loss)?;

    let grads = params
        .iter()
        .map(|(name, t)| {
            tape.grad(bp.var(name))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();

    Ok(SampleResult {
        l_pixel: tape.scalar_value(lp),
        l_cl: [
            cl_vars[0].map(|v| tape.scalar_value(v)).unwrap_or(0.0),
            cl_vars[1].map(|v| tape.scalar_value(v)).unwrap_or(0.0),
            cl_vars[2].map(|v| tape.scalar_value(v)).unwrap_or(0.0),
        ],
        l_cls: cls_var.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
        grads,
    })
}

/// Run `steps` optimization steps, mutating `state` in place and returning
/// one record per step. Fully deterministic for a given seed and state.
pub fn train_steps(
    state: &mut TrainState,
    samples: &[TrainSample],
    steps: usize,
    cfg: &TrainConfig,
    net: &NetworkConfig,
    det: &DetectorConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    det.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    master.set_word_pos(state.rng_word_pos);

    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t0 = Instant::now();
        let step = state.step + 1;
        // exactly one master draw per step keeps resumption trivial
        let step_seed: u64 = master.next_u64();
        let mut step_rng = ChaCha8Rng::seed_from_u64(step_seed);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| step_rng.random_range(0..samples.len()))
            .collect();
        let sample_seeds: Vec<u64> = (0..cfg.batch_size).map(|_| step_rng.next_u64()).collect();

        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .zip(&sample_seeds)
            .map(|(&si, &seed)| sample_pass(&samples[si], &state.params, net, det, cfg, seed))
            .collect();

        let mut l_pixel = 0.0;
        let mut l_cl = [0.0; 3];
        let mut l_cls = 0.0;
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grad_sum: Vec<Vec<f64>> = state
            .params
            .iter()
            .map(|(_, t)| vec![0.0; t.data.len()])
            .collect();
        for r in results {
            let r = r?;
            l_pixel += r.l_pixel * inv;
            for s in 0..3 {
                l_cl[s] += r.l_cl[s] * inv;
            }
            l_cls += r.l_cls * inv;
            for (acc, g) in grad_sum.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * inv;
                }
            }
        }

        let record = total_loss(step, l_pixel, l_cl, l_cls, cfg, t0.elapsed().as_secs_f64() * 1e3)?;
        debug_assert!(record.consistent(cfg));

        for (i, (_, t)) in state.params.iter_mut().enumerate() {
            state.adam[i].step(&mut t.data, &grad_sum[i])?;
        }
        if !state.params.all_finite() {
            return Err(Error::NonFinite {
                term: "parameters".into(),
                step,
            });
        }

        state.step = step;
        state.rng_word_pos = master.get_word_pos();
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}

/// Load manifest entries into memory-resident training samples.
pub fn load_samples(entries: &[crate::synth::ManifestEntry]) -> Result<Vec<TrainSample>> {
    entries
        .par_iter()
        .map(|e| {
            let gt = crate::io::pnm::read_image(&e.gt_path)?;
            let input = crate::io::pnm::read_image(&e.input_path)?;
            let mask = crate::io::pnm::read_image(&e.mask_path)?;
            TrainSample::new(gt, input, &mask)
        })
        .collect()
}
