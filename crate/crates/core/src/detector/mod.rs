//! Blind corruption-mask detection: per-stage contrastive embeddings,
//! cosine clustering, center classification, confidence-driven sample
//! selection, and quadtree coarse-to-fine refinement.

pub mod kmeans;
pub mod quadtree;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{encode, BoundParams, NetworkConfig, ParamSet};
use crate::tensor::{Tape, Var};
use kmeans::{kmeans_cosine, KmeansOutcome};
use quadtree::{children_flat_indices, parent_index_map};

pub const UNIT_NORM_EPS: f64 = 1e-9;

/// Detector hyperparameters. Temperatures, confidence thresholds, and sample
/// counts are not derivable from the architecture, so they all live here.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub embed_dim: usize,
    /// Temperature of the contrastive loss.
    pub tau_loss: f64,
    /// Temperature of the confidence softmax.
    pub tau_conf: f64,
    /// Confidence at or above this marks a representative pixel.
    pub theta_hi: f64,
    /// Confidence at or below this marks an uncertain pixel.
    pub theta_lo: f64,
    /// Queries per stage in the contrastive loss.
    pub query_count: usize,
    /// Positives and negatives per query.
    pub pos_count: usize,
    pub neg_count: usize,
    /// Representative cap per cluster.
    pub rep_cap: usize,
    pub kmeans_max_iter: usize,
    /// Seeded candidate picks for the most-dissimilar-pair init.
    pub kmeans_candidates: usize,
    /// Use the negated-similarity confidence form for comparison runs.
    pub negated_confidence: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            embed_dim: 16,
            tau_loss: 0.1,
            tau_conf: 0.25,
            theta_hi: 0.98,
            theta_lo: 0.97,
            query_count: 256,
            pos_count: 16,
            neg_count: 16,
            rep_cap: 256,
            kmeans_max_iter: 50,
            kmeans_candidates: 64,
            negated_confidence: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.tau_loss <= 0.0 || self.tau_conf <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.5 <= self.theta_lo && self.theta_lo < self.theta_hi && self.theta_hi <= 1.0) {
            return Err(Error::Config(format!(
                "need 0.5 <= theta_lo < theta_hi <= 1.0, got {} and {}",
                self.theta_lo, self.theta_hi
            )));
        }
        if self.pos_count == 0 || self.neg_count == 0 || self.query_count == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.rep_cap == 0 || self.kmeans_max_iter == 0 || self.kmeans_candidates == 0 {
            return Err(Error::Config("caps and iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Unit-norm per-pixel embeddings of one stage, rows in raster order.
#[derive(Debug, Clone)]
pub struct PixelEmbeddingGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    /// h*w rows of `dim` values.
    pub data: Vec<f64>,
    /// True when the pre-normalization outputs were all ~zero (untrained
    /// heads); embeddings are still emitted via epsilon normalization.
    pub degenerate: bool,
}

impl PixelEmbeddingGrid {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.h * self.w).map(|i| self.row(i).to_vec()).collect()
    }
}

/// One stage's clustering: two centers, per-pixel assignment, which center
/// the classifier called corrupted, and per-pixel confidence.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub h: usize,
    pub w: usize,
    /// Unit-norm centers.
    pub centers: [Vec<f64>; 2],
    /// Assigned center per pixel, 0 or 1.
    pub assignment: Vec<usize>,
    pub corrupted_index: usize,
    /// Nearer-center softmax confidence, in [0.5, 1].
    pub confidence: Vec<f64>,
}

impl ClusterResult {
    /// Binary mask with 1 = uncorrupted.
    pub fn mask(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .map(|&a| if a == self.corrupted_index { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn cluster_sizes(&self) -> [usize; 2] {
        let ones = self.assignment.iter().filter(|&&a| a == 1).count();
        [self.assignment.len() - ones, ones]
    }
}

/// Pixel provenance at refined stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Inherited,
    Refined,
}

/// High/low-confidence pixel picks of one stage.
#[derive(Debug, Clone)]
pub struct SampleSelection {
    /// Flat pixel indices with confidence >= theta_hi, capped per cluster.
    pub representatives: Vec<usize>,
    /// Flat pixel indices with confidence <= theta_lo.
    pub uncertain: Vec<usize>,
    pub used_fallback: bool,
}

/// Masks at all three stage resolutions, 1 = uncorrupted.
#[derive(Debug, Clone)]
pub struct MultiScaleMask {
    pub masks: [Vec<f64>; 3],
    /// Provenance per stage; stage 1 is all Refined (clustered directly).
    pub provenance: [Vec<Provenance>; 3],
    /// True when stage-1 clustering was degenerate and every mask is
    /// all-uncorrupted.
    pub degenerate: bool,
}

/// Full detection output.
#[derive(Debug, Clone)]
pub struct Detection {
    pub multi: MultiScaleMask,
    pub clusters: Vec<ClusterResult>,
    pub embeddings: Vec<PixelEmbeddingGrid>,
}

// ---- projection ----

/// Project stage tokens to unit-norm contrastive embeddings on the tape.
///
/// Stage 1 runs the plain two-layer head. Later stages concatenate each
/// pixel's feature with a linear map of its quadtree parent's embedding.
pub fn project(
    tape: &mut Tape,
    tokens: Var,
    parent: Option<Var>,
    stage: usize,
    parent_dims: (usize, usize),
    bp: &BoundParams,
) -> Result<Var> {
    let x = if stage == 1 {
        if parent.is_some() {
            return Err(Error::contract("stage 1 projection takes no parent grid"));
        }
        tokens
    } else {
        let parent = parent.ok_or_else(|| {
            Error::contract(format!("stage {stage} projection needs parent embeddings"))
        })?;
        let (ph, pw) = parent_dims;
        let idx = parent_index_map(ph, pw);
        if tape.shape(tokens)[0] != idx.len() {
            return Err(Error::contract(format!(
                "stage {stage} token count {} != 4x parent grid {}",
                tape.shape(tokens)[0],
                idx.len() / 4 * 4
            )));
        }
        let gathered = tape.gather_rows(parent, idx)?;
        let mapped = tape.matmul(gathered, bp.var(&format!("proj.s{stage}.map.w")))?;
        tape.concat_cols(tokens, mapped)?
    };
    let h = tape.matmul(x, bp.var(&format!("proj.s{stage}.fc1.w")))?;
    let h = tape.row_bias(h, bp.var(&format!("proj.s{stage}.fc1.b")))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, bp.var(&format!("proj.s{stage}.fc2.w")))?;
    let h = tape.row_bias(h, bp.var(&format!("proj.s{stage}.fc2.b")))?;
    tape.l2_normalize_rows(h, UNIT_NORM_EPS)
}

/// Evaluate a projection into a plain embedding grid (no gradient use).
pub fn project_grid(
    tape: &mut Tape,
    tokens: Var,
    parent: Option<Var>,
    stage: usize,
    parent_dims: (usize, usize),
    dims: (usize, usize),
    bp: &BoundParams,
) -> Result<(Var, PixelEmbeddingGrid)> {
    let v = project(tape, tokens, parent, stage, parent_dims, bp)?;
    let data = tape.data(v).to_vec();
    let dim = tape.shape(v)[1];
    // rows whose pre-normalized vector was ~zero come out with tiny norm
    let degenerate = data
        .chunks(dim)
        .all(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.5);
    Ok((
        v,
        PixelEmbeddingGrid {
            h: dims.0,
            w: dims.1,
            dim,
            data,
            degenerate,
        },
    ))
}

// ---- contrastive loss ----

/// Contrastive loss over unit-norm embedding rows:
/// sum over queries of log(1 + (sum_p e^(-sim_p/tau)) * (sum_n e^(sim_n/tau))).
pub fn circle_loss(
    tape: &mut Tape,
    emb: Var,
    queries: &[usize],
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::contract("circle_loss tau must be positive"));
    }
    if queries.len() != positives.len() || queries.len() != negatives.len() {
        return Err(Error::contract(
            "circle_loss: queries, positives, negatives must align",
        ));
    }
    let mut total = tape.constant_scalar(0.0);
    for ((&q, pos), neg) in queries.iter().zip(positives).zip(negatives) {
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::contract(format!(
                "circle_loss: query {q} has an empty positive or negative set"
            )));
        }
        let sum_side = |tape: &mut Tape, side: &[usize], sign: f64| -> Result<Var> {
            let qrep = tape.gather_rows(emb, vec![q; side.len()])?;
            let s = tape.gather_rows(emb, side.to_vec())?;
            let sims = tape.row_dot(qrep, s)?;
            let scaled = tape.scale(sims, sign / tau);
            let e = tape.exp(scaled);
            Ok(tape.sum_all(e))
        };
        let sp = sum_side(tape, pos, -1.0)?;
        let sn = sum_side(tape, neg, 1.0)?;
        let prod = tape.mul(sp, sn)?;
        let shifted = tape.add_scalar(prod, 1.0);
        let l = tape.ln(shifted);
        total = tape.add(total, l)?;
    }
    Ok(total)
}

// ---- center classification ----

fn classifier_score_plain(params: &ParamSet, center: &[f64]) -> f64 {
    let w1 = params.get("cls.fc1.w").unwrap();
    let b1 = params.get("cls.fc1.b").unwrap();
    let w2 = params.get("cls.fc2.w").unwrap();
    let b2 = params.get("cls.fc2.b").unwrap();
    let d = center.len();
    let hidden = b1.data.len();
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = b1.data[j];
        for i in 0..d {
            acc += center[i] * w1.data[i * hidden + j];
        }
        h[j] = acc.max(0.0);
    }
    let mut logit = b2.data[0];
    for (j, hv) in h.iter().enumerate() {
        logit += hv * w2.data[j];
    }
    1.0 / (1.0 + (-logit).exp())
}

/// Score both centers with the two-layer ReLU classifier and call the higher
/// probability-of-corrupted center corrupted. An exact tie goes to the
/// smaller cluster.
pub fn classify_centers(
    params: &ParamSet,
    centers: &[Vec<f64>; 2],
    cluster_sizes: [usize; 2],
) -> (usize, [f64; 2]) {
    let p = [
        classifier_score_plain(params, &centers[0]),
        classifier_score_plain(params, &centers[1]),
    ];
    let corrupted = if p[0] > p[1] {
        0
    } else if p[1] > p[0] {
        1
    } else if cluster_sizes[0] <= cluster_sizes[1] {
        0
    } else {
        1
    };
    (corrupted, p)
}

/// Tape version of the classifier probability for one center row [1, d].
pub fn classifier_score(tape: &mut Tape, center: Var, bp: &BoundParams) -> Result<Var> {
    let h = tape.matmul(center, bp.var("cls.fc1.w"))?;
    let h = tape.row_bias(h, bp.var("cls.fc1.b"))?;
    let h = tape.relu(h);
    let h = tape.matmul(h, bp.var("cls.fc2.w"))?;
    let h = tape.row_bias(h, bp.var("cls.fc2.b"))?;
    Ok(tape.sigmoid(h))
}

// ---- confidence ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-center softmax confidence of an embedding for its assigned (nearer)
/// center: z = e^(sim_y/tau) / sum_i e^(sim_i/tau), in [0.5, 1].
///
/// With `negated` the exponent signs flip, which hands the nearer center the
/// *lower* score; kept only for comparison runs.
pub fn confidence(
    e: &[f64],
    centers: &[Vec<f64>; 2],
    assigned: usize,
    tau: f64,
    negated: bool,
) -> f64 {
    let sign = if negated { -1.0 } else { 1.0 };
    let s0 = (sign * dot(e, &centers[0]) / tau).exp();
    let s1 = (sign * dot(e, &centers[1]) / tau).exp();
    let num = if assigned == 0 { s0 } else { s1 };
    num / (s0 + s1)
}

fn confidence_map(
    grid: &PixelEmbeddingGrid,
    centers: &[Vec<f64>; 2],
    assignment: &[usize],
    cfg: &DetectorConfig,
) -> Vec<f64> {
    (0..grid.h * grid.w)
        .map(|i| {
            confidence(
                grid.row(i),
                centers,
                assignment[i],
                cfg.tau_conf,
                cfg.negated_confidence,
            )
        })
        .collect()
}

// ---- sample selection ----

/// Deterministic uniform subsample down to `cap` elements.
fn subsample(mut items: Vec<usize>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if items.len() <= cap {
        return items;
    }
    for i in 0..cap {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(cap);
    items.sort_unstable();
    items
}

/// Split a stage into representative (z >= theta_hi, capped per cluster) and
/// uncertain (z <= theta_lo) pixels.
///
/// A cluster with no representative yields a Selection error; use
/// [`select_samples_with_fallback`] to degrade to top-k by confidence.
pub fn select_samples(
    cluster: &ClusterResult,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<SampleSelection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps_by_cluster: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut uncertain = Vec::new();
    for (i, &z) in cluster.confidence.iter().enumerate() {
        if z >= cfg.theta_hi {
            reps_by_cluster[cluster.assignment[i]].push(i);
        } else if z <= cfg.theta_lo {
            uncertain.push(i);
        }
    }
    for (c, reps) in reps_by_cluster.iter().enumerate() {
        if reps.is_empty() && cluster.cluster_sizes()[c] > 0 {
            return Err(Error::Selection(format!(
                "cluster {c} has no representative at threshold {}",
                cfg.theta_hi
            )));
        }
    }
    let mut representatives = Vec::new();
    for reps in reps_by_cluster {
        representatives.extend(subsample(reps, cfg.rep_cap, &mut rng));
    }
    representatives.sort_unstable();
    Ok(SampleSelection {
        representatives,
        uncertain,
        used_fallback: false,
    })
}

/// Selection with the documented fallback: any cluster lacking a threshold
/// representative contributes its top-`rep_cap` pixels by confidence instead.
pub fn select_samples_with_fallback(
    cluster: &ClusterResult,
    cfg: &DetectorConfig,
    seed: u64,
) -> SampleSelection {
    match select_samples(cluster, cfg, seed) {
        Ok(sel) => sel,
        Err(_) => {
            let mut representatives = Vec::new();
            for c in 0..2 {
                let mut members: Vec<usize> = (0..cluster.assignment.len())
                    .filter(|&i| cluster.assignment[i] == c)
                    .collect();
                members.sort_by(|&a, &b| {
                    cluster.confidence[b]
                        .partial_cmp(&cluster.confidence[a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                members.truncate(cfg.rep_cap);
                representatives.extend(members);
            }
            representatives.sort_unstable();
            let uncertain = (0..cluster.assignment.len())
                .filter(|&i| {
                    cluster.confidence[i] <= cfg.theta_lo && !representatives.contains(&i)
                })
                .collect();
            SampleSelection {
                representatives,
                uncertain,
                used_fallback: true,
            }
        }
    }
}

// ---- refinement ----

use children_flat_indices as children_flat;

/// Refine one stage: representative children set new centers per inherited
/// label, uncertain children re-assign to the nearer new center, everyone
/// else inherits, and the classifier re-decides corrupted polarity.
pub fn refine_uncertain(
    prev: &ClusterResult,
    child_emb: &PixelEmbeddingGrid,
    sel: &SampleSelection,
    params: &ParamSet,
    cfg: &DetectorConfig,
) -> Result<(ClusterResult, Vec<Provenance>)> {
    let (ph, pw) = (prev.h, prev.w);
    if child_emb.h != 2 * ph || child_emb.w != 2 * pw {
        return Err(Error::contract(format!(
            "child grid {}x{} does not refine parent {ph}x{pw}",
            child_emb.h, child_emb.w
        )));
    }
    let n_fine = child_emb.h * child_emb.w;

    let mut centers: [Vec<f64>; 2] = [vec![0.0; child_emb.dim], vec![0.0; child_emb.dim]];
    let mut counts = [0usize; 2];
    for &rep in &sel.representatives {
        let label = prev.assignment[rep];
        for child in children_flat(rep, ph, pw)? {
            for (m, v) in centers[label].iter_mut().zip(child_emb.row(child)) {
                *m += v;
            }
            counts[label] += 1;
        }
    }
    for c in 0..2 {
        if counts[c] == 0 {
            return Err(Error::Refinement(format!(
                "no representative children carry label {c}"
            )));
        }
        let norm = dot(&centers[c], &centers[c]).sqrt();
        if norm < UNIT_NORM_EPS {
            return Err(Error::Refinement(format!(
                "label {c} representative children average to a zero vector"
            )));
        }
        centers[c].iter_mut().for_each(|v| *v /= norm);
    }

    let mut assignment = vec![0usize; n_fine];
    let mut provenance = vec![Provenance::Inherited; n_fine];
    for parent_flat in 0..ph * pw {
        let label = prev.assignment[parent_flat];
        for child in children_flat(parent_flat, ph, pw)? {
            assignment[child] = label;
        }
    }
    for &u in &sel.uncertain {
        for child in children_flat(u, ph, pw)? {
            let e = child_emb.row(child);
            assignment[child] = if dot(e, &centers[1]) > dot(e, &centers[0]) {
                1
            } else {
                0
            };
            provenance[child] = Provenance::Refined;
        }
    }

    let confidence = confidence_map(child_emb, &centers, &assignment, cfg);
    let ones = assignment.iter().filter(|&&a| a == 1).count();
    let (corrupted_index, _) = classify_centers(params, &centers, [n_fine - ones, ones]);
    Ok((
        ClusterResult {
            h: child_emb.h,
            w: child_emb.w,
            centers,
            assignment,
            corrupted_index,
            confidence,
        },
        provenance,
    ))
}

// ---- full detection ----

fn all_uncorrupted_detection(cfg: &NetworkConfig) -> MultiScaleMask {
    let mk = |s: usize| {
        let (h, w) = cfg.stage_dims(s);
        vec![1.0; h * w]
    };
    let pv = |s: usize| {
        let (h, w) = cfg.stage_dims(s);
        vec![Provenance::Inherited; h * w]
    };
    MultiScaleMask {
        masks: [mk(1), mk(2), mk(3)],
        provenance: [pv(1), pv(2), pv(3)],
        degenerate: true,
    }
}

/// Run the full coarse-to-fine detection pipeline on one image.
pub fn detect_masks(
    input: &Image,
    params: &ParamSet,
    net_cfg: &NetworkConfig,
    det_cfg: &DetectorConfig,
    seed: u64,
) -> Result<Detection> {
    det_cfg.validate()?;
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let enc = encode(&mut tape, input, net_cfg, &bp)?;

    let mut embeddings = Vec::new();
    let mut emb_vars = Vec::new();
    for s in 1..=3usize {
        let dims = net_cfg.stage_dims(s);
        let parent_dims = if s > 1 { net_cfg.stage_dims(s - 1) } else { (0, 0) };
        let parent = if s > 1 { Some(emb_vars[s - 2]) } else { None };
        let (v, grid) = project_grid(
            &mut tape,
            enc.tokens[s - 1],
            parent,
            s,
            parent_dims,
            dims,
            &bp,
        )?;
        emb_vars.push(v);
        embeddings.push(grid);
    }

    let s1 = &embeddings[0];
    let outcome = kmeans_cosine(
        &s1.rows(),
        None,
        det_cfg.kmeans_max_iter,
        det_cfg.kmeans_candidates,
        seed,
    )?;
    let km = match outcome {
        KmeansOutcome::Degenerate => {
            return Ok(Detection {
                multi: all_uncorrupted_detection(net_cfg),
                clusters: Vec::new(),
                embeddings,
            });
        }
        KmeansOutcome::Clustered(km) => km,
    };

    let ones = km.assignment.iter().filter(|&&a| a == 1).count();
    let (corrupted_index, _) = classify_centers(
        params,
        &km.centers,
        [km.assignment.len() - ones, ones],
    );
    let confidence = confidence_map(s1, &km.centers, &km.assignment, det_cfg);
    let mut cluster = ClusterResult {
        h: s1.h,
        w: s1.w,
        centers: km.centers,
        assignment: km.assignment,
        corrupted_index,
        confidence,
    };

    let mut masks: [Vec<f64>; 3] = [cluster.mask(), Vec::new(), Vec::new()];
    let mut provenance: [Vec<Provenance>; 3] = [
        vec![Provenance::Refined; s1.h * s1.w],
        Vec::new(),
        Vec::new(),
    ];
    let mut clusters = vec![cluster.clone()];

    for s in 2..=3usize {
        let sel = select_samples_with_fallback(&cluster, det_cfg, seed.wrapping_add(s as u64));
        let child = &embeddings[s - 1];
        match refine_uncertain(&cluster, child, &sel, params, det_cfg) {
            Ok((next, prov)) => {
                provenance[s - 1] = prov;
                cluster = next;
            }
            Err(Error::Refinement(_)) => {
                // keep inherited labels for the whole stage
                let n = child.h * child.w;
                let mut assignment = vec![0usize; n];
                for p in 0..cluster.h * cluster.w {
                    let label = cluster.assignment[p];
                    for c in children_flat(p, cluster.h, cluster.w)? {
                        assignment[c] = label;
                    }
                }
                let confidence = confidence_map(child, &cluster.centers, &assignment, det_cfg);
                provenance[s - 1] = vec![Provenance::Inherited; n];
                cluster = ClusterResult {
                    h: child.h,
                    w: child.w,
                    centers: cluster.centers.clone(),
                    assignment,
                    corrupted_index: cluster.corrupted_index,
                    confidence,
                };
            }
            Err(e) => return Err(e),
        }
        masks[s - 1] = cluster.mask();
        clusters.push(cluster.clone());
    }

    Ok(Detection {
        multi: MultiScaleMask {
            masks,
            provenance,
            degenerate: false,
        },
        clusters,
        embeddings,
    })
}
