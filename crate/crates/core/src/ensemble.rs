//! Model fusion at three levels: score maps, proposal sets, and classifier
//! logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationDb;
use crate::bundle::{zero_invalid_triangle, ScoreBundle};
use crate::decode::{decode_proposals, DecodeOpts};
use crate::error::{Error, Result};
use crate::eval::{ar_an_auc, AucNorm};
use crate::nms::{soft_nms, SoftNmsOpts};
use crate::proposal::{sort_ranked, Proposal, ProposalSet, VideoProposals};
use crate::resize::{resize_bilinear_map, resize_linear, Align};
use crate::segment::{tiou, Segment};

/// Default tIoU above which proposals from different models are merged.
pub const DEFAULT_MERGE_IOU: f64 = 0.95;

/// Per-model weights. Zero is allowed for individual models as long as the
/// total is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ModelWeights(Vec<f64>);

impl ModelWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Validation("model weights must not be empty".into()));
        }
        if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Validation(format!("model weight {x} is not a finite non-negative number")));
        }
        if !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::Validation("model weights must have a positive sum".into()));
        }
        Ok(ModelWeights(w))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        ModelWeights::new(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Copy scaled to sum to one.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.0.iter().sum();
        self.0.iter().map(|w| w / total).collect()
    }

    fn expect_len(&self, n: usize, what: &str) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Validation(format!("{} weights for {n} {what}", self.0.len())));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for ModelWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ModelWeights::new(v)
    }
}

impl From<ModelWeights> for Vec<f64> {
    fn from(w: ModelWeights) -> Self {
        w.0
    }
}

impl std::str::FromStr for ModelWeights {
    type Err = Error;

    /// Comma-separated list, e.g. `0.4,0.6`.
    fn from_str(s: &str) -> Result<Self> {
        let w = s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("bad weight {x:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelWeights::new(w)
    }
}

/// Pre-softmax scores of `n_models` classifiers on a shared batch, stored
/// model-major then sample-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsBatch {
    n_models: usize,
    n_samples: usize,
    n_classes: usize,
    values: Vec<f64>,
}

impl LogitsBatch {
    pub fn new(n_models: usize, n_samples: usize, n_classes: usize, values: Vec<f64>) -> Result<Self> {
        if n_models == 0 || n_classes == 0 {
            return Err(Error::format("logits batch needs at least one model and one class"));
        }
        if values.len() != n_models * n_samples * n_classes {
            return Err(Error::format(format!(
                "logits batch {n_models}x{n_samples}x{n_classes} needs {} values, got {}",
                n_models * n_samples * n_classes,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(format!("logit {k} is not finite")));
        }
        Ok(LogitsBatch { n_models, n_samples, n_classes, values })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Logits of model `n` on sample `b`.
    pub fn logits(&self, n: usize, b: usize) -> &[f64] {
        let k = self.n_classes;
        let off = (n * self.n_samples + b) * k;
        &self.values[off..off + k]
    }

    /// `Σ_n w_n · logits_n` for sample `b`.
    pub fn combined(&self, w: &[f64], b: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.n_classes];
        for (n, wn) in w.iter().enumerate() {
            for (zk, x) in z.iter_mut().zip(self.logits(n, b)) {
                *zk += wn * x;
            }
        }
        z
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: LogitsBatch =
            serde_json::from_str(text).map_err(|e| Error::format(format!("logits JSON: {e}")))?;
        LogitsBatch::new(raw.n_models, raw.n_samples, raw.n_classes, raw.values)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("logits serialize")
    }
}

fn resized_field(v: &[f32], d: usize, d_target: usize, align: Align, map: bool) -> Result<Vec<f64>> {
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    if d == d_target {
        return Ok(v);
    }
    if map {
        resize_bilinear_map(&v, d, d_target, align)
    } else {
        resize_linear(&v, d_target, align)
    }
}

/// Resizes every bundle to `d_target` and takes the weighted average of each
/// field with normalized weights.
pub fn ensemble_bundles(bundles: &[&ScoreBundle], w: &ModelWeights, d_target: usize, align: Align) -> Result<ScoreBundle> {
    if bundles.is_empty() {
        return Err(Error::contract("ensemble needs at least one bundle"));
    }
    if d_target < 2 {
        return Err(Error::contract(format!("target grid length must be >= 2, got {d_target}")));
    }
    w.expect_len(bundles.len(), "bundles")?;
    let wn = w.normalized();
    let mut fields: [Vec<f64>; 4] = [
        vec![0.0; d_target],
        vec![0.0; d_target],
        vec![0.0; d_target * d_target],
        vec![0.0; d_target * d_target],
    ];
    for (b, &wb) in bundles.iter().zip(&wn) {
        let d = b.d();
        let sources = [b.start_prob(), b.end_prob(), b.map_a(), b.map_b()];
        for (f, (acc, src)) in fields.iter_mut().zip(sources).enumerate() {
            let v = resized_field(src, d, d_target, align, f >= 2)?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += wb * x;
            }
        }
    }
    let [s, e, mut ma, mut mb] = fields;
    zero_invalid_triangle(&mut ma, d_target);
    zero_invalid_triangle(&mut mb, d_target);
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0) as f32).collect::<Vec<f32>>();
    ScoreBundle::new(d_target, to_f32(s), to_f32(e), to_f32(ma), to_f32(mb))
}

struct Cluster {
    members: Vec<usize>,
    class_id: Option<usize>,
    weight: f64,
    start: f64,
    end: f64,
    /// Representative segment used for matching: the first member.
    anchor: Segment,
    stage: u32,
}

/// Unions proposal sets with weighted scores, merges near-duplicates from
/// different sets, then applies soft-NMS.
///
/// A proposal joins the existing cluster with the highest tIoU (at least
/// `merge_iou`) that has the same class and no member from its own set. The
/// merged score is the sum of member scores; the merged segment averages the
/// endpoints weighted by score.
pub fn fuse_proposal_sets(sets: &[ProposalSet], w: &ModelWeights, nms: &SoftNmsOpts, merge_iou: f64) -> Result<ProposalSet> {
    if sets.is_empty() {
        return Err(Error::contract("fusion needs at least one proposal set"));
    }
    if !(merge_iou > 0.0 && merge_iou <= 1.0) {
        return Err(Error::contract(format!("merge tIoU must be in (0, 1], got {merge_iou}")));
    }
    w.expect_len(sets.len(), "proposal sets")?;
    let wn = w.normalized();

    let mut pool: Vec<(usize, Proposal)> = sets
        .iter()
        .enumerate()
        .flat_map(|(n, ps)| {
            let wn = wn[n];
            ps.iter().map(move |p| (n, Proposal { score: p.score * wn, ..*p }))
        })
        .collect();
    // strongest proposals seed clusters; ties keep set order
    pool.sort_by(|a, b| crate::proposal::rank_order(&a.1, &b.1).then(a.0.cmp(&b.0)));

    let mut clusters: Vec<Cluster> = Vec::new();
    for (n, p) in pool {
        let target = clusters
            .iter()
            .enumerate()
            .filter(|(_, c)| c.class_id == p.class_id && !c.members.contains(&n))
            .map(|(k, c)| (k, tiou(&c.anchor, &p.segment)))
            .filter(|&(_, iou)| iou >= merge_iou)
            .fold(None, |best: Option<(usize, f64)>, cand| match best {
                Some((_, b)) if b >= cand.1 => best,
                _ => Some(cand),
            });
        match target {
            Some((k, _)) => {
                let c = &mut clusters[k];
                c.members.push(n);
                c.weight += p.score;
                c.start += p.score * p.segment.start();
                c.end += p.score * p.segment.end();
                c.stage = c.stage.max(p.stage);
            }
            None => clusters.push(Cluster {
                members: vec![n],
                class_id: p.class_id,
                weight: p.score,
                start: p.score * p.segment.start(),
                end: p.score * p.segment.end(),
                anchor: p.segment,
                stage: p.stage,
            }),
        }
    }

    let merged: Vec<Proposal> = clusters
        .into_iter()
        .map(|c| {
            let segment = if c.members.len() > 1 && c.weight > 0.0 {
                Segment::new(c.start / c.weight, c.end / c.weight).unwrap_or(c.anchor)
            } else {
                c.anchor
            };
            Proposal { segment, score: c.weight, class_id: c.class_id, stage: c.stage }
        })
        .collect();
    let mut out = soft_nms(&merged, nms)?;
    sort_ranked(&mut out);
    Ok(out)
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

fn check_labels(lb: &LogitsBatch, labels: &[usize]) -> Result<()> {
    if labels.len() != lb.n_samples {
        return Err(Error::Validation(format!("{} labels for {} samples", labels.len(), lb.n_samples)));
    }
    if let Some((b, l)) = labels.iter().enumerate().find(|(_, l)| **l >= lb.n_classes) {
        return Err(Error::Validation(format!("label {l} of sample {b} is not below {}", lb.n_classes)));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(Σ w_n · logits_n)` against `labels`.
pub fn ensemble_cross_entropy(lb: &LogitsBatch, labels: &[usize], w: &[f64]) -> Result<f64> {
    check_labels(lb, labels)?;
    if lb.n_samples == 0 {
        return Err(Error::contract("cross-entropy needs at least one sample"));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -log_softmax_at(&lb.combined(w, b), y))
        .sum();
    Ok(total / lb.n_samples as f64)
}

/// Lower bound applied to every weight after each gradient step.
pub const MIN_ADAPTIVE_WEIGHT: f64 = 1e-3;

/// Weights and loss after each iteration of [`fit_adaptive_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub weights: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

/// Projected gradient descent on the mean cross-entropy of the weighted logit
/// sum, starting from all-ones weights.
pub fn fit_adaptive_weights(lb: &LogitsBatch, labels: &[usize], lr: f64, iters: usize) -> Result<ModelWeights> {
    fit_adaptive_weights_traced(lb, labels, lr, iters).map(|(w, _)| w)
}

pub fn fit_adaptive_weights_traced(
    lb: &LogitsBatch,
    labels: &[usize],
    lr: f64,
    iters: usize,
) -> Result<(ModelWeights, FitTrace)> {
    check_labels(lb, labels)?;
    if lb.n_samples == 0 {
        return Err(Error::contract("weight fitting needs at least one sample"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    let n = lb.n_models;
    let mut w = vec![1.0; n];
    let mut trace = FitTrace { weights: Vec::with_capacity(iters), losses: Vec::with_capacity(iters) };
    let inv_b = 1.0 / lb.n_samples as f64;
    for it in 0..iters {
        let mut grad = vec![0.0; n];
        for (b, &y) in labels.iter().enumerate() {
            let z = lb.combined(&w, b);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (mi, g) in grad.iter_mut().enumerate() {
                let x = lb.logits(mi, b);
                let expected: f64 = exps.iter().zip(x).map(|(e, xk)| e / sum * xk).sum();
                *g += (expected - x[y]) * inv_b;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi = (*wi - lr * g).max(MIN_ADAPTIVE_WEIGHT);
        }
        let loss = ensemble_cross_entropy(lb, labels, &w)?;
        if !loss.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "adaptive weight fitting diverged at iteration {it} (loss {loss}); use a smaller learning rate"
            )));
        }
        trace.weights.push(w.clone());
        trace.losses.push(loss);
    }
    Ok((ModelWeights::new(w)?, trace))
}

/// Top-`k` classes of `Σ w_n · logits_n` per sample, ties to the lower id.
pub fn classify_ensemble(lb: &LogitsBatch, w: &ModelWeights, k: usize) -> Result<Vec<Vec<usize>>> {
    w.expect_len(lb.n_models, "models")?;
    if k == 0 || k > lb.n_classes {
        return Err(Error::Validation(format!("top-k needs 1 <= k <= {}, got {k}", lb.n_classes)));
    }
    // softmax is monotone, so ranking the combined logits is enough
    Ok((0..lb.n_samples)
        .map(|b| {
            let z = lb.combined(w.as_slice(), b);
            let mut idx: Vec<usize> = (0..z.len()).collect();
            idx.sort_by(|&a, &c| z[c].total_cmp(&z[a]).then(a.cmp(&c)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Settings shared by every candidate in [`search_bundle_weights`].
#[derive(Debug, Clone)]
pub struct BundleSearch {
    pub d_target: usize,
    pub align: Align,
    pub decode: DecodeOpts,
    pub nms: SoftNmsOpts,
    pub tious: Vec<f64>,
    pub max_an: usize,
    pub norm: AucNorm,
    /// Grid step per model weight; 0.1 searches {0, 0.1, …, 1}.
    pub step: f64,
}

/// AUC of decode → soft-NMS on the map-level ensemble of `models` with `w`.
pub fn bundle_ensemble_auc(
    models: &[&BTreeMap<String, ScoreBundle>],
    w: &ModelWeights,
    gts: &AnnotationDb,
    cfg: &BundleSearch,
) -> Result<f64> {
    let mut proposals = VideoProposals::new();
    for video in gts.videos() {
        let bundles: Vec<&ScoreBundle> = models.iter().filter_map(|m| m.get(&video.video_id)).collect();
        if bundles.len() != models.len() {
            continue;
        }
        let fused = ensemble_bundles(&bundles, w, cfg.d_target, cfg.align)?;
        let decoded = decode_proposals(&fused, video, &cfg.decode)?;
        proposals.insert(video.video_id.clone(), soft_nms(&decoded, &cfg.nms)?);
    }
    Ok(ar_an_auc(&proposals, gts, cfg.max_an, &cfg.tious, cfg.norm)?.auc)
}

/// Exhaustive grid search of bundle weights maximizing AUC on `gts`. Weight
/// vectors proportional to one already tried are skipped. Ties keep the first
/// candidate in lexicographic order.
pub fn search_bundle_weights(
    models: &[&BTreeMap<String, ScoreBundle>],
    gts: &AnnotationDb,
    cfg: &BundleSearch,
) -> Result<(ModelWeights, f64)> {
    if models.is_empty() {
        return Err(Error::contract("weight search needs at least one model"));
    }
    if !(cfg.step > 0.0 && cfg.step <= 1.0) {
        return Err(Error::contract(format!("grid step must be in (0, 1], got {}", cfg.step)));
    }
    let levels = (1.0 / cfg.step).round() as usize;
    let n = models.len();
    let mut best: Option<(ModelWeights, f64)> = None;
    let mut seen: Vec<Vec<f64>> = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let raw: Vec<f64> = idx.iter().map(|&k| k as f64 / levels as f64).collect();
        if let Ok(w) = ModelWeights::new(raw) {
            let key: Vec<f64> = w.normalized().iter().map(|x| (x * 1e9).round() / 1e9).collect();
            if !seen.contains(&key) {
                seen.push(key);
                let auc = bundle_ensemble_auc(models, &w, gts, cfg)?;
                log::debug!("weights {:?}: AUC {auc:.4}", w.as_slice());
                if best.as_ref().is_none_or(|(_, b)| auc > *b) {
                    best = Some((w, auc));
                }
            }
        }
        // odometer increment
        let mut pos = n;
        loop {
            if pos == 0 {
                return best.ok_or_else(|| Error::contract("no admissible weight vector"));
            }
            pos -= 1;
            if idx[pos] < levels {
                idx[pos] += 1;
                for x in &mut idx[pos + 1..] {
                    *x = 0;
                }
                break;
            }
        }
    }
}
