//! Localization and classification metrics: AR@AN, the AR–AN AUC, per-class
//! AP / mAP over a tIoU grid, and top-k accuracy.
//!
//! Proposals and detections are matched to ground truth greedily in ranking
//! order; each ground-truth instance can be claimed once, by the eligible
//! proposal that reaches it first, preferring the highest-overlap instance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::annotations::AnnotationDb;
use crate::error::{Error, Result};
use crate::proposal::{rank_order, Proposal, VideoProposals};
use crate::segment::{tiou, Segment};

/// tIoU thresholds 0.50, 0.55, …, 0.95.
pub fn default_tious() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// AN values reported as individual columns.
pub const REPORTED_AN: [usize; 4] = [1, 5, 10, 100];

fn check_tious(tious: &[f64]) -> Result<()> {
    if tious.is_empty() || tious.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::contract(format!("tIoU thresholds must be non-empty and in (0, 1], got {tious:?}")));
    }
    Ok(())
}

/// Greedy one-to-one matching of ranked proposals to ground truth at one
/// threshold. Returns, for each proposal, the ground-truth index it claimed.
pub fn greedy_match(ranked: &[Segment], gts: &[Segment], tiou_threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, seg) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = tiou(p, seg);
                if iou >= tiou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

fn ranked_segments(ps: &[Proposal], limit: usize) -> Vec<Segment> {
    let mut sorted = ps.to_vec();
    sorted.sort_by(rank_order);
    sorted.into_iter().take(limit).map(|p| p.segment).collect()
}

/// Average recall as a function of the number of proposals kept per video,
/// for AN = 1..=max_an.
pub fn recall_curve(proposals: &VideoProposals, gts: &AnnotationDb, max_an: usize, tious: &[f64]) -> Result<Vec<f64>> {
    check_tious(tious)?;
    if max_an == 0 {
        return Err(Error::contract("AN must be positive"));
    }
    let total = gts.n_instances();
    if total == 0 {
        return Err(Error::contract("ground-truth database has no instances"));
    }
    // matched[n] = number of (instance, threshold) pairs first recalled by proposal n
    let mut newly = vec![0usize; max_an];
    for video in gts.videos() {
        let Some(ps) = proposals.get(&video.video_id) else { continue };
        let segs = video.segments();
        let ranked = ranked_segments(ps, max_an);
        for &thr in tious {
            for (n, m) in greedy_match(&ranked, &segs, thr).into_iter().enumerate() {
                if m.is_some() {
                    newly[n] += 1;
                }
            }
        }
    }
    let denom = (total * tious.len()) as f64;
    let mut acc = 0usize;
    Ok(newly
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / denom
        })
        .collect())
}

/// AR@AN: recall with the top `an` proposals per video, averaged over `tious`.
pub fn average_recall_at(proposals: &VideoProposals, gts: &AnnotationDb, an: usize, tious: &[f64]) -> Result<f64> {
    Ok(*recall_curve(proposals, gts, an, tious)?.last().unwrap())
}

/// Normalization of the area under the AR–AN curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AucNorm {
    /// Mean of AR over AN = 1..=max_an.
    #[default]
    Mean,
    /// Trapezoid rule over AN = 1..=max_an divided by the AN span.
    Trapezoid,
}

impl std::str::FromStr for AucNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AucNorm::Mean),
            "trapezoid" => Ok(AucNorm::Trapezoid),
            other => Err(Error::Validation(format!("unknown AUC normalization {other:?}"))),
        }
    }
}

/// Area under a recall curve, in percent.
pub fn curve_auc(curve: &[f64], norm: AucNorm) -> f64 {
    match (norm, curve.len()) {
        (_, 0) => 0.0,
        (_, 1) => 100.0 * curve[0],
        (AucNorm::Mean, n) => 100.0 * curve.iter().sum::<f64>() / n as f64,
        (AucNorm::Trapezoid, n) => {
            let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
            100.0 * area / (n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArCurve {
    /// `curve[n]` is AR@(n + 1).
    pub curve: Vec<f64>,
    /// Percent.
    pub auc: f64,
}

pub fn ar_an_auc(
    proposals: &VideoProposals,
    gts: &AnnotationDb,
    max_an: usize,
    tious: &[f64],
    norm: AucNorm,
) -> Result<ArCurve> {
    let curve = recall_curve(proposals, gts, max_an, tious)?;
    let auc = curve_auc(&curve, norm);
    Ok(ArCurve { curve, auc })
}

/// Interpolated average precision from a ranked list of hit/miss decisions.
pub fn interpolated_ap(hits: &[bool], n_positive: usize) -> f64 {
    if n_positive == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_positive as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // monotone precision envelope, integrated where recall increases
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    pub tious: Vec<f64>,
    /// `ap[τ][class]` for every class with at least one instance.
    pub ap: Vec<BTreeMap<usize, f64>>,
    /// Per-class AP averaged over thresholds.
    pub ap_per_class: BTreeMap<usize, f64>,
    /// mAP at each threshold.
    pub map_at: Vec<f64>,
    pub mean_map: f64,
}

struct Detection<'a> {
    video: &'a str,
    proposal: Proposal,
}

/// Per-class AP and mAP of classified detections. Every detection must carry a
/// class id known to `gts`.
pub fn detection_map(detections: &VideoProposals, gts: &AnnotationDb, tious: &[f64]) -> Result<MapResult> {
    check_tious(tious)?;
    let n_classes = gts.n_classes();
    let offenders: Vec<String> = detections
        .iter()
        .flat_map(|(vid, ps)| ps.iter().map(move |p| (vid, p.class_id)))
        .filter(|(_, c)| c.is_none_or(|c| c >= n_classes))
        .map(|(vid, c)| match c {
            Some(c) => format!("{vid}: class {c}"),
            None => format!("{vid}: missing class"),
        })
        .collect();
    if !offenders.is_empty() {
        let shown: Vec<_> = offenders.iter().take(10).cloned().collect();
        return Err(Error::Validation(format!(
            "{} detection(s) with unknown class ids (known: 0..{n_classes}): {}",
            offenders.len(),
            shown.join(", ")
        )));
    }
    if gts.n_instances() == 0 {
        return Err(Error::contract("ground-truth database has no instances"));
    }

    // class -> video -> gt segments
    let mut gt_by_class: BTreeMap<usize, BTreeMap<&str, Vec<Segment>>> = BTreeMap::new();
    for v in gts.videos() {
        for g in v.ground_truth() {
            gt_by_class
                .entry(g.class_id)
                .or_default()
                .entry(v.video_id.as_str())
                .or_default()
                .push(g.segment);
        }
    }
    let mut det_by_class: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for (vid, ps) in detections {
        if gts.get(vid).is_none() {
            continue;
        }
        for p in ps {
            det_by_class.entry(p.class_id.unwrap()).or_default().push(Detection {
                video: vid.as_str(),
                proposal: *p,
            });
        }
    }
    for dets in det_by_class.values_mut() {
        dets.sort_by(|a, b| {
            b.proposal
                .score
                .total_cmp(&a.proposal.score)
                .then_with(|| a.video.cmp(b.video))
                .then_with(|| rank_order(&a.proposal, &b.proposal))
        });
    }

    let mut ap = Vec::with_capacity(tious.len());
    for &thr in tious {
        let mut per_class = BTreeMap::new();
        for (&class, videos) in &gt_by_class {
            let n_pos: usize = videos.values().map(Vec::len).sum();
            let dets = det_by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
            let mut taken: BTreeMap<&str, Vec<bool>> =
                videos.iter().map(|(v, g)| (*v, vec![false; g.len()])).collect();
            let hits: Vec<bool> = dets
                .iter()
                .map(|d| {
                    let Some(segs) = videos.get(d.video) else { return false };
                    let used = taken.get_mut(d.video).unwrap();
                    let mut best: Option<(usize, f64)> = None;
                    for (g, seg) in segs.iter().enumerate() {
                        if used[g] {
                            continue;
                        }
                        let iou = tiou(&d.proposal.segment, seg);
                        if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                            best = Some((g, iou));
                        }
                    }
                    match best {
                        Some((g, _)) => {
                            used[g] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            per_class.insert(class, interpolated_ap(&hits, n_pos));
        }
        ap.push(per_class);
    }
    let map_at: Vec<f64> = ap
        .iter()
        .map(|m| m.values().sum::<f64>() / m.len() as f64)
        .collect();
    let mean_map = map_at.iter().sum::<f64>() / map_at.len() as f64;
    let ap_per_class = gt_by_class
        .keys()
        .map(|&c| (c, ap.iter().map(|m| m[&c]).sum::<f64>() / ap.len() as f64))
        .collect();
    Ok(MapResult {
        tious: tious.to_vec(),
        ap,
        ap_per_class,
        map_at,
        mean_map,
    })
}

/// Fraction of samples whose label is among the first `k` predictions.
pub fn topk_accuracy(predictions: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("top-k accuracy needs at least one sample"));
    }
    if let Some(i) = predictions.iter().position(|p| p.len() < k) {
        return Err(Error::contract(format!("prediction {i} has fewer than {k} entries")));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p[..k].contains(l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Everything reported for one evaluated system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// AR at the reported AN values, as fractions.
    pub ar_at: BTreeMap<usize, f64>,
    pub ar_curve: Vec<f64>,
    /// Percent.
    pub auc: f64,
    pub ap_per_class: BTreeMap<usize, f64>,
    pub mean_map: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

impl EvalReport {
    /// AR/AUC from proposals; mAP as well when every proposal carries a class.
    pub fn evaluate(
        proposals: &VideoProposals,
        gts: &AnnotationDb,
        max_an: usize,
        tious: &[f64],
        norm: AucNorm,
    ) -> Result<Self> {
        let ar = ar_an_auc(proposals, gts, max_an, tious, norm)?;
        let ar_at = REPORTED_AN
            .iter()
            .filter(|&&an| an <= max_an)
            .map(|&an| (an, ar.curve[an - 1]))
            .collect();
        let classified = proposals.values().flatten().all(|p| p.class_id.is_some())
            && proposals.values().any(|ps| !ps.is_empty());
        let (ap_per_class, mean_map) = if classified {
            let m = detection_map(proposals, gts, tious)?;
            (m.ap_per_class, Some(m.mean_map))
        } else {
            (BTreeMap::new(), None)
        };
        Ok(EvalReport {
            ar_at,
            ar_curve: ar.curve,
            auc: ar.auc,
            ap_per_class,
            mean_map,
            top1: None,
            top5: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, values in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut header = String::new();
        let mut row = String::new();
        for (an, v) in &self.ar_at {
            let name = format!("AR@{an}(%)");
            let _ = write!(header, "{name:>12}");
            let _ = write!(row, "{:>12.2}", 100.0 * v);
        }
        let _ = write!(header, "{:>12}", "AUC(%)");
        let _ = write!(row, "{:>12.2}", self.auc);
        if let Some(m) = self.mean_map {
            let _ = write!(header, "{:>12}", "mAP(%)");
            let _ = write!(row, "{:>12.2}", 100.0 * m);
        }
        for (name, v) in [("Top1(%)", self.top1), ("Top5(%)", self.top5)] {
            if let Some(v) = v {
                let _ = write!(header, "{name:>12}");
                let _ = write!(row, "{:>12.2}", 100.0 * v);
            }
        }
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{row}");
        out
    }

    /// `an,ar` rows for plotting.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("an,ar\n");
        for (n, v) in self.ar_curve.iter().enumerate() {
            let _ = writeln!(out, "{},{}", n + 1, v);
        }
        out
    }
}
