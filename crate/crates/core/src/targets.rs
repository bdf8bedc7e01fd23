//! Supervision targets: boundary-matching confidence labels, start/end labels,
//! per-cell actionness, cascade positive/negative assignment and the offset
//! parametrization shared with [`crate::refine`].

use crate::error::{Error, Result};
use crate::proposal::Proposal;
use crate::segment::{grid_to_segment, tiou, GridSpec, Segment};

/// Default half-width of the boundary region, as a fraction of the action length.
pub const DEFAULT_EXPAND_RATIO: f64 = 0.1;

/// Dense `d × d` map indexed by (start cell, duration - 1). Cell `(i, k)` is the
/// candidate `[i, i + k + 1)` in grid units; cells with `i + k + 1 > d` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BmLabelMap {
    d: usize,
    values: Vec<f64>,
}

impl BmLabelMap {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, start: usize, dur: usize) -> f64 {
        self.values[start * self.d + dur]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Best tIoU of every grid candidate with any ground-truth segment.
pub fn bm_label_map(gts: &[Segment], spec: &GridSpec) -> BmLabelMap {
    let d = spec.d();
    let mut values = vec![0.0; d * d];
    if gts.is_empty() {
        return BmLabelMap { d, values };
    }
    for i in 0..d {
        for dur in 0..d - i {
            let cand = grid_to_segment(i, i + dur + 1, spec).expect("valid grid cell");
            values[i * d + dur] = gts.iter().map(|g| tiou(&cand, g)).fold(0.0, f64::max);
        }
    }
    BmLabelMap { d, values }
}

/// Binary start/end targets, one entry per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLabels {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Marks cell `k` as a start (end) whenever it overlaps `[s - r, s + r]` by more
/// than half a cell, with `r = max(expand_ratio · length, one cell)`.
pub fn boundary_labels(gts: &[Segment], spec: &GridSpec, expand_ratio: f64) -> Result<BoundaryLabels> {
    if !(expand_ratio.is_finite() && expand_ratio > 0.0) {
        return Err(Error::contract(format!(
            "expand_ratio must be positive, got {expand_ratio}"
        )));
    }
    let d = spec.d();
    let unit = spec.unit();
    let mut start = vec![0.0; d];
    let mut end = vec![0.0; d];
    let mark = |labels: &mut [f64], centre: f64, r: f64| {
        let (lo, hi) = (centre - r, centre + r);
        for (k, slot) in labels.iter_mut().enumerate() {
            let cell_lo = spec.boundary_time(k);
            let cell_hi = spec.boundary_time(k + 1);
            let overlap = cell_hi.min(hi) - cell_lo.max(lo);
            if overlap > 0.5 * unit {
                *slot = 1.0;
            }
        }
    };
    for g in gts {
        let r = (expand_ratio * g.length()).max(unit);
        mark(&mut start, g.start(), r);
        mark(&mut end, g.end(), r);
    }
    Ok(BoundaryLabels { start, end })
}

/// 1 where the cell center lies inside some ground-truth segment.
pub fn action_score_labels(gts: &[Segment], spec: &GridSpec) -> Vec<f64> {
    let d = spec.d();
    (0..d)
        .map(|k| {
            let center = (k as f64 + 0.5) / d as f64 * spec.duration();
            if gts.iter().any(|g| g.contains(center)) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Regression target that moves `p` onto `gt`: center shift in units of the
/// proposal length and log length ratio.
pub fn offset_targets(p: &Segment, gt: &Segment) -> Result<(f64, f64)> {
    let pl = p.length();
    if !(pl > 0.0) {
        return Err(Error::contract("proposal length must be positive"));
    }
    let dc = (gt.center() - p.center()) / pl;
    let dl = (gt.length() / pl).ln();
    Ok((dc, dl))
}

/// Label of one proposal at one cascade stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageAssignment {
    pub proposal_index: usize,
    pub is_positive: bool,
    pub matched_gt: Option<usize>,
    pub target_iou: f64,
    pub offset_target: Option<(f64, f64)>,
}

/// Index and tIoU of the best-overlapping segment; ties go to the lower index.
pub fn best_match(s: &Segment, gts: &[Segment]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in gts.iter().enumerate() {
        let iou = tiou(s, g);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((k, iou));
        }
    }
    best
}

/// Matches each proposal to its best ground truth and labels it positive when
/// that overlap reaches `iou_threshold`.
pub fn cascade_assign(
    proposals: &[Proposal],
    gts: &[Segment],
    iou_threshold: f64,
) -> Result<Vec<StageAssignment>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::contract(format!(
            "iou threshold must lie in (0, 1), got {iou_threshold}"
        )));
    }
    proposals
        .iter()
        .enumerate()
        .map(|(proposal_index, p)| {
            let (matched_gt, target_iou) = match best_match(&p.segment, gts) {
                Some((k, iou)) if iou > 0.0 => (Some(k), iou),
                _ => (None, 0.0),
            };
            let is_positive = matched_gt.is_some() && target_iou >= iou_threshold;
            let offset_target = if is_positive {
                Some(offset_targets(&p.segment, &gts[matched_gt.unwrap()])?)
            } else {
                None
            };
            Ok(StageAssignment {
                proposal_index,
                is_positive,
                matched_gt,
                target_iou,
                offset_target,
            })
        })
        .collect()
}
