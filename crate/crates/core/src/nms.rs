//! Gaussian soft non-maximum suppression over temporal proposals.

use crate::error::{Error, Result};
use crate::proposal::{rank_order, sort_ranked, Proposal, ProposalSet};
use crate::segment::tiou;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftNmsOpts {
    /// Gaussian width: overlapping scores decay by `exp(-tiou² / sigma)`.
    pub sigma: f64,
    /// Selection stops once the best remaining score drops below this.
    pub min_score: f64,
    pub top_k: usize,
}

impl Default for SoftNmsOpts {
    fn default() -> Self {
        SoftNmsOpts {
            sigma: 0.4,
            min_score: 1e-4,
            top_k: 100,
        }
    }
}

/// Repeatedly selects the best remaining proposal and decays every other
/// remaining score by its overlap with the selection. Segments are untouched.
pub fn soft_nms(ps: &[Proposal], opts: &SoftNmsOpts) -> Result<ProposalSet> {
    if !(opts.sigma > 0.0 && opts.sigma.is_finite()) {
        return Err(Error::contract(format!("soft-NMS sigma must be positive, got {}", opts.sigma)));
    }
    if opts.top_k == 0 {
        return Err(Error::contract("soft-NMS top_k must be positive"));
    }
    let mut remaining: Vec<Proposal> = ps.to_vec();
    let mut kept = Vec::with_capacity(opts.top_k.min(ps.len()));
    while kept.len() < opts.top_k && !remaining.is_empty() {
        let best = remaining
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| rank_order(a, b))
            .map(|(k, _)| k)
            .unwrap();
        if remaining[best].score < opts.min_score {
            break;
        }
        let chosen = remaining.swap_remove(best);
        for p in remaining.iter_mut() {
            let iou = tiou(&chosen.segment, &p.segment);
            if iou > 0.0 {
                p.score *= (-iou * iou / opts.sigma).exp();
            }
        }
        kept.push(chosen);
    }
    sort_ranked(&mut kept);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::Segment;
    use proptest::prelude::*;

    fn p(a: f64, b: f64, s: f64) -> Proposal {
        Proposal::new(Segment::new(a, b).unwrap(), s)
    }

    #[test]
    fn single_proposal_unchanged() {
        let out = soft_nms(&[p(1.0, 2.0, 0.3)], &SoftNmsOpts::default()).unwrap();
        assert_eq!(out, vec![p(1.0, 2.0, 0.3)]);
    }

    #[test]
    fn disjoint_unchanged() {
        let out = soft_nms(&[p(0.0, 1.0, 0.2), p(1.0, 2.0, 0.7)], &SoftNmsOpts::default()).unwrap();
        assert_eq!(out, vec![p(1.0, 2.0, 0.7), p(0.0, 1.0, 0.2)]);
    }

    #[test]
    fn two_identical_decay() {
        let out = soft_nms(&[p(0.0, 2.0, 0.9), p(0.0, 2.0, 0.8)], &SoftNmsOpts::default()).unwrap();
        assert_eq!(out[0].score, 0.9);
        let want = 0.8 * (-1.0f64 / 0.4).exp();
        assert!((out[1].score - want).abs() < 1e-12);
        assert!((out[1].score - 0.06566).abs() < 1e-5);
    }

    #[test]
    fn stops_at_min_score_and_top_k() {
        let ps = [p(0.0, 1.0, 0.9), p(2.0, 3.0, 0.5), p(4.0, 5.0, 0.00001)];
        assert_eq!(soft_nms(&ps, &SoftNmsOpts::default()).unwrap().len(), 2);
        let opts = SoftNmsOpts { top_k: 1, ..Default::default() };
        assert_eq!(soft_nms(&ps, &opts).unwrap(), vec![p(0.0, 1.0, 0.9)]);
        assert!(soft_nms(&ps, &SoftNmsOpts { sigma: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn small_sigma_acts_like_hard_nms() {
        let ps = [p(0.0, 2.0, 0.9), p(0.2, 2.0, 0.85), p(3.0, 4.0, 0.4)];
        let opts = SoftNmsOpts { sigma: 1e-3, min_score: 0.0, top_k: 10 };
        let out = soft_nms(&ps, &opts).unwrap();
        assert_eq!(out[0], ps[0]);
        assert_eq!(out[1], ps[2]);
        assert!(out[2].score < 1e-100);
    }

    fn arb_props() -> impl Strategy<Value = Vec<Proposal>> {
        prop::collection::vec((0.0f64..50.0, 0.1f64..20.0, 0.0f64..1.0), 0..30)
            .prop_map(|v| v.into_iter().map(|(s, l, sc)| p(s, s + l, sc)).collect())
    }

    proptest! {
        #[test]
        fn never_raises_scores_or_moves_segments(ps in arb_props()) {
            let out = soft_nms(&ps, &SoftNmsOpts { min_score: 0.0, top_k: 1000, ..Default::default() }).unwrap();
            prop_assert_eq!(out.len(), ps.len());
            for q in &out {
                let orig = ps.iter().filter(|o| o.segment == q.segment).map(|o| o.score).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(q.score <= orig);
            }
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn pairwise_disjoint_is_identity(n in 0usize..20, scores in prop::collection::vec(0.001f64..1.0, 20)) {
            let ps: Vec<_> = (0..n).map(|k| p(k as f64, k as f64 + 1.0, scores[k])).collect();
            let mut want = ps.clone();
            crate::proposal::sort_ranked(&mut want);
            let out = soft_nms(&ps, &SoftNmsOpts { top_k: 100, ..Default::default() }).unwrap();
            prop_assert_eq!(out, want);
        }
    }
}
