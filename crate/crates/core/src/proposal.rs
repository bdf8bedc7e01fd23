use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::segment::Segment;

/// A scored temporal proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub segment: Segment,
    pub score: f64,
    pub class_id: Option<usize>,
    /// 0 for a raw decode, `k` after the k-th refinement stage.
    pub stage: u32,
}

impl Proposal {
    pub fn new(segment: Segment, score: f64) -> Self {
        Proposal {
            segment,
            score,
            class_id: None,
            stage: 0,
        }
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }
}

pub type ProposalSet = Vec<Proposal>;

/// Proposal sets keyed by video id.
pub type VideoProposals = BTreeMap<String, ProposalSet>;

/// Ranking order: score descending, then start ascending, then end ascending.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.segment.start().total_cmp(&b.segment.start()))
        .then_with(|| a.segment.end().total_cmp(&b.segment.end()))
}

/// Sorts proposals into ranking order.
pub fn sort_ranked(ps: &mut [Proposal]) {
    ps.sort_by(rank_order);
}
