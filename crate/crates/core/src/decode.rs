//! Boundary-matching decode: every valid (start, duration) cell of a
//! [`ScoreBundle`] becomes a scored proposal.

use crate::annotations::VideoRecord;
use crate::bundle::ScoreBundle;
use crate::error::Result;
use crate::proposal::{sort_ranked, Proposal, ProposalSet};
use crate::segment::{grid_to_segment, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOpts {
    pub max_candidates: usize,
    /// Candidates scoring below this are dropped.
    pub min_score: f64,
    /// Only decode cells whose start and end positions are boundary peaks.
    pub peaks_only: bool,
    /// Exponent applied to the product of the two confidence maps.
    pub gamma: f64,
}

impl Default for DecodeOpts {
    fn default() -> Self {
        DecodeOpts {
            max_candidates: 1000,
            min_score: 0.0,
            peaks_only: false,
            gamma: 0.5,
        }
    }
}

/// Proposal confidence from start/end probabilities and the two map entries:
/// `ps · pe · (ma · mb)^gamma`.
#[inline]
pub fn fuse_confidence(ps: f64, pe: f64, ma: f64, mb: f64, gamma: f64) -> f64 {
    ps * pe * (ma * mb).powf(gamma)
}

/// Positions that are strict local maxima or exceed half the global maximum.
pub fn boundary_peaks(v: &[f32]) -> Vec<bool> {
    let max = v.iter().copied().fold(0.0f32, f32::max);
    (0..v.len())
        .map(|k| {
            let left = k == 0 || v[k] > v[k - 1];
            let right = k + 1 == v.len() || v[k] > v[k + 1];
            (left && right && v.len() > 1) || v[k] > 0.5 * max
        })
        .collect()
}

/// Index into the end-probability vector for the candidate `[i, i + dur + 1)`:
/// the cell holding the end boundary, clamped to the last cell.
#[inline]
pub fn end_index(i: usize, dur: usize, d: usize) -> usize {
    (i + dur + 1).min(d - 1)
}

pub fn decode_proposals(bundle: &ScoreBundle, video: &VideoRecord, opts: &DecodeOpts) -> Result<ProposalSet> {
    let d = bundle.d();
    let spec = GridSpec::new(d, video.duration())?;
    let (start_peaks, end_peaks) = if opts.peaks_only {
        (boundary_peaks(bundle.start_prob()), boundary_peaks(bundle.end_prob()))
    } else {
        (vec![true; d], vec![true; d])
    };
    let mut out = Vec::new();
    for i in 0..d {
        if !start_peaks[i] {
            continue;
        }
        let ps = bundle.start_prob()[i] as f64;
        for dur in 0..d - i {
            let e = end_index(i, dur, d);
            if !end_peaks[e] {
                continue;
            }
            let cell = i * d + dur;
            let score = fuse_confidence(
                ps,
                bundle.end_prob()[e] as f64,
                bundle.map_a()[cell] as f64,
                bundle.map_b()[cell] as f64,
                opts.gamma,
            );
            if score >= opts.min_score {
                out.push(Proposal::new(grid_to_segment(i, i + dur + 1, &spec)?, score));
            }
        }
    }
    sort_ranked(&mut out);
    out.truncate(opts.max_candidates);
    Ok(out)
}
