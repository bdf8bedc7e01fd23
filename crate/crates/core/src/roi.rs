//! 1-D RoI Align over a [`FeatureSequence`].
//!
//! Feature step `t` covers `[t, t + 1)` in region coordinates and its value sits
//! at the step center `t + 0.5`. Between centers the sequence is linearly
//! interpolated; beyond the first and last centers it fades linearly towards
//! virtual zero steps at `-1` and `T`, so pooling is continuous in the region.

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

fn check(region: (f64, f64), bins: usize, samples_per_bin: usize) -> Result<()> {
    let (lo, hi) = region;
    if bins < 1 || samples_per_bin < 1 {
        return Err(Error::contract(format!(
            "RoI Align needs bins >= 1 and samples >= 1, got {bins} and {samples_per_bin}"
        )));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::contract(format!("RoI region must satisfy lo < hi, got ({lo}, {hi})")));
    }
    Ok(())
}

/// Interpolation taps for a sample at region coordinate `x`.
#[inline]
fn taps(x: f64, length: usize) -> [(Option<usize>, f64); 2] {
    let u = x - 0.5;
    let base = u.floor();
    let frac = u - base;
    let idx = |k: f64| (k >= 0.0 && k < length as f64).then_some(k as usize);
    [(idx(base), 1.0 - frac), (idx(base + 1.0), frac)]
}

#[inline]
fn sample_positions(region: (f64, f64), bins: usize, samples: usize) -> impl Iterator<Item = (usize, f64)> {
    let (lo, hi) = region;
    let width = hi - lo;
    (0..bins).flat_map(move |b| {
        (0..samples).map(move |s| {
            let frac = (b as f64 + (s as f64 + 0.5) / samples as f64) / bins as f64;
            (b, lo + width * frac)
        })
    })
}

/// Pools `region` (in feature steps) into `bins` values per channel. Output is
/// channel-major, `C × bins`.
pub fn roi_align_1d(
    feats: &FeatureSequence,
    region: (f64, f64),
    bins: usize,
    samples_per_bin: usize,
) -> Result<Vec<f64>> {
    check(region, bins, samples_per_bin)?;
    let (c_n, t_n) = (feats.channels(), feats.length());
    let mut out = vec![0.0; c_n * bins];
    let norm = 1.0 / samples_per_bin as f64;
    for (b, x) in sample_positions(region, bins, samples_per_bin) {
        for (idx, w) in taps(x, t_n) {
            let Some(t) = idx else { continue };
            if w == 0.0 {
                continue;
            }
            for c in 0..c_n {
                out[c * bins + b] += w * norm * feats.get(c, t);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`roi_align_1d`]: scatters `upstream` (`C × bins`) back onto the
/// `C × T` feature grid.
pub fn roi_align_1d_grad(
    feats: &FeatureSequence,
    region: (f64, f64),
    bins: usize,
    samples_per_bin: usize,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check(region, bins, samples_per_bin)?;
    let (c_n, t_n) = (feats.channels(), feats.length());
    if upstream.len() != c_n * bins {
        return Err(Error::format(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            c_n * bins
        )));
    }
    let mut grad = vec![0.0; c_n * t_n];
    let norm = 1.0 / samples_per_bin as f64;
    for (b, x) in sample_positions(region, bins, samples_per_bin) {
        for (idx, w) in taps(x, t_n) {
            let Some(t) = idx else { continue };
            for c in 0..c_n {
                grad[c * t_n + t] += w * norm * upstream[c * bins + b];
            }
        }
    }
    Ok(grad)
}
