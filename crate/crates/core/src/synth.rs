//! Seeded synthetic data: annotation databases, score bundles derived from
//! ground truth, feature sequences with class-specific activity, classifier
//! logits, and an oracle refiner that knows the ground truth.
//!
//! Every generator draws from its own ChaCha stream keyed by the seed and the
//! video (or class), so output does not depend on generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::annotations::{AnnotationDb, GroundTruth, Subset, VideoRecord};
use crate::bundle::{zero_invalid_triangle, ScoreBundle};
use crate::ensemble::LogitsBatch;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::proposal::Proposal;
use crate::refine::{apply_offsets, RefineOutput, Refiner, RoiConfig};
use crate::segment::{feature_length_for, grid_to_segment, tiou, GridSpec, Segment};
use crate::targets::{bm_label_map, best_match, boundary_labels, offset_targets, DEFAULT_EXPAND_RATIO};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub n_classes: usize,
    /// Video duration bounds in seconds.
    pub duration_range: (f64, f64),
    /// Bounds on the number of actions per video, inclusive.
    pub actions_range: (usize, usize),
    /// Std of endpoint jitter applied when building bundles, in grid cells.
    pub boundary_noise: f64,
    /// Std of additive noise on every bundle value.
    pub map_noise: f64,
    pub feature_channels: usize,
    /// Std of the background feature noise.
    pub feature_noise: f64,
    /// Mean amplitude of class prototypes inside actions.
    pub feature_signal: f64,
    /// Grid that ground-truth endpoints are snapped to; `None` keeps them continuous.
    pub snap_d: Option<usize>,
    /// Leading fraction of videos assigned to the training subset.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_videos: 100,
            n_classes: 10,
            duration_range: (30.0, 120.0),
            actions_range: (1, 4),
            boundary_noise: 0.0,
            map_noise: 0.0,
            feature_channels: 8,
            feature_noise: 1.0,
            feature_signal: 1.5,
            snap_d: Some(GridSpec::DEFAULT_D),
            train_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (dmin, dmax) = self.duration_range;
        if !(dmin.is_finite() && dmax.is_finite() && dmin > 0.0 && dmin <= dmax) {
            return Err(Error::Validation(format!("bad duration range [{dmin}, {dmax}]")));
        }
        let (amin, amax) = self.actions_range;
        if amin > amax {
            return Err(Error::Validation(format!("bad actions range [{amin}, {amax}]")));
        }
        if self.n_classes == 0 || self.feature_channels == 0 {
            return Err(Error::Validation("n_classes and feature_channels must be positive".into()));
        }
        for (name, v) in [
            ("boundary_noise", self.boundary_noise),
            ("map_noise", self.map_noise),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.feature_signal.is_finite() {
            return Err(Error::Validation("feature_signal must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Validation(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        if self.snap_d.is_some_and(|d| d < 2) {
            return Err(Error::Validation("snap grid must have at least 2 cells".into()));
        }
        Ok(())
    }
}

const DOMAIN_ANNOTATIONS: u64 = 1;
const DOMAIN_BUNDLE: u64 = 2;
const DOMAIN_FEATURES: u64 = 3;
const DOMAIN_PROTOTYPES: u64 = 4;
const DOMAIN_LOGITS: u64 = 5;

/// Independent generator for `(seed, domain, key)`.
pub fn stream_rng(seed: u64, domain: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(key);
    rng
}

/// 64-bit FNV-1a, used to key per-video streams by id.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Standard normal truncated to `[-3, 3]` by rejection.
fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

pub fn video_id(index: usize) -> String {
    format!("v_{index:05}")
}

pub fn class_name(class: usize) -> String {
    format!("class_{class:02}")
}

/// One video of the generator recipe: `k` actions, one per equal slot, each
/// 20–90 % of its slot long at a uniform offset inside it.
fn gen_video(cfg: &SynthConfig, index: usize) -> Result<VideoRecord> {
    let mut rng = stream_rng(cfg.seed, DOMAIN_ANNOTATIONS, index as u64);
    let (dmin, dmax) = cfg.duration_range;
    let duration = if dmax > dmin { rng.random_range(dmin..dmax) } else { dmin };
    let (amin, amax) = cfg.actions_range;
    let k = rng.random_range(amin..=amax);
    let mut gts = Vec::with_capacity(k);
    let slot = duration / k.max(1) as f64;
    for j in 0..k {
        let len = rng.random_range(0.2..0.9) * slot;
        let start = j as f64 * slot + rng.random_range(0.0..1.0) * (slot - len);
        let class_id = rng.random_range(0..cfg.n_classes);
        let segment = match cfg.snap_d {
            Some(d) => {
                let spec = GridSpec::new(d, duration)?;
                let unit = spec.unit();
                let i = ((start / unit).round() as usize).min(d - 1);
                let e = (((start + len) / unit).round() as usize).clamp(i + 1, d);
                grid_to_segment(i, e, &spec)?
            }
            None => Segment::new(start, (start + len).min(duration))?,
        };
        gts.push(GroundTruth { class_id, segment });
    }
    let n_train = (cfg.n_videos as f64 * cfg.train_fraction).round() as usize;
    let subset = if index < n_train { Subset::Training } else { Subset::Validation };
    VideoRecord::new(video_id(index), duration, subset, gts)
}

pub fn gen_annotations(cfg: &SynthConfig) -> Result<AnnotationDb> {
    cfg.validate()?;
    let mut db = AnnotationDb::new((0..cfg.n_classes).map(class_name).collect());
    for index in 0..cfg.n_videos {
        db.insert(gen_video(cfg, index)?)?;
    }
    Ok(db)
}

/// Keeps every entry at least half its neighbors' value.
fn triangle_dilate(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|k| {
            let left = if k > 0 { 0.5 * v[k - 1] } else { 0.0 };
            let right = if k + 1 < v.len() { 0.5 * v[k + 1] } else { 0.0 };
            v[k].max(left).max(right)
        })
        .collect()
}

/// Score bundle an ideal model would output for `video`, optionally degraded.
///
/// Ground-truth endpoints are first jittered by `boundary_noise` grid cells;
/// boundary vectors are the boundary labels with a one-cell triangle spread,
/// both maps are the boundary-matching labels. Additive noise of std
/// `map_noise` is then applied and values are clamped to `[0, 1]`.
pub fn gen_bundle(video: &VideoRecord, spec: &GridSpec, map_noise: f64, boundary_noise: f64, seed: u64) -> Result<ScoreBundle> {
    if !(map_noise.is_finite() && map_noise >= 0.0 && boundary_noise.is_finite() && boundary_noise >= 0.0) {
        return Err(Error::Validation("bundle noise levels must be finite and >= 0".into()));
    }
    let mut rng = stream_rng(seed, DOMAIN_BUNDLE, fnv1a(&video.video_id));
    let unit = spec.unit();
    let t = spec.duration();
    let gts: Vec<Segment> = video
        .segments()
        .into_iter()
        .map(|g| {
            if boundary_noise == 0.0 {
                return g;
            }
            let a = g.start() + unit * boundary_noise * truncated_normal(&mut rng);
            let b = g.end() + unit * boundary_noise * truncated_normal(&mut rng);
            match Segment::new(a.clamp(0.0, t), b.clamp(0.0, t)) {
                Ok(s) if s.length() >= 0.5 * unit => s,
                _ => g,
            }
        })
        .collect();
    let labels = boundary_labels(&gts, spec, DEFAULT_EXPAND_RATIO)?;
    let mut start = triangle_dilate(&labels.start);
    let mut end = triangle_dilate(&labels.end);
    let map = bm_label_map(&gts, spec).into_values();
    let (mut map_a, mut map_b) = (map.clone(), map);
    let d = spec.d();
    if map_noise > 0.0 {
        for v in [&mut start, &mut end, &mut map_a, &mut map_b] {
            for x in v.iter_mut() {
                *x = (*x + map_noise * truncated_normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
        zero_invalid_triangle(&mut map_a, d);
        zero_invalid_triangle(&mut map_b, d);
    }
    let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    ScoreBundle::new(d, f(start), f(end), f(map_a), f(map_b))
}

/// Channel prototype of `class`: a shared positive level plus class-specific
/// variation.
pub fn class_prototype(cfg: &SynthConfig, class: usize) -> Vec<f64> {
    let mut rng = stream_rng(cfg.seed, DOMAIN_PROTOTYPES, class as u64);
    (0..cfg.feature_channels)
        .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); cfg.feature_signal * (1.0 + 0.5 * z) })
        .collect()
}

/// Standard-normal background plus each action's class prototype weighted by
/// how much of the feature step it covers. Two steps per second; values are
/// rounded to `f32` precision so they survive the feature container.
pub fn gen_features(video: &VideoRecord, cfg: &SynthConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let len = feature_length_for(video.duration())?;
    let c = cfg.feature_channels;
    let step = video.duration() / len as f64;
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes).map(|k| class_prototype(cfg, k)).collect();
    let mut rng = stream_rng(cfg.seed, DOMAIN_FEATURES, fnv1a(&video.video_id));
    let mut data = vec![0.0; c * len];
    for x in data.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = cfg.feature_noise * z;
    }
    for gt in video.ground_truth() {
        let proto = &prototypes[gt.class_id];
        for t in 0..len {
            let cell = Segment::new(t as f64 * step, (t + 1) as f64 * step)?;
            let cover = cell.intersection(&gt.segment) / step;
            if cover > 0.0 {
                for (ch, p) in proto.iter().enumerate() {
                    data[ch * len + t] += cover * p;
                }
            }
        }
    }
    for x in data.iter_mut() {
        *x = *x as f32 as f64;
    }
    FeatureSequence::new(c, len, data)
}

/// Logits of `margins.len()` classifiers on `n_samples` samples: standard
/// normal noise plus `margins[n]` on the true class. Returns the batch and the
/// true labels.
pub fn gen_logits(seed: u64, n_samples: usize, n_classes: usize, margins: &[f64]) -> Result<(LogitsBatch, Vec<usize>)> {
    if n_classes == 0 || margins.is_empty() {
        return Err(Error::Validation("logits need at least one class and one model".into()));
    }
    let mut rng = stream_rng(seed, DOMAIN_LOGITS, 0);
    let labels: Vec<usize> = (0..n_samples).map(|_| rng.random_range(0..n_classes)).collect();
    let mut values = Vec::with_capacity(margins.len() * n_samples * n_classes);
    for &m in margins {
        for &y in &labels {
            for k in 0..n_classes {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(z + if k == y { m } else { 0.0 });
            }
        }
    }
    Ok((LogitsBatch::new(margins.len(), n_samples, n_classes, values)?, labels))
}

/// Refiner that moves each proposal a fraction `alpha` of the way toward its
/// best-overlapping ground truth, in offset space, and reports the resulting
/// true tIoU. Proposals touching no ground truth stay put with IoU 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRefiner {
    alpha: f64,
}

pub fn oracle_refiner(alpha: f64) -> Result<OracleRefiner> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("oracle alpha must be in [0, 1], got {alpha}")));
    }
    Ok(OracleRefiner { alpha })
}

impl OracleRefiner {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Refiner for OracleRefiner {
    fn predict(
        &self,
        proposals: &[Proposal],
        _feats: &crate::features::FeatureSequence,
        video: &VideoRecord,
        _roi: &RoiConfig,
    ) -> Result<Vec<RefineOutput>> {
        let gts = video.segments();
        proposals
            .iter()
            .map(|p| match best_match(&p.segment, &gts) {
                Some((g, iou)) if iou > 0.0 => {
                    let (dc, dl) = offset_targets(&p.segment, &gts[g])?;
                    let (dc, dl) = (self.alpha * dc, self.alpha * dl);
                    let moved = apply_offsets(&p.segment, dc, dl, video.duration());
                    let iou = gts.iter().map(|g| tiou(&moved, g)).fold(0.0, f64::max);
                    Ok(RefineOutput { dc, dl, iou })
                }
                _ => Ok(RefineOutput { dc: 0.0, dl: 0.0, iou: 0.0 }),
            })
            .collect()
    }
}
