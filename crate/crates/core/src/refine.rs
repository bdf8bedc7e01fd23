//! Cascade refinement: each stage pools RoI features for every proposal, asks a
//! refiner for (center shift, log-length change, IoU) and moves the proposal.
//! Only the last stage's output is returned.

use serde::{Deserialize, Serialize};

use crate::annotations::VideoRecord;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::linalg::{cholesky, cholesky_solve, Matrix};
use crate::proposal::{sort_ranked, Proposal, ProposalSet};
use crate::roi::roi_align_1d;
use crate::segment::Segment;
use crate::targets::cascade_assign;

/// Positive-label IoU thresholds of the three default stages.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

/// Bounds applied to IoU targets before the logit transform.
const IOU_CLIP: f64 = 1e-4;

/// Raw endpoints after shifting the center by `dc·length` and scaling the
/// length by `exp(dl)`.
#[inline]
pub fn shift_endpoints(s: &Segment, dc: f64, dl: f64) -> (f64, f64) {
    let pl = s.length();
    let center = s.center() + dc * pl;
    let half = 0.5 * pl * dl.exp();
    (center - half, center + half)
}

/// Inverse of [`crate::targets::offset_targets`], clamped to `[0, clamp_to]`.
/// Results shorter than `clamp_to / 1000` are widened to that length.
pub fn apply_offsets(s: &Segment, dc: f64, dl: f64, clamp_to: f64) -> Segment {
    let eps = clamp_to / 1000.0;
    let (a, b) = shift_endpoints(s, dc, dl);
    let (mut lo, mut hi) = (a.clamp(0.0, clamp_to), b.clamp(0.0, clamp_to));
    if !(hi - lo >= eps) {
        let center = (0.5 * (lo + hi)).clamp(0.5 * eps, clamp_to - 0.5 * eps);
        lo = center - 0.5 * eps;
        hi = center + 0.5 * eps;
    }
    Segment::new(lo, hi).expect("clamped segment has positive length")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// RoI pooling parameters shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiConfig {
    pub bins: usize,
    pub samples_per_bin: usize,
    /// Fraction of the proposal length added on each side before pooling.
    pub context_ratio: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            bins: 16,
            samples_per_bin: 2,
            context_ratio: 0.5,
        }
    }
}

impl RoiConfig {
    /// Length of the vector produced by [`pool_proposal`].
    pub fn input_dim(&self, channels: usize) -> usize {
        channels * self.bins + 2
    }
}

/// RoI-aligned features of the context-expanded proposal, followed by its
/// center and length as fractions of the video duration.
pub fn pool_proposal(seg: &Segment, feats: &FeatureSequence, duration: f64, roi: &RoiConfig) -> Result<Vec<f64>> {
    if !(roi.context_ratio >= 0.0) {
        return Err(Error::contract("context ratio must be non-negative"));
    }
    let pad = roi.context_ratio * seg.length();
    let scale = feats.length() as f64 / duration;
    let region = ((seg.start() - pad) * scale, (seg.end() + pad) * scale);
    let mut v = roi_align_1d(feats, region, roi.bins, roi.samples_per_bin)?;
    v.push(seg.center() / duration);
    v.push(seg.length() / duration);
    Ok(v)
}

/// Output of a refiner for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutput {
    pub dc: f64,
    pub dl: f64,
    /// Predicted IoU in `[0, 1]`.
    pub iou: f64,
}

/// Anything that can predict offsets and IoU for a batch of proposals.
pub trait Refiner: Send + Sync {
    fn predict(
        &self,
        proposals: &[Proposal],
        feats: &FeatureSequence,
        video: &VideoRecord,
        roi: &RoiConfig,
    ) -> Result<Vec<RefineOutput>>;
}

/// Affine head mapping a pooled RoI vector to `(dc, dl, iou_logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    weights: Matrix,
    bias: [f64; 3],
}

impl RefinerParams {
    pub fn new(weights: Matrix, bias: [f64; 3]) -> Result<Self> {
        if weights.rows() != 3 {
            return Err(Error::format(format!("refiner weights need 3 rows, got {}", weights.rows())));
        }
        if weights.data().iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::format("refiner parameters must be finite"));
        }
        Ok(RefinerParams { weights, bias })
    }

    /// Zero weights with the given bias.
    pub fn constant(input_dim: usize, bias: [f64; 3]) -> Self {
        RefinerParams {
            weights: Matrix::zeros(3, input_dim),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> [f64; 3] {
        self.bias
    }

    /// `(dc, dl, iou_logit)` for one pooled vector.
    pub fn apply(&self, x: &[f64]) -> [f64; 3] {
        let y = self.weights.mul_vec(x);
        [y[0] + self.bias[0], y[1] + self.bias[1], y[2] + self.bias[2]]
    }
}

impl Refiner for RefinerParams {
    fn predict(
        &self,
        proposals: &[Proposal],
        feats: &FeatureSequence,
        video: &VideoRecord,
        roi: &RoiConfig,
    ) -> Result<Vec<RefineOutput>> {
        let want = roi.input_dim(feats.channels());
        if want != self.input_dim() {
            return Err(Error::format(format!(
                "refiner expects {} inputs but {} channels x {} bins + 2 give {want}",
                self.input_dim(),
                feats.channels(),
                roi.bins
            )));
        }
        proposals
            .iter()
            .map(|p| {
                let x = pool_proposal(&p.segment, feats, video.duration(), roi)?;
                let [dc, dl, z] = self.apply(&x);
                Ok(RefineOutput {
                    dc,
                    dl,
                    iou: sigmoid(z),
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RefinerParamsJson {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl RefinerParams {
    fn to_json_repr(&self) -> RefinerParamsJson {
        RefinerParamsJson {
            rows: 3,
            cols: self.weights.cols(),
            weights: self.weights.data().to_vec(),
            bias: self.bias.to_vec(),
        }
    }

    fn from_json_repr(raw: RefinerParamsJson) -> Result<Self> {
        if raw.rows != 3 || raw.bias.len() != 3 {
            return Err(Error::format("refiner JSON needs rows = 3 and a 3-element bias"));
        }
        let weights = Matrix::new(raw.rows, raw.cols, raw.weights)?;
        RefinerParams::new(weights, [raw.bias[0], raw.bias[1], raw.bias[2]])
    }

    /// JSON object with a shape header and row-major weights.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_repr()).expect("refiner serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RefinerParamsJson =
            serde_json::from_str(text).map_err(|e| Error::format(format!("refiner JSON: {e}")))?;
        RefinerParams::from_json_repr(raw)
    }

    /// A whole cascade as a JSON array, one object per stage.
    pub fn stages_to_json(stages: &[RefinerParams]) -> String {
        let raw: Vec<_> = stages.iter().map(RefinerParams::to_json_repr).collect();
        serde_json::to_string_pretty(&raw).expect("refiner serializes")
    }

    /// Accepts either a single object or an array of stage objects.
    pub fn stages_from_json(text: &str) -> Result<Vec<RefinerParams>> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::format(format!("refiner JSON: {e}")))?;
        let raws: Vec<RefinerParamsJson> = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|one| vec![one])
        }
        .map_err(|e| Error::format(format!("refiner JSON: {e}")))?;
        raws.into_iter().map(RefinerParams::from_json_repr).collect()
    }
}

/// How a stage turns the refiner's IoU into the new proposal score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreFusion {
    /// New score is the predicted IoU.
    #[default]
    IouOnly,
    /// New score is the predicted IoU times the incoming score.
    Multiply,
}

pub struct CascadeStage {
    pub refiner: Box<dyn Refiner>,
    pub iou_threshold: f64,
}

pub struct CascadeConfig {
    stages: Vec<CascadeStage>,
    pub roi: RoiConfig,
    pub fusion: ScoreFusion,
    /// Drop refined proposals scoring below this.
    pub min_score: Option<f64>,
}

impl CascadeConfig {
    /// Validates that thresholds lie in (0, 1) and strictly increase.
    pub fn new(stages: Vec<CascadeStage>, roi: RoiConfig) -> Result<Self> {
        for w in stages.windows(2) {
            if !(w[1].iou_threshold > w[0].iou_threshold) {
                return Err(Error::Validation(format!(
                    "cascade thresholds must strictly increase, got {} then {}",
                    w[0].iou_threshold, w[1].iou_threshold
                )));
            }
        }
        if let Some(s) = stages.iter().find(|s| !(s.iou_threshold > 0.0 && s.iou_threshold < 1.0)) {
            return Err(Error::Validation(format!(
                "cascade threshold {} outside (0, 1)",
                s.iou_threshold
            )));
        }
        Ok(CascadeConfig {
            stages,
            roi,
            fusion: ScoreFusion::IouOnly,
            min_score: None,
        })
    }

    /// One stage per refiner, paired with [`DEFAULT_THRESHOLDS`] when three are given.
    pub fn with_thresholds(refiners: Vec<Box<dyn Refiner>>, thresholds: &[f64], roi: RoiConfig) -> Result<Self> {
        if refiners.len() != thresholds.len() {
            return Err(Error::Validation(format!(
                "{} refiners but {} thresholds",
                refiners.len(),
                thresholds.len()
            )));
        }
        let stages = refiners
            .into_iter()
            .zip(thresholds)
            .map(|(refiner, &iou_threshold)| CascadeStage { refiner, iou_threshold })
            .collect();
        CascadeConfig::new(stages, roi)
    }

    pub fn stages(&self) -> &[CascadeStage] {
        &self.stages
    }
}

/// Runs one refiner over every proposal. Order is preserved.
pub fn refine_stage(
    ps: &[Proposal],
    refiner: &dyn Refiner,
    feats: &FeatureSequence,
    roi: &RoiConfig,
    fusion: ScoreFusion,
    video: &VideoRecord,
) -> Result<ProposalSet> {
    let outputs = refiner.predict(ps, feats, video, roi)?;
    if outputs.len() != ps.len() {
        return Err(Error::format(format!(
            "refiner returned {} outputs for {} proposals",
            outputs.len(),
            ps.len()
        )));
    }
    ps.iter()
        .zip(outputs)
        .map(|(p, out)| {
            if !(out.dc.is_finite() && out.dl.is_finite() && out.iou.is_finite()) {
                return Err(Error::Numerical(format!(
                    "refiner produced non-finite output ({}, {}, {}) for video {}",
                    out.dc, out.dl, out.iou, video.video_id
                )));
            }
            let iou = out.iou.clamp(0.0, 1.0);
            let score = match fusion {
                ScoreFusion::IouOnly => iou,
                ScoreFusion::Multiply => iou * p.score,
            };
            Ok(Proposal {
                segment: apply_offsets(&p.segment, out.dc, out.dl, video.duration()),
                score,
                class_id: p.class_id,
                stage: p.stage + 1,
            })
        })
        .collect()
}

/// Applies every stage in turn and returns the final proposals, ranked.
pub fn cascade_refine(
    ps: &[Proposal],
    cfg: &CascadeConfig,
    feats: &FeatureSequence,
    video: &VideoRecord,
) -> Result<ProposalSet> {
    let mut current = ps.to_vec();
    for stage in &cfg.stages {
        current = refine_stage(&current, stage.refiner.as_ref(), feats, &cfg.roi, cfg.fusion, video)?;
    }
    if let Some(min) = cfg.min_score {
        current.retain(|p| p.score >= min);
    }
    sort_ranked(&mut current);
    Ok(current)
}

/// One training example for [`fit_linear_refiner`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerSample {
    pub features: Vec<f64>,
    /// `(dc, dl)` target; samples without one only train the IoU output.
    pub offsets: Option<(f64, f64)>,
    pub iou: f64,
}

fn ridge_fit(rows: &[&[f64]], targets: &[Vec<f64>], ridge: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let p = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x / n;
        }
    }
    let centered: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let xc = Matrix::new(rows.len(), p, centered)?;
    let mut gram = xc.gram_cols();
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let chol = cholesky(&gram).map_err(|_| {
        Error::Numerical(format!(
            "refiner normal equations are singular (ridge = {ridge}); use ridge > 0"
        ))
    })?;
    let mut weights = Vec::with_capacity(targets.len());
    let mut biases = Vec::with_capacity(targets.len());
    for y in targets {
        let ybar = y.iter().sum::<f64>() / n;
        let mut rhs = vec![0.0; p];
        for (k, yk) in y.iter().enumerate() {
            let row = xc.row(k);
            for (r, x) in rhs.iter_mut().zip(row) {
                *r += x * (yk - ybar);
            }
        }
        let w = cholesky_solve(&chol, &rhs);
        let b = ybar - w.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
        weights.push(w);
        biases.push(b);
    }
    Ok((weights, biases))
}

/// Ridge least squares for the affine head, with an unpenalized bias. The IoU
/// output is fitted on logits of targets clipped to `[1e-4, 1 - 1e-4]`.
pub fn fit_linear_refiner(samples: &[RefinerSample], ridge: f64) -> Result<RefinerParams> {
    let Some(first) = samples.first() else {
        return Err(Error::contract("refiner fitting needs at least one sample"));
    };
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::contract(format!("ridge must be >= 0, got {ridge}")));
    }
    let p = first.features.len();
    if let Some(bad) = samples.iter().position(|s| s.features.len() != p) {
        return Err(Error::contract(format!(
            "sample {bad} has {} features, expected {p}",
            samples[bad].features.len()
        )));
    }
    let mut weights = Matrix::zeros(3, p);
    let mut bias = [0.0; 3];

    let with_offsets: Vec<&RefinerSample> = samples.iter().filter(|s| s.offsets.is_some()).collect();
    if !with_offsets.is_empty() {
        let rows: Vec<&[f64]> = with_offsets.iter().map(|s| s.features.as_slice()).collect();
        let dc: Vec<f64> = with_offsets.iter().map(|s| s.offsets.unwrap().0).collect();
        let dl: Vec<f64> = with_offsets.iter().map(|s| s.offsets.unwrap().1).collect();
        let (w, b) = ridge_fit(&rows, &[dc, dl], ridge)?;
        for k in 0..2 {
            for j in 0..p {
                weights[(k, j)] = w[k][j];
            }
            bias[k] = b[k];
        }
    }

    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let z: Vec<f64> = samples
        .iter()
        .map(|s| logit(s.iou.clamp(IOU_CLIP, 1.0 - IOU_CLIP)))
        .collect();
    let (w, b) = ridge_fit(&rows, &[z], ridge)?;
    for j in 0..p {
        weights[(2, j)] = w[0][j];
    }
    bias[2] = b[0];
    RefinerParams::new(weights, bias)
}

/// Training samples for one stage: every proposal contributes an IoU target,
/// positives at `iou_threshold` also contribute offsets.
pub fn stage_samples(
    ps: &[Proposal],
    feats: &FeatureSequence,
    video: &VideoRecord,
    roi: &RoiConfig,
    iou_threshold: f64,
) -> Result<Vec<RefinerSample>> {
    let gts = video.segments();
    let assignments = cascade_assign(ps, &gts, iou_threshold)?;
    ps.iter()
        .zip(assignments)
        .map(|(p, a)| {
            Ok(RefinerSample {
                features: pool_proposal(&p.segment, feats, video.duration(), roi)?,
                offsets: a.offset_target,
                iou: a.target_iou,
            })
        })
        .collect()
}

/// One video's worth of cascade training data.
pub struct TrainingVideo<'a> {
    pub proposals: ProposalSet,
    pub feats: &'a FeatureSequence,
    pub video: &'a VideoRecord,
}

/// Fits one linear head per threshold, each on the proposals produced by the
/// heads fitted before it.
pub fn fit_cascade(
    training: &[TrainingVideo<'_>],
    thresholds: &[f64],
    roi: &RoiConfig,
    ridge: f64,
) -> Result<Vec<RefinerParams>> {
    let mut current: Vec<ProposalSet> = training.iter().map(|t| t.proposals.clone()).collect();
    let mut fitted = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut samples = Vec::new();
        for (t, ps) in training.iter().zip(&current) {
            samples.extend(stage_samples(ps, t.feats, t.video, roi, thr)?);
        }
        let params = fit_linear_refiner(&samples, ridge)?;
        for (t, ps) in training.iter().zip(current.iter_mut()) {
            *ps = refine_stage(ps, &params, t.feats, roi, ScoreFusion::IouOnly, t.video)?;
        }
        fitted.push(params);
    }
    Ok(fitted)
}
