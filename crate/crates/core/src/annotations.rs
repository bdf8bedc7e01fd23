//! Ground-truth annotation database in the ActivityNet-style JSON layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Training,
    Validation,
    Testing,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(Subset::Training),
            "validation" => Ok(Subset::Validation),
            "testing" => Ok(Subset::Testing),
            other => Err(Error::Validation(format!("unknown subset {other:?}"))),
        }
    }
}

/// One labeled action instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    duration_t: f64,
    pub subset: Subset,
    ground_truth: Vec<GroundTruth>,
}

impl VideoRecord {
    /// Builds a record, clamping every ground-truth segment to `[0, duration_t]`.
    /// Segments that collapse to zero length are dropped with a warning.
    pub fn new(
        video_id: impl Into<String>,
        duration_t: f64,
        subset: Subset,
        ground_truth: Vec<GroundTruth>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if !(duration_t.is_finite() && duration_t > 0.0) {
            return Err(Error::Validation(format!(
                "video {video_id}: duration must be positive, got {duration_t}"
            )));
        }
        let ground_truth = ground_truth
            .into_iter()
            .filter_map(|gt| match gt.segment.clamp(0.0, duration_t) {
                Some(segment) => Some(GroundTruth { segment, ..gt }),
                None => {
                    log::warn!(
                        "video {video_id}: dropping segment [{}, {}] outside [0, {duration_t}]",
                        gt.segment.start(),
                        gt.segment.end()
                    );
                    None
                }
            })
            .collect();
        Ok(VideoRecord {
            video_id,
            duration_t,
            subset,
            ground_truth,
        })
    }

    #[inline]
    pub fn duration(&self) -> f64 {
        self.duration_t
    }

    #[inline]
    pub fn ground_truth(&self) -> &[GroundTruth] {
        &self.ground_truth
    }

    /// Ground-truth segments without their labels.
    pub fn segments(&self) -> Vec<Segment> {
        self.ground_truth.iter().map(|g| g.segment).collect()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawDb {
    database: BTreeMap<String, RawVideo>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawVideo {
    duration: f64,
    subset: Subset,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawAnnotation {
    label: String,
    segment: [f64; 2],
}

/// All videos of a dataset keyed (and iterated) by sorted video id, plus the
/// class-name table indexed by class id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationDb {
    videos: BTreeMap<String, VideoRecord>,
    labels: Vec<String>,
}

impl AnnotationDb {
    pub fn new(labels: Vec<String>) -> Self {
        AnnotationDb {
            videos: BTreeMap::new(),
            labels,
        }
    }

    pub fn insert(&mut self, video: VideoRecord) -> Result<()> {
        if let Some(gt) = video
            .ground_truth
            .iter()
            .find(|g| g.class_id >= self.labels.len())
        {
            return Err(Error::Validation(format!(
                "video {}: class id {} outside label table of {} classes",
                video.video_id,
                gt.class_id,
                self.labels.len()
            )));
        }
        self.videos.insert(video.video_id.clone(), video);
        Ok(())
    }

    pub fn videos(&self) -> impl Iterator<Item = &VideoRecord> {
        self.videos.values()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// Total number of ground-truth instances over all videos.
    pub fn n_instances(&self) -> usize {
        self.videos.values().map(|v| v.ground_truth.len()).sum()
    }

    /// Copy restricted to one subset.
    pub fn subset(&self, subset: Subset) -> AnnotationDb {
        AnnotationDb {
            videos: self
                .videos
                .iter()
                .filter(|(_, v)| v.subset == subset)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// Label name -> class id.
    pub fn label_index(&self) -> BTreeMap<String, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect()
    }

    /// Parses the annotation JSON. When no label index is given, class ids are
    /// assigned to the sorted set of label strings.
    pub fn from_json_str(db_json: &str, label_index: Option<&BTreeMap<String, usize>>) -> Result<Self> {
        let raw: RawDb = serde_json::from_str(db_json)
            .map_err(|e| Error::format(format!("annotation JSON: {e}")))?;
        let index: BTreeMap<String, usize> = match label_index {
            Some(idx) => idx.clone(),
            None => raw
                .database
                .values()
                .flat_map(|v| v.annotations.iter().map(|a| a.label.clone()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i))
                .collect(),
        };
        let labels = labels_from_index(&index)?;
        let mut db = AnnotationDb::new(labels);
        for (id, video) in raw.database {
            let mut gts = Vec::with_capacity(video.annotations.len());
            for ann in video.annotations {
                let class_id = *index.get(&ann.label).ok_or_else(|| {
                    Error::Validation(format!("video {id}: label {:?} not in label index", ann.label))
                })?;
                let [s, e] = ann.segment;
                match Segment::new(s, e) {
                    Ok(segment) => gts.push(GroundTruth { class_id, segment }),
                    Err(_) => log::warn!("video {id}: dropping degenerate segment [{s}, {e}]"),
                }
            }
            db.insert(VideoRecord::new(id, video.duration, video.subset, gts)?)?;
        }
        Ok(db)
    }

    pub fn load(path: &Path, labels_path: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index = match labels_path {
            Some(p) => Some(read_label_index(p)?),
            None => None,
        };
        AnnotationDb::from_json_str(&text, index.as_ref())
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawDb {
            database: self
                .videos
                .iter()
                .map(|(id, v)| {
                    let annotations = v
                        .ground_truth
                        .iter()
                        .map(|g| RawAnnotation {
                            label: self.labels[g.class_id].clone(),
                            segment: [g.segment.start(), g.segment.end()],
                        })
                        .collect();
                    (
                        id.clone(),
                        RawVideo {
                            duration: v.duration_t,
                            subset: v.subset,
                            annotations,
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation db serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn save_label_index(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.label_index()).expect("label index serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn labels_from_index(index: &BTreeMap<String, usize>) -> Result<Vec<String>> {
    let n = index.len();
    let mut labels = vec![None; n];
    for (label, &id) in index {
        if id >= n || labels[id].is_some() {
            return Err(Error::Validation(format!(
                "label index must map {n} labels onto ids 0..{n} exactly once; offending label {label:?} -> {id}"
            )));
        }
        labels[id] = Some(label.clone());
    }
    Ok(labels.into_iter().map(|l| l.unwrap()).collect())
}

pub fn read_label_index(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: label index: {e}", path.display())))
}
