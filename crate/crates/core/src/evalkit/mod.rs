//! Detection-quality evaluation: greedy IoU matching against ground truth,
//! confusion counts, accuracy/precision/recall, and all-point average
//! precision.

mod report;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::AddAssign;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{iou, BBox, BoxFormat, Detection};

pub use report::{evaluate, format_video_name, AccuracyMode, ClassAp, EvalReport, VideoInput, VideoRow};

/// Matching threshold; a detection must overlap strictly more than this.
pub const MATCH_IOU_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("IoU threshold {0} outside [0, 1]")]
    Threshold(f64),
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frame_id: u64,
    pub class_id: usize,
    /// Corner pixels.
    pub bbox: BBox,
    /// Video the frame belongs to, if the file groups by video.
    pub video: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthLine {
    frame_id: u64,
    class_id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video: Option<String>,
}

impl GroundTruth {
    pub fn new(frame_id: u64, class_id: usize, corners: [f64; 4], video: Option<String>) -> Result<Self, String> {
        let bbox = BBox::new(BoxFormat::CornerPx, corners).map_err(|e| e.to_string())?;
        Ok(Self {
            frame_id,
            class_id,
            bbox,
            video,
        })
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let raw: GroundTruthLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        Self::new(raw.frame_id, raw.class_id, raw.bbox, raw.video)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&GroundTruthLine {
            frame_id: self.frame_id,
            class_id: self.class_id,
            bbox: self.bbox.extents(),
            video: self.video.clone(),
        })
        .expect("ground truth serializes")
    }
}

/// Parsed ground-truth file. Unparseable lines are counted, not fatal.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthFile {
    pub entries: Vec<GroundTruth>,
    pub malformed: usize,
    pub lines: usize,
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthFile, EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = GroundTruthFile::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        match GroundTruth::parse_line(&line) {
            Ok(gt) => out.entries.push(gt),
            Err(e) => {
                log::warn!("{}:{}: skipping malformed ground truth: {e}", path.display(), i + 1);
                out.malformed += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEntry {
    /// Index into the detection slice passed to [`match_detections`].
    pub detection: usize,
    /// Matched ground truth index, `None` for a false positive.
    pub ground_truth: Option<usize>,
    /// Best same-class IoU seen among ground truths still unmatched.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub counts: ConfusionCounts,
    /// In the order detections were considered.
    pub matches: Vec<MatchEntry>,
}

/// Greedy matching within one frame. Detections are taken by confidence,
/// highest first (ties keep input order); each claims the unmatched
/// same-class ground truth with the highest IoU when that IoU is strictly
/// above `iou_threshold`. TN stays 0.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<FrameMatch, EvalError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(EvalError::Threshold(iou_threshold));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut taken = vec![false; gts.len()];
    let mut counts = ConfusionCounts::default();
    let mut matches = Vec::with_capacity(dets.len());
    for d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != det.class_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let iou_seen = best.map_or(0.0, |(_, v)| v);
        let hit = best.filter(|&(_, v)| v > iou_threshold).map(|(g, _)| g);
        match hit {
            Some(g) => {
                taken[g] = true;
                counts.tp += 1;
            }
            None => counts.fp += 1,
        }
        matches.push(MatchEntry {
            detection: d,
            ground_truth: hit,
            iou: iou_seen,
        });
    }
    counts.fn_ = taken.iter().filter(|t| !**t).count() as u64;
    Ok(FrameMatch { counts, matches })
}

/// Ratios with zero denominators are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

/// A detection's confidence and whether it was a true positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub confidence: f64,
    pub true_positive: bool,
}

/// All-point interpolated AP for one class, or `None` without ground truth.
///
/// Detections with equal confidence enter the ranking together, so the
/// result depends only on the ordering of distinct scores.
pub fn average_precision(scored: &[ScoredMatch], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    // (recall, precision) after each tie group
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == score {
            tp += sorted[i].true_positive as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / seen as f64));
    }

    // precision envelope, right to left
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Mean of the defined per-class APs, in percent points.
pub fn mean_average_precision(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| 100.0 * defined.iter().sum::<f64>() / defined.len() as f64)
}
