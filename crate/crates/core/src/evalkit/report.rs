//! Per-video tables and per-class AP over records and ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{
    average_precision, match_detections, mean_average_precision, metrics, ConfusionCounts, EvalError, GroundTruth,
    Metrics, ScoredMatch,
};
use crate::decode::{BBox, BoxFormat, ClassNames, Detection};
use crate::pipeline::FrameRecord;

/// How true negatives are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// No box-level true negatives; accuracy reduces to TP / (TP + FP + FN).
    #[default]
    BoxLevel,
    /// Additionally counts one TN per frame with neither ground truth nor detections.
    FrameLevel,
}

impl fmt::Display for AccuracyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BoxLevel => "box-level, TN = 0",
            Self::FrameLevel => "frame-level, TN = frames with no objects and no detections",
        })
    }
}

/// Records of one video.
#[derive(Debug, Clone)]
pub struct VideoInput {
    pub name: String,
    pub records: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoRow {
    pub name: String,
    pub frames: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ground_truths: usize,
    pub detections: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub mode: AccuracyMode,
    pub videos: Vec<VideoRow>,
    pub total: VideoRow,
    pub classes: Vec<ClassAp>,
    /// Percent points, over classes with ground truth.
    pub map: Option<f64>,
    /// Record frames with no ground-truth entry; all their detections are FPs.
    pub frames_without_ground_truth: usize,
    /// Ground-truth frames with no record; all their objects are FNs.
    pub frames_without_records: usize,
    pub failed_frames: usize,
}

/// `"2"` becomes `"Video 2"`; other names are kept.
pub fn format_video_name(name: &str) -> String {
    let trimmed = name.trim();
    if !trimmed.is_empty() && trimmed.bytes().all(|b| b.is_ascii_digit()) {
        format!("Video {trimmed}")
    } else {
        trimmed.to_string()
    }
}

/// Evaluates every video against `gts`. Ground truth without a `video`
/// field applies to every video.
pub fn evaluate(
    videos: &[VideoInput],
    gts: &[GroundTruth],
    names: &ClassNames,
    iou_threshold: f64,
    mode: AccuracyMode,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::with_capacity(videos.len());
    let mut total = ConfusionCounts::default();
    let mut total_frames = 0;
    let mut scored: BTreeMap<usize, Vec<ScoredMatch>> = BTreeMap::new();
    let mut gt_per_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut det_names: BTreeMap<usize, String> = BTreeMap::new();
    let (mut no_gt, mut no_record, mut failed) = (0, 0, 0);

    for video in videos {
        let label = format_video_name(&video.name);
        let mut gt_frames: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
        for g in gts.iter().filter(|g| g.video.as_deref().is_none_or(|v| format_video_name(v) == label)) {
            gt_frames.entry(g.frame_id).or_default().push(g.clone());
            *gt_per_class.entry(g.class_id).or_default() += 1;
        }
        let mut frames: BTreeMap<u64, &FrameRecord> = BTreeMap::new();
        for r in &video.records {
            if frames.insert(r.frame_id, r).is_some() {
                log::warn!("{label}: duplicate frame {}; keeping the later record", r.frame_id);
            }
        }

        let mut counts = ConfusionCounts::default();
        for (&frame_id, record) in &frames {
            if record.error.is_some() {
                failed += 1;
            }
            let frame_gts = gt_frames.get(&frame_id).map(Vec::as_slice).unwrap_or(&[]);
            if !gt_frames.contains_key(&frame_id) {
                no_gt += 1;
            }
            let dets = record_detections(record);
            let m = match_detections(&dets, frame_gts, iou_threshold)?;
            counts += m.counts;
            if mode == AccuracyMode::FrameLevel && frame_gts.is_empty() && dets.is_empty() {
                counts.tn += 1;
            }
            for e in &m.matches {
                let d = &dets[e.detection];
                det_names.entry(d.class_id).or_insert_with(|| d.class_name.clone());
                scored.entry(d.class_id).or_default().push(ScoredMatch {
                    confidence: d.confidence,
                    true_positive: e.ground_truth.is_some(),
                });
            }
        }
        for (frame_id, missing) in &gt_frames {
            if !frames.contains_key(frame_id) {
                no_record += 1;
                counts.fn_ += missing.len() as u64;
            }
        }
        total += counts;
        total_frames += frames.len();
        rows.push(VideoRow {
            name: label,
            frames: frames.len(),
            counts,
            metrics: metrics(&counts),
        });
    }

    let class_ids: BTreeSet<usize> = gt_per_class.keys().chain(scored.keys()).copied().collect();
    let classes: Vec<ClassAp> = class_ids
        .into_iter()
        .map(|c| {
            let ground_truths = gt_per_class.get(&c).copied().unwrap_or(0);
            let list = scored.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            let name = match det_names.get(&c) {
                Some(n) if !n.is_empty() && names.len() <= c => n.clone(),
                _ => names.name(c),
            };
            ClassAp {
                class_id: c,
                name,
                ground_truths,
                detections: list.len(),
                ap: average_precision(list, ground_truths),
            }
        })
        .collect();
    let map = mean_average_precision(&classes.iter().map(|c| c.ap).collect::<Vec<_>>());

    Ok(EvalReport {
        iou_threshold,
        mode,
        videos: rows,
        total: VideoRow {
            name: "All".into(),
            frames: total_frames,
            counts: total,
            metrics: metrics(&total),
        },
        classes,
        map,
        frames_without_ground_truth: no_gt,
        frames_without_records: no_record,
        failed_frames: failed,
    })
}

fn record_detections(record: &FrameRecord) -> Vec<Detection> {
    record
        .detections
        .iter()
        .filter_map(|d| match BBox::new(BoxFormat::CornerPx, d.bbox) {
            Ok(bbox) => Some(Detection {
                bbox,
                class_id: d.class_id,
                class_name: d.class_name.clone(),
                confidence: d.confidence,
                frame_id: Some(record.frame_id),
            }),
            Err(e) => {
                log::warn!("frame {}: ignoring detection: {e}", record.frame_id);
                None
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.3}"))
}

fn row(f: &mut fmt::Formatter<'_>, r: &VideoRow) -> fmt::Result {
    writeln!(
        f,
        "{} | {} | {} | {} | {}",
        r.name,
        r.frames,
        cell(r.metrics.accuracy),
        cell(r.metrics.precision),
        cell(r.metrics.recall)
    )
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matching: IoU > {:.2}; accuracy: {}", self.iou_threshold, self.mode)?;
        writeln!(f)?;
        writeln!(f, "Video | Frames | Accuracy | Precision | Recall")?;
        for r in &self.videos {
            row(f, r)?;
        }
        if self.videos.len() > 1 {
            row(f, &self.total)?;
        }
        if self.total.frames == 0 {
            writeln!(f, "notice: no frames evaluated")?;
        }
        let c = &self.total.counts;
        writeln!(f, "TP {} | FP {} | FN {} | TN {}", c.tp, c.fp, c.fn_, c.tn)?;

        writeln!(f)?;
        writeln!(f, "Class | Ground truth | Detections | AP")?;
        for class in &self.classes {
            writeln!(
                f,
                "{} | {} | {} | {}",
                class.name,
                class.ground_truths,
                class.detections,
                cell(class.ap)
            )?;
        }
        let counted = self.classes.iter().filter(|c| c.ap.is_some()).count();
        match self.map {
            Some(m) => writeln!(f, "mAP: {m:.2} over {counted} classes")?,
            None => writeln!(f, "mAP: undefined (no class has ground truth)")?,
        }
        for class in self.classes.iter().filter(|c| c.ap.is_none()) {
            writeln!(
                f,
                "notice: class {} ({}) has no ground truth and is excluded from mAP",
                class.class_id, class.name
            )?;
        }

        writeln!(f)?;
        writeln!(f, "Frames absent from ground truth: {}", self.frames_without_ground_truth)?;
        writeln!(f, "Ground-truth frames without records: {}", self.frames_without_records)?;
        write!(f, "Frames that failed detection: {}", self.failed_frames)?;
        writeln!(f)
    }
}
