//! From raw head tensors to labeled boxes: anchor decoding, score
//! thresholding, IoU and greedy non-maximum suppression.

mod bbox;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ForwardOutput;

pub use bbox::{clamp_to_image, convert_box, iou, BBox, BoxFormat};

/// Default minimum class confidence for an emitted detection.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.6;
/// Default IoU above which a lower-scoring same-class box is suppressed.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("unknown box format {0:?}")]
    UnknownFormat(String),
    #[error("invalid {format} box {coords:?}")]
    InvalidBox { format: BoxFormat, coords: [f64; 4] },
    #[error("head tensor has shape {actual:?}, expected ({expected}, {grid_h}, {grid_w})")]
    HeadShape {
        expected: usize,
        grid_h: usize,
        grid_w: usize,
        actual: Vec<usize>,
    },
    #[error("{anchors} anchors supplied for a head decoding {boxes} boxes per cell")]
    AnchorCount { anchors: usize, boxes: usize },
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("reading names file: {0}")]
    Names(String),
}

/// Prior box size in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub pw: f64,
    pub ph: f64,
}

impl Anchor {
    /// `None` unless both sides are positive and finite.
    pub fn new(pw: f64, ph: f64) -> Option<Self> {
        (pw > 0.0 && ph > 0.0 && pw.is_finite() && ph.is_finite()).then_some(Self { pw, ph })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Network outputs for one anchor at one grid cell, before any transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
    pub objectness_logit: f32,
    pub class_logits: Vec<f32>,
    /// `(cx, cy)`: column and row of the cell.
    pub cell: (usize, usize),
    pub anchor: Anchor,
    /// Input pixels per cell.
    pub stride: usize,
    /// `(columns, rows)` of the head grid.
    pub grid: (usize, usize),
}

/// A decoded prediction with every class score still attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Center in grid units.
    pub center_grid: (f64, f64),
    /// Center in input pixels.
    pub center_px: (f64, f64),
    /// Width and height in input pixels.
    pub size_px: (f64, f64),
    pub objectness: f64,
    /// `objectness * sigmoid(class_logit)` for every class.
    pub class_scores: Vec<f64>,
    /// Center-normalized box relative to the network input.
    pub bbox: BBox,
}

impl Candidate {
    /// `(class_id, score)` of the best class; the lowest index wins ties.
    pub fn best_class(&self) -> Option<(usize, f64)> {
        self.class_scores
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best, (k, s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((k, s)),
            })
    }
}

impl RawPrediction {
    /// Applies `bx = sigmoid(tx) + cx`, `by = sigmoid(ty) + cy`,
    /// `bw = pw * exp(tw)`, `bh = ph * exp(th)` and the per-class sigmoid
    /// scores. Returns `None` when any input or result is non-finite.
    pub fn decode(&self) -> Option<Candidate> {
        let finite = [self.tx, self.ty, self.tw, self.th, self.objectness_logit]
            .iter()
            .chain(&self.class_logits)
            .all(|v| v.is_finite());
        if !finite {
            return None;
        }
        let stride = self.stride as f64;
        let (cx, cy) = (self.cell.0 as f64, self.cell.1 as f64);
        let center_grid = (sigmoid(self.tx as f64) + cx, sigmoid(self.ty as f64) + cy);
        let center_px = (center_grid.0 * stride, center_grid.1 * stride);
        let size_px = (self.anchor.pw * (self.tw as f64).exp(), self.anchor.ph * (self.th as f64).exp());
        if !(size_px.0.is_finite() && size_px.1.is_finite()) {
            return None;
        }
        let objectness = sigmoid(self.objectness_logit as f64);
        let class_scores = self.class_logits.iter().map(|&l| objectness * sigmoid(l as f64)).collect();
        let input_w = (self.grid.0 * self.stride) as f64;
        let input_h = (self.grid.1 * self.stride) as f64;
        let bbox = BBox {
            format: BoxFormat::CenterNorm,
            coords: [center_px.0 / input_w, center_px.1 / input_h, size_px.0 / input_w, size_px.1 / input_h],
        };
        Some(Candidate {
            center_grid,
            center_px,
            size_px,
            objectness,
            class_scores,
            bbox,
        })
    }
}

/// All candidates of one head, plus how many predictions were discarded for
/// non-finite values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodedHead {
    pub candidates: Vec<Candidate>,
    pub dropped_nonfinite: usize,
}

/// Reads every `(cell, anchor)` prediction out of a head tensor, anchor-major
/// in channels: `[tx, ty, tw, th, objectness, class_0 .. class_C)` per anchor.
pub fn raw_predictions(output: &ForwardOutput, anchors: &[Anchor]) -> Result<Vec<RawPrediction>, DecodeError> {
    let scale = &output.scale;
    let boxes = scale.boxes();
    if anchors.len() != boxes {
        return Err(DecodeError::AnchorCount {
            anchors: anchors.len(),
            boxes,
        });
    }
    let per_box = 5 + scale.classes;
    let (gh, gw) = (scale.grid_h, scale.grid_w);
    let expected = boxes * per_box;
    if output.tensor.shape() != [expected, gh, gw] {
        return Err(DecodeError::HeadShape {
            expected,
            grid_h: gh,
            grid_w: gw,
            actual: output.tensor.shape().to_vec(),
        });
    }
    let data = output.tensor.data();
    let plane = gh * gw;
    let mut out = Vec::with_capacity(plane * boxes);
    for cy in 0..gh {
        for cx in 0..gw {
            let at = |ch: usize| data[ch * plane + cy * gw + cx];
            for (a, anchor) in anchors.iter().enumerate() {
                let base = a * per_box;
                out.push(RawPrediction {
                    tx: at(base),
                    ty: at(base + 1),
                    tw: at(base + 2),
                    th: at(base + 3),
                    objectness_logit: at(base + 4),
                    class_logits: (0..scale.classes).map(|k| at(base + 5 + k)).collect(),
                    cell: (cx, cy),
                    anchor: *anchor,
                    stride: scale.stride,
                    grid: (gw, gh),
                });
            }
        }
    }
    Ok(out)
}

/// Decodes one head, ordered by (row, column, anchor).
pub fn decode_head(output: &ForwardOutput, anchors: &[Anchor]) -> Result<DecodedHead, DecodeError> {
    let mut head = DecodedHead::default();
    for raw in raw_predictions(output, anchors)? {
        match raw.decode() {
            Some(c) => head.candidates.push(c),
            None => head.dropped_nonfinite += 1,
        }
    }
    Ok(head)
}

/// Class labels, one per line; the line index is the class id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassNames {
    names: Vec<String>,
}

impl ClassNames {
    pub fn parse(text: &str) -> Self {
        let mut names: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        while names.last().is_some_and(String::is_empty) {
            names.pop();
        }
        Self { names }
    }

    pub fn from_file(path: &Path) -> Result<Self, DecodeError> {
        let text = std::fs::read_to_string(path).map_err(|e| DecodeError::Names(format!("{}: {e}", path.display())))?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Label for `class_id`, or `class<id>` when the file has no such line.
    pub fn name(&self, class_id: usize) -> String {
        match self.names.get(class_id) {
            Some(n) if !n.is_empty() => n.clone(),
            _ => format!("class{class_id}"),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A labeled box that passed the confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub class_name: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<u64>,
}

fn check_threshold(t: f64) -> Result<f64, DecodeError> {
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(DecodeError::Threshold(t))
    }
}

/// Keeps candidates whose best class score is strictly above `threshold`,
/// labeling each with its argmax class.
pub fn confidence_filter(
    candidates: &[Candidate],
    threshold: f64,
    names: &ClassNames,
    frame_id: Option<u64>,
) -> Result<Vec<Detection>, DecodeError> {
    let threshold = check_threshold(threshold)?;
    Ok(candidates
        .iter()
        .filter_map(|c| {
            let (class_id, score) = c.best_class()?;
            (score > threshold).then(|| Detection {
                bbox: c.bbox,
                class_id,
                class_name: names.name(class_id),
                confidence: score,
                frame_id,
            })
        })
        .collect())
}

/// Total order used for suppression and output: confidence descending, then
/// class id, then smaller `xmin`, then smaller `ymin`.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    let (ea, eb) = (a.bbox.extents(), b.bbox.extents());
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(ea[0].total_cmp(&eb[0]))
        .then(ea[1].total_cmp(&eb[1]))
}

/// Greedy per-class non-maximum suppression. A box is dropped when its IoU
/// with a kept box of the same class is strictly greater than `iou_threshold`.
/// Output is sorted by [`detection_order`].
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Result<Vec<Detection>, DecodeError> {
    let iou_threshold = check_threshold(iou_threshold)?;
    detections.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(&k.bbox, &det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::ScaleSpec;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn raw(tx: f32, ty: f32, tw: f32, th: f32, cell: (usize, usize), anchor: Anchor, stride: usize) -> RawPrediction {
        RawPrediction {
            tx,
            ty,
            tw,
            th,
            objectness_logit: 0.0,
            class_logits: vec![0.0],
            cell,
            anchor,
            stride,
            grid: (13, 13),
        }
    }

    fn det(class_id: usize, confidence: f64, b: BBox) -> Detection {
        Detection {
            bbox: b,
            class_id,
            class_name: format!("c{class_id}"),
            confidence,
            frame_id: None,
        }
    }

    #[test]
    fn zero_offsets_center_the_cell() {
        let c = raw(0.0, 0.0, 0.0, 0.0, (0, 0), Anchor::new(10.0, 10.0).unwrap(), 32).decode().unwrap();
        assert_eq!(c.center_grid, (0.5, 0.5));
    }

    #[test]
    fn zero_size_offsets_give_anchor() {
        let c = raw(0.0, 0.0, 0.0, 0.0, (2, 2), Anchor::new(116.0, 90.0).unwrap(), 32).decode().unwrap();
        assert_eq!(c.size_px, (116.0, 90.0));
    }

    #[test]
    fn pixel_center_matches_scalar_formula() {
        let c = raw(0.5, 0.0, 0.0, 0.0, (3, 4), Anchor::new(10.0, 10.0).unwrap(), 32).decode().unwrap();
        let expected = (1.0 / (1.0 + (-0.5f64).exp()) + 3.0) * 32.0;
        assert!((c.center_px.0 - expected).abs() <= 1e-6);
        assert!((c.center_px.1 - 4.5 * 32.0).abs() <= 1e-6);
    }

    #[test]
    fn nonfinite_predictions_are_dropped() {
        let scale = ScaleSpec {
            layer: 0,
            stride: 8,
            grid_h: 1,
            grid_w: 2,
            mask: vec![0],
            anchors: vec![Anchor::new(4.0, 4.0).unwrap()],
            classes: 1,
        };
        let mut data = vec![0.0f32; 6 * 2];
        data[0] = f32::NAN; // tx at cell (0, 0)
        data[2 * 2 + 1] = 1e30; // tw at cell (1, 0): exp overflows
        let output = ForwardOutput {
            tensor: Tensor::new(vec![6, 1, 2], data).unwrap(),
            scale: scale.clone(),
        };
        let head = decode_head(&output, &scale.anchors).unwrap();
        assert_eq!(head.dropped_nonfinite, 2);
        assert!(head.candidates.is_empty());
    }

    #[test]
    fn head_shape_is_checked() {
        let scale = ScaleSpec {
            layer: 0,
            stride: 8,
            grid_h: 2,
            grid_w: 2,
            mask: vec![0],
            anchors: vec![Anchor::new(4.0, 4.0).unwrap()],
            classes: 1,
        };
        let output = ForwardOutput {
            tensor: Tensor::zeros(vec![7, 2, 2]).unwrap(),
            scale: scale.clone(),
        };
        assert!(matches!(decode_head(&output, &scale.anchors), Err(DecodeError::HeadShape { expected: 6, .. })));
        assert!(matches!(decode_head(&output, &[]), Err(DecodeError::AnchorCount { .. })));
    }

    fn candidate(scores: &[f64]) -> Candidate {
        Candidate {
            center_grid: (0.5, 0.5),
            center_px: (16.0, 16.0),
            size_px: (8.0, 8.0),
            objectness: 1.0,
            class_scores: scores.to_vec(),
            bbox: BBox::center_norm(0.5, 0.5, 0.1, 0.1),
        }
    }

    #[test]
    fn filter_threshold_is_strict() {
        let names = ClassNames::parse("person\n");
        let cands = [candidate(&[0.59]), candidate(&[0.61])];
        let kept = confidence_filter(&cands, 0.6, &names, Some(3)).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.61);
        assert_eq!(kept[0].class_name, "person");
        assert_eq!(kept[0].frame_id, Some(3));
        assert_eq!(confidence_filter(&cands, 0.0, &names, None).unwrap().len(), 2);
        let zero = [candidate(&[0.0])];
        assert!(confidence_filter(&zero, 0.0, &names, None).unwrap().is_empty());
        assert!(confidence_filter(&cands, 1.0, &names, None).unwrap().is_empty());
        assert!(confidence_filter(&cands, 1.5, &names, None).is_err());
    }

    #[test]
    fn filter_picks_argmax_class() {
        let names = ClassNames::parse("a\nb\nc\n");
        let kept = confidence_filter(&[candidate(&[0.7, 0.9, 0.9])], 0.5, &names, None).unwrap();
        assert_eq!((kept[0].class_id, kept[0].class_name.as_str()), (1, "b"));
    }

    #[test]
    fn nms_suppresses_same_class_only() {
        // IoU of these two is 0.8: intersection 8, union 10
        let a = BBox::corner(0.0, 0.0, 10.0, 1.0);
        let b = BBox::corner(0.0, 0.0, 8.0, 1.0);
        assert!((iou(&a, &b) - 0.8).abs() < 1e-12);
        let out = nms(vec![det(0, 0.7, b), det(0, 0.9, a)], 0.6).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
        let out = nms(vec![det(0, 0.7, b), det(1, 0.9, a)], 0.6).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].class_id, 1);
    }

    #[test]
    fn nms_keeps_boxes_at_exact_threshold() {
        // intersection 3, union 5 -> IoU 0.6 exactly
        let a = BBox::corner(0.0, 0.0, 4.0, 1.0);
        let b = BBox::corner(1.0, 0.0, 5.0, 1.0);
        assert_eq!(iou(&a, &b), 0.6);
        assert_eq!(nms(vec![det(0, 0.9, a), det(0, 0.8, b)], 0.6).unwrap().len(), 2);
    }

    #[test]
    fn ties_are_ordered_deterministically() {
        let left = BBox::corner(0.0, 0.0, 1.0, 1.0);
        let right = BBox::corner(5.0, 0.0, 6.0, 1.0);
        let out = nms(vec![det(1, 0.5, left), det(0, 0.5, right), det(0, 0.5, left)], 0.6).unwrap();
        let order: Vec<_> = out.iter().map(|d| (d.class_id, d.bbox.coords[0])).collect();
        assert_eq!(order, vec![(0, 0.0), (0, 5.0), (1, 0.0)]);
    }

    #[test]
    fn names_file_parsing() {
        let names = ClassNames::parse("person\nbicycle\ntraffic light\n\n");
        assert_eq!(names.len(), 3);
        assert_eq!(names.name(2), "traffic light");
        assert_eq!(names.name(7), "class7");
        assert_eq!(names.id_of("bicycle"), Some(1));
    }

    fn detections() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0usize..3, 0.0f64..1.0, 0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0),
            0..20,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(c, s, x, y, w, h)| det(c, s, BBox::corner(x, y, x + w, y + h)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_invariants(dets in detections(), thr in 0.0f64..1.0) {
            let once = nms(dets.clone(), thr).unwrap();
            prop_assert!(once.len() <= dets.len());
            for d in &once {
                prop_assert!(dets.contains(d));
            }
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
                }
            }
            prop_assert_eq!(nms(once.clone(), thr).unwrap(), once);
        }
    }
}
