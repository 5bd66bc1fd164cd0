use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DecodeError;

/// Coordinate convention of a [`BBox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFormat {
    /// `(bx, by, bw, bh)`: center and size as fractions of the image.
    CenterNorm,
    /// `(x, y, w, h)`: top-left corner and size in pixels.
    TopLeftPx,
    /// `(xmin, ymin, xmax, ymax)` in pixels.
    CornerPx,
}

impl BoxFormat {
    pub fn name(self) -> &'static str {
        match self {
            Self::CenterNorm => "center_norm",
            Self::TopLeftPx => "topleft_px",
            Self::CornerPx => "corner_px",
        }
    }
}

impl fmt::Display for BoxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoxFormat {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "center_norm" | "yolo" => Ok(Self::CenterNorm),
            "topleft_px" | "coco" => Ok(Self::TopLeftPx),
            "corner_px" | "xyxy" => Ok(Self::CornerPx),
            other => Err(DecodeError::UnknownFormat(other.to_string())),
        }
    }
}

/// An axis-aligned box in one of three coordinate conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub format: BoxFormat,
    pub coords: [f64; 4],
}

impl BBox {
    /// Validating constructor: extents must be non-negative (corner boxes must
    /// be ordered) and every coordinate finite.
    pub fn new(format: BoxFormat, coords: [f64; 4]) -> Result<Self, DecodeError> {
        let ok = coords.iter().all(|c| c.is_finite())
            && match format {
                BoxFormat::CornerPx => coords[0] <= coords[2] && coords[1] <= coords[3],
                BoxFormat::TopLeftPx | BoxFormat::CenterNorm => coords[2] >= 0.0 && coords[3] >= 0.0,
            };
        if ok {
            Ok(Self { format, coords })
        } else {
            Err(DecodeError::InvalidBox { format, coords })
        }
    }

    /// Panics if the box is invalid; see [`BBox::new`].
    pub fn corner(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self::new(BoxFormat::CornerPx, [xmin, ymin, xmax, ymax]).expect("invalid corner box")
    }

    /// Panics if the box is invalid; see [`BBox::new`].
    pub fn top_left(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(BoxFormat::TopLeftPx, [x, y, w, h]).expect("invalid top-left box")
    }

    /// Panics if the box is invalid; see [`BBox::new`].
    pub fn center_norm(bx: f64, by: f64, bw: f64, bh: f64) -> Self {
        Self::new(BoxFormat::CenterNorm, [bx, by, bw, bh]).expect("invalid center box")
    }

    /// `(xmin, ymin, xmax, ymax)` in the box's own units: pixels for the pixel
    /// formats, image fractions for `CenterNorm`.
    pub fn extents(&self) -> [f64; 4] {
        let [a, b, c, d] = self.coords;
        match self.format {
            BoxFormat::CornerPx => [a, b, c, d],
            BoxFormat::TopLeftPx => [a, b, a + c, b + d],
            BoxFormat::CenterNorm => [a - c / 2.0, b - d / 2.0, a + c / 2.0, b + d / 2.0],
        }
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.extents();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn is_normalized(&self) -> bool {
        self.format == BoxFormat::CenterNorm
    }
}

/// Intersection over union. Both boxes must share a coordinate space (both
/// normalized or both in pixels of the same image).
///
/// Zero-area unions give 0, except for two identical degenerate boxes, which give 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    debug_assert_eq!(a.is_normalized(), b.is_normalized(), "iou across coordinate spaces");
    let [ax0, ay0, ax1, ay1] = a.extents();
    let [bx0, by0, bx1, by1] = b.extents();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a.extents() == b.extents() { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Converts `bbox` to `target`. `image_size` is `(width, height)` in pixels
/// and scales between normalized and pixel coordinates.
pub fn convert_box(bbox: &BBox, target: BoxFormat, image_size: (f64, f64)) -> BBox {
    if bbox.format == target {
        return *bbox;
    }
    let (w, h) = image_size;
    // top-left pixel form is the pivot between the other two
    let [x, y, bw, bh] = match bbox.format {
        BoxFormat::TopLeftPx => bbox.coords,
        BoxFormat::CornerPx => {
            let [x0, y0, x1, y1] = bbox.coords;
            [x0, y0, x1 - x0, y1 - y0]
        }
        BoxFormat::CenterNorm => {
            let [cx, cy, nw, nh] = bbox.coords;
            [(cx - nw / 2.0) * w, (cy - nh / 2.0) * h, nw * w, nh * h]
        }
    };
    let coords = match target {
        BoxFormat::TopLeftPx => [x, y, bw, bh],
        BoxFormat::CornerPx => [x, y, x + bw, y + bh],
        BoxFormat::CenterNorm => [(x + bw / 2.0) / w, (y + bh / 2.0) / h, bw / w, bh / h],
    };
    BBox { format: target, coords }
}

/// Clamps a pixel-space box to `[0, width] x [0, height]`, returning corners.
pub fn clamp_to_image(bbox: &BBox, image_size: (f64, f64)) -> BBox {
    let corner = convert_box(bbox, BoxFormat::CornerPx, image_size);
    let [x0, y0, x1, y1] = corner.coords;
    let (w, h) = image_size;
    let cx = |v: f64| v.clamp(0.0, w);
    let cy = |v: f64| v.clamp(0.0, h);
    BBox {
        format: BoxFormat::CornerPx,
        coords: [cx(x0), cy(y0), cx(x1).max(cx(x0)), cy(y1).max(cy(y0))],
    }
}
