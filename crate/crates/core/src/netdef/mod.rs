//! Darknet network definitions: text parsing, shape inference and the
//! parameterized [`NetworkGraph`].

mod graph;
mod weights;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::decode::Anchor;
use crate::tensor::{Activation, ConvParams, LEAKY_SLOPE};

pub use graph::{NetworkGraph, ScaleSpec};
pub use weights::{expected_float_count, load_weights, write_weights, WeightsError, WeightsHeader};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetDefError {
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("layer {layer}: missing mandatory attribute `{attribute}`")]
    MissingAttribute { layer: usize, attribute: &'static str },
    #[error("layer {layer}: attribute `{attribute}` = {value:?}: {detail}")]
    InvalidAttribute {
        layer: usize,
        attribute: &'static str,
        value: String,
        detail: String,
    },
    #[error("layer {layer}: reference {reference} does not resolve to an earlier layer")]
    DanglingReference { layer: usize, reference: i64 },
    #[error("layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("layer {layer}: detection head expects {expected} input channels (B*(5+C)), preceding layer yields {actual}")]
    HeadChannels { layer: usize, expected: usize, actual: usize },
    #[error("kernel size needs at least one box and one class (got B={boxes}, C={classes})")]
    KernelSize { boxes: usize, classes: usize },
    #[error("layer {layer}: parameters do not match the definition: {detail}")]
    Params { layer: usize, detail: String },
    #[error("expected {expected} conv parameter sets, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("full-network profile: {0}")]
    Profile(String),
}

pub type Result<T> = std::result::Result<T, NetDefError>;

/// Filter count of a detection head's 1x1 conv: `B * (5 + C)`, four box
/// offsets plus objectness plus `C` class scores for each of `B` boxes.
pub fn kernel_size(boxes: usize, classes: usize) -> Result<usize> {
    if boxes == 0 || classes == 0 {
        return Err(NetDefError::KernelSize { boxes, classes });
    }
    Ok(boxes * (5 + classes))
}

/// `(channels, height, width)` of the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 416,
            width: 416,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Convolutional,
    Shortcut,
    Route,
    Upsample,
    Yolo,
}

impl LayerKind {
    fn from_section(name: &str) -> Option<Self> {
        Some(match name {
            "convolutional" | "conv" => Self::Convolutional,
            "shortcut" => Self::Shortcut,
            "route" => Self::Route,
            "upsample" => Self::Upsample,
            "yolo" => Self::Yolo,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Convolutional => "convolutional",
            Self::Shortcut => "shortcut",
            Self::Route => "route",
            Self::Upsample => "upsample",
            Self::Yolo => "yolo",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    /// Effective zero padding (`pad=1` means `size / 2`).
    pub padding: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YoloSpec {
    /// Indices into `anchors` used by this head.
    pub mask: Vec<usize>,
    /// Every anchor declared for the network; the head uses the masked subset.
    pub anchors: Vec<Anchor>,
    pub classes: usize,
}

impl YoloSpec {
    pub fn head_anchors(&self) -> Vec<Anchor> {
        self.mask.iter().map(|&m| self.anchors[m]).collect()
    }

    pub fn boxes(&self) -> usize {
        self.mask.len()
    }
}

/// Typed layer configuration. References are absolute layer indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Convolutional(ConvSpec),
    Shortcut { from: usize, activation: Activation },
    Route { layers: Vec<usize> },
    Upsample { stride: usize },
    Yolo(YoloSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub layer: Layer,
    /// Every `key=value` pair of the section, including keys the engine ignores.
    pub attributes: BTreeMap<String, String>,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self.layer {
            Layer::Convolutional(_) => LayerKind::Convolutional,
            Layer::Shortcut { .. } => LayerKind::Shortcut,
            Layer::Route { .. } => LayerKind::Route,
            Layer::Upsample { .. } => LayerKind::Upsample,
            Layer::Yolo(_) => LayerKind::Yolo,
        }
    }

    /// Earlier layers whose activations this layer reads.
    pub fn inputs(&self) -> Vec<usize> {
        let prev = self.index.checked_sub(1);
        match &self.layer {
            Layer::Route { layers } => layers.clone(),
            Layer::Shortcut { from, .. } => prev.into_iter().chain([*from]).collect(),
            _ => prev.into_iter().collect(),
        }
    }
}

/// A parsed definition file: input geometry plus the ordered layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetDefinition {
    pub input_shape: InputShape,
    pub layers: Vec<LayerSpec>,
}

struct Section {
    name: String,
    line: usize,
    attributes: BTreeMap<String, String>,
}

/// Parses Darknet definition text. A leading `[net]` section supplies the
/// input geometry and is not part of the layer list.
pub fn parse_netdef(text: &str) -> Result<NetDefinition> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| NetDefError::Syntax {
                line: line_no,
                detail: format!("unterminated section header {line:?}"),
            })?;
            sections.push(Section {
                name: name.trim().to_ascii_lowercase(),
                line: line_no,
                attributes: BTreeMap::new(),
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(NetDefError::Syntax {
                line: line_no,
                detail: format!("expected key=value, got {line:?}"),
            });
        };
        let Some(section) = sections.last_mut() else {
            return Err(NetDefError::Syntax {
                line: line_no,
                detail: "attribute outside of any section".into(),
            });
        };
        section.attributes.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut iter = sections.into_iter().peekable();
    let mut input_shape = InputShape::default();
    if let Some(first) = iter.peek() {
        if matches!(first.name.as_str(), "net" | "network") {
            let net = iter.next().unwrap();
            input_shape = parse_input(&net)?;
        }
    }

    let mut layers = Vec::new();
    for (index, section) in iter.enumerate() {
        let kind = LayerKind::from_section(&section.name).ok_or_else(|| NetDefError::UnknownSection {
            line: section.line,
            name: section.name.clone(),
        })?;
        let attrs = Attrs {
            layer: index,
            map: &section.attributes,
        };
        let layer = match kind {
            LayerKind::Convolutional => Layer::Convolutional(parse_conv(&attrs)?),
            LayerKind::Shortcut => {
                let from = attrs.required_int("from")?;
                Layer::Shortcut {
                    from: resolve(index, from)?,
                    activation: attrs.activation("linear")?,
                }
            }
            LayerKind::Route => {
                let refs = attrs.int_list(attrs.required("layers")?, "layers")?;
                if refs.is_empty() {
                    return Err(attrs.invalid("layers", "", "empty reference list"));
                }
                Layer::Route {
                    layers: refs.into_iter().map(|r| resolve(index, r)).collect::<Result<_>>()?,
                }
            }
            LayerKind::Upsample => {
                let stride = attrs.optional_int("stride")?.unwrap_or(2);
                if stride != 2 {
                    return Err(attrs.invalid("stride", &stride.to_string(), "only 2x upsampling is supported"));
                }
                Layer::Upsample { stride: 2 }
            }
            LayerKind::Yolo => Layer::Yolo(parse_yolo(&attrs)?),
        };
        layers.push(LayerSpec {
            index,
            layer,
            attributes: section.attributes,
        });
    }
    Ok(NetDefinition { input_shape, layers })
}

fn parse_input(net: &Section) -> Result<InputShape> {
    let attrs = Attrs {
        layer: 0,
        map: &net.attributes,
    };
    let default = InputShape::default();
    let dim = |key: &'static str, fallback: usize| -> Result<usize> {
        match attrs.optional_int(key)? {
            None => Ok(fallback),
            Some(v) if v > 0 => Ok(v as usize),
            Some(v) => Err(NetDefError::Syntax {
                line: net.line,
                detail: format!("[net] {key} must be positive, got {v}"),
            }),
        }
    };
    Ok(InputShape {
        channels: dim("channels", default.channels)?,
        height: dim("height", default.height)?,
        width: dim("width", default.width)?,
    })
}

fn resolve(index: usize, reference: i64) -> Result<usize> {
    let abs = if reference < 0 { index as i64 + reference } else { reference };
    if abs < 0 || abs >= index as i64 {
        return Err(NetDefError::DanglingReference {
            layer: index,
            reference,
        });
    }
    Ok(abs as usize)
}

fn parse_conv(attrs: &Attrs<'_>) -> Result<ConvSpec> {
    let filters = attrs.positive("filters")?;
    let size = attrs.positive("size")?;
    let stride = attrs.positive("stride")?;
    let pad_flag = attrs.optional_int("pad")?.unwrap_or(0);
    let padding = match attrs.optional_int("padding")? {
        _ if pad_flag != 0 => size / 2,
        Some(p) if p >= 0 => p as usize,
        Some(p) => return Err(attrs.invalid("padding", &p.to_string(), "must be non-negative")),
        None => 0,
    };
    Ok(ConvSpec {
        filters,
        size,
        stride,
        padding,
        batch_normalize: attrs.optional_int("batch_normalize")?.unwrap_or(0) != 0,
        activation: attrs.activation("logistic")?,
    })
}

fn parse_yolo(attrs: &Attrs<'_>) -> Result<YoloSpec> {
    let mask_raw = attrs.int_list(attrs.required("mask")?, "mask")?;
    let anchor_vals = attrs.float_list(attrs.required("anchors")?, "anchors")?;
    let classes = attrs.positive("classes")?;
    if anchor_vals.is_empty() || anchor_vals.len() % 2 != 0 {
        return Err(attrs.invalid("anchors", &attrs.map["anchors"], "expected width,height pairs"));
    }
    let anchors = anchor_vals
        .chunks_exact(2)
        .map(|p| Anchor::new(p[0], p[1]))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| attrs.invalid("anchors", &attrs.map["anchors"], "anchor sides must be positive"))?;
    if let Some(num) = attrs.optional_int("num")? {
        if num as usize != anchors.len() {
            return Err(attrs.invalid(
                "num",
                &num.to_string(),
                &format!("{} anchors declared", anchors.len()),
            ));
        }
    }
    if mask_raw.is_empty() {
        return Err(attrs.invalid("mask", "", "empty mask"));
    }
    let mask = mask_raw
        .iter()
        .map(|&m| (m >= 0 && (m as usize) < anchors.len()).then_some(m as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| attrs.invalid("mask", &attrs.map["mask"], "mask index outside the anchor list"))?;
    Ok(YoloSpec { mask, anchors, classes })
}

struct Attrs<'a> {
    layer: usize,
    map: &'a BTreeMap<String, String>,
}

impl Attrs<'_> {
    fn required(&self, key: &'static str) -> Result<&str> {
        self.map.get(key).map(String::as_str).ok_or(NetDefError::MissingAttribute {
            layer: self.layer,
            attribute: key,
        })
    }

    fn invalid(&self, key: &'static str, value: &str, detail: &str) -> NetDefError {
        NetDefError::InvalidAttribute {
            layer: self.layer,
            attribute: key,
            value: value.to_string(),
            detail: detail.to_string(),
        }
    }

    fn int(&self, key: &'static str, raw: &str) -> Result<i64> {
        raw.trim().parse().map_err(|_| self.invalid(key, raw, "not an integer"))
    }

    fn required_int(&self, key: &'static str) -> Result<i64> {
        self.int(key, self.required(key)?)
    }

    fn optional_int(&self, key: &'static str) -> Result<Option<i64>> {
        self.map.get(key).map(|raw| self.int(key, raw)).transpose()
    }

    fn positive(&self, key: &'static str) -> Result<usize> {
        let v = self.required_int(key)?;
        if v <= 0 {
            return Err(self.invalid(key, &v.to_string(), "must be positive"));
        }
        Ok(v as usize)
    }

    fn int_list(&self, raw: &str, key: &'static str) -> Result<Vec<i64>> {
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.int(key, s))
            .collect()
    }

    fn float_list(&self, raw: &str, key: &'static str) -> Result<Vec<f64>> {
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| self.invalid(key, s, "not a number")))
            .collect()
    }

    fn activation(&self, default: &str) -> Result<Activation> {
        let name = self.map.get("activation").map(String::as_str).unwrap_or(default);
        match name {
            "leaky" => {
                let slope = match self.map.get("slope") {
                    Some(raw) => raw.parse::<f32>().map_err(|_| self.invalid("slope", raw, "not a number"))?,
                    None => LEAKY_SLOPE,
                };
                Ok(Activation::Leaky(slope))
            }
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "logistic" => Ok(Activation::Logistic),
            other => Err(self.invalid("activation", other, "unsupported activation")),
        }
    }
}

impl NetDefinition {
    /// Infers the `(c, h, w)` output of every layer, validating references,
    /// spatial agreement and detection-head channel counts along the way.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let input = [self.input_shape.channels, self.input_shape.height, self.input_shape.width];
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let i = spec.index;
            let prev = |shapes: &[[usize; 3]]| if i == 0 { input } else { shapes[i - 1] };
            let shape_err = |detail: String| NetDefError::Shape { layer: i, detail };
            let out = match &spec.layer {
                Layer::Convolutional(c) => {
                    let [_, h, w] = prev(&shapes);
                    match (
                        ConvParams::output_extent(h, c.size, c.stride, c.padding),
                        ConvParams::output_extent(w, c.size, c.stride, c.padding),
                    ) {
                        (Some(oh), Some(ow)) => [c.filters, oh, ow],
                        _ => {
                            return Err(shape_err(format!(
                                "{0}x{0} kernel with padding {1} does not fit a {h}x{w} input",
                                c.size, c.padding
                            )))
                        }
                    }
                }
                Layer::Shortcut { from, .. } => {
                    if i == 0 {
                        return Err(NetDefError::DanglingReference { layer: 0, reference: -1 });
                    }
                    let (a, b) = (shapes[*from], shapes[i - 1]);
                    if a != b {
                        return Err(shape_err(format!("shortcut adds {a:?} (layer {from}) to {b:?} (layer {})", i - 1)));
                    }
                    a
                }
                Layer::Route { layers } => {
                    let [_, h, w] = shapes[layers[0]];
                    let mut c = 0;
                    for &r in layers {
                        let [rc, rh, rw] = shapes[r];
                        if (rh, rw) != (h, w) {
                            return Err(shape_err(format!(
                                "route mixes spatial sizes {h}x{w} and {rh}x{rw} (layer {r})"
                            )));
                        }
                        c += rc;
                    }
                    [c, h, w]
                }
                Layer::Upsample { .. } => {
                    let [c, h, w] = prev(&shapes);
                    [c, 2 * h, 2 * w]
                }
                Layer::Yolo(y) => {
                    if i == 0 {
                        return Err(NetDefError::DanglingReference { layer: 0, reference: -1 });
                    }
                    let in_shape = shapes[i - 1];
                    let expected = kernel_size(y.boxes(), y.classes)?;
                    if in_shape[0] != expected {
                        return Err(NetDefError::HeadChannels {
                            layer: i,
                            expected,
                            actual: in_shape[0],
                        });
                    }
                    in_shape
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Parameter count of every layer (zero for parameter-free layers).
    pub fn param_counts(&self) -> Result<Vec<usize>> {
        let shapes = self.output_shapes()?;
        Ok(self
            .layers
            .iter()
            .map(|spec| match &spec.layer {
                Layer::Convolutional(c) => {
                    let in_c = if spec.index == 0 {
                        self.input_shape.channels
                    } else {
                        shapes[spec.index - 1][0]
                    };
                    let shift = if c.batch_normalize { 4 * c.filters } else { c.filters };
                    shift + c.filters * in_c * c.size * c.size
                }
                _ => 0,
            })
            .collect())
    }

    pub fn yolo_layers(&self) -> impl Iterator<Item = (usize, &YoloSpec)> {
        self.layers.iter().filter_map(|l| match &l.layer {
            Layer::Yolo(y) => Some((l.index, y)),
            _ => None,
        })
    }

    /// Same topology with a different input height and width.
    pub fn with_input_size(&self, height: usize, width: usize) -> NetDefinition {
        NetDefinition {
            input_shape: InputShape {
                height,
                width,
                ..self.input_shape
            },
            layers: self.layers.clone(),
        }
    }
}
