use std::sync::Arc;

use super::{Layer, LayerSpec, NetDefError, NetDefinition, InputShape, Result};
use crate::decode::Anchor;
use crate::tensor::ConvParams;

/// Geometry of one detection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSpec {
    /// Index of the `[yolo]` layer.
    pub layer: usize,
    /// Input pixels per grid cell.
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Anchor slots of the network-wide anchor list assigned to this head.
    pub mask: Vec<usize>,
    pub anchors: Vec<Anchor>,
    pub classes: usize,
}

impl ScaleSpec {
    pub fn boxes(&self) -> usize {
        self.anchors.len()
    }

    /// Grid side length; equals `grid_h`.
    pub fn grid(&self) -> usize {
        self.grid_h
    }

    pub fn channels(&self) -> usize {
        self.boxes() * (5 + self.classes)
    }
}

/// A validated definition with parameters attached to every conv layer.
///
/// Cloning is cheap; parameters are shared.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    definition: NetDefinition,
    shapes: Vec<[usize; 3]>,
    params: Arc<Vec<Option<ConvParams>>>,
    heads: Vec<ScaleSpec>,
}

impl NetworkGraph {
    /// Attaches `params` (one per conv layer, in layer order) to `definition`.
    pub fn build(definition: NetDefinition, params: Vec<ConvParams>) -> Result<Self> {
        let shapes = definition.output_shapes()?;
        let conv_count = definition
            .layers
            .iter()
            .filter(|l| matches!(l.layer, Layer::Convolutional(_)))
            .count();
        if params.len() != conv_count {
            return Err(NetDefError::ParamCount {
                expected: conv_count,
                actual: params.len(),
            });
        }
        let mut supplied = params.into_iter();
        let mut attached = Vec::with_capacity(definition.layers.len());
        for spec in &definition.layers {
            let Layer::Convolutional(conv) = &spec.layer else {
                attached.push(None);
                continue;
            };
            let p = supplied.next().expect("counted above");
            let in_c = input_channels(&definition.input_shape, &shapes, spec);
            let expected = (conv.filters, in_c, conv.size, conv.size);
            let mismatch = |detail: String| NetDefError::Params {
                layer: spec.index,
                detail,
            };
            if p.kernel_dims() != expected {
                return Err(mismatch(format!("kernel {:?}, expected {expected:?}", p.kernel_dims())));
            }
            if (p.stride(), p.pad()) != (conv.stride, conv.padding) {
                return Err(mismatch(format!(
                    "stride/pad ({}, {}), expected ({}, {})",
                    p.stride(),
                    p.pad(),
                    conv.stride,
                    conv.padding
                )));
            }
            if p.batchnorm().is_some() != conv.batch_normalize {
                return Err(mismatch(format!("batchnorm presence must be {}", conv.batch_normalize)));
            }
            attached.push(Some(p));
        }
        let heads = head_infos(&definition, &shapes)?;
        Ok(Self {
            definition,
            shapes,
            params: Arc::new(attached),
            heads,
        })
    }

    pub fn definition(&self) -> &NetDefinition {
        &self.definition
    }

    pub fn input_shape(&self) -> InputShape {
        self.definition.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.definition.layers
    }

    pub fn output_shape(&self, layer: usize) -> [usize; 3] {
        self.shapes[layer]
    }

    pub fn conv_params(&self, layer: usize) -> Option<&ConvParams> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    /// Conv parameter sets in layer order.
    pub fn all_conv_params(&self) -> impl Iterator<Item = &ConvParams> {
        self.params.iter().flatten()
    }

    /// Detection heads ordered by descending stride (coarsest grid first).
    pub fn heads(&self) -> &[ScaleSpec] {
        &self.heads
    }

    pub fn param_count(&self) -> usize {
        self.all_conv_params().map(ConvParams::param_count).sum()
    }

    /// Same parameters over a different input size.
    pub fn with_input_size(&self, height: usize, width: usize) -> Result<Self> {
        let definition = self.definition.with_input_size(height, width);
        let shapes = definition.output_shapes()?;
        let heads = head_infos(&definition, &shapes)?;
        Ok(Self {
            definition,
            shapes,
            params: Arc::clone(&self.params),
            heads,
        })
    }

    /// Equivalent graph with every batchnorm merged into its conv kernel.
    pub fn fold_batchnorm(&self) -> Self {
        let params = self.params.iter().map(|p| p.as_ref().map(ConvParams::fold_batchnorm)).collect();
        Self {
            params: Arc::new(params),
            ..self.clone()
        }
    }

    /// Checks the three-scale, nine-anchor layout of the full detector.
    pub fn check_full_profile(&self) -> Result<()> {
        let input = self.input_shape();
        if !input.height.is_multiple_of(32) || !input.width.is_multiple_of(32) {
            return Err(NetDefError::Profile(format!(
                "input {}x{} is not divisible by 32",
                input.height, input.width
            )));
        }
        let strides: Vec<usize> = self.heads.iter().map(|h| h.stride).collect();
        if strides != [32, 16, 8] {
            return Err(NetDefError::Profile(format!("head strides {strides:?}, expected [32, 16, 8]")));
        }
        for (i, spec) in self.definition.yolo_layers() {
            if spec.anchors.len() != 9 {
                return Err(NetDefError::Profile(format!(
                    "layer {i} declares {} anchors, expected 9",
                    spec.anchors.len()
                )));
            }
        }
        Ok(())
    }
}

fn input_channels(input: &InputShape, shapes: &[[usize; 3]], spec: &LayerSpec) -> usize {
    if spec.index == 0 {
        input.channels
    } else {
        shapes[spec.index - 1][0]
    }
}

fn head_infos(definition: &NetDefinition, shapes: &[[usize; 3]]) -> Result<Vec<ScaleSpec>> {
    let input = definition.input_shape;
    let mut heads = Vec::new();
    for (layer, spec) in definition.yolo_layers() {
        let [_, gh, gw] = shapes[layer];
        let stride = input.height / gh;
        if stride * gh != input.height || stride * gw != input.width {
            return Err(NetDefError::Shape {
                layer,
                detail: format!(
                    "{gh}x{gw} grid does not tile the {}x{} input with a single integer stride",
                    input.height, input.width
                ),
            });
        }
        heads.push(ScaleSpec {
            layer,
            stride,
            grid_h: gh,
            grid_w: gw,
            mask: spec.mask.clone(),
            anchors: spec.head_anchors(),
            classes: spec.classes,
        });
    }
    heads.sort_by(|a, b| b.stride.cmp(&a.stride).then(a.layer.cmp(&b.layer)));
    Ok(heads)
}
