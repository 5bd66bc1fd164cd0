//! Forward execution of a [`NetworkGraph`] on a single preprocessed frame.

use thiserror::Error;

use crate::netdef::{Layer, NetworkGraph, ScaleSpec};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("network expects input {expected:?}, got {actual:?}")]
    Input { expected: [usize; 3], actual: Vec<usize> },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: TensorError,
    },
}

/// Raw output of one detection head: `(B*(5+C), S, S)` plus its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub tensor: Tensor,
    pub scale: ScaleSpec,
}

/// Which earlier activations must stay resident while each layer executes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePlan {
    last_use: Vec<Option<usize>>,
    retained: Vec<Vec<usize>>,
}

impl CachePlan {
    /// Activations (by producing layer) held while layer `layer` runs.
    pub fn retained_at(&self, layer: usize) -> &[usize] {
        &self.retained[layer]
    }

    /// Last layer that reads the output of `layer`, if any does.
    pub fn last_use(&self, layer: usize) -> Option<usize> {
        self.last_use[layer]
    }

    /// Largest number of simultaneously live activations, counting the one
    /// being produced.
    pub fn peak_live_buffers(&self) -> usize {
        self.retained.iter().map(|r| r.len() + 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }
}

/// Computes the retention schedule from the graph's route/shortcut references.
pub fn activation_cache_plan(graph: &NetworkGraph) -> CachePlan {
    let layers = graph.layers();
    let mut last_use = vec![None; layers.len()];
    for spec in layers {
        for j in spec.inputs() {
            let slot: &mut Option<usize> = &mut last_use[j];
            *slot = Some(slot.map_or(spec.index, |u| u.max(spec.index)));
        }
    }
    let retained = (0..layers.len())
        .map(|i| (0..i).filter(|&j| last_use[j].is_some_and(|u| u >= i)).collect())
        .collect();
    CachePlan { last_use, retained }
}

/// Runs the graph on a `(3, H, W)` input using a freshly computed cache plan.
///
/// Heads are returned in descending stride order.
pub fn forward(graph: &NetworkGraph, input: &Tensor) -> Result<Vec<ForwardOutput>, EngineError> {
    let plan = activation_cache_plan(graph);
    forward_with_plan(graph, input, Some(&plan))
}

/// Runs the graph, releasing activations according to `plan`, or keeping
/// every activation when `plan` is `None`.
pub fn forward_with_plan(
    graph: &NetworkGraph,
    input: &Tensor,
    plan: Option<&CachePlan>,
) -> Result<Vec<ForwardOutput>, EngineError> {
    let shape = graph.input_shape();
    let expected = [shape.channels, shape.height, shape.width];
    if input.shape() != expected {
        return Err(EngineError::Input {
            expected,
            actual: input.shape().to_vec(),
        });
    }

    let layers = graph.layers();
    let mut acts: Vec<Option<Tensor>> = vec![None; layers.len()];
    let mut heads: Vec<(usize, Tensor)> = Vec::new();
    for spec in layers {
        let i = spec.index;
        let wrap = |source: TensorError| EngineError::Layer { layer: i, source };
        let get = |j: usize| acts[j].as_ref().expect("activation released before its last use");
        let prev = || if i == 0 { input } else { get(i - 1) };
        let out = match &spec.layer {
            Layer::Convolutional(conv) => {
                let params = graph.conv_params(i).expect("conv layer without parameters");
                tensor::conv2d_activated(prev(), params, conv.activation).map_err(wrap)?
            }
            Layer::Shortcut { from, activation } => {
                let sum = tensor::shortcut_add(get(*from), prev()).map_err(wrap)?;
                activation.apply(&sum)
            }
            Layer::Route { layers } => {
                let inputs: Vec<&Tensor> = layers.iter().map(|&j| get(j)).collect();
                tensor::route_concat(&inputs).map_err(wrap)?
            }
            Layer::Upsample { .. } => tensor::upsample2x(prev()).map_err(wrap)?,
            Layer::Yolo(_) => {
                heads.push((i, prev().clone()));
                prev().clone()
            }
        };
        acts[i] = Some(out);
        if let Some(plan) = plan {
            for j in spec.inputs().into_iter().chain([i]) {
                if plan.last_use(j).is_none_or(|u| u <= i) {
                    acts[j] = None;
                }
            }
        }
    }

    Ok(graph
        .heads()
        .iter()
        .map(|scale| {
            let tensor = heads
                .iter()
                .find(|(layer, _)| *layer == scale.layer)
                .map(|(_, t)| t.clone())
                .expect("every head layer executed");
            ForwardOutput {
                tensor,
                scale: scale.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::{parse_netdef, NetDefinition};
    use crate::tensor::ConvParams;

    fn chain_graph(text: &str) -> NetworkGraph {
        let def = parse_netdef(text).unwrap();
        let params = zero_params(&def);
        NetworkGraph::build(def, params).unwrap()
    }

    fn zero_params(def: &NetDefinition) -> Vec<ConvParams> {
        let shapes = def.output_shapes().unwrap();
        def.layers
            .iter()
            .filter_map(|l| match &l.layer {
                Layer::Convolutional(c) => {
                    let in_c = if l.index == 0 { def.input_shape.channels } else { shapes[l.index - 1][0] };
                    let w = Tensor::zeros(vec![c.filters, in_c, c.size, c.size]).unwrap();
                    let bn = c.batch_normalize.then(|| crate::tensor::BatchNorm::identity(c.filters));
                    Some(ConvParams::new(w, vec![0.0; c.filters], bn, c.stride, c.padding).unwrap())
                }
                _ => None,
            })
            .collect()
    }

    const CONV: &str = "[convolutional]\nfilters=2\nsize=1\nstride=1\nactivation=linear\n";

    #[test]
    fn linear_chain_retains_only_previous() {
        let text = format!("[net]\nwidth=4\nheight=4\nchannels=2\n{}", CONV.repeat(4));
        let plan = activation_cache_plan(&chain_graph(&text));
        assert_eq!(plan.retained_at(0), &[] as &[usize]);
        for i in 1..4 {
            assert_eq!(plan.retained_at(i), &[i - 1]);
        }
        assert_eq!(plan.peak_live_buffers(), 2);
    }

    #[test]
    fn shortcut_keeps_source_alive() {
        let text = format!("[net]\nwidth=4\nheight=4\nchannels=2\n{}[shortcut]\nfrom=-3\n", CONV.repeat(4));
        let plan = activation_cache_plan(&chain_graph(&text));
        // layer 4 adds layer 1 to layer 3
        assert_eq!(plan.last_use(1), Some(4));
        assert_eq!(plan.retained_at(2), &[1]);
        assert_eq!(plan.retained_at(3), &[1, 2]);
        assert_eq!(plan.retained_at(4), &[1, 3]);
        assert_eq!(plan.peak_live_buffers(), 3);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let graph = chain_graph(&format!("[net]\nwidth=4\nheight=4\nchannels=2\n{CONV}"));
        let err = forward(&graph, &Tensor::zeros(vec![3, 4, 4]).unwrap()).unwrap_err();
        assert!(matches!(err, EngineError::Input { expected: [2, 4, 4], .. }));
    }
}
