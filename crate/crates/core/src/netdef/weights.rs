//! Darknet binary weights: a small little-endian header followed by raw `f32`
//! parameters for each conv layer in network order.

use thiserror::Error;

use super::{Layer, NetDefError, NetDefinition, NetworkGraph};
use crate::tensor::{BatchNorm, ConvParams, Tensor, BN_EPSILON};

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weights header truncated: {0} bytes available")]
    HeaderTruncated(usize),
    #[error("unsupported weights format version {major}.{minor}")]
    Version { major: i32, minor: i32 },
    #[error("weights file ends early: expected {expected} floats, found {available}")]
    Truncated { expected: usize, available: usize },
    #[error("weights file has trailing data: expected {expected} floats, found {available} ({extra_bytes} extra bytes)")]
    Trailing {
        expected: usize,
        available: usize,
        extra_bytes: usize,
    },
    #[error(transparent)]
    Definition(#[from] NetDefError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    pub images_seen: u64,
}

impl Default for WeightsHeader {
    fn default() -> Self {
        Self {
            major: 0,
            minor: 2,
            revision: 0,
            images_seen: 0,
        }
    }
}

impl WeightsHeader {
    /// Versions from 0.2 on store the image counter as a 64-bit value.
    pub fn wide_counter(&self) -> bool {
        self.major * 10 + self.minor >= 2
    }

    pub fn byte_len(&self) -> usize {
        12 + if self.wide_counter() { 8 } else { 4 }
    }

    fn parse(bytes: &[u8]) -> Result<Self, WeightsError> {
        if bytes.len() < 12 {
            return Err(WeightsError::HeaderTruncated(bytes.len()));
        }
        let int = |i: usize| i32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        let (major, minor, revision) = (int(0), int(1), int(2));
        if !(0..=2).contains(&major) || minor < 0 {
            return Err(WeightsError::Version { major, minor });
        }
        let mut header = Self {
            major,
            minor,
            revision,
            images_seen: 0,
        };
        let len = header.byte_len();
        if bytes.len() < len {
            return Err(WeightsError::HeaderTruncated(bytes.len()));
        }
        header.images_seen = if header.wide_counter() {
            u64::from_le_bytes(bytes[12..20].try_into().unwrap())
        } else {
            u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64
        };
        Ok(header)
    }

    fn write(&self, out: &mut Vec<u8>) {
        for v in [self.major, self.minor, self.revision] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if self.wide_counter() {
            out.extend_from_slice(&self.images_seen.to_le_bytes());
        } else {
            out.extend_from_slice(&(self.images_seen as u32).to_le_bytes());
        }
    }
}

/// Number of `f32` values a weights file for `definition` must contain.
pub fn expected_float_count(definition: &NetDefinition) -> Result<usize, NetDefError> {
    Ok(definition.param_counts()?.iter().sum())
}

/// Parses a complete weights file against `definition`. The payload must hold
/// exactly the floats the definition calls for.
pub fn load_weights(bytes: &[u8], definition: NetDefinition) -> Result<(WeightsHeader, NetworkGraph), WeightsError> {
    let header = WeightsHeader::parse(bytes)?;
    let payload = &bytes[header.byte_len()..];
    let expected = expected_float_count(&definition)?;
    let available = payload.len() / 4;
    if payload.len() < expected * 4 {
        return Err(WeightsError::Truncated { expected, available });
    }
    if payload.len() > expected * 4 {
        return Err(WeightsError::Trailing {
            expected,
            available,
            extra_bytes: payload.len() - expected * 4,
        });
    }

    let shapes = definition.output_shapes()?;
    let mut cursor = FloatCursor { bytes: payload, pos: 0 };
    let mut params = Vec::new();
    for spec in &definition.layers {
        let Layer::Convolutional(conv) = &spec.layer else {
            continue;
        };
        let in_c = if spec.index == 0 {
            definition.input_shape.channels
        } else {
            shapes[spec.index - 1][0]
        };
        let n = conv.filters;
        let (bias, batchnorm) = if conv.batch_normalize {
            let beta = cursor.take(n);
            let gamma = cursor.take(n);
            let rolling_mean = cursor.take(n);
            let rolling_var = cursor.take(n);
            (
                vec![0.0; n],
                Some(BatchNorm {
                    gamma,
                    beta,
                    rolling_mean,
                    rolling_var,
                    epsilon: BN_EPSILON,
                }),
            )
        } else {
            (cursor.take(n), None)
        };
        let shape = vec![n, in_c, conv.size, conv.size];
        let weights = Tensor::new(shape, cursor.take(n * in_c * conv.size * conv.size))?;
        params.push(ConvParams::new(weights, bias, batchnorm, conv.stride, conv.padding)?);
    }
    debug_assert_eq!(cursor.pos, payload.len());
    let graph = NetworkGraph::build(definition, params)?;
    Ok((header, graph))
}

/// Serializes `graph`'s parameters in the layout [`load_weights`] reads.
pub fn write_weights(header: &WeightsHeader, graph: &NetworkGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.byte_len() + graph.param_count() * 4);
    header.write(&mut out);
    let mut put = |values: &[f32]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for p in graph.all_conv_params() {
        match p.batchnorm() {
            Some(bn) => {
                put(&bn.beta);
                put(&bn.gamma);
                put(&bn.rolling_mean);
                put(&bn.rolling_var);
            }
            None => put(p.bias()),
        }
        put(p.weights().data());
    }
    out
}

struct FloatCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl FloatCursor<'_> {
    fn take(&mut self, n: usize) -> Vec<f32> {
        let end = self.pos + n * 4;
        let out = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos = end;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::parse_netdef;

    fn header_bytes(major: i32, minor: i32) -> Vec<u8> {
        let mut out = Vec::new();
        WeightsHeader {
            major,
            minor,
            revision: 0,
            images_seen: 7,
        }
        .write(&mut out);
        out
    }

    fn floats(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    const ONE_CONV: &str = "[net]\nwidth=4\nheight=4\nchannels=1\n[convolutional]\nfilters=1\nsize=1\nstride=1\n";

    #[test]
    fn plain_conv_consumes_bias_and_weight() {
        let def = parse_netdef(ONE_CONV).unwrap();
        assert_eq!(expected_float_count(&def).unwrap(), 2);
        let mut bytes = header_bytes(0, 2);
        bytes.extend(floats(&[0.5, 3.0]));
        let (header, graph) = load_weights(&bytes, def).unwrap();
        assert_eq!(header.images_seen, 7);
        let p = graph.conv_params(0).unwrap();
        assert_eq!(p.bias(), &[0.5]);
        assert_eq!(p.weights().data(), &[3.0]);
    }

    #[test]
    fn batchnorm_conv_consumes_five_floats() {
        let def = parse_netdef(&format!("{ONE_CONV}batch_normalize=1\n")).unwrap();
        assert_eq!(expected_float_count(&def).unwrap(), 5);
        let mut bytes = header_bytes(0, 2);
        bytes.extend(floats(&[0.1, 0.2, 0.3, 0.4, 0.5]));
        let (_, graph) = load_weights(&bytes, def).unwrap();
        let bn = graph.conv_params(0).unwrap().batchnorm().unwrap();
        assert_eq!((bn.beta[0], bn.gamma[0], bn.rolling_mean[0], bn.rolling_var[0]), (0.1, 0.2, 0.3, 0.4));
        assert_eq!(graph.conv_params(0).unwrap().weights().data(), &[0.5]);
    }

    #[test]
    fn header_only_file_for_empty_network() {
        let def = parse_netdef("[net]\nwidth=32\nheight=32\n").unwrap();
        let (_, graph) = load_weights(&header_bytes(0, 2), def).unwrap();
        assert!(graph.layers().is_empty());
    }

    #[test]
    fn narrow_counter_for_old_versions() {
        let def = parse_netdef(ONE_CONV).unwrap();
        let mut bytes = header_bytes(0, 1);
        assert_eq!(bytes.len(), 16);
        bytes.extend(floats(&[0.0, 1.0]));
        let (header, _) = load_weights(&bytes, def).unwrap();
        assert!(!header.wide_counter());
        assert_eq!(header.images_seen, 7);
    }

    #[test]
    fn size_errors_report_counts() {
        let def = parse_netdef(ONE_CONV).unwrap();
        let mut short = header_bytes(0, 2);
        short.extend(floats(&[1.0]));
        match load_weights(&short, def.clone()) {
            Err(WeightsError::Truncated { expected: 2, available: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut long = header_bytes(0, 2);
        long.extend(floats(&[1.0, 2.0, 3.0]));
        match load_weights(&long, def.clone()) {
            Err(WeightsError::Trailing {
                expected: 2,
                available: 3,
                extra_bytes: 4,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut odd = header_bytes(0, 2);
        odd.extend(floats(&[1.0, 2.0]));
        odd.push(0);
        assert!(matches!(load_weights(&odd, def), Err(WeightsError::Trailing { extra_bytes: 1, .. })));
    }

    #[test]
    fn rejects_bad_versions_and_short_headers() {
        let def = parse_netdef(ONE_CONV).unwrap();
        assert!(matches!(
            load_weights(&header_bytes(3, 0), def.clone()),
            Err(WeightsError::Version { major: 3, .. })
        ));
        assert!(matches!(
            load_weights(&header_bytes(-1, 0), def.clone()),
            Err(WeightsError::Version { .. })
        ));
        assert!(matches!(load_weights(&[0u8; 8], def.clone()), Err(WeightsError::HeaderTruncated(8))));
        assert!(matches!(load_weights(&header_bytes(0, 2)[..16], def), Err(WeightsError::HeaderTruncated(16))));
    }
}
