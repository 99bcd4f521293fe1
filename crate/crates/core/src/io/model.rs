//! LSNM model files and LSFX reference-logit fixtures.
//!
//! Both are little-endian. LSNM layout:
//!
//! ```text
//! "LSNM" | u16 version (1) | u16 layer count
//! per layer: u8 kind | u32 n | n × u32 shape params | u64 blob bytes | f32 blob
//! ```
//!
//! Kinds and shape params (the blob is weights then biases):
//!
//! | kind | layer   | params                                               |
//! |------|---------|------------------------------------------------------|
//! | 1    | Conv2d  | in_c, in_h, in_w, out_c, kernel_h, kernel_w, stride, pad |
//! | 2    | Dense   | in, out                                              |
//! | 3    | ReLU    | input dims                                           |
//! | 4    | MaxPool | c, h, w, window, stride                              |
//! | 5    | AvgPool | c, h, w, window, stride                              |
//! | 6    | Flatten | input dims                                           |
//! | 7    | Softmax | len                                                  |
//!
//! LSFX layout: `"LSFX" | u16 version (1) | u32 count | u32 input_len |
//! u32 classes`, then per item `u32 label | input_len × f32 | classes × f32`.

use std::path::Path;

use crate::engine::{Layer, LayerKind, Model};
use crate::error::FormatError;
use crate::io::{read_file, write_file, Reader};

const MODEL_MAGIC: &[u8; 4] = b"LSNM";
const FIXTURE_MAGIC: &[u8; 4] = b"LSFX";
const VERSION: u16 = 1;
const MAX_SHAPE_PARAMS: u32 = 16;

fn kind_code(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Conv2d { .. } => 1,
        LayerKind::Dense { .. } => 2,
        LayerKind::Relu => 3,
        LayerKind::MaxPool { .. } => 4,
        LayerKind::AvgPool { .. } => 5,
        LayerKind::Flatten => 6,
        LayerKind::Softmax => 7,
    }
}

fn shape_params(layer: &Layer) -> Vec<usize> {
    let input = layer.input_shape();
    match layer.kind() {
        LayerKind::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => vec![input[0], input[1], input[2], out_channels, kernel_h, kernel_w, stride, padding],
        LayerKind::Dense { out_features } => vec![input[0], out_features],
        LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
            vec![input[0], input[1], input[2], window, stride]
        }
        LayerKind::Relu | LayerKind::Flatten | LayerKind::Softmax => input.to_vec(),
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u16).to_le_bytes());
    for layer in model.layers() {
        out.push(kind_code(&layer.kind()));
        let params = shape_params(layer);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        let blob = layer.params();
        out.extend_from_slice(&((blob.len() * 4) as u64).to_le_bytes());
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn layer_from_record(kind: u8, params: &[usize], offset: usize) -> Result<(LayerKind, Vec<usize>), FormatError> {
    let expect = |n: usize| -> Result<(), FormatError> {
        if params.len() == n {
            Ok(())
        } else {
            Err(FormatError::Malformed {
                offset,
                reason: format!("layer kind {kind} takes {n} shape parameters, found {}", params.len()),
            })
        }
    };
    Ok(match kind {
        1 => {
            expect(8)?;
            (
                LayerKind::Conv2d {
                    out_channels: params[3],
                    kernel_h: params[4],
                    kernel_w: params[5],
                    stride: params[6],
                    padding: params[7],
                },
                params[..3].to_vec(),
            )
        }
        2 => {
            expect(2)?;
            (LayerKind::Dense { out_features: params[1] }, vec![params[0]])
        }
        4 | 5 => {
            expect(5)?;
            let (window, stride) = (params[3], params[4]);
            let k = if kind == 4 {
                LayerKind::MaxPool { window, stride }
            } else {
                LayerKind::AvgPool { window, stride }
            };
            (k, params[..3].to_vec())
        }
        3 | 6 => {
            if params.is_empty() {
                return Err(FormatError::Malformed {
                    offset,
                    reason: "layer needs its input dimensions".into(),
                });
            }
            let k = if kind == 3 { LayerKind::Relu } else { LayerKind::Flatten };
            (k, params.to_vec())
        }
        7 => {
            expect(1)?;
            (LayerKind::Softmax, params.to_vec())
        }
        other => return Err(FormatError::UnknownLayerKind { kind: other, offset }),
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let version_at = r.pos();
    let version = r.u16_le()?;
    if version != VERSION {
        return Err(FormatError::BadVersion {
            found: version as u32,
            offset: version_at,
        });
    }
    let count = r.u16_le()? as usize;
    let mut layers = Vec::with_capacity(count);
    for index in 0..count {
        let kind_at = r.pos();
        let kind = r.u8()?;
        let n_at = r.pos();
        let n = r.u32_le()?;
        if n > MAX_SHAPE_PARAMS {
            return Err(FormatError::Malformed {
                offset: n_at,
                reason: format!("{n} shape parameters"),
            });
        }
        let mut params = Vec::with_capacity(n as usize);
        for _ in 0..n {
            params.push(r.u32_le()? as usize);
        }
        let (kind, input_shape) = layer_from_record(kind, &params, kind_at)?;
        let len_at = r.pos();
        let blob_len = r.u64_le()?;
        if blob_len % 4 != 0 {
            return Err(FormatError::Malformed {
                offset: len_at,
                reason: format!("blob length {blob_len} is not a multiple of 4"),
            });
        }
        let blob = r.f32s_le(usize::try_from(blob_len / 4).unwrap_or(usize::MAX))?;
        let layer = Layer::new(index, kind, input_shape, blob).map_err(|source| FormatError::Model { offset: r.pos(), source })?;
        layers.push(layer);
    }
    r.finish()?;
    Model::new(layers).map_err(|source| FormatError::Model { offset: r.pos(), source })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, FormatError> {
    decode_model(&read_file(path.as_ref())?)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_file(path.as_ref(), &encode_model(model))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureItem {
    pub label: usize,
    pub input: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Reference logits computed by an independent implementation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFixture {
    pub input_len: usize,
    pub classes: usize,
    pub items: Vec<FixtureItem>,
}

pub fn encode_fixture(fx: &ReferenceFixture) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FIXTURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [fx.items.len(), fx.input_len, fx.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for item in &fx.items {
        out.extend_from_slice(&(item.label as u32).to_le_bytes());
        for v in item.input.iter().chain(&item.logits) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_fixture(bytes: &[u8]) -> Result<ReferenceFixture, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FIXTURE_MAGIC)?;
    let version_at = r.pos();
    let version = r.u16_le()?;
    if version != VERSION {
        return Err(FormatError::BadVersion {
            found: version as u32,
            offset: version_at,
        });
    }
    let count = r.u32_le()? as usize;
    let input_len = r.u32_le()? as usize;
    let classes = r.u32_le()? as usize;
    let mut items = Vec::new();
    for _ in 0..count {
        let label_at = r.pos();
        let label = r.u32_le()? as usize;
        if label >= classes {
            return Err(FormatError::Malformed {
                offset: label_at,
                reason: format!("label {label} out of range for {classes} classes"),
            });
        }
        let input = r.f32s_le(input_len)?;
        let logits = r.f32s_le(classes)?;
        items.push(FixtureItem { label, input, logits });
    }
    r.finish()?;
    Ok(ReferenceFixture {
        input_len,
        classes,
        items,
    })
}

pub fn load_fixture(path: impl AsRef<Path>) -> Result<ReferenceFixture, FormatError> {
    decode_fixture(&read_file(path.as_ref())?)
}

pub fn save_fixture(fx: &ReferenceFixture, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_file(path.as_ref(), &encode_fixture(fx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::InjectionPlan;
    use crate::tensor::Tensor;

    fn cnn() -> Model {
        let p = |n: usize| (0..n).map(|i| (i as f32 * 0.13).sin()).collect::<Vec<f32>>();
        Model::sequential(
            vec![2, 5, 5],
            [
                (
                    LayerKind::Conv2d {
                        out_channels: 3,
                        kernel_h: 2,
                        kernel_w: 2,
                        stride: 1,
                        padding: 1,
                    },
                    p(3 * 2 * 4 + 3),
                ),
                (LayerKind::Relu, vec![]),
                (LayerKind::MaxPool { window: 2, stride: 2 }, vec![]),
                (LayerKind::AvgPool { window: 1, stride: 1 }, vec![]),
                (LayerKind::Flatten, vec![]),
                (LayerKind::Dense { out_features: 4 }, p(27 * 4 + 4)),
                (LayerKind::Softmax, vec![]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn every_layer_kind_round_trips() {
        let m = cnn();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn dense_round_trip_gives_identical_logits() {
        let w: Vec<f32> = (0..20).map(|i| (i as f32 * 0.77).cos() * 1.3).collect();
        let m = Model::sequential(vec![4], [(LayerKind::Dense { out_features: 4 }, w)]).unwrap();
        let back = decode_model(&encode_model(&m)).unwrap();
        let mut rng = crate::derive_rng(0, &[]);
        use rand::Rng;
        for _ in 0..10 {
            let x = Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let a = m.forward(&x, 0, &InjectionPlan::empty()).unwrap();
            let b = back.forward(&x, 0, &InjectionPlan::empty()).unwrap();
            assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn corruption_errors() {
        let bytes = encode_model(&cnn());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_model(&bad), Err(FormatError::BadMagic { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_model(&bad), Err(FormatError::BadVersion { found: 2, offset: 4 })));

        let cut = &bytes[..bytes.len() - 4];
        match decode_model(cut) {
            Err(FormatError::Truncated { offset, needed, available }) => {
                assert_eq!(available, needed - 4);
                assert!(offset < bytes.len() - 4);
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[8] = 42;
        assert!(matches!(decode_model(&bad), Err(FormatError::UnknownLayerKind { kind: 42, offset: 8 })));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_model(&long), Err(FormatError::TrailingBytes { trailing: 2, .. })));
    }

    #[test]
    fn incompatible_shapes_are_reported() {
        // Dense 4->3 followed by a dense declaring 5 inputs.
        let a = Model::sequential(vec![4], [(LayerKind::Dense { out_features: 3 }, vec![0.0; 15])]).unwrap();
        let b = Model::sequential(vec![5], [(LayerKind::Dense { out_features: 2 }, vec![0.0; 12])]).unwrap();
        let mut bytes = encode_model(&a);
        let second = encode_model(&b);
        bytes[6] = 2;
        bytes.extend_from_slice(&second[8..]);
        assert!(matches!(
            decode_model(&bytes),
            Err(FormatError::Model {
                source: crate::error::ModelError::IncompatibleShapes { .. },
                ..
            })
        ));
    }

    #[test]
    fn fixture_round_trip() {
        let fx = ReferenceFixture {
            input_len: 3,
            classes: 2,
            items: vec![
                FixtureItem {
                    label: 1,
                    input: vec![0.0, 0.5, 1.0],
                    logits: vec![-1.0, 2.5],
                },
                FixtureItem {
                    label: 0,
                    input: vec![f32::MIN_POSITIVE, -0.0, 3.0],
                    logits: vec![7.0, -7.0],
                },
            ],
        };
        let bytes = encode_fixture(&fx);
        assert_eq!(decode_fixture(&bytes).unwrap(), fx);
        assert!(decode_fixture(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[18] = 9;
        assert!(matches!(decode_fixture(&bad), Err(FormatError::Malformed { .. })));
    }
}
