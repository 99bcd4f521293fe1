use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Granularity;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("bit index {0} outside 0..=31")]
    BitOutOfRange(u8),
    #[error("bit granularity requires an anchor bit")]
    MissingAnchor,
    #[error("{0} granularity does not take an anchor bit")]
    UnexpectedAnchor(Granularity),
    #[error("unknown granularity `{0}`")]
    UnknownGranularity(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
    #[error("layer {layer}: declared input shape {declared:?} but predecessor produces {produced:?}")]
    IncompatibleShapes {
        layer: usize,
        declared: Vec<usize>,
        produced: Vec<usize>,
    },
    #[error("layer {layer}: expected {expected} parameters, found {found}")]
    ParameterCount {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("model has no layers")]
    Empty,
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("element address (layer {layer}, element {element}) is not in the model")]
    InvalidAddress { layer: usize, element: usize },
    #[error("injection plan flips (layer {layer}, element {element}, bit {bit}) twice")]
    DuplicateInjection {
        layer: usize,
        element: usize,
        bit: u8,
    },
}

/// Errors from reading or writing persistent formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?} at offset {offset}, expected {expected:?}")]
    BadMagic {
        found: Vec<u8>,
        expected: Vec<u8>,
        offset: usize,
    },
    #[error("unsupported version {found} at offset {offset}")]
    BadVersion { found: u32, offset: usize },
    #[error("truncated data at offset {offset}: needed {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown layer kind {kind} at offset {offset}")]
    UnknownLayerKind { kind: u8, offset: usize },
    #[error("malformed record at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("{trailing} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("model structure invalid (record ending at offset {offset}): {source}")]
    Model {
        offset: usize,
        #[source]
        source: ModelError,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: invalid value `{value}` ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Errors raised by the device model, attack executor and parameter search.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid device profile: {0}")]
    Profile(String),
    #[error("invalid fault parameters: {0}")]
    Params(String),
    #[error("target (layer {layer}, element {element}) has no schedule window")]
    TargetNotScheduled { layer: usize, element: usize },
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Invalid(String),
}
