use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {got:?}")]
    RankMismatch { expected: usize, got: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("mask entry at flat index {index} is neither 0 nor -inf")]
    InvalidMaskEntry { index: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("reduction over an empty tensor")]
    Empty,
}

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an npy file: bad magic string")]
    BadMagic,
    #[error("unsupported npy format version {major}.{minor} (only 1.0)")]
    UnsupportedVersion { major: u8, minor: u8 },
    #[error("malformed npy header: {0}")]
    BadHeader(String),
    #[error("fortran-order arrays are not supported")]
    FortranOrder,
    #[error("unsupported dtype '{0}' (expected '<f4' or '<i4')")]
    UnsupportedDtype(String),
    #[error("unsupported rank {0}: arrays must have at least one axis")]
    UnsupportedRank(usize),
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("expected dtype {expected}, file holds {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing key `{key}`")]
    MissingKey { key: String },
    #[error("`{field}`: {detail}")]
    InvalidValue { field: String, detail: String },
    #[error("shape inconsistency in `{field}`: {detail}")]
    ShapeInconsistency { field: String, detail: String },
    #[error("window rects leave pixel (x={x}, y={y}) uncovered")]
    CoverageGap { x: usize, y: usize },
    #[error("window rects do not match the sliding-window tiling: {detail}")]
    TilingMismatch { detail: String },
    #[error("`{field}`: {source}")]
    Array {
        field: String,
        #[source]
        source: NpyError,
    },
}

impl BundleError {
    /// The manifest field the error is attributed to, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::MissingKey { key } => Some(key),
            Self::InvalidValue { field, .. } | Self::ShapeInconsistency { field, .. } | Self::Array { field, .. } => {
                Some(field)
            }
            Self::CoverageGap { .. } | Self::TilingMismatch { .. } => Some("windows"),
            _ => None,
        }
    }

    /// True when the failure is an I/O problem rather than invalid content.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Self::Io { .. }
                | Self::Array {
                    source: NpyError::Io { .. },
                    ..
                }
        )
    }
}

#[derive(Debug, Error)]
pub enum PamError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("attention source `{source_name}` needs `{array}` arrays, which this bundle does not carry")]
    MissingArray {
        source_name: &'static str,
        array: &'static str,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("window {window}x{window} does not fit a {height}x{width} image")]
    WindowTooLarge { height: usize, width: usize, window: usize },
    #[error("invalid tiling parameter: {0}")]
    InvalidTiling(String),
    #[error("rect ({x0},{y0},{w},{h}) is out of canvas bounds {width}x{height}")]
    RectOutOfBounds {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("pixel (x={x}, y={y}) is not covered by any window")]
    Uncovered { x: usize, y: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Pam(#[from] PamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("size mismatch: prediction {pred_h}x{pred_w}, ground truth {gt_h}x{gt_w}")]
    SizeMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("every class has zero union; mIoU is undefined")]
    AllUndefined,
    #[error("no positive pairs; average precision is undefined")]
    NoPositives,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("confusion matrices disagree on class count or ignore index")]
    Incompatible,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("png encoding failed: {0}")]
    Png(#[from] image::ImageError),
}
