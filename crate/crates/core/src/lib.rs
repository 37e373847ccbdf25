//! Proxy-attention open-vocabulary segmentation over pre-extracted features.
//!
//! A feature bundle carries, per sliding window, the patch features of a
//! vision foundation model and the value embeddings of CLIP's last attention
//! block. The engine turns feature correspondence into attention over those
//! values, projects the result into CLIP's joint space, classifies patches
//! against text embeddings, and stitches windows into a full label map.
//! [`evalkit`] scores label maps (mIoU) and pairwise patch scores
//! (semantic-coherence precision/recall).

pub mod bundle;
pub mod error;
pub mod evalkit;
pub mod export;
pub mod npy;
pub mod pam;
pub mod segmenter;
pub mod tensor;

pub use bundle::{
    load_bundle, load_text, load_weights, ClipHeadWeights, FeatureBundle, Grid, TextEmbeddings, WindowFeatures,
};
pub use error::{BundleError, EvalError, ExportError, NpyError, PamError, SegmentError, TensorError};
pub use evalkit::{ConfusionMatrix, MiouReport, PatchLabels, PrCurve};
pub use pam::{AttentionResult, AttnSource, MaskMode, PamConfig};
pub use segmenter::{run_pipeline, FinalizeOptions, LabelMap, LogitCanvas, SegmentationMap, WindowRect};
pub use tensor::{MaskTensor, Tensor};
