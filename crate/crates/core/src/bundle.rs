//! On-disk feature bundles: a JSON manifest per image tying together NPY
//! arrays of VFM patch features and CLIP value (and optionally query/key)
//! embeddings for every sliding window, plus the shared CLIP head weights
//! and the text embeddings of the class vocabulary.
//!
//! All relative paths inside a manifest resolve against the manifest's own
//! directory. Grids are row-major with the origin top-left; rects are
//! half-open pixel ranges in the resized image.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{BundleError, NpyError};
use crate::npy;
use crate::segmenter::{tile_windows, WindowRect};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LN_EPS: f32 = 1e-5;
/// Tolerance on the unit norm of each text embedding row.
pub const TEXT_NORM_TOL: f64 = 1e-4;

const TOP_KEYS: &[&str] = &[
    "schema_version",
    "image_id",
    "resized_h",
    "resized_w",
    "window",
    "stride",
    "clip_model",
    "vfm_model",
    "clip_patch",
    "vfm_patch",
    "d",
    "d_joint",
    "n_heads",
    "weights_path",
    "windows",
];

const WINDOW_KEYS: &[&str] = &[
    "x0", "y0", "w", "h", "x_path", "hx", "wx", "dx", "v_path", "hv", "wv", "dv",
];

/// Raw manifest as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub image_id: String,
    pub resized_h: usize,
    pub resized_w: usize,
    pub window: usize,
    pub stride: usize,
    pub clip_model: String,
    pub vfm_model: String,
    pub clip_patch: usize,
    pub vfm_patch: usize,
    pub d: usize,
    pub d_joint: usize,
    pub n_heads: usize,
    pub weights_path: String,
    pub windows: Vec<WindowEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub x_path: String,
    pub hx: usize,
    pub wx: usize,
    pub dx: usize,
    pub v_path: String,
    pub hv: usize,
    pub wv: usize,
    pub dv: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_path: Option<String>,
}

/// Spatial grid of a patch sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One window's features, class tokens already stripped.
#[derive(Debug, Clone)]
pub struct WindowFeatures {
    pub rect: WindowRect,
    /// `[H_x*W_x, D_x]`
    pub x_vfm: Tensor,
    pub vfm_grid: Grid,
    /// `[n, H_v*W_v, D_v]`
    pub v_clip: Tensor,
    pub clip_grid: Grid,
    /// `[n, H_v*W_v, D_head]`
    pub q_clip: Option<Tensor>,
    pub k_clip: Option<Tensor>,
}

impl WindowFeatures {
    pub fn n_heads(&self) -> usize {
        self.v_clip.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub image_id: String,
    pub resized_h: usize,
    pub resized_w: usize,
    pub window: usize,
    pub stride: usize,
    pub clip_model: String,
    pub vfm_model: String,
    pub clip_patch: usize,
    pub vfm_patch: usize,
    pub d: usize,
    pub d_joint: usize,
    pub n_heads: usize,
    /// Resolved against the manifest directory.
    pub weights_path: PathBuf,
    pub windows: Vec<WindowFeatures>,
}

/// Shared CLIP head parameters.
///
/// `out_proj_weight` keeps the `[out, in]` layout of a linear layer and is
/// applied as `x * W^T + b`; `visual_proj` is `[d, d_joint]` and applied as
/// `x * P`.
#[derive(Debug, Clone)]
pub struct ClipHeadWeights {
    pub out_proj_weight: Tensor,
    pub out_proj_bias: Tensor,
    pub ln_post_weight: Tensor,
    pub ln_post_bias: Tensor,
    pub ln_eps: f32,
    pub visual_proj: Tensor,
}

impl ClipHeadWeights {
    pub fn d(&self) -> usize {
        self.out_proj_weight.shape()[0]
    }

    pub fn d_joint(&self) -> usize {
        self.visual_proj.shape()[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub schema_version: u32,
    pub d: usize,
    pub d_joint: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ln_eps: Option<f32>,
    pub out_proj_weight: String,
    pub out_proj_bias: String,
    pub ln_post_weight: String,
    pub ln_post_bias: String,
    pub visual_proj: String,
}

#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    /// `[C, d_joint]`, unit rows.
    pub z_t: Tensor,
    pub class_names: Vec<String>,
}

impl TextEmbeddings {
    pub fn new(z_t: Tensor, class_names: Vec<String>) -> Result<Self, BundleError> {
        if class_names.is_empty() {
            return Err(invalid("class_names", "vocabulary is empty"));
        }
        let (c, _) = z_t.dims2().map_err(|e| shape_err("embeddings_path", e.to_string()))?;
        if c != class_names.len() {
            return Err(shape_err(
                "embeddings_path",
                format!("{c} rows for {} class names", class_names.len()),
            ));
        }
        for (i, name) in class_names.iter().enumerate() {
            let norm = z_t.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > TEXT_NORM_TOL {
                return Err(invalid(
                    "embeddings_path",
                    format!("row {i} ({name}) has norm {norm:.6}, expected 1"),
                ));
            }
        }
        Ok(Self { z_t, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextManifest {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub embeddings_path: String,
}

fn invalid(field: impl Into<String>, detail: impl Into<String>) -> BundleError {
    BundleError::InvalidValue {
        field: field.into(),
        detail: detail.into(),
    }
}

fn shape_err(field: impl Into<String>, detail: impl Into<String>) -> BundleError {
    BundleError::ShapeInconsistency {
        field: field.into(),
        detail: detail.into(),
    }
}

fn read_json(path: &Path) -> Result<Value, BundleError> {
    let text = fs::read_to_string(path).map_err(|source| BundleError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| BundleError::Json {
        path: path.to_owned(),
        source,
    })
}

fn require_keys(obj: &Value, keys: &[&str], prefix: &str) -> Result<(), BundleError> {
    let map = obj
        .as_object()
        .ok_or_else(|| invalid(prefix.trim_end_matches('.'), "expected a JSON object"))?;
    match keys.iter().find(|k| !map.contains_key(**k)) {
        Some(k) => Err(BundleError::MissingKey {
            key: format!("{prefix}{k}"),
        }),
        None => Ok(()),
    }
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, path: &Path) -> Result<T, BundleError> {
    serde_json::from_value(v).map_err(|source| BundleError::Json {
        path: path.to_owned(),
        source,
    })
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

fn load_array(dir: &Path, rel: &str, field: String) -> Result<Tensor, BundleError> {
    npy::read_tensor(&dir.join(rel)).map_err(|source| BundleError::Array { field, source })
}

/// Reads and parses a manifest, reporting absent keys by name.
pub fn read_manifest(path: &Path) -> Result<Manifest, BundleError> {
    let value = read_json(path)?;
    require_keys(&value, TOP_KEYS, "")?;
    match value["windows"].as_array() {
        Some(ws) => {
            for (i, w) in ws.iter().enumerate() {
                require_keys(w, WINDOW_KEYS, &format!("windows[{i}]."))?;
            }
        }
        None => return Err(invalid("windows", "expected an array")),
    }
    from_value(value, path)
}

/// Checks everything about a manifest that does not need the arrays:
/// scalar ranges, rect geometry, head split, pixel coverage and agreement
/// with the sliding-window tiling.
pub fn validate_manifest(m: &Manifest) -> Result<(), BundleError> {
    if m.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {}", m.schema_version),
        ));
    }
    for (name, value) in [
        ("resized_h", m.resized_h),
        ("resized_w", m.resized_w),
        ("window", m.window),
        ("stride", m.stride),
        ("d", m.d),
        ("d_joint", m.d_joint),
        ("n_heads", m.n_heads),
    ] {
        if value == 0 {
            return Err(invalid(name, "must be positive"));
        }
    }
    if m.window > m.resized_h || m.window > m.resized_w {
        return Err(invalid(
            "window",
            format!("{} exceeds image {}x{}", m.window, m.resized_h, m.resized_w),
        ));
    }
    if m.windows.is_empty() {
        return Err(invalid("windows", "no windows"));
    }
    for (i, w) in m.windows.iter().enumerate() {
        let f = |k: &str| format!("windows[{i}].{k}");
        if w.w != m.window || w.h != m.window {
            return Err(shape_err(
                f("w"),
                format!("rect is {}x{}, window size is {}", w.w, w.h, m.window),
            ));
        }
        if w.x0 + w.w > m.resized_w || w.y0 + w.h > m.resized_h {
            return Err(invalid(f("x0"), "rect extends past the image"));
        }
        for (k, v) in [
            ("hx", w.hx),
            ("wx", w.wx),
            ("dx", w.dx),
            ("hv", w.hv),
            ("wv", w.wv),
            ("dv", w.dv),
        ] {
            if v == 0 {
                return Err(invalid(f(k), "must be positive"));
            }
        }
        if m.n_heads * w.dv != m.d {
            return Err(shape_err(
                f("dv"),
                format!("n_heads {} x dv {} != d {}", m.n_heads, w.dv, m.d),
            ));
        }
    }
    check_coverage(m)?;
    let expected =
        tile_windows(m.resized_h, m.resized_w, m.window, m.stride).map_err(|e| invalid("window", e.to_string()))?;
    let want: BTreeSet<_> = expected.iter().map(|r| (r.y0, r.x0)).collect();
    let got: BTreeSet<_> = m.windows.iter().map(|w| (w.y0, w.x0)).collect();
    if want != got || m.windows.len() != expected.len() {
        return Err(BundleError::TilingMismatch {
            detail: format!("expected offsets (y, x) {want:?}, found {got:?}"),
        });
    }
    Ok(())
}

fn check_coverage(m: &Manifest) -> Result<(), BundleError> {
    let mut covered = vec![false; m.resized_h * m.resized_w];
    for w in &m.windows {
        for y in w.y0..(w.y0 + w.h).min(m.resized_h) {
            let row = &mut covered[y * m.resized_w..(y + 1) * m.resized_w];
            for c in &mut row[w.x0..(w.x0 + w.w).min(m.resized_w)] {
                *c = true;
            }
        }
    }
    match covered.iter().position(|c| !c) {
        Some(p) => Err(BundleError::CoverageGap {
            x: p % m.resized_w,
            y: p / m.resized_w,
        }),
        None => Ok(()),
    }
}

fn expect_shape(t: &Tensor, want: &[usize], field: String) -> Result<(), BundleError> {
    if t.shape() == want {
        Ok(())
    } else {
        Err(shape_err(
            field,
            format!("array shape {:?}, manifest implies {want:?}", t.shape()),
        ))
    }
}

fn load_window(dir: &Path, m: &Manifest, i: usize, w: &WindowEntry) -> Result<WindowFeatures, BundleError> {
    let f = |k: &str| format!("windows[{i}].{k}");
    let x_vfm = load_array(dir, &w.x_path, f("x_path"))?;
    expect_shape(&x_vfm, &[w.hx * w.wx, w.dx], f("hx/wx/dx"))?;
    let v_clip = load_array(dir, &w.v_path, f("v_path"))?;
    expect_shape(&v_clip, &[m.n_heads, w.hv * w.wv, w.dv], f("hv/wv/dv"))?;

    let mut head_dim = None;
    let mut optional = |rel: &Option<String>, key: &str| -> Result<Option<Tensor>, BundleError> {
        let Some(rel) = rel else { return Ok(None) };
        let t = load_array(dir, rel, f(key))?;
        let dh = match t.shape() {
            [n, l, dh] if *n == m.n_heads && *l == w.hv * w.wv => *dh,
            s => {
                return Err(shape_err(
                    f(key),
                    format!("array shape {s:?}, expected [{}, {}, D_head]", m.n_heads, w.hv * w.wv),
                ))
            }
        };
        if *head_dim.get_or_insert(dh) != dh {
            return Err(shape_err(f(key), "q and k head dims differ"));
        }
        Ok(Some(t))
    };
    let q_clip = optional(&w.q_path, "q_path")?;
    let k_clip = optional(&w.k_path, "k_path")?;

    Ok(WindowFeatures {
        rect: WindowRect {
            x0: w.x0,
            y0: w.y0,
            w: w.w,
            h: w.h,
        },
        x_vfm,
        vfm_grid: Grid { h: w.hx, w: w.wx },
        v_clip,
        clip_grid: Grid { h: w.hv, w: w.wv },
        q_clip,
        k_clip,
    })
}

/// Loads a bundle and verifies every invariant, naming the offending field
/// on failure.
pub fn load_bundle(manifest_path: &Path) -> Result<FeatureBundle, BundleError> {
    let m = read_manifest(manifest_path)?;
    validate_manifest(&m)?;
    let dir = base_dir(manifest_path);
    let windows = m
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| load_window(dir, &m, i, w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureBundle {
        image_id: m.image_id,
        resized_h: m.resized_h,
        resized_w: m.resized_w,
        window: m.window,
        stride: m.stride,
        clip_model: m.clip_model,
        vfm_model: m.vfm_model,
        clip_patch: m.clip_patch,
        vfm_patch: m.vfm_patch,
        d: m.d,
        d_joint: m.d_joint,
        n_heads: m.n_heads,
        weights_path: dir.join(&m.weights_path),
        windows,
    })
}

pub fn load_weights(path: &Path) -> Result<ClipHeadWeights, BundleError> {
    let value = read_json(path)?;
    require_keys(
        &value,
        &[
            "schema_version",
            "d",
            "d_joint",
            "out_proj_weight",
            "out_proj_bias",
            "ln_post_weight",
            "ln_post_bias",
            "visual_proj",
        ],
        "",
    )?;
    let m: WeightsManifest = from_value(value, path)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {}", m.schema_version),
        ));
    }
    if m.d == 0 || m.d_joint == 0 {
        return Err(invalid("d", "dimensions must be positive"));
    }
    let ln_eps = m.ln_eps.unwrap_or(DEFAULT_LN_EPS);
    if !(ln_eps.is_finite() && ln_eps > 0.0) {
        return Err(invalid("ln_eps", "must be finite and positive"));
    }
    let dir = base_dir(path);
    let get = |field: &str, rel: &str, want: &[usize]| -> Result<Tensor, BundleError> {
        let t = load_array(dir, rel, field.to_owned())?;
        // Vectors may be stored as [d] or [1, d].
        let t = if want.len() == 1 && t.shape() == [1, want[0]] {
            t.reshape(want.to_vec()).map_err(|e| shape_err(field, e.to_string()))?
        } else {
            t
        };
        expect_shape(&t, want, field.to_owned())?;
        Ok(t)
    };
    Ok(ClipHeadWeights {
        out_proj_weight: get("out_proj_weight", &m.out_proj_weight, &[m.d, m.d])?,
        out_proj_bias: get("out_proj_bias", &m.out_proj_bias, &[m.d])?,
        ln_post_weight: get("ln_post_weight", &m.ln_post_weight, &[m.d])?,
        ln_post_bias: get("ln_post_bias", &m.ln_post_bias, &[m.d])?,
        ln_eps,
        visual_proj: get("visual_proj", &m.visual_proj, &[m.d, m.d_joint])?,
    })
}

pub fn load_text(path: &Path) -> Result<TextEmbeddings, BundleError> {
    let value = read_json(path)?;
    require_keys(&value, &["schema_version", "class_names", "embeddings_path"], "")?;
    let m: TextManifest = from_value(value, path)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {}", m.schema_version),
        ));
    }
    if m.class_names.is_empty() {
        return Err(invalid("class_names", "vocabulary is empty"));
    }
    let z_t = load_array(base_dir(path), &m.embeddings_path, "embeddings_path".into())?;
    TextEmbeddings::new(z_t, m.class_names)
}

/// Writes a manifest as pretty JSON. Used by fixture generators and tests.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BundleError> {
    let text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    fs::write(path, text + "\n").map_err(|source| BundleError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes a float array next to a manifest, mapping errors to `field`.
pub fn write_tensor(dir: &Path, rel: &str, t: &Tensor, field: &str) -> Result<(), BundleError> {
    npy::write_array(&dir.join(rel), t).map_err(|source: NpyError| BundleError::Array {
        field: field.to_owned(),
        source,
    })
}
