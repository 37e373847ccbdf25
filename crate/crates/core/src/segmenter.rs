//! Sliding-window tiling, patch classification against text embeddings,
//! logit stitching and the final per-pixel argmax.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{ClipHeadWeights, FeatureBundle, TextEmbeddings, WindowFeatures};
use crate::error::SegmentError;
use crate::pam::{apply_pam, attention_scores, PamConfig};
use crate::tensor::{bilinear_resize_grid, matmul_nt, Tensor};

/// Half-open pixel rectangle `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl WindowRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

fn axis_offsets(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = dim - window;
    let mut offsets: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    offsets.push(last);
    offsets
}

/// Window rects at offsets `0, stride, 2*stride, ...` along each axis, the
/// last offset clamped to `dim - window` so the far border is covered.
/// Ordered row-major (y outer, x inner).
pub fn tile_windows(h: usize, w: usize, window: usize, stride: usize) -> Result<Vec<WindowRect>, SegmentError> {
    if window == 0 || stride == 0 {
        return Err(SegmentError::InvalidTiling("window and stride must be >= 1".into()));
    }
    if stride > window {
        return Err(SegmentError::InvalidTiling(format!(
            "stride {stride} exceeds window {window}; windows would leave gaps"
        )));
    }
    if window > h || window > w {
        return Err(SegmentError::WindowTooLarge {
            height: h,
            width: w,
            window,
        });
    }
    let ys = axis_offsets(h, window, stride);
    let xs = axis_offsets(w, window, stride);
    Ok(ys
        .iter()
        .flat_map(|&y0| {
            xs.iter().map(move |&x0| WindowRect {
                x0,
                y0,
                w: window,
                h: window,
            })
        })
        .collect())
}

/// Cosine logits `z_v * z_t^T`, `[L x C]`.
pub fn classify_patches(z_v: &Tensor, text: &TextEmbeddings) -> Result<Tensor, SegmentError> {
    let (_, dv) = z_v.dims2()?;
    let (_, dt) = text.z_t.dims2()?;
    if dv != dt {
        return Err(SegmentError::Dimension(format!(
            "visual embeddings have width {dv}, text embeddings {dt}"
        )));
    }
    Ok(matmul_nt(z_v, &text.z_t)?)
}

/// Running per-pixel logit sums and window hit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCanvas {
    height: usize,
    width: usize,
    classes: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl LogitCanvas {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            sum: vec![0.0; height * width * classes],
            count: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, x: usize, y: usize) -> u32 {
        self.count[y * self.width + x]
    }

    /// Summed logits at a pixel.
    pub fn sum_at(&self, x: usize, y: usize) -> &[f64] {
        let p = (y * self.width + x) * self.classes;
        &self.sum[p..p + self.classes]
    }

    /// Resizes a window's `[H_g x W_g x C]` patch logits to the rect and adds
    /// them in.
    pub fn add_window(&mut self, rect: WindowRect, grid_logits: &Tensor) -> Result<(), SegmentError> {
        if rect.x0 + rect.w > self.width || rect.y0 + rect.h > self.height || rect.w == 0 || rect.h == 0 {
            return Err(SegmentError::RectOutOfBounds {
                x0: rect.x0,
                y0: rect.y0,
                w: rect.w,
                h: rect.h,
                width: self.width,
                height: self.height,
            });
        }
        match grid_logits.shape() {
            [_, _, c] if *c == self.classes => {}
            s => {
                return Err(SegmentError::Dimension(format!(
                    "window logits {s:?}, canvas has {} classes",
                    self.classes
                )))
            }
        }
        let pixels = bilinear_resize_grid(grid_logits, rect.h, rect.w)?;
        let c = self.classes;
        for dy in 0..rect.h {
            for dx in 0..rect.w {
                let p = (rect.y0 + dy) * self.width + rect.x0 + dx;
                let src = &pixels.data()[(dy * rect.w + dx) * c..(dy * rect.w + dx + 1) * c];
                for (s, &v) in self.sum[p * c..(p + 1) * c].iter_mut().zip(src) {
                    *s += v as f64;
                }
                self.count[p] += 1;
            }
        }
        Ok(())
    }

    /// Mean logits `sum / count` as an `[H x W x C]` tensor.
    pub fn mean_logits(&self) -> Result<Tensor, SegmentError> {
        self.first_uncovered()?;
        let c = self.classes;
        let data = self
            .sum
            .chunks(c)
            .zip(&self.count)
            .flat_map(|(s, &n)| s.iter().map(move |v| (v / n as f64) as f32))
            .collect();
        Ok(Tensor::new(vec![self.height, self.width, c], data)?)
    }

    fn first_uncovered(&self) -> Result<(), SegmentError> {
        match self.count.iter().position(|&n| n == 0) {
            Some(p) => Err(SegmentError::Uncovered {
                x: p % self.width,
                y: p / self.width,
            }),
            None => Ok(()),
        }
    }
}

/// Adds every window's logits into the canvas in the given order.
pub fn stitch(windows: &[(WindowRect, Tensor)], mut canvas: LogitCanvas) -> Result<LogitCanvas, SegmentError> {
    for (rect, logits) in windows {
        canvas.add_window(*rect, logits)?;
    }
    Ok(canvas)
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, SegmentError> {
        if labels.len() != height * width {
            return Err(SegmentError::Dimension(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Final segmentation output.
pub type SegmentationMap = LabelMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalizeOptions {
    /// Assign class 0 where the best mean logit falls below this value.
    pub background_threshold: Option<f32>,
}

/// Argmax over classes of the mean logits; ties go to the lowest index.
pub fn finalize(canvas: &LogitCanvas, opts: &FinalizeOptions) -> Result<SegmentationMap, SegmentError> {
    canvas.first_uncovered()?;
    let c = canvas.classes;
    let labels = canvas
        .sum
        .chunks(c)
        .zip(&canvas.count)
        .map(|(s, &n)| {
            let mut best = 0usize;
            let mut best_val = s[0] / n as f64;
            for (k, v) in s.iter().enumerate().skip(1) {
                let v = v / n as f64;
                if v > best_val {
                    best = k;
                    best_val = v;
                }
            }
            match opts.background_threshold {
                Some(t) if best_val < t as f64 => 0,
                _ => best as u32,
            }
        })
        .collect();
    LabelMap::new(canvas.height, canvas.width, labels)
}

/// Patch logits of one window on its attention grid, `[H_g x W_g x C]`.
pub fn window_logits(
    window: &WindowFeatures,
    weights: &ClipHeadWeights,
    text: &TextEmbeddings,
    cfg: &PamConfig,
) -> Result<Tensor, SegmentError> {
    let attn = attention_scores(window, cfg)?;
    let z_v = apply_pam(&attn, &window.v_clip, window.clip_grid, weights)?;
    let logits = classify_patches(&z_v, text)?;
    Ok(logits.reshape(vec![attn.grid.h, attn.grid.w, text.num_classes()])?)
}

/// Computes every window (in parallel on the current rayon pool) and stitches
/// them in bundle order, so the result does not depend on scheduling.
pub fn pipeline_canvas(
    bundle: &FeatureBundle,
    weights: &ClipHeadWeights,
    text: &TextEmbeddings,
    cfg: &PamConfig,
) -> Result<LogitCanvas, SegmentError> {
    cfg.validate()?;
    let per_window = bundle
        .windows
        .par_iter()
        .map(|w| window_logits(w, weights, text, cfg).map(|t| (w.rect, t)))
        .collect::<Result<Vec<_>, _>>()?;
    stitch(
        &per_window,
        LogitCanvas::new(bundle.resized_h, bundle.resized_w, text.num_classes()),
    )
}

pub fn run_pipeline(
    bundle: &FeatureBundle,
    weights: &ClipHeadWeights,
    text: &TextEmbeddings,
    cfg: &PamConfig,
    opts: &FinalizeOptions,
) -> Result<SegmentationMap, SegmentError> {
    finalize(&pipeline_canvas(bundle, weights, text, cfg)?, opts)
}
