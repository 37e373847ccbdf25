//! Synthetic inputs shared by the criterion benches.

use proxyseg_core::bundle::{ClipHeadWeights, Grid, TextEmbeddings, WindowFeatures};
use proxyseg_core::segmenter::WindowRect;
use proxyseg_core::tensor::{l2_normalize_rows, Tensor, L2_EPS};

/// Deterministic pseudo-random values in `[-1, 1)` (xorshift).
pub fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), values(shape.iter().product(), seed)).expect("finite values")
}

/// A window shaped like CLIP ViT-B/16 values (21x21, 12 heads of 64) under
/// DINO ViT-B/8 features (42x42x768), scaled down by `shrink`.
pub fn window(shrink: usize) -> WindowFeatures {
    let (hx, hv, heads, dv, dx) = (42 / shrink, 21 / shrink, 12, 64 / shrink, 768 / shrink);
    WindowFeatures {
        rect: WindowRect {
            x0: 0,
            y0: 0,
            w: 336,
            h: 336,
        },
        x_vfm: tensor(&[hx * hx, dx], 1),
        vfm_grid: Grid { h: hx, w: hx },
        v_clip: tensor(&[heads, hv * hv, dv], 2),
        clip_grid: Grid { h: hv, w: hv },
        q_clip: Some(tensor(&[heads, hv * hv, dv], 3)),
        k_clip: Some(tensor(&[heads, hv * hv, dv], 4)),
    }
}

pub fn weights(d: usize, d_joint: usize) -> ClipHeadWeights {
    ClipHeadWeights {
        out_proj_weight: tensor(&[d, d], 5),
        out_proj_bias: tensor(&[d], 6),
        ln_post_weight: tensor(&[d], 7),
        ln_post_bias: tensor(&[d], 8),
        ln_eps: 1e-5,
        visual_proj: tensor(&[d, d_joint], 9),
    }
}

pub fn text(classes: usize, d_joint: usize) -> TextEmbeddings {
    let z = l2_normalize_rows(&tensor(&[classes, d_joint], 10), L2_EPS).expect("2-d");
    TextEmbeddings::new(z, (0..classes).map(|c| format!("class{c}")).collect()).expect("unit rows")
}
