//! Naive `f64` reference implementation of the proxy-attention pipeline.
//!
//! Written directly from the formulas with nested `Vec`s and no calls into
//! the engine's kernels; tests only read engine inputs through `data()`.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy)]
pub enum OracleMask {
    Adaptive,
    Hard(f64),
    None,
}

pub fn from_flat(data: &[f32], rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|i| (0..cols).map(|j| data[i * cols + j] as f64).collect())
        .collect()
}

pub fn flatten(m: &Mat) -> Vec<f32> {
    m.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect()
}

pub fn max_abs_diff(a: &Mat, b: &[f32]) -> f64 {
    let mut worst = 0.0f64;
    let cols = a[0].len();
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b[i * cols + j] as f64).abs());
        }
    }
    worst
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect())
        .collect()
}

pub fn normalize_rows(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|v| v / (n + 1e-12)).collect()
            }
        })
        .collect()
}

pub fn cosine(x: &Mat) -> Mat {
    let xn = normalize_rows(x);
    let l = xn.len();
    let mut s = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            s[i][j] = xn[i].iter().zip(&xn[j]).map(|(a, b)| a * b).sum();
        }
    }
    s
}

/// Normalisation, masking with a forced diagonal, and masked softmax.
pub fn attention_from_similarity(s: &Mat, beta: f64, gamma: f64, mask: OracleMask) -> Mat {
    let l = s.len();
    let mut total = 0.0;
    for row in s {
        for v in row {
            total += v;
        }
    }
    let mean = total / (l * l) as f64;
    let mut out = vec![vec![0.0; l]; l];
    for i in 0..l {
        let mut logits = vec![f64::NEG_INFINITY; l];
        for j in 0..l {
            let a = gamma * (s[i][j] - beta * mean);
            let (operand, keep) = match mask {
                OracleMask::Adaptive => (a, a >= 0.0),
                OracleMask::Hard(alpha) => (s[i][j], s[i][j] >= alpha),
                OracleMask::None => (a, true),
            };
            if keep || i == j {
                logits[j] = operand;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits
            .iter()
            .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() })
            .collect();
        let z: f64 = exps.iter().sum();
        for j in 0..l {
            out[i][j] = exps[j] / z;
        }
    }
    out
}

pub fn proxy_attention(x: &Mat, beta: f64, gamma: f64, mask: OracleMask) -> Mat {
    attention_from_similarity(&cosine(x), beta, gamma, mask)
}

/// Bilinear resize of `grid[y][x][c]` with half-pixel centres.
pub fn resize(grid: &[Vec<Vec<f64>>], oh: usize, ow: usize) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (grid.len(), grid[0].len());
    let sample = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), src - lo as f64)
    };
    (0..oh)
        .map(|y| {
            let (y0, y1, fy) = sample(y, h, oh);
            (0..ow)
                .map(|x| {
                    let (x0, x1, fx) = sample(x, w, ow);
                    (0..grid[0][0].len())
                        .map(|c| {
                            let top = grid[y0][x0][c] * (1.0 - fx) + grid[y0][x1][c] * fx;
                            let bot = grid[y1][x0][c] * (1.0 - fx) + grid[y1][x1][c] * fx;
                            top * (1.0 - fy) + bot * fy
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn to_grid(rows: &Mat, h: usize, w: usize) -> Vec<Vec<Vec<f64>>> {
    (0..h)
        .map(|y| (0..w).map(|x| rows[y * w + x].clone()).collect())
        .collect()
}

pub fn from_grid(grid: &[Vec<Vec<f64>>]) -> Mat {
    grid.iter().flat_map(|row| row.iter().cloned()).collect()
}

pub struct OracleWeights {
    pub out_proj_weight: Mat,
    pub out_proj_bias: Vec<f64>,
    pub ln_weight: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub ln_eps: f64,
    pub visual_proj: Mat,
}

/// Steps: resize values, per-head aggregation, concat, out-proj, layer
/// norm, visual projection, row normalisation.
pub fn pam(attn_per_head: &[Mat], v: &[Mat], v_grid: (usize, usize), target: (usize, usize), w: &OracleWeights) -> Mat {
    let n = v.len();
    let l = target.0 * target.1;
    let dv = v[0][0].len();
    let d = n * dv;
    let mut fused = vec![vec![0.0; d]; l];
    for h in 0..n {
        let vh = from_grid(&resize(&to_grid(&v[h], v_grid.0, v_grid.1), target.0, target.1));
        let a = &attn_per_head[if attn_per_head.len() == 1 { 0 } else { h }];
        for i in 0..l {
            for j in 0..dv {
                fused[i][h * dv + j] = (0..l).map(|k| a[i][k] * vh[k][j]).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(l);
    for row in &fused {
        let proj: Vec<f64> = (0..d)
            .map(|o| (0..d).map(|i| row[i] * w.out_proj_weight[o][i]).sum::<f64>() + w.out_proj_bias[o])
            .collect();
        let mean = proj.iter().sum::<f64>() / d as f64;
        let var = proj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let normed: Vec<f64> = proj
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + w.ln_eps).sqrt() * w.ln_weight[i] + w.ln_bias[i])
            .collect();
        let dj = w.visual_proj[0].len();
        let joint: Vec<f64> = (0..dj)
            .map(|c| (0..d).map(|i| normed[i] * w.visual_proj[i][c]).sum())
            .collect();
        out.push(joint);
    }
    normalize_rows(&out)
}

pub fn logits(z: &Mat, text: &Mat) -> Mat {
    z.iter()
        .map(|r| text.iter().map(|t| r.iter().zip(t).map(|(a, b)| a * b).sum()).collect())
        .collect()
}
