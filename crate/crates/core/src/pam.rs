//! Proxy attention: patch-to-patch attention taken from a vision foundation
//! model's feature correspondence, normalised by a global shift and scale,
//! masked to non-negative entries, and used to aggregate CLIP's value
//! embeddings into joint-space dense features.
//!
//! The same normalise/mask/softmax pipeline can be driven by CLIP's own
//! query or key embeddings (`qq`, `kk`), and the plain scaled dot-product
//! `q k^T` attention is available as a baseline (`qk`, `vanilla`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::{ClipHeadWeights, Grid, WindowFeatures};
use crate::error::PamError;
use crate::tensor::{
    bilinear_resize_grid, l2_normalize_rows, layer_norm, matmul, matmul_nt, mean_all, softmax_masked, MaskTensor,
    Tensor, L2_EPS,
};

pub const DEFAULT_BETA: f64 = 1.2;
pub const DEFAULT_GAMMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MaskMode {
    /// Keep entries whose normalised score is non-negative.
    Adaptive,
    /// Keep entries whose raw cosine similarity is at least `alpha`.
    Hard {
        alpha: f64,
    },
    None,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Adaptive => f.write_str("adaptive"),
            Self::Hard { alpha } => write!(f, "hard(alpha={alpha})"),
            Self::None => f.write_str("none"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnSource {
    Proxy,
    Qq,
    Kk,
    Qk,
    Vanilla,
}

impl AttnSource {
    pub const ALL: [AttnSource; 5] = [Self::Proxy, Self::Qq, Self::Kk, Self::Qk, Self::Vanilla];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proxy => "proxy",
            Self::Qq => "qq",
            Self::Kk => "kk",
            Self::Qk => "qk",
            Self::Vanilla => "vanilla",
        }
    }

    /// Whether attention lives on the CLIP patch grid rather than the VFM grid.
    pub fn on_clip_grid(self) -> bool {
        self != Self::Proxy
    }
}

impl fmt::Display for AttnSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttnSource {
    type Err = PamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| PamError::Config(format!("unknown attention source `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PamConfig {
    /// Shifting factor.
    pub beta: f64,
    /// Scaling factor, must be positive.
    pub gamma: f64,
    pub mask_mode: MaskMode,
    pub attn_source: AttnSource,
    /// Scale `q k^T` by `1/sqrt(D_head)` for the `qk`/`vanilla` sources.
    pub scale_qk: bool,
}

impl Default for PamConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            mask_mode: MaskMode::Adaptive,
            attn_source: AttnSource::Proxy,
            scale_qk: true,
        }
    }
}

impl PamConfig {
    pub fn validate(&self) -> Result<(), PamError> {
        if !self.beta.is_finite() {
            return Err(PamError::Config("beta must be finite".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(PamError::Config("gamma must be finite and > 0".into()));
        }
        if let MaskMode::Hard { alpha } = self.mask_mode {
            if !alpha.is_finite() {
                return Err(PamError::Config("alpha must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attention {
    /// One `L x L` distribution shared by every head.
    Shared(Tensor),
    /// `n x L x L`, one distribution per head.
    PerHead(Tensor),
}

impl Attention {
    /// Number of query (and key) positions.
    pub fn len(&self) -> usize {
        match self {
            Self::Shared(t) => t.shape()[0],
            Self::PerHead(t) => t.shape()[1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Head-averaged `L x L` view.
    pub fn mean_over_heads(&self) -> Result<Tensor, PamError> {
        match self {
            Self::Shared(t) => Ok(t.clone()),
            Self::PerHead(t) => {
                let (n, l) = (t.shape()[0], t.shape()[1]);
                let mut acc = vec![0.0f64; l * l];
                for h in 0..n {
                    for (a, &v) in acc.iter_mut().zip(&t.data()[h * l * l..(h + 1) * l * l]) {
                        *a += v as f64;
                    }
                }
                Ok(Tensor::new(
                    vec![l, l],
                    acc.into_iter().map(|v| (v / n as f64) as f32).collect(),
                )?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub attn: Attention,
    /// Patch grid the attention rows live on.
    pub grid: Grid,
    /// Fraction of score entries suppressed by the mask.
    pub mask_fraction: f64,
}

/// Cosine similarity matrix `x̂ x̂^T` of the rows of `x`.
pub fn similarity(x: &Tensor) -> Result<Tensor, PamError> {
    let xn = l2_normalize_rows(x, L2_EPS)?;
    Ok(matmul_nt(&xn, &xn)?)
}

/// `A = gamma * (S - beta * mean(S))`, the mean taken over all entries
/// including the diagonal.
pub fn normalize_similarity(s: &Tensor, beta: f64, gamma: f64) -> Result<Tensor, PamError> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(PamError::Config("gamma must be > 0".into()));
    }
    let shift = beta * mean_all(s)?;
    let data = s.data().iter().map(|&v| (gamma * (v as f64 - shift)) as f32).collect();
    Ok(Tensor::new(s.shape().to_vec(), data)?)
}

/// Keeps entries `>= threshold` and masks the rest, then unmasks the
/// diagonal so every row keeps at least its own position.
///
/// Adaptive masking is `build_mask(A, 0.0)`; hard masking is
/// `build_mask(S, alpha)` on raw cosine similarities.
pub fn build_mask(scores: &Tensor, threshold: f64) -> Result<MaskTensor, PamError> {
    let (l, _) = square(scores)?;
    let d = scores.data();
    Ok(MaskTensor::from_keep(l, l, |i, j| {
        i == j || d[i * l + j] as f64 >= threshold
    }))
}

/// The threshold rule alone, without the diagonal floor. Rows can end up
/// fully masked; exposed for diagnostics.
pub fn build_mask_unforced(scores: &Tensor, threshold: f64) -> Result<MaskTensor, PamError> {
    let (l, _) = square(scores)?;
    let d = scores.data();
    Ok(MaskTensor::from_keep(l, l, |i, j| d[i * l + j] as f64 >= threshold))
}

fn square(t: &Tensor) -> Result<(usize, usize), PamError> {
    match t.shape() {
        [a, b] if a == b => Ok((*a, *b)),
        s => Err(PamError::Shape(format!("expected a square matrix, got {s:?}"))),
    }
}

fn scale(t: &Tensor, factor: f64) -> Result<Tensor, PamError> {
    let data = t.data().iter().map(|&v| (factor * v as f64) as f32).collect();
    Ok(Tensor::new(t.shape().to_vec(), data)?)
}

/// Normalise, mask and softmax a similarity matrix according to `cfg`.
pub fn attention_from_similarity(s: &Tensor, cfg: &PamConfig) -> Result<(Tensor, f64), PamError> {
    cfg.validate()?;
    match cfg.mask_mode {
        MaskMode::Adaptive => {
            let a = normalize_similarity(s, cfg.beta, cfg.gamma)?;
            let mask = build_mask(&a, 0.0)?;
            // softmax(A + M) == softmax(gamma * S + M): the beta shift is the
            // same constant on every entry and cancels row-wise.
            let attn = softmax_masked(&scale(s, cfg.gamma)?, Some(&mask))?;
            Ok((attn, mask.masked_fraction()))
        }
        MaskMode::Hard { alpha } => {
            let mask = build_mask(s, alpha)?;
            let attn = softmax_masked(s, Some(&mask))?;
            Ok((attn, mask.masked_fraction()))
        }
        MaskMode::None => Ok((softmax_masked(&scale(s, cfg.gamma)?, None)?, 0.0)),
    }
}

fn require<'a>(t: &'a Option<Tensor>, source: AttnSource, array: &'static str) -> Result<&'a Tensor, PamError> {
    t.as_ref().ok_or(PamError::MissingArray {
        source_name: source.name(),
        array,
    })
}

/// Concatenates heads feature-wise: `[n, L, D] -> [L, n*D]`.
pub fn fuse_heads(t: &Tensor) -> Result<Tensor, PamError> {
    let (n, l, dh) = dims3(t)?;
    let mut out = Vec::with_capacity(n * l * dh);
    for i in 0..l {
        for h in 0..n {
            out.extend_from_slice(&t.data()[(h * l + i) * dh..(h * l + i + 1) * dh]);
        }
    }
    Ok(Tensor::new(vec![l, n * dh], out)?)
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize), PamError> {
    match t.shape() {
        [n, l, d] => Ok((*n, *l, *d)),
        s => Err(PamError::Shape(format!("expected [n, L, D], got {s:?}"))),
    }
}

/// Per-head `softmax(q_h k_h^T * tau)`, stacked to `[n, L, L]`.
fn dot_product_attention(q: &Tensor, k: &Tensor, scale_qk: bool) -> Result<Tensor, PamError> {
    let (n, l, dh) = dims3(q)?;
    if k.shape() != q.shape() {
        return Err(PamError::Shape(format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    let tau = if scale_qk { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let mut data = Vec::with_capacity(n * l * l);
    for h in 0..n {
        let logits = scale(&matmul_nt(&q.index_axis0(h)?, &k.index_axis0(h)?)?, tau)?;
        data.extend(softmax_masked(&logits, None)?.into_data());
    }
    Ok(Tensor::new(vec![n, l, l], data)?)
}

/// Attention rows for one window according to `cfg.attn_source`.
pub fn attention_scores(window: &WindowFeatures, cfg: &PamConfig) -> Result<AttentionResult, PamError> {
    cfg.validate()?;
    let source = cfg.attn_source;
    match source {
        AttnSource::Proxy => {
            let s = similarity(&window.x_vfm)?;
            let (attn, mask_fraction) = attention_from_similarity(&s, cfg)?;
            Ok(AttentionResult {
                attn: Attention::Shared(attn),
                grid: window.vfm_grid,
                mask_fraction,
            })
        }
        AttnSource::Qq | AttnSource::Kk => {
            let t = if source == AttnSource::Qq {
                require(&window.q_clip, source, "q")?
            } else {
                require(&window.k_clip, source, "k")?
            };
            let s = similarity(&fuse_heads(t)?)?;
            let (attn, mask_fraction) = attention_from_similarity(&s, cfg)?;
            Ok(AttentionResult {
                attn: Attention::Shared(attn),
                grid: window.clip_grid,
                mask_fraction,
            })
        }
        AttnSource::Qk | AttnSource::Vanilla => {
            let q = require(&window.q_clip, source, "q")?;
            let k = require(&window.k_clip, source, "k")?;
            Ok(AttentionResult {
                attn: Attention::PerHead(dot_product_attention(q, k, cfg.scale_qk)?),
                grid: window.clip_grid,
                mask_fraction: 0.0,
            })
        }
    }
}

/// Pairwise patch scores used for the semantic-coherence analysis: raw
/// cosine correspondence for VFM features, head-averaged softmax attention
/// (`qq`, `kk`, `qk`) for CLIP embeddings.
pub fn coherence_scores(
    window: &WindowFeatures,
    source: AttnSource,
    scale_qk: bool,
) -> Result<(Tensor, Grid), PamError> {
    match source {
        AttnSource::Proxy => Ok((similarity(&window.x_vfm)?, window.vfm_grid)),
        _ => {
            let (a, b) = match source {
                AttnSource::Qq => {
                    let q = require(&window.q_clip, source, "q")?;
                    (q, q)
                }
                AttnSource::Kk => {
                    let k = require(&window.k_clip, source, "k")?;
                    (k, k)
                }
                _ => (
                    require(&window.q_clip, source, "q")?,
                    require(&window.k_clip, source, "k")?,
                ),
            };
            let per_head = dot_product_attention(a, b, scale_qk)?;
            Ok((Attention::PerHead(per_head).mean_over_heads()?, window.clip_grid))
        }
    }
}

/// Aggregates CLIP values with the given attention and maps the result into
/// the joint vision-language space.
///
/// Per head, values are resized onto the attention grid (when the grids
/// differ) and multiplied by the attention rows; heads are concatenated,
/// passed through the output projection, the post layer norm and the visual
/// projection, and finally row-normalised. There is no residual branch and
/// no MLP.
pub fn apply_pam(
    attn: &AttentionResult,
    v: &Tensor,
    v_grid: Grid,
    weights: &ClipHeadWeights,
) -> Result<Tensor, PamError> {
    let (n, lv, dv) = dims3(v)?;
    if lv != v_grid.len() {
        return Err(PamError::Shape(format!(
            "value length {lv} vs grid {}x{}",
            v_grid.h, v_grid.w
        )));
    }
    let d = n * dv;
    if weights.d() != d {
        return Err(PamError::Shape(format!(
            "heads {n} x D_v {dv} = {d}, weights expect {}",
            weights.d()
        )));
    }
    let target = attn.grid;
    let l = target.len();
    if attn.attn.len() != l {
        return Err(PamError::Shape(format!(
            "attention is {0}x{0}, grid has {l} cells",
            attn.attn.len()
        )));
    }
    if let Attention::PerHead(t) = &attn.attn {
        if t.shape()[0] != n {
            return Err(PamError::Shape(format!(
                "attention has {} heads, values {n}",
                t.shape()[0]
            )));
        }
    }

    let mut fused = vec![0.0f32; l * d];
    for h in 0..n {
        let head = v.index_axis0(h)?.reshape(vec![v_grid.h, v_grid.w, dv])?;
        let head = bilinear_resize_grid(&head, target.h, target.w)?.reshape(vec![l, dv])?;
        let out = match &attn.attn {
            Attention::Shared(a) => matmul(a, &head)?,
            Attention::PerHead(a) => matmul(&a.index_axis0(h)?, &head)?,
        };
        for i in 0..l {
            fused[i * d + h * dv..i * d + (h + 1) * dv].copy_from_slice(out.row(i));
        }
    }
    let fused = Tensor::new(vec![l, d], fused)?;

    let projected = matmul_nt(&fused, &weights.out_proj_weight)?;
    let bias = weights.out_proj_bias.data();
    let projected = Tensor::new(
        vec![l, d],
        projected
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(a, b)| a + b))
            .collect(),
    )?;
    let normed = layer_norm(
        &projected,
        &weights.ln_post_weight,
        &weights.ln_post_bias,
        weights.ln_eps,
    )?;
    let joint = matmul(&normed, &weights.visual_proj)?;
    Ok(l2_normalize_rows(&joint, L2_EPS)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::WindowRect;
    use proptest::prelude::*;

    fn window(x: Tensor, grid: Grid) -> WindowFeatures {
        WindowFeatures {
            rect: WindowRect {
                x0: 0,
                y0: 0,
                w: 4,
                h: 4,
            },
            x_vfm: x,
            vfm_grid: grid,
            v_clip: Tensor::zeros(&[1, grid.len(), 2]).unwrap(),
            clip_grid: grid,
            q_clip: None,
            k_clip: None,
        }
    }

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], d).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&eye(3)).unwrap(), eye(3));
        let twin = Tensor::from_rows(&[[0.3, -0.4], [0.3, -0.4]]).unwrap();
        for &v in similarity(&twin).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_worked_example() {
        let a = normalize_similarity(&eye(2), 1.2, 3.0).unwrap();
        let want = [1.2, -1.8, -1.8, 1.2];
        for (g, w) in a.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
        let s = Tensor::from_rows(&[[1.0, 0.25], [0.25, 1.0]]).unwrap();
        assert_eq!(
            normalize_similarity(&s, 0.0, 3.0).unwrap().data(),
            &[3.0, 0.75, 0.75, 3.0]
        );
        assert!(matches!(normalize_similarity(&s, 1.0, 0.0), Err(PamError::Config(_))));
    }

    #[test]
    fn mask_examples() {
        let a = Tensor::from_rows(&[[1.2, -1.8], [-1.8, 1.2]]).unwrap();
        let m = build_mask(&a, 0.0).unwrap();
        assert_eq!(m.data(), &[0.0, f32::NEG_INFINITY, f32::NEG_INFINITY, 0.0]);
        let ones = Tensor::new(vec![3, 3], vec![1.0; 9]).unwrap();
        assert_eq!(build_mask(&ones, 0.8).unwrap().masked_count(), 0);
    }

    #[test]
    fn unforced_mask_can_kill_rows() {
        let ones = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let a = normalize_similarity(&ones, 1.2, 3.0).unwrap();
        let m = build_mask_unforced(&a, 0.0).unwrap();
        assert_eq!(m.masked_count(), 4);
        assert!(softmax_masked(&a, Some(&m)).is_err());
        assert_eq!(softmax_masked(&a, Some(&build_mask(&a, 0.0).unwrap())).unwrap(), eye(2));
    }

    #[test]
    fn proxy_worked_example_is_identity() {
        let w = window(eye(2), Grid { h: 1, w: 2 });
        let r = attention_scores(&w, &PamConfig::default()).unwrap();
        assert_eq!(r.attn, Attention::Shared(eye(2)));
        assert_eq!(r.mask_fraction, 0.5);
    }

    #[test]
    fn constant_features_degenerate_to_identity() {
        let x = Tensor::new(vec![4, 3], vec![0.5; 12]).unwrap();
        let r = attention_scores(&window(x, Grid { h: 2, w: 2 }), &PamConfig::default()).unwrap();
        assert_eq!(r.attn, Attention::Shared(eye(4)));
    }

    #[test]
    fn ablation_sources_need_qk() {
        let w = window(eye(2), Grid { h: 1, w: 2 });
        for source in [AttnSource::Qq, AttnSource::Kk, AttnSource::Qk, AttnSource::Vanilla] {
            let cfg = PamConfig {
                attn_source: source,
                ..PamConfig::default()
            };
            assert!(matches!(attention_scores(&w, &cfg), Err(PamError::MissingArray { .. })));
        }
    }

    #[test]
    fn qk_attention_is_per_head_scaled_softmax() {
        let q = Tensor::new(vec![2, 2, 4], (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
        let k = Tensor::new(vec![2, 2, 4], (0..16).map(|i| 1.0 - i as f32 * 0.05).collect()).unwrap();
        let mut w = window(eye(2), Grid { h: 1, w: 2 });
        w.q_clip = Some(q.clone());
        w.k_clip = Some(k.clone());
        let cfg = PamConfig {
            attn_source: AttnSource::Qk,
            ..PamConfig::default()
        };
        let Attention::PerHead(a) = attention_scores(&w, &cfg).unwrap().attn else {
            panic!("expected per-head attention")
        };
        for h in 0..2 {
            for i in 0..2 {
                let logits: Vec<f64> = (0..2)
                    .map(|j| {
                        (0..4)
                            .map(|c| q.data()[(h * 2 + i) * 4 + c] as f64 * k.data()[(h * 2 + j) * 4 + c] as f64)
                            .sum::<f64>()
                            / 2.0
                    })
                    .collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    assert!((a.data()[(h * 2 + i) * 2 + j] as f64 - l.exp() / z).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fuse_heads_interleaves_features() {
        let t = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(fuse_heads(&t).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        assert!(PamConfig {
            gamma: 0.0,
            ..PamConfig::default()
        }
        .validate()
        .is_err());
        assert!(PamConfig {
            mask_mode: MaskMode::Hard { alpha: f64::NAN },
            ..PamConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!("kk".parse::<AttnSource>().unwrap(), AttnSource::Kk);
        assert!("xx".parse::<AttnSource>().is_err());
    }

    fn feats(l: usize, d: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-1.0f32..1.0, l * d).prop_map(move |v| Tensor::new(vec![l, d], v).unwrap())
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_with_unit_diagonal(x in feats(5, 3)) {
            let s = similarity(&x).unwrap();
            for i in 0..5 {
                let norm: f32 = x.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm > 1e-3 {
                    prop_assert!((s.data()[i * 5 + i] - 1.0).abs() < 1e-6);
                }
                for j in 0..5 {
                    prop_assert!((s.data()[i * 5 + j] - s.data()[j * 5 + i]).abs() < 1e-6);
                    prop_assert!(s.data()[i * 5 + j].abs() <= 1.0 + 1e-6);
                }
            }
        }

        #[test]
        fn hard_mask_fraction_is_monotone_in_alpha(x in feats(6, 4), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s = similarity(&x).unwrap();
            prop_assert!(build_mask(&s, lo).unwrap().masked_count() <= build_mask(&s, hi).unwrap().masked_count());
        }

        #[test]
        fn attention_rows_are_distributions(x in feats(6, 4), beta in 0.0f64..2.0, gamma in 0.5f64..6.0) {
            let cfg = PamConfig { beta, gamma, ..PamConfig::default() };
            let r = attention_scores(&window(x, Grid { h: 2, w: 3 }), &cfg).unwrap();
            let Attention::Shared(a) = r.attn else { unreachable!() };
            for i in 0..6 {
                let s: f64 = a.row(i).iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(a.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
