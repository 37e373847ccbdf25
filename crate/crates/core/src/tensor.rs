//! Dense row-major `f32` tensors and the numeric kernels every other module
//! is built from.
//!
//! Storage is 32-bit; every reduction (inner products, means, variances,
//! softmax normalizers) accumulates in 64-bit with a fixed left-to-right
//! order, so results are bit-reproducible regardless of thread count.

use rayon::prelude::*;

use crate::error::TensorError;

/// Rows-times-columns threshold above which `matmul` fans rows out to rayon.
const PAR_THRESHOLD: usize = 64 * 64;

/// Default epsilon for [`l2_normalize_rows`].
pub const L2_EPS: f32 = 1e-12;

/// A dense, row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive, the buffer
    /// length matches, and every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new", index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    /// Builds a 2-d tensor from nested rows. Handy in tests and fixtures.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, TensorError> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(TensorError::DataLength {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Self { shape, data: self.data })
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::RankMismatch {
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of the tensor viewed as `[prod(leading) x last]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Slice `i` along the leading axis, as an owned tensor.
    pub fn index_axis0(&self, i: usize) -> Result<Self, TensorError> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "index_axis0",
                lhs: self.shape.clone(),
                rhs: vec![i],
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }

    fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, index });
        }
        Ok(Self { shape, data })
    }
}

/// An additive attention mask whose entries are exactly `0` or `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl MaskTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidShape(vec![rows, cols]));
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|&v| !(v == 0.0 || v == f32::NEG_INFINITY)) {
            return Err(TensorError::InvalidMaskEntry { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a mask from a keep-predicate: `true` keeps (0), `false` masks (-inf).
    pub fn from_keep(rows: usize, cols: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(if keep(i, j) { 0.0 } else { f32::NEG_INFINITY });
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j] == f32::NEG_INFINITY
    }

    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|v| **v == f32::NEG_INFINITY).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.data.len() as f64
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// `a[M x K] * b[K x N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    // Column-major copy of b so each output is a contiguous dot product.
    let mut bt = vec![0.0f32; k * n];
    for r in 0..k {
        for c in 0..n {
            bt[c * k + r] = b.data[r * n + c];
        }
    }
    let out = rows_times_cols(&a.data, &bt, m, k, n);
    Tensor::checked("matmul", vec![m, n], out)
}

/// `a[M x K] * b[N x K]^T`, without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let out = rows_times_cols(&a.data, &b.data, m, k, n);
    Tensor::checked("matmul_nt", vec![m, n], out)
}

/// Shared inner loop: `lhs` is row-major `[m x k]`, `rhs_cols` holds the `n`
/// right-hand columns contiguously (`[n x k]`).
fn rows_times_cols(lhs: &[f32], rhs_cols: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let fill = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &lhs[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot_f64(a_row, &rhs_cols[j * k..(j + 1) * k]) as f32;
        }
    };
    if m * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        out.chunks_mut(n).enumerate().for_each(fill);
    }
    out
}

/// Row-wise softmax over the last axis with an optional additive mask.
///
/// The mask has `R` rows of length `L`; score row `r` uses mask row `r % R`,
/// which covers both a single `1 x L` mask and an `L x L` mask repeated over
/// leading (head) axes. Masked positions come out as exactly `0`. A row with
/// every position masked is an error.
pub fn softmax_masked(scores: &Tensor, mask: Option<&MaskTensor>) -> Result<Tensor, TensorError> {
    let cols = *scores.shape.last().expect("rank >= 1");
    let rows = scores.data.len() / cols;
    if let Some(m) = mask {
        if m.cols != cols || !rows.is_multiple_of(m.rows) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_masked",
                lhs: scores.shape.clone(),
                rhs: vec![m.rows, m.cols],
            });
        }
    }
    let mut out = vec![0.0f32; scores.data.len()];
    let mut buf = vec![0.0f64; cols];
    for r in 0..rows {
        let src = &scores.data[r * cols..(r + 1) * cols];
        let mask_row = mask.map(|m| {
            let mr = r % m.rows;
            &m.data[mr * cols..(mr + 1) * cols]
        });
        let kept = |j: usize| mask_row.is_none_or(|mr| mr[j] == 0.0);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in src.iter().enumerate() {
            if kept(j) {
                max = max.max(v as f64);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(TensorError::FullyMasked { row: r });
        }
        let mut sum = 0.0f64;
        for (j, &v) in src.iter().enumerate() {
            buf[j] = if kept(j) {
                let e = (v as f64 - max).exp();
                sum += e;
                e
            } else {
                0.0
            };
        }
        for (o, &e) in out[r * cols..(r + 1) * cols].iter_mut().zip(&buf) {
            *o = (e / sum) as f32;
        }
    }
    Tensor::checked("softmax_masked", scores.shape.clone(), out)
}

/// Scales each row to unit Euclidean norm as `row / (||row|| + eps)`.
/// Rows whose norm is below `eps` become zero rows.
pub fn l2_normalize_rows(t: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
    let (rows, cols) = t.dims2()?;
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        let src = t.row(i);
        let norm = dot_f64(src, src).sqrt();
        if norm < eps as f64 {
            continue;
        }
        let denom = norm + eps as f64;
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(src) {
            *o = (v as f64 / denom) as f32;
        }
    }
    Tensor::checked("l2_normalize_rows", t.shape.clone(), out)
}

/// Per-row standardisation followed by an elementwise affine transform.
pub fn layer_norm(t: &Tensor, weight: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
    let (rows, cols) = t.dims2()?;
    if weight.data.len() != cols || bias.data.len() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: t.shape.clone(),
            rhs: weight.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        let src = t.row(i);
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = src
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / cols as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, o) in out[i * cols..(i + 1) * cols].iter_mut().enumerate() {
            let z = (src[j] as f64 - mean) * inv;
            *o = (z * weight.data[j] as f64 + bias.data[j] as f64) as f32;
        }
    }
    Tensor::checked("layer_norm", t.shape.clone(), out)
}

/// Source coordinate and blend weight along one axis, half-pixel centres.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of an `H x W x D` grid to `out_h x out_w x D`.
///
/// Sampling uses half-pixel centres, `src = (dst + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
pub fn bilinear_resize_grid(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, TensorError> {
    let (h, w, d) = match t.shape.as_slice() {
        [h, w, d] => (*h, *w, *d),
        _ => {
            return Err(TensorError::RankMismatch {
                expected: 3,
                got: t.shape.clone(),
            })
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidShape(vec![out_h, out_w, d]));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(t.clone());
    }
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * d);
    for ty in &ys {
        for tx in &xs {
            let p00 = (ty.lo * w + tx.lo) * d;
            let p01 = (ty.lo * w + tx.hi) * d;
            let p10 = (ty.hi * w + tx.lo) * d;
            let p11 = (ty.hi * w + tx.hi) * d;
            for c in 0..d {
                let top = t.data[p00 + c] as f64 * (1.0 - tx.frac) + t.data[p01 + c] as f64 * tx.frac;
                let bot = t.data[p10 + c] as f64 * (1.0 - tx.frac) + t.data[p11 + c] as f64 * tx.frac;
                out.push((top * (1.0 - ty.frac) + bot * ty.frac) as f32);
            }
        }
    }
    Tensor::checked("bilinear_resize_grid", vec![out_h, out_w, d], out)
}

/// Arithmetic mean of every entry, accumulated in 64-bit.
pub fn mean_all(t: &Tensor) -> Result<f64, TensorError> {
    if t.data.is_empty() {
        return Err(TensorError::Empty);
    }
    Ok(t.data.iter().map(|&v| v as f64).sum::<f64>() / t.data.len() as f64)
}
