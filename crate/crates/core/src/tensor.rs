//! Dense f32 tensor kernels.
//!
//! Storage is a flat row-major `Vec<f32>` with explicit shape metadata, the
//! same layout for vectors, matrices, and latent grids. Reductions (matmul
//! inner products, softmax row sums, RMS means) accumulate in f64 and round
//! once at the end; inputs and outputs stay f32.
//!
//! Everything here is a pure function of its inputs. The fallible entry
//! points (`matmul`, `softmax_rows`, `rms_norm`, `trilinear_resample`) return
//! `Result`; the small combinators (`add`, `mul`, `scale`, ...) assert on
//! shape errors since their callers construct the shapes.

use crate::error::{CoreError, Result};

/// Flat row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// 1-element tensor, used for scalar losses and gate parameters.
    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, rhs: &Self) -> Self {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        self.zip(rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        self.zip(rhs, |a, b| a * b)
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        assert_eq!(self.shape, rhs.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    fn zip(&self, rhs: &Self, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, rhs.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn dot(&self, rhs: &Self) -> f64 {
        assert_eq!(self.shape, rhs.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// 2D transpose.
    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Max |element| (0 for empty tensors).
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }
}

/// Matrix product `[m,k] x [k,n] -> [m,n]`, f64 accumulation per output row.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let a_ik = a.data[i * k + kk] as f64;
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (j, &b_kj) in b_row.iter().enumerate() {
                acc[j] += a_ik * b_kj as f64;
            }
        }
        for j in 0..n {
            out.data[i * n + j] = acc[j] as f32;
        }
    }
    Ok(out)
}

/// Row softmax with optional additive bias.
///
/// Bias entries must be finite or `-inf`; a `-inf` entry yields exactly zero
/// weight. The row max is subtracted before exponentiation. A fully masked
/// row is an error rather than a NaN row.
pub fn softmax_rows(logits: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if logits.shape.len() != 2 {
        return Err(CoreError::ShapeMismatch {
            op: "softmax_rows",
            lhs: logits.shape.clone(),
            rhs: vec![],
        });
    }
    if let Some(b) = bias {
        if b.shape != logits.shape {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_rows",
                lhs: logits.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
    }
    let (m, n) = (logits.shape[0], logits.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = &logits.data[i * n..(i + 1) * n];
        let brow = bias.map(|b| &b.data[i * n..(i + 1) * n]);
        let z = |j: usize| row[j] + brow.map_or(0.0, |b| b[j]);
        let mut maxv = f32::NEG_INFINITY;
        for j in 0..n {
            maxv = maxv.max(z(j));
        }
        if maxv == f32::NEG_INFINITY {
            return Err(CoreError::DegenerateRow { row: i });
        }
        let mut sum = 0.0f64;
        for j in 0..n {
            let e = (z(j) - maxv).exp();
            out.data[i * n + j] = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for j in 0..n {
            out.data[i * n + j] *= inv;
        }
    }
    Ok(out)
}

/// RMS normalization: `y[i] = x[i] / sqrt(mean(x[i]^2) + eps) * gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    if x.shape.len() != 2 || gain.shape.len() != 1 || gain.shape[0] != x.shape[1] {
        return Err(CoreError::ShapeMismatch {
            op: "rms_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    assert!(eps > 0.0, "rms_norm eps must be positive");
    let (n, d) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = &x.data[i * d..(i + 1) * d];
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps as f64).sqrt() as f32;
        for j in 0..d {
            out.data[i * d + j] = row[j] * r * gain.data[j];
        }
    }
    Ok(out)
}

pub const RMS_EPS: f32 = 1e-6;

/// Video latent: a `[t, h, w, c]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Tensor,
}

impl LatentGrid {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Tensor) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(CoreError::Config(format!(
                "latent grid extents must be >= 1, got {}x{}x{}x{}",
                t, h, w, c
            )));
        }
        if data.shape() != [t, h, w, c] {
            return Err(CoreError::ShapeMismatch {
                op: "latent_grid",
                lhs: vec![t, h, w, c],
                rhs: data.shape().to_vec(),
            });
        }
        Ok(Self { t, h, w, c, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            t,
            h,
            w,
            c,
            data: Tensor::zeros(&[t, h, w, c]),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.data.data_mut()
    }

    pub fn idx(&self, ti: usize, hi: usize, wi: usize, ci: usize) -> usize {
        ((ti * self.h + hi) * self.w + wi) * self.c + ci
    }

    pub fn get(&self, ti: usize, hi: usize, wi: usize, ci: usize) -> f32 {
        self.data.data()[self.idx(ti, hi, wi, ci)]
    }

    pub fn set(&mut self, ti: usize, hi: usize, wi: usize, ci: usize, v: f32) {
        let i = self.idx(ti, hi, wi, ci);
        self.data.data_mut()[i] = v;
    }

    /// Same-shape elementwise combine, used by the samplers.
    pub fn zip(&self, rhs: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.dims() != rhs.dims() {
            return Err(CoreError::ShapeMismatch {
                op: "latent_zip",
                lhs: vec![self.t, self.h, self.w, self.c],
                rhs: vec![rhs.t, rhs.h, rhs.w, rhs.c],
            });
        }
        let data = Tensor {
            shape: self.data.shape.clone(),
            data: self
                .data
                .data()
                .iter()
                .zip(rhs.data.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        Ok(Self {
            t: self.t,
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        })
    }
}

// Source coordinate for output index i under align-corners resampling.
// A length-1 target axis samples the source center.
fn align_corners_coord(i: usize, n_src: usize, n_dst: usize) -> f64 {
    if n_dst == 1 {
        (n_src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_src as f64 - 1.0) / (n_dst as f64 - 1.0)
    }
}

// Split a source coordinate into (low index, high index, high weight).
fn split_coord(x: f64, n_src: usize) -> (usize, usize, f64) {
    if n_src == 1 {
        return (0, 0, 0.0);
    }
    let lo = (x.floor() as usize).min(n_src - 2);
    (lo, lo + 1, x - lo as f64)
}

/// Align-corners trilinear resampling of a latent grid, per channel.
///
/// Output index `i` on an axis of source length `n` and target length `n'`
/// samples source coordinate `i*(n-1)/(n'-1)` (axis center when `n' = 1`);
/// each output value blends the 8 surrounding source cells. Degenerate
/// source axes (length 1) interpolate as constants.
pub fn trilinear_resample(src: &LatentGrid, target: (usize, usize, usize)) -> Result<LatentGrid> {
    let (t2, h2, w2) = target;
    if t2 == 0 || h2 == 0 || w2 == 0 {
        return Err(CoreError::Config(format!(
            "resample target extents must be >= 1, got {}x{}x{}",
            t2, h2, w2
        )));
    }
    let (t, h, w, c) = src.dims();
    let mut out = LatentGrid::zeros(t2, h2, w2, c);
    for ti in 0..t2 {
        let (t0, t1, ft) = split_coord(align_corners_coord(ti, t, t2), t);
        for hi in 0..h2 {
            let (h0, h1, fh) = split_coord(align_corners_coord(hi, h, h2), h);
            for wi in 0..w2 {
                let (w0, w1, fw) = split_coord(align_corners_coord(wi, w, w2), w);
                for ci in 0..c {
                    let v000 = src.get(t0, h0, w0, ci) as f64;
                    let v001 = src.get(t0, h0, w1, ci) as f64;
                    let v010 = src.get(t0, h1, w0, ci) as f64;
                    let v011 = src.get(t0, h1, w1, ci) as f64;
                    let v100 = src.get(t1, h0, w0, ci) as f64;
                    let v101 = src.get(t1, h0, w1, ci) as f64;
                    let v110 = src.get(t1, h1, w0, ci) as f64;
                    let v111 = src.get(t1, h1, w1, ci) as f64;
                    let v00 = v000 + (v001 - v000) * fw;
                    let v01 = v010 + (v011 - v010) * fw;
                    let v10 = v100 + (v101 - v100) * fw;
                    let v11 = v110 + (v111 - v110) * fw;
                    let v0 = v00 + (v01 - v00) * fh;
                    let v1 = v10 + (v11 - v10) * fh;
                    let v = v0 + (v1 - v0) * ft;
                    let i = out.idx(ti, hi, wi, ci);
                    out.data_mut()[i] = v as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient probe: `g[i] = (f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f32, x: &Tensor, h: f32) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad step must be positive");
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp as f64 - fm as f64) as f32 / (2.0 * h);
    }
    g
}
