//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records each forward op as a node holding its value and a
//! backward closure. Nodes are pushed in evaluation order, so the reverse
//! sweep in [`Tape::backward`] visits them in valid topological order.
//! Backward closures capture parent indices and write into a shared gradient
//! store; gradients of interior nodes are dropped as soon as they have been
//! propagated.
//!
//! The op set is exactly what the transformer forward pass needs: matmul,
//! row-broadcast bias, elementwise arithmetic, sigmoid/silu, RMS norm,
//! masked softmax, pairwise rotations (rotary positions), row/column
//! slicing and concatenation, scalar gating, and mean-square losses. Masks
//! and rotation tables enter as constants and are not differentiated.

use crate::error::Result;
use crate::tensor::{self, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut GradStore)>;

pub struct Tape {
    vals: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
}

pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    fn accum(&mut self, i: usize, delta: Tensor) {
        match &mut self.grads[i] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Gradients of one backward sweep, indexable by the vars of the same tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        self.vals.push(value);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// Differentiable input (parameters, or anything whose gradient is read).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.vals[a.0].add(&self.vals[b.0]);
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a.0, g.clone());
                gs.accum(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.vals[a.0].sub(&self.vals[b.0]);
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a.0, g.clone());
                gs.accum(b.0, g.scale(-1.0));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.vals[a.0].mul(&self.vals[b.0]);
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                gs.accum(a.0, g.mul(&vals[b.0]));
                gs.accum(b.0, g.mul(&vals[a.0]));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.vals[a.0].scale(c);
        self.push(
            value,
            Some(Box::new(move |_, g, gs| gs.accum(a.0, g.scale(c)))),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let bt = vals[b.0].transpose();
                let at = vals[a.0].transpose();
                gs.accum(a.0, tensor::matmul(g, &bt).expect("matmul backward"));
                gs.accum(b.0, tensor::matmul(&at, g).expect("matmul backward"));
            })),
        ))
    }

    /// Broadcast-add a `[d]` bias to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = &self.vals[x.0];
        let bv = &self.vals[bias.0];
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(bv.shape(), [d], "add_row bias shape");
        let mut value = xv.clone();
        for i in 0..n {
            for j in 0..d {
                value.data_mut()[i * d + j] += bv.data()[j];
            }
        }
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                gs.accum(x.0, g.clone());
                let (n, d) = (g.rows(), g.cols());
                let mut gb = Tensor::zeros(&[d]);
                for i in 0..n {
                    for j in 0..d {
                        gb.data_mut()[j] += g.data()[i * d + j];
                    }
                }
                gs.accum(bias.0, gb);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.vals[a.0].map(|v| 1.0 / (1.0 + (-v).exp()));
        let out_idx = self.vals.len();
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let y = &vals[out_idx];
                gs.accum(a.0, g.mul(&y.map(|v| v * (1.0 - v))));
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.vals[a.0].map(|v| v / (1.0 + (-v).exp()));
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let d = vals[a.0].map(|v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    s * (1.0 + v * (1.0 - s))
                });
                gs.accum(a.0, g.mul(&d));
            })),
        )
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let value = tensor::rms_norm(&self.vals[x.0], &self.vals[gain.0], eps)?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let xv = &vals[x.0];
                let gv = &vals[gain.0];
                let (n, d) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[n, d]);
                let mut ggain = Tensor::zeros(&[d]);
                for i in 0..n {
                    let row = xv.row(i);
                    let ms: f64 =
                        row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
                    let r = 1.0 / (ms + eps as f64).sqrt();
                    let mut s = 0.0f64; // sum_k g_ik * gain_k * x_ik
                    for j in 0..d {
                        s += g.at2(i, j) as f64 * gv.data()[j] as f64 * row[j] as f64;
                    }
                    let r3_s_over_d = r * r * r * s / d as f64;
                    for j in 0..d {
                        gx.data_mut()[i * d + j] = (r * gv.data()[j] as f64 * g.at2(i, j) as f64
                            - r3_s_over_d * row[j] as f64)
                            as f32;
                        ggain.data_mut()[j] += (g.at2(i, j) as f64 * row[j] as f64 * r) as f32;
                    }
                }
                gs.accum(x.0, gx);
                gs.accum(gain.0, ggain);
            })),
        ))
    }

    /// Row softmax; the optional additive bias is a constant (attention mask).
    pub fn softmax(&mut self, x: Var, bias: Option<Tensor>) -> Result<Var> {
        let value = tensor::softmax_rows(&self.vals[x.0], bias.as_ref())?;
        let out_idx = self.vals.len();
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let y = &vals[out_idx];
                let (n, d) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let mut dot = 0.0f64;
                    for j in 0..d {
                        dot += g.at2(i, j) as f64 * y.at2(i, j) as f64;
                    }
                    for j in 0..d {
                        gx.data_mut()[i * d + j] =
                            (y.at2(i, j) as f64 * (g.at2(i, j) as f64 - dot)) as f32;
                    }
                }
                gs.accum(x.0, gx);
            })),
        ))
    }

    /// Rotate dimension pairs of each head block: for pair j of token i,
    /// `(a, b) -> (a cos - b sin, a sin + b cos)`. The inverse rotation is
    /// its own adjoint, which is what backward applies.
    pub fn rotate_pairs(&mut self, x: Var, cos: Tensor, sin: Tensor, n_heads: usize) -> Var {
        let value = rotate_pairs_raw(&self.vals[x.0], &cos, &sin, n_heads, false);
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                gs.accum(x.0, rotate_pairs_raw(g, &cos, &sin, n_heads, true));
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.vals[x.0];
        let (n, d) = (xv.rows(), xv.cols());
        assert!(start + len <= n, "slice_rows out of range");
        let value = Tensor::from_vec(
            &[len, d],
            xv.data()[start * d..(start + len) * d].to_vec(),
        )
        .expect("slice shape");
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let (n, d) = (vals[x.0].rows(), vals[x.0].cols());
                let mut gx = Tensor::zeros(&[n, d]);
                gx.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                gs.accum(x.0, gx);
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let d = self.vals[parts[0].0].cols();
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.vals[p.0];
            assert_eq!(v.cols(), d, "concat_rows width mismatch");
            lens.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let n: usize = lens.iter().sum();
        let value = Tensor::from_vec(&[n, d], data).expect("concat shape");
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                let d = g.cols();
                let mut row = 0;
                for (&p, &len) in parts.iter().zip(&lens) {
                    let gp = Tensor::from_vec(
                        &[len, d],
                        g.data()[row * d..(row + len) * d].to_vec(),
                    )
                    .expect("concat backward shape");
                    gs.accum(p, gp);
                    row += len;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.vals[x.0];
        let (n, d) = (xv.rows(), xv.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.data()[i * d + start..i * d + start + len]);
        }
        let value = Tensor::from_vec(&[n, len], data).expect("slice shape");
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let (n, d) = (vals[x.0].rows(), vals[x.0].cols());
                let mut gx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    gx.data_mut()[i * d + start..i * d + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                gs.accum(x.0, gx);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let n = self.vals[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.vals[p.0].cols()).collect();
        let d: usize = widths.iter().sum();
        let mut value = Tensor::zeros(&[n, d]);
        let mut col = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            let v = &self.vals[p.0];
            assert_eq!(v.rows(), n, "concat_cols height mismatch");
            for i in 0..n {
                value.data_mut()[i * d + col..i * d + col + wd]
                    .copy_from_slice(&v.data()[i * wd..(i + 1) * wd]);
            }
            col += wd;
        }
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                let (n, d) = (g.rows(), g.cols());
                let mut col = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    let mut gp = Tensor::zeros(&[n, wd]);
                    for i in 0..n {
                        gp.data_mut()[i * wd..(i + 1) * wd]
                            .copy_from_slice(&g.data()[i * d + col..i * d + col + wd]);
                    }
                    gs.accum(p, gp);
                    col += wd;
                }
            })),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.vals[x.0].transpose();
        self.push(
            value,
            Some(Box::new(move |_, g, gs| gs.accum(x.0, g.transpose()))),
        )
    }

    /// Multiply a tensor by a 1-element var (per-head gate).
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.vals[s.0].len(), 1, "scale_by_scalar expects [1]");
        let sv = self.vals[s.0].data()[0];
        let value = self.vals[x.0].scale(sv);
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let sv = vals[s.0].data()[0];
                gs.accum(x.0, g.scale(sv));
                let gsv = Tensor::from_vec(vals[s.0].shape(), vec![g.dot(&vals[x.0]) as f32])
                    .expect("scalar grad shape");
                gs.accum(s.0, gsv);
            })),
        )
    }

    /// Scalar loss `mean((pred - target)^2)` against a constant target.
    pub fn mean_sq_diff(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = &self.vals[pred.0];
        assert_eq!(pv.shape(), target.shape(), "mean_sq_diff shape");
        let n = pv.len().max(1);
        let sum: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| ((p - t) as f64).powi(2))
            .sum();
        let value = Tensor::scalar((sum / n as f64) as f32);
        self.push(
            value,
            Some(Box::new(move |vals, g, gs| {
                let g0 = g.data()[0];
                let pv = &vals[pred.0];
                let c = 2.0 * g0 / n as f32;
                let gp = Tensor::from_vec(
                    pv.shape(),
                    pv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| c * (p - t))
                        .collect(),
                )
                .expect("grad shape");
                gs.accum(pred.0, gp);
            })),
        )
    }

    /// Weighted sum of 1-element vars.
    pub fn weighted_sum_scalars(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut sum = 0.0f64;
        for (v, w) in terms {
            assert_eq!(self.vals[v.0].len(), 1, "weighted_sum_scalars expects [1]");
            sum += self.vals[v.0].data()[0] as f64 * *w as f64;
        }
        let value = Tensor::scalar(sum as f32);
        let terms = terms.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, gs| {
                let g0 = g.data()[0];
                for (v, w) in &terms {
                    gs.accum(v.0, Tensor::scalar(g0 * w));
                }
            })),
        )
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node the loss depends on; read leaves via [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.vals[loss.0].len(),
            1,
            "backward expects a scalar loss node"
        );
        let mut store = GradStore {
            grads: vec![None; self.vals.len()],
        };
        store.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.backs[i] {
                if let Some(g) = store.grads[i].take() {
                    back(&self.vals, &g, &mut store);
                }
            }
        }
        Gradients { grads: store.grads }
    }
}

/// Apply (or invert) per-token pair rotations across all head blocks.
///
/// `x` is `[n, n_heads * head_dim]`; `cos`/`sin` are `[n, head_dim/2]` and
/// shared across heads.
pub fn rotate_pairs_raw(
    x: &Tensor,
    cos: &Tensor,
    sin: &Tensor,
    n_heads: usize,
    invert: bool,
) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(d % n_heads, 0, "width not divisible by head count");
    let head_dim = d / n_heads;
    assert_eq!(head_dim % 2, 0, "head_dim must be even");
    let pairs = head_dim / 2;
    assert_eq!(cos.shape(), [n, pairs], "rotation table shape");
    assert_eq!(sin.shape(), [n, pairs], "rotation table shape");
    let mut out = x.clone();
    for i in 0..n {
        for hd in 0..n_heads {
            let base = i * d + hd * head_dim;
            for j in 0..pairs {
                let c = cos.at2(i, j);
                let s = if invert { -sin.at2(i, j) } else { sin.at2(i, j) };
                let a = x.data()[base + 2 * j];
                let b = x.data()[base + 2 * j + 1];
                out.data_mut()[base + 2 * j] = a * c - b * s;
                out.data_mut()[base + 2 * j + 1] = a * s + b * c;
            }
        }
    }
    out
}
