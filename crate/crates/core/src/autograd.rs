//! Reverse-mode differentiation over a linear tape.
//!
//! A forward pass records every intermediate on a [`Tape`]; [`Tape::backward`]
//! walks it in reverse and returns gradients for every node, from which
//! parameter gradients are collected. All arithmetic is `f64` and every
//! reduction runs in a fixed order, so a pass is bitwise reproducible.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a 2-D convolution, for `(h·w, c)` row-major feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &[f64]) -> Tensor {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let width = k * k * self.in_c;
        let mut cols = vec![0.0; oh * ow * width];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * width..(oy * ow + ox + 1) * width];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.in_w + ix as usize) * self.in_c;
                        let dst = (ky * k + kx) * self.in_c;
                        row[dst..dst + self.in_c].copy_from_slice(&x[src..src + self.in_c]);
                    }
                }
            }
        }
        Tensor {
            shape: vec![oh * ow, width],
            data: cols,
        }
    }

    fn col2im(&self, cols: &Tensor) -> Tensor {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let width = k * k * self.in_c;
        let mut x = vec![0.0; self.in_h * self.in_w * self.in_c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols.data[(oy * ow + ox) * width..(oy * ow + ox + 1) * width];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.in_w + ix as usize) * self.in_c;
                        let src = (ky * k + kx) * self.in_c;
                        for c in 0..self.in_c {
                            x[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
        Tensor {
            shape: vec![self.in_h * self.in_w, self.in_c],
            data: x,
        }
    }
}

/// Valid per-channel cross-correlation geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct XcorrGeom {
    pub ht: usize,
    pub wt: usize,
    pub hs: usize,
    pub ws: usize,
    pub c: usize,
}

impl XcorrGeom {
    pub fn out_h(&self) -> usize {
        self.hs - self.ht + 1
    }

    pub fn out_w(&self) -> usize {
        self.ws - self.wt + 1
    }
}

/// Forward values of a per-channel valid cross-correlation.
pub fn xcorr_forward(g: &XcorrGeom, template: &[f64], search: &[f64]) -> Vec<f64> {
    let (oh, ow, c) = (g.out_h(), g.out_w(), g.c);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for a in 0..g.ht {
                for b in 0..g.wt {
                    let t = &template[(a * g.wt + b) * c..(a * g.wt + b + 1) * c];
                    let s0 = ((oy + a) * g.ws + ox + b) * c;
                    let s = &search[s0..s0 + c];
                    for ch in 0..c {
                        o[ch] += t[ch] * s[ch];
                    }
                }
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clamp bound for probabilities entering logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Penalty-reduced focal loss (exponents 2 and 4) on a probability map,
/// normalised by the number of cells whose target is exactly 1.
pub fn focal_loss_value(pred: &[f64], target: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut positives = 0usize;
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y == 1.0 {
            positives += 1;
            sum -= (1.0 - p).powi(2) * p.ln();
        } else {
            sum -= (1.0 - y).powi(4) * p * p * (1.0 - p).ln();
        }
    }
    sum / positives.max(1) as f64
}

fn focal_loss_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let positives = target.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let g = if y == 1.0 {
                2.0 * (1.0 - p) * p.ln() - (1.0 - p).powi(2) / p
            } else {
                -(1.0 - y).powi(4) * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
            };
            g / positives
        })
        .collect()
}

/// `(cx, cy, w, h)` boxes.
pub fn iou_value(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ax2) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay1, ay2) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, bx2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by1, by2) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// d(1 − IoU)/d(pred) for `(cx, cy, w, h)` boxes.
fn iou_loss_grad(p: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let (px1, px2) = (p[0] - p[2] / 2.0, p[0] + p[2] / 2.0);
    let (py1, py2) = (p[1] - p[3] / 2.0, p[1] + p[3] / 2.0);
    let (gx1, gx2) = (g[0] - g[2] / 2.0, g[0] + g[2] / 2.0);
    let (gy1, gy2) = (g[1] - g[3] / 2.0, g[1] + g[3] / 2.0);
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (iw, ih, overlap) = if iw > 0.0 && ih > 0.0 {
        (iw, ih, true)
    } else {
        (0.0, 0.0, false)
    };
    let inter = iw * ih;
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    // dIoU/dI and dIoU/dA_pred
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let (mut dx1, mut dx2, mut dy1, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    if overlap {
        if px1 > gx1 {
            dx1 = -ih * d_inter;
        }
        if px2 < gx2 {
            dx2 = ih * d_inter;
        }
        if py1 > gy1 {
            dy1 = -iw * d_inter;
        }
        if py2 < gy2 {
            dy2 = iw * d_inter;
        }
    }
    let dcx = dx1 + dx2;
    let dcy = dy1 + dy2;
    let dw = (dx2 - dx1) / 2.0 + d_area * p[3];
    let dh = (dy2 - dy1) / 2.0 + d_area * p[2];
    [-dcx, -dcy, -dw, -dh]
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    ConstMul(Var, Tensor),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    /// `a_ij = w_ij e^{s_ij} / Σ_k w_ik e^{s_ik}`; saves `e_ij / Z_i`.
    WeightedSoftmax {
        scores: Var,
        weights: Var,
        rel: Tensor,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    StraightThrough(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Tensor,
    },
    Xcorr {
        t: Var,
        s: Var,
        geom: XcorrGeom,
    },
    FocalLoss {
        p: Var,
        target: Tensor,
    },
    IouLoss {
        b: Var,
        gt: [f64; 4],
    },
    DecodeBox {
        raw: Var,
        anchor: [f64; 4],
    },
    L2Norm(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Per-parameter gradients aligned with the store; `None` where the
    /// parameter did not influence the loss.
    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn acc(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.data.len(),
            y.data.len(),
            "elementwise size mismatch {:?} vs {:?}",
            x.shape,
            y.shape
        );
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `(m, n)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let x = self.value(a);
        let r = self.value(row);
        let n = x.cols();
        assert_eq!(r.len(), n, "add_row width mismatch");
        let mut v = x.clone();
        for chunk in v.data.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies row `i` by the constant `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(s.len(), x.rows());
        let n = x.cols();
        let mut v = x.clone();
        for (chunk, f) in v.data.chunks_mut(n).zip(&s) {
            chunk.iter_mut().for_each(|o| *o *= f);
        }
        self.push(v, Op::RowScale(a, s))
    }

    /// Elementwise product with a constant tensor.
    pub fn const_mul(&mut self, a: Var, c: Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.data.len(), c.data.len());
        let v = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&c.data).map(|(p, q)| p * q).collect(),
        };
        self.push(v, Op::ConstMul(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&z| gelu(z)).collect(),
        };
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&z| sigmoid(z)).collect(),
        };
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut v = x.clone();
        for row in v.data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise softmax restricted by nonnegative weights: with binary
    /// weights this is a softmax over the entries whose weight is 1, with
    /// every other entry exactly 0.
    pub fn weighted_softmax(&mut self, scores: Var, weights: Var) -> Var {
        let s = self.value(scores);
        let w = self.value(weights);
        assert_eq!(s.shape, w.shape, "weighted_softmax shape mismatch");
        let n = s.cols();
        let mut out = Tensor::zeros(&s.shape);
        let mut rel = Tensor::zeros(&s.shape);
        for i in 0..s.rows() {
            let sr = &s.data[i * n..(i + 1) * n];
            let wr = &w.data[i * n..(i + 1) * n];
            let m = sr
                .iter()
                .zip(wr)
                .filter(|(_, &wt)| wt > 0.0)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let e: Vec<f64> = sr.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = e.iter().zip(wr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                rel.data[i * n + j] = e[j] / z;
                out.data[i * n + j] = wr[j] * e[j] / z;
            }
        }
        self.push(
            out,
            Op::WeightedSoftmax {
                scores,
                weights,
                rel,
            },
        )
    }

    /// Row-wise layer normalisation, `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for (i, row) in xhat.data.chunks_mut(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + 1e-5).sqrt();
            rstd.push(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r;
                out.data[i * n + j] = *v * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
        }
        self.push(
            Tensor {
                shape: vec![r, len],
                data,
            },
            Op::SliceCols(a, start),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows(), r, "concat_cols row mismatch");
                data.extend_from_slice(x.row(i));
            }
        }
        self.push(
            Tensor {
                shape: vec![r, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(x.row(r));
        }
        self.push(
            Tensor {
                shape: vec![rows.len(), c],
                data,
            },
            Op::GatherRows(a, rows),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, (start..start + len).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), c, "concat_rows width mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows();
        }
        self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), shape.iter().product::<usize>());
        let v = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
        };
        self.push(v, Op::Reshape(a))
    }

    /// Forward value `hard`; the gradient passes unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Var {
        assert_eq!(self.value(soft).shape, hard.shape);
        self.push(hard, Op::StraightThrough(soft))
    }

    /// `x`: `(in_h·in_w, in_c)`, `w`: `(k·k·in_c, out_c)` with rows ordered
    /// `(ky, kx, c)`, `b`: `(out_c)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != geom.in_h * geom.in_w * geom.in_c {
            return Err(Error::Shape(format!(
                "conv input has {} values, geometry expects {}x{}x{}",
                xv.len(),
                geom.in_h,
                geom.in_w,
                geom.in_c
            )));
        }
        let wv = self.value(w);
        if wv.shape != [geom.kernel * geom.kernel * geom.in_c, geom.out_c] {
            return Err(Error::Shape(format!(
                "conv weight shape {:?} does not match {geom:?}",
                wv.shape
            )));
        }
        let cols = geom.im2col(&xv.data);
        let mut out = cols.matmul(wv);
        let bv = &self.value(b).data;
        for row in out.data.chunks_mut(geom.out_c) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Depthwise valid cross-correlation of `(ht·wt, c)` over `(hs·ws, c)`.
    pub fn xcorr(&mut self, t: Var, s: Var, geom: XcorrGeom) -> Result<Var> {
        if geom.ht > geom.hs || geom.wt > geom.ws {
            return Err(Error::Shape(format!(
                "template {}x{} larger than search {}x{}",
                geom.ht, geom.wt, geom.hs, geom.ws
            )));
        }
        let (tv, sv) = (self.value(t), self.value(s));
        if tv.len() != geom.ht * geom.wt * geom.c || sv.len() != geom.hs * geom.ws * geom.c {
            return Err(Error::Shape(
                "xcorr input sizes do not match geometry".into(),
            ));
        }
        let data = xcorr_forward(&geom, &tv.data, &sv.data);
        let out = Tensor {
            shape: vec![geom.out_h() * geom.out_w(), geom.c],
            data,
        };
        Ok(self.push(out, Op::Xcorr { t, s, geom }))
    }

    pub fn focal_loss(&mut self, p: Var, target: Tensor) -> Var {
        let v = focal_loss_value(&self.value(p).data, &target.data);
        self.push(Tensor::scalar(v), Op::FocalLoss { p, target })
    }

    /// `1 − IoU` of a predicted `(cx, cy, w, h)` box against a constant box.
    pub fn iou_loss(&mut self, b: Var, gt: [f64; 4]) -> Var {
        let d = &self.value(b).data;
        let p = [d[0], d[1], d[2], d[3]];
        let v = 1.0 - iou_value(&p, &gt);
        self.push(Tensor::scalar(v), Op::IouLoss { b, gt })
    }

    /// Raw `(rw, rh, dx, dy)` → box `(ax + as·dx, ay + as·dy, aw·e^rw, ah·e^rh)`
    /// with `anchor = (ax, ay, size, stride)`.
    pub fn decode_box(&mut self, raw: Var, anchor: [f64; 4]) -> Var {
        let r = &self.value(raw).data;
        let v = vec![
            anchor[0] + anchor[3] * r[2],
            anchor[1] + anchor[3] * r[3],
            anchor[2] * r[0].exp(),
            anchor[2] * r[1].exp(),
        ];
        self.push(
            Tensor {
                shape: vec![4],
                data: v,
            },
            Op::DecodeBox { raw, anchor },
        )
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::L2Norm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var, n_params: usize) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].value.shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut [Option<Tensor>],
    ) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => acc(&mut params[id.0], g.clone()),
            Op::MatMul(a, b) => {
                let da = g.matmul_bt(val(*b));
                let db = val(*a).matmul_at(g);
                acc(&mut grads[a.0], reshaped(da, &val(*a).shape));
                acc(&mut grads[b.0], reshaped(db, &val(*b).shape));
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let da = g.matmul(val(*b));
                let db = g.matmul_at(val(*a));
                acc(&mut grads[a.0], reshaped(da, &val(*a).shape));
                acc(&mut grads[b.0], reshaped(db, &val(*b).shape));
            }
            Op::Add(a, b) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(&mut grads[a.0], map2(g, y, |p, q| p * q));
                acc(&mut grads[b.0], map2(g, x, |p, q| p * q));
            }
            Op::AddRow(a, row) => {
                acc(&mut grads[a.0], g.clone());
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for chunk in g.data.chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(
                    &mut grads[row.0],
                    Tensor {
                        shape: val(*row).shape.clone(),
                        data: dr,
                    },
                );
            }
            Op::Scale(a, s) => acc(&mut grads[a.0], g.scale(*s)),
            Op::RowScale(a, s) => {
                let n = g.cols();
                let mut d = g.clone();
                for (chunk, f) in d.data.chunks_mut(n).zip(s) {
                    chunk.iter_mut().for_each(|o| *o *= f);
                }
                acc(&mut grads[a.0], d);
            }
            Op::ConstMul(a, c) => acc(&mut grads[a.0], map2(g, c, |p, q| p * q)),
            Op::Gelu(a) => acc(&mut grads[a.0], map2(g, val(*a), |p, x| p * gelu_grad(x))),
            Op::Sigmoid(a) => acc(
                &mut grads[a.0],
                map2(g, &node.value, |p, y| p * y * (1.0 - y)),
            ),
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = Tensor::zeros(&y.shape);
                for r in 0..y.rows() {
                    let yr = &y.data[r * n..(r + 1) * n];
                    let gr = &g.data[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for j in 0..n {
                        d.data[r * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(&mut grads[a.0], d);
            }
            Op::WeightedSoftmax {
                scores,
                weights,
                rel,
            } => {
                let y = &node.value;
                let n = y.cols();
                let mut ds = Tensor::zeros(&y.shape);
                let mut dw = Tensor::zeros(&y.shape);
                for r in 0..y.rows() {
                    let yr = &y.data[r * n..(r + 1) * n];
                    let gr = &g.data[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for j in 0..n {
                        ds.data[r * n + j] = yr[j] * (gr[j] - s);
                        dw.data[r * n + j] = rel.data[r * n + j] * (gr[j] - s);
                    }
                }
                acc(&mut grads[scores.0], ds);
                acc(&mut grads[weights.0], dw);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let gam = &val(*gamma).data;
                let mut dx = Tensor::zeros(&g.shape);
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..g.rows() {
                    let gr = &g.data[r * n..(r + 1) * n];
                    let xr = &xhat.data[r * n..(r + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let gy = gr[j] * gam[j];
                        m1 += gy;
                        m2 += gy * xr[j];
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        dx.data[r * n + j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                    }
                }
                acc(&mut grads[x.0], reshaped(dx, &val(*x).shape));
                acc(
                    &mut grads[gamma.0],
                    Tensor {
                        shape: val(*gamma).shape.clone(),
                        data: dg,
                    },
                );
                acc(
                    &mut grads[beta.0],
                    Tensor {
                        shape: val(*beta).shape.clone(),
                        data: db,
                    },
                );
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let (r, c) = (x.rows(), x.cols());
                let len = g.cols();
                let mut d = Tensor::zeros(&x.shape);
                for i in 0..r {
                    d.data[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                acc(&mut grads[a.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let x = val(*p);
                    let (r, c) = (x.rows(), x.cols());
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&g.row(i)[off..off + c]);
                    }
                    acc(
                        &mut grads[p.0],
                        Tensor {
                            shape: x.shape.clone(),
                            data: d,
                        },
                    );
                    off += c;
                }
            }
            Op::GatherRows(a, rows) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(&x.shape);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d.data[r * c + j] += g.data[k * c + j];
                    }
                }
                acc(&mut grads[a.0], d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let x = val(*p);
                    let n = x.len();
                    acc(
                        &mut grads[p.0],
                        Tensor {
                            shape: x.shape.clone(),
                            data: g.data[off..off + n].to_vec(),
                        },
                    );
                    off += n;
                }
            }
            Op::Reshape(a) => acc(&mut grads[a.0], reshaped(g.clone(), &val(*a).shape)),
            Op::StraightThrough(soft) => acc(&mut grads[soft.0], g.clone()),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let dw = cols.matmul_at(g);
                let dcols = g.matmul_bt(val(*w));
                let dx = geom.col2im(&dcols);
                let mut db = vec![0.0; geom.out_c];
                for row in g.data.chunks(geom.out_c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(&mut grads[x.0], reshaped(dx, &val(*x).shape));
                acc(&mut grads[w.0], dw);
                acc(
                    &mut grads[b.0],
                    Tensor {
                        shape: val(*b).shape.clone(),
                        data: db,
                    },
                );
            }
            Op::Xcorr { t, s, geom } => {
                let (tv, sv) = (&val(*t).data, &val(*s).data);
                let mut dt = vec![0.0; tv.len()];
                let mut ds = vec![0.0; sv.len()];
                let (oh, ow, c) = (geom.out_h(), geom.out_w(), geom.c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g.data[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for a in 0..geom.ht {
                            for bb in 0..geom.wt {
                                let ti = (a * geom.wt + bb) * c;
                                let si = ((oy + a) * geom.ws + ox + bb) * c;
                                for ch in 0..c {
                                    dt[ti + ch] += go[ch] * sv[si + ch];
                                    ds[si + ch] += go[ch] * tv[ti + ch];
                                }
                            }
                        }
                    }
                }
                acc(
                    &mut grads[t.0],
                    Tensor {
                        shape: val(*t).shape.clone(),
                        data: dt,
                    },
                );
                acc(
                    &mut grads[s.0],
                    Tensor {
                        shape: val(*s).shape.clone(),
                        data: ds,
                    },
                );
            }
            Op::FocalLoss { p, target } => {
                let d = focal_loss_grad(&val(*p).data, &target.data);
                let gs = g.item();
                acc(
                    &mut grads[p.0],
                    Tensor {
                        shape: val(*p).shape.clone(),
                        data: d.into_iter().map(|v| v * gs).collect(),
                    },
                );
            }
            Op::IouLoss { b, gt } => {
                let d = &val(*b).data;
                let dg = iou_loss_grad(&[d[0], d[1], d[2], d[3]], gt);
                let gs = g.item();
                acc(
                    &mut grads[b.0],
                    Tensor {
                        shape: val(*b).shape.clone(),
                        data: dg.iter().map(|v| v * gs).collect(),
                    },
                );
            }
            Op::DecodeBox { raw, anchor } => {
                let out = &node.value.data;
                let d = vec![
                    g.data[2] * out[2],
                    g.data[3] * out[3],
                    g.data[0] * anchor[3],
                    g.data[1] * anchor[3],
                ];
                acc(
                    &mut grads[raw.0],
                    Tensor {
                        shape: val(*raw).shape.clone(),
                        data: d,
                    },
                );
            }
            Op::L2Norm(a) => {
                let n = node.value.item();
                let x = val(*a);
                let d = if n > 0.0 {
                    x.scale(g.item() / n)
                } else {
                    Tensor::zeros(&x.shape)
                };
                acc(&mut grads[a.0], d);
            }
            Op::Sum(a) => acc(&mut grads[a.0], Tensor::full(&val(*a).shape, g.item())),
            Op::Mean(a) => {
                let x = val(*a);
                acc(
                    &mut grads[a.0],
                    Tensor::full(&x.shape, g.item() / x.len() as f64),
                );
            }
        }
    }
}

fn reshaped(mut t: Tensor, shape: &[usize]) -> Tensor {
    t.shape = shape.to_vec();
    t
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: b.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(p, q)| f(*p, *q)).collect(),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
