//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so a reverse scan of the tape is a
//! reverse topological order and every node is visited exactly once.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped inside cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Pointwise {
        x: Var,
        w: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Repeat {
        x: Var,
        times: usize,
    },
    TimeStep {
        x: Var,
        t: usize,
    },
    Stack(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        sample_weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        sample_weights: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, used by callers
/// to update running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c = op(a) · op(b) + beta · c` on row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = ArrayView2::from_shape(a_dims, a).expect("gemm lhs dims");
    let bv = ArrayView2::from_shape(b_dims, b).expect("gemm rhs dims");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("gemm out dims");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Column matrix `(c*k*k, ho*wo)` for one image.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    img[(ci * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sign of every ReLU-family input on the tape. Two evaluations with the
    /// same pattern lie on the same linear piece of those activations.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) | Op::LeakyRelu { x, .. } = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow to (parameters, or an input under attack).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let v = self.map(x, |u| scale * u);
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    /// Adds a length-`n` bias to every row of a tensor whose last axis is `n`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        let n = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != n {
            return Err(shape_err("add_row_bias", &xs, &bs));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        Ok(self.push(t, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    /// `(m, k) · (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        gemm(
            self.value(a).data(),
            (sa[0], sa[1]),
            false,
            self.value(b).data(),
            (sb[0], sb[1]),
            false,
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![sa[0], sb[1]], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `w` of shape `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |u| u.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.map(x, |u| if u > 0.0 { u } else { slope * u });
        self.push(v, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    fn conv_geom(&self, op: &'static str, x: Var, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = self.shape(x);
        if xs.len() != 4 || stride == 0 {
            return Err(shape_err(op, xs, &[k, k]));
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let ho = conv_out(h, k, stride, pad).ok_or_else(|| shape_err(op, xs, &[k, k]))?;
        let wo = conv_out(w, k, stride, pad).ok_or_else(|| shape_err(op, xs, &[k, k]))?;
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Dense 2-D convolution, `x: (n, c, h, w)`, `w: (o, c, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || xs.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let g = self.conv_geom("conv2d", x, ws[2], stride, pad)?;
        let (n, o) = (xs[0], ws[0]);
        let ckk = g.c * g.k * g.k;
        let hw = g.ho * g.wo;
        let mut out = vec![0.0; n * o * hw];
        let mut cols = vec![0.0; ckk * hw];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let img_len = g.c * g.h * g.w;
        for i in 0..n {
            g.im2col(&xd[i * img_len..(i + 1) * img_len], &mut cols);
            gemm(
                wd,
                (o, ckk),
                false,
                &cols,
                (ckk, hw),
                false,
                &mut out[i * o * hw..(i + 1) * o * hw],
                0.0,
            );
        }
        let t = Tensor::new(vec![n, o, g.ho, g.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// Per-channel convolution, `w: (c, 1, k, k)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || xs.len() != 4 || ws[0] != xs[1] || ws[1] != 1 || ws[2] != ws[3] {
            return Err(shape_err("depthwise_conv2d", &xs, &ws));
        }
        let g = self.conv_geom("depthwise_conv2d", x, ws[2], stride, pad)?;
        let n = xs[0];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * g.c * g.ho * g.wo];
        for i in 0..n {
            for c in 0..g.c {
                let img = &xd[(i * g.c + c) * g.h * g.w..][..g.h * g.w];
                let ker = &wd[c * g.k * g.k..][..g.k * g.k];
                let dst = &mut out[(i * g.c + c) * g.ho * g.wo..][..g.ho * g.wo];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy as usize >= g.h {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && (ix as usize) < g.w {
                                    acc += ker[ky * g.k + kx] * img[iy as usize * g.w + ix as usize];
                                }
                            }
                        }
                        dst[oy * g.wo + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, g.c, g.ho, g.wo], out)?;
        Ok(self.push(t, Op::Depthwise { x, w, stride, pad }, &[x, w]))
    }

    /// 1×1 convolution, `w: (o, c)`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.len() != 4 || ws[1] != xs[1] {
            return Err(shape_err("pointwise_conv", &xs, &ws));
        }
        let (n, c, hw, o) = (xs[0], xs[1], xs[2] * xs[3], ws[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * o * hw];
        for i in 0..n {
            gemm(
                wd,
                (o, c),
                false,
                &xd[i * c * hw..(i + 1) * c * hw],
                (c, hw),
                false,
                &mut out[i * o * hw..(i + 1) * o * hw],
                0.0,
            );
        }
        let t = Tensor::new(vec![n, o, xs[2], xs[3]], out)?;
        Ok(self.push(t, Op::Pointwise { x, w }, &[x, w]))
    }

    /// Batch normalization over `(n, c, ...)` per channel. With `running =
    /// None` batch statistics are used and returned; otherwise the given
    /// `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("batch_norm", &xs, self.shape(p)));
            }
        }
        let m = n * spatial;
        let xd = self.value(x).data();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", &xs, &[rm.len(), rv.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let s = &xd[(i * c + ch) * spatial..][..spatial];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for i in 0..n {
                    for ch in 0..c {
                        let s = &xd[(i * c + ch) * spatial..][..spatial];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
                let unbiased = var.iter().map(|v| v / (m.max(2) - 1) as f64).collect();
                (mean.clone(), biased, Some(BatchStats { mean, var: unbiased }))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                for j in off..off + spatial {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let batch_stats = stats.is_some();
        let t = Tensor::new(xs, out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// `(n, c, h, w) → (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", &xs, &[]));
        }
        let hw = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Inverted dropout. Identity unless `training` and `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `(b, 1, d) → (b, times, d)` by repetition along axis 1.
    pub fn repeat_seq(&mut self, x: Var, times: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != 1 || times == 0 {
            return Err(shape_err("repeat_seq", &xs, &[times]));
        }
        let (b, d) = (xs[0], xs[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * times * d);
        for row in src.chunks(d) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let t = Tensor::new(vec![b, times, d], data)?;
        Ok(self.push(t, Op::Repeat { x, times }, &[x]))
    }

    /// `(b, t, d) → (b, d)` at step `t`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || t >= xs[1] {
            return Err(shape_err("time_step", &xs, &[t]));
        }
        let (b, steps, d) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            data.extend_from_slice(&src[(i * steps + t) * d..][..d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        Ok(self.push(out, Op::TimeStep { x, t }, &[x]))
    }

    /// Stacks `(b, d)` steps into `(b, t, d)`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps.first().ok_or_else(|| Error::domain("no steps to stack"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(shape_err("stack_steps", &s0, &[]));
        }
        for &s in steps {
            if self.shape(s) != s0.as_slice() {
                return Err(shape_err("stack_steps", &s0, self.shape(s)));
            }
        }
        let (b, d, t) = (s0[0], s0[1], steps.len());
        let mut data = vec![0.0; b * t * d];
        for (ti, &s) in steps.iter().enumerate() {
            let src = self.value(s).data();
            for i in 0..b {
                data[(i * t + ti) * d..][..d].copy_from_slice(&src[i * d..][..d]);
            }
        }
        let out = Tensor::new(vec![b, t, d], data)?;
        Ok(self.push(out, Op::Stack(steps.to_vec()), steps))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(shape_err("slice_cols", &xs, &[start, len]));
        }
        let src = self.value(x).data();
        let data = src
            .chunks(xs[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![xs[0], len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(shape_err("softmax", t.shape(), &[]));
        }
        let d = *t.shape().last().unwrap();
        let data = softmax_rows(t.data(), d);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    fn ce_inputs(
        &self,
        op: &'static str,
        x: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] != targets.len() || xs[0] == 0 {
            return Err(shape_err(op, xs, &[targets.len()]));
        }
        let c = xs[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::domain(format!("{op}: label {bad} out of range for {c} classes")));
        }
        match class_weights {
            Some(w) if w.len() != c => Err(shape_err(op, xs, &[w.len()])),
            Some(w) => Ok(targets.iter().map(|&t| w[t]).collect()),
            None => Ok(vec![1.0; targets.len()]),
        }
    }

    /// Weighted mean cross-entropy of probabilities, clamped at
    /// [`PROB_FLOOR`]: `(1/B) Σ w_y · −ln p_y`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let sample_weights = self.ce_inputs("cross_entropy", probs, targets, class_weights)?;
        let c = self.shape(probs)[1];
        let loss = mean_nll(self.value(probs).data(), c, targets, &sample_weights);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                sample_weights,
            },
            &[probs],
        ))
    }

    /// Fused softmax + cross-entropy on logits.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let sample_weights = self.ce_inputs("softmax_cross_entropy", logits, targets, class_weights)?;
        let c = self.shape(logits)[1];
        let probs = softmax_rows(self.value(logits).data(), c);
        let loss = mean_nll(&probs, c, targets, &sample_weights);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                sample_weights,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Single-direction GRU over `x: (b, t, d)` with `w_input: (d, 3h)`,
    /// `w_hidden: (h, 3h)` and `bias: (3h)`, gate blocks ordered
    /// `[update | reset | candidate]`, zero initial state:
    ///
    /// ```text
    /// z  = σ(x Wz + h Uz + bz)
    /// r  = σ(x Wr + h Ur + br)
    /// h~ = tanh(x Wh + (r ⊙ h) Uh + bh)
    /// h' = (1 − z) ⊙ h + z ⊙ h~
    /// ```
    ///
    /// Returns the full hidden sequence `(b, t, h)` and the final state `(b, h)`.
    pub fn gru_layer(&mut self, x: Var, w_input: Var, w_hidden: Var, bias: Var) -> Result<(Var, Var)> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_input).to_vec();
        let wh = self.shape(w_hidden).to_vec();
        if xs.len() != 3 || wi.len() != 2 || wi[0] != xs[2] || !wi[1].is_multiple_of(3) {
            return Err(shape_err("gru_layer", &xs, &wi));
        }
        let h = wi[1] / 3;
        if wh != [h, 3 * h] || self.shape(bias) != [3 * h] {
            return Err(shape_err("gru_layer", &wi, &wh));
        }
        let (b, steps, d) = (xs[0], xs[1], xs[2]);

        let flat = self.reshape(x, vec![b * steps, d])?;
        let proj = self.matmul(flat, w_input)?;
        let proj = self.add_row_bias(proj, bias)?;
        let proj_zr = self.slice_cols(proj, 0, 2 * h)?;
        let proj_n = self.slice_cols(proj, 2 * h, h)?;
        let proj_zr = self.reshape(proj_zr, vec![b, steps, 2 * h])?;
        let proj_n = self.reshape(proj_n, vec![b, steps, h])?;
        let u_zr = self.slice_cols(w_hidden, 0, 2 * h)?;
        let u_n = self.slice_cols(w_hidden, 2 * h, h)?;

        let mut state = self.constant(Tensor::zeros(vec![b, h]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_zr = self.time_step(proj_zr, t)?;
            let x_n = self.time_step(proj_n, t)?;
            let h_zr = self.matmul(state, u_zr)?;
            let pre_zr = self.add(x_zr, h_zr)?;
            let gates = self.sigmoid(pre_zr);
            let z = self.slice_cols(gates, 0, h)?;
            let r = self.slice_cols(gates, h, h)?;
            let rh = self.mul(r, state)?;
            let h_n = self.matmul(rh, u_n)?;
            let pre_n = self.add(x_n, h_n)?;
            let cand = self.tanh(pre_n);
            let delta = self.sub(cand, state)?;
            let step = self.mul(z, delta)?;
            state = self.add(state, step)?;
            outputs.push(state);
        }
        let seq = self.stack_steps(&outputs)?;
        Ok((seq, state))
    }

    /// Reverse-mode sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss variable is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage("loss does not depend on any differentiable leaf".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad && matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        }
        let len = |v: Var| self.nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(grads, v, len(v), |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, len(*a), |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                }
                if wants(*b) {
                    acc(grads, *b, len(*b), |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(grads, *a, len(*a), |g| {
                        for j in 0..g.len() {
                            g[j] += gy[j] * vb[j];
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, len(*b), |g| {
                        for j in 0..g.len() {
                            g[j] += gy[j] * va[j];
                        }
                    });
                }
            }
            Op::Affine { x, scale } => {
                acc(grads, *x, len(*x), |g| {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += scale * d)
                });
            }
            Op::AddRowBias { x, bias } => {
                if wants(*x) {
                    acc(grads, *x, len(*x), |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                }
                if wants(*bias) {
                    let n = len(*bias);
                    acc(grads, *bias, n, |g| {
                        for row in gy.chunks(n) {
                            g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let vb = val(*b);
                    acc(grads, *a, m * k, |g| gemm(gy, (m, n), false, vb, (k, n), true, g, 1.0));
                }
                if wants(*b) {
                    let va = val(*a);
                    acc(grads, *b, k * n, |g| gemm(va, (m, k), true, gy, (m, n), false, g, 1.0));
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(grads, *x, len(*x), |g| {
                    for j in 0..g.len() {
                        if vx[j] > 0.0 {
                            g[j] += gy[j];
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let vx = val(*x);
                acc(grads, *x, len(*x), |g| {
                    for j in 0..g.len() {
                        g[j] += if vx[j] > 0.0 { gy[j] } else { slope * gy[j] };
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, len(*x), |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(grads, *x, len(*x), |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let ws = self.shape(*w).to_vec();
                let geom = self.conv_geom("conv2d", *x, ws[2], *stride, *pad).expect("validated");
                let n = self.shape(*x)[0];
                let o = ws[0];
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                let img_len = geom.c * geom.h * geom.w;
                let xd = val(*x);
                let wd = val(*w);
                let mut cols = vec![0.0; ckk * hw];
                let mut dcols = vec![0.0; ckk * hw];
                let w_len = len(*w);
                let x_len = len(*x);
                for i in 0..n {
                    let gy_i = &gy[i * o * hw..(i + 1) * o * hw];
                    if wants(*w) {
                        geom.im2col(&xd[i * img_len..(i + 1) * img_len], &mut cols);
                        acc(grads, *w, w_len, |g| {
                            gemm(gy_i, (o, hw), false, &cols, (ckk, hw), true, g, 1.0)
                        });
                    }
                    if wants(*x) {
                        gemm(wd, (o, ckk), true, gy_i, (o, hw), false, &mut dcols, 0.0);
                        acc(grads, *x, x_len, |g| {
                            geom.col2im(&dcols, &mut g[i * img_len..(i + 1) * img_len])
                        });
                    }
                }
            }
            Op::Depthwise { x, w, stride, pad } => {
                let ws = self.shape(*w).to_vec();
                let geom = self
                    .conv_geom("depthwise_conv2d", *x, ws[2], *stride, *pad)
                    .expect("validated");
                let n = self.shape(*x)[0];
                let (c, h, wd_, k, ho, wo) = (geom.c, geom.h, geom.w, geom.k, geom.ho, geom.wo);
                let xd = val(*x);
                let wv = val(*w);
                let mut dx = if wants(*x) { vec![0.0; len(*x)] } else { Vec::new() };
                let mut dw = if wants(*w) { vec![0.0; len(*w)] } else { Vec::new() };
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * h * wd_;
                        let gbase = (i * c + ch) * ho * wo;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = gy[gbase + oy * wo + ox];
                                if d == 0.0 {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if ix < 0 || ix as usize >= wd_ {
                                            continue;
                                        }
                                        let xi = base + iy as usize * wd_ + ix as usize;
                                        let wi = ch * k * k + ky * k + kx;
                                        if !dw.is_empty() {
                                            dw[wi] += d * xd[xi];
                                        }
                                        if !dx.is_empty() {
                                            dx[xi] += d * wv[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if !dx.is_empty() {
                    acc(grads, *x, dx.len(), |g| {
                        g.iter_mut().zip(&dx).for_each(|(g, d)| *g += d)
                    });
                }
                if !dw.is_empty() {
                    acc(grads, *w, dw.len(), |g| {
                        g.iter_mut().zip(&dw).for_each(|(g, d)| *g += d)
                    });
                }
            }
            Op::Pointwise { x, w } => {
                let xs = self.shape(*x).to_vec();
                let o = self.shape(*w)[0];
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let xd = val(*x);
                let wd = val(*w);
                let (x_len, w_len) = (len(*x), len(*w));
                for i in 0..n {
                    let gy_i = &gy[i * o * hw..(i + 1) * o * hw];
                    if wants(*w) {
                        acc(grads, *w, w_len, |g| {
                            gemm(
                                gy_i,
                                (o, hw),
                                false,
                                &xd[i * c * hw..(i + 1) * c * hw],
                                (c, hw),
                                true,
                                g,
                                1.0,
                            )
                        });
                    }
                    if wants(*x) {
                        acc(grads, *x, x_len, |g| {
                            gemm(
                                wd,
                                (o, c),
                                true,
                                gy_i,
                                (o, hw),
                                false,
                                &mut g[i * c * hw..(i + 1) * c * hw],
                                1.0,
                            )
                        });
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let m = (n * spatial) as f64;
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * spatial;
                        for j in off..off + spatial {
                            dbeta[ch] += gy[j];
                            dgamma[ch] += gy[j] * xhat[j];
                        }
                    }
                }
                if wants(*x) {
                    acc(grads, *x, len(*x), |g| {
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * spatial;
                                let scale = gv[ch] * inv_std[ch];
                                for j in off..off + spatial {
                                    g[j] += if *batch_stats {
                                        scale / m * (m * gy[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                    } else {
                                        scale * gy[j]
                                    };
                                }
                            }
                        }
                    });
                }
                if wants(*gamma) {
                    acc(grads, *gamma, c, |g| {
                        g.iter_mut().zip(&dgamma).for_each(|(g, d)| *g += d)
                    });
                }
                if wants(*beta) {
                    acc(grads, *beta, c, |g| g.iter_mut().zip(&dbeta).for_each(|(g, d)| *g += d));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                acc(grads, *x, len(*x), |g| {
                    for (chunk, d) in g.chunks_mut(hw).zip(gy) {
                        chunk.iter_mut().for_each(|v| *v += d / hw as f64);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, len(*x), |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * mask[j];
                    }
                });
            }
            Op::Reshape(x) => {
                acc(grads, *x, len(*x), |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::Repeat { x, times } => {
                let d = self.shape(*x)[2];
                acc(grads, *x, len(*x), |g| {
                    for (bi, row) in g.chunks_mut(d).enumerate() {
                        for t in 0..*times {
                            let src = &gy[(bi * times + t) * d..][..d];
                            row.iter_mut().zip(src).for_each(|(g, s)| *g += s);
                        }
                    }
                });
            }
            Op::TimeStep { x, t } => {
                let xs = self.shape(*x).to_vec();
                let (b, steps, d) = (xs[0], xs[1], xs[2]);
                acc(grads, *x, len(*x), |g| {
                    for i in 0..b {
                        let dst = &mut g[(i * steps + t) * d..][..d];
                        dst.iter_mut().zip(&gy[i * d..][..d]).for_each(|(g, s)| *g += s);
                    }
                });
            }
            Op::Stack(steps) => {
                let t = steps.len();
                for (ti, &s) in steps.iter().enumerate() {
                    if !wants(s) {
                        continue;
                    }
                    let ss = self.shape(s);
                    let (b, d) = (ss[0], ss[1]);
                    acc(grads, s, b * d, |g| {
                        for i in 0..b {
                            let src = &gy[(i * t + ti) * d..][..d];
                            g[i * d..][..d].iter_mut().zip(src).for_each(|(g, v)| *g += v);
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let width = node.value.shape()[1];
                acc(grads, *x, len(*x), |g| {
                    for (row, src) in g.chunks_mut(cols).zip(gy.chunks(width)) {
                        row[*start..*start + width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, s)| *g += s);
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *self.shape(*x).last().unwrap();
                acc(grads, *x, len(*x), |g| {
                    for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                probs,
                targets,
                sample_weights,
            } => {
                let c = self.shape(*probs)[1];
                let p = val(*probs);
                let b = targets.len() as f64;
                acc(grads, *probs, len(*probs), |g| {
                    for (i, (&t, &w)) in targets.iter().zip(sample_weights).enumerate() {
                        let pv = p[i * c + t];
                        if pv > PROB_FLOOR {
                            g[i * c + t] -= gy[0] * w / (b * pv);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                sample_weights,
            } => {
                let c = self.shape(*logits)[1];
                let b = targets.len() as f64;
                acc(grads, *logits, len(*logits), |g| {
                    for (i, (&t, &w)) in targets.iter().zip(sample_weights).enumerate() {
                        let scale = gy[0] * w / b;
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(grads, *x, len(*x), |g| g.iter_mut().for_each(|v| *v += gy[0]));
            }
            Op::SumSquares(x) => {
                let vx = val(*x);
                acc(grads, *x, len(*x), |g| {
                    for j in 0..g.len() {
                        g[j] += 2.0 * vx[j] * gy[0];
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over consecutive rows of width `d`.
pub fn softmax_rows(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn mean_nll(probs: &[f64], c: usize, targets: &[usize], weights: &[f64]) -> f64 {
    let total: f64 = targets
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&t, &w))| -w * probs[i * c + t].max(PROB_FLOOR).ln())
        .sum();
    total / targets.len() as f64
}
