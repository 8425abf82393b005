//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse to produce
//! gradients for every node that depends on a trainable leaf. Per-sample
//! work inside the heavier kernels (convolution, group norm) is spread over
//! the batch through [`crate::par`].

use crate::par;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ConcatChannels(Vec<Var>),
    UpsampleNearest2(Var),
    MeanPoolSpatial(Var),
    ToTokens(Var),
    FromTokens(Var),
    Select(Var, usize),
    Stack(Vec<Var>),
    NormalizeRows(Var),
    MseLoss {
        pred: Var,
        target: Tensor,
    },
    Dot {
        x: Var,
        weights: Tensor,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let npos = self.col_cols();
        let mut cols = vec![0.0; self.col_rows() * npos];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.h_out {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let npos = self.col_cols();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.h_out {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape: element count");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// `x @ w^T + b` applied over the last dimension of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear: weight must be 2-D");
        let d_in = *xs.last().expect("linear: scalar input");
        assert_eq!(d_in, ws[1], "linear: input width {} vs weight {:?}", d_in, ws);
        let d_out = ws[0];
        let m = self.value(x).len() / d_in;
        let mut out = vec![0.0; m * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), d_out);
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            m,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Linear { x, w, b }, rg)
    }

    /// 2-D matrix product `a @ b` (or `a @ b^T`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul: 2-D operands");
        let (m, k) = (sa[0], sa[1]);
        let n = if trans_b {
            assert_eq!(sb[1], k);
            sb[0]
        } else {
            assert_eq!(sb[0], k);
            sb[1]
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = *xs.shape().last().unwrap();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::from_vec(xs.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// 2-D convolution, `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Co, Ci, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch {:?} vs {:?}", xs, ws);
        assert_eq!(ws[2], ws[3]);
        let k = ws[2];
        assert!(xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k);
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: (xs[2] + 2 * pad - k) / stride + 1,
            w_out: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let in_len = geom.c_in * geom.h * geom.w;
        let out_len = geom.c_out * geom.col_cols();
        let mut out = vec![0.0; geom.batch * out_len];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            par::for_each_chunk_mut(&mut out, out_len, |n, dst| {
                let cols = geom.im2col(&xd[n * in_len..(n + 1) * in_len]);
                let npos = geom.col_cols();
                if let Some(bias) = bd {
                    for (co, row) in dst.chunks_mut(npos).enumerate() {
                        row.iter_mut().for_each(|v| *v = bias[co]);
                    }
                }
                gemm(
                    geom.c_out,
                    geom.col_rows(),
                    npos,
                    wd,
                    false,
                    &cols,
                    false,
                    dst,
                    if bd.is_some() { 1.0 } else { 0.0 },
                );
            });
        }
        let shape = [geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c) = (xs[0], xs[1]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {} channels, {} groups", c, groups);
        let hw = xs[2] * xs[3];
        let group_len = c / groups * hw;
        let xd = self.value(x).data();
        let stats: Vec<(f64, f64)> = (0..n * groups)
            .map(|i| {
                let chunk = &xd[i * group_len..(i + 1) * group_len];
                let mean = chunk.iter().sum::<f64>() / group_len as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
                (mean, 1.0 / (var + GN_EPS).sqrt())
            })
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        for (i, dst) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (mean, rstd) = stats[(i / c) * groups + ch / (c / groups)];
            let src = &xd[i * hw..(i + 1) * hw];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * rstd * gd[ch] + bd[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_vec(&xs, out).unwrap(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        )
    }

    /// Adds a per-sample, per-channel bias `[N, C]` to `[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(&xs[..2], self.shape(bias), "add_channel_bias: shape mismatch");
        let hw = xs[2] * xs[3];
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v += bd[i]);
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::from_vec(&xs, out).unwrap(), Op::AddChannelBias { x, bias }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let (n, hw) = (first[0], first[2] * first[3]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && s[2] == first[2] && s[3] == first[3], "concat_channels: shape mismatch");
            c_total += s[1];
        }
        let mut out = Vec::with_capacity(n * c_total * hw);
        for i in 0..n {
            for &p in parts {
                let s = self.shape(p);
                let len = s[1] * hw;
                out.extend_from_slice(&self.value(p).data()[i * len..(i + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let shape = [n, c_total, first[2], first[3]];
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::ConcatChannels(parts.to_vec()), rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len() * 4];
        for (p, dst) in out.chunks_mut(4 * h * w).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let shape = [xs[0], xs[1], 2 * h, 2 * w];
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::UpsampleNearest2(x), rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let hw = xs[2] * xs[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&xs[..2], out).unwrap(), Op::MeanPoolSpatial(x), rg)
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(i * hw + p) * c + ch] = xd[(i * c + ch) * hw + p];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, hw, c], out).unwrap(), Op::ToTokens(x), rg)
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, hw, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(hw, h * w);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[(i * c + ch) * hw + p] = xd[(i * hw + p) * c + ch];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h, w], out).unwrap(), Op::FromTokens(x), rg)
    }

    /// Slice `index` out of the leading dimension.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&xs[1..], data).unwrap(), Op::Select(x, index), rg)
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let inner = self.shape(parts[0]).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            assert_eq!(self.shape(p), &inner[..], "stack: shape mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Stack(parts.to_vec()), rg)
    }

    /// L2-normalizes each row of a 2-D tensor.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = xs[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&xs, out).unwrap(), Op::NormalizeRows(x), rg)
    }

    /// Mean squared error against a constant target, reduced to a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "mse_loss: shape mismatch");
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    /// `sum(x * weights)` for a constant `weights`.
    pub fn dot(&mut self, x: Var, weights: &Tensor) -> Var {
        assert_eq!(self.value(x).len(), weights.len(), "dot: length mismatch");
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
            rg,
        )
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let ls = self.shape(logits).to_vec();
        assert_eq!(ls[0], targets.len());
        let k = ls[1];
        let ld = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &t) in ld.chunks(k).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward: output must be scalar");
        self.backward_with(output, Tensor::full(self.shape(output), 1.0))
    }

    /// Backpropagates an explicit upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = zip_map(dy, vb, |d, y| d * y);
                    self.accum(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = zip_map(dy, va, |d, x| d * x);
                    self.accum(grads, *b, g);
                }
            }
            Op::Scale(x, f) => self.accum(grads, *x, dy.map(|d| d * f)),
            Op::Reshape(x) => {
                let g = dy.clone().reshape(self.shape(*x)).unwrap();
                self.accum(grads, *x, g);
            }
            Op::Silu(x) => {
                let g = zip_map(dy, self.value(*x), |d, v| {
                    let s = sigmoid(v);
                    d * s * (1.0 + v * (1.0 - s))
                });
                self.accum(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d_out, d_in) = (ws[0], ws[1]);
                let m = dy.len() / d_out;
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * d_in];
                    gemm(m, d_out, d_in, dy.data(), false, self.value(*w).data(), false, &mut dx, 0.0);
                    self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    gemm(d_out, m, d_in, dy.data(), true, self.value(*x).data(), false, &mut dw, 0.0);
                    self.accum(grads, *w, Tensor::from_vec(ws, dw).unwrap());
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; d_out];
                        for row in dy.data().chunks(d_out) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        self.accum(grads, *b, Tensor::from_vec(&[d_out], db).unwrap());
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = dy.shape()[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dY @ op(B)^T
                    gemm(m, n, k, dy.data(), false, self.value(*b).data(), !trans_b, &mut da, 0.0);
                    self.accum(grads, *a, Tensor::from_vec(sa, da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(n, m, k, dy.data(), true, self.value(*a).data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, self.value(*a).data(), true, dy.data(), false, &mut db, 0.0);
                    }
                    self.accum(grads, *b, Tensor::from_vec(sb, db).unwrap());
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((out, yr), dr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(dy.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, yv), dv) in out.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, dy, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, stats, dy, grads),
            Op::AddChannelBias { x, bias } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                self.accum(grads, *x, dy.clone());
                if self.rg(*bias) {
                    let db: Vec<f64> = dy.data().chunks(hw).map(|p| p.iter().sum()).collect();
                    self.accum(grads, *bias, Tensor::from_vec(&xs[..2], db).unwrap());
                }
            }
            Op::ConcatChannels(parts) => {
                let s = dy.shape();
                let (n, hw) = (s[0], s[2] * s[3]);
                let c_total = s[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let start = (i * c_total + offset) * hw;
                            g.extend_from_slice(&dy.data()[start..start + c * hw]);
                        }
                        self.accum(grads, p, Tensor::from_vec(self.shape(p), g).unwrap());
                    }
                    offset += c;
                }
            }
            Op::UpsampleNearest2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let mut g = vec![0.0; self.value(*x).len()];
                for (p, dst) in g.chunks_mut(h * w).enumerate() {
                    let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xs, g).unwrap());
            }
            Op::MeanPoolSpatial(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let mut g = vec![0.0; self.value(*x).len()];
                for (plane, d) in g.chunks_mut(hw).zip(dy.data()) {
                    plane.iter_mut().for_each(|v| *v = d / hw as f64);
                }
                self.accum(grads, *x, Tensor::from_vec(xs, g).unwrap());
            }
            Op::ToTokens(x) => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut g = vec![0.0; dy.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            g[(i * c + ch) * hw + p] = dy.data()[(i * hw + p) * c + ch];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xs, g).unwrap());
            }
            Op::FromTokens(x) => {
                let xs = self.shape(*x);
                let (n, hw, c) = (xs[0], xs[1], xs[2]);
                let mut g = vec![0.0; dy.len()];
                for i in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            g[(i * hw + p) * c + ch] = dy.data()[(i * c + ch) * hw + p];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xs, g).unwrap());
            }
            Op::Select(x, index) => {
                let xs = self.shape(*x);
                let inner = dy.len();
                let mut g = Tensor::zeros(xs);
                g.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(dy.data());
                self.accum(grads, *x, g);
            }
            Op::Stack(parts) => {
                let inner = dy.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        let g = dy.data()[i * inner..(i + 1) * inner].to_vec();
                        self.accum(grads, p, Tensor::from_vec(self.shape(p), g).unwrap());
                    }
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let y = &node.value;
                let mut g = vec![0.0; xv.len()];
                for (((out, xr), yr), dr) in g
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(y.data().chunks(d))
                    .zip(dy.data().chunks(d))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, yv), dv) in out.iter_mut().zip(yr).zip(dr) {
                        *o = (dv - yv * dot) / norm;
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), g).unwrap());
            }
            Op::MseLoss { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * dy.item() / p.len() as f64;
                let g = zip_map(p, target, |a, b| scale * (a - b));
                self.accum(grads, *pred, g);
            }
            Op::Dot { x, weights } => {
                let d = dy.item();
                let g = Tensor::from_vec(self.shape(*x), weights.data().iter().map(|w| w * d).collect()).unwrap();
                self.accum(grads, *x, g);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = dy.item() / targets.len() as f64;
                let mut g = vec![0.0; lv.len()];
                for ((out, row), &t) in g.chunks_mut(k).zip(lv.data().chunks(k)).zip(targets) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for (j, (o, v)) in out.iter_mut().zip(row).enumerate() {
                        let p = (v - max).exp() / sum;
                        *o = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(lv.shape(), g).unwrap());
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let in_len = geom.c_in * geom.h * geom.w;
        let npos = geom.col_cols();
        let out_len = geom.c_out * npos;
        let kk = geom.col_rows();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let per_sample = par::map_range(geom.batch, |n| {
            let dyn_ = &dy.data()[n * out_len..(n + 1) * out_len];
            let dw = need_w.then(|| {
                let cols = geom.im2col(&xd[n * in_len..(n + 1) * in_len]);
                let mut dw = vec![0.0; geom.c_out * kk];
                gemm(geom.c_out, npos, kk, dyn_, false, &cols, true, &mut dw, 0.0);
                dw
            });
            let dx = need_x.then(|| {
                let mut dcols = vec![0.0; kk * npos];
                gemm(kk, geom.c_out, npos, wd, true, dyn_, false, &mut dcols, 0.0);
                let mut dx = vec![0.0; in_len];
                geom.col2im(&dcols, &mut dx);
                dx
            });
            (dw, dx)
        });
        if need_w {
            let mut total = vec![0.0; geom.c_out * kk];
            for (dw, _) in &per_sample {
                let dw = dw.as_ref().unwrap();
                total.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            }
            self.accum(grads, w, Tensor::from_vec(self.shape(w), total).unwrap());
        }
        if need_x {
            let mut dx = Vec::with_capacity(geom.batch * in_len);
            for (_, d) in per_sample {
                dx.extend_from_slice(&d.unwrap());
            }
            self.accum(grads, x, Tensor::from_vec(self.shape(x), dx).unwrap());
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; geom.c_out];
                for (i, plane) in dy.data().chunks(npos).enumerate() {
                    db[i % geom.c_out] += plane.iter().sum::<f64>();
                }
                self.accum(grads, b, Tensor::from_vec(&[geom.c_out], db).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f64, f64)],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(x);
        let (n, c) = (xs[0], xs[1]);
        let hw = xs[2] * xs[3];
        let cpg = c / groups;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let dyd = dy.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n * c {
            let (mean, rstd) = stats[(i / c) * groups + (i % c) / cpg];
            let (xp, dp) = (&xd[i * hw..(i + 1) * hw], &dyd[i * hw..(i + 1) * hw]);
            for (v, d) in xp.iter().zip(dp) {
                dgamma[i % c] += d * (v - mean) * rstd;
                dbeta[i % c] += d;
            }
        }
        if self.rg(x) {
            let group_len = cpg * hw;
            let mut dx = vec![0.0; xd.len()];
            for (gi, dst) in dx.chunks_mut(group_len).enumerate() {
                let (mean, rstd) = stats[gi];
                let base = gi * group_len;
                let ch0 = (gi % groups) * cpg;
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for j in 0..group_len {
                    let g = dyd[base + j] * gd[ch0 + j / hw];
                    let xhat = (xd[base + j] - mean) * rstd;
                    sum_g += g;
                    sum_gx += g * xhat;
                }
                let (mg, mgx) = (sum_g / group_len as f64, sum_gx / group_len as f64);
                for (j, o) in dst.iter_mut().enumerate() {
                    let g = dyd[base + j] * gd[ch0 + j / hw];
                    let xhat = (xd[base + j] - mean) * rstd;
                    *o = rstd * (g - mg - xhat * mgx);
                }
            }
            self.accum(grads, x, Tensor::from_vec(xs, dx).unwrap());
        }
        self.accum(grads, gamma, Tensor::from_vec(&[c], dgamma).unwrap());
        self.accum(grads, beta, Tensor::from_vec(&[c], dbeta).unwrap());
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .unwrap()
}
