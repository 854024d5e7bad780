use rand::Rng;

use super::kernels::{col2im, gemm, im2col, inverse_axes, permute};
use super::{matmul_dims, numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with the Gaussian CDF.
    Gelu,
    Sigmoid,
}

/// Batch normalization mode: batch statistics, or frozen running statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Act(Var, Activation),
    Dropout(Var, Vec<f64>),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

/// Geometry of a 2-D cross-correlation over `[b, c, h, w]` inputs.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite() || !self.inputs_finite(&op), "non-finite output");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        parents(op).iter().all(|p| self.nodes[p.0].value.all_finite())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape { op: "bmm", lhs: sa, rhs: sb });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![bs, m, n], data: out }, Op::BatchMatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may also match a trailing suffix of `a`'s shape and
    /// is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::Dimension {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            });
        }
        let data = permute(self.value(a).data(), &shape, axes);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: "rank must be at least 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Dimension {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Dimension {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Narrow { src: a, axis, start }, rg))
    }

    /// 2-D cross-correlation (no kernel flip) of `[b, c, h, w]` with
    /// `[f, c, kh, kw]` kernels; `bias` has one entry per filter.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("expected rank-4 input and kernel, got {si:?} and {sk:?}"),
            });
        }
        if si[1] != sk[1] {
            return Err(TensorError::Shape { op: "conv2d", lhs: si, rhs: sk });
        }
        let (kh, kw) = (sk[2], sk[3]);
        let (ph, pw) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::Dimension {
                        op: "conv2d",
                        msg: format!("same padding needs odd kernel extents, got {kh}x{kw}"),
                    });
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        if si[2] + 2 * ph < kh || si[3] + 2 * pw < kw {
            return Err(TensorError::Shape { op: "conv2d", lhs: si, rhs: sk });
        }
        let geom = ConvGeom {
            batch: si[0],
            channels: si[1],
            h: si[2],
            w: si[3],
            filters: sk[0],
            kh,
            kw,
            ph,
            pw,
            oh: si[2] + 2 * ph - kh + 1,
            ow: si[3] + 2 * pw - kw + 1,
        };
        self.conv(input, kernel, bias, geom, vec![geom.batch, geom.filters, geom.oh, geom.ow])
    }

    /// 1-D cross-correlation with same padding: `[b, c, l]` with `[f, c, k]`
    /// kernels (odd `k`) gives `[b, f, l]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 3 || si[1] != sk[1] || sk[2] % 2 == 0 || si[2] < 1 {
            return Err(TensorError::Shape { op: "conv1d", lhs: si, rhs: sk });
        }
        let geom = ConvGeom {
            batch: si[0],
            channels: si[1],
            h: 1,
            w: si[2],
            filters: sk[0],
            kh: 1,
            kw: sk[2],
            ph: 0,
            pw: sk[2] / 2,
            oh: 1,
            ow: si[2],
        };
        self.conv(input, kernel, bias, geom, vec![geom.batch, geom.filters, geom.ow])
    }

    fn conv(&mut self, input: Var, kernel: Var, bias: Option<Var>, g: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if let Some(b) = bias {
            if self.shape(b) != [g.filters] {
                return Err(TensorError::Shape {
                    op: "conv bias",
                    lhs: vec![g.filters],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = g.channels * g.kh * g.kw;
        let plane = g.oh * g.ow;
        let mut cols = vec![0.0; rows * plane];
        let mut out = vec![0.0; g.batch * g.filters * plane];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let in_size = g.channels * g.h * g.w;
        for b in 0..g.batch {
            im2col_geom(&x[b * in_size..(b + 1) * in_size], &g, &mut cols);
            let dst = &mut out[b * g.filters * plane..(b + 1) * g.filters * plane];
            gemm(g.filters, rows, plane, k, false, &cols, false, dst, 0.0);
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias_f = bd[i % g.filters];
                chunk.iter_mut().for_each(|v| *v += bias_f);
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor { shape: out_shape, data: out },
            Op::Conv { input, kernel, bias, geom: g },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over `[b, c, h, w]`; odd trailing rows or
    /// columns are dropped. Ties go to the first element in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TensorError::Dimension {
                op: "maxpool2d",
                msg: format!("need [b, c, h>=2, w>=2], got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor { shape: vec![s[0], s[1], oh, ow], data: out },
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    /// Per-channel batch normalization over `[b, c, h, w]`. In training mode
    /// the batch statistics are returned so the caller can keep running averages.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Dimension {
                op: "batchnorm2d",
                msg: format!("expected [b, c, h, w], got {s:?}"),
            });
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(TensorError::Shape { op: "batchnorm2d", lhs: s.clone(), rhs: self.shape(v).to_vec() });
            }
        }
        let train = matches!(mode, NormMode::Train);
        if train && b < 2 {
            return Err(TensorError::InsufficientBatch(b));
        }
        let x = self.value(input).data();
        let count = b * plane;
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = || (0..b).flat_map(move |i| x[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter());
                    let m = vals().sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                }
                (mean, var)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Dimension {
                        op: "batchnorm2d",
                        msg: format!("running statistics must have {c} entries"),
                    });
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (idx, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (idx / plane) % c;
            *xh = (x[idx] - mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let rg = self.rg(&[input, gamma, beta]);
        let var_node = self.push(
            Tensor { shape: s, data: out },
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train },
            rg,
        );
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((var_node, stats))
    }

    /// Standardizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let d = *s.last().expect("tensors have rank >= 1");
        for v in [gamma, beta] {
            if self.shape(v) != [d] {
                return Err(TensorError::Shape { op: "layernorm", lhs: s.clone(), rhs: self.shape(v).to_vec() });
            }
        }
        let x = self.value(input).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(Tensor { shape: s, data: out }, Op::LayerNorm { input, gamma, beta, xhat, inv_std }, rg))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, input: Var) -> Var {
        let value = softmax_rows(self.value(input));
        let rg = self.rg(&[input]);
        self.push(value, Op::Softmax(input), rg)
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = self.value(input).map(|x| kind.apply(x));
        let rg = self.rg(&[input]);
        self.push(value, Op::Act(input, kind), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Param(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(input);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Dropout(input, mask), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever earlier calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                match &mut self.grads[i] {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor { shape, data: g }),
                }
                continue;
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut ga, 0.0);
                    add_into(&mut local[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut gb, 0.0);
                    add_into(&mut local[b.0], gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], self.shape(*b)[2]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        gemm(m, n, k, &g[t * m * n..(t + 1) * m * n], false, &val(*b)[t * k * n..(t + 1) * k * n], true, &mut ga[t * m * k..(t + 1) * m * k], 0.0);
                    }
                    add_into(&mut local[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for t in 0..bs {
                        gemm(k, m, n, &val(*a)[t * m * k..(t + 1) * m * k], true, &g[t * m * n..(t + 1) * m * n], false, &mut gb[t * k * n..(t + 1) * k * n], 0.0);
                    }
                    add_into(&mut local[b.0], gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut local[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    let mut gb = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                    add_into(&mut local[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    add_into(&mut local[a.0], g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    add_into(&mut local[b.0], g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => add_into(&mut local[a.0], g.iter().map(|x| x * f).collect()),
            Op::Sum(a) => add_into(&mut local[a.0], vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                add_into(&mut local[a.0], vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => add_into(&mut local[a.0], g.to_vec()),
            Op::Permute(a, axes) => {
                let out_shape = node.value.shape();
                add_into(&mut local[a.0], permute(g, out_shape, &inverse_axes(axes)));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let block = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * shape[*axis] * inner + offset;
                            gp.extend_from_slice(&g[base..base + block]);
                        }
                        add_into(&mut local[p.0], gp);
                    }
                    offset += block;
                }
            }
            Op::Narrow { src, axis, start } => {
                let s = self.shape(*src);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gs = vec![0.0; numel(s)];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    gs[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(&mut local[src.0], gs);
            }
            Op::Conv { input, kernel, bias, geom } => {
                let gm = *geom;
                let rows = gm.channels * gm.kh * gm.kw;
                let plane = gm.oh * gm.ow;
                let in_size = gm.channels * gm.h * gm.w;
                let x = val(*input);
                let k = val(*kernel);
                let mut gk = vec![0.0; gm.filters * rows];
                let mut gx = vec![0.0; gm.batch * in_size];
                let mut cols = vec![0.0; rows * plane];
                let mut gcols = vec![0.0; rows * plane];
                for b in 0..gm.batch {
                    let gb = &g[b * gm.filters * plane..(b + 1) * gm.filters * plane];
                    if self.wants(*kernel) {
                        im2col_geom(&x[b * in_size..(b + 1) * in_size], &gm, &mut cols);
                        gemm(gm.filters, plane, rows, gb, false, &cols, true, &mut gk, 1.0);
                    }
                    if self.wants(*input) {
                        gemm(rows, gm.filters, plane, k, true, gb, false, &mut gcols, 0.0);
                        col2im(&gcols, gm.channels, gm.h, gm.w, gm.kh, gm.kw, gm.ph, gm.pw, gm.oh, gm.ow, &mut gx[b * in_size..(b + 1) * in_size]);
                    }
                }
                if self.wants(*input) {
                    add_into(&mut local[input.0], gx);
                }
                if self.wants(*kernel) {
                    add_into(&mut local[kernel.0], gk);
                }
                if let Some(bv) = bias.filter(|b| self.wants(*b)) {
                    let mut gbias = vec![0.0; gm.filters];
                    for (idx, chunk) in g.chunks(plane).enumerate() {
                        gbias[idx % gm.filters] += chunk.iter().sum::<f64>();
                    }
                    add_into(&mut local[bv.0], gbias);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).len()];
                for (&src, gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                add_into(&mut local[input.0], gx);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*input);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let count = (b * plane) as f64;
                let gd = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (idx, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (idx / plane) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xh;
                }
                if self.wants(*input) {
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(idx, (gv, xh))| {
                            let ch = (idx / plane) % c;
                            if *train {
                                gd[ch] * inv_std[ch] / count * (count * gv - sum_g[ch] - xh * sum_gx[ch])
                            } else {
                                gd[ch] * inv_std[ch] * gv
                            }
                        })
                        .collect();
                    add_into(&mut local[input.0], gx);
                }
                if self.wants(*gamma) {
                    add_into(&mut local[gamma.0], sum_gx);
                }
                if self.wants(*beta) {
                    add_into(&mut local[beta.0], sum_g);
                }
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gd = val(*gamma);
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                        let gxh = gr[j] * gd[j];
                        s1 += gxh;
                        s2 += gxh * xr[j];
                    }
                    for j in 0..d {
                        let gxh = gr[j] * gd[j];
                        gx[r * d + j] = is / d as f64 * (d as f64 * gxh - s1 - xr[j] * s2);
                    }
                }
                if self.wants(*input) {
                    add_into(&mut local[input.0], gx);
                }
                if self.wants(*gamma) {
                    add_into(&mut local[gamma.0], ggamma);
                }
                if self.wants(*beta) {
                    add_into(&mut local[beta.0], gbeta);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![0.0; y.len()];
                for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut local[a.0], gx);
            }
            Op::Act(a, kind) => {
                let x = val(*a);
                let y = node.value.data();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gv, (&x, &y))| {
                        gv * match kind {
                            Activation::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Gelu => gelu_grad(x),
                            Activation::Sigmoid => y * (1.0 - y),
                        }
                    })
                    .collect();
                add_into(&mut local[a.0], gx);
            }
            Op::Dropout(a, mask) => add_into(&mut local[a.0], g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let n = z.len() as f64;
                add_into(
                    &mut local[logits.0],
                    z.iter().zip(targets).map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n).collect(),
                );
            }
        }
    }
}

fn im2col_geom(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    im2col(img, g.channels, g.h, g.w, g.kh, g.kw, g.ph, g.pw, g.oh, g.ow, cols);
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Reshape(a) | Op::Permute(a, _) | Op::Softmax(a) | Op::Act(a, _) | Op::Dropout(a, _) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
        Op::Narrow { src, .. } => vec![*src],
        Op::Conv { input, kernel, bias, .. } => {
            let mut v = vec![*input, *kernel];
            v.extend(*bias);
            v
        }
        Op::MaxPool2d { input, .. } => vec![*input],
        Op::BatchNorm { input, gamma, beta, .. } | Op::LayerNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        Op::BceWithLogits { logits, .. } => vec![*logits],
    }
}

/// Row-wise softmax over the last axis of an untracked tensor.
pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let d = *t.shape().last().expect("rank >= 1");
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor { shape: t.shape().to_vec(), data }
}
