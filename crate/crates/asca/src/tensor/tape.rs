use std::rc::Rc;

use rayon::prelude::*;

use super::kernels::{
    conv2d_backward, conv2d_forward, matmul_abt_acc, matmul_acc, matmul_atb_acc, matmul_kernel,
    ConvGeom,
};
use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm site. Lives with the model weights;
/// the tape only reads it (eval) or updates it (train).
#[derive(Debug, Clone)]
pub struct BnState<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub momentum: S,
}

impl<S: Scalar> BnState<S> {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
            momentum: sc(0.1),
        }
    }
}

enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Batched matmul over leading groups; `trans_b` multiplies by B^T.
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulElem {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    AddRowBias {
        x: Var,
        b: Var,
        rows: usize,
        cols: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    /// 2x2 stride-2 average pooling; boundary windows are clipped and
    /// averaged over the cells actually covered.
    AvgPool2 {
        x: Var,
    },
    Pad2d {
        x: Var,
    },
    Crop2d {
        x: Var,
        h: usize,
        w: usize,
    },
    WindowPartition {
        x: Var,
        win: usize,
    },
    WindowMerge {
        t: Var,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        win: usize,
    },
    SplitHeads {
        t: Var,
        heads: usize,
    },
    MergeHeads {
        t: Var,
        heads: usize,
    },
    /// logits[g*heads + h, i, j] += table[index[i*n + j], h]
    AddRelBias {
        logits: Var,
        table: Var,
        index: Rc<Vec<u32>>,
        heads: usize,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    SumAll {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Rc<Vec<S>>,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Wengert tape: ordered op records over an arena of value buffers.
/// Single-owner; `backward` consumes it.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

/// Per-leaf gradients produced by [`Tape::backward`]. Leaves that no path
/// reached report zeros.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
    sizes: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient buffer for a leaf, zeros when no gradient flowed to it.
    pub fn take(&mut self, v: Var) -> Vec<S> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => vec![S::zero(); self.sizes[v.0]],
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new(recording: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("arena shapes are consistent")
    }

    /// Registers a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let needs = self.recording && t.requires_grad;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, needs))
    }

    /// Registers a non-differentiable constant leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn guard(&self, op: &'static str, out: &[S]) -> Result<()> {
        if out.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_kernel(self.value(a), self.value(b), m, k, n, &mut out);
        self.guard("matmul", &out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }, needs))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![S::zero(); g * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, oi)| {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                if trans_b {
                    matmul_abt_acc(ai, bi, m, k, n, oi);
                } else {
                    matmul_acc(ai, bi, m, k, n, oi);
                }
            });
        }
        self.guard("bmm", &out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            vec![g, m, n],
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                g,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// Cross-correlation with zero padding; `groups == in_channels` gives a
    /// depthwise convolution. Output extents use floor division; the call is
    /// an error only when the padded input is smaller than the kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (bs, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, c_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: channels {c} and filters {o} must be divisible by groups {groups}"
            )));
        }
        if c_g != c / groups {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            batch: bs,
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: o,
            kh,
            kw,
            stride,
            pad,
            groups,
            out_h,
            out_w,
        };
        let out = conv2d_forward(self.value(x), self.value(w), &geom);
        self.guard("conv2d", &out)?;
        let needs = self.needs(&[x, w]);
        Ok(self.push(vec![bs, o, out_h, out_w], out, Op::Conv2d { x, w, geom }, needs))
    }

    // ── Pointwise and normalization ──────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of bounds for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        for oi in 0..outer {
            for ii in 0..inner {
                let base = oi * axis_len * inner + ii;
                // max-subtraction keeps exp in range
                let mut mx = S::neg_infinity();
                for j in 0..axis_len {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..axis_len {
                    let e = (xv[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..axis_len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        self.guard("softmax", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, needs))
    }

    /// Batch normalization over [B, C, H, W] with per-channel affine.
    /// Train mode normalizes by batch statistics and updates `state`;
    /// eval mode normalizes by the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<S>,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![c],
            });
        }
        if state.mean.len() != c {
            return Err(Error::Config(format!(
                "batch_norm state has {} channels, input has {c}",
                state.mean.len()
            )));
        }
        let train = mode == BnMode::Train;
        if train && b < 2 {
            return Err(Error::Config(
                "batch_norm requires a batch of at least 2 in train mode".into(),
            ));
        }
        let plane = h * w;
        let n = b * plane;
        let n_s = sc(n as f64);
        let eps = sc(BN_EPS);

        let (mean, var): (Vec<S>, Vec<S>) = if train {
            let xv = self.value(x);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut sum = S::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for v in &xv[base..base + plane] {
                        sum = sum + *v;
                    }
                }
                let mu = sum / n_s;
                let mut acc = S::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for v in &xv[base..base + plane] {
                        let d = *v - mu;
                        acc = acc + d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = acc / n_s;
            }
            // running stats use the unbiased variance, normalization the biased one
            let m = state.momentum;
            let unbias = if n > 1 {
                sc(n as f64 / (n as f64 - 1.0))
            } else {
                S::one()
            };
            for ci in 0..c {
                state.mean[ci] = (S::one() - m) * state.mean[ci] + m * mean[ci];
                state.var[ci] = (S::one() - m) * state.var[ci] + m * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (state.mean.clone(), state.var.clone())
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![S::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, istd, g, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for i in base..base + plane {
                    out[i] = (xv[i] - mu) * istd * g + be;
                }
            }
        }
        self.guard("batch_norm", &out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Activation::Gelu => gelu(v),
                Activation::Sigmoid => sigmoid(v),
                Activation::Relu => v.max(S::zero()),
            })
            .collect();
        self.guard("activation", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Act { x, kind }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let shape = self.shape(a).to_vec();
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        self.guard("add", &out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let shape = self.shape(a).to_vec();
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        self.guard("mul_elem", &out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::MulElem { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<S> = self.value(x).iter().map(|&v| v * c).collect();
        self.guard("scale", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Scale { x, c }, needs))
    }

    /// x[r, f] + b[f] broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            for (v, &bias) in row.iter_mut().zip(bv.iter()) {
                *v = *v + bias;
            }
        }
        self.guard("add_row_bias", &out)?;
        let needs = self.needs(&[x, b]);
        Ok(self.push(sx, out, Op::AddRowBias { x, b, rows, cols }, needs))
    }

    /// Fully connected layer over row vectors: x[r, in] * w[in, out] (+ bias).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_row_bias(y, bias),
            None => Ok(y),
        }
    }

    // ── Pooling and layout ───────────────────────────────────────────

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = sc(1.0 / plane as f64);
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * plane;
            let mut acc = S::zero();
            for v in &xv[base..base + plane] {
                acc = acc + *v;
            }
            *o = acc * inv;
        }
        self.guard("global_avg_pool", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(vec![b, c], out, Op::GlobalAvgPool { x }, needs))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let xp = &xv[bc * h * w..(bc + 1) * h * w];
            let op_ = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * 2, ox * 2);
                    let (y1, x1) = ((y0 + 2).min(h), (x0 + 2).min(w));
                    let mut acc = S::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + xp[yy * w + xx];
                        }
                    }
                    let count = sc(((y1 - y0) * (x1 - x0)) as f64);
                    op_[oy * ow + ox] = acc / count;
                }
            }
        }
        self.guard("avg_pool2", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(vec![b, c, oh, ow], out, Op::AvgPool2 { x }, needs))
    }

    /// Zero padding at the bottom/right of the spatial dims.
    pub fn pad2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "pad2d",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        if ph == 0 && pw == 0 {
            return self.reshape(x, &s);
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (nh, nw) = (h + ph, w + pw);
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c * nh * nw];
        for bc in 0..b * c {
            for y in 0..h {
                let src = &xv[bc * h * w + y * w..bc * h * w + (y + 1) * w];
                let dst = &mut out[bc * nh * nw + y * nw..bc * nh * nw + y * nw + w];
                dst.copy_from_slice(src);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![b, c, nh, nw], out, Op::Pad2d { x }, needs))
    }

    /// Keep the top-left h x w region of the spatial dims.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || h > s[2] || w > s[3] {
            return Err(Error::ShapeMismatch {
                op: "crop2d",
                lhs: s,
                rhs: vec![0, 0, h, w],
            });
        }
        if h == s[2] && w == s[3] {
            return self.reshape(x, &s);
        }
        let (b, c, ih, iw) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c * h * w];
        for bc in 0..b * c {
            for y in 0..h {
                let src = &xv[bc * ih * iw + y * iw..bc * ih * iw + y * iw + w];
                out[bc * h * w + y * w..bc * h * w + (y + 1) * w].copy_from_slice(src);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![b, c, h, w], out, Op::Crop2d { x, h, w }, needs))
    }

    /// [B, C, H, W] -> [B*nWh*nWw, win*win, C]; H and W must be multiples of `win`.
    pub fn window_partition(&mut self, x: Var, win: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || win == 0 || s[2] % win != 0 || s[3] % win != 0 {
            return Err(Error::Config(format!(
                "window_partition: window {win} does not divide spatial dims of {s:?}"
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (nwh, nww) = (h / win, w / win);
        let n = win * win;
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c * h * w];
        for bi in 0..b {
            for wy in 0..nwh {
                for wx in 0..nww {
                    let g = (bi * nwh + wy) * nww + wx;
                    for ty in 0..win {
                        for tx in 0..win {
                            let t = ty * win + tx;
                            let (sy, sx) = (wy * win + ty, wx * win + tx);
                            for ci in 0..c {
                                out[(g * n + t) * c + ci] =
                                    xv[((bi * c + ci) * h + sy) * w + sx];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![b * nwh * nww, n, c], out, Op::WindowPartition { x, win }, needs))
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, t: Var, b: usize, c: usize, h: usize, w: usize, win: usize) -> Result<Var> {
        let s = self.shape(t).to_vec();
        let (nwh, nww) = (h / win, w / win);
        if s.len() != 3
            || h % win != 0
            || w % win != 0
            || s[0] != b * nwh * nww
            || s[1] != win * win
            || s[2] != c
        {
            return Err(Error::ShapeMismatch {
                op: "window_merge",
                lhs: s,
                rhs: vec![b * nwh * nww, win * win, c],
            });
        }
        let n = win * win;
        let tv = self.value(t);
        let mut out = vec![S::zero(); b * c * h * w];
        for bi in 0..b {
            for wy in 0..nwh {
                for wx in 0..nww {
                    let g = (bi * nwh + wy) * nww + wx;
                    for ty in 0..win {
                        for tx in 0..win {
                            let tok = ty * win + tx;
                            let (sy, sx) = (wy * win + ty, wx * win + tx);
                            for ci in 0..c {
                                out[((bi * c + ci) * h + sy) * w + sx] =
                                    tv[(g * n + tok) * c + ci];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[t]);
        Ok(self.push(vec![b, c, h, w], out, Op::WindowMerge { t, b, c, h, w, win }, needs))
    }

    /// [G, n, C] -> [G*heads, n, C/heads]
    pub fn split_heads(&mut self, t: Var, heads: usize) -> Result<Var> {
        let s = self.shape(t).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::Config(format!(
                "split_heads: channels {} not divisible by heads {heads}",
                s.get(2).copied().unwrap_or(0)
            )));
        }
        let (g, n, c) = (s[0], s[1], s[2]);
        let dh = c / heads;
        let tv = self.value(t);
        let mut out = vec![S::zero(); g * n * c];
        for gi in 0..g {
            for hi in 0..heads {
                for ti in 0..n {
                    let src = &tv[(gi * n + ti) * c + hi * dh..(gi * n + ti) * c + (hi + 1) * dh];
                    let dst_base = (((gi * heads + hi) * n) + ti) * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(src);
                }
            }
        }
        let needs = self.needs(&[t]);
        Ok(self.push(vec![g * heads, n, dh], out, Op::SplitHeads { t, heads }, needs))
    }

    /// [G*heads, n, dh] -> [G, n, heads*dh]
    pub fn merge_heads(&mut self, t: Var, heads: usize) -> Result<Var> {
        let s = self.shape(t).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::Config(format!(
                "merge_heads: group dim {} not divisible by heads {heads}",
                s.first().copied().unwrap_or(0)
            )));
        }
        let (gh, n, dh) = (s[0], s[1], s[2]);
        let g = gh / heads;
        let c = heads * dh;
        let tv = self.value(t);
        let mut out = vec![S::zero(); g * n * c];
        for gi in 0..g {
            for hi in 0..heads {
                for ti in 0..n {
                    let src_base = (((gi * heads + hi) * n) + ti) * dh;
                    let dst = &mut out[(gi * n + ti) * c + hi * dh..(gi * n + ti) * c + (hi + 1) * dh];
                    dst.copy_from_slice(&tv[src_base..src_base + dh]);
                }
            }
        }
        let needs = self.needs(&[t]);
        Ok(self.push(vec![g, n, c], out, Op::MergeHeads { t, heads }, needs))
    }

    /// Adds the learned relative-offset bias to attention logits:
    /// out[g*heads + h, i, j] = logits[..] + table[index[i*n + j], h].
    pub fn add_rel_bias(&mut self, logits: Var, table: Var, index: Rc<Vec<u32>>, heads: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let st = self.shape(table).to_vec();
        if s.len() != 3 || s[1] != s[2] || s[0] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "add_rel_bias",
                lhs: s,
                rhs: vec![heads],
            });
        }
        let n = s[1];
        if index.len() != n * n || st.len() != 2 || st[1] != heads {
            return Err(Error::ShapeMismatch {
                op: "add_rel_bias",
                lhs: st,
                rhs: vec![index.len(), heads],
            });
        }
        let tv = self.value(table).to_vec();
        let mut out = self.value(logits).to_vec();
        let gh = s[0];
        for gi in 0..gh {
            let h = gi % heads;
            let block = &mut out[gi * n * n..(gi + 1) * n * n];
            for (cell, &idx) in block.iter_mut().zip(index.iter()) {
                *cell = *cell + tv[idx as usize * heads + h];
            }
        }
        self.guard("add_rel_bias", &out)?;
        let needs = self.needs(&[logits, table]);
        Ok(self.push(
            s,
            out,
            Op::AddRelBias {
                logits,
                table,
                index,
                heads,
            },
            needs,
        ))
    }

    /// Per-channel gating: out[b,c,h,w] = x[b,c,h,w] * gate[b,c].
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gate).to_vec();
        if sx.len() != 4 || sg.len() != 2 || sg[0] != sx[0] || sg[1] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: sx,
                rhs: sg,
            });
        }
        let plane = sx[2] * sx[3];
        let gv = self.value(gate).to_vec();
        let mut out = self.value(x).to_vec();
        for (bc, chunk) in out.chunks_mut(plane).enumerate() {
            let g = gv[bc];
            for v in chunk.iter_mut() {
                *v = *v * g;
            }
        }
        self.guard("scale_channels", &out)?;
        let needs = self.needs(&[x, gate]);
        Ok(self.push(sx, out, Op::ScaleChannels { x, gate }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = S::zero();
        for v in self.value(x) {
            acc = acc + *v;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite { op: "sum_all" });
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![1], vec![acc], Op::SumAll { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, needs))
    }

    /// Numerically stable binary cross-entropy on logits, averaged over all
    /// cells: mean(max(z,0) - z*t + ln(1 + exp(-|z|))).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets
            .iter()
            .any(|&t| !(t >= S::zero() && t <= S::one()))
        {
            return Err(Error::Contract(
                "bce_with_logits targets must lie in [0, 1]".into(),
            ));
        }
        let zv = self.value(logits);
        let mut acc = S::zero();
        for (&z, &t) in zv.iter().zip(targets.iter()) {
            let term = z.max(S::zero()) - z * t + (S::one() + (-z.abs()).exp()).ln();
            acc = acc + term;
        }
        let loss = acc / sc(n as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: "bce_with_logits",
            });
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: Rc::new(targets.to_vec()),
            },
            needs,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss. Consumes the tape;
    /// leaves not on any path to the loss report zero gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if !self.recording {
            return Err(Error::Contract(
                "backward requires a recording tape".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        let nodes = self.nodes;
        for idx in (0..n_nodes).rev() {
            if !nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let d_out = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(&nodes, idx, &d_out, &mut grads);
            if !matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = None;
            } else {
                grads[idx] = Some(d_out);
            }
        }

        let sizes = nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, sizes })
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c: S = sc(0.7978845608028654); // sqrt(2/pi)
    let a: S = sc(0.044715);
    let half: S = sc(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c: S = sc(0.7978845608028654);
    let a: S = sc(0.044715);
    let half: S = sc(0.5);
    let three: S = sc(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

fn acc_into<S: Scalar>(slot: &mut Option<Vec<S>>, size: usize, add: impl FnOnce(&mut [S])) {
    let buf = slot.get_or_insert_with(|| vec![S::zero(); size]);
    add(buf);
}

#[allow(clippy::too_many_lines)]
fn backward_op<S: Scalar>(
    nodes: &[Node<S>],
    idx: usize,
    d_out: &[S],
    grads: &mut Vec<Option<Vec<S>>>,
) {
    let sz = |v: Var| nodes[v.0].value.len();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[a.0].needs_grad {
                let bv = &nodes[b.0].value;
                acc_into(&mut grads[a.0], sz(*a), |g| {
                    matmul_abt_acc(d_out, bv, m, n, k, g);
                });
            }
            if nodes[b.0].needs_grad {
                let av = &nodes[a.0].value;
                acc_into(&mut grads[b.0], sz(*b), |g| {
                    matmul_atb_acc(av, d_out, k, m, n, g);
                });
            }
        }
        Op::Bmm {
            a,
            b,
            trans_b,
            g,
            m,
            k,
            n,
        } => {
            let (g_, m, k, n) = (*g, *m, *k, *n);
            let _ = g_;
            if nodes[a.0].needs_grad {
                let bv = &nodes[b.0].value;
                acc_into(&mut grads[a.0], sz(*a), |ga| {
                    ga.par_chunks_mut(m * k).enumerate().for_each(|(i, gi)| {
                        let d = &d_out[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // C = A B^T: dA = dC * B  ([m,n]*[n,k])
                            matmul_acc(d, bi, m, n, k, gi);
                        } else {
                            matmul_abt_acc(d, bi, m, n, k, gi);
                        }
                    });
                });
            }
            if nodes[b.0].needs_grad {
                let av = &nodes[a.0].value;
                acc_into(&mut grads[b.0], sz(*b), |gb| {
                    gb.par_chunks_mut(k * n).enumerate().for_each(|(i, gi)| {
                        let d = &d_out[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // dB[n,k] = dC^T * A
                            matmul_atb_acc(d, ai, n, m, k, gi);
                        } else {
                            matmul_atb_acc(ai, d, k, m, n, gi);
                        }
                    });
                });
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (d_x, d_w) = conv2d_backward(&nodes[x.0].value, &nodes[w.0].value, d_out, geom);
            if nodes[x.0].needs_grad {
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for (gv, dv) in g.iter_mut().zip(d_x.iter()) {
                        *gv = *gv + *dv;
                    }
                });
            }
            if nodes[w.0].needs_grad {
                acc_into(&mut grads[w.0], sz(*w), |g| {
                    for (gv, dv) in g.iter_mut().zip(d_w.iter()) {
                        *gv = *gv + *dv;
                    }
                });
            }
        }
        Op::Softmax { x, axis } => {
            if nodes[x.0].needs_grad {
                let shape = &nodes[idx].shape;
                let y = &nodes[idx].value;
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let base = oi * axis_len * inner + ii;
                            let mut dot = S::zero();
                            for j in 0..axis_len {
                                let p = base + j * inner;
                                dot = dot + d_out[p] * y[p];
                            }
                            for j in 0..axis_len {
                                let p = base + j * inner;
                                g[p] = g[p] + y[p] * (d_out[p] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            train,
        } => {
            let shape = &nodes[idx].shape;
            let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let n = b * plane;
            let n_s = sc(n as f64);
            let xv = &nodes[x.0].value;
            let gv = &nodes[gamma.0].value;

            // per-channel reductions shared by all three grads
            let mut sum_dy = vec![S::zero(); c];
            let mut sum_dy_xhat = vec![S::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let (mu, istd) = (mean[ci], inv_std[ci]);
                    for i in base..base + plane {
                        let xhat = (xv[i] - mu) * istd;
                        sum_dy[ci] = sum_dy[ci] + d_out[i];
                        sum_dy_xhat[ci] = sum_dy_xhat[ci] + d_out[i] * xhat;
                    }
                }
            }
            if nodes[gamma.0].needs_grad {
                acc_into(&mut grads[gamma.0], c, |g| {
                    for ci in 0..c {
                        g[ci] = g[ci] + sum_dy_xhat[ci];
                    }
                });
            }
            if nodes[beta.0].needs_grad {
                acc_into(&mut grads[beta.0], c, |g| {
                    for ci in 0..c {
                        g[ci] = g[ci] + sum_dy[ci];
                    }
                });
            }
            if nodes[x.0].needs_grad {
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let (mu, istd, ga) = (mean[ci], inv_std[ci], gv[ci]);
                            for i in base..base + plane {
                                let d = if *train {
                                    let xhat = (xv[i] - mu) * istd;
                                    ga * istd
                                        * (d_out[i]
                                            - sum_dy[ci] / n_s
                                            - xhat * sum_dy_xhat[ci] / n_s)
                                } else {
                                    ga * istd * d_out[i]
                                };
                                g[i] = g[i] + d;
                            }
                        }
                    }
                });
            }
        }
        Op::Act { x, kind } => {
            if nodes[x.0].needs_grad {
                let xv = &nodes[x.0].value;
                let yv = &nodes[idx].value;
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Activation::Gelu => gelu_grad(xv[i]),
                            Activation::Sigmoid => yv[i] * (S::one() - yv[i]),
                            Activation::Relu => {
                                if xv[i] > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                        };
                        g[i] = g[i] + d * d_out[i];
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if nodes[v.0].needs_grad {
                    acc_into(&mut grads[v.0], sz(*v), |g| {
                        for (gv, dv) in g.iter_mut().zip(d_out.iter()) {
                            *gv = *gv + *dv;
                        }
                    });
                }
            }
        }
        Op::MulElem { a, b } => {
            if nodes[a.0].needs_grad {
                let bv = &nodes[b.0].value;
                acc_into(&mut grads[a.0], sz(*a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + d_out[i] * bv[i];
                    }
                });
            }
            if nodes[b.0].needs_grad {
                let av = &nodes[a.0].value;
                acc_into(&mut grads[b.0], sz(*b), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + d_out[i] * av[i];
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            if nodes[x.0].needs_grad {
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + d_out[i] * *c;
                    }
                });
            }
        }
        Op::AddRowBias { x, b, rows, cols } => {
            if nodes[x.0].needs_grad {
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out.iter()) {
                        *gv = *gv + *dv;
                    }
                });
            }
            if nodes[b.0].needs_grad {
                acc_into(&mut grads[b.0], sz(*b), |g| {
                    for r in 0..*rows {
                        let row = &d_out[r * cols..(r + 1) * cols];
                        for (gv, dv) in g.iter_mut().zip(row.iter()) {
                            *gv = *gv + *dv;
                        }
                    }
                });
            }
        }
        Op::GlobalAvgPool { x } => {
            if nodes[x.0].needs_grad {
                let plane = nodes[x.0].shape[2] * nodes[x.0].shape[3];
                let inv = sc(1.0 / plane as f64);
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for (bc, d) in d_out.iter().enumerate() {
                        let v = *d * inv;
                        for gv in &mut g[bc * plane..(bc + 1) * plane] {
                            *gv = *gv + v;
                        }
                    }
                });
            }
        }
        Op::AvgPool2 { x } => {
            if nodes[x.0].needs_grad {
                let s = &nodes[x.0].shape;
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for bc in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let (y0, x0) = (oy * 2, ox * 2);
                                let (y1, x1) = ((y0 + 2).min(h), (x0 + 2).min(w));
                                let count = sc(((y1 - y0) * (x1 - x0)) as f64);
                                let d = d_out[bc * oh * ow + oy * ow + ox] / count;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        let p = bc * h * w + yy * w + xx;
                                        g[p] = g[p] + d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::Pad2d { x } => {
            if nodes[x.0].needs_grad {
                let s = &nodes[x.0].shape;
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = &nodes[idx].shape;
                let (nh, nw) = (os[2], os[3]);
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for bc in 0..b * c {
                        for y in 0..h {
                            for xx in 0..w {
                                g[bc * h * w + y * w + xx] = g[bc * h * w + y * w + xx]
                                    + d_out[bc * nh * nw + y * nw + xx];
                            }
                        }
                    }
                });
            }
        }
        Op::Crop2d { x, h, w } => {
            if nodes[x.0].needs_grad {
                let s = &nodes[x.0].shape;
                let (b, c, ih, iw) = (s[0], s[1], s[2], s[3]);
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for bc in 0..b * c {
                        for y in 0..*h {
                            for xx in 0..*w {
                                g[bc * ih * iw + y * iw + xx] = g[bc * ih * iw + y * iw + xx]
                                    + d_out[bc * h * w + y * w + xx];
                            }
                        }
                    }
                });
            }
        }
        Op::WindowPartition { x, win } => {
            if nodes[x.0].needs_grad {
                let s = &nodes[x.0].shape;
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (nwh, nww) = (h / win, w / win);
                let n = win * win;
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for bi in 0..b {
                        for wy in 0..nwh {
                            for wx in 0..nww {
                                let gr = (bi * nwh + wy) * nww + wx;
                                for ty in 0..*win {
                                    for tx in 0..*win {
                                        let t = ty * win + tx;
                                        let (sy, sx) = (wy * win + ty, wx * win + tx);
                                        for ci in 0..c {
                                            let p = ((bi * c + ci) * h + sy) * w + sx;
                                            g[p] = g[p] + d_out[(gr * n + t) * c + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::WindowMerge { t, b, c, h, w, win } => {
            if nodes[t.0].needs_grad {
                let (nwh, nww) = (h / win, w / win);
                let n = win * win;
                acc_into(&mut grads[t.0], sz(*t), |g| {
                    for bi in 0..*b {
                        for wy in 0..nwh {
                            for wx in 0..nww {
                                let gr = (bi * nwh + wy) * nww + wx;
                                for ty in 0..*win {
                                    for tx in 0..*win {
                                        let tok = ty * win + tx;
                                        let (sy, sx) = (wy * win + ty, wx * win + tx);
                                        for ci in 0..*c {
                                            let p = (gr * n + tok) * c + ci;
                                            g[p] = g[p] + d_out[((bi * c + ci) * h + sy) * w + sx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::SplitHeads { t, heads } => {
            if nodes[t.0].needs_grad {
                let s = &nodes[t.0].shape;
                let (g_, n, c) = (s[0], s[1], s[2]);
                let dh = c / heads;
                acc_into(&mut grads[t.0], sz(*t), |g| {
                    for gi in 0..g_ {
                        for hi in 0..*heads {
                            for ti in 0..n {
                                let src_base = (((gi * heads + hi) * n) + ti) * dh;
                                let dst_base = (gi * n + ti) * c + hi * dh;
                                for d in 0..dh {
                                    g[dst_base + d] = g[dst_base + d] + d_out[src_base + d];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MergeHeads { t, heads } => {
            if nodes[t.0].needs_grad {
                let s = &nodes[t.0].shape;
                let (gh, n, dh) = (s[0], s[1], s[2]);
                let g_ = gh / heads;
                let c = heads * dh;
                acc_into(&mut grads[t.0], sz(*t), |g| {
                    for gi in 0..g_ {
                        for hi in 0..*heads {
                            for ti in 0..n {
                                let dst_base = (((gi * heads + hi) * n) + ti) * dh;
                                let src_base = (gi * n + ti) * c + hi * dh;
                                for d in 0..dh {
                                    g[dst_base + d] = g[dst_base + d] + d_out[src_base + d];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::AddRelBias {
            logits,
            table,
            index,
            heads,
        } => {
            let s = &nodes[idx].shape;
            let (gh, n) = (s[0], s[1]);
            if nodes[logits.0].needs_grad {
                acc_into(&mut grads[logits.0], sz(*logits), |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out.iter()) {
                        *gv = *gv + *dv;
                    }
                });
            }
            if nodes[table.0].needs_grad {
                acc_into(&mut grads[table.0], sz(*table), |g| {
                    for gi in 0..gh {
                        let h = gi % heads;
                        let block = &d_out[gi * n * n..(gi + 1) * n * n];
                        for (cell, &idxv) in block.iter().zip(index.iter()) {
                            let p = idxv as usize * heads + h;
                            g[p] = g[p] + *cell;
                        }
                    }
                });
            }
        }
        Op::ScaleChannels { x, gate } => {
            let s = &nodes[x.0].shape;
            let plane = s[2] * s[3];
            if nodes[x.0].needs_grad {
                let gv = &nodes[gate.0].value;
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for bc in 0..gv.len() {
                        let gt = gv[bc];
                        for i in bc * plane..(bc + 1) * plane {
                            g[i] = g[i] + d_out[i] * gt;
                        }
                    }
                });
            }
            if nodes[gate.0].needs_grad {
                let xv = &nodes[x.0].value;
                acc_into(&mut grads[gate.0], sz(*gate), |g| {
                    for bc in 0..g.len() {
                        let mut acc = S::zero();
                        for i in bc * plane..(bc + 1) * plane {
                            acc = acc + d_out[i] * xv[i];
                        }
                        g[bc] = g[bc] + acc;
                    }
                });
            }
        }
        Op::SumAll { x } => {
            if nodes[x.0].needs_grad {
                let d = d_out[0];
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for gv in g.iter_mut() {
                        *gv = *gv + d;
                    }
                });
            }
        }
        Op::Reshape { x } => {
            if nodes[x.0].needs_grad {
                acc_into(&mut grads[x.0], sz(*x), |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out.iter()) {
                        *gv = *gv + *dv;
                    }
                });
            }
        }
        Op::BceWithLogits { logits, targets } => {
            if nodes[logits.0].needs_grad {
                let zv = &nodes[logits.0].value;
                let inv_n = sc(1.0 / zv.len() as f64);
                let d = d_out[0];
                acc_into(&mut grads[logits.0], sz(*logits), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + (sigmoid(zv[i]) - targets[i]) * inv_n * d;
                    }
                });
            }
        }
    }
}
