use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Elementwise kernels available through [`Tape::map`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Relu,
    Exp,
    Log,
    Neg,
    Scale(f64),
    Power(f64),
    /// `sign(0) = 0`; the gradient is zero everywhere.
    Sign,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Relu => "relu",
            Kernel::Exp => "exp",
            Kernel::Log => "log",
            Kernel::Neg => "neg",
            Kernel::Scale(_) => "scale",
            Kernel::Power(_) => "power",
            Kernel::Sign => "sign",
        }
    }

    fn check_domain<T: Scalar>(&self, data: &[T]) -> Result<()> {
        let bad = match *self {
            Kernel::Log => data.iter().position(|&v| !(v > T::zero() && v.is_finite())),
            Kernel::Power(g) if g.fract() != 0.0 => data.iter().position(|&v| v.is_nan() || v < T::zero()),
            _ => None,
        };
        match bad {
            Some(index) => Err(Error::Domain {
                kernel: self.name(),
                index,
                value: data[index].as_f64(),
            }),
            None => Ok(()),
        }
    }

    fn forward<T: Scalar>(&self, v: T) -> T {
        match *self {
            Kernel::Relu => v.max(T::zero()),
            Kernel::Exp => v.exp(),
            Kernel::Log => v.ln(),
            Kernel::Neg => -v,
            Kernel::Scale(c) => v * T::lit(c),
            Kernel::Power(g) => {
                if g.fract() == 0.0 && g.abs() < i32::MAX as f64 {
                    v.powi(g as i32)
                } else {
                    v.powf(T::lit(g))
                }
            }
            Kernel::Sign => {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative<T: Scalar>(&self, x: T, y: T) -> T {
        match *self {
            Kernel::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Kernel::Exp => y,
            Kernel::Log => T::one() / x,
            Kernel::Neg => -T::one(),
            Kernel::Scale(c) => T::lit(c),
            Kernel::Power(g) => {
                if g == 0.0 {
                    T::zero()
                } else if g.fract() == 0.0 {
                    T::lit(g) * x.powi(g as i32 - 1)
                } else {
                    T::lit(g) * x.powf(T::lit(g - 1.0))
                }
            }
            Kernel::Sign => T::zero(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(patch_offset, input_offset)` for every non-padding entry of
    /// one image's unfolded `[patch x out_area]` matrix.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let area = self.out_area();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row * area + oy * self.ow + ox, src);
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Map {
        x: usize,
        kernel: Kernel,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        channels: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        width: usize,
    },
    Sum {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        local_grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of operations. Parents always precede their children,
/// so reverse insertion order is a valid topological order for backward.
pub struct Tape<T: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by the requested vars.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a value that receives gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.nodes[self.index(var)?].requires_grad)
    }

    /// Allows another [`Tape::backward`] call on the same recording.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "variable {var:?} is not recorded on tape {}",
                self.id
            )));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn tracked(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    pub fn map(&mut self, x: Var, kernel: Kernel) -> Result<Var> {
        let xi = self.index(x)?;
        let input = &self.nodes[xi].value;
        kernel.check_domain(input.data())?;
        let out = input.map(|v| kernel.forward(v));
        let rg = self.tracked(&[xi]);
        Ok(self.push(out, Op::Map { x: xi, kernel }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Kernel::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.tracked(&[ai, bi]);
        Ok(self.push(out, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.tracked(&[ai, bi]);
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, rg))
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            va.data(),
            false,
            vb.data(),
            false,
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.tracked(&[ai, bi]);
        Ok(self.push(out, Op::MatMul { a: ai, b: bi, m, k, n }, rg))
    }

    /// Adds a per-channel bias along axis 1 (`[N x C x ...] + [C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.index(x)?, self.index(bias)?);
        let (vx, vb) = (&self.nodes[xi].value, &self.nodes[bi].value);
        if vx.rank() < 2 || vb.rank() != 1 || vb.len() != vx.shape()[1] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let channels = vb.len();
        let inner: usize = vx.shape()[2..].iter().product();
        let mut out = vx.clone();
        for (block, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let b = vb.data()[block % channels];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        let rg = self.tracked(&[xi, bi]);
        Ok(self.push(
            out,
            Op::AddBias {
                x: xi,
                bias: bi,
                channels,
                inner,
            },
            rg,
        ))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `x: [N x C x H x W]`, `w: [F x C x kh x kw]`. The output extent
    /// `(H + 2 pad - kh) / stride + 1` must divide exactly.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let (vx, vw) = (&self.nodes[xi].value, &self.nodes[wi].value);
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let [n, c, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [f, _, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) || !(wd + 2 * pad - kw).is_multiple_of(stride) {
            return Err(Error::config(format!(
                "conv2d output extent is not exact for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (patch, area) = (geom.patch(), geom.out_area());
        let image_len = c * h * wd;
        let mut cols = vec![T::zero(); n * patch * area];
        let mut out = vec![T::zero(); n * f * area];
        for img in 0..n {
            let src = &vx.data()[img * image_len..(img + 1) * image_len];
            let dst = &mut cols[img * patch * area..(img + 1) * patch * area];
            geom.for_each_tap(|col, s| dst[col] = src[s]);
            T::gemm(
                f,
                patch,
                area,
                T::one(),
                vw.data(),
                false,
                dst,
                false,
                T::zero(),
                &mut out[img * f * area..(img + 1) * f * area],
            );
        }
        let out = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        let rg = self.tracked(&[xi, wi]);
        // Inputs that cannot receive gradient only need the unfolded patches
        // when the weights are tracked.
        let cols = if self.nodes[wi].requires_grad { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling with a square `size x size` window.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let vx = &self.nodes[xi].value;
        if vx.rank() != 4 || size == 0 || !vx.shape()[2].is_multiple_of(size) || !vx.shape()[3].is_multiple_of(size) {
            return Err(Error::config(format!(
                "max_pool2d window {size} does not tile input {:?}",
                vx.shape()
            )));
        }
        let [n, c, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (oh, ow) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = vx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.tracked(&[xi]);
        Ok(self.push(out, Op::MaxPool { x: xi, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.tracked(&[xi]);
        Ok(self.push(out, Op::Reshape { x: xi }, rg))
    }

    /// Flattens `[N x ...]` to `[N x prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let shape = vec![v.rows(), v.row_len()];
        self.reshape(x, shape)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let vx = &self.nodes[xi].value;
        if vx.rank() != 2 || start > end || end > vx.shape()[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let cols = vx.shape()[1];
        let width = end - start;
        let mut data = Vec::with_capacity(vx.rows() * width);
        for row in vx.data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![vx.rows(), width], data)?;
        let rg = self.tracked(&[xi]);
        Ok(self.push(out, Op::SliceCols { x: xi, start, width }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let total = self.nodes[xi].value.data().iter().copied().sum();
        let rg = self.tracked(&[xi]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, rg))
    }

    /// Mean over the batch of `-sum_k t_k log softmax(z)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        self.weighted_cross_entropy(logits, targets, None)
    }

    /// Like [`Tape::softmax_cross_entropy`], with per-row weights `w_i`:
    /// `(1/N) sum_i w_i CE_i`.
    pub fn softmax_cross_entropy_weighted(&mut self, logits: Var, targets: &Tensor<T>, weights: &[T]) -> Result<Var> {
        self.weighted_cross_entropy(logits, targets, Some(weights))
    }

    fn weighted_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>, weights: Option<&[T]>) -> Result<Var> {
        let li = self.index(logits)?;
        let z = &self.nodes[li].value;
        if z.rank() != 2 || z.shape() != targets.shape() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (n, d) = (z.shape()[0], z.shape()[1]);
        if d < 2 {
            return Err(Error::validation("cross entropy needs at least two classes"));
        }
        if n == 0 {
            return Err(Error::validation("cross entropy over an empty batch"));
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::Shape {
                    op: "softmax_cross_entropy weights",
                    lhs: vec![n],
                    rhs: vec![w.len()],
                });
            }
        }
        for (row, t) in targets.data().chunks_exact(d).enumerate() {
            let s: f64 = t.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-6 || t.iter().any(|v| v.as_f64() < 0.0) {
                return Err(Error::validation(format!(
                    "target row {row} is not a probability vector (sum {s})"
                )));
            }
        }
        let inv_n = T::one() / T::lit(n as f64);
        let mut total = T::zero();
        let mut local_grad = vec![T::zero(); n * d];
        for i in 0..n {
            let zr = &z.data()[i * d..(i + 1) * d];
            let tr = &targets.data()[i * d..(i + 1) * d];
            let max = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = zr.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            let w = weights.map_or(T::one(), |w| w[i]);
            let mut row_loss = T::zero();
            let t_sum: T = tr.iter().copied().sum();
            for k in 0..d {
                if tr[k] != T::zero() {
                    row_loss = row_loss - tr[k] * (zr[k] - lse);
                }
                let p = (zr[k] - lse).exp();
                local_grad[i * d + k] = w * (p * t_sum - tr[k]) * inv_n;
            }
            total = total + w * row_loss;
        }
        let out = Tensor::scalar(total * inv_n);
        let rg = self.tracked(&[li]);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits: li, local_grad }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns the gradient of every
    /// var in `wrt`. A second call without [`Tape::reset_backward`] fails.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        let li = self.index(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        for &v in wrt {
            let vi = self.index(v)?;
            if !self.nodes[vi].requires_grad {
                return Err(Error::Autodiff(format!(
                    "variable {v:?} is a constant and carries no gradient"
                )));
            }
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut out = BTreeMap::new();
        for &v in wrt {
            let node = &self.nodes[v.index];
            let data = grads
                .get(v.index)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            out.insert(v, Tensor::new(node.value.shape().to_vec(), data)?);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Map { x, kernel } => {
                if wants(*x) {
                    let xs = nodes[*x].value.data();
                    let ys = nodes[i].value.data();
                    let dst = slot(grads, *x, xs.len());
                    for k in 0..xs.len() {
                        dst[k] = dst[k] + g[k] * kernel.derivative(xs[k], ys[k]);
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if wants(p) {
                        let dst = slot(grads, p, g.len());
                        dst.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (p, other) in [(*a, *b), (*b, *a)] {
                    if wants(p) {
                        let o = nodes[other].value.data();
                        let dst = slot(grads, p, g.len());
                        for k in 0..g.len() {
                            dst[k] = dst[k] + g[k] * o[k];
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bv = nodes[*b].value.data();
                    let dst = slot(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), g, false, bv, true, T::one(), dst);
                }
                if wants(*b) {
                    let av = nodes[*a].value.data();
                    let dst = slot(grads, *b, k * n);
                    T::gemm(k, m, n, T::one(), av, true, g, false, T::one(), dst);
                }
            }
            Op::AddBias {
                x,
                bias,
                channels,
                inner,
            } => {
                if wants(*x) {
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if wants(*bias) {
                    let dst = slot(grads, *bias, *channels);
                    for (block, chunk) in g.chunks_exact(*inner).enumerate() {
                        let c = block % channels;
                        dst[c] = dst[c] + chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (patch, area, f) = (geom.patch(), geom.out_area(), geom.f);
                let image_len = geom.c * geom.h * geom.w;
                if wants(*w) {
                    let dst = slot(grads, *w, f * patch);
                    for img in 0..geom.n {
                        T::gemm(
                            f,
                            area,
                            patch,
                            T::one(),
                            &g[img * f * area..(img + 1) * f * area],
                            false,
                            &cols[img * patch * area..(img + 1) * patch * area],
                            true,
                            T::one(),
                            dst,
                        );
                    }
                }
                if wants(*x) {
                    let wv = nodes[*w].value.data();
                    let mut dcols = vec![T::zero(); patch * area];
                    let dst = slot(grads, *x, geom.n * image_len);
                    for img in 0..geom.n {
                        T::gemm(
                            patch,
                            f,
                            area,
                            T::one(),
                            wv,
                            true,
                            &g[img * f * area..(img + 1) * f * area],
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        let dimg = &mut dst[img * image_len..(img + 1) * image_len];
                        geom.for_each_tap(|col, s| dimg[s] = dimg[s] + dcols[col]);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let len = nodes[*x].value.len();
                    let dst = slot(grads, *x, len);
                    for (k, &src) in argmax.iter().enumerate() {
                        dst[src] = dst[src] + g[k];
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
            Op::SliceCols { x, start, width } => {
                if wants(*x) {
                    let vx = &nodes[*x].value;
                    let cols = vx.shape()[1];
                    let dst = slot(grads, *x, vx.len());
                    for (r, row) in g.chunks_exact(*width).enumerate() {
                        for (c, &v) in row.iter().enumerate() {
                            let idx = r * cols + start + c;
                            dst[idx] = dst[idx] + v;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let len = nodes[*x].value.len();
                    let dst = slot(grads, *x, len);
                    dst.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, local_grad } => {
                if wants(*logits) {
                    let dst = slot(grads, *logits, local_grad.len());
                    for (d, &lg) in dst.iter_mut().zip(local_grad) {
                        *d = *d + g[0] * lg;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], index: usize, len: usize) -> &mut [T] {
    grads[index].get_or_insert_with(|| vec![T::zero(); len])
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}
