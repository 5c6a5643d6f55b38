use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
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

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRow(Var, usize),
}

/// Wengert list of executed operations.
///
/// Every operation's inputs precede it, so a single reverse sweep in
/// recording order is a valid topological replay.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    tracked: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds image `img` (`c × h × w`) into `patch × out_pixels` columns.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.out_pixels();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + y as usize) * self.w..][..self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if x < 0 || x >= self.w as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto an image.
    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.out_pixels();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a 3-D (`C×H×W`) or 4-D (`N×C×H×W`) shape into `(n, c, h, w)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected C×H×W or N×C×H×W, got {shape:?}"),
        )),
    }
}

fn with_spatial(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![shape[0], c, h, w]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Records a gradient-tracking input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Gradient buffer left by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.values[v.0].shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, or zeros when `v` was unreachable from the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.values[v.0].shape))
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.values[a.0].shape, &self.values[b.0].shape);
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.values[a.0].data,
            false,
            &self.values[b.0].data,
            false,
            0.0,
            &mut out,
        );
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            tracked,
        ))
    }

    fn conv_geom(&self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (n, c, h, w) = image_dims("conv2d", &self.values[input.0].shape)?;
        let ks = &self.values[kernels.0].shape;
        let (k, kc, kh, kw) = match ks.as_slice() {
            [k, kc, kh, kw] => (*k, *kc, *kh, *kw),
            _ => return Err(Error::shape("conv2d", format!("kernels must be K×C×kh×kw, got {ks:?}"))),
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel channels {kc} do not match input channels {c}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// 2-D cross-correlation with zero padding; `bias` has one entry per kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = self.conv_geom(input, kernels, stride, pad)?;
        if let Some(b) = bias {
            if self.values[b.0].shape != [g.k] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must have {} entries, got {:?}", g.k, self.values[b.0].shape),
                ));
            }
        }
        let (q, p) = (g.patch(), g.out_pixels());
        let mut cols = vec![0.0; q * p];
        let mut out = vec![0.0; g.n * g.k * p];
        let x = &self.values[input.0].data;
        let wts = &self.values[kernels.0].data;
        for img in 0..g.n {
            g.im2col(&x[img * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut cols);
            let dst = &mut out[img * g.k * p..][..g.k * p];
            if let Some(b) = bias {
                for (kk, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(self.values[b.0].data[kk]);
                }
            }
            gemm(g.k, q, p, wts, false, &cols, false, 1.0, dst);
        }
        let shape = with_spatial(&self.values[input.0].shape, g.k, g.oh, g.ow);
        let mut deps = vec![input, kernels];
        deps.extend(bias);
        let tracked = self.any_tracked(&deps);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            },
            tracked,
        ))
    }

    /// 2×2 max-pool with stride 2; odd trailing rows/columns are dropped and
    /// ties go to the first maximal element in row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let shape = self.values[input.0].shape.clone();
        let (n, c, h, w) = image_dims("maxpool2", &shape)?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial extent {h}×{w} too small for a 2×2 window"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = &self.values[input.0].data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
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
        let tracked = self.tracked[input.0];
        Ok(self.push(
            Tensor {
                shape: with_spatial(&shape, c, oh, ow),
                data: out,
            },
            Op::MaxPool2 { input, argmax },
            tracked,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let src = &self.values[input.0];
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| kind.apply(x)).collect(),
        };
        let tracked = self.tracked[input.0];
        self.push(out, Op::Act(input, kind), tracked)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape != vb.shape {
            return Err(Error::shape(
                name,
                format!("operands {:?} and {:?} differ", va.shape, vb.shape),
            ));
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias` to every slice along the leading axis of `input`;
    /// `bias.shape` must equal `input.shape[1..]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (vi, vb) = (&self.values[input.0], &self.values[bias.0]);
        let trailing = &vi.shape[1..];
        let matches = if trailing.is_empty() {
            vb.shape == [1]
        } else {
            vb.shape == trailing
        };
        if !matches {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match trailing axes of {:?}", vb.shape, vi.shape),
            ));
        }
        let stride = vb.data.len();
        let data = vi
            .data
            .chunks(stride)
            .flat_map(|row| row.iter().zip(&vb.data).map(|(x, b)| x + b))
            .collect();
        let out = Tensor {
            shape: vi.shape.clone(),
            data,
        };
        let tracked = self.any_tracked(&[input, bias]);
        Ok(self.push(out, Op::AddBias(input, bias), tracked))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let src = &self.values[input.0];
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|x| x * factor).collect(),
        };
        let tracked = self.tracked[input.0];
        self.push(out, Op::Scale(input, factor), tracked)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.values[input.0].data.iter().sum();
        let tracked = self.tracked[input.0];
        self.push(Tensor::scalar(s), Op::Sum(input), tracked)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[input.0].clone().reshaped(shape.to_vec())?;
        let tracked = self.tracked[input.0];
        Ok(self.push(out, Op::Reshape(input), tracked))
    }

    pub fn transpose2d(&mut self, input: Var) -> Result<Var> {
        let src = &self.values[input.0];
        let (r, c) = match src.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("transpose2d", format!("expected a matrix, got {s:?}"))),
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src.data[i * c + j];
            }
        }
        let tracked = self.tracked[input.0];
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(input),
            tracked,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
        let cols = match self.values[first.0].shape.as_slice() {
            [_, c] => *c,
            s => return Err(Error::shape("concat_rows", format!("expected matrices, got {s:?}"))),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            match self.values[p.0].shape.as_slice() {
                [r, c] if *c == cols => {
                    rows += r;
                    data.extend_from_slice(&self.values[p.0].data);
                }
                s => {
                    return Err(Error::shape(
                        "concat_rows",
                        format!("part {s:?} does not have {cols} columns"),
                    ))
                }
            }
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    /// Row `row` of a matrix as a `1 × cols` matrix.
    pub fn slice_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let src = &self.values[input.0];
        let (r, c) = match src.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("slice_row", format!("expected a matrix, got {s:?}"))),
        };
        if row >= r {
            return Err(Error::shape(
                "slice_row",
                format!("row {row} out of range for {r} rows"),
            ));
        }
        let data = src.data[row * c..(row + 1) * c].to_vec();
        let tracked = self.tracked[input.0];
        Ok(self.push(
            Tensor {
                shape: vec![1, c],
                data,
            },
            Op::SliceRow(input, row),
            tracked,
        ))
    }

    /// Reverse sweep from a one-element `loss`. Gradients from repeated uses
    /// of a value are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.tracked[v.0] {
            return None;
        }
        let n = self.values[v.0].data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.grad_buf(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are taken out so their payload can be read while gradient
        // buffers of earlier nodes are mutated.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.values[a.0].shape[0], self.values[a.0].shape[1]);
                let n = self.values[b.0].shape[1];
                if self.tracked[a.0] {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &self.values[b.0].data, true, 0.0, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.tracked[b.0] {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &self.values[a.0].data, true, g, false, 0.0, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            } => {
                let geom = self
                    .conv_geom(*input, *kernels, *stride, *pad)
                    .expect("geometry validated at record time");
                self.conv_backward(&geom, *input, *kernels, *bias, g);
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(buf) = self.grad_buf(*input) {
                    for (&src, &d) in argmax.iter().zip(g) {
                        buf[src] += d;
                    }
                }
            }
            Op::Act(input, kind) => {
                let y = &self.values[i].data;
                let d: Vec<f64> = y
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| d * kind.derivative_from_output(y))
                    .collect();
                self.accumulate(*input, &d);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.tracked[a.0] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.values[b.0].data)
                        .map(|(d, y)| d * y)
                        .collect();
                    self.accumulate(*a, &d);
                }
                if self.tracked[b.0] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.values[a.0].data)
                        .map(|(d, x)| d * x)
                        .collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::AddBias(input, bias) => {
                self.accumulate(*input, g);
                if let Some(buf) = self.grad_buf(*bias) {
                    let stride = buf.len();
                    for row in g.chunks(stride) {
                        for (b, d) in buf.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                }
            }
            Op::Scale(input, factor) => {
                let d: Vec<f64> = g.iter().map(|x| x * factor).collect();
                self.accumulate(*input, &d);
            }
            Op::Sum(input) => {
                if let Some(buf) = self.grad_buf(*input) {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::Reshape(input) => self.accumulate(*input, g),
            Op::Transpose(input) => {
                let (r, c) = (self.values[input.0].shape[0], self.values[input.0].shape[1]);
                if let Some(buf) = self.grad_buf(*input) {
                    for a in 0..r {
                        for b in 0..c {
                            buf[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.values[p.0].data.len();
                    self.accumulate(*p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRow(input, row) => {
                let c = self.values[input.0].shape[1];
                if let Some(buf) = self.grad_buf(*input) {
                    for (b, d) in buf[row * c..(row + 1) * c].iter_mut().zip(g) {
                        *b += d;
                    }
                }
            }
        }
        self.ops[i] = op;
    }

    fn conv_backward(&mut self, geom: &ConvGeom, input: Var, kernels: Var, bias: Option<Var>, g: &[f64]) {
        let (q, p) = (geom.patch(), geom.out_pixels());
        let img_len = geom.c * geom.h * geom.w;
        let want_input = self.tracked[input.0];
        let want_kernels = self.tracked[kernels.0];
        let mut cols = vec![0.0; q * p];
        let mut dkern = vec![0.0; geom.k * q];
        let mut dinput = if want_input {
            vec![0.0; geom.n * img_len]
        } else {
            Vec::new()
        };
        for img in 0..geom.n {
            let gout = &g[img * geom.k * p..][..geom.k * p];
            if want_kernels {
                geom.im2col(&self.values[input.0].data[img * img_len..][..img_len], &mut cols);
                gemm(geom.k, p, q, gout, false, &cols, true, 1.0, &mut dkern);
            }
            if want_input {
                gemm(q, geom.k, p, &self.values[kernels.0].data, true, gout, false, 0.0, &mut cols);
                geom.col2im_add(&cols, &mut dinput[img * img_len..][..img_len]);
            }
        }
        if want_kernels {
            self.accumulate(kernels, &dkern);
        }
        if want_input {
            self.accumulate(input, &dinput);
        }
        if let Some(b) = bias {
            if let Some(buf) = self.grad_buf(b) {
                for img in 0..geom.n {
                    for (kk, chunk) in g[img * geom.k * p..][..geom.k * p].chunks(p).enumerate() {
                        buf[kk] += chunk.iter().sum::<f64>();
                    }
                }
            }
        }
    }
}
