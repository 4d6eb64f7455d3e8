//! Reverse-mode tape.
//!
//! Every primitive evaluates eagerly and appends one node to an arena. Node
//! inputs always precede the node itself, so the arena order is a valid
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open row and column ranges of a region max pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolBins {
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ChannelScale {
        input: Var,
        weights: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale {
        input: Var,
        factor: T,
    },
    Softmax {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean(Vec<Var>),
    Stack(Vec<Var>),
    Reshape {
        input: Var,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    RegionMaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    SqEuclid(Var, Var),
    NegLog {
        input: Var,
        index: usize,
        floor: T,
    },
    Bce {
        input: Var,
        targets: Vec<T>,
        eps: T,
    },
    SmoothL1 {
        input: Var,
        targets: Vec<T>,
    },
    DotConst {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Fingerprint of every branch decision (relu sign, max position, clamp)
/// taken during a forward pass. Finite-difference checks compare it between
/// perturbed evaluations to detect steps that straddle a kink.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BranchTrace(u64);

impl BranchTrace {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn mix(&mut self, word: u64) {
        for byte in word.to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: Vec<(ParamId, Var)>,
    lookup: HashMap<ParamId, Var>,
    trace: Option<BranchTrace>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            lookup: HashMap::new(),
            trace: None,
            grad_enabled: true,
        }
    }

    /// Tape whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Tape that also fingerprints branch decisions; see [`Tape::branch_trace`].
    pub fn with_branch_trace() -> Self {
        let mut tape = Self::new();
        tape.trace = Some(BranchTrace(BranchTrace::OFFSET));
        tape
    }

    pub fn branch_trace(&self) -> Option<u64> {
        self.trace.map(|t| t.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for a stored parameter. Binding is cached, so every use of the
    /// same parameter within one tape shares a node and its gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&var) = self.lookup.get(&id) {
            return var;
        }
        let p = store.get(id);
        let var = self.leaf(p.tensor.clone(), self.grad_enabled && !p.frozen);
        self.bind_param(id, var);
        var
    }

    /// Route later [`Tape::param`] lookups of `id` to an existing node.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.lookup.insert(id, var);
        self.bound.push((id, var));
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, word: u64) {
        if let Some(trace) = &mut self.trace {
            trace.mix(word);
        }
    }

    fn record_many(&mut self, words: impl Iterator<Item = u64>) {
        if let Some(trace) = &mut self.trace {
            for w in words {
                trace.mix(w);
            }
        }
    }

    fn expect_rank(&self, op: &'static str, var: Var, rank: usize) -> Result<&[usize]> {
        let shape = self.shape(var);
        if shape.len() != rank {
            return Err(Error::shape(op, format!("expected rank {rank}, got {shape:?}")));
        }
        Ok(shape)
    }

    fn expect_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // primitives

    /// Zero-padded cross-correlation of `input [C_in,H,W]` with
    /// `kernel [C_out,C_in,kH,kW]`, output extent floor-divided by `stride`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (c_in, h, w) = match *self.expect_rank("conv2d", input, 3)? {
            [c, h, w] => (c, h, w),
            _ => unreachable!(),
        };
        let (c_out, kc, kh, kw) = match *self.expect_rank("conv2d", kernel, 4)? {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => unreachable!(),
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", self.shape(bias)),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let plane = geom.out_plane();
        let mut out = vec![T::zero(); c_out * plane];
        for (o, row) in out.chunks_exact_mut(plane).enumerate() {
            row.fill(b[o]);
        }
        if geom.is_pointwise() {
            T::gemm(c_out, c_in, plane, k, false, x, false, &mut out, T::one());
        } else {
            let cols = im2col(x, &geom);
            T::gemm(c_out, geom.patch(), plane, k, false, &cols, false, &mut out, T::one());
        }
        let value = Tensor::new(vec![c_out, geom.ho, geom.wo], out)?;
        value.ensure_finite("conv2d")?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel scaling `out[c,y,x] = input[c,y,x] * weights[c]`, a 1×1
    /// depth-wise convolution without bias.
    pub fn channel_scale(&mut self, input: Var, weights: Var) -> Result<Var> {
        let shape = self.expect_rank("channel_scale", input, 3)?.to_vec();
        let ws = self.shape(weights);
        if ws != [shape[0]] {
            return Err(Error::shape(
                "channel_scale",
                format!("{} channels vs weights {ws:?}", shape[0]),
            ));
        }
        let plane = shape[1] * shape[2];
        let w = self.value(weights).data();
        let mut out = self.value(input).data().to_vec();
        for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v *= w[c];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[input, weights]);
        Ok(self.push(value, Op::ChannelScale { input, weights }, rg))
    }

    /// 2×2 max pool with stride 2. Ties resolve to the first position in
    /// row-major order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = match *self.expect_rank("maxpool2", input, 3)? {
            [c, h, w] => (c, h, w),
            _ => unreachable!(),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("odd extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.record_many(argmax.iter().map(|&a| u64::from(a)));
        let value = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = match *self.expect_rank("upsample2", input, 3)? {
            [c, h, w] => (c, h, w),
            _ => unreachable!(),
        };
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let src = &x[ch * h * w + (y / 2) * w..][..w];
                let dst = &mut out[ch * h2 * w2 + y * w2..][..w2];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, h2, w2], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample2 { input }, rg))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let shape = src.shape().to_vec();
        let out: Vec<T> = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        if self.trace.is_some() {
            let signs: Vec<u64> = self.value(input).data().iter().map(|&v| u64::from(v > T::zero())).collect();
            self.record_many(signs.into_iter());
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Relu { input }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let shape = src.shape().to_vec();
        let out: Vec<T> = src.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Sigmoid { input }, rg))
    }

    /// `weight [k,n] · input [n] + bias [k]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.expect_rank("linear", input, 1)?[0];
        let (k, wn) = match *self.expect_rank("linear", weight, 2)? {
            [k, wn] => (k, wn),
            _ => unreachable!(),
        };
        if wn != n || self.shape(bias) != [k] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input [{n}], weight {:?}, bias {:?}",
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out = self.value(bias).data().to_vec();
        T::gemm(k, n, 1, self.value(weight).data(), false, self.value(input).data(), false, &mut out, T::one());
        let value = Tensor::new(vec![k], out)?;
        value.ensure_finite("linear")?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("sub", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let src = self.value(input);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * factor).collect())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Scale { input, factor }, rg))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.expect_rank("softmax", input, 1)?;
        let src = self.value(input);
        src.ensure_finite("softmax")?;
        let out = softmax_values(src.data());
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, rg))
    }

    /// Elementwise arithmetic mean of equally shaped tensors, summed in
    /// argument order.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("mean", "no inputs"))?;
        for &v in &inputs[1..] {
            self.expect_same("mean", first, v)?;
        }
        let mut acc = self.value(first).data().to_vec();
        for &v in &inputs[1..] {
            for (a, &b) in acc.iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let n = T::from_f64(inputs.len() as f64);
        for a in &mut acc {
            *a = *a / n;
        }
        let value = Tensor::new(self.shape(first).to_vec(), acc)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Mean(inputs.to_vec()), rg))
    }

    /// Collect single-element tensors into a rank-1 tensor.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let mut out = Vec::with_capacity(inputs.len());
        for &v in inputs {
            out.push(self.value(v).item().map_err(|_| {
                Error::shape("stack", format!("non-scalar input {:?}", self.shape(v)))
            })?);
        }
        let value = Tensor::new(vec![inputs.len()], out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Stack(inputs.to_vec()), rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// `[C,H,W] -> [C]` spatial maximum; ties resolve to the first position.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.expect_rank("global_max_pool", input, 3)?.to_vec();
        let plane = shape[1] * shape[2];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(shape[0]);
        let mut argmax = Vec::with_capacity(shape[0]);
        for (c, chunk) in x.chunks_exact(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push((c * plane + best) as u32);
        }
        self.record_many(argmax.iter().map(|&a| u64::from(a)));
        let value = Tensor::new(vec![shape[0]], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }, rg))
    }

    /// Max over each `(rows[i], cols[j])` bin of every channel, producing
    /// `[C, rows.len(), cols.len()]`.
    pub fn region_max_pool(&mut self, input: Var, bins: &PoolBins) -> Result<Var> {
        let shape = self.expect_rank("region_max_pool", input, 3)?.to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let valid = |ranges: &[(usize, usize)], limit: usize| {
            !ranges.is_empty() && ranges.iter().all(|&(s, e)| s < e && e <= limit)
        };
        if !valid(&bins.rows, h) || !valid(&bins.cols, w) {
            return Err(Error::shape(
                "region_max_pool",
                format!("bins {bins:?} outside {h}x{w}"),
            ));
        }
        let x = self.value(input).data();
        let n = c * bins.rows.len() * bins.cols.len();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for ch in 0..c {
            let base = ch * h * w;
            for &(r0, r1) in &bins.rows {
                for &(c0, c1) in &bins.cols {
                    let mut best = base + r0 * w + c0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            let idx = base + y * w + xx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.record_many(argmax.iter().map(|&a| u64::from(a)));
        let value = Tensor::new(vec![c, bins.rows.len(), bins.cols.len()], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::RegionMaxPool { input, argmax }, rg))
    }

    /// Pick flat positions of `input` into a rank-1 tensor.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", x.len())));
        }
        let out = indices.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(vec![indices.len()], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Squared Euclidean distance between equally sized tensors.
    pub fn sq_euclid(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::shape(
                "sq_euclid",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::SqEuclid(a, b), rg))
    }

    /// `-ln(max(input[index], floor))`.
    pub fn neg_log(&mut self, input: Var, index: usize, floor: T) -> Result<Var> {
        let x = self.value(input).data();
        let p = *x
            .get(index)
            .ok_or_else(|| Error::shape("neg_log", format!("index {index} out of {}", x.len())))?;
        let clamped = p <= floor;
        self.record(u64::from(clamped));
        let out = -(if clamped { floor } else { p }).ln();
        let value = Tensor::scalar(out);
        value.ensure_finite("neg_log")?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::NegLog { input, index, floor }, rg))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, input: Var, targets: &[T], eps: T) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != targets.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities vs {} targets", x.len(), targets.len()),
            ));
        }
        let hi = T::one() - eps;
        let mut total = T::zero();
        let mut flags = Vec::with_capacity(x.len());
        for (&p, &t) in x.iter().zip(targets) {
            let pc = p.max(eps).min(hi);
            flags.push(u64::from(p <= eps) | (u64::from(p >= hi) << 1));
            total += -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
        }
        self.record_many(flags.into_iter());
        let value = Tensor::scalar(total / T::from_f64(targets.len() as f64));
        value.ensure_finite("bce")?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::Bce {
                input,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Mean smooth-L1 (transition at |e| = 1) against constant targets.
    pub fn smooth_l1(&mut self, input: Var, targets: &[T]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != targets.len() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} predictions vs {} targets", x.len(), targets.len()),
            ));
        }
        let half = T::from_f64(0.5);
        let mut total = T::zero();
        let mut flags = Vec::with_capacity(x.len());
        for (&p, &t) in x.iter().zip(targets) {
            let e = (p - t).abs();
            flags.push(u64::from(e < T::one()));
            total += if e < T::one() { half * e * e } else { e - half };
        }
        self.record_many(flags.into_iter());
        let value = Tensor::scalar(total / T::from_f64(targets.len() as f64));
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::SmoothL1 {
                input,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ input ⊙ weights` with constant weights.
    pub fn dot_const(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != weights.len() {
            return Err(Error::shape(
                "dot_const",
                format!("{} values vs {} weights", x.len(), weights.len()),
            ));
        }
        let total = x.iter().zip(weights).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::DotConst {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Propagate d(loss)/d(node) from a single-element `loss` back to every
    /// leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients::finish(self, grads));
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients::finish(self, grads))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut sink = GradSink { tape: self, grads };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let plane = geom.out_plane();
                if let Some(db) = sink.slot(*bias) {
                    for (o, row) in g.chunks_exact(plane).enumerate() {
                        db[o] += row.iter().fold(T::zero(), |acc, &v| acc + v);
                    }
                }
                let x = self.value(*input).data();
                if sink.wants(*kernel) {
                    let cols_owned;
                    let cols: &[T] = if geom.is_pointwise() {
                        x
                    } else {
                        cols_owned = im2col(x, geom);
                        &cols_owned
                    };
                    let dk = sink.slot(*kernel).expect("kernel grad slot");
                    T::gemm(geom.c_out, plane, geom.patch(), g, false, cols, true, dk, T::one());
                }
                if sink.wants(*input) {
                    let k = self.value(*kernel).data();
                    let dx = sink.slot(*input).expect("input grad slot");
                    if geom.is_pointwise() {
                        T::gemm(geom.c_in, geom.c_out, plane, k, true, g, false, dx, T::one());
                    } else {
                        let mut dcols = vec![T::zero(); geom.patch() * plane];
                        T::gemm(geom.patch(), geom.c_out, plane, k, true, g, false, &mut dcols, T::zero());
                        col2im(&dcols, geom, dx);
                    }
                }
            }
            Op::ChannelScale { input, weights } => {
                let f = self.value(*input);
                let plane = f.shape()[1] * f.shape()[2];
                let w = self.value(*weights).data();
                if let Some(df) = sink.slot(*input) {
                    for (c, (dchunk, gchunk)) in df.chunks_exact_mut(plane).zip(g.chunks_exact(plane)).enumerate() {
                        for (d, &gv) in dchunk.iter_mut().zip(gchunk) {
                            *d += gv * w[c];
                        }
                    }
                }
                if let Some(dw) = sink.slot(*weights) {
                    for (c, (fchunk, gchunk)) in f.data().chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                        dw[c] += fchunk.iter().zip(gchunk).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    }
                }
            }
            Op::MaxPool2 { input, argmax }
            | Op::GlobalMaxPool { input, argmax }
            | Op::RegionMaxPool { input, argmax } => {
                if let Some(dx) = sink.slot(*input) {
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a as usize] += gv;
                    }
                }
            }
            Op::Upsample2 { input } => {
                if let Some(dx) = sink.slot(*input) {
                    let shape = self.shape(*input);
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let w2 = 2 * w;
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let grow = &g[ch * 4 * h * w + y * w2..][..w2];
                            let drow = &mut dx[ch * h * w + (y / 2) * w..][..w];
                            for (xo, &gv) in grow.iter().enumerate() {
                                drow[xo / 2] += gv;
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                if let Some(dx) = sink.slot(*input) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                if let Some(dx) = sink.slot(*input) {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * s * (T::one() - s);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input).data();
                let (k, n) = (g.len(), x.len());
                if let Some(db) = sink.slot(*bias) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(dw) = sink.slot(*weight) {
                    T::gemm(k, 1, n, g, false, x, false, dw, T::one());
                }
                if let Some(dx) = sink.slot(*input) {
                    T::gemm(n, k, 1, self.value(*weight).data(), true, g, false, dx, T::one());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = sink.slot(v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = sink.slot(*a) {
                    add_into(d, g);
                }
                if let Some(d) = sink.slot(*b) {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(d) = sink.slot(*input) {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * *factor;
                    }
                }
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                if let Some(d) = sink.slot(*input) {
                    let dot = y.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(d) = sink.slot(*input) {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::Mean(inputs) => {
                let n = T::from_f64(inputs.len() as f64);
                for &v in inputs {
                    if let Some(d) = sink.slot(v) {
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv / n;
                        }
                    }
                }
            }
            Op::Stack(inputs) => {
                for (&v, &gv) in inputs.iter().zip(g) {
                    if let Some(d) = sink.slot(v) {
                        d[0] += gv;
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(d) = sink.slot(*input) {
                    add_into(d, g);
                }
            }
            Op::Gather { input, indices } => {
                if let Some(d) = sink.slot(*input) {
                    for (&i, &gv) in indices.iter().zip(g) {
                        d[i] += gv;
                    }
                }
            }
            Op::SqEuclid(a, b) => {
                let two = T::from_f64(2.0);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = sink.slot(*a) {
                    for ((dv, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dv += two * (x - y) * g[0];
                    }
                }
                if let Some(d) = sink.slot(*b) {
                    for ((dv, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dv -= two * (x - y) * g[0];
                    }
                }
            }
            Op::NegLog { input, index, floor } => {
                let p = self.value(*input).data()[*index];
                if let Some(d) = sink.slot(*input) {
                    if p > *floor {
                        d[*index] -= g[0] / p;
                    }
                }
            }
            Op::Bce { input, targets, eps } => {
                let x = self.value(*input).data();
                let n = T::from_f64(targets.len() as f64);
                let hi = T::one() - *eps;
                if let Some(d) = sink.slot(*input) {
                    for ((dv, &p), &t) in d.iter_mut().zip(x).zip(targets) {
                        if p > *eps && p < hi {
                            *dv += -g[0] * (t / p - (T::one() - t) / (T::one() - p)) / n;
                        }
                    }
                }
            }
            Op::SmoothL1 { input, targets } => {
                let x = self.value(*input).data();
                let n = T::from_f64(targets.len() as f64);
                if let Some(d) = sink.slot(*input) {
                    for ((dv, &p), &t) in d.iter_mut().zip(x).zip(targets) {
                        let e = p - t;
                        let de = if e.abs() < T::one() { e } else { e.signum() };
                        *dv += g[0] * de / n;
                    }
                }
            }
            Op::DotConst { input, weights } => {
                if let Some(d) = sink.slot(*input) {
                    for (dv, &w) in d.iter_mut().zip(weights) {
                        *dv += g[0] * w;
                    }
                }
            }
        }
    }
}

struct GradSink<'a, T> {
    tape: &'a Tape<T>,
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    fn wants(&self, var: Var) -> bool {
        self.tape.nodes[var.0].requires_grad
    }

    /// Accumulation buffer for `var`, allocated on first use; `None` when the
    /// node does not require a gradient.
    fn slot(&mut self, var: Var) -> Option<&mut [T]> {
        if !self.wants(var) {
            return None;
        }
        let numel = self.tape.nodes[var.0].value.numel();
        Some(self.grads[var.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    fn finish(tape: &Tape<T>, raw: Vec<Option<Vec<T>>>) -> Self {
        let grads = raw
            .into_iter()
            .zip(&tape.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Self { grads }
    }

    /// Gradient of a leaf, or `None` when no path from the loss reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_values<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &v| acc + v);
    exps.into_iter().map(|e| e / total).collect()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * plane];
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..][..g.w];
                    let drow = &mut dst[oy * g.wo..][..g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..][..g.w];
                    let srow = &src[oy * g.wo..][..g.wo];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}
