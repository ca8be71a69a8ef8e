//! Append-only autodiff tape.
//!
//! Every op checks shapes, runs its kernel, verifies the output is finite,
//! and appends an entry. Entries record their backward recipe only when some
//! input requires a gradient, so frozen-model inference pays no bookkeeping
//! beyond value storage. `backward` consumes the tape: it walks entries once
//! in reverse creation order (which is a reverse topological order, since
//! inputs always precede outputs), accumulates gradients additively, and
//! leaves the tape empty.

use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError, TensorResult};

/// Names of every differentiable op the tape dispatches. The gradient-vs-
/// finite-difference oracle enumerates this list so a newly added op cannot
/// dodge coverage.
pub const REGISTERED_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv3d",
    "transposed_conv3d",
    "avgpool3d",
    "global_avgpool",
    "relu",
    "silu",
    "sigmoid",
    "reshape",
    "concat_channels",
    "slice",
    "mse",
    "bce_with_logits",
    "sum",
    "mean",
];

/// Handle to a value on one specific tape. Only meaningful there.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

#[derive(Clone, Debug)]
pub enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv3d { x: Var, w: Var, b: Var, cin: usize, cout: usize, idims: [usize; 3], geom: ConvGeom, odims: [usize; 3] },
    TConv3d { x: Var, w: Var, b: Var, cin: usize, cout: usize, idims: [usize; 3], k: usize, stride: usize },
    AvgPool3d { x: Var, c: usize, idims: [usize; 3] },
    GlobalAvgPool { x: Var, c: usize, spatial: usize },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    ConcatChannels { xs: Vec<Var>, chans: Vec<usize>, tail: usize },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Mse { a: Var, b: Var },
    BceWithLogits { logits: Var, targets: Var },
    Sum(Var),
    Mean(Var),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Conv3d { .. } => "conv3d",
            Op::TConv3d { .. } => "transposed_conv3d",
            Op::AvgPool3d { .. } => "avgpool3d",
            Op::GlobalAvgPool { .. } => "global_avgpool",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Reshape(..) => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Slice { .. } => "slice",
            Op::Mse { .. } => "mse",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Entry {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// Gradients returned by [`Tape::backward`], indexed by the `Var`s of the
/// consumed tape. Leaves and recorded intermediates that received gradient
/// are present; everything else is `None`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or a `MissingGradient` error naming `what`.
    pub fn expect(&self, v: Var, what: &str) -> TensorResult<&Tensor> {
        self.get(v).ok_or_else(|| TensorError::MissingGradient(what.to_string()))
    }
}

#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    /// Register an input. Its `requires_grad` flag decides whether gradient
    /// flows back to it.
    pub fn leaf(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_unchecked(t, rg, None)
    }

    /// Register a non-differentiable input regardless of its flag.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_unchecked(t, false, None)
    }

    /// Value of `v`. Cheap: buffers are shared, not copied.
    pub fn value(&self, v: Var) -> Tensor {
        self.entries.borrow()[v.id].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.entries.borrow()[v.id].value.shape().to_vec()
    }

    fn requires(&self, v: Var) -> bool {
        self.entries.borrow()[v.id].requires_grad
    }

    fn push_unchecked(&self, value: Tensor, requires_grad: bool, op: Option<Op>) -> Var {
        let mut entries = self.entries.borrow_mut();
        let id = entries.len();
        entries.push(Entry { value, requires_grad, op });
        Var { id }
    }

    /// Append an op result, verifying finiteness first.
    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f32>, rg: bool) -> TensorResult<Var> {
        let node = self.entries.borrow().len();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name(), node });
        }
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push_unchecked(t, rg, if rg { Some(op) } else { None }))
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, va.shape().to_vec(), data, self.requires(a) || self.requires(b))
    }

    pub fn add(&self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, c: f32) -> TensorResult<Var> {
        if !c.is_finite() {
            return Err(shape_err("scale", format!("non-finite factor {c}")));
        }
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        self.push(Op::Scale(x, c), v.shape().to_vec(), data, self.requires(x))
    }

    pub fn matmul(&self, a: Var, b: Var) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, va.data(), vb.data(), &mut out);
        self.push(
            Op::MatMul { a, b, m, k, n },
            vec![m, n],
            out,
            self.requires(a) || self.requires(b),
        )
    }

    /// 3D convolution over `[Cin, A, B, G]` with weight `[Cout, Cin, kA, kB, kG]`
    /// and bias `[Cout]`. Kernel extents must be odd; padding is `k/2` per
    /// axis, so stride 1 preserves dims and stride 2 floor-halves them.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, stride: usize) -> TensorResult<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw, sb) = (vx.shape(), vw.shape(), vb.shape());
        if sx.len() != 4 || sw.len() != 5 {
            return Err(shape_err("conv3d", format!("input {:?}, weight {:?}", sx, sw)));
        }
        if sw[1] != sx[0] || sb.len() != 1 || sb[0] != sw[0] {
            return Err(shape_err(
                "conv3d",
                format!("channels: input {:?}, weight {:?}, bias {:?}", sx, sw, sb),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(shape_err("conv3d", format!("stride {stride} not in {{1,2}}")));
        }
        let k = [sw[2], sw[3], sw[4]];
        if k.iter().any(|&kk| kk % 2 == 0) {
            return Err(shape_err("conv3d", format!("kernel extents must be odd, got {:?}", k)));
        }
        let geom = ConvGeom { k, pad: [k[0] / 2, k[1] / 2, k[2] / 2], stride };
        let idims = [sx[1], sx[2], sx[3]];
        let odims = geom
            .odims(idims)
            .ok_or_else(|| shape_err("conv3d", format!("kernel {:?} exceeds input {:?}", k, idims)))?;
        let (cin, cout) = (sx[0], sw[0]);
        let y = kernels::conv3d_fwd(vx.data(), vw.data(), vb.data(), cin, cout, idims, geom, odims);
        self.push(
            Op::Conv3d { x, w, b, cin, cout, idims, geom, odims },
            vec![cout, odims[0], odims[1], odims[2]],
            y,
            self.requires(x) || self.requires(w) || self.requires(b),
        )
    }

    /// Transposed 3D convolution upsampling by `stride`. Weight
    /// `[Cin, Cout, k, k, k]` with kernel extent `k == stride` (disjoint
    /// tiles) or `k == 2 * stride` for even strides (half-overlapping
    /// windows); output dims are exactly `stride *` input dims either way.
    pub fn transposed_conv3d(&self, x: Var, w: Var, b: Var, stride: usize) -> TensorResult<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw, sb) = (vx.shape(), vw.shape(), vb.shape());
        if sx.len() != 4 || sw.len() != 5 {
            return Err(shape_err("transposed_conv3d", format!("input {:?}, weight {:?}", sx, sw)));
        }
        if !(stride == 1 || stride == 2) {
            return Err(shape_err("transposed_conv3d", format!("stride {stride} not in {{1,2}}")));
        }
        let k = sw[2];
        let legal = k == stride || (k == 2 * stride && stride % 2 == 0);
        if sw[0] != sx[0] || !legal || sw[3] != k || sw[4] != k {
            return Err(shape_err(
                "transposed_conv3d",
                format!(
                    "weight {:?} must be [Cin, Cout, k, k, k] with Cin {} and k of {} or {}",
                    sw,
                    sx[0],
                    stride,
                    2 * stride
                ),
            ));
        }
        if sb.len() != 1 || sb[0] != sw[1] {
            return Err(shape_err("transposed_conv3d", format!("bias {:?} vs cout {}", sb, sw[1])));
        }
        let (cin, cout) = (sx[0], sw[1]);
        let idims = [sx[1], sx[2], sx[3]];
        let y = kernels::tconv3d_fwd(vx.data(), vw.data(), vb.data(), cin, cout, idims, k, stride);
        self.push(
            Op::TConv3d { x, w, b, cin, cout, idims, k, stride },
            vec![cout, idims[0] * stride, idims[1] * stride, idims[2] * stride],
            y,
            self.requires(x) || self.requires(w) || self.requires(b),
        )
    }

    /// 2x2x2 average pooling with stride 2; odd trailing voxels are dropped.
    pub fn avgpool3d(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let sx = vx.shape();
        if sx.len() != 4 || sx[1] < 2 || sx[2] < 2 || sx[3] < 2 {
            return Err(shape_err("avgpool3d", format!("need [C, >=2, >=2, >=2], got {:?}", sx)));
        }
        let idims = [sx[1], sx[2], sx[3]];
        let (y, o) = kernels::avgpool3d_fwd(vx.data(), sx[0], idims);
        self.push(
            Op::AvgPool3d { x, c: sx[0], idims },
            vec![sx[0], o[0], o[1], o[2]],
            y,
            self.requires(x),
        )
    }

    /// Mean over all spatial positions: `[C, A, B, G] -> [C]`.
    pub fn global_avgpool(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let sx = vx.shape();
        if sx.len() != 4 {
            return Err(shape_err("global_avgpool", format!("need rank 4, got {:?}", sx)));
        }
        let c = sx[0];
        let spatial = sx[1] * sx[2] * sx[3];
        let mut y = vec![0.0f32; c];
        for ci in 0..c {
            let mut acc = 0.0f32;
            for &v in &vx.data()[ci * spatial..][..spatial] {
                acc += v;
            }
            y[ci] = acc / spatial as f32;
        }
        self.push(Op::GlobalAvgPool { x, c, spatial }, vec![c], y, self.requires(x))
    }

    pub fn relu(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x), vx.shape().to_vec(), data, self.requires(x))
    }

    pub fn silu(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        self.push(Op::Silu(x), vx.shape().to_vec(), data, self.requires(x))
    }

    pub fn sigmoid(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        self.push(Op::Sigmoid(x), vx.shape().to_vec(), data, self.requires(x))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> TensorResult<Var> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", vx.shape(), shape)));
        }
        self.push(Op::Reshape(x), shape, vx.data().to_vec(), self.requires(x))
    }

    /// Concatenate along axis 0; all other dims must match.
    pub fn concat_channels(&self, xs: &[Var]) -> TensorResult<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat_channels", "empty input list".into()));
        }
        let first = self.value(xs[0]);
        let tail_shape = first.shape()[1..].to_vec();
        let tail: usize = tail_shape.iter().product();
        let mut chans = Vec::with_capacity(xs.len());
        let mut total = 0usize;
        let mut data = Vec::new();
        let mut rg = false;
        for &v in xs {
            let t = self.value(v);
            if t.shape().len() != first.shape().len() || t.shape()[1..] != tail_shape[..] {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", t.shape(), first.shape()),
                ));
            }
            chans.push(t.shape()[0]);
            total += t.shape()[0];
            data.extend_from_slice(t.data());
            rg |= self.requires(v);
        }
        let mut shape = vec![total];
        shape.extend_from_slice(&tail_shape);
        self.push(Op::ConcatChannels { xs: xs.to_vec(), chans, tail }, shape, data, rg)
    }

    /// Copy the half-open index range `[start, end)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> TensorResult<Var> {
        let vx = self.value(x);
        let sx = vx.shape();
        if axis >= sx.len() || start >= end || end > sx[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", sx),
            ));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = sx.to_vec();
        shape[axis] = len;
        self.push(Op::Slice { x, axis, start, end }, shape, data, self.requires(x))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&self, a: Var, b: Var) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = va.numel() as f32;
        let mut acc = 0.0f32;
        for (&x, &y) in va.data().iter().zip(vb.data().iter()) {
            let d = x - y;
            acc += d * d;
        }
        self.push(Op::Mse { a, b }, vec![1], vec![acc / n], self.requires(a) || self.requires(b))
    }

    /// Numerically stable binary cross-entropy on logits, mean over elements.
    /// Targets must lie in `[0, 1]`.
    pub fn bce_with_logits(&self, logits: Var, targets: Var) -> TensorResult<Var> {
        let (vl, vt) = (self.value(logits), self.value(targets));
        if vl.shape() != vt.shape() {
            return Err(shape_err("bce_with_logits", format!("{:?} vs {:?}", vl.shape(), vt.shape())));
        }
        if vt.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(shape_err("bce_with_logits", "targets outside [0, 1]".into()));
        }
        let n = vl.numel() as f32;
        let mut acc = 0.0f32;
        for (&l, &y) in vl.data().iter().zip(vt.data().iter()) {
            acc += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        self.push(
            Op::BceWithLogits { logits, targets },
            vec![1],
            vec![acc / n],
            self.requires(logits) || self.requires(targets),
        )
    }

    pub fn sum(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let mut acc = 0.0f32;
        for &v in vx.data() {
            acc += v;
        }
        self.push(Op::Sum(x), vec![1], vec![acc], self.requires(x))
    }

    pub fn mean(&self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let mut acc = 0.0f32;
        for &v in vx.data() {
            acc += v;
        }
        self.push(Op::Mean(x), vec![1], vec![acc / vx.numel() as f32], self.requires(x))
    }

    /// Reverse pass from a scalar loss. Consumes the tape: entries are
    /// dropped and their gradients returned. Each node is visited exactly
    /// once; fan-out accumulates additively.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let entries = std::mem::take(&mut *self.entries.borrow_mut());
        if loss.id >= entries.len() {
            return Err(TensorError::Invalid(
                "backward on a consumed or foreign tape".into(),
            ));
        }
        let loss_shape = entries[loss.id].value.shape();
        if entries[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..entries.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(op) = entries[id].op.as_ref() else { continue };
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(op, id, &gy, &entries, &mut grads)?;
            grads[id] = Some(gy);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::from_vec(entries[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        op: &Op,
        node: usize,
        gy: &[f32],
        entries: &[Entry],
        grads: &mut [Option<Vec<f32>>],
    ) -> TensorResult<()> {
        let val = |v: Var| -> &Tensor { &entries[v.id].value };
        let needs = |v: Var| -> bool { entries[v.id].requires_grad };
        let mut sink: Vec<(Var, Vec<f32>)> = Vec::new();

        match op {
            Op::Add(a, b) => {
                if needs(*a) {
                    sink.push((*a, gy.to_vec()));
                }
                if needs(*b) {
                    sink.push((*b, gy.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    sink.push((*a, gy.to_vec()));
                }
                if needs(*b) {
                    sink.push((*b, gy.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b).data();
                    sink.push((*a, gy.iter().zip(vb).map(|(g, v)| g * v).collect()));
                }
                if needs(*b) {
                    let va = val(*a).data();
                    sink.push((*b, gy.iter().zip(va).map(|(g, v)| g * v).collect()));
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    sink.push((*x, gy.iter().map(|g| g * c).collect()));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if needs(*a) {
                    let mut ga = vec![0.0f32; m * k];
                    kernels::gemm_nt(*m, *k, *n, gy, val(*b).data(), &mut ga);
                    sink.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0f32; k * n];
                    kernels::gemm_tn(*k, *n, *m, val(*a).data(), gy, &mut gb);
                    sink.push((*b, gb));
                }
            }
            Op::Conv3d { x, w, b, cin, cout, idims, geom, odims } => {
                let (gx, gw, gb) = kernels::conv3d_bwd(
                    val(*x).data(),
                    val(*w).data(),
                    gy,
                    *cin,
                    *cout,
                    *idims,
                    *geom,
                    *odims,
                    [needs(*x), needs(*w), needs(*b)],
                );
                if let Some(g) = gx {
                    sink.push((*x, g));
                }
                if let Some(g) = gw {
                    sink.push((*w, g));
                }
                if let Some(g) = gb {
                    sink.push((*b, g));
                }
            }
            Op::TConv3d { x, w, b, cin, cout, idims, k, stride } => {
                let (gx, gw, gb) = kernels::tconv3d_bwd(
                    val(*x).data(),
                    val(*w).data(),
                    gy,
                    *cin,
                    *cout,
                    *idims,
                    *k,
                    *stride,
                    [needs(*x), needs(*w), needs(*b)],
                );
                if let Some(g) = gx {
                    sink.push((*x, g));
                }
                if let Some(g) = gw {
                    sink.push((*w, g));
                }
                if let Some(g) = gb {
                    sink.push((*b, g));
                }
            }
            Op::AvgPool3d { x, c, idims } => {
                if needs(*x) {
                    sink.push((*x, kernels::avgpool3d_bwd(gy, *c, *idims)));
                }
            }
            Op::GlobalAvgPool { x, c, spatial } => {
                if needs(*x) {
                    let mut gx = vec![0.0f32; c * spatial];
                    for ci in 0..*c {
                        let g = gy[ci] / *spatial as f32;
                        for v in &mut gx[ci * spatial..][..*spatial] {
                            *v = g;
                        }
                    }
                    sink.push((*x, gx));
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let vx = val(*x).data();
                    sink.push((*x, gy.iter().zip(vx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
                }
            }
            Op::Silu(x) => {
                if needs(*x) {
                    let vx = val(*x).data();
                    let g = gy
                        .iter()
                        .zip(vx)
                        .map(|(g, &v)| {
                            let s = sigmoid_scalar(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    sink.push((*x, g));
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    // Uses the stored output: sigma' = sigma * (1 - sigma).
                    let out = entries[node].value.data();
                    sink.push((*x, gy.iter().zip(out).map(|(g, &s)| g * s * (1.0 - s)).collect()));
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    sink.push((*x, gy.to_vec()));
                }
            }
            Op::ConcatChannels { xs, chans, tail } => {
                let mut offset = 0usize;
                for (v, &c) in xs.iter().zip(chans.iter()) {
                    let len = c * tail;
                    if needs(*v) {
                        sink.push((*v, gy[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                if needs(*x) {
                    let sx = val(*x).shape();
                    let outer: usize = sx[..*axis].iter().product();
                    let inner: usize = sx[*axis + 1..].iter().product();
                    let len = end - start;
                    let mut gx = vec![0.0f32; val(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * sx[*axis] + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                    }
                    sink.push((*x, gx));
                }
            }
            Op::Mse { a, b } => {
                let n = val(*a).numel() as f32;
                let scale = 2.0 * gy[0] / n;
                let (va, vb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    sink.push((*a, va.iter().zip(vb).map(|(&x, &y)| scale * (x - y)).collect()));
                }
                if needs(*b) {
                    sink.push((*b, va.iter().zip(vb).map(|(&x, &y)| -scale * (x - y)).collect()));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let n = val(*logits).numel() as f32;
                let scale = gy[0] / n;
                let (vl, vt) = (val(*logits).data(), val(*targets).data());
                if needs(*logits) {
                    sink.push((
                        *logits,
                        vl.iter().zip(vt).map(|(&l, &y)| scale * (sigmoid_scalar(l) - y)).collect(),
                    ));
                }
                if needs(*targets) {
                    sink.push((*targets, vl.iter().map(|&l| -scale * l).collect()));
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    sink.push((*x, vec![gy[0]; val(*x).numel()]));
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let g = gy[0] / val(*x).numel() as f32;
                    sink.push((*x, vec![g; val(*x).numel()]));
                }
            }
        }

        for (v, g) in sink {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFiniteGrad { op: op.name(), node });
            }
            match &mut grads[v.id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}
