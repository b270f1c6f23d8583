//! Compute graph with reverse-mode differentiation.
//!
//! The builder evaluates each node eagerly as it is added (define-by-run),
//! so intermediate values can be inspected mid-construction — the codec
//! needs this to quantize latents before wiring the decoder half. The
//! finished [`Graph`] is immutable: `evaluate` reads stored values,
//! `gradients` walks the tape in reverse, and the finite-difference oracle
//! replays the tape with one leaf element perturbed. Replay keeps every
//! constant (including straight-through bridge tensors and embedding
//! indices) fixed, so the oracle differentiates exactly the function the
//! tape recorded.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_bt_into, matmul_into, Tensor};

pub type NodeId = usize;

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf bound at construction; constant for differentiation.
    Input,
    /// Leaf bound at construction; `gradients` reports these.
    Param,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Transpose,
    /// x[T×C] + v[C], v broadcast over rows.
    AddRow,
    /// x[T×C] ∘ v[C], v broadcast over rows.
    MulRow,
    Relu,
    Gelu,
    Tanh,
    Abs,
    Square,
    Sqrt,
    /// Row-wise softmax of a 2-D tensor.
    Softmax,
    /// Row-wise log-softmax of a 2-D tensor.
    LogSoftmax,
    /// Row-wise normalization to zero mean / unit variance (no affine).
    LayerNorm { eps: f64 },
    /// Column-wise normalization over rows (train-mode batch statistics).
    BatchNormCols { eps: f64 },
    /// x[T×Cin] * w[Cout×Cin×K], strided, zero padding.
    Conv1d {
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    },
    /// Transposed counterpart of Conv1d; output trimmed at both ends.
    ConvT1d {
        stride: usize,
        trim_left: usize,
        trim_right: usize,
    },
    /// x[T×C] * w[C×K], stride 1, zero padding `pad` on both sides.
    DepthwiseConv1d { pad: usize },
    /// Row lookup into w[V×D]; indices are metadata, not differentiated.
    Embed { ids: Vec<usize> },
    /// Stack 2-D inputs vertically (axis 0) or side by side (axis 1).
    Concat { axis: usize },
    SliceRows { from: usize, to: usize },
    SliceCols { from: usize, to: usize },
    GatherRows { ids: Vec<usize> },
    /// y[t] = x[t, cols[t]].
    PickPerRow { cols: Vec<usize> },
    Sum,
    Mean,
    /// Rank-1 signal [n] → zero-padded frames [ceil(n/hop) × win].
    Frames { win: usize, hop: usize },
    Reshape { shape: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormCols { .. } => "batch_norm_cols",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvT1d { .. } => "conv_t1d",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Embed { .. } => "embed",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Frames { .. } => "frames",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

fn mismatch(node: &str, detail: String) -> Error {
    Error::ShapeMismatch {
        node: node.to_string(),
        detail,
    }
}

/// Forward evaluation of one op given its input tensors.
fn forward(op: &Op, label: &str, ins: &[&Tensor]) -> Result<Tensor> {
    let want2 = |t: &Tensor| -> Result<(usize, usize)> {
        t.dims2()
            .map_err(|_| mismatch(label, format!("expected rank-2 input, got {:?}", t.shape())))
    };
    match op {
        Op::Input | Op::Param => unreachable!("leaves carry their own value"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(
                    label,
                    format!("operand shapes {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(c) => Ok(ins[0].map(|v| v * c)),
        Op::AddScalar(c) => Ok(ins[0].map(|v| v + c)),
        Op::MatMul => {
            let (m, k) = want2(ins[0])?;
            let (k2, n) = want2(ins[1])?;
            if k != k2 {
                return Err(mismatch(label, format!("inner dims {} vs {}", k, k2)));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(&mut out, ins[0], ins[1]);
            Tensor::new(vec![m, n], out)
        }
        Op::Transpose => {
            let (r, c) = want2(ins[0])?;
            let x = ins[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)
        }
        Op::AddRow | Op::MulRow => {
            let (r, c) = want2(ins[0])?;
            let v = ins[1];
            if v.numel() != c || v.rank() > 1 {
                return Err(mismatch(
                    label,
                    format!("row vector shape {:?} vs {} columns", v.shape(), c),
                ));
            }
            let mut out = ins[0].data().to_vec();
            let vv = v.data();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    match op {
                        Op::AddRow => row[j] += vv[j],
                        _ => row[j] *= vv[j],
                    }
                }
            }
            Tensor::new(vec![r, c], out)
        }
        Op::Relu => Ok(ins[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Gelu => Ok(ins[0].map(|x| {
            let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        })),
        Op::Tanh => Ok(ins[0].map(f64::tanh)),
        Op::Abs => Ok(ins[0].map(f64::abs)),
        Op::Square => Ok(ins[0].map(|v| v * v)),
        Op::Sqrt => Ok(ins[0].map(f64::sqrt)),
        Op::Softmax => {
            let (r, c) = want2(ins[0])?;
            let mut out = ins[0].data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::new(vec![r, c], out)
        }
        Op::LogSoftmax => {
            let (r, c) = want2(ins[0])?;
            let mut out = ins[0].data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(vec![r, c], out)
        }
        Op::LayerNorm { eps } => {
            let (r, c) = want2(ins[0])?;
            let mut out = ins[0].data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mu) * inv;
                }
            }
            Tensor::new(vec![r, c], out)
        }
        Op::BatchNormCols { eps } => {
            let (r, c) = want2(ins[0])?;
            let x = ins[0].data();
            let mut out = vec![0.0; r * c];
            for j in 0..c {
                let mut mu = 0.0;
                for i in 0..r {
                    mu += x[i * c + j];
                }
                mu /= r as f64;
                let mut var = 0.0;
                for i in 0..r {
                    let d = x[i * c + j] - mu;
                    var += d * d;
                }
                var /= r as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..r {
                    out[i * c + j] = (x[i * c + j] - mu) * inv;
                }
            }
            Tensor::new(vec![r, c], out)
        }
        Op::Conv1d {
            stride,
            pad_left,
            pad_right,
        } => {
            let (t_in, c_in) = want2(ins[0])?;
            let w = ins[1];
            if w.rank() != 3 || w.shape()[1] != c_in {
                return Err(mismatch(
                    label,
                    format!("weight shape {:?} vs input {} channels", w.shape(), c_in),
                ));
            }
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let padded = t_in + pad_left + pad_right;
            if padded < k {
                return Err(mismatch(
                    label,
                    format!("padded length {} shorter than kernel {}", padded, k),
                ));
            }
            let t_out = (padded - k) / stride + 1;
            let packed = pack_w(w, c_out, c_in, k);
            let x = ins[0].data();
            let mut out = vec![0.0; t_out * c_out];
            for t in 0..t_out {
                let base = (t * stride) as isize - *pad_left as isize;
                let orow = &mut out[t * c_out..(t + 1) * c_out];
                for j in 0..k {
                    let u = base + j as isize;
                    if u < 0 || u >= t_in as isize {
                        continue;
                    }
                    let xrow = &x[u as usize * c_in..(u as usize + 1) * c_in];
                    for (c, &a) in xrow.iter().enumerate() {
                        let wrow = &packed[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                        for o in 0..c_out {
                            orow[o] += a * wrow[o];
                        }
                    }
                }
            }
            Tensor::new(vec![t_out, c_out], out)
        }
        Op::ConvT1d {
            stride,
            trim_left,
            trim_right,
        } => {
            let (t_in, c_in) = want2(ins[0])?;
            let w = ins[1];
            if w.rank() != 3 || w.shape()[1] != c_in {
                return Err(mismatch(
                    label,
                    format!("weight shape {:?} vs input {} channels", w.shape(), c_in),
                ));
            }
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let full = (t_in - 1) * stride + k;
            if full < trim_left + trim_right {
                return Err(mismatch(label, "trim exceeds output length".into()));
            }
            let t_out = full - trim_left - trim_right;
            let packed = pack_w(w, c_out, c_in, k);
            let x = ins[0].data();
            let mut out = vec![0.0; t_out * c_out];
            for t in 0..t_in {
                let xrow = &x[t * c_in..(t + 1) * c_in];
                for j in 0..k {
                    let u = (t * stride + j) as isize - *trim_left as isize;
                    if u < 0 || u >= t_out as isize {
                        continue;
                    }
                    let orow = &mut out[u as usize * c_out..(u as usize + 1) * c_out];
                    for (c, &a) in xrow.iter().enumerate() {
                        let wrow = &packed[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                        for o in 0..c_out {
                            orow[o] += a * wrow[o];
                        }
                    }
                }
            }
            Tensor::new(vec![t_out, c_out], out)
        }
        Op::DepthwiseConv1d { pad } => {
            let (t_in, c) = want2(ins[0])?;
            let w = ins[1];
            let (cw, k) = want2(w)?;
            if cw != c {
                return Err(mismatch(
                    label,
                    format!("weight rows {} vs {} channels", cw, c),
                ));
            }
            let t_out = t_in + 2 * pad + 1 - k;
            let x = ins[0].data();
            let wd = w.data();
            let mut out = vec![0.0; t_out * c];
            for t in 0..t_out {
                let orow = &mut out[t * c..(t + 1) * c];
                for j in 0..k {
                    let u = (t + j) as isize - *pad as isize;
                    if u < 0 || u >= t_in as isize {
                        continue;
                    }
                    let xrow = &x[u as usize * c..(u as usize + 1) * c];
                    for ch in 0..c {
                        orow[ch] += xrow[ch] * wd[ch * k + j];
                    }
                }
            }
            Tensor::new(vec![t_out, c], out)
        }
        Op::Embed { ids } => {
            let (v, d) = want2(ins[0])?;
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(mismatch(
                    label,
                    format!("index {} out of range for {} rows", bad, v),
                ));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(ins[0].row(i));
            }
            Tensor::new(vec![ids.len(), d], out)
        }
        Op::Concat { axis } => {
            let dims: Vec<(usize, usize)> = ins
                .iter()
                .map(|t| want2(t))
                .collect::<Result<_>>()?;
            if *axis == 0 {
                let c = dims[0].1;
                if dims.iter().any(|&(_, ci)| ci != c) {
                    return Err(mismatch(label, "column counts differ".into()));
                }
                let rows: usize = dims.iter().map(|&(r, _)| r).sum();
                let mut out = Vec::with_capacity(rows * c);
                for t in ins {
                    out.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c], out)
            } else {
                let r = dims[0].0;
                if dims.iter().any(|&(ri, _)| ri != r) {
                    return Err(mismatch(label, "row counts differ".into()));
                }
                let cols: usize = dims.iter().map(|&(_, c)| c).sum();
                let mut out = vec![0.0; r * cols];
                let mut off = 0;
                for (t, &(_, ci)) in ins.iter().zip(&dims) {
                    for i in 0..r {
                        out[i * cols + off..i * cols + off + ci].copy_from_slice(t.row(i));
                    }
                    off += ci;
                }
                Tensor::new(vec![r, cols], out)
            }
        }
        Op::SliceRows { from, to } => {
            let (r, c) = want2(ins[0])?;
            if *from > *to || *to > r {
                return Err(mismatch(label, format!("rows {}..{} of {}", from, to, r)));
            }
            Tensor::new(
                vec![to - from, c],
                ins[0].data()[from * c..to * c].to_vec(),
            )
        }
        Op::SliceCols { from, to } => {
            let (r, c) = want2(ins[0])?;
            if *from > *to || *to > c {
                return Err(mismatch(label, format!("cols {}..{} of {}", from, to, c)));
            }
            let w = to - from;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&ins[0].row(i)[*from..*to]);
            }
            Tensor::new(vec![r, w], out)
        }
        Op::GatherRows { ids } => {
            let (r, c) = want2(ins[0])?;
            if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
                return Err(mismatch(label, format!("row {} out of {}", bad, r)));
            }
            let mut out = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                out.extend_from_slice(ins[0].row(i));
            }
            Tensor::new(vec![ids.len(), c], out)
        }
        Op::PickPerRow { cols } => {
            let (r, c) = want2(ins[0])?;
            if cols.len() != r {
                return Err(mismatch(
                    label,
                    format!("{} column picks for {} rows", cols.len(), r),
                ));
            }
            if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
                return Err(mismatch(label, format!("column {} out of {}", bad, c)));
            }
            let out = cols
                .iter()
                .enumerate()
                .map(|(i, &j)| ins[0].at2(i, j))
                .collect();
            Tensor::new(vec![r], out)
        }
        Op::Sum => Ok(Tensor::scalar(ins[0].data().iter().sum())),
        Op::Mean => Ok(Tensor::scalar(
            ins[0].data().iter().sum::<f64>() / ins[0].numel() as f64,
        )),
        Op::Frames { win, hop } => {
            if ins[0].rank() != 1 {
                return Err(mismatch(
                    label,
                    format!("expected rank-1 signal, got {:?}", ins[0].shape()),
                ));
            }
            let n = ins[0].numel();
            if n == 0 {
                return Err(mismatch(label, "empty signal".into()));
            }
            let t_out = n.div_ceil(*hop);
            let x = ins[0].data();
            let mut out = vec![0.0; t_out * win];
            for t in 0..t_out {
                for j in 0..*win {
                    let u = t * hop + j;
                    if u < n {
                        out[t * win + j] = x[u];
                    }
                }
            }
            Tensor::new(vec![t_out, *win], out)
        }
        Op::Reshape { shape } => ins[0].reshaped(shape.clone()).map_err(|_| {
            mismatch(
                label,
                format!("cannot reshape {:?} to {:?}", ins[0].shape(), shape),
            )
        }),
    }
}

/// Repack conv weight [Cout×Cin×K] as [K][Cin][Cout] for contiguous inner loops.
fn pack_w(w: &Tensor, c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let wd = w.data();
    let mut packed = vec![0.0; k * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for j in 0..k {
                packed[(j * c_in + c) * c_out + o] = wd[(o * c_in + c) * k + j];
            }
        }
    }
    packed
}

/// Repack conv weight as [K][Cout][Cin] for contiguous input-gradient loops.
fn pack_w_t(w: &Tensor, c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let wd = w.data();
    let mut packed = vec![0.0; k * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for j in 0..k {
                packed[(j * c_out + o) * c_in + c] = wd[(o * c_in + c) * k + j];
            }
        }
    }
    packed
}

pub struct GraphBuilder {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    names: HashMap<String, NodeId>,
    params: Vec<(String, NodeId)>,
    err: Option<Error>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            values: Vec::new(),
            names: HashMap::new(),
            params: Vec::new(),
            err: None,
        }
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs: vec![] });
        self.values.push(value);
        id
    }

    /// Named input tensor; constant under differentiation.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push_leaf(Op::Input, value);
        self.set_name(name.into(), id);
        id
    }

    /// Anonymous constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, value)
    }

    /// Named trainable leaf; `gradients` reports an entry for it.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let name = name.into();
        let id = self.push_leaf(Op::Param, value);
        if self.names.contains_key(&name) && self.err.is_none() {
            self.err = Some(Error::InvalidArg(format!(
                "duplicate graph name '{}'",
                name
            )));
        }
        self.names.insert(name.clone(), id);
        self.params.push((name, id));
        id
    }

    /// Bind every tensor of a parameter store as a graph parameter.
    pub fn bind_params(&mut self, store: &BTreeMap<String, Tensor>) -> BTreeMap<String, NodeId> {
        store
            .iter()
            .map(|(k, v)| (k.clone(), self.param(k.clone(), v.clone())))
            .collect()
    }

    /// Alias `name` to an existing node so `evaluate` can fetch it.
    pub fn set_name(&mut self, name: impl Into<String>, id: NodeId) {
        let name = name.into();
        if self.names.contains_key(&name) && self.err.is_none() {
            self.err = Some(Error::InvalidArg(format!(
                "duplicate graph name '{}'",
                name
            )));
        }
        self.names.insert(name, id);
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        if self.err.is_some() {
            return 0;
        }
        let id = self.nodes.len();
        let label = format!("n{}:{}", id, op.name());
        let ins: Vec<&Tensor> = inputs.iter().map(|&i| &self.values[i]).collect();
        match forward(&op, &label, &ins) {
            Ok(v) => {
                self.nodes.push(Node { op, inputs });
                self.values.push(v);
                id
            }
            Err(e) => {
                self.err = Some(e);
                0
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(c), vec![a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose, vec![a])
    }
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.push(Op::AddRow, vec![x, v])
    }
    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.push(Op::MulRow, vec![x, v])
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu, vec![x])
    }
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![x])
    }
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs, vec![x])
    }
    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square, vec![x])
    }
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sqrt, vec![x])
    }
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![x])
    }
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmax, vec![x])
    }
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![x])
    }
    pub fn batch_norm_cols(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::BatchNormCols { eps }, vec![x])
    }
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> NodeId {
        self.push(
            Op::Conv1d {
                stride,
                pad_left,
                pad_right,
            },
            vec![x, w],
        )
    }
    pub fn conv_t1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        trim_left: usize,
        trim_right: usize,
    ) -> NodeId {
        self.push(
            Op::ConvT1d {
                stride,
                trim_left,
                trim_right,
            },
            vec![x, w],
        )
    }
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, pad: usize) -> NodeId {
        self.push(Op::DepthwiseConv1d { pad }, vec![x, w])
    }
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.push(Op::Embed { ids: ids.to_vec() }, vec![table])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat { axis: 0 }, parts.to_vec())
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat { axis: 1 }, parts.to_vec())
    }
    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        self.push(Op::SliceRows { from, to }, vec![x])
    }
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        self.push(Op::SliceCols { from, to }, vec![x])
    }
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        self.push(Op::GatherRows { ids: ids.to_vec() }, vec![x])
    }
    pub fn pick_per_row(&mut self, x: NodeId, cols: &[usize]) -> NodeId {
        self.push(Op::PickPerRow { cols: cols.to_vec() }, vec![x])
    }
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x])
    }
    pub fn frames(&mut self, x: NodeId, win: usize, hop: usize) -> NodeId {
        self.push(Op::Frames { win, hop }, vec![x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { shape }, vec![x])
    }

    /// Eager value of a node mid-construction (used by RVQ to quantize
    /// encoder latents before wiring the decoder).
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn has_error(&self) -> bool {
        self.err.is_some()
    }

    pub fn finish(self) -> Result<Graph> {
        if let Some(e) = self.err {
            return Err(e);
        }
        Ok(Graph {
            nodes: self.nodes,
            values: self.values,
            names: self.names,
            params: self.params,
        })
    }
}

/// Immutable evaluated computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    names: HashMap<String, NodeId>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    fn id_of(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Forward values for the requested names; errors if any contains NaN/Inf.
    pub fn evaluate(&self, outputs: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut map = BTreeMap::new();
        for &name in outputs {
            let id = self.id_of(name)?;
            let v = &self.values[id];
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("output '{}'", name),
                });
            }
            map.insert(name.to_string(), v.clone());
        }
        Ok(map)
    }

    pub fn value_of(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.id_of(name)?])
    }

    /// Reverse-mode gradients of a scalar loss for every parameter.
    /// Parameters the loss does not reach map to zero tensors.
    pub fn gradients(&self, loss: &str) -> Result<BTreeMap<String, Tensor>> {
        let loss_id = self.id_of(loss)?;
        if !self.values[loss_id].is_scalar() {
            return Err(Error::ShapeMismatch {
                node: loss.to_string(),
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.values[loss_id].shape()
                ),
            });
        }
        let grads = self.backward(loss_id);
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &grads[*id] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.values[*id].shape()),
            };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of '{}'", name),
                });
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backward(&self, loss_id: NodeId) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(Tensor::scalar(1.0));
        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Parameters keep their accumulated gradient for collection.
            if matches!(self.nodes[id].op, Op::Param | Op::Input) {
                grads[id] = Some(g);
                continue;
            }
            let node = &self.nodes[id];
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.values[i]).collect();
            let contribs = backward_op(&node.op, &ins, &self.values[id], &g);
            for (slot, contrib) in node.inputs.iter().zip(contribs) {
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                match &mut grads[*slot] {
                    Some(acc) => {
                        let data = acc.data_mut();
                        for (a, b) in data.iter_mut().zip(contrib.data()) {
                            *a += b;
                        }
                    }
                    slot_g => *slot_g = Some(contrib),
                }
            }
            if matches!(self.nodes[id].op, Op::Param) {
                grads[id] = Some(g);
            }
        }
        grads
    }

    /// Replay the tape with some leaf values overridden; constants and op
    /// metadata stay fixed, so this recomputes exactly the recorded function.
    fn replay(&self, overrides: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = if node.inputs.is_empty() {
                match overrides.get(&id) {
                    Some(t) => t.clone(),
                    None => self.values[id].clone(),
                }
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                forward(&node.op, &format!("n{}:{}", id, node.op.name()), &ins)?
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Central-difference gradient estimate for every element of `param`.
    pub fn finite_difference(&self, loss: &str, param: &str, h: f64) -> Result<Tensor> {
        let pid = self.id_of(param)?;
        let n = self.values[pid].numel();
        let all: Vec<usize> = (0..n).collect();
        let vals = self.finite_difference_at(loss, param, &all, h)?;
        Tensor::new(self.values[pid].shape().to_vec(), vals)
    }

    /// Central differences at selected flat indices of `param`.
    pub fn finite_difference_at(
        &self,
        loss: &str,
        param: &str,
        indices: &[usize],
        h: f64,
    ) -> Result<Vec<f64>> {
        if h <= 0.0 {
            return Err(Error::InvalidArg("finite-difference step must be > 0".into()));
        }
        let loss_id = self.id_of(loss)?;
        let pid = self.id_of(param)?;
        let base = &self.values[pid];
        let mut out = Vec::with_capacity(indices.len());
        for &idx in indices {
            let run = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[idx] += delta;
                let mut overrides = HashMap::new();
                overrides.insert(pid, t);
                let values = self.replay(&overrides)?;
                values[loss_id].scalar_value()
            };
            let plus = run(h)?;
            let minus = run(-h)?;
            out.push((plus - minus) / (2.0 * h));
        }
        Ok(out)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Per-op vector-Jacobian products. `y` is the forward value of the node,
/// `g` the incoming gradient; returns one optional contribution per input.
fn backward_op(op: &Op, ins: &[&Tensor], y: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Input | Op::Param => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => {
            let da = zip_mul(g, ins[1]);
            let db = zip_mul(g, ins[0]);
            vec![Some(da), Some(db)]
        }
        Op::Scale(c) => vec![Some(g.map(|v| v * c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::MatMul => {
            let a = ins[0];
            let b = ins[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // da = g · bᵀ
            let mut da = vec![0.0; m * k];
            matmul_bt_into(&mut da, g, b);
            // db = aᵀ · g : accumulate row-wise to keep inner loops contiguous.
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let arow = a.row(i);
                let grow = g.row(i);
                for (p, &aip) in arow.iter().enumerate() {
                    let dbrow = &mut db[p * n..(p + 1) * n];
                    for j in 0..n {
                        dbrow[j] += aip * grow[j];
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![m, k], da).unwrap()),
                Some(Tensor::new(vec![k, n], db).unwrap()),
            ]
        }
        Op::Transpose => {
            let (r, c) = (y.shape()[0], y.shape()[1]); // y is [c_in× r_in] transposed
            let gd = g.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = gd[i * c + j];
                }
            }
            vec![Some(Tensor::new(vec![c, r], out).unwrap())]
        }
        Op::AddRow => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dv = vec![0.0; c];
            for i in 0..r {
                for (j, d) in dv.iter_mut().enumerate() {
                    *d += g.at2(i, j);
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_vec(dv))]
        }
        Op::MulRow => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let v = ins[1].data();
            let mut dx = vec![0.0; r * c];
            let mut dv = vec![0.0; c];
            for i in 0..r {
                let grow = g.row(i);
                let xrow = ins[0].row(i);
                for j in 0..c {
                    dx[i * c + j] = grow[j] * v[j];
                    dv[j] += grow[j] * xrow[j];
                }
            }
            vec![
                Some(Tensor::new(vec![r, c], dx).unwrap()),
                Some(Tensor::from_vec(dv)),
            ]
        }
        Op::Relu => vec![Some(zip(g, ins[0], |gv, xv| {
            if xv > 0.0 {
                gv
            } else {
                0.0
            }
        }))],
        Op::Gelu => vec![Some(zip(g, ins[0], |gv, x| {
            let inner = GELU_A * (x + GELU_B * x * x * x);
            let t = inner.tanh();
            let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x);
            gv * d
        }))],
        Op::Tanh => vec![Some(zip(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
        // |x| backward at 0 returns 0 (documented subgradient convention).
        Op::Abs => vec![Some(zip(g, ins[0], |gv, xv| gv * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 }))],
        Op::Square => vec![Some(zip(g, ins[0], |gv, xv| gv * 2.0 * xv))],
        Op::Sqrt => vec![Some(zip(g, y, |gv, yv| gv / (2.0 * yv)))],
        Op::Softmax => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let yrow = y.row(i);
                let grow = g.row(i);
                let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dx[i * c + j] = yrow[j] * (grow[j] - dot);
                }
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::LogSoftmax => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let yrow = y.row(i);
                let grow = g.row(i);
                let gsum: f64 = grow.iter().sum();
                for j in 0..c {
                    dx[i * c + j] = grow[j] - yrow[j].exp() * gsum;
                }
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::LayerNorm { eps } => {
            let x = ins[0];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let xrow = x.row(i);
                let yrow = y.row(i);
                let grow = g.row(i);
                let mu = xrow.iter().sum::<f64>() / c as f64;
                let var = xrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mean_g = grow.iter().sum::<f64>() / c as f64;
                let mean_gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[i * c + j] = inv * (grow[j] - mean_g - yrow[j] * mean_gy);
                }
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::BatchNormCols { eps } => {
            let x = ins[0];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for j in 0..c {
                let mut mu = 0.0;
                for i in 0..r {
                    mu += x.at2(i, j);
                }
                mu /= r as f64;
                let mut var = 0.0;
                for i in 0..r {
                    let d = x.at2(i, j) - mu;
                    var += d * d;
                }
                var /= r as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mut mean_g = 0.0;
                let mut mean_gy = 0.0;
                for i in 0..r {
                    mean_g += g.at2(i, j);
                    mean_gy += g.at2(i, j) * y.at2(i, j);
                }
                mean_g /= r as f64;
                mean_gy /= r as f64;
                for i in 0..r {
                    dx[i * c + j] = inv * (g.at2(i, j) - mean_g - y.at2(i, j) * mean_gy);
                }
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::Conv1d {
            stride,
            pad_left,
            pad_right: _,
        } => {
            let x = ins[0];
            let w = ins[1];
            let (t_in, c_in) = (x.shape()[0], x.shape()[1]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let t_out = y.shape()[0];
            let packed_t = pack_w_t(w, c_out, c_in, k);
            let mut dx = vec![0.0; t_in * c_in];
            let mut dwp = vec![0.0; k * c_in * c_out];
            for t in 0..t_out {
                let grow = g.row(t);
                let base = (t * stride) as isize - *pad_left as isize;
                for j in 0..k {
                    let u = base + j as isize;
                    if u < 0 || u >= t_in as isize {
                        continue;
                    }
                    let u = u as usize;
                    let xrow = x.row(u);
                    let dxrow = &mut dx[u * c_in..(u + 1) * c_in];
                    for (o, &go) in grow.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let wrow = &packed_t[(j * c_out + o) * c_in..(j * c_out + o + 1) * c_in];
                        for c in 0..c_in {
                            dxrow[c] += go * wrow[c];
                        }
                    }
                    for (c, &xc) in xrow.iter().enumerate() {
                        if xc == 0.0 {
                            continue;
                        }
                        let dwrow = &mut dwp[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                        for o in 0..c_out {
                            dwrow[o] += xc * grow[o];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![t_in, c_in], dx).unwrap()),
                Some(unpack_w(&dwp, c_out, c_in, k)),
            ]
        }
        Op::ConvT1d {
            stride,
            trim_left,
            trim_right: _,
        } => {
            let x = ins[0];
            let w = ins[1];
            let (t_in, c_in) = (x.shape()[0], x.shape()[1]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let t_out = y.shape()[0];
            let packed_t = pack_w_t(w, c_out, c_in, k);
            let mut dx = vec![0.0; t_in * c_in];
            let mut dwp = vec![0.0; k * c_in * c_out];
            for t in 0..t_in {
                let xrow = x.row(t);
                let dxrow_base = t * c_in;
                for j in 0..k {
                    let u = (t * stride + j) as isize - *trim_left as isize;
                    if u < 0 || u >= t_out as isize {
                        continue;
                    }
                    let grow = g.row(u as usize);
                    for (o, &go) in grow.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let wrow = &packed_t[(j * c_out + o) * c_in..(j * c_out + o + 1) * c_in];
                        let dxrow = &mut dx[dxrow_base..dxrow_base + c_in];
                        for c in 0..c_in {
                            dxrow[c] += go * wrow[c];
                        }
                    }
                    for (c, &xc) in xrow.iter().enumerate() {
                        if xc == 0.0 {
                            continue;
                        }
                        let dwrow = &mut dwp[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                        for o in 0..c_out {
                            dwrow[o] += xc * grow[o];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![t_in, c_in], dx).unwrap()),
                Some(unpack_w(&dwp, c_out, c_in, k)),
            ]
        }
        Op::DepthwiseConv1d { pad } => {
            let x = ins[0];
            let w = ins[1];
            let (t_in, c) = (x.shape()[0], x.shape()[1]);
            let k = w.shape()[1];
            let t_out = y.shape()[0];
            let wd = w.data();
            let mut dx = vec![0.0; t_in * c];
            let mut dw = vec![0.0; c * k];
            for t in 0..t_out {
                let grow = g.row(t);
                for j in 0..k {
                    let u = (t + j) as isize - *pad as isize;
                    if u < 0 || u >= t_in as isize {
                        continue;
                    }
                    let u = u as usize;
                    let xrow = x.row(u);
                    let dxrow = &mut dx[u * c..(u + 1) * c];
                    for ch in 0..c {
                        dxrow[ch] += grow[ch] * wd[ch * k + j];
                        dw[ch * k + j] += grow[ch] * xrow[ch];
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![t_in, c], dx).unwrap()),
                Some(Tensor::new(vec![c, k], dw).unwrap()),
            ]
        }
        Op::Embed { ids } => {
            let (v, d) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dw = vec![0.0; v * d];
            for (i, &id) in ids.iter().enumerate() {
                let grow = g.row(i);
                let drow = &mut dw[id * d..(id + 1) * d];
                for j in 0..d {
                    drow[j] += grow[j];
                }
            }
            vec![Some(Tensor::new(vec![v, d], dw).unwrap())]
        }
        Op::Concat { axis } => {
            if *axis == 0 {
                let mut offset = 0;
                ins.iter()
                    .map(|t| {
                        let r = t.shape()[0];
                        let c = t.shape()[1];
                        let part = Tensor::new(
                            vec![r, c],
                            g.data()[offset * c..(offset + r) * c].to_vec(),
                        )
                        .unwrap();
                        offset += r;
                        Some(part)
                    })
                    .collect()
            } else {
                let r = ins[0].shape()[0];
                let total: usize = ins.iter().map(|t| t.shape()[1]).sum();
                let mut offset = 0;
                ins.iter()
                    .map(|t| {
                        let c = t.shape()[1];
                        let mut part = vec![0.0; r * c];
                        for i in 0..r {
                            part[i * c..(i + 1) * c].copy_from_slice(
                                &g.data()[i * total + offset..i * total + offset + c],
                            );
                        }
                        offset += c;
                        Some(Tensor::new(vec![r, c], part).unwrap())
                    })
                    .collect()
            }
        }
        Op::SliceRows { from, .. } => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dx = vec![0.0; r * c];
            let rows = y.shape()[0];
            dx[from * c..(from + rows) * c].copy_from_slice(g.data());
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::SliceCols { from, to } => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let w = to - from;
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + from..i * c + to].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::GatherRows { ids } => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dx = vec![0.0; r * c];
            for (i, &id) in ids.iter().enumerate() {
                let grow = g.row(i);
                let drow = &mut dx[id * c..(id + 1) * c];
                for j in 0..c {
                    drow[j] += grow[j];
                }
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::PickPerRow { cols } => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dx = vec![0.0; r * c];
            for (i, &j) in cols.iter().enumerate() {
                dx[i * c + j] += g.data()[i];
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }
        Op::Sum => {
            let gv = g.data()[0];
            vec![Some(Tensor::full(ins[0].shape(), gv))]
        }
        Op::Mean => {
            let gv = g.data()[0] / ins[0].numel() as f64;
            vec![Some(Tensor::full(ins[0].shape(), gv))]
        }
        Op::Frames { win, hop } => {
            let n = ins[0].numel();
            let t_out = y.shape()[0];
            let mut dx = vec![0.0; n];
            for t in 0..t_out {
                let grow = g.row(t);
                for j in 0..*win {
                    let u = t * hop + j;
                    if u < n {
                        dx[u] += grow[j];
                    }
                }
            }
            vec![Some(Tensor::from_vec(dx))]
        }
        Op::Reshape { .. } => {
            vec![Some(
                g.reshaped(ins[0].shape().to_vec()).expect("same numel"),
            )]
        }
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        g.shape().to_vec(),
        g.data()
            .iter()
            .zip(x.data())
            .map(|(&gv, &xv)| f(gv, xv))
            .collect(),
    )
    .unwrap()
}

fn zip_mul(g: &Tensor, x: &Tensor) -> Tensor {
    zip(g, x, |a, b| a * b)
}

fn unpack_w(packed: &[f64], c_out: usize, c_in: usize, k: usize) -> Tensor {
    let mut w = vec![0.0; c_out * c_in * k];
    for o in 0..c_out {
        for c in 0..c_in {
            for j in 0..k {
                w[(o * c_in + c) * k + j] = packed[(j * c_in + c) * c_out + o];
            }
        }
    }
    Tensor::new(vec![c_out, c_in, k], w).unwrap()
}

/// Central-difference gradient oracle; independent check for reverse-mode
/// gradients (default step 1e-5). `|x|` at 0 follows the subgradient
/// convention of returning 0, which central differences reproduce.
pub fn finite_difference_oracle(
    graph: &Graph,
    scalar_loss: &str,
    param: &str,
    h: f64,
) -> Result<Tensor> {
    graph.finite_difference(scalar_loss, param, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn square_gradient_analytic() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", Tensor::scalar(3.0));
        let y = b.square(x);
        b.set_name("loss", y);
        let g = b.finish().unwrap();
        let grads = g.gradients("loss").unwrap();
        assert!((grads["x"].data()[0] - 6.0).abs() < 1e-12);
        let fd = finite_difference_oracle(&g, "loss", "x", 1e-5).unwrap();
        assert!((fd.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_sum_constant_has_zero_gradient() {
        let mut b = GraphBuilder::new();
        let z = b.param("z", Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap());
        let s = b.softmax(z);
        let l = b.sum(s);
        b.set_name("loss", l);
        let g = b.finish().unwrap();
        let grads = g.gradients("loss").unwrap();
        for &v in grads["z"].data() {
            assert!(v.abs() < 1e-12, "gradient of constant function: {}", v);
        }
    }

    #[test]
    fn softmax_uniform_rows() {
        let mut b = GraphBuilder::new();
        let z = b.input("z", Tensor::zeros(&[1, 4]));
        let s = b.softmax(z);
        b.set_name("s", s);
        let g = b.finish().unwrap();
        let out = g.evaluate(&["s"]).unwrap();
        for &v in out["s"].data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let mut b = GraphBuilder::new();
        let vals = vec![0.3, -1.5, 0.9, 2.2, -0.4, 0.1, 1.1, -2.0];
        let x = b.param("x", Tensor::new(vec![1, 8], vals).unwrap());
        let ln = b.layer_norm(x, 1e-5);
        let w = b.constant(Tensor::new(vec![1, 8], vec![0.9, -0.3, 0.5, 1.2, -0.8, 0.2, 0.4, -1.0]).unwrap());
        let prod = b.mul(ln, w);
        let l = b.sum(prod);
        b.set_name("loss", l);
        let g = b.finish().unwrap();
        let grads = g.gradients("loss").unwrap();
        let fd = g.finite_difference("loss", "x", 1e-5).unwrap();
        for (a, f) in grads["x"].data().iter().zip(fd.data()) {
            assert!(rel_err(*a, *f) < 1e-6, "ln grad {} vs fd {}", a, f);
        }
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", Tensor::scalar(2.0));
        let _unused = b.param("unused", Tensor::from_vec(vec![1.0, 2.0]));
        let l = b.square(x);
        b.set_name("loss", l);
        let g = b.finish().unwrap();
        let grads = g.gradients("loss").unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", Tensor::from_vec(vec![1.0, 2.0]));
        let y = b.square(x);
        b.set_name("loss", y);
        let g = b.finish().unwrap();
        assert!(g.gradients("loss").is_err());
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let mut b = GraphBuilder::new();
        let a = b.constant(Tensor::zeros(&[2, 3]));
        let c = b.constant(Tensor::zeros(&[4, 5]));
        b.matmul(a, c);
        match b.finish() {
            Err(Error::ShapeMismatch { node, .. }) => assert!(node.contains("matmul")),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn strided_conv_stack_length_law() {
        // input length 640·k through strides [8,5,4,2,2] → k frames
        for k_frames in [1usize, 3, 7] {
            let n = 640 * k_frames;
            let mut b = GraphBuilder::new();
            let sig = b.constant(Tensor::zeros(&[n]));
            let mut x = b.reshape(sig, vec![n, 1]);
            let mut ch = 1usize;
            for &s in &[8usize, 5, 4, 2, 2] {
                let k = 2 * s;
                let w = b.constant(Tensor::zeros(&[2, ch, k]));
                let pl = (k - s) / 2;
                let pr = (k - s) - pl;
                x = b.conv1d(x, w, s, pl, pr);
                ch = 2;
            }
            b.set_name("out", x);
            let g = b.finish().unwrap();
            assert_eq!(g.value_of("out").unwrap().shape()[0], k_frames);
        }
    }

    #[test]
    fn evaluate_rejects_non_finite() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Tensor::scalar(-1.0));
        let y = b.sqrt(x);
        b.set_name("y", y);
        let g = b.finish().unwrap();
        assert!(matches!(
            g.evaluate(&["y"]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let build = || {
            let mut b = GraphBuilder::new();
            let x = b.input(
                "x",
                Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.7]).unwrap(),
            );
            let ln = b.layer_norm(x, 1e-5);
            let s = b.softmax(ln);
            let m = b.mean(s);
            b.set_name("m", m);
            b.finish().unwrap()
        };
        let a = build().evaluate(&["m"]).unwrap();
        let c = build().evaluate(&["m"]).unwrap();
        assert_eq!(a["m"].data()[0].to_bits(), c["m"].data()[0].to_bits());
    }
}
