//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Forward values are computed eagerly as ops are appended; `backward` walks
//! the tape in reverse and accumulates gradients for every node that can
//! reach a bound parameter. The op set is exactly what the encoder/decoder/
//! refiner architectures need, nothing more.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::param::ParamSet;
use super::tensor::{
    avg_pool2_raw, conv2d_bwd, conv2d_raw, matmul_raw, softmax_rows_raw, transpose_raw, Tensor,
};

const LN_EPS: f64 = 1e-5;
const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    ScalarMul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    MeanAll(NodeId),
    Conv2d(NodeId, NodeId, NodeId),
    AvgPool2(NodeId),
    ConcatChannels(Vec<NodeId>),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    AddRowBroadcast(NodeId, NodeId),
    ExtractPatches2(NodeId),
    TokensToGrid(NodeId, usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, NodeId)>,
    bound_index: HashMap<String, NodeId>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input: participates in forward only.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Bind a named parameter as a differentiable leaf. Binding the same name
    /// twice returns the original node so gradients accumulate once.
    pub fn param(&mut self, ps: &ParamSet, name: &str) -> NodeId {
        if let Some(&id) = self.bound_index.get(name) {
            return id;
        }
        let value = ps.value(name).clone();
        let id = self.push(Op::Leaf, value, true);
        self.bound.push((name.to_string(), id));
        self.bound_index.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dims(), self.value(b).dims(), "add dims");
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dims(), self.value(b).dims(), "sub dims");
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dims(), self.value(b).dims(), "mul dims");
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(Op::Offset(a), v, ng)
    }

    /// Multiply a tensor by a one-element scalar node, broadcasting it.
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> NodeId {
        assert_eq!(self.value(s).numel(), 1, "scalar_mul needs 1-element scalar");
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|e| sv * e);
        let ng = self.needs(s) || self.needs(x);
        self.push(Op::ScalarMul(s, x), v, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        assert!(ad.len() == 2 && bd.len() == 2 && ad[1] == bd[0], "matmul dims");
        let v = matmul_raw(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.value(a).rank(), 2, "transpose rank");
        let v = transpose_raw(self.value(a));
        let ng = self.needs(a);
        self.push(Op::Transpose(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.value(a).rank(), 2, "softmax rank");
        let v = softmax_rows_raw(self.value(a));
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    /// Layer norm across each row of an RxD tensor with 1xD gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let d = self.value(x).dims()[1];
        assert_eq!(self.value(gain).dims(), &[1, d], "ln gain dims");
        assert_eq!(self.value(bias).dims(), &[1, d], "ln bias dims");
        let v = layer_norm_fwd(self.value(x), self.value(gain), self.value(bias));
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNormRows(x, gain, bias), v, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(Op::Gelu(a), v, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), v, ng)
    }

    /// Mean over all elements, producing a 1-element tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(m), ng)
    }

    /// Same-padded stride-1 convolution (input CxHxW, kernel OxCxKxK, bias O).
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> NodeId {
        let (xd, kd, bd) = (
            self.value(x).dims(),
            self.value(k).dims(),
            self.value(b).dims(),
        );
        assert!(xd.len() == 3 && kd.len() == 4 && bd.len() == 1, "conv2d ranks");
        assert!(kd[1] == xd[0] && kd[2] == kd[3] && kd[2] % 2 == 1 && bd[0] == kd[0], "conv2d dims");
        let v = conv2d_raw(self.value(x), self.value(k), self.value(b));
        let ng = self.needs(x) || self.needs(k) || self.needs(b);
        self.push(Op::Conv2d(x, k, b), v, ng)
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let d = self.value(a).dims();
        assert!(d.len() == 3 && d[1] % 2 == 0 && d[2] % 2 == 0, "avg_pool2 dims");
        let v = avg_pool2_raw(self.value(a));
        let ng = self.needs(a);
        self.push(Op::AvgPool2(a), v, ng)
    }

    /// Stack rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (h, w) = {
            let d = self.value(parts[0]).dims();
            (d[1], d[2])
        };
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.value(p);
            assert!(t.rank() == 3 && t.dims()[1] == h && t.dims()[2] == w, "concat dims");
            channels += t.dims()[0];
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatChannels(parts.to_vec()),
            Tensor::from_parts(vec![channels, h, w], data),
            ng,
        )
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        assert!(ad.len() == 2 && bd.len() == 2 && ad[1] == bd[1], "concat_rows dims");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Op::ConcatRows(a, b),
            Tensor::from_parts(vec![ad[0] + bd[0], ad[1]], data),
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let d = self.value(a).dims().to_vec();
        assert!(d.len() == 2 && start + len <= d[0], "slice_rows bounds");
        let data = self.value(a).data()[start * d[1]..(start + len) * d[1]].to_vec();
        let ng = self.needs(a);
        self.push(
            Op::SliceRows(a, start, len),
            Tensor::from_parts(vec![len, d[1]], data),
            ng,
        )
    }

    /// (NxD) + (1xD) with the row vector broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xd, bd) = (self.value(x).dims().to_vec(), self.value(b).dims().to_vec());
        assert!(xd.len() == 2 && bd == [1, xd[1]], "add_row_broadcast dims");
        let d = xd[1];
        let mut data = self.value(x).data().to_vec();
        let bdata = self.value(b).data();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bdata[i % d];
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::AddRowBroadcast(x, b), Tensor::from_parts(xd, data), ng)
    }

    /// Flatten non-overlapping 2x2 patches of a CxHxW map into rows:
    /// output is (H/2*W/2) x (4C), row n = patch (n / (W/2), n % (W/2)),
    /// feature index c*4 + dy*2 + dx.
    pub fn extract_patches2(&mut self, a: NodeId) -> NodeId {
        let d = self.value(a).dims().to_vec();
        assert!(d.len() == 3 && d[1] % 2 == 0 && d[2] % 2 == 0, "patch dims");
        let (c_ch, h, w) = (d[0], d[1], d[2]);
        let (ph, pw) = (h / 2, w / 2);
        let mut data = vec![0.0; ph * pw * 4 * c_ch];
        let src = self.value(a).data();
        for pi in 0..ph {
            for pj in 0..pw {
                let n = pi * pw + pj;
                for c in 0..c_ch {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            data[n * 4 * c_ch + c * 4 + dy * 2 + dx] =
                                src[(c * h + 2 * pi + dy) * w + 2 * pj + dx];
                        }
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(
            Op::ExtractPatches2(a),
            Tensor::from_parts(vec![ph * pw, 4 * c_ch], data),
            ng,
        )
    }

    /// Rearrange NxD token features into a DxHxW grid (N = h*w, row-major).
    pub fn tokens_to_grid(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let d = self.value(a).dims().to_vec();
        assert!(d.len() == 2 && d[0] == h * w, "tokens_to_grid dims");
        let dim = d[1];
        let src = self.value(a).data();
        let mut data = vec![0.0; dim * h * w];
        for n in 0..h * w {
            for c in 0..dim {
                data[c * h * w + n] = src[n * dim + c];
            }
        }
        let ng = self.needs(a);
        self.push(
            Op::TokensToGrid(a, h, w),
            Tensor::from_parts(vec![dim, h, w], data),
            ng,
        )
    }

    /// Reverse pass from a scalar loss node. Fails if the loss is non-finite.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.dims()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::invalid("non-finite loss".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let acc = |grads: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor, tape: &Tape| {
            if !tape.needs(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *b, g.clone(), self);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *b, g.map(|x| -x), self);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, zip(g, self.value(*b), |x, y| x * y), self);
                acc(grads, *b, zip(g, self.value(*a), |x, y| x * y), self);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c), self),
            Op::Offset(a) => acc(grads, *a, g.clone(), self),
            Op::ScalarMul(s, x) => {
                let sv = self.value(*s).data()[0];
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                acc(grads, *s, Tensor::scalar(dot), self);
                acc(grads, *x, g.map(|e| sv * e), self);
            }
            Op::MatMul(a, b) => {
                let bt = transpose_raw(self.value(*b));
                acc(grads, *a, matmul_raw(g, &bt), self);
                let at = transpose_raw(self.value(*a));
                acc(grads, *b, matmul_raw(&at, g), self);
            }
            Op::Transpose(a) => acc(grads, *a, transpose_raw(g), self),
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (r, c) = (y.dims()[0], y.dims()[1]);
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y.data()[row * c..(row + 1) * c];
                    let gs = &g.data()[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_parts(vec![r, c], out), self);
            }
            Op::LayerNormRows(x, gain, bias) => {
                let (gx, gg, gb) = layer_norm_bwd(self.value(*x), self.value(*gain), g);
                acc(grads, *x, gx, self);
                acc(grads, *gain, gg, self);
                acc(grads, *bias, gb, self);
            }
            Op::Gelu(a) => {
                acc(grads, *a, zip(g, self.value(*a), |gi, x| gi * gelu_dx(x)), self);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(grads, *a, zip(g, y, |gi, s| gi * s * (1.0 - s)), self);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(grads, *a, zip(g, y, |gi, t| gi * (1.0 - t * t)), self);
            }
            Op::Abs(a) => {
                acc(
                    grads,
                    *a,
                    zip(g, self.value(*a), |gi, x| gi * sign(x)),
                    self,
                );
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g.data()[0] / n;
                acc(grads, *a, Tensor::full(self.value(*a).dims(), gv), self);
            }
            Op::Conv2d(x, k, b) => {
                let (gx, gk, gb) = conv2d_bwd(self.value(*x), self.value(*k), g);
                acc(grads, *x, gx, self);
                acc(grads, *k, gk, self);
                acc(grads, *b, gb, self);
            }
            Op::AvgPool2(a) => {
                let d = self.value(*a).dims();
                let (c_ch, h, w) = (d[0], d[1], d[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c_ch * h * w];
                for c in 0..c_ch {
                    for ii in 0..oh {
                        for jj in 0..ow {
                            let gv = g.data()[(c * oh + ii) * ow + jj] * 0.25;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    out[(c * h + 2 * ii + dy) * w + 2 * jj + dx] = gv;
                                }
                            }
                        }
                    }
                }
                acc(grads, *a, Tensor::from_parts(d.to_vec(), out), self);
            }
            Op::ConcatChannels(parts) => {
                let (h, w) = {
                    let d = self.nodes[i].value.dims();
                    (d[1], d[2])
                };
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims()[0];
                    let slice = g.data()[offset * h * w..(offset + pc) * h * w].to_vec();
                    acc(grads, p, Tensor::from_parts(vec![pc, h, w], slice), self);
                    offset += pc;
                }
            }
            Op::ConcatRows(a, b) => {
                let (ra, d) = {
                    let ad = self.value(*a).dims();
                    (ad[0], ad[1])
                };
                let rb = self.value(*b).dims()[0];
                let ga = g.data()[..ra * d].to_vec();
                let gb = g.data()[ra * d..(ra + rb) * d].to_vec();
                acc(grads, *a, Tensor::from_parts(vec![ra, d], ga), self);
                acc(grads, *b, Tensor::from_parts(vec![rb, d], gb), self);
            }
            Op::SliceRows(a, start, len) => {
                let d = self.value(*a).dims();
                let cols = d[1];
                let mut out = vec![0.0; d[0] * cols];
                out[start * cols..(start + len) * cols].copy_from_slice(g.data());
                acc(grads, *a, Tensor::from_parts(d.to_vec(), out), self);
            }
            Op::AddRowBroadcast(x, b) => {
                acc(grads, *x, g.clone(), self);
                let d = self.value(*b).dims()[1];
                let mut gb = vec![0.0; d];
                for (idx, v) in g.data().iter().enumerate() {
                    gb[idx % d] += v;
                }
                acc(grads, *b, Tensor::from_parts(vec![1, d], gb), self);
            }
            Op::ExtractPatches2(a) => {
                let d = self.value(*a).dims();
                let (c_ch, h, w) = (d[0], d[1], d[2]);
                let (ph, pw) = (h / 2, w / 2);
                let mut out = vec![0.0; c_ch * h * w];
                for pi in 0..ph {
                    for pj in 0..pw {
                        let n = pi * pw + pj;
                        for c in 0..c_ch {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    out[(c * h + 2 * pi + dy) * w + 2 * pj + dx] =
                                        g.data()[n * 4 * c_ch + c * 4 + dy * 2 + dx];
                                }
                            }
                        }
                    }
                }
                acc(grads, *a, Tensor::from_parts(d.to_vec(), out), self);
            }
            Op::TokensToGrid(a, h, w) => {
                let dim = self.value(*a).dims()[1];
                let mut out = vec![0.0; h * w * dim];
                for n in 0..h * w {
                    for c in 0..dim {
                        out[n * dim + c] = g.data()[c * h * w + n];
                    }
                }
                acc(grads, *a, Tensor::from_parts(vec![h * w, dim], out), self);
            }
        }
    }

    /// Fold computed gradients back into the bound parameters.
    pub fn accumulate_param_grads(&self, grads: &Grads, ps: &mut ParamSet) {
        for (name, id) in &self.bound {
            if let Some(g) = grads.get(*id) {
                ps.accumulate_grad(name, g);
            }
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.dims().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_dx(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn layer_norm_fwd(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let (r, d) = (x.dims()[0], x.dims()[1]);
    let mut out = vec![0.0; r * d];
    for row in 0..r {
        let xs = &x.data()[row * d..(row + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[row * d + j] = (xs[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::from_parts(vec![r, d], out)
}

fn layer_norm_bwd(x: &Tensor, gain: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (r, d) = (x.dims()[0], x.dims()[1]);
    let mut gx = vec![0.0; r * d];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for row in 0..r {
        let xs = &x.data()[row * d..(row + 1) * d];
        let gs = &g.data()[row * d..(row + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * rstd).collect();
        let dxhat: Vec<f64> = gs
            .iter()
            .zip(gain.data())
            .map(|(gi, gn)| gi * gn)
            .collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat =
            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gx[row * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            gg[j] += gs[j] * xhat[j];
            gb[j] += gs[j];
        }
    }
    (
        Tensor::from_parts(vec![r, d], gx),
        Tensor::from_parts(vec![1, d], gg),
        Tensor::from_parts(vec![1, d], gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    /// Central finite difference over every element of one leaf input.
    fn fd_grad(
        build: impl Fn(&Tensor) -> f64,
        x: &Tensor,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            out.push((build(&plus) - build(&minus)) / (2.0 * eps));
        }
        out
    }

    fn check_unary(op: impl Fn(&mut Tape, NodeId) -> NodeId + Copy, x: Tensor, tol: f64) {
        let mut ps = ParamSet::new();
        ps.add("x", x.clone()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(&ps, "x");
        let y = op(&mut tape, xn);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xn).unwrap().data().to_vec();
        let numeric = fd_grad(
            |t| {
                let mut tape = Tape::new();
                let xn = tape.leaf(t.clone());
                let y = op(&mut tape, xn);
                let loss = tape.mean_all(y);
                tape.value(loss).data()[0]
            },
            &x,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        let x = rng.normal_tensor(&[3, 4], 0.8);
        check_unary(|t, x| t.gelu(x), x.clone(), 1e-7);
        check_unary(|t, x| t.sigmoid(x), x.clone(), 1e-7);
        check_unary(|t, x| t.tanh(x), x.clone(), 1e-7);
        check_unary(|t, x| t.softmax_rows(x), x.clone(), 1e-7);
        check_unary(|t, x| t.scale(x, 1.7), x.clone(), 1e-7);
        check_unary(|t, x| t.transpose(x), x, 1e-7);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(6);
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let b = rng.normal_tensor(&[4, 2], 1.0);
        let mut ps = ParamSet::new();
        ps.add("a", a.clone()).unwrap();
        ps.add("b", b.clone()).unwrap();
        let mut tape = Tape::new();
        let an = tape.param(&ps, "a");
        let bn = tape.param(&ps, "b");
        let y = tape.matmul(an, bn);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).unwrap();

        let eval = |av: &Tensor, bv: &Tensor| {
            let mut t = Tape::new();
            let an = t.leaf(av.clone());
            let bn = t.leaf(bv.clone());
            let y = t.matmul(an, bn);
            let l = t.mean_all(y);
            t.value(l).data()[0]
        };
        let na = fd_grad(|t| eval(t, &b), &a, 1e-5);
        for (x, y) in grads.get(an).unwrap().data().iter().zip(&na) {
            assert!((x - y).abs() < 1e-8);
        }
        let nb = fd_grad(|t| eval(&a, t), &b, 1e-5);
        for (x, y) in grads.get(bn).unwrap().data().iter().zip(&nb) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(7);
        let x = rng.normal_tensor(&[4, 6], 1.0);
        let gain = rng.normal_tensor(&[1, 6], 0.5);
        let bias = rng.normal_tensor(&[1, 6], 0.5);
        let eval = |xv: &Tensor, gv: &Tensor, bv: &Tensor| {
            let mut t = Tape::new();
            let (x, g, b) = (t.leaf(xv.clone()), t.leaf(gv.clone()), t.leaf(bv.clone()));
            let y = t.layer_norm_rows(x, g, b);
            let sq = t.mul(y, y);
            let l = t.mean_all(sq);
            t.value(l).data()[0]
        };
        let mut ps = ParamSet::new();
        ps.add("x", x.clone()).unwrap();
        ps.add("g", gain.clone()).unwrap();
        ps.add("b", bias.clone()).unwrap();
        let mut tape = Tape::new();
        let (xn, gn, bn) = (
            tape.param(&ps, "x"),
            tape.param(&ps, "g"),
            tape.param(&ps, "b"),
        );
        let y = tape.layer_norm_rows(xn, gn, bn);
        let sq = tape.mul(y, y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        for (analytic, id, which) in [
            (grads.get(xn).unwrap(), 0, "x"),
            (grads.get(gn).unwrap(), 1, "gain"),
            (grads.get(bn).unwrap(), 2, "bias"),
        ] {
            let numeric = match id {
                0 => fd_grad(|t| eval(t, &gain, &bias), &x, 1e-5),
                1 => fd_grad(|t| eval(&x, t, &bias), &gain, 1e-5),
                _ => fd_grad(|t| eval(&x, &gain, t), &bias, 1e-5),
            };
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-7, "{which}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn conv_and_pool_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(8);
        let x = rng.normal_tensor(&[2, 4, 4], 1.0);
        let k = rng.normal_tensor(&[3, 2, 3, 3], 0.4);
        let b = rng.normal_tensor(&[3], 0.2);
        let eval = |xv: &Tensor, kv: &Tensor, bv: &Tensor| {
            let mut t = Tape::new();
            let (x, k, b) = (t.leaf(xv.clone()), t.leaf(kv.clone()), t.leaf(bv.clone()));
            let y = t.conv2d(x, k, b);
            let p = t.avg_pool2(y);
            let a = t.abs(p);
            let l = t.mean_all(a);
            t.value(l).data()[0]
        };
        let mut ps = ParamSet::new();
        ps.add("x", x.clone()).unwrap();
        ps.add("k", k.clone()).unwrap();
        ps.add("b", b.clone()).unwrap();
        let mut tape = Tape::new();
        let (xn, kn, bn) = (
            tape.param(&ps, "x"),
            tape.param(&ps, "k"),
            tape.param(&ps, "b"),
        );
        let y = tape.conv2d(xn, kn, bn);
        let p = tape.avg_pool2(y);
        let a = tape.abs(p);
        let loss = tape.mean_all(a);
        let grads = tape.backward(loss).unwrap();
        for (analytic, target) in [
            (grads.get(xn).unwrap(), "x"),
            (grads.get(kn).unwrap(), "k"),
            (grads.get(bn).unwrap(), "b"),
        ] {
            let numeric = match target {
                "x" => fd_grad(|t| eval(t, &k, &b), &x, 1e-5),
                "k" => fd_grad(|t| eval(&x, t, &b), &k, 1e-5),
                _ => fd_grad(|t| eval(&x, &k, t), &b, 1e-5),
            };
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-7, "{target}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn data_movement_ops_roundtrip_gradients() {
        let mut rng = SeededRng::new(9);
        let x = rng.normal_tensor(&[2, 4, 4], 1.0);
        let mut ps = ParamSet::new();
        ps.add("x", x.clone()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(&ps, "x");
        let patches = tape.extract_patches2(xn); // 4 x 8
        let grid = tape.tokens_to_grid(patches, 2, 2); // 8 x 2 x 2
        let loss = tape.mean_all(grid);
        let grads = tape.backward(loss).unwrap();
        // pure rearrangement: every input element contributes exactly once
        let expect = 1.0 / 32.0;
        for &v in grads.get(xn).unwrap().data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());

        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(1e308)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&ps, "w");
        let sq = tape.mul(w, w); // overflows to inf
        assert!(matches!(
            tape.backward(sq),
            Err(crate::error::Error::InvalidValue(_))
        ));
    }

    #[test]
    fn rebinding_same_parameter_reuses_node() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&ps, "w");
        let b = tape.param(&ps, "w");
        assert_eq!(a, b);
        let y = tape.mul(a, b); // w^2, dy/dw = 2w = 4
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data()[0], 4.0);
    }
}
