//! Reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is a tape of primitive ops: nodes are appended in evaluation
//! order, so indices are already a topological order and `backward` walks
//! them strictly in reverse. Accumulation order is therefore deterministic;
//! identical seeds and inputs reproduce forward and backward bitwise.

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, broadcast_shape, matmul_acc, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Softplus,
    Log,
    Exp,
    Sqrt,
    Abs,
    Sin,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

enum Op<T: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: NodeId,
    },
    /// `a * mul + add`, elementwise; only the slope matters in backward.
    Affine {
        a: NodeId,
        mul: T,
    },
    PowScalar {
        a: NodeId,
        exponent: T,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        a: NodeId,
        axis: usize,
        start: usize,
    },
    GatherRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    GatherCols {
        a: NodeId,
        idx: Vec<usize>,
    },
    GatherElems {
        a: NodeId,
        coords: Vec<(usize, usize)>,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    LayerNorm {
        a: NodeId,
        eps: T,
    },
    SumAxis {
        a: NodeId,
        axis: usize,
    },
    MeanAxis {
        a: NodeId,
        axis: usize,
    },
    SumAll {
        a: NodeId,
    },
    MeanAll {
        a: NodeId,
    },
    Dropout {
        a: NodeId,
        scale: Vec<T>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    BilinearSample {
        map: NodeId,
        points: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    train: bool,
    dropout_seed: u64,
    dropout_counter: u64,
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl<T: Scalar> Graph<T> {
    /// Inference-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
            dropout_seed: 0,
            dropout_counter: 0,
        }
    }

    /// Training-mode graph; dropout masks are derived from `seed` and a
    /// per-graph op counter, so a rebuilt graph replays the same masks.
    pub fn for_training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: true,
            dropout_seed: seed,
            dropout_counter: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    /// Forward copy that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.constant(v)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: NodeId) -> NodeId {
        let v = {
            let x = &self.nodes[a].value;
            match kind {
                UnaryKind::Neg => x.map(|v| -v),
                UnaryKind::Relu => x.map(|v| if v > T::ZERO { v } else { T::ZERO }),
                UnaryKind::Sigmoid => x.map(sigmoid_stable),
                UnaryKind::Softplus => x.map(softplus_stable),
                UnaryKind::Log => x.map(|v| v.ln()),
                UnaryKind::Exp => x.map(|v| v.exp()),
                UnaryKind::Sqrt => x.map(|v| v.sqrt()),
                UnaryKind::Abs => x.map(|v| v.abs()),
                UnaryKind::Sin => x.map(|v| v.sin()),
                UnaryKind::Cos => x.map(|v| v.cos()),
            }
        };
        let needs = self.needs(a);
        self.push(v, Op::Unary { kind, a }, needs)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Log, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sin, a)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Cos, a)
    }

    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let (m, c) = (T::from_f64(mul), T::from_f64(add));
        let v = self.nodes[a].value.map(|x| x * m + c);
        let needs = self.needs(a);
        self.push(v, Op::Affine { a, mul: m }, needs)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, 1.0, c)
    }

    /// Elementwise `a^e`. Negative base with a fractional exponent is a
    /// domain error; exponent 2 and similar integer cases are always safe.
    pub fn pow_scalar(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        let e = T::from_f64(exponent);
        if exponent.fract() != 0.0 {
            if let Some(v) = self.nodes[a].value.data().iter().find(|v| **v < T::ZERO) {
                return Err(Error::domain(
                    "pow",
                    format!("negative base {v} with fractional exponent {exponent}"),
                ));
            }
        }
        let v = self.nodes[a].value.map(|x| x.powf(e));
        let needs = self.needs(a);
        Ok(self.push(v, Op::PowScalar { a, exponent: e }, needs))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let f = binary_fn::<T>(kind);
        let v = crate::tensor::broadcast_binary(binary_name(kind), &self.nodes[a].value, &self.nodes[b].value, f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Binary { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Min, a, b)
    }
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = crate::tensor::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = crate::tensor::transpose2d(&self.nodes[a].value)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::Transpose { a }, needs))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a].value.reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::Reshape { a }, needs))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let rank = self.nodes[parts[0]].value.rank();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut out_shape = self.nodes[parts[0]].value.shape().to_vec();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(d, &x)| d != axis && x != out_shape[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("part shape {:?} incompatible with {:?}", s, out_shape),
                ));
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut data = vec![T::ZERO; out_shape.iter().product()];
        for o in 0..outer {
            let mut offset = 0usize;
            for &p in parts {
                let ps = self.nodes[p].value.shape();
                let plen = ps[axis] * inner;
                let src = &self.nodes[p].value.data()[o * plen..(o + 1) * plen];
                let dst_start = o * axis_total * inner + offset;
                data[dst_start..dst_start + plen].copy_from_slice(src);
                offset += plen;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[a].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let (outer, alen, inner) = axis_extents(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.nodes[a].value.data();
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let needs = self.needs(a);
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(v, Op::Narrow { a, axis, start }, needs))
    }

    /// Split along `axis` into parts with the given lengths.
    pub fn split(&mut self, a: NodeId, axis: usize, lens: &[usize]) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &len in lens {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        let total = self.nodes[a].value.shape()[axis];
        if start != total {
            return Err(Error::shape(
                "split",
                format!("lengths sum to {start}, axis has {total}"),
            ));
        }
        Ok(out)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rank() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("expected rank 2, got {:?}", v.shape()),
            ));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {bad} out of range 0..{r}"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[idx.len(), c], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rank() != 2 {
            return Err(Error::shape(
                "gather_cols",
                format!("expected rank 2, got {:?}", v.shape()),
            ));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape(
                "gather_cols",
                format!("col index {bad} out of range 0..{c}"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * r);
        for i in 0..r {
            for &j in idx {
                data.push(v.data()[i * c + j]);
            }
        }
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[r, idx.len()], data)?;
        Ok(self.push(
            t,
            Op::GatherCols {
                a,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn gather_elems(&mut self, a: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rank() != 2 {
            return Err(Error::shape(
                "gather_elems",
                format!("expected rank 2, got {:?}", v.shape()),
            ));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = coords.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::shape(
                "gather_elems",
                format!("coord {:?} out of range {r}x{c}", bad),
            ));
        }
        let data: Vec<T> = coords.iter().map(|&(i, j)| v.data()[i * c + j]).collect();
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[coords.len()], data)?;
        Ok(self.push(
            t,
            Op::GatherElems {
                a,
                coords: coords.to_vec(),
            },
            needs,
        ))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if axis >= v.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", v.shape()),
            ));
        }
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        if len == 0 {
            return Err(Error::shape("softmax", "empty axis".to_string()));
        }
        let mut out = Tensor::zeros(v.shape());
        let src = v.data();
        let dst = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = src[at(0)];
                for k in 1..len {
                    if src[at(k)] > mx {
                        mx = src[at(k)];
                    }
                }
                let mut sum = T::ZERO;
                for k in 0..len {
                    let e = (src[at(k)] - mx).exp();
                    dst[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    dst[at(k)] = dst[at(k)] / sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax { a, axis }, needs))
    }

    /// Normalize the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::domain("layer_norm", format!("eps {eps} must be > 0")));
        }
        let v = &self.nodes[a].value;
        if v.rank() == 0 || *v.shape().last().unwrap() == 0 {
            return Err(Error::shape("layer_norm", format!("bad shape {:?}", v.shape())));
        }
        let c = *v.shape().last().unwrap();
        let rows = v.numel() / c;
        let epst = T::from_f64(eps);
        let cn = T::from_f64(c as f64);
        let mut out = Tensor::zeros(v.shape());
        for r in 0..rows {
            let x = &v.data()[r * c..(r + 1) * c];
            let mut mean = T::ZERO;
            for &xi in x {
                mean += xi;
            }
            mean = mean / cn;
            let mut var = T::ZERO;
            for &xi in x {
                let d = xi - mean;
                var += d * d;
            }
            var = var / cn;
            let rstd = T::ONE / (var + epst).sqrt();
            let orow = &mut out.data_mut()[r * c..(r + 1) * c];
            for (oi, &xi) in orow.iter_mut().zip(x) {
                *oi = (xi - mean) * rstd;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, Op::LayerNorm { a, eps: epst }, needs))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if axis >= v.rank() {
            return Err(Error::shape(
                "reduce_axis",
                format!("axis {axis} out of range for {:?}", v.shape()),
            ));
        }
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        if len == 0 {
            return Err(Error::shape("reduce_axis", "empty axis".to_string()));
        }
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![T::ZERO; outer * inner];
        let src = v.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = T::ONE / T::from_f64(len as f64);
            for d in data.iter_mut() {
                *d = *d * inv;
            }
        }
        let needs = self.needs(a);
        let t = Tensor::from_vec(&out_shape, data)?;
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        Ok(self.push(t, op, needs))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for &x in self.nodes[a].value.data() {
            s += x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.numel();
        let mut s = T::ZERO;
        for &x in self.nodes[a].value.data() {
            s += x;
        }
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(s / T::from_f64(n as f64)),
            Op::MeanAll { a },
            needs,
        )
    }

    /// Inverted dropout. Identity when the graph is in inference mode or
    /// `p == 0`; in training mode the mask comes from the graph's counter,
    /// so rebuilding the same graph replays the same mask.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain("dropout", format!("p {p} outside [0,1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let n = self.nodes[a].value.numel();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(
            self.dropout_seed ^ self.dropout_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ));
        self.dropout_counter += 1;
        let keep = T::from_f64(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let v = {
            let x = &self.nodes[a].value;
            let data: Vec<T> = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
            Tensor::from_vec(x.shape(), data)?
        };
        let needs = self.needs(a);
        Ok(self.push(v, Op::Dropout { a, scale }, needs))
    }

    /// 2-D convolution: input `[Cin,H,W]`, kernel `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (ishape, kshape) = (
            self.nodes[input].value.shape().to_vec(),
            self.nodes[kernel].value.shape().to_vec(),
        );
        if ishape.len() != 3 || kshape.len() != 4 || ishape[0] != kshape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs kernel {:?}", ishape, kshape),
            ));
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} too large for padded {h}x{w} input"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let cols = im2col(
            self.nodes[input].value.data(),
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
        let mut out = vec![T::ZERO; cout * ho * wo];
        matmul_acc(
            self.nodes[kernel].value.data(),
            &cols,
            cout,
            cin * kh * kw,
            ho * wo,
            &mut out,
        );
        let needs = self.needs(input) || self.needs(kernel);
        let t = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Sample `map [d,H,W]` at continuous pixel coordinates `points [P,2]`
    /// (x, y per row) with 4-neighbor bilinear weights and zero padding
    /// outside the map. Differentiable w.r.t. both map and points.
    pub fn bilinear_sample(&mut self, map: NodeId, points: NodeId) -> Result<NodeId> {
        let (ms, ps) = (
            self.nodes[map].value.shape().to_vec(),
            self.nodes[points].value.shape().to_vec(),
        );
        if ms.len() != 3 || ms.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "bilinear_sample",
                format!("map must be non-empty [d,H,W], got {:?}", ms),
            ));
        }
        if ps.len() != 2 || ps[1] != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                format!("points must be [P,2], got {:?}", ps),
            ));
        }
        let (d, h, w) = (ms[0], ms[1], ms[2]);
        let p = ps[0];
        let mut out = vec![T::ZERO; p * d];
        let md = self.nodes[map].value.data();
        let pd = self.nodes[points].value.data();
        for pi in 0..p {
            let x = pd[pi * 2].to_f64();
            let y = pd[pi * 2 + 1].to_f64();
            for (xi, yi, wgt) in bilinear_corners(x, y, h, w) {
                let wt = T::from_f64(wgt);
                for c in 0..d {
                    out[pi * d + c] += wt * md[(c * h + yi) * w + xi];
                }
            }
        }
        let needs = self.needs(map) || self.needs(points);
        let t = Tensor::from_vec(&[p, d], out)?;
        Ok(self.push(t, Op::BilinearSample { map, points }, needs))
    }

    /// Reverse sweep accumulating gradients of scalar node `target`.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.nodes[target].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "target must be scalar, got {:?}",
                    self.nodes[target].value.shape()
                ),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[target] = Some(Tensor::scalar(T::ONE));
        for id in (0..=target).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], tid: NodeId, t: Tensor<T>| {
            match &mut grads[tid] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += *v;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let mut out = Tensor::zeros(x.shape());
                    let od = out.data_mut();
                    for i in 0..od.len() {
                        let gi = g.data()[i];
                        od[i] = match kind {
                            UnaryKind::Neg => -gi,
                            UnaryKind::Relu => {
                                if x.data()[i] > T::ZERO {
                                    gi
                                } else {
                                    T::ZERO
                                }
                            }
                            UnaryKind::Sigmoid => {
                                let yv = y.data()[i];
                                gi * yv * (T::ONE - yv)
                            }
                            UnaryKind::Softplus => gi * sigmoid_stable(x.data()[i]),
                            UnaryKind::Log => gi / x.data()[i],
                            UnaryKind::Exp => gi * y.data()[i],
                            UnaryKind::Sqrt => {
                                gi / (T::from_f64(2.0) * y.data()[i])
                            }
                            UnaryKind::Abs => {
                                let xv = x.data()[i];
                                if xv > T::ZERO {
                                    gi
                                } else if xv < T::ZERO {
                                    -gi
                                } else {
                                    T::ZERO
                                }
                            }
                            UnaryKind::Sin => gi * x.data()[i].cos(),
                            UnaryKind::Cos => -gi * x.data()[i].sin(),
                        };
                    }
                    acc(grads, *a, out);
                }
            }
            Op::Affine { a, mul } => {
                if self.needs(*a) {
                    let m = *mul;
                    acc(grads, *a, g.map(|gi| gi * m));
                }
            }
            Op::PowScalar { a, exponent } => {
                if self.needs(*a) {
                    let e = *exponent;
                    let x = &self.nodes[*a].value;
                    let mut out = Tensor::zeros(x.shape());
                    for i in 0..out.numel() {
                        out.data_mut()[i] =
                            g.data()[i] * e * x.data()[i].powf(e - T::ONE);
                    }
                    acc(grads, *a, out);
                }
            }
            Op::Binary { kind, a, b } => {
                let (da, db) = self.binary_backward(*kind, *a, *b, g)?;
                if self.needs(*a) {
                    acc(grads, *a, da);
                }
                if self.needs(*b) {
                    acc(grads, *b, db);
                }
            }
            Op::Matmul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.needs(*a) {
                    let bt = crate::tensor::transpose2d(bv)?;
                    acc(grads, *a, crate::tensor::matmul(g, &bt)?);
                }
                if self.needs(*b) {
                    let at = crate::tensor::transpose2d(av)?;
                    acc(grads, *b, crate::tensor::matmul(&at, g)?);
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    acc(grads, *a, crate::tensor::transpose2d(g)?);
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    acc(grads, *a, g.reshaped(self.nodes[*a].value.shape())?);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape();
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0usize;
                for &p in parts {
                    let ps = self.nodes[p].value.shape().to_vec();
                    let plen = ps[*axis] * inner;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * plen);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            data.extend_from_slice(&g.data()[base..base + plen]);
                        }
                        acc(grads, p, Tensor::from_vec(&ps, data)?);
                    }
                    offset += plen;
                }
            }
            Op::Narrow { a, axis, start } => {
                if self.needs(*a) {
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let (outer, alen, inner) = axis_extents(&ashape, *axis);
                    let len = self.nodes[id].value.shape()[*axis];
                    let mut out = Tensor::zeros(&ashape);
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        out.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(grads, *a, out);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let c = ashape[1];
                    let mut out = Tensor::zeros(&ashape);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            out.data_mut()[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    acc(grads, *a, out);
                }
            }
            Op::GatherCols { a, idx } => {
                if self.needs(*a) {
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let (r, c) = (ashape[0], ashape[1]);
                    let mut out = Tensor::zeros(&ashape);
                    for i in 0..r {
                        for (k, &j) in idx.iter().enumerate() {
                            out.data_mut()[i * c + j] += g.data()[i * idx.len() + k];
                        }
                    }
                    acc(grads, *a, out);
                }
            }
            Op::GatherElems { a, coords } => {
                if self.needs(*a) {
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let c = ashape[1];
                    let mut out = Tensor::zeros(&ashape);
                    for (k, &(i, j)) in coords.iter().enumerate() {
                        out.data_mut()[i * c + j] += g.data()[k];
                    }
                    acc(grads, *a, out);
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let (outer, len, inner) = axis_extents(y.shape(), *axis);
                    let mut out = Tensor::zeros(y.shape());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let mut dot = T::ZERO;
                            for k in 0..len {
                                dot += g.data()[at(k)] * y.data()[at(k)];
                            }
                            for k in 0..len {
                                out.data_mut()[at(k)] =
                                    y.data()[at(k)] * (g.data()[at(k)] - dot);
                            }
                        }
                    }
                    acc(grads, *a, out);
                }
            }
            Op::LayerNorm { a, eps } => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let c = *x.shape().last().unwrap();
                    let rows = x.numel() / c;
                    let cn = T::from_f64(c as f64);
                    let mut out = Tensor::zeros(x.shape());
                    for r in 0..rows {
                        let xs = &x.data()[r * c..(r + 1) * c];
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let gs = &g.data()[r * c..(r + 1) * c];
                        let mut mean = T::ZERO;
                        for &xi in xs {
                            mean += xi;
                        }
                        mean = mean / cn;
                        let mut var = T::ZERO;
                        for &xi in xs {
                            let d = xi - mean;
                            var += d * d;
                        }
                        var = var / cn;
                        let rstd = T::ONE / (var + *eps).sqrt();
                        let mut gmean = T::ZERO;
                        let mut gymean = T::ZERO;
                        for k in 0..c {
                            gmean += gs[k];
                            gymean += gs[k] * ys[k];
                        }
                        gmean = gmean / cn;
                        gymean = gymean / cn;
                        let orow = &mut out.data_mut()[r * c..(r + 1) * c];
                        for k in 0..c {
                            orow[k] = rstd * (gs[k] - gmean - ys[k] * gymean);
                        }
                    }
                    acc(grads, *a, out);
                }
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                if self.needs(*a) {
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let (outer, len, inner) = axis_extents(&ashape, *axis);
                    let scale = if matches!(self.nodes[id].op, Op::MeanAxis { .. }) {
                        T::ONE / T::from_f64(len as f64)
                    } else {
                        T::ONE
                    };
                    let mut out = Tensor::zeros(&ashape);
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i in 0..inner {
                                out.data_mut()[base + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                    acc(grads, *a, out);
                }
            }
            Op::SumAll { a } | Op::MeanAll { a } => {
                if self.needs(*a) {
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let n: usize = ashape.iter().product();
                    let scale = if matches!(self.nodes[id].op, Op::MeanAll { .. }) {
                        T::ONE / T::from_f64(n as f64)
                    } else {
                        T::ONE
                    };
                    let gv = g.item() * scale;
                    acc(grads, *a, Tensor::full(&ashape, gv));
                }
            }
            Op::Dropout { a, scale } => {
                if self.needs(*a) {
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(scale)
                        .map(|(&gi, &s)| gi * s)
                        .collect();
                    acc(
                        grads,
                        *a,
                        Tensor::from_vec(self.nodes[*a].value.shape(), data)?,
                    );
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let ishape = self.nodes[*input].value.shape().to_vec();
                let kshape = self.nodes[*kernel].value.shape().to_vec();
                let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                let (ho, wo) = {
                    let os = self.nodes[id].value.shape();
                    (os[1], os[2])
                };
                if self.needs(*kernel) {
                    let cols = im2col(
                        self.nodes[*input].value.data(),
                        cin,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        ho,
                        wo,
                    );
                    // dK = g_mat [cout, ho*wo] · colsᵀ [ho*wo, cin*kh*kw]
                    let colst = {
                        let t = Tensor::from_vec(&[cin * kh * kw, ho * wo], cols)?;
                        crate::tensor::transpose2d(&t)?
                    };
                    let mut dk = vec![T::ZERO; cout * cin * kh * kw];
                    matmul_acc(
                        g.data(),
                        colst.data(),
                        cout,
                        ho * wo,
                        cin * kh * kw,
                        &mut dk,
                    );
                    acc(grads, *kernel, Tensor::from_vec(&kshape, dk)?);
                }
                if self.needs(*input) {
                    // dcols = kernelᵀ [cin*kh*kw, cout] · g_mat [cout, ho*wo]
                    let kt = crate::tensor::transpose2d(&self.nodes[*kernel]
                        .value
                        .reshaped(&[cout, cin * kh * kw])?)?;
                    let mut dcols = vec![T::ZERO; cin * kh * kw * ho * wo];
                    matmul_acc(
                        kt.data(),
                        g.data(),
                        cin * kh * kw,
                        cout,
                        ho * wo,
                        &mut dcols,
                    );
                    let mut din = Tensor::zeros(&ishape);
                    col2im(
                        &dcols,
                        din.data_mut(),
                        cin,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        ho,
                        wo,
                    );
                    acc(grads, *input, din);
                }
            }
            Op::BilinearSample { map, points } => {
                let ms = self.nodes[*map].value.shape().to_vec();
                let (d, h, w) = (ms[0], ms[1], ms[2]);
                let pd = self.nodes[*points].value.data();
                let p = pd.len() / 2;
                let md = self.nodes[*map].value.data();
                if self.needs(*map) {
                    let mut dm = Tensor::zeros(&ms);
                    for pi in 0..p {
                        let x = pd[pi * 2].to_f64();
                        let y = pd[pi * 2 + 1].to_f64();
                        for (xi, yi, wgt) in bilinear_corners(x, y, h, w) {
                            let wt = T::from_f64(wgt);
                            for c in 0..d {
                                dm.data_mut()[(c * h + yi) * w + xi] += wt * g.data()[pi * d + c];
                            }
                        }
                    }
                    acc(grads, *map, dm);
                }
                if self.needs(*points) {
                    let mut dp = Tensor::zeros(&[p, 2]);
                    for pi in 0..p {
                        let x = pd[pi * 2].to_f64();
                        let y = pd[pi * 2 + 1].to_f64();
                        let (x0, y0) = (x.floor() as i64, y.floor() as i64);
                        let (wx, wy) = (x - x0 as f64, y - y0 as f64);
                        let sample = |xi: i64, yi: i64, c: usize| -> f64 {
                            if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                                0.0
                            } else {
                                md[(c * h + yi as usize) * w + xi as usize].to_f64()
                            }
                        };
                        let mut dx = 0.0f64;
                        let mut dy = 0.0f64;
                        for c in 0..d {
                            let gi = g.data()[pi * d + c].to_f64();
                            let f00 = sample(x0, y0, c);
                            let f10 = sample(x0 + 1, y0, c);
                            let f01 = sample(x0, y0 + 1, c);
                            let f11 = sample(x0 + 1, y0 + 1, c);
                            dx += gi * ((1.0 - wy) * (f10 - f00) + wy * (f11 - f01));
                            dy += gi * ((1.0 - wx) * (f01 - f00) + wx * (f11 - f10));
                        }
                        dp.data_mut()[pi * 2] = T::from_f64(dx);
                        dp.data_mut()[pi * 2 + 1] = T::from_f64(dy);
                    }
                    acc(grads, *points, dp);
                }
            }
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        g: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        if av.shape() == bv.shape() {
            let mut da = Tensor::zeros(av.shape());
            let mut db = Tensor::zeros(bv.shape());
            for i in 0..g.numel() {
                let (pa, pb) = binary_partials(kind, av.data()[i], bv.data()[i]);
                da.data_mut()[i] = g.data()[i] * pa;
                db.data_mut()[i] = g.data()[i] * pb;
            }
            return Ok((da, db));
        }
        let out_shape = broadcast_shape(binary_name(kind), av.shape(), bv.shape())?;
        let rank = out_shape.len();
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (sa, sb) = (pad(av.shape()), pad(bv.shape()));
        let stride = |s: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sta, stb) = (stride(&sa), stride(&sb));
        let mut da_full = Tensor::zeros(&sa);
        let mut db_full = Tensor::zeros(&sb);
        let mut idx = vec![0usize; rank];
        for io in 0..g.numel() {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                ia += idx[d] * sta[d];
                ib += idx[d] * stb[d];
            }
            let (pa, pb) = binary_partials(kind, av.data()[ia], bv.data()[ib]);
            da_full.data_mut()[ia] += g.data()[io] * pa;
            db_full.data_mut()[ib] += g.data()[io] * pb;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok((
            Tensor::from_vec(av.shape(), da_full.into_data())?,
            Tensor::from_vec(bv.shape(), db_full.into_data())?,
        ))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
        BinaryKind::Min => "min",
        BinaryKind::Max => "max",
    }
}

fn binary_fn<T: Scalar>(kind: BinaryKind) -> fn(T, T) -> T {
    match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
        BinaryKind::Div => |x, y| x / y,
        BinaryKind::Min => |x, y| x.minimum(y),
        BinaryKind::Max => |x, y| x.maximum(y),
    }
}

/// Partials (∂out/∂a, ∂out/∂b). Ties in min/max route to the first
/// argument: the one-sided subgradient convention, deterministic.
fn binary_partials<T: Scalar>(kind: BinaryKind, a: T, b: T) -> (T, T) {
    match kind {
        BinaryKind::Add => (T::ONE, T::ONE),
        BinaryKind::Sub => (T::ONE, -T::ONE),
        BinaryKind::Mul => (b, a),
        BinaryKind::Div => (T::ONE / b, -a / (b * b)),
        BinaryKind::Min => {
            if a <= b {
                (T::ONE, T::ZERO)
            } else {
                (T::ZERO, T::ONE)
            }
        }
        BinaryKind::Max => {
            if a >= b {
                (T::ONE, T::ZERO)
            } else {
                (T::ZERO, T::ONE)
            }
        }
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::ZERO; cin * kh * kw * ho * wo];
    for ci in 0..cin {
        for r in 0..kh {
            for c in 0..kw {
                let row = (ci * kh + r) * kw + c;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + r) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + c) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        dst[oy * wo + ox] = input[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    out: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for r in 0..kh {
            for c in 0..kw {
                let row = (ci * kh + r) * kw + c;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + r) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + c) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        out[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// In-bounds corners of the bilinear stencil at (x, y) with their weights.
fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (wx, wy) = (x - x0 as f64, y - y0 as f64);
    let mut out = Vec::with_capacity(4);
    for (dx, dy, wgt) in [
        (0i64, 0i64, (1.0 - wx) * (1.0 - wy)),
        (1, 0, wx * (1.0 - wy)),
        (0, 1, (1.0 - wx) * wy),
        (1, 1, wx * wy),
    ] {
        let (xi, yi) = (x0 + dx, y0 + dy);
        if xi >= 0 && yi >= 0 && xi < w as i64 && yi < h as i64 && wgt != 0.0 {
            out.push((xi as usize, yi as usize, wgt));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap(),
            false,
        );
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| v.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..3).all(|c| v.at2(r, c) >= 0.0));
        }
    }

    #[test]
    fn split_concat_roundtrip_exact() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let cat = g.concat(&[a, b], 1).unwrap();
        let parts = g.split(cat, 1, &[2, 3]).unwrap();
        assert_eq!(g.value(parts[0]).data(), g.value(a).data());
        assert_eq!(g.value(parts[1]).data(), g.value(b).data());
    }

    #[test]
    fn backward_through_mul_and_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dropout_identity_in_eval_mode() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_mask_replays_with_same_seed() {
        let run = || {
            let mut g = Graph::<f64>::for_training(7);
            let x = g.leaf(Tensor::full(&[32], 1.0), false);
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bilinear_center_of_2x2() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let pts = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap());
        let out = g.bilinear_sample(map, pts).unwrap();
        assert!((g.value(out).data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_on_grid_point_is_exact() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(
            Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap(),
        );
        let pts = g.constant(Tensor::from_vec(&[1, 2], vec![2.0, 1.0]).unwrap());
        let out = g.bilinear_sample(map, pts).unwrap();
        // map[c, y=1, x=2] = c*6 + 5
        assert_eq!(g.value(out).data(), &[5.0, 11.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let input = g.constant(Tensor::from_vec(&[1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap());
        let kernel = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let out = g.conv2d(input, kernel, 1, 0).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 3, 3]);
        assert_eq!(g.value(out).data(), g.value(input).data());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap(), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap(); // forward x², analytic grad should be x (detached factor)
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 3.0]);
    }
}
