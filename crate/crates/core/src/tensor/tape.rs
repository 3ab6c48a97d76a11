//! Computation record for reverse-mode differentiation. Forward ops push
//! nodes onto an arena and return [`ValueId`] handles; [`Tape::backward`]
//! replays the arena in reverse, accumulating gradients additively so a
//! value consumed by several ops (shared weights, repeated inputs)
//! collects every contribution.

use serde::{Deserialize, Serialize};

use super::kernels::{
    affine_backward_input, affine_backward_params, affine_forward, conv2d_backward_input,
    conv2d_backward_params, conv2d_forward, maxpool_forward, maxpool_min_top2_gap, ConvDims,
};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Optional nonlinearity applied by a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d {
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        dims: ConvDimsOpaque,
    },
    MaxPool2d {
        input: ValueId,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    GlobalAveragePool {
        input: ValueId,
    },
    Flatten {
        input: ValueId,
    },
    Affine {
        input: ValueId,
        weights: ValueId,
        bias: ValueId,
    },
    Relu {
        input: ValueId,
    },
    L2Normalize {
        input: ValueId,
        norm: Real,
        eps: Real,
    },
    Concatenate {
        inputs: Vec<ValueId>,
    },
    EuclideanDistance {
        a: ValueId,
        b: ValueId,
        distance: Real,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    AddScalar {
        input: ValueId,
    },
    MulScalar {
        input: ValueId,
        factor: Real,
    },
    ElemMul {
        a: ValueId,
        b: ValueId,
    },
    SumAll {
        input: ValueId,
    },
    MeanAll {
        input: ValueId,
    },
    Slice {
        input: ValueId,
        start: usize,
    },
    Reshape {
        input: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        label: usize,
        softmax: Vec<Real>,
    },
}

// ConvDims is crate-private; wrap it so Op can stay public.
#[derive(Debug, Clone)]
pub struct ConvDimsOpaque(pub(crate) ConvDims);

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(ValueId)) {
        match self {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => {
                f(*input);
                f(*kernels);
                f(*bias);
            }
            Op::Affine {
                input,
                weights,
                bias,
            } => {
                f(*input);
                f(*weights);
                f(*bias);
            }
            Op::MaxPool2d { input, .. }
            | Op::GlobalAveragePool { input }
            | Op::Flatten { input }
            | Op::Relu { input }
            | Op::L2Normalize { input, .. }
            | Op::AddScalar { input }
            | Op::MulScalar { input, .. }
            | Op::SumAll { input }
            | Op::MeanAll { input }
            | Op::Slice { input, .. }
            | Op::Reshape { input } => f(*input),
            Op::Concatenate { inputs } => inputs.iter().copied().for_each(f),
            Op::EuclideanDistance { a, b, .. } | Op::Sub { a, b } | Op::ElemMul { a, b } => {
                f(*a);
                f(*b);
            }
            Op::SoftmaxCrossEntropy { logits, .. } => f(*logits),
        }
    }
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Arena of values plus the op that produced each one.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf (an input or a parameter).
    pub fn leaf(&mut self, tensor: Tensor) -> ValueId {
        self.push(tensor, Op::Leaf)
    }

    pub fn tensor(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: ValueId) -> &[Real] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// First element of a value; meant for scalar results.
    pub fn scalar_value(&self, id: ValueId) -> Real {
        self.nodes[id.0].tensor.data()[0]
    }

    /// Gradient of the last `backward` target w.r.t. this value, if the
    /// value requires gradients.
    pub fn grad(&self, id: ValueId) -> Option<&[Real]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { tensor, op });
        ValueId(self.nodes.len() - 1)
    }

    fn rank3(&self, op: &'static str, id: ValueId) -> Result<(usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 3 {
            return Err(Error::shape(op, format!("expected rank-3 input, got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn rank1(&self, op: &'static str, id: ValueId) -> Result<usize> {
        let s = self.shape(id);
        if s.len() != 1 {
            return Err(Error::shape(op, format!("expected rank-1 input, got {s:?}")));
        }
        Ok(s[0])
    }

    /// 2-D convolution with zero padding. Input `[H, W, Cin]`, kernels
    /// `[Kh, Kw, Cin, Cout]`, bias `[Cout]`; output spatial extent is
    /// `floor((H + 2*padding - Kh) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let (h, w, cin) = self.rank3("conv2d", input)?;
        let ks = self.shape(kernels);
        if ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be rank 4, got {ks:?}"),
            ));
        }
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel channels {kcin} do not match input channels {cin}"),
            ));
        }
        let bn = self.rank1("conv2d", bias)?;
        if bn != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {bn} does not match output channels {cout}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (padding {padding})"),
            ));
        }
        let dims = ConvDims::new(h, w, cin, kh, kw, cout, stride, padding);
        let mut out = Tensor::zeros([dims.oh, dims.ow, cout]);
        conv2d_forward(
            &dims,
            self.value(input),
            self.value(kernels),
            self.value(bias),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                dims: ConvDimsOpaque(dims),
            },
        ))
    }

    /// Max pooling over square windows, no padding. Ties route the
    /// gradient to the lowest flat input index.
    pub fn maxpool2d(&mut self, input: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let (h, w, c) = self.rank3("maxpool2d", input)?;
        if window == 0 || stride == 0 {
            return Err(Error::shape(
                "maxpool2d",
                "window and stride must be positive",
            ));
        }
        if window > h || window > w {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} exceeds input {h}x{w}"),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Tensor::zeros([oh, ow, c]);
        let mut argmax = vec![0usize; oh * ow * c];
        maxpool_forward(
            h,
            w,
            c,
            window,
            stride,
            self.value(input),
            out.data_mut(),
            &mut argmax,
        );
        Ok(self.push(
            out,
            Op::MaxPool2d {
                input,
                window,
                stride,
                argmax,
            },
        ))
    }

    /// Spatial mean per channel: `[H, W, C] -> [C]`.
    pub fn global_average_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let (h, w, c) = self.rank3("global_average_pool", input)?;
        let data = self.value(input);
        let inv = 1.0 / (h * w) as Real;
        let mut out = vec![0.0; c];
        for hw in 0..h * w {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += data[hw * c + ch];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let t = Tensor::new(vec![c], out)?;
        Ok(self.push(t, Op::GlobalAveragePool { input }))
    }

    /// `[H, W, C] -> [H*W*C]`, preserving the row-major channel-fastest
    /// order: element (h, w, c) lands at `(h*W + w)*C + c`.
    pub fn flatten(&mut self, input: ValueId) -> Result<ValueId> {
        let (h, w, c) = self.rank3("flatten", input)?;
        let t = Tensor::new(vec![h * w * c], self.value(input).to_vec())?;
        Ok(self.push(t, Op::Flatten { input }))
    }

    /// Affine map with optional relu. Input `[N]`, weights `[N, M]`,
    /// bias `[M]`.
    pub fn fully_connected(
        &mut self,
        input: ValueId,
        weights: ValueId,
        bias: ValueId,
        activation: Activation,
    ) -> Result<ValueId> {
        let n = self.rank1("fully_connected", input)?;
        let ws = self.shape(weights);
        if ws.len() != 2 || ws[0] != n {
            return Err(Error::shape(
                "fully_connected",
                format!("weights {ws:?} do not match input length {n}"),
            ));
        }
        let m = ws[1];
        let bn = self.rank1("fully_connected", bias)?;
        if bn != m {
            return Err(Error::shape(
                "fully_connected",
                format!("bias length {bn} does not match output width {m}"),
            ));
        }
        let mut out = Tensor::zeros([m]);
        affine_forward(
            n,
            m,
            self.value(input),
            self.value(weights),
            self.value(bias),
            out.data_mut(),
        );
        let affine = self.push(
            out,
            Op::Affine {
                input,
                weights,
                bias,
            },
        );
        match activation {
            Activation::Linear => Ok(affine),
            Activation::Relu => Ok(self.relu(affine)),
        }
    }

    /// Elementwise `max(0, x)`. The subgradient at 0 is taken as 0.
    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let t = &self.nodes[input.0].tensor;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape as input");
        self.push(out, Op::Relu { input })
    }

    /// Scale a rank-1 vector to unit Euclidean norm. Inputs with norm at
    /// most `eps` map to the zero vector (with zero gradient).
    pub fn l2_normalize(&mut self, input: ValueId, eps: Real) -> Result<ValueId> {
        let n = self.rank1("l2_normalize", input)?;
        let data = self.value(input);
        let norm = data.iter().map(|&v| v * v).sum::<Real>().sqrt();
        let out = if norm > eps {
            data.iter().map(|&v| v / norm).collect()
        } else {
            vec![0.0; n]
        };
        let t = Tensor::new(vec![n], out)?;
        Ok(self.push(t, Op::L2Normalize { input, norm, eps }))
    }

    /// Concatenate rank-1 vectors in order.
    pub fn concatenate(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("concatenate", "no inputs given"));
        }
        let mut data = Vec::new();
        for &id in inputs {
            self.rank1("concatenate", id)?;
            data.extend_from_slice(self.value(id));
        }
        let t = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(
            t,
            Op::Concatenate {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Euclidean distance between two equally sized rank-1 vectors,
    /// returned as a scalar. The gradient at distance 0 is defined as the
    /// zero vector.
    pub fn euclidean_distance(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let na = self.rank1("euclidean_distance", a)?;
        let nb = self.rank1("euclidean_distance", b)?;
        if na != nb {
            return Err(Error::shape(
                "euclidean_distance",
                format!("length mismatch: {na} vs {nb}"),
            ));
        }
        let distance = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<Real>()
            .sqrt();
        Ok(self.push(
            Tensor::scalar(distance),
            Op::EuclideanDistance { a, b, distance },
        ))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn add_scalar(&mut self, input: ValueId, value: Real) -> ValueId {
        let t = &self.nodes[input.0].tensor;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v + value).collect(),
        )
        .expect("same shape as input");
        self.push(out, Op::AddScalar { input })
    }

    pub fn mul_scalar(&mut self, input: ValueId, factor: Real) -> ValueId {
        let t = &self.nodes[input.0].tensor;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape as input");
        self.push(out, Op::MulScalar { input, factor })
    }

    pub fn elem_mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "elem_mul",
                format!("shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(t, Op::ElemMul { a, b }))
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let s: Real = self.value(input).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { input })
    }

    pub fn mean_all(&mut self, input: ValueId) -> ValueId {
        let data = self.value(input);
        let m = data.iter().sum::<Real>() / data.len() as Real;
        self.push(Tensor::scalar(m), Op::MeanAll { input })
    }

    /// Contiguous sub-range of a rank-1 vector.
    pub fn slice(&mut self, input: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let n = self.rank1("slice", input)?;
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} out of bounds for length {n}", start + len),
            ));
        }
        let t = Tensor::new(vec![len], self.value(input)[start..start + len].to_vec())?;
        Ok(self.push(t, Op::Slice { input, start }))
    }

    /// View a value under a different shape with the same element count.
    pub fn reshape(&mut self, input: ValueId, shape: impl Into<Vec<usize>>) -> Result<ValueId> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.value(input).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let t = Tensor::new(shape, self.value(input).to_vec())?;
        Ok(self.push(t, Op::Reshape { input }))
    }

    /// Cross-entropy of a softmax over `logits` against a hard label,
    /// stabilized by max subtraction. Gradient w.r.t. the logits is
    /// `softmax - onehot(label)`.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, label: usize) -> Result<ValueId> {
        let k = self.rank1("softmax_cross_entropy", logits)?;
        if label >= k {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let exps: Vec<Real> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: Real = exps.iter().sum();
        let softmax: Vec<Real> = exps.iter().map(|&e| e / total).collect();
        let loss = total.ln() - (z[label] - max);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively
    /// into every tensor that requires them; a fresh backward call
    /// replaces previously stored gradients.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.shape(loss)
                ),
            ));
        }
        let n = self.nodes.len();
        // A node needs a gradient if anything at or below it requires one.
        let mut needs = vec![false; n];
        for i in 0..n {
            let mut any = self.nodes[i].tensor.requires_grad();
            self.nodes[i].op.for_each_input(|id| any |= needs[id.0]);
            needs[i] = any;
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !needs[loss.0] {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<Real>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut store: Vec<(usize, Vec<Real>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            let add = |grads: &mut Vec<Option<Vec<Real>>>, id: ValueId, len: usize| -> () {
                if grads[id.0].is_none() {
                    grads[id.0] = Some(vec![0.0; len]);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    dims,
                } => {
                    let d = &dims.0;
                    if needs[input.0] {
                        add(&mut grads, *input, d.h * d.w * d.cin);
                        conv2d_backward_input(
                            d,
                            self.nodes[kernels.0].tensor.data(),
                            &g,
                            grads[input.0].as_mut().unwrap(),
                        );
                    }
                    if needs[kernels.0] || needs[bias.0] {
                        add(&mut grads, *kernels, d.kh * d.kw * d.cin * d.cout);
                        add(&mut grads, *bias, d.cout);
                        let (dk, db) = split_two(&mut grads, kernels.0, bias.0);
                        conv2d_backward_params(d, self.nodes[input.0].tensor.data(), &g, dk, db);
                    }
                }
                Op::MaxPool2d { input, argmax, .. } => {
                    if needs[input.0] {
                        add(&mut grads, *input, self.nodes[input.0].tensor.numel());
                        let gi = grads[input.0].as_mut().unwrap();
                        for (o, &idx) in argmax.iter().enumerate() {
                            gi[idx] += g[o];
                        }
                    }
                }
                Op::GlobalAveragePool { input } => {
                    if needs[input.0] {
                        let shape = self.nodes[input.0].tensor.shape();
                        let (h, w, c) = (shape[0], shape[1], shape[2]);
                        let inv = 1.0 / (h * w) as Real;
                        add(&mut grads, *input, h * w * c);
                        let gi = grads[input.0].as_mut().unwrap();
                        for hw in 0..h * w {
                            for ch in 0..c {
                                gi[hw * c + ch] += g[ch] * inv;
                            }
                        }
                    }
                }
                Op::Flatten { input } | Op::Reshape { input } => {
                    if needs[input.0] {
                        add(&mut grads, *input, g.len());
                        let gi = grads[input.0].as_mut().unwrap();
                        for (dst, src) in gi.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::Affine {
                    input,
                    weights,
                    bias,
                } => {
                    let n_dim = self.nodes[input.0].tensor.numel();
                    let m_dim = g.len();
                    if needs[input.0] {
                        add(&mut grads, *input, n_dim);
                        affine_backward_input(
                            n_dim,
                            m_dim,
                            self.nodes[weights.0].tensor.data(),
                            &g,
                            grads[input.0].as_mut().unwrap(),
                        );
                    }
                    if needs[weights.0] || needs[bias.0] {
                        add(&mut grads, *weights, n_dim * m_dim);
                        add(&mut grads, *bias, m_dim);
                        let (dw, db) = split_two(&mut grads, weights.0, bias.0);
                        affine_backward_params(
                            n_dim,
                            m_dim,
                            self.nodes[input.0].tensor.data(),
                            &g,
                            dw,
                            db,
                        );
                    }
                }
                Op::Relu { input } => {
                    if needs[input.0] {
                        let x = self.nodes[input.0].tensor.data();
                        add(&mut grads, *input, x.len());
                        let gi = grads[input.0].as_mut().unwrap();
                        for j in 0..x.len() {
                            if x[j] > 0.0 {
                                gi[j] += g[j];
                            }
                        }
                    }
                }
                Op::L2Normalize { input, norm, eps } => {
                    if needs[input.0] {
                        let x = self.nodes[input.0].tensor.data();
                        add(&mut grads, *input, x.len());
                        if *norm > *eps {
                            // d(x/|x|) = g/|x| - x (x.g) / |x|^3
                            let dot: Real = x.iter().zip(&g).map(|(&xi, &gi)| xi * gi).sum();
                            let inv = 1.0 / norm;
                            let scale = dot * inv * inv * inv;
                            let gi = grads[input.0].as_mut().unwrap();
                            for j in 0..x.len() {
                                gi[j] += g[j] * inv - x[j] * scale;
                            }
                        }
                    }
                }
                Op::Concatenate { inputs } => {
                    let mut offset = 0;
                    for &part in inputs {
                        let len = self.nodes[part.0].tensor.numel();
                        if needs[part.0] {
                            add(&mut grads, part, len);
                            let gp = grads[part.0].as_mut().unwrap();
                            for j in 0..len {
                                gp[j] += g[offset + j];
                            }
                        }
                        offset += len;
                    }
                }
                Op::EuclideanDistance { a, b, distance } => {
                    if *distance > 0.0 {
                        let xa = self.nodes[a.0].tensor.data();
                        let xb = self.nodes[b.0].tensor.data();
                        let scale = g[0] / distance;
                        if needs[a.0] {
                            add(&mut grads, *a, xa.len());
                            let ga = grads[a.0].as_mut().unwrap();
                            for j in 0..xa.len() {
                                ga[j] += scale * (xa[j] - xb[j]);
                            }
                        }
                        if needs[b.0] {
                            add(&mut grads, *b, xb.len());
                            let gb = grads[b.0].as_mut().unwrap();
                            for j in 0..xb.len() {
                                gb[j] -= scale * (xa[j] - xb[j]);
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if needs[a.0] {
                        add(&mut grads, *a, g.len());
                        let ga = grads[a.0].as_mut().unwrap();
                        for (dst, src) in ga.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if needs[b.0] {
                        add(&mut grads, *b, g.len());
                        let gb = grads[b.0].as_mut().unwrap();
                        for (dst, src) in gb.iter_mut().zip(&g) {
                            *dst -= src;
                        }
                    }
                }
                Op::AddScalar { input } => {
                    if needs[input.0] {
                        add(&mut grads, *input, g.len());
                        let gi = grads[input.0].as_mut().unwrap();
                        for (dst, src) in gi.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::MulScalar { input, factor } => {
                    if needs[input.0] {
                        add(&mut grads, *input, g.len());
                        let gi = grads[input.0].as_mut().unwrap();
                        for (dst, src) in gi.iter_mut().zip(&g) {
                            *dst += factor * src;
                        }
                    }
                }
                Op::ElemMul { a, b } => {
                    let xa = self.nodes[a.0].tensor.data();
                    let xb = self.nodes[b.0].tensor.data();
                    if needs[a.0] {
                        add(&mut grads, *a, g.len());
                        let ga = grads[a.0].as_mut().unwrap();
                        for j in 0..g.len() {
                            ga[j] += g[j] * xb[j];
                        }
                    }
                    if needs[b.0] {
                        add(&mut grads, *b, g.len());
                        let gb = grads[b.0].as_mut().unwrap();
                        for j in 0..g.len() {
                            gb[j] += g[j] * xa[j];
                        }
                    }
                }
                Op::SumAll { input } => {
                    if needs[input.0] {
                        let len = self.nodes[input.0].tensor.numel();
                        add(&mut grads, *input, len);
                        let gi = grads[input.0].as_mut().unwrap();
                        for dst in gi.iter_mut() {
                            *dst += g[0];
                        }
                    }
                }
                Op::MeanAll { input } => {
                    if needs[input.0] {
                        let len = self.nodes[input.0].tensor.numel();
                        add(&mut grads, *input, len);
                        let scale = g[0] / len as Real;
                        let gi = grads[input.0].as_mut().unwrap();
                        for dst in gi.iter_mut() {
                            *dst += scale;
                        }
                    }
                }
                Op::Slice { input, start } => {
                    if needs[input.0] {
                        let len = self.nodes[input.0].tensor.numel();
                        add(&mut grads, *input, len);
                        let gi = grads[input.0].as_mut().unwrap();
                        for (j, src) in g.iter().enumerate() {
                            gi[start + j] += src;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    softmax,
                } => {
                    if needs[logits.0] {
                        add(&mut grads, *logits, softmax.len());
                        let gl = grads[logits.0].as_mut().unwrap();
                        for j in 0..softmax.len() {
                            let onehot = if j == *label { 1.0 } else { 0.0 };
                            gl[j] += g[0] * (softmax[j] - onehot);
                        }
                    }
                }
            }
            if node.tensor.requires_grad() {
                store.push((i, g));
            }
        }
        for (i, g) in store {
            self.nodes[i].tensor.grad = Some(g);
        }
        // A grad-requiring value the loss never reached (dead branch,
        // kinked op at its zero point) still gets an explicit zero
        // gradient rather than a missing one.
        for node in &mut self.nodes {
            if node.tensor.requires_grad() && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            }
        }
        Ok(())
    }

    /// Distance of the recorded forward pass from the nearest
    /// non-differentiable point: min over relu pre-activation magnitudes,
    /// max-pool top-2 gaps, Euclidean distances, and l2 norms. `None` when
    /// the tape has no kinked op.
    pub fn min_kink_margin(&self) -> Option<Real> {
        let mut margin: Option<Real> = None;
        let mut fold = |v: Real| margin = Some(margin.map_or(v, |m| m.min(v)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &x in self.nodes[input.0].tensor.data() {
                        fold(x.abs());
                    }
                }
                Op::MaxPool2d {
                    input,
                    window,
                    stride,
                    ..
                } => {
                    let s = self.nodes[input.0].tensor.shape();
                    if let Some(gap) = maxpool_min_top2_gap(
                        s[0],
                        s[1],
                        s[2],
                        *window,
                        *stride,
                        self.nodes[input.0].tensor.data(),
                    ) {
                        fold(gap);
                    }
                }
                Op::EuclideanDistance { distance, .. } => fold(*distance),
                Op::L2Normalize { norm, .. } => fold(*norm),
                _ => {}
            }
        }
        margin
    }
}

/// Disjoint mutable borrows of two gradient slots, returned in argument
/// order. Callers guarantee `first != second` and that both slots are
/// populated.
fn split_two(
    grads: &mut [Option<Vec<Real>>],
    first: usize,
    second: usize,
) -> (&mut Vec<Real>, &mut Vec<Real>) {
    assert_ne!(first, second);
    if first < second {
        let (left, right) = grads.split_at_mut(second);
        (left[first].as_mut().unwrap(), right[0].as_mut().unwrap())
    } else {
        let (left, right) = grads.split_at_mut(first);
        (right[0].as_mut().unwrap(), left[second].as_mut().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<Real>, grad: bool) -> ValueId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(grad))
    }

    #[test]
    fn conv_1x1_is_scalar_affine() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 1, 1], vec![2.0], true);
        let w = leaf(&mut tape, vec![1, 1, 1, 1], vec![5.0], true);
        let b = leaf(&mut tape, vec![1], vec![1.0], true);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[11.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert_eq!(tape.grad(w).unwrap(), &[2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn conv_window_sums() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 3, 1], vec![1.0; 9], false);
        let w = leaf(&mut tape, vec![2, 2, 1, 1], vec![1.0; 4], false);
        let b = leaf(&mut tape, vec![1], vec![0.0], false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 1]);
        assert_eq!(tape.value(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_padding_grows_output() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 3, 1], vec![1.0; 9], false);
        let w = leaf(&mut tape, vec![3, 3, 1, 1], vec![1.0; 9], false);
        let b = leaf(&mut tape, vec![1], vec![0.0], false);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 3, 1]);
        // Center window sees all nine ones; the corner only four.
        assert_eq!(tape.value(y)[4], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 3, 2], vec![0.0; 18], false);
        let w = leaf(&mut tape, vec![2, 2, 3, 1], vec![0.0; 12], false);
        let b = leaf(&mut tape, vec![1], vec![0.0], false);
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_picks_lowest_flat_index() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2, 1], vec![7.0, 7.0, 7.0, 7.0], true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_averages_per_channel() {
        let mut tape = Tape::new();
        // channel 0: [[1,2],[3,4]], channel 1: zeros
        let x = leaf(
            &mut tape,
            vec![2, 2, 2],
            vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0],
            true,
        );
        let y = tape.global_average_pool(x).unwrap();
        assert_eq!(tape.value(y), &[2.5, 0.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn flatten_order_is_channel_fastest() {
        let mut tape = Tape::new();
        let t = Tensor::from_fn([2, 2, 3], |i| i as Real);
        let marker = t.at3(1, 0, 2);
        let x = tape.leaf(t);
        let y = tape.flatten(x).unwrap();
        assert_eq!(tape.value(y)[(1 * 2 + 0) * 3 + 2], marker);
    }

    #[test]
    fn fc_identity_passes_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, -2.0, 3.0], false);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = leaf(&mut tape, vec![3, 3], eye, false);
        let b = leaf(&mut tape, vec![3], vec![0.0; 3], false);
        let y = tape.fully_connected(x, w, b, Activation::Linear).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.0]);
        let r = tape.fully_connected(x, w, b, Activation::Relu).unwrap();
        assert_eq!(tape.value(r), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![3.0, 4.0], false);
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_zero_vector_maps_to_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0; 3], true);
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn concatenate_splits_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0], true);
        let b = leaf(&mut tape, vec![1], vec![3.0], true);
        let y = tape.concatenate(&[a, b]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
        let two = tape.mul_scalar(y, 2.0);
        let loss = tape.sum_all(two);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn euclidean_three_four_five() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![0.0, 0.0], true);
        let b = leaf(&mut tape, vec![2], vec![3.0, 4.0], true);
        let d = tape.euclidean_distance(a, b).unwrap();
        assert!((tape.scalar_value(d) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn euclidean_zero_distance_has_zero_grad() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0], true);
        let b = leaf(&mut tape, vec![2], vec![1.0, 2.0], true);
        let d = tape.euclidean_distance(a, b).unwrap();
        assert_eq!(tape.scalar_value(d), 0.0);
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn square_loss_grad_is_two_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0], true);
        let loss = tape.elem_mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_leaf_accumulates_from_all_uses() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x = 3
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0], true);
        let sq = tape.elem_mul(x, x).unwrap();
        let sum = tape.concatenate(&[sq, x]).unwrap();
        let loss = tape.sum_all(sum);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![2], vec![0.0, 0.0], true);
        let loss = tape.softmax_cross_entropy(z, 0).unwrap();
        assert!((tape.scalar_value(loss) - (2.0 as Real).ln()).abs() < 1e-6);
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-6 && (g[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_huge_margin_is_near_zero() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![3], vec![1000.0, 0.0, 0.0], false);
        let loss = tape.softmax_cross_entropy(z, 0).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
        assert!(tape.scalar_value(loss).is_finite());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0], true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn slice_routes_gradient_into_range() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![1.0, 2.0, 3.0, 4.0], true);
        let s = tape.slice(x, 1, 2).unwrap();
        assert_eq!(tape.value(s), &[2.0, 3.0]);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn kink_margin_sees_relu_and_pool() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2, 1], vec![0.005, 1.0, -2.0, 3.0], false);
        let r = tape.relu(x);
        let _ = tape.maxpool2d(r, 2, 2).unwrap();
        let margin = tape.min_kink_margin().unwrap();
        assert!((margin - 0.005).abs() < 1e-9);
    }
}
