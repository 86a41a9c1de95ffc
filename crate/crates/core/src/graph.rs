//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! Each training step builds a fresh [`Graph`]: parameters enter as leaves,
//! ops compute values eagerly and record enough context for the backward
//! pass, and `backward` walks the tape in reverse insertion order. The op
//! set is exactly what the backbone, relation heads, and loss stack need;
//! it is not a general tensor library.
//!
//! Detached teacher branches are handled by [`TeacherCache`]: values cross
//! back into the graph as gradient-free constants, and a record/replay mode
//! lets a finite-difference harness hold teachers fixed while parameters
//! are perturbed.

use crate::error::{Result, TorsdError};
use crate::tensor::{shape_str, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    needs_grad: bool,
    op: Op<E>,
}

enum Op<E: Element> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<E>,
        invstd: Vec<E>,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        x: NodeId,
        mul: E,
    },
    ConcatAxis1 {
        a: NodeId,
        b: NodeId,
    },
    SelectStride {
        x: NodeId,
        offset: usize,
        step: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    RowSum {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, E)>,
    },
    Reshape {
        x: NodeId,
    },
    /// Mean over rows of `-sum_c target * log softmax(logits)`.
    SoftCeMean {
        logits: NodeId,
        probs: Tensor<E>,
        target: Tensor<E>,
    },
    /// Mean over rows of `KL(teacher_probs || softmax(student / t))`.
    KlMean {
        student: NodeId,
        student_probs: Tensor<E>,
        teacher_probs: Tensor<E>,
        inv_t: E,
    },
}

/// Reverse-mode tape. Built fresh for every forward pass.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf excluded from gradient computation (an input or detached value).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, id: NodeId) -> E {
        self.nodes[id.0].value.item()
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.nodes[id.0].grad.as_ref()
    }

    // ---- ops -------------------------------------------------------------

    /// 2-D convolution, NCHW layout, with optional bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
        );
        let bs = match b {
            Some(b) => self.value(b).shape().to_vec(),
            None => vec![ws[0]],
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TorsdError::shape(
                format!("x[N,{},H,W] w[Co,{},kh,kw] b[Co]", ws.get(1).copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)),
                format!("x{} w{} b{}", shape_str(&xs), shape_str(&ws), shape_str(&bs)),
            ));
        }
        let (n, ci, h, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || width + 2 * pad < kw {
            return Err(TorsdError::shape(
                format!("input at least {}x{} with pad {}", kh, kw, pad),
                format!("{}x{}", h, width),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (width + 2 * pad - kw) / stride + 1;

        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd: Option<&[E]> = b.map(|b| self.nodes[b.0].value.data());
            let yd = y.data_mut();
            for in_ in 0..n {
                for oc in 0..co {
                    let y_base = (in_ * co + oc) * ho * wo;
                    let bias = bd.map_or(E::ZERO, |bd| bd[oc]);
                    for v in &mut yd[y_base..y_base + ho * wo] {
                        *v = bias;
                    }
                    for ic in 0..ci {
                        let x_base = (in_ * ci + ic) * h * width;
                        let w_base = (oc * ci + ic) * kh * kw;
                        for dkh in 0..kh {
                            for dkw in 0..kw {
                                let wv = wd[w_base + dkh * kw + dkw];
                                for oh in 0..ho {
                                    let ih = (oh * stride + dkh) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let x_row = x_base + ih as usize * width;
                                    let y_row = y_base + oh * wo;
                                    for ow in 0..wo {
                                        let iw = (ow * stride + dkw) as isize - pad as isize;
                                        if iw < 0 || iw >= width as isize {
                                            continue;
                                        }
                                        yd[y_row + ow] += wv * xd[x_row + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, needs, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Fully connected layer: `y = x wᵀ + b` with `x: [N, I]`, `w: [O, I]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TorsdError::shape(
                "x[N,I] w[O,I] b[O]",
                format!("x{} w{} b{}", shape_str(&xs), shape_str(&ws), shape_str(&bs)),
            ));
        }
        let (n, i) = (xs[0], xs[1]);
        let o = ws[0];
        let mut y = Tensor::zeros(&[n, o]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let yd = y.data_mut();
            for r in 0..n {
                let x_row = &xd[r * i..(r + 1) * i];
                for c in 0..o {
                    let w_row = &wd[c * i..(c + 1) * i];
                    let mut acc = bd[c];
                    for k in 0..i {
                        acc += x_row[k] * w_row[k];
                    }
                    yd[r * o + c] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, needs, Op::Linear { x, w, b }))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// In training mode normalizes with batch statistics and returns the
    /// updated running stats (biased batch variance is used for
    /// normalization, the unbiased estimate for the running update). In
    /// eval mode normalizes with the supplied running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
        training: bool,
        update_stats: bool,
        momentum: E,
        eps: E,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(TorsdError::shape("x[N,C,H,W]", shape_str(&xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TorsdError::shape(
                format!("gamma/beta [{}]", c),
                format!(
                    "gamma{} beta{}",
                    shape_str(self.value(gamma).shape()),
                    shape_str(self.value(beta).shape())
                ),
            ));
        }
        let m = n * h * w;
        let plane = h * w;
        let mut xhat = Tensor::zeros(&xs);
        let mut invstd = vec![E::ZERO; c];
        {
            let xd = self.value(x).data();
            let xh = xhat.data_mut();
            for ch in 0..c {
                let (mean, var) = if training {
                    let mut sum = E::ZERO;
                    for in_ in 0..n {
                        let base = (in_ * c + ch) * plane;
                        for v in &xd[base..base + plane] {
                            sum += *v;
                        }
                    }
                    let mean = sum / E::from_f64(m as f64);
                    let mut var = E::ZERO;
                    for in_ in 0..n {
                        let base = (in_ * c + ch) * plane;
                        for v in &xd[base..base + plane] {
                            let d = *v - mean;
                            var += d * d;
                        }
                    }
                    var = var / E::from_f64(m as f64);
                    if update_stats {
                        let one = E::ONE;
                        let unbiased = if m > 1 {
                            var * E::from_f64(m as f64 / (m as f64 - 1.0))
                        } else {
                            var
                        };
                        running_mean.data_mut()[ch] =
                            (one - momentum) * running_mean.data()[ch] + momentum * mean;
                        running_var.data_mut()[ch] =
                            (one - momentum) * running_var.data()[ch] + momentum * unbiased;
                    }
                    (mean, var)
                } else {
                    (running_mean.data()[ch], running_var.data()[ch])
                };
                let istd = E::ONE / (var + eps).sqrt();
                invstd[ch] = istd;
                for in_ in 0..n {
                    let base = (in_ * c + ch) * plane;
                    for idx in base..base + plane {
                        xh[idx] = (xd[idx] - mean) * istd;
                    }
                }
            }
        }
        let mut y = Tensor::zeros(&xs);
        {
            let g = self.value(gamma).data().to_vec();
            let bta = self.value(beta).data().to_vec();
            let xh = xhat.data();
            let yd = y.data_mut();
            for in_ in 0..n {
                for ch in 0..c {
                    let base = (in_ * c + ch) * plane;
                    for idx in base..base + plane {
                        yd[idx] = g[ch] * xh[idx] + bta[ch];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        // Eval mode: running stats are constants, so backward must skip the
        // batch-statistic correction terms. Flagged by a sentinel entry
        // appended to invstd (length c+1 = eval).
        let op = if training {
            Op::BatchNorm { x, gamma, beta, xhat, invstd }
        } else {
            let mut inv2 = invstd;
            inv2.push(E::ZERO);
            Op::BatchNorm { x, gamma, beta, xhat, invstd: inv2 }
        };
        Ok(self.push(y, needs, op))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < E::ZERO {
                *v = E::ZERO;
            }
        }
        let needs = self.needs(x);
        self.push(y, needs, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, BinKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, BinKind::Mul)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(E, E) -> E,
        kind: BinKind,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TorsdError::shape(
                shape_str(self.value(a).shape()),
                shape_str(self.value(b).shape()),
            ));
        }
        let mut y = self.value(a).clone();
        {
            let bd = self.value(b).data();
            for (v, bv) in y.data_mut().iter_mut().zip(bd) {
                *v = f(*v, *bv);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let op = match kind {
            BinKind::Add => Op::Add { a, b },
            BinKind::Sub => Op::Sub { a, b },
            BinKind::Mul => Op::Mul { a, b },
        };
        Ok(self.push(y, needs, op))
    }

    /// `y = x * mul + add`, element-wise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: E, add: E) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v = *v * mul + add;
        }
        let needs = self.needs(x);
        self.push(y, needs, Op::Affine { x, mul })
    }

    /// Concatenates along axis 1 (channels of NCHW or columns of NC).
    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let compatible = sa.len() == sb.len()
            && sa.len() >= 2
            && sa[0] == sb[0]
            && sa[2..] == sb[2..];
        if !compatible {
            return Err(TorsdError::shape(shape_str(&sa), shape_str(&sb)));
        }
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let mut y = Tensor::zeros(&shape);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let yd = y.data_mut();
            let (ca, cb) = (sa[1] * inner, sb[1] * inner);
            for r in 0..sa[0] {
                yd[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&ad[r * ca..(r + 1) * ca]);
                yd[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                    .copy_from_slice(&bd[r * cb..(r + 1) * cb]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::ConcatAxis1 { a, b }))
    }

    /// Selects rows `offset, offset+step, ...` along axis 0.
    pub fn select_stride(&mut self, x: NodeId, offset: usize, step: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() || offset >= xs[0] || step == 0 {
            return Err(TorsdError::Argument(format!(
                "select_stride(offset={}, step={}) on shape {:?}",
                offset, step, xs
            )));
        }
        let rows = (xs[0] - offset).div_ceil(step);
        let inner: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = rows;
        let mut y = Tensor::zeros(&shape);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for (r, src) in (offset..xs[0]).step_by(step).enumerate() {
                yd[r * inner..(r + 1) * inner]
                    .copy_from_slice(&xd[src * inner..(src + 1) * inner]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(y, needs, Op::SelectStride { x, offset, step }))
    }

    /// `[N,C,H,W] -> [N,C]` mean over the spatial dims.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(TorsdError::shape("x[N,C,H,W]", shape_str(&xs)));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let scale = E::ONE / E::from_f64(plane as f64);
        let mut y = Tensor::zeros(&[n, c]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for r in 0..n * c {
                let mut acc = E::ZERO;
                for v in &xd[r * plane..(r + 1) * plane] {
                    acc += *v;
                }
                yd[r] = acc * scale;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(y, needs, Op::GlobalAvgPool { x }))
    }

    /// `[N,C] -> [N]` sum over columns.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(TorsdError::shape("x[N,C]", shape_str(&xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let mut y = Tensor::zeros(&[n]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for r in 0..n {
                let mut acc = E::ZERO;
                for v in &xd[r * c..(r + 1) * c] {
                    acc += *v;
                }
                yd[r] = acc;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(y, needs, Op::RowSum { x }))
    }

    /// Element-wise square root. Gradient is unbounded at zero inputs.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v = v.sqrt();
        }
        let needs = self.needs(x);
        self.push(y, needs, Op::Sqrt { x })
    }

    /// Mean of all elements, to a `[1]` scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xd = self.value(x).data();
        let mut acc = E::ZERO;
        for v in xd {
            acc += *v;
        }
        let y = Tensor::scalar(acc / E::from_f64(xd.len() as f64));
        let needs = self.needs(x);
        self.push(y, needs, Op::MeanAll { x })
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * term_i`.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, E)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum of no terms");
        let mut acc = E::ZERO;
        let mut needs = false;
        for (id, w) in terms {
            acc += self.scalar(*id) * *w;
            needs |= self.needs(*id);
        }
        self.push(
            Tensor::scalar(acc),
            needs,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TorsdError::shape(
                format!("{} elements", self.value(x).len()),
                shape_str(shape),
            ));
        }
        let y = self.value(x).reshaped(shape);
        let needs = self.needs(x);
        Ok(self.push(y, needs, Op::Reshape { x }))
    }

    /// Mean over rows of the soft-target cross entropy
    /// `-sum_c target_c * log softmax(logits)_c`. The target is a constant.
    pub fn cross_entropy_soft(&mut self, logits: NodeId, target: &Tensor<E>) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || target.shape() != ls.as_slice() {
            return Err(TorsdError::shape(shape_str(&ls), shape_str(target.shape())));
        }
        let (n, c) = (ls[0], ls[1]);
        let probs = softmax_rows(self.value(logits), E::ONE);
        let mut total = E::ZERO;
        {
            let zd = self.value(logits).data();
            let td = target.data();
            for r in 0..n {
                let row = &zd[r * c..(r + 1) * c];
                let lse = log_sum_exp(row);
                let mut dot = E::ZERO;
                for k in 0..c {
                    dot += td[r * c + k] * row[k];
                }
                total += lse - dot;
            }
        }
        let y = Tensor::scalar(total / E::from_f64(n as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            y,
            needs,
            Op::SoftCeMean {
                logits,
                probs,
                target: target.clone(),
            },
        ))
    }

    /// Mean over rows of `KL(p_T || softmax(student / t))` where `p_T` is a
    /// constant probability table (the detached, temperature-softened
    /// teacher).
    pub fn kl_mean(
        &mut self,
        student: NodeId,
        teacher_probs: &Tensor<E>,
        temperature: E,
    ) -> Result<NodeId> {
        let ss = self.value(student).shape().to_vec();
        if ss.len() != 2 || teacher_probs.shape() != ss.as_slice() {
            return Err(TorsdError::shape(
                shape_str(&ss),
                shape_str(teacher_probs.shape()),
            ));
        }
        let (n, c) = (ss[0], ss[1]);
        let inv_t = E::ONE / temperature;
        let q = softmax_rows(self.value(student), inv_t);
        let mut total = E::ZERO;
        {
            let pd = teacher_probs.data();
            let qd = q.data();
            for i in 0..n * c {
                if pd[i] > E::ZERO {
                    total += pd[i] * (pd[i].ln() - qd[i].ln());
                }
            }
        }
        let y = Tensor::scalar(total / E::from_f64(n as f64));
        let needs = self.needs(student);
        Ok(self.push(
            y,
            needs,
            Op::KlMean {
                student,
                student_probs: q,
                teacher_probs: teacher_probs.clone(),
                inv_t,
            },
        ))
    }

    /// FNV-1a hash of every rectifier's gate pattern (output > 0), in node
    /// order. Finite-difference harnesses compare this across perturbed
    /// evaluations: a changed hash means the perturbation crossed a kink,
    /// where subgradient backprop and finite differences legitimately
    /// disagree.
    pub fn relu_gate_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for node in &self.nodes {
            if let Op::Relu { .. } = node.op {
                for v in node.value.data() {
                    h ^= (*v > E::ZERO) as u64 + 0x9E37;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `delta` into the gradient slot of `id`.
    fn accum(&mut self, id: NodeId, delta: &Tensor<E>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate into every
    /// node with `needs_grad`; leaves created via [`Graph::leaf`] can then
    /// be read with [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        self.nodes[root.0].grad = Some(Tensor::scalar(E::ONE));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = self.nodes[i].grad.clone().unwrap();
            self.backward_node(i, &dy);
        }
    }

    fn backward_node(&mut self, i: usize, dy: &Tensor<E>) {
        // Ops store only NodeIds and constants, so cloning what backward
        // needs up front keeps the borrow checker out of the arithmetic.
        enum Plan<E: Element> {
            None,
            Simple(Vec<(NodeId, Tensor<E>)>),
        }
        let plan: Plan<E> = match &self.nodes[i].op {
            Op::Leaf => Plan::None,
            Op::Relu { x } => {
                let x = *x;
                let mut dx = dy.clone();
                let xd = self.nodes[x.0].value.data();
                for (g, xv) in dx.data_mut().iter_mut().zip(xd) {
                    if *xv <= E::ZERO {
                        *g = E::ZERO;
                    }
                }
                Plan::Simple(vec![(x, dx)])
            }
            Op::Add { a, b } => Plan::Simple(vec![(*a, dy.clone()), (*b, dy.clone())]),
            Op::Sub { a, b } => {
                let mut db = dy.clone();
                for v in db.data_mut() {
                    *v = -*v;
                }
                Plan::Simple(vec![(*a, dy.clone()), (*b, db)])
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let mut da = dy.clone();
                for (g, bv) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                    *g *= *bv;
                }
                let mut db = dy.clone();
                for (g, av) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    *g *= *av;
                }
                Plan::Simple(vec![(a, da), (b, db)])
            }
            Op::Affine { x, mul } => {
                let mut dx = dy.clone();
                let m = *mul;
                for v in dx.data_mut() {
                    *v *= m;
                }
                Plan::Simple(vec![(*x, dx)])
            }
            Op::Sqrt { x } => {
                let x = *x;
                let mut dx = dy.clone();
                let yd = self.nodes[i].value.data();
                let half = E::from_f64(0.5);
                for (g, yv) in dx.data_mut().iter_mut().zip(yd) {
                    *g = *g * half / *yv;
                }
                Plan::Simple(vec![(x, dx)])
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.len();
                let g = dy.item() / E::from_f64(n as f64);
                let dx = Tensor::full(self.nodes[x.0].value.shape(), g);
                Plan::Simple(vec![(x, dx)])
            }
            Op::WeightedSum { terms } => {
                let g = dy.item();
                Plan::Simple(
                    terms
                        .iter()
                        .map(|(id, w)| (*id, Tensor::scalar(g * *w)))
                        .collect(),
                )
            }
            Op::Reshape { x } => {
                let x = *x;
                let dx = dy.reshaped(self.nodes[x.0].value.shape());
                Plan::Simple(vec![(x, dx)])
            }
            Op::RowSum { x } => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let mut dx = Tensor::zeros(&xs);
                {
                    let dxd = dx.data_mut();
                    for r in 0..n {
                        let g = dy.data()[r];
                        for v in &mut dxd[r * c..(r + 1) * c] {
                            *v = g;
                        }
                    }
                }
                Plan::Simple(vec![(x, dx)])
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let plane = xs[2] * xs[3];
                let scale = E::ONE / E::from_f64(plane as f64);
                let mut dx = Tensor::zeros(&xs);
                {
                    let dxd = dx.data_mut();
                    for r in 0..xs[0] * xs[1] {
                        let g = dy.data()[r] * scale;
                        for v in &mut dxd[r * plane..(r + 1) * plane] {
                            *v = g;
                        }
                    }
                }
                Plan::Simple(vec![(x, dx)])
            }
            Op::SelectStride { x, offset, step } => {
                let (x, offset, step) = (*x, *offset, *step);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let inner: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(&xs);
                {
                    let dxd = dx.data_mut();
                    for (r, dst) in (offset..xs[0]).step_by(step).enumerate() {
                        dxd[dst * inner..(dst + 1) * inner]
                            .copy_from_slice(&dy.data()[r * inner..(r + 1) * inner]);
                    }
                }
                Plan::Simple(vec![(x, dx)])
            }
            Op::ConcatAxis1 { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Tensor::zeros(&sa);
                let mut db = Tensor::zeros(&sb);
                for r in 0..sa[0] {
                    da.data_mut()[r * ca..(r + 1) * ca]
                        .copy_from_slice(&dy.data()[r * (ca + cb)..r * (ca + cb) + ca]);
                    db.data_mut()[r * cb..(r + 1) * cb]
                        .copy_from_slice(&dy.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                Plan::Simple(vec![(a, da), (b, db)])
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, icount) = (xs[0], xs[1]);
                let o = self.nodes[w.0].value.shape()[0];
                let xd = self.nodes[x.0].value.data().to_vec();
                let wd = self.nodes[w.0].value.data().to_vec();
                let dyd = dy.data();

                let mut dx = Tensor::zeros(&xs);
                for r in 0..n {
                    let dxr = &mut dx.data_mut()[r * icount..(r + 1) * icount];
                    for c in 0..o {
                        let g = dyd[r * o + c];
                        let wr = &wd[c * icount..(c + 1) * icount];
                        for k in 0..icount {
                            dxr[k] += g * wr[k];
                        }
                    }
                }
                let mut dw = Tensor::zeros(&[o, icount]);
                for r in 0..n {
                    let xr = &xd[r * icount..(r + 1) * icount];
                    for c in 0..o {
                        let g = dyd[r * o + c];
                        let dwr = &mut dw.data_mut()[c * icount..(c + 1) * icount];
                        for k in 0..icount {
                            dwr[k] += g * xr[k];
                        }
                    }
                }
                let mut db = Tensor::zeros(&[o]);
                for r in 0..n {
                    for c in 0..o {
                        db.data_mut()[c] += dyd[r * o + c];
                    }
                }
                Plan::Simple(vec![(x, dx), (w, dw), (b, db)])
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let ys = self.nodes[i].value.shape().to_vec();
                let (n, ci, h, width) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (ys[2], ys[3]);
                let xd = self.nodes[x.0].value.data().to_vec();
                let wd = self.nodes[w.0].value.data().to_vec();
                let dyd = dy.data();

                let mut dx = Tensor::zeros(&xs);
                let mut dw = Tensor::zeros(&ws);
                let mut db = Tensor::zeros(&[co]);
                for in_ in 0..n {
                    for oc in 0..co {
                        let y_base = (in_ * co + oc) * ho * wo;
                        if b.is_some() {
                            for v in &dyd[y_base..y_base + ho * wo] {
                                db.data_mut()[oc] += *v;
                            }
                        }
                        for ic in 0..ci {
                            let x_base = (in_ * ci + ic) * h * width;
                            let w_base = (oc * ci + ic) * kh * kw;
                            for dkh in 0..kh {
                                for dkw in 0..kw {
                                    let wv = wd[w_base + dkh * kw + dkw];
                                    let mut wacc = E::ZERO;
                                    for oh in 0..ho {
                                        let ih = (oh * stride + dkh) as isize - pad as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let x_row = x_base + ih as usize * width;
                                        let y_row = y_base + oh * wo;
                                        for ow in 0..wo {
                                            let iw =
                                                (ow * stride + dkw) as isize - pad as isize;
                                            if iw < 0 || iw >= width as isize {
                                                continue;
                                            }
                                            let g = dyd[y_row + ow];
                                            dx.data_mut()[x_row + iw as usize] += g * wv;
                                            wacc += g * xd[x_row + iw as usize];
                                        }
                                    }
                                    dw.data_mut()[w_base + dkh * kw + dkw] += wacc;
                                }
                            }
                        }
                    }
                }
                let mut contribs = vec![(x, dx), (w, dw)];
                if let Some(b) = b {
                    contribs.push((b, db));
                }
                Plan::Simple(contribs)
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let eval_mode = invstd.len() == c + 1;
                let m = E::from_f64((n * plane) as f64);
                let gd = self.nodes[gamma.0].value.data().to_vec();
                let xh = xhat.clone();
                let istd = invstd.clone();
                let dyd = dy.data();

                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(&xs);
                for ch in 0..c {
                    let mut sum_dy = E::ZERO;
                    let mut sum_dy_xhat = E::ZERO;
                    for in_ in 0..n {
                        let base = (in_ * c + ch) * plane;
                        for idx in base..base + plane {
                            sum_dy += dyd[idx];
                            sum_dy_xhat += dyd[idx] * xh.data()[idx];
                        }
                    }
                    dbeta.data_mut()[ch] = sum_dy;
                    dgamma.data_mut()[ch] = sum_dy_xhat;
                    let g = gd[ch];
                    let is = istd[ch];
                    for in_ in 0..n {
                        let base = (in_ * c + ch) * plane;
                        for idx in base..base + plane {
                            let v = if eval_mode {
                                dyd[idx] * g * is
                            } else {
                                g * is
                                    * (dyd[idx]
                                        - sum_dy / m
                                        - xh.data()[idx] * sum_dy_xhat / m)
                            };
                            dx.data_mut()[idx] = v;
                        }
                    }
                }
                Plan::Simple(vec![(x, dx), (gamma, dgamma), (beta, dbeta)])
            }
            Op::SoftCeMean { logits, probs, target } => {
                let logits = *logits;
                let ls = self.nodes[logits.0].value.shape().to_vec();
                let n = ls[0];
                let scale = dy.item() / E::from_f64(n as f64);
                let mut dl = Tensor::zeros(&ls);
                for (g, (p, t)) in dl
                    .data_mut()
                    .iter_mut()
                    .zip(probs.data().iter().zip(target.data()))
                {
                    *g = (*p - *t) * scale;
                }
                Plan::Simple(vec![(logits, dl)])
            }
            Op::KlMean { student, student_probs, teacher_probs, inv_t } => {
                let student = *student;
                let ss = self.nodes[student.0].value.shape().to_vec();
                let n = ss[0];
                let scale = dy.item() * *inv_t / E::from_f64(n as f64);
                let mut ds = Tensor::zeros(&ss);
                for (g, (q, p)) in ds
                    .data_mut()
                    .iter_mut()
                    .zip(student_probs.data().iter().zip(teacher_probs.data()))
                {
                    *g = (*q - *p) * scale;
                }
                Plan::Simple(vec![(student, ds)])
            }
        };
        if let Plan::Simple(contribs) = plan {
            for (id, delta) in contribs {
                self.accum(id, &delta);
            }
        }
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

/// Row-wise softmax of `x / (1/inv_t)`, numerically stabilized.
pub fn softmax_rows<E: Element>(x: &Tensor<E>, inv_t: E) -> Tensor<E> {
    let shape = x.shape();
    assert_eq!(shape.len(), 2);
    let (n, c) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(shape);
    for r in 0..n {
        let row = &x.data()[r * c..(r + 1) * c];
        let mut mx = row[0] * inv_t;
        for v in row {
            mx = mx.max(*v * inv_t);
        }
        let mut denom = E::ZERO;
        let o = &mut out.data_mut()[r * c..(r + 1) * c];
        for (ov, v) in o.iter_mut().zip(row) {
            *ov = (*v * inv_t - mx).exp();
            denom += *ov;
        }
        for ov in o.iter_mut() {
            *ov = *ov / denom;
        }
    }
    out
}

fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let mut mx = row[0];
    for v in row {
        mx = mx.max(*v);
    }
    let mut acc = E::ZERO;
    for v in row {
        acc += (*v - mx).exp();
    }
    mx + acc.ln()
}

/// Detached-teacher plumbing.
///
/// `Record` captures each detached tensor in forward order; `Replay` serves
/// the captured values back so a finite-difference harness can perturb
/// parameters while teachers stay frozen — matching the analytic gradient,
/// where teacher branches carry no gradient by construction.
pub enum TeacherCache<E: Element> {
    Record(Vec<Tensor<E>>),
    Replay { values: Vec<Tensor<E>>, pos: usize },
}

impl<E: Element> TeacherCache<E> {
    pub fn record() -> Self {
        TeacherCache::Record(Vec::new())
    }

    pub fn replay(values: Vec<Tensor<E>>) -> Self {
        TeacherCache::Replay { values, pos: 0 }
    }

    /// Detaches `node`: returns its value as a gradient-free constant.
    pub fn detach(&mut self, g: &mut Graph<E>, node: NodeId) -> NodeId {
        let value = match self {
            TeacherCache::Record(store) => {
                let v = g.value(node).clone();
                store.push(v.clone());
                v
            }
            TeacherCache::Replay { values, pos } => {
                let v = values
                    .get(*pos)
                    .expect("teacher replay exhausted: forward structure changed")
                    .clone();
                *pos += 1;
                v
            }
        };
        g.constant(value)
    }

    pub fn into_recorded(self) -> Vec<Tensor<E>> {
        match self {
            TeacherCache::Record(v) => v,
            TeacherCache::Replay { values, .. } => values,
        }
    }
}
