//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] records every primitive operation in execution order; node
//! inputs always point at earlier nodes, so the list is topologically sorted
//! by construction. [`Tape::backward`] runs one adjoint sweep. For exact
//! Hessian-vector products, [`Tape::grad_and_hvp`] runs a forward sweep that
//! carries directional derivatives (tangents) through every node and then a
//! reverse sweep that carries `(adjoint, adjoint-tangent)` pairs:
//!
//! * forward:  `ẏ = Σᵢ (∂y/∂xᵢ) ẋᵢ`
//! * reverse:  `x̄ᵢ += (∂y/∂xᵢ)ᵀ ȳ` and
//!   `ẋ̄ᵢ += (∂y/∂xᵢ)ᵀ ȳ̇ + (D(∂y/∂xᵢ)[ẋ])ᵀ ȳ`
//!
//! With the tangent seeded to a direction `v` at the leaves, the
//! adjoint-tangents of the leaves equal `H·v` exactly (up to float rounding) —
//! no finite differencing anywhere. Finite differences appear only in tests,
//! as independent oracles.
//!
//! Values, adjoints and tangents are plain `f64` tensors; every op validates
//! shapes at record time and checks its output for NaN/Inf so numerical
//! blow-ups surface as errors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    fn idx(self) -> usize {
        self.0
    }
}

/// Geometry of a valid (no padding), stride-1 convolution window over an
/// NHWC-shaped input, used by [`Tape::im2col`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvWindow {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl ConvWindow {
    pub fn out_height(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width - self.kernel + 1
    }

    /// Rows of the unfolded matrix: one per (batch, output row, output col).
    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Columns of the unfolded matrix: one per (ki, kj, channel).
    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn validate(&self, input_shape: &[usize]) -> Result<()> {
        if self.kernel == 0 || self.kernel > self.height || self.kernel > self.width {
            return Err(Error::InvalidArgument(format!(
                "conv kernel {} does not fit a {}x{} input",
                self.kernel, self.height, self.width
            )));
        }
        let want = [self.batch, self.height, self.width, self.channels];
        if input_shape != want {
            return Err(Error::ShapeMismatch(format!(
                "im2col expects input shape {:?}, got {:?}",
                want, input_shape
            )));
        }
        Ok(())
    }

    /// Visit every (unfolded index, input index) pair in row-major output
    /// order. The column order (ki, kj, channel) matches conv weight layout
    /// `[kernel*kernel*channels, out_channels]`.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w, ch, k) = (self.height, self.width, self.channels, self.kernel);
        let mut out = 0;
        for b in 0..self.batch {
            for oi in 0..self.out_height() {
                for oj in 0..self.out_width() {
                    for ki in 0..k {
                        for kj in 0..k {
                            let base = ((b * h + oi + ki) * w + oj + kj) * ch;
                            for c in 0..ch {
                                f(out, base + c);
                                out += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry for 2x2 max pooling with stride 2 over an NHWC input. Odd trailing
/// rows/columns are dropped (floor semantics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolWindow {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PoolWindow {
    pub fn out_height(&self) -> usize {
        self.height / 2
    }

    pub fn out_width(&self) -> usize {
        self.width / 2
    }

    fn validate(&self, input_shape: &[usize]) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidArgument(format!(
                "max_pool2 needs height/width >= 2, got {}x{}",
                self.height, self.width
            )));
        }
        let want = [self.batch, self.height, self.width, self.channels];
        if input_shape != want {
            return Err(Error::ShapeMismatch(format!(
                "max_pool2 expects input shape {:?}, got {:?}",
                want, input_shape
            )));
        }
        Ok(())
    }
}

/// A recorded primitive. Input ids always reference earlier nodes. Ops that
/// need forward-pass byproducts in the sweeps (softmax probabilities, argmax
/// positions, dropout masks) store them inline so backward never re-derives
/// control flow.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    MulMask { x: NodeId, mask: Vec<f64> },
    Sum { x: NodeId },
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    Im2Col { x: NodeId, win: ConvWindow },
    MaxPool { x: NodeId, win: PoolWindow, argmax: Vec<usize> },
    Reshape { x: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// True iff some parameter leaf feeds this node; adjoints are only
    /// propagated into nodes that require grad.
    requires_grad: bool,
}

/// Gradients (or adjoint-tangents) per node, produced by a reverse sweep.
/// Untouched nodes report structural zeros.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`, a zero tensor if the output did not
    /// depend on it.
    pub fn wrt(&self, id: NodeId) -> Result<Tensor> {
        let i = id.idx();
        if i >= self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "node {:?} is not on this tape",
                id
            )));
        }
        Ok(match &self.slots[i] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[i].clone()),
        })
    }
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
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

    /// Recorded value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    /// Record a constant input (no gradient tracked).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Record a trainable input; backward reports gradients for these.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        value.check_finite("op output")?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.idx()).ok_or_else(|| {
            Error::InvalidArgument(format!("node {:?} is not on this tape", id))
        })
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    // ── record ops ──────────────────────────────────────────────────────────

    /// `C = A · B` for 2-D operands `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let dims = matmul_dims(va.shape(), vb.shape())?;
        let value = matmul_value(va.data(), vb.data(), dims);
        let req = self.requires(a) || self.requires(b);
        self.push(Op::MatMul { a, b }, value, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = elementwise_value(self.node(a)?, self.node(b)?, "add", |x, y| x + y)?;
        let req = self.requires(a) || self.requires(b);
        self.push(Op::Add { a, b }, value, req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = elementwise_value(self.node(a)?, self.node(b)?, "sub", |x, y| x - y)?;
        let req = self.requires(a) || self.requires(b);
        self.push(Op::Sub { a, b }, value, req)
    }

    /// Hadamard (elementwise) product of same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = elementwise_value(self.node(a)?, self.node(b)?, "mul", |x, y| x * y)?;
        let req = self.requires(a) || self.requires(b);
        self.push(Op::Mul { a, b }, value, req)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let vx = &self.node(x)?.value;
        let value = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v * factor).collect(),
        );
        let req = self.requires(x);
        self.push(Op::Scale { x, factor }, value, req)
    }

    /// Broadcast-add a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.node(x)?.value, &self.node(bias)?.value);
        if vx.shape().len() != 2 || vb.shape() != [vx.shape()[1]] {
            return Err(Error::ShapeMismatch(format!(
                "add_bias expects [m,n] + [n], got {:?} + {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let value = add_bias_value(vx, vb.data());
        let req = self.requires(x) || self.requires(bias);
        self.push(Op::AddBias { x, bias }, value, req)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        let value = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v.max(0.0)).collect(),
        );
        let req = self.requires(x);
        self.push(Op::Relu { x }, value, req)
    }

    /// Elementwise product with a fixed mask (dropout). The mask is stored on
    /// the tape, so backward and any Hessian-vector sweep replay exactly the
    /// masking the forward pass used.
    pub fn mul_mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        if mask.len() != vx.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} entries applied to tensor of {}",
                mask.len(),
                vx.len()
            )));
        }
        if !mask.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dropout mask".into()));
        }
        let value = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        );
        let req = self.requires(x);
        self.push(Op::MulMask { x, mask }, value, req)
    }

    /// Sum of all entries, producing a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        let value = Tensor::scalar(vx.data().iter().sum());
        let req = self.requires(x);
        self.push(Op::Sum { x }, value, req)
    }

    /// Fused softmax + cross-entropy with mean reduction over the batch:
    /// `L = (1/B) Σᵢ (logsumexp(zᵢ) − z_{i,yᵢ})`. Stabilised by max
    /// subtraction; softmax probabilities are saved for the reverse sweeps.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vz = &self.node(logits)?.value;
        let shape = vz.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy expects [batch, classes] logits, got {:?}",
                shape
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} logit rows",
                labels.len(),
                rows
            )));
        }
        if rows == 0 {
            return Err(Error::Empty("softmax_cross_entropy batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let (loss, probs) = softmax_xent_value(vz.data(), rows, cols, labels);
        let req = self.requires(logits);
        self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            req,
        )
    }

    /// Unfold convolution windows into a `[batch*out_h*out_w, k*k*channels]`
    /// matrix so convolution becomes a single matmul against
    /// `[k*k*channels, out_channels]` weights.
    pub fn im2col(&mut self, x: NodeId, win: ConvWindow) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        win.validate(vx.shape())?;
        let value = im2col_value(vx.data(), win);
        let req = self.requires(x);
        self.push(Op::Im2Col { x, win }, value, req)
    }

    /// 2x2 max pooling with stride 2. Argmax positions are saved at record
    /// time (ties resolved to the first element in scan order) so the adjoint
    /// routing is deterministic.
    pub fn max_pool2(&mut self, x: NodeId, win: PoolWindow) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        win.validate(vx.shape())?;
        let (value, argmax) = max_pool2_value(vx.data(), win);
        let req = self.requires(x);
        self.push(Op::MaxPool { x, win, argmax }, value, req)
    }

    /// Reinterpret the underlying buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        let want: usize = shape.iter().product();
        if want != vx.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count",
                vx.shape(),
                shape
            )));
        }
        let value = Tensor::from_parts(shape, vx.data().to_vec());
        let req = self.requires(x);
        self.push(Op::Reshape { x }, value, req)
    }

    // ── sweeps ─────────────────────────────────────────────────────────────

    /// Adjoint sweep: gradients of a scalar `output` with respect to every
    /// parameter leaf. Constant leaves report zero gradients.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let (adj, _) = self.reverse_sweep(output, None)?;
        Ok(self.into_gradients(adj))
    }

    /// Exact gradient and Hessian-vector product in one pass. `seeds` assigns
    /// a tangent direction to leaves (unseeded leaves get zero tangents); the
    /// returned pair is `(∇f, H·v)` where `v` is the seeded direction.
    pub fn grad_and_hvp(
        &self,
        output: NodeId,
        seeds: &[(NodeId, Tensor)],
    ) -> Result<(Gradients, Gradients)> {
        let tangents = self.tangent_sweep(seeds)?;
        let (adj, adj_tan) = self.reverse_sweep(output, Some(&tangents))?;
        let hv = adj_tan.expect("tangent sweep implies adjoint tangents");
        Ok((self.into_gradients(adj), self.into_gradients(hv)))
    }

    fn into_gradients(&self, slots: Vec<Option<Tensor>>) -> Gradients {
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            slots,
        }
    }

    /// Forward sweep of directional derivatives. `None` slots are structural
    /// zeros, which skips whole subgraphs that no seed reaches (e.g. the raw
    /// feature pipeline).
    fn tangent_sweep(&self, seeds: &[(NodeId, Tensor)]) -> Result<Vec<Option<Tensor>>> {
        let mut tan: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let node = self.node(*id)?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::InvalidArgument(
                    "tangent seeds may only be placed on leaves".into(),
                ));
            }
            if seed.shape() != node.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "seed shape {:?} for leaf of shape {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            if tan[id.idx()].is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate tangent seed for {:?}",
                    id
                )));
            }
            tan[id.idx()] = Some(seed.clone());
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let t: Option<Tensor> = match &node.op {
                Op::Leaf => continue, // seeded above or structurally zero
                Op::MatMul { a, b } => {
                    let dims = matmul_dims(self.val(*a).shape(), self.val(*b).shape())?;
                    let mut out: Option<Vec<f64>> = None;
                    if let Some(ta) = &tan[a.idx()] {
                        let buf = out.get_or_insert_with(|| vec![0.0; dims.0 * dims.2]);
                        mm_nn_acc(buf, ta.data(), self.val(*b).data(), dims.0, dims.1, dims.2);
                    }
                    if let Some(tb) = &tan[b.idx()] {
                        let buf = out.get_or_insert_with(|| vec![0.0; dims.0 * dims.2]);
                        mm_nn_acc(buf, self.val(*a).data(), tb.data(), dims.0, dims.1, dims.2);
                    }
                    out.map(|d| Tensor::from_parts(vec![dims.0, dims.2], d))
                }
                Op::Add { a, b } => {
                    lin_combine(tan[a.idx()].as_ref(), 1.0, tan[b.idx()].as_ref(), 1.0)
                }
                Op::Sub { a, b } => {
                    lin_combine(tan[a.idx()].as_ref(), 1.0, tan[b.idx()].as_ref(), -1.0)
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let mut out: Option<Vec<f64>> = None;
                    if let Some(ta) = &tan[a.idx()] {
                        let buf = out.get_or_insert_with(|| vec![0.0; va.len()]);
                        for (o, (t, v)) in buf.iter_mut().zip(ta.data().iter().zip(vb.data())) {
                            *o += t * v;
                        }
                    }
                    if let Some(tb) = &tan[b.idx()] {
                        let buf = out.get_or_insert_with(|| vec![0.0; va.len()]);
                        for (o, (t, v)) in buf.iter_mut().zip(tb.data().iter().zip(va.data())) {
                            *o += t * v;
                        }
                    }
                    out.map(|d| Tensor::from_parts(va.shape().to_vec(), d))
                }
                Op::Scale { x, factor } => tan[x.idx()].as_ref().map(|tx| {
                    Tensor::from_parts(
                        tx.shape().to_vec(),
                        tx.data().iter().map(|v| v * factor).collect(),
                    )
                }),
                Op::AddBias { x, bias } => {
                    match (&tan[x.idx()], &tan[bias.idx()]) {
                        (None, None) => None,
                        (Some(tx), None) => Some(tx.clone()),
                        (tx, Some(tb)) => {
                            let base = match tx {
                                Some(t) => t.clone(),
                                None => Tensor::zeros(node.value.shape().to_vec()),
                            };
                            Some(add_bias_value(&base, tb.data()))
                        }
                    }
                }
                Op::Relu { x } => tan[x.idx()].as_ref().map(|tx| {
                    let vx = self.val(*x);
                    Tensor::from_parts(
                        tx.shape().to_vec(),
                        tx.data()
                            .iter()
                            .zip(vx.data())
                            .map(|(t, v)| if *v > 0.0 { *t } else { 0.0 })
                            .collect(),
                    )
                }),
                Op::MulMask { x, mask } => tan[x.idx()].as_ref().map(|tx| {
                    Tensor::from_parts(
                        tx.shape().to_vec(),
                        tx.data().iter().zip(mask).map(|(t, m)| t * m).collect(),
                    )
                }),
                Op::Sum { x } => tan[x.idx()]
                    .as_ref()
                    .map(|tx| Tensor::scalar(tx.data().iter().sum())),
                Op::SoftmaxXent { logits, probs, labels } => {
                    tan[logits.idx()].as_ref().map(|tz| {
                        // dL = <(P − Y)/B, dZ>
                        let cols = self.val(*logits).shape()[1];
                        let rows = labels.len();
                        let inv_b = 1.0 / rows as f64;
                        let mut dl = 0.0;
                        for r in 0..rows {
                            for c in 0..cols {
                                let g = probs[r * cols + c]
                                    - if labels[r] == c { 1.0 } else { 0.0 };
                                dl += g * inv_b * tz.data()[r * cols + c];
                            }
                        }
                        Tensor::scalar(dl)
                    })
                }
                Op::Im2Col { x, win } => tan[x.idx()].as_ref().map(|tx| im2col_value(tx.data(), *win)),
                Op::MaxPool { x, argmax, .. } => tan[x.idx()].as_ref().map(|tx| {
                    Tensor::from_parts(
                        node.value.shape().to_vec(),
                        argmax.iter().map(|&src| tx.data()[src]).collect(),
                    )
                }),
                Op::Reshape { x } => tan[x.idx()]
                    .as_ref()
                    .map(|tx| Tensor::from_parts(node.value.shape().to_vec(), tx.data().to_vec())),
            };
            if let Some(t) = t {
                t.check_finite("tangent sweep")?;
                tan[i] = Some(t);
            }
        }
        Ok(tan)
    }

    /// Reverse sweep. With `tangents` present it also propagates
    /// adjoint-tangents, yielding Hessian-vector products at the leaves.
    fn reverse_sweep(
        &self,
        output: NodeId,
        tangents: Option<&[Option<Tensor>]>,
    ) -> Result<(Vec<Option<Tensor>>, Option<Vec<Option<Tensor>>>)> {
        let out_node = self.node(output)?;
        if out_node.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }

        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        let mut adj_tan: Option<Vec<Option<Tensor>>> = tangents.map(|_| vec![None; n]);

        adj[output.idx()] = Some(Tensor::from_parts(
            out_node.value.shape().to_vec(),
            vec![1.0],
        ));

        for i in (0..=output.idx()).rev() {
            // Nothing flowed into this node, or nothing differentiable below it.
            if adj[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let a_out = adj[i].clone().unwrap();
            let at_out = adj_tan.as_ref().and_then(|s| s[i].clone());

            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let (m, k, nn) = matmul_dims(va.shape(), vb.shape())?;
                    if self.requires(*a) {
                        // Ā += C̄ Bᵀ
                        acc(&mut adj[a.idx()], va.shape(), |buf| {
                            mm_nt_acc(buf, a_out.data(), vb.data(), m, nn, k);
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            let tb = tangents.unwrap()[b.idx()].as_ref();
                            acc(&mut slots[a.idx()], va.shape(), |buf| {
                                // Ǡ += Ċ̄ Bᵀ + C̄ Ḃᵀ
                                if let Some(at) = &at_out {
                                    mm_nt_acc(buf, at.data(), vb.data(), m, nn, k);
                                }
                                if let Some(tb) = tb {
                                    mm_nt_acc(buf, a_out.data(), tb.data(), m, nn, k);
                                }
                            });
                        }
                    }
                    if self.requires(*b) {
                        // B̄ += Aᵀ C̄
                        acc(&mut adj[b.idx()], vb.shape(), |buf| {
                            mm_tn_acc(buf, va.data(), a_out.data(), m, k, nn);
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            let ta = tangents.unwrap()[a.idx()].as_ref();
                            acc(&mut slots[b.idx()], vb.shape(), |buf| {
                                // Ḃ̄ += Ȧᵀ C̄ + Aᵀ Ċ̄
                                if let Some(ta) = ta {
                                    mm_tn_acc(buf, ta.data(), a_out.data(), m, k, nn);
                                }
                                if let Some(at) = &at_out {
                                    mm_tn_acc(buf, va.data(), at.data(), m, k, nn);
                                }
                            });
                        }
                    }
                }
                Op::Add { a, b } => {
                    for id in [a, b] {
                        if self.requires(*id) {
                            let shape = self.val(*id).shape().to_vec();
                            acc(&mut adj[id.idx()], &shape, |buf| axpy(buf, 1.0, a_out.data()));
                            if let Some(slots) = adj_tan.as_mut() {
                                if let Some(at) = &at_out {
                                    acc(&mut slots[id.idx()], &shape, |buf| {
                                        axpy(buf, 1.0, at.data())
                                    });
                                }
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    for (id, sign) in [(a, 1.0), (b, -1.0)] {
                        if self.requires(*id) {
                            let shape = self.val(*id).shape().to_vec();
                            acc(&mut adj[id.idx()], &shape, |buf| axpy(buf, sign, a_out.data()));
                            if let Some(slots) = adj_tan.as_mut() {
                                if let Some(at) = &at_out {
                                    acc(&mut slots[id.idx()], &shape, |buf| {
                                        axpy(buf, sign, at.data())
                                    });
                                }
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    // C = A ⊙ B: Ā += C̄ ⊙ B, and Ǡ += Ċ̄ ⊙ B + C̄ ⊙ Ḃ.
                    for (dst, other) in [(a, b), (b, a)] {
                        if !self.requires(*dst) {
                            continue;
                        }
                        let vo = self.val(*other);
                        let shape = self.val(*dst).shape().to_vec();
                        acc(&mut adj[dst.idx()], &shape, |buf| {
                            for (o, (g, v)) in
                                buf.iter_mut().zip(a_out.data().iter().zip(vo.data()))
                            {
                                *o += g * v;
                            }
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            let t_other = tangents.unwrap()[other.idx()].as_ref();
                            acc(&mut slots[dst.idx()], &shape, |buf| {
                                if let Some(at) = &at_out {
                                    for (o, (g, v)) in
                                        buf.iter_mut().zip(at.data().iter().zip(vo.data()))
                                    {
                                        *o += g * v;
                                    }
                                }
                                if let Some(to) = t_other {
                                    for (o, (g, t)) in
                                        buf.iter_mut().zip(a_out.data().iter().zip(to.data()))
                                    {
                                        *o += g * t;
                                    }
                                }
                            });
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| {
                            axpy(buf, *factor, a_out.data())
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    axpy(buf, *factor, at.data())
                                });
                            }
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let (rows, cols) = {
                        let s = self.val(*x).shape();
                        (s[0], s[1])
                    };
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| axpy(buf, 1.0, a_out.data()));
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    axpy(buf, 1.0, at.data())
                                });
                            }
                        }
                    }
                    if self.requires(*bias) {
                        acc(&mut adj[bias.idx()], &[cols], |buf| {
                            col_sums_acc(buf, a_out.data(), rows, cols);
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[bias.idx()], &[cols], |buf| {
                                    col_sums_acc(buf, at.data(), rows, cols);
                                });
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.requires(*x) {
                        let vx = self.val(*x);
                        let shape = vx.shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| {
                            masked_axpy(buf, a_out.data(), vx.data());
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    masked_axpy(buf, at.data(), vx.data());
                                });
                            }
                        }
                    }
                }
                Op::MulMask { x, mask } => {
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| {
                            for (o, (g, m)) in buf.iter_mut().zip(a_out.data().iter().zip(mask)) {
                                *o += g * m;
                            }
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    for (o, (g, m)) in
                                        buf.iter_mut().zip(at.data().iter().zip(mask))
                                    {
                                        *o += g * m;
                                    }
                                });
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        let g = a_out.data()[0];
                        acc(&mut adj[x.idx()], &shape, |buf| {
                            buf.iter_mut().for_each(|o| *o += g)
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                let gt = at.data()[0];
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    buf.iter_mut().for_each(|o| *o += gt)
                                });
                            }
                        }
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    if self.requires(*logits) {
                        let cols = self.val(*logits).shape()[1];
                        let rows = labels.len();
                        let inv_b = 1.0 / rows as f64;
                        let gl = a_out.data()[0]; // scalar L̄
                        let shape = self.val(*logits).shape().to_vec();
                        acc(&mut adj[logits.idx()], &shape, |buf| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    let y = if labels[r] == c { 1.0 } else { 0.0 };
                                    buf[r * cols + c] += gl * (probs[r * cols + c] - y) * inv_b;
                                }
                            }
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            // Ż̄ = L̄̇ G + L̄ Ġ with G = (P − Y)/B and
                            // Ṗᵢ = Pᵢ ⊙ Żᵢ − Pᵢ (Pᵢ · Żᵢ): the Gauss-Newton-like
                            // curvature of softmax appears here.
                            let glt = at_out.as_ref().map(|t| t.data()[0]).unwrap_or(0.0);
                            let tz = tangents.unwrap()[logits.idx()].as_ref();
                            acc(&mut slots[logits.idx()], &shape, |buf| {
                                for r in 0..rows {
                                    let p_row = &probs[r * cols..(r + 1) * cols];
                                    let pdotz = tz.map(|t| {
                                        let z_row = &t.data()[r * cols..(r + 1) * cols];
                                        p_row.iter().zip(z_row).map(|(p, z)| p * z).sum::<f64>()
                                    });
                                    for c in 0..cols {
                                        let y = if labels[r] == c { 1.0 } else { 0.0 };
                                        let mut v = glt * (p_row[c] - y) * inv_b;
                                        if let (Some(t), Some(pz)) = (tz, pdotz) {
                                            let zc = t.data()[r * cols + c];
                                            v += gl * inv_b * (p_row[c] * zc - p_row[c] * pz);
                                        }
                                        buf[r * cols + c] += v;
                                    }
                                }
                            });
                        }
                    }
                }
                Op::Im2Col { x, win } => {
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| {
                            win.for_each_pair(|out_i, in_i| buf[in_i] += a_out.data()[out_i]);
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    win.for_each_pair(|out_i, in_i| buf[in_i] += at.data()[out_i]);
                                });
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax, .. } => {
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| {
                            for (o, &src) in argmax.iter().enumerate() {
                                buf[src] += a_out.data()[o];
                            }
                        });
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    for (o, &src) in argmax.iter().enumerate() {
                                        buf[src] += at.data()[o];
                                    }
                                });
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.requires(*x) {
                        let shape = self.val(*x).shape().to_vec();
                        acc(&mut adj[x.idx()], &shape, |buf| axpy(buf, 1.0, a_out.data()));
                        if let Some(slots) = adj_tan.as_mut() {
                            if let Some(at) = &at_out {
                                acc(&mut slots[x.idx()], &shape, |buf| {
                                    axpy(buf, 1.0, at.data())
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok((adj, adj_tan))
    }

    /// Recompute every node value from the leaves with the same kernels the
    /// recording pass used. Exists to make the replay-determinism contract
    /// testable: recomputed values must be bit-identical to the stored ones.
    pub fn replay_values(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul { a, b } => {
                    let (va, vb) = (&vals[a.idx()], &vals[b.idx()]);
                    let dims = matmul_dims(va.shape(), vb.shape())?;
                    matmul_value(va.data(), vb.data(), dims)
                }
                Op::Add { a, b } => binary_map(&vals[a.idx()], &vals[b.idx()], |x, y| x + y),
                Op::Sub { a, b } => binary_map(&vals[a.idx()], &vals[b.idx()], |x, y| x - y),
                Op::Mul { a, b } => binary_map(&vals[a.idx()], &vals[b.idx()], |x, y| x * y),
                Op::Scale { x, factor } => {
                    let vx = &vals[x.idx()];
                    Tensor::from_parts(
                        vx.shape().to_vec(),
                        vx.data().iter().map(|v| v * factor).collect(),
                    )
                }
                Op::AddBias { x, bias } => add_bias_value(&vals[x.idx()], vals[bias.idx()].data()),
                Op::Relu { x } => {
                    let vx = &vals[x.idx()];
                    Tensor::from_parts(
                        vx.shape().to_vec(),
                        vx.data().iter().map(|v| v.max(0.0)).collect(),
                    )
                }
                Op::MulMask { x, mask } => {
                    let vx = &vals[x.idx()];
                    Tensor::from_parts(
                        vx.shape().to_vec(),
                        vx.data().iter().zip(mask).map(|(v, m)| v * m).collect(),
                    )
                }
                Op::Sum { x } => Tensor::scalar(vals[x.idx()].data().iter().sum()),
                Op::SoftmaxXent { logits, labels, .. } => {
                    let vz = &vals[logits.idx()];
                    let (rows, cols) = (vz.shape()[0], vz.shape()[1]);
                    let (loss, _) = softmax_xent_value(vz.data(), rows, cols, labels);
                    Tensor::scalar(loss)
                }
                Op::Im2Col { x, win } => im2col_value(vals[x.idx()].data(), *win),
                Op::MaxPool { x, win, .. } => max_pool2_value(vals[x.idx()].data(), *win).0,
                Op::Reshape { x } => {
                    Tensor::from_parts(node.value.shape().to_vec(), vals[x.idx()].data().to_vec())
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }
}

// ── kernels (shared by record, replay and the sweeps) ───────────────────────

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul of {:?} x {:?}",
            a, b
        )));
    }
    Ok((a[0], a[1], b[1]))
}

fn matmul_value(a: &[f64], b: &[f64], (m, k, n): (usize, usize, usize)) -> Tensor {
    let mut out = vec![0.0; m * n];
    mm_nn_acc(&mut out, a, b, m, k, n);
    Tensor::from_parts(vec![m, n], out)
}

/// `out += A·B` with `A:[m,k]`, `B:[k,n]`.
fn mm_nn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += A·Bᵀ` with `A:[m,q]`, `B:[p,q]`, `out:[m,p]`.
fn mm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, q: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * q..(i + 1) * q];
        for r in 0..p {
            let brow = &b[r * q..(r + 1) * q];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * p + r] += dot;
        }
    }
}

/// `out += Aᵀ·B` with `A:[m,k]`, `B:[m,n]`, `out:[k,n]`.
fn mm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn add_bias_value(x: &Tensor, bias: &[f64]) -> Tensor {
    let cols = bias.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias[i % cols])
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Stabilised softmax cross-entropy; returns (mean loss, softmax probabilities).
fn softmax_xent_value(z: &[f64], rows: usize, cols: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; rows * cols];
    let mut loss = 0.0;
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            probs[r * cols + c] = e;
            denom += e;
        }
        for c in 0..cols {
            probs[r * cols + c] /= denom;
        }
        loss += denom.ln() + max - row[labels[r]];
    }
    (loss / rows as f64, probs)
}

fn im2col_value(x: &[f64], win: ConvWindow) -> Tensor {
    let mut out = vec![0.0; win.rows() * win.cols()];
    win.for_each_pair(|out_i, in_i| out[out_i] = x[in_i]);
    Tensor::from_parts(vec![win.rows(), win.cols()], out)
}

fn max_pool2_value(x: &[f64], win: PoolWindow) -> (Tensor, Vec<usize>) {
    let (h, w, ch) = (win.height, win.width, win.channels);
    let (oh, ow) = (win.out_height(), win.out_width());
    let mut out = Vec::with_capacity(win.batch * oh * ow * ch);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..win.batch {
        for oi in 0..oh {
            for oj in 0..ow {
                for c in 0..ch {
                    let mut best_idx = ((b * h + 2 * oi) * w + 2 * oj) * ch + c;
                    let mut best = x[best_idx];
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((b * h + 2 * oi + di) * w + 2 * oj + dj) * ch + c;
                            // Strict > keeps the first maximum in scan order.
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![win.batch, oh, ow, ch], out),
        argmax,
    )
}

fn elementwise_value(a: &Node, b: &Node, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.value.shape() != b.value.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{} of {:?} and {:?}",
            what,
            a.value.shape(),
            b.value.shape()
        )));
    }
    Ok(binary_map(&a.value, &b.value, f))
}

fn binary_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

/// `ca·a + cb·b` over optional tensors, `None` meaning structural zero.
fn lin_combine(a: Option<&Tensor>, ca: f64, b: Option<&Tensor>, cb: f64) -> Option<Tensor> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().map(|v| ca * v).collect(),
        )),
        (None, Some(b)) => Some(Tensor::from_parts(
            b.shape().to_vec(),
            b.data().iter().map(|v| cb * v).collect(),
        )),
        (Some(a), Some(b)) => Some(Tensor::from_parts(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| ca * x + cb * y)
                .collect(),
        )),
    }
}

/// Accumulate into an optional adjoint slot, materialising zeros on first use.
fn acc(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(t.data_mut());
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out[j] += Σ_rows x[i,j]` — the bias adjoint of a broadcast add.
fn col_sums_acc(out: &mut [f64], x: &[f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
            *o += v;
        }
    }
}

/// `out += g` where the forward input was positive, else nothing (ReLU mask).
fn masked_axpy(out: &mut [f64], g: &[f64], forward_input: &[f64]) {
    for (o, (gv, xv)) in out.iter_mut().zip(g.iter().zip(forward_input)) {
        if *xv > 0.0 {
            *o += gv;
        }
    }
}
