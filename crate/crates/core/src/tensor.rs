//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Everything in this crate that needs gradients (the SE residual block, the
//! cross-attention branches, the detection head and its loss) is expressed
//! through [`Tape`] operations. The tape records one node per operation, in
//! execution order, so the backward pass is a single reverse sweep with
//! deterministic accumulation. Tensors are immutable after creation; a tensor
//! participates in differentiation iff it carries a node id on some tape.
//!
//! All arithmetic is f64. Desk-scale problem sizes make the precision
//! headroom cheap, and the finite-difference checks in [`finite_diff_check`]
//! rely on it.

use std::sync::Arc;
use thiserror::Error;

/// Handle into a [`Tape`]'s node list.
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {0:?} has a zero extent")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("unsupported conv kernel size {0}, expected 1 or 3")]
    UnsupportedKernel(usize),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss tensor is not recorded on this tape")]
    DetachedLoss,
    #[error("bce target {0} outside [0, 1]")]
    TargetOutOfRange(f64),
}

/// Dense row-major f64 tensor.
///
/// Cloning is cheap (the buffer is shared). `node` is the optional tape
/// handle; it is `Some` exactly when the tensor is gradient-enabled.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![value; numel], shape).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![value], &[1]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn grad_enabled(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row-major element access by multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }
}

/// One recorded operation. Saved buffers are whatever the backward rule
/// needs; they share storage with the forward tensors.
#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// x: rows x cols, bias: cols, broadcast over rows.
    AddBias {
        x: NodeId,
        bias: NodeId,
        rows: usize,
        cols: usize,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        a_val: Arc<Vec<f64>>,
        b_val: Arc<Vec<f64>>,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
        numel: usize,
    },
    /// Mean over the leading axis: (groups, inner) -> (inner).
    MeanAxis0 {
        x: NodeId,
        groups: usize,
        inner: usize,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        a_val: Arc<Vec<f64>>,
        b_val: Arc<Vec<f64>>,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
        y: Arc<Vec<f64>>,
    },
    Relu {
        x: NodeId,
        x_val: Arc<Vec<f64>>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
        y: Arc<Vec<f64>>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        k: usize,
        c_in: usize,
        c_out: usize,
        h: usize,
        wid: usize,
        x_val: Arc<Vec<f64>>,
        w_val: Arc<Vec<f64>>,
    },
    GlobalAvgPool {
        x: NodeId,
        c: usize,
        spatial: usize,
    },
    /// y[c, s] = x[c, s] * gate[c] for x: C x spatial, gate: C.
    ChannelScale {
        x: NodeId,
        gate: NodeId,
        c: usize,
        spatial: usize,
        x_val: Arc<Vec<f64>>,
        gate_val: Arc<Vec<f64>>,
    },
    /// Mean over elements of pos_weight * t * softplus(-l) + (1-t) * softplus(l).
    WeightedBce {
        logits: NodeId,
        targets: Arc<Vec<f64>>,
        pos_weight: f64,
        logits_val: Arc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradientMap {
    /// Gradient of the loss with respect to `t`. `None` if `t` is not on the
    /// tape; a zero tensor if it is on the tape but the loss does not depend
    /// on it.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node?;
        if id >= self.grads.len() {
            return None;
        }
        let shape = &self.shapes[id];
        let data = match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor::from_vec(data, shape).expect("gradient shape"))
    }

    pub fn grad_by_id(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id)?.as_deref()
    }
}

/// Wengert-style tape. Single-threaded by contract: one tape is never used
/// from two threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    /// Every node's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(id, node)| {
            let mut ok = true;
            for_each_input(&node.op, |input| ok &= input < id);
            ok
        })
    }

    /// Register a gradient-enabled leaf holding the given values.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape.clone());
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(id),
        }
    }

    pub fn var(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(self.leaf(&t))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        debug_assert!({
            let mut ok = true;
            for_each_input(&op, |input| ok &= input < id);
            ok
        });
        self.nodes.push(Node { op, shape });
        id
    }

    /// Node id of `t`, interning untracked inputs as leaves so recorded ops
    /// always reference on-tape inputs.
    fn intern(&mut self, t: &Tensor) -> NodeId {
        match t.node {
            Some(id) => id,
            None => self.push(Op::Leaf, t.shape.clone()),
        }
    }

    fn record(&mut self, tracked: bool, op: impl FnOnce(&mut Self) -> Op, shape: &[usize]) -> Option<NodeId> {
        if !tracked {
            return None;
        }
        let op = op(self);
        Some(self.push(op, shape.to_vec()))
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let tracked = a.grad_enabled() || b.grad_enabled();
        let node = self.record(
            tracked,
            |t| Op::Add {
                a: t.intern(a),
                b: t.intern(b),
            },
            &a.shape,
        );
        Ok(Tensor {
            shape: a.shape.clone(),
            data: Arc::new(data),
            node,
        })
    }

    /// x: rows x cols plus a length-cols bias broadcast over rows.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() != 2 || bias.rank() != 1 || x.shape[1] != bias.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut data = x.data.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias.data[c];
            }
        }
        let tracked = x.grad_enabled() || bias.grad_enabled();
        let node = self.record(
            tracked,
            |t| Op::AddBias {
                x: t.intern(x),
                bias: t.intern(bias),
                rows,
                cols,
            },
            &x.shape,
        );
        Ok(Tensor {
            shape: x.shape.clone(),
            data: Arc::new(data),
            node,
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let tracked = a.grad_enabled() || b.grad_enabled();
        let node = self.record(
            tracked,
            |t| Op::Mul {
                a: t.intern(a),
                b: t.intern(b),
                a_val: Arc::clone(&a.data),
                b_val: Arc::clone(&b.data),
            },
            &a.shape,
        );
        Ok(Tensor {
            shape: a.shape.clone(),
            data: Arc::new(data),
            node,
        })
    }

    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        let data: Vec<f64> = x.data.iter().map(|v| v * factor).collect();
        let node = self.record(
            x.grad_enabled(),
            |t| Op::Scale {
                x: t.intern(x),
                factor,
            },
            &x.shape,
        );
        Tensor {
            shape: x.shape.clone(),
            data: Arc::new(data),
            node,
        }
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let total: f64 = x.data.iter().sum();
        let node = self.record(
            x.grad_enabled(),
            |t| Op::Sum {
                x: t.intern(x),
                numel: x.numel(),
            },
            &[1],
        );
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![total]),
            node,
        }
    }

    /// Mean over the leading axis of a rank >= 1 tensor.
    pub fn mean_axis0(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() < 1 {
            return Err(TensorError::InvalidShape(x.shape.clone()));
        }
        let groups = x.shape[0];
        let inner: usize = x.shape[1..].iter().product();
        let mut data = vec![0.0; inner];
        for g in 0..groups {
            for i in 0..inner {
                data[i] += x.data[g * inner + i];
            }
        }
        for v in &mut data {
            *v /= groups as f64;
        }
        let out_shape: Vec<usize> = if x.rank() == 1 { vec![1] } else { x.shape[1..].to_vec() };
        let node = self.record(
            x.grad_enabled(),
            |t| Op::MeanAxis0 {
                x: t.intern(x),
                groups,
                inner,
            },
            &out_shape,
        );
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(data),
            node,
        })
    }

    /// Standard matrix product of an m x k by a k x n tensor.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        let tracked = a.grad_enabled() || b.grad_enabled();
        let node = self.record(
            tracked,
            |t| Op::Matmul {
                a: t.intern(a),
                b: t.intern(b),
                m,
                k,
                n,
                a_val: Arc::clone(&a.data),
                b_val: Arc::clone(&b.data),
            },
            &[m, n],
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: Arc::new(data),
            node,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: x.shape.clone(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = x.data[r * cols + c];
            }
        }
        let node = self.record(
            x.grad_enabled(),
            |t| Op::Transpose {
                x: t.intern(x),
                rows,
                cols,
            },
            &[cols, rows],
        );
        Ok(Tensor {
            shape: vec![cols, rows],
            data: Arc::new(data),
            node,
        })
    }

    /// Reinterpret the element buffer under a new shape of equal element count.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(TensorError::DataLength {
                len: x.numel(),
                shape: shape.to_vec(),
            });
        }
        let node = self.record(x.grad_enabled(), |t| Op::Reshape { x: t.intern(x) }, shape);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&x.data),
            node,
        })
    }

    /// Elementwise logistic function, 1 / (1 + e^-x).
    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let y = Arc::new(data);
        let node = self.record(
            x.grad_enabled(),
            |t| Op::Sigmoid {
                x: t.intern(x),
                y: Arc::clone(&y),
            },
            &x.shape,
        );
        Tensor {
            shape: x.shape.clone(),
            data: y,
            node,
        }
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data.iter().map(|&v| v.max(0.0)).collect();
        let node = self.record(
            x.grad_enabled(),
            |t| Op::Relu {
                x: t.intern(x),
                x_val: Arc::clone(&x.data),
            },
            &x.shape,
        );
        Tensor {
            shape: x.shape.clone(),
            data: Arc::new(data),
            node,
        }
    }

    /// Max-stabilized softmax along `axis`; every slice along that axis sums
    /// to one.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: x.rank(),
            });
        }
        let data = softmax_raw(&x.data, &x.shape, axis);
        let y = Arc::new(data);
        let node = self.record(
            x.grad_enabled(),
            |t| Op::Softmax {
                x: t.intern(x),
                axis,
                y: Arc::clone(&y),
            },
            &x.shape,
        );
        Ok(Tensor {
            shape: x.shape.clone(),
            data: y,
            node,
        })
    }

    /// Same-padded 2D cross-correlation. x: C_in x H x W, w: C_out x C_in x k x k,
    /// bias: C_out, k in {1, 3}.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor, TensorError> {
        if x.rank() != 3 || w.rank() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        let k = w.shape[2];
        if k != 1 && k != 3 {
            return Err(TensorError::UnsupportedKernel(k));
        }
        if w.shape[3] != k || w.shape[1] != x.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        let (c_in, h, wid) = (x.shape[0], x.shape[1], x.shape[2]);
        let c_out = w.shape[0];
        if bias.shape != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: bias.shape.clone(),
                rhs: vec![c_out],
            });
        }
        let data = conv2d_raw(&x.data, &w.data, &bias.data, c_in, c_out, h, wid, k);
        let tracked = x.grad_enabled() || w.grad_enabled() || bias.grad_enabled();
        let node = self.record(
            tracked,
            |t| Op::Conv2d {
                x: t.intern(x),
                w: t.intern(w),
                bias: t.intern(bias),
                k,
                c_in,
                c_out,
                h,
                wid,
                x_val: Arc::clone(&x.data),
                w_val: Arc::clone(&w.data),
            },
            &[c_out, h, wid],
        );
        Ok(Tensor {
            shape: vec![c_out, h, wid],
            data: Arc::new(data),
            node,
        })
    }

    /// Per-channel spatial mean of a C x H x W tensor.
    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: x.shape.clone(),
                rhs: vec![],
            });
        }
        let c = x.shape[0];
        let spatial = x.shape[1] * x.shape[2];
        let mut data = vec![0.0; c];
        for ch in 0..c {
            let base = ch * spatial;
            data[ch] = x.data[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        }
        let node = self.record(
            x.grad_enabled(),
            |t| Op::GlobalAvgPool {
                x: t.intern(x),
                c,
                spatial,
            },
            &[c],
        );
        Ok(Tensor {
            shape: vec![c],
            data: Arc::new(data),
            node,
        })
    }

    /// Scale channel c of a C x H x W tensor by gate[c].
    pub fn channel_scale(&mut self, x: &Tensor, gate: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() != 3 || gate.rank() != 1 || gate.shape[0] != x.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_scale",
                lhs: x.shape.clone(),
                rhs: gate.shape.clone(),
            });
        }
        let c = x.shape[0];
        let spatial = x.shape[1] * x.shape[2];
        let mut data = vec![0.0; c * spatial];
        for ch in 0..c {
            let g = gate.data[ch];
            for s in 0..spatial {
                data[ch * spatial + s] = x.data[ch * spatial + s] * g;
            }
        }
        let tracked = x.grad_enabled() || gate.grad_enabled();
        let node = self.record(
            tracked,
            |t| Op::ChannelScale {
                x: t.intern(x),
                gate: t.intern(gate),
                c,
                spatial,
                x_val: Arc::clone(&x.data),
                gate_val: Arc::clone(&gate.data),
            },
            &x.shape,
        );
        Ok(Tensor {
            shape: x.shape.clone(),
            data: Arc::new(data),
            node,
        })
    }

    /// Mean binary cross-entropy on logits with a weight on the target term:
    /// mean(pos_weight * t * softplus(-l) + (1 - t) * softplus(l)).
    pub fn weighted_bce(
        &mut self,
        logits: &Tensor,
        targets: &Tensor,
        pos_weight: f64,
    ) -> Result<Tensor, TensorError> {
        if logits.shape != targets.shape {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_bce",
                lhs: logits.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        if let Some(&bad) = targets.data.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(TensorError::TargetOutOfRange(bad));
        }
        let n = logits.numel() as f64;
        let mut total = 0.0;
        for (&l, &t) in logits.data.iter().zip(targets.data.iter()) {
            total += pos_weight * t * softplus(-l) + (1.0 - t) * softplus(l);
        }
        let loss = total / n;
        let node = self.record(
            logits.grad_enabled(),
            |tp| Op::WeightedBce {
                logits: tp.intern(logits),
                targets: Arc::clone(&targets.data),
                pos_weight,
                logits_val: Arc::clone(&logits.data),
            },
            &[1],
        );
        Ok(Tensor {
            shape: vec![1],
            data: Arc::new(vec![loss]),
            node,
        })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss recorded on this tape. Visits each
    /// node exactly once, in reverse recording order, so accumulation order
    /// is deterministic.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap, TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape.clone()));
        }
        let loss_id = loss.node.ok_or(TensorError::DetachedLoss)?;
        if loss_id >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }

        Ok(GradientMap {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn propagate(&self, id: NodeId, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let numel = |node: NodeId| -> usize { self.nodes[node].shape.iter().product() };
        let mut acc = |node: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let g = grads[node].get_or_insert_with(|| vec![0.0; numel(node)]);
            f(g);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
                acc(*b, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
            }
            Op::AddBias { x, bias, rows, cols } => {
                acc(*x, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
                acc(*bias, &mut |g| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[c] += grad[r * cols + c];
                        }
                    }
                });
            }
            Op::Mul { a, b, a_val, b_val } => {
                acc(*a, &mut |g| {
                    for i in 0..grad.len() {
                        g[i] += grad[i] * b_val[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..grad.len() {
                        g[i] += grad[i] * a_val[i];
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |g| {
                    for i in 0..grad.len() {
                        g[i] += grad[i] * factor;
                    }
                });
            }
            Op::Sum { x, numel } => {
                let d = grad[0];
                acc(*x, &mut |g| {
                    for gi in g.iter_mut().take(*numel) {
                        *gi += d;
                    }
                });
            }
            Op::MeanAxis0 { x, groups, inner } => {
                let scale = 1.0 / *groups as f64;
                acc(*x, &mut |g| {
                    for gr in 0..*groups {
                        for i in 0..*inner {
                            g[gr * inner + i] += grad[i] * scale;
                        }
                    }
                });
            }
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                a_val,
                b_val,
            } => {
                let (m, k, n) = (*m, *k, *n);
                // dA = dY . B^T: row dots over contiguous rows
                acc(*a, &mut |g| {
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        let garow = &mut g[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &b_val[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            garow[p] += s;
                        }
                    }
                });
                // dB = A^T . dY: AXPY over contiguous gradient rows
                acc(*b, &mut |g| {
                    for i in 0..m {
                        let arow = &a_val[i * k..(i + 1) * k];
                        let grow = &grad[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = arow[p];
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut g[p * n..(p + 1) * n];
                            for j in 0..n {
                                gbrow[j] += av * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                acc(*x, &mut |g| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[r * cols + c] += grad[c * rows + r];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                acc(*x, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
            }
            Op::Sigmoid { x, y } => {
                acc(*x, &mut |g| {
                    for i in 0..grad.len() {
                        g[i] += grad[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu { x, x_val } => {
                acc(*x, &mut |g| {
                    for i in 0..grad.len() {
                        if x_val[i] > 0.0 {
                            g[i] += grad[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis, y } => {
                let shape = &self.nodes[id].shape;
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot += grad[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                g[idx] += y[idx] * (grad[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                k,
                c_in,
                c_out,
                h,
                wid,
                x_val,
                w_val,
            } => {
                let (k, c_in, c_out, h, wid) = (*k, *c_in, *c_out, *h, *wid);
                let pad = (k / 2) as isize;
                acc(*x, &mut |g| {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            for di in 0..k {
                                for dj in 0..k {
                                    let wv = w_val[((co * c_in + ci) * k + di) * k + dj];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let di_off = di as isize - pad;
                                    let dj_off = dj as isize - pad;
                                    let (i0_lo, i0_hi, j0_lo, j0_hi) =
                                        conv_spans(h, wid, di_off, dj_off);
                                    for i0 in i0_lo..i0_hi {
                                        let xi = (i0 as isize + di_off) as usize;
                                        let xj = (j0_lo as isize + dj_off) as usize;
                                        let span = j0_hi - j0_lo;
                                        let grow = &grad[(co * h + i0) * wid + j0_lo..][..span];
                                        let gxrow = &mut g[(ci * h + xi) * wid + xj..][..span];
                                        for t in 0..span {
                                            gxrow[t] += wv * grow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            for di in 0..k {
                                for dj in 0..k {
                                    let di_off = di as isize - pad;
                                    let dj_off = dj as isize - pad;
                                    let (i0_lo, i0_hi, j0_lo, j0_hi) =
                                        conv_spans(h, wid, di_off, dj_off);
                                    let mut s = 0.0;
                                    for i0 in i0_lo..i0_hi {
                                        let xi = (i0 as isize + di_off) as usize;
                                        let xj = (j0_lo as isize + dj_off) as usize;
                                        let span = j0_hi - j0_lo;
                                        let grow = &grad[(co * h + i0) * wid + j0_lo..][..span];
                                        let xrow = &x_val[(ci * h + xi) * wid + xj..][..span];
                                        for t in 0..span {
                                            s += grow[t] * xrow[t];
                                        }
                                    }
                                    g[((co * c_in + ci) * k + di) * k + dj] += s;
                                }
                            }
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for co in 0..c_out {
                        let mut s = 0.0;
                        for s0 in 0..h * wid {
                            s += grad[co * h * wid + s0];
                        }
                        g[co] += s;
                    }
                });
            }
            Op::GlobalAvgPool { x, c, spatial } => {
                let scale = 1.0 / *spatial as f64;
                acc(*x, &mut |g| {
                    for ch in 0..*c {
                        let d = grad[ch] * scale;
                        for s in 0..*spatial {
                            g[ch * spatial + s] += d;
                        }
                    }
                });
            }
            Op::ChannelScale {
                x,
                gate,
                c,
                spatial,
                x_val,
                gate_val,
            } => {
                acc(*x, &mut |g| {
                    for ch in 0..*c {
                        let gv = gate_val[ch];
                        for s in 0..*spatial {
                            g[ch * spatial + s] += grad[ch * spatial + s] * gv;
                        }
                    }
                });
                acc(*gate, &mut |g| {
                    for ch in 0..*c {
                        let mut s = 0.0;
                        for sp in 0..*spatial {
                            s += grad[ch * spatial + sp] * x_val[ch * spatial + sp];
                        }
                        g[ch] += s;
                    }
                });
            }
            Op::WeightedBce {
                logits,
                targets,
                pos_weight,
                logits_val,
            } => {
                let n = logits_val.len() as f64;
                let d = grad[0] / n;
                acc(*logits, &mut |g| {
                    for i in 0..logits_val.len() {
                        let l = logits_val[i];
                        let t = targets[i];
                        // d/dl of [w t softplus(-l) + (1-t) softplus(l)]
                        g[i] += d * (-pos_weight * t * sigmoid_scalar(-l)
                            + (1.0 - t) * sigmoid_scalar(l));
                    }
                });
            }
        }
    }
}

fn for_each_input(op: &Op, mut f: impl FnMut(NodeId)) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Mul { a, b, .. } | Op::Matmul { a, b, .. } => {
            f(*a);
            f(*b);
        }
        Op::AddBias { x, bias, .. } => {
            f(*x);
            f(*bias);
        }
        Op::Scale { x, .. }
        | Op::Sum { x, .. }
        | Op::MeanAxis0 { x, .. }
        | Op::Transpose { x, .. }
        | Op::Reshape { x }
        | Op::Sigmoid { x, .. }
        | Op::Relu { x, .. }
        | Op::Softmax { x, .. }
        | Op::GlobalAvgPool { x, .. } => f(*x),
        Op::Conv2d { x, w, bias, .. } => {
            f(*x);
            f(*w);
            f(*bias);
        }
        Op::ChannelScale { x, gate, .. } => {
            f(*x);
            f(*gate);
        }
        Op::WeightedBce { logits, .. } => f(*logits),
    }
}

// ── Raw kernels shared by forward paths ─────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(data[base + l * inner]);
            }
            let mut total = 0.0;
            for l in 0..lane {
                let e = (data[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                total += e;
            }
            for l in 0..lane {
                out[base + l * inner] /= total;
            }
        }
    }
    out
}

/// Valid output-row range and in-row span for a kernel offset: returns
/// (i0_lo, i0_hi, j0_lo, j0_hi) such that x index (i0 + di_off, j0 + dj_off)
/// stays in bounds for i0 in [i0_lo, i0_hi) and j0 in [j0_lo, j0_hi).
#[inline]
fn conv_spans(h: usize, wid: usize, di_off: isize, dj_off: isize) -> (usize, usize, usize, usize) {
    let i0_lo = (-di_off).max(0) as usize;
    let i0_hi = (h as isize).min(h as isize - di_off).max(0) as usize;
    let j0_lo = (-dj_off).max(0) as usize;
    let j0_hi = (wid as isize).min(wid as isize - dj_off).max(0) as usize;
    (i0_lo, i0_hi, j0_lo, j0_hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    wid: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let plane = h * wid;
    let mut out = vec![0.0; c_out * plane];
    for co in 0..c_out {
        out[co * plane..(co + 1) * plane].fill(bias[co]);
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            for di in 0..k {
                for dj in 0..k {
                    let wv = w[((co * c_in + ci) * k + di) * k + dj];
                    if wv == 0.0 {
                        continue;
                    }
                    let di_off = di as isize - pad;
                    let dj_off = dj as isize - pad;
                    let (i0_lo, i0_hi, j0_lo, j0_hi) = conv_spans(h, wid, di_off, dj_off);
                    for i0 in i0_lo..i0_hi {
                        let xi = (i0 as isize + di_off) as usize;
                        let xj = (j0_lo as isize + dj_off) as usize;
                        let span = j0_hi - j0_lo;
                        let xrow = &x[(ci * h + xi) * wid + xj..][..span];
                        let orow = &mut out[(co * h + i0) * wid + j0_lo..][..span];
                        for t in 0..span {
                            orow[t] += wv * xrow[t];
                        }
                    }
                }
            }
        }
    }
    out
}

// ── Finite-difference checking ──────────────────────────────────────

/// Worst relative error between two gradient buffers, with denominator
/// max(|a|, |b|, 1e-8).
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of several tensors.
/// Each returned buffer matches the corresponding input's element count.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>,
{
    let eval = |points: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        Ok(f(&mut tape, points)?.item())
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let probe = |delta: f64| -> Result<f64, TensorError> {
                let mut points: Vec<Tensor> = inputs.to_vec();
                let mut data = input.data.to_vec();
                data[i] += delta;
                points[which] = Tensor::from_vec(data, &input.shape)?;
                eval(&points)
            };
            let hi = probe(eps)?;
            let lo = probe(-eps)?;
            g[i] = (hi - lo) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compare tape gradients of a scalar function against central finite
/// differences over all inputs jointly; returns the worst relative error.
pub fn finite_diff_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &leaves)?;
    let map = tape.backward(&loss)?;

    let numeric = numeric_gradient(&f, inputs, eps)?;
    let mut worst: f64 = 0.0;
    for (leaf, fd) in leaves.iter().zip(&numeric) {
        let analytic = map
            .grad(leaf)
            .expect("leaf gradient present after backward");
        worst = worst.max(max_rel_error(analytic.data(), fd));
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_multi`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    finite_diff_check_multi(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[2]).is_ok());
        assert!(matches!(
            Tensor::from_vec(vec![1.0], &[2]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::from_vec(vec![], &[0]),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = tape.matmul(&eye, &m).unwrap();
        assert_eq!(y.data(), m.data());
    }

    #[test]
    fn matmul_basis_selection() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![2.0, 5.0], &[2, 1]).unwrap();
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[2.0]);
    }

    /// Independent oracle: plain ijk triple loop.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut tape = Tape::new();
        let y = tape.matmul(&a, &b).unwrap();
        let expect = matmul_oracle(&a, &b);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_single_logit() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let one = Tensor::from_vec(vec![3.7], &[1]).unwrap();
        let y = tape.softmax(&one, 0).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        // Direct exp-normalize oracle.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in y.data().iter().zip(&exps) {
            assert!((got - e / total).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            tape.softmax(&x, 2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_slices_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[3, 4, 2]);
            for axis in 0..3 {
                let mut tape = Tape::new();
                let y = tape.softmax(&x, axis).unwrap();
                // sums along axis
                let lane = x.shape()[axis];
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let outer: usize = x.shape()[..axis].iter().product();
                for o in 0..outer {
                    for i in 0..inner {
                        let s: f64 = (0..lane)
                            .map(|l| y.data()[o * lane * inner + l * inner + i])
                            .sum();
                        assert!((s - 1.0).abs() <= 1e-12);
                    }
                }
                // shift invariance
                let shifted =
                    Tensor::from_vec(x.data().iter().map(|v| v + 5.0).collect(), x.shape())
                        .unwrap();
                let y2 = tape.softmax(&shifted, axis).unwrap();
                for (a, b) in y.data().iter().zip(y2.data()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0, 1e3, -2.0], &[3]).unwrap();
        let y = tape.sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() <= 1e-12);
        // direct formula oracle
        let direct = 1.0 / (1.0 + (2.0f64).exp());
        assert!((y.data()[2] - direct).abs() <= 1e-15);
        assert!(y.data()[2].to_string().starts_with("0.11920292"));
    }

    #[test]
    fn conv2d_identity_1x1() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        // channel-identity 1x1 kernel
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = tape.conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_impulse_response() {
        let mut tape = Tape::new();
        let mut x = vec![0.0; 25];
        x[2 * 5 + 2] = 1.0;
        let x = Tensor::from_vec(x, &[1, 5, 5]).unwrap();
        let w = Tensor::from_vec(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = tape.conv2d(&x, &w, &b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(y.at(&[0, i, j]), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    /// Naive six-loop oracle with explicit zero padding.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (c_in, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; c_out * h * wid];
        for co in 0..c_out {
            for i0 in 0..h as isize {
                for j0 in 0..wid as isize {
                    let mut s = b.data()[co];
                    for ci in 0..c_in {
                        for di in 0..k as isize {
                            for dj in 0..k as isize {
                                let i = i0 + di - pad;
                                let j = j0 + dj - pad;
                                if i < 0 || j < 0 || i >= h as isize || j >= wid as isize {
                                    continue;
                                }
                                s += x.at(&[ci, i as usize, j as usize])
                                    * w.at(&[co, ci, di as usize, dj as usize]);
                            }
                        }
                    }
                    out[(co * h + i0 as usize) * wid + j0 as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 8, 8]);
        for k in [1usize, 3] {
            let w = rand_tensor(&mut rng, &[3, 4, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            let mut tape = Tape::new();
            let y = tape.conv2d(&x, &w, &b).unwrap();
            let expect = conv_oracle(&x, &w, &b);
            for (got, want) in y.data().iter().zip(&expect) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_kernel_and_channels() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 4, 4]);
        let w5 = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            tape.conv2d(&x, &w5, &Tensor::zeros(&[1])),
            Err(TensorError::UnsupportedKernel(5))
        ));
        let w_bad = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(tape.conv2d(&x, &w_bad, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn global_avg_pool_values() {
        let mut tape = Tape::new();
        let konst = Tensor::full(&[3, 2, 2], 4.5);
        let y = tape.global_avg_pool(&konst).unwrap();
        assert_eq!(y.data(), &[4.5, 4.5, 4.5]);

        let two_point = Tensor::from_vec(vec![0.0, 2.0], &[1, 1, 2]).unwrap();
        let y = tape.global_avg_pool(&two_point).unwrap();
        assert_eq!(y.data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[3, 5, 7]);
        let y = tape.global_avg_pool(&x).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            let mut n = 0usize;
            for i in 0..5 {
                for j in 0..7 {
                    s += x.at(&[c, i, j]);
                    n += 1;
                }
            }
            assert!((y.data()[c] - s / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        // loss = sum(x) -> grad all ones
        let mut tape = Tape::new();
        let x = tape.var(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0]);

        // loss = sum(x*x)/2 -> grad x
        let mut tape = Tape::new();
        let x = tape.var(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq);
        let loss = tape.scale(&s, 0.5);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.grad(&x).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_diamond_accumulates_once_per_path() {
        // d = 2a + 3a; grad a must be exactly 5
        let mut tape = Tape::new();
        let a = tape.var(vec![1.5], &[1]).unwrap();
        let b = tape.scale(&a, 2.0);
        let c = tape.scale(&a, 3.0);
        let d = tape.add(&b, &c).unwrap();
        let grads = tape.backward(&d).unwrap();
        assert_eq!(grads.grad(&a).unwrap().data(), &[5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_loss() {
        let mut tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            tape.backward(&x),
            Err(TensorError::NonScalarLoss(_))
        ));
        let detached = Tensor::scalar(1.0);
        assert!(matches!(
            tape.backward(&detached),
            Err(TensorError::DetachedLoss)
        ));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = tape.sigmoid(&x);
        let z = tape.mul(&x, &y).unwrap();
        let _ = tape.sum(&z);
        assert!(tape.is_topologically_ordered());
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn finite_diff_exact_for_linear() {
        let x = Tensor::from_vec(vec![0.3, -0.8, 2.0], &[3]).unwrap();
        let err = finite_diff_check(|tape, x| Ok(tape.sum(x)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "linear fd error {err}");
    }

    #[test]
    fn finite_diff_softmax_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[6]);
            let w = rand_tensor(&mut rng, &[6]);
            let err = finite_diff_check(
                |tape, x| {
                    let s = tape.softmax(x, 0)?;
                    let p = tape.mul(&s, &w)?;
                    Ok(tape.sum(&p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "softmax-dot fd error {err}");
        }
    }

    #[test]
    fn finite_diff_through_each_op() {
        for seed in 0..20u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut r, &[2, 3, 3]);
            let w = rand_tensor(&mut r, &[2, 2, 3, 3]);
            let b = rand_tensor(&mut r, &[2]);
            let gate = rand_tensor(&mut r, &[2]);
            let err = finite_diff_check_multi(
                |tape, inputs| {
                    let (x, w, b, gate) = (&inputs[0], &inputs[1], &inputs[2], &inputs[3]);
                    let scaled = tape.channel_scale(x, gate)?;
                    let conv = tape.conv2d(&scaled, w, b)?;
                    let act = tape.relu(&conv);
                    let gap = tape.global_avg_pool(&act)?;
                    let sig = tape.sigmoid(&gap);
                    Ok(tape.sum(&sig))
                },
                &[x, w, b, gate],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "composite fd error {err} at seed {seed}");
        }
    }

    #[test]
    fn finite_diff_matmul_transpose_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 2]);
        let bias = rand_tensor(&mut rng, &[2]);
        let err = finite_diff_check_multi(
            |tape, inputs| {
                let at = tape.transpose(&inputs[0])?;
                let prod = tape.matmul(&at, &inputs[1])?;
                let biased = tape.add_bias(&prod, &inputs[2])?;
                let soft = tape.softmax(&biased, 1)?;
                let sq = tape.mul(&soft, &soft)?;
                Ok(tape.sum(&sq))
            },
            &[a, b, bias],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "matmul chain fd error {err}");
    }

    #[test]
    fn finite_diff_weighted_bce_and_mean_axis0() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let logits = rand_tensor(&mut rng, &[2, 3, 3]);
        let targets = Tensor::from_vec(
            (0..9).map(|_| rng.gen_range(0.02..0.98)).collect(),
            &[3, 3],
        )
        .unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let m = tape.mean_axis0(x)?;
                tape.weighted_bce(&m, &targets, 3.0)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "bce fd error {err}");
    }

    #[test]
    fn corrupted_gradient_rule_fails_check() {
        // Negative control: a deliberately wrong analytic gradient must be
        // flagged by the finite-difference comparison.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[5]);
        let f = |tape: &mut Tape, xs: &[Tensor]| {
            let s = tape.sigmoid(&xs[0]);
            Ok(tape.sum(&s))
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x);
        let loss = f(&mut tape, &[leaf.clone()]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut corrupted = grads.grad(&leaf).unwrap().data().to_vec();
        for g in &mut corrupted {
            *g *= 1.1; // broken-by-construction chain rule
        }
        let numeric = numeric_gradient(f, std::slice::from_ref(&x), 1e-5).unwrap();
        let err = max_rel_error(&corrupted, &numeric[0]);
        assert!(err > 1e-2, "corrupted gradient slipped through: {err}");
    }

    #[test]
    fn weighted_bce_rejects_out_of_range_targets() {
        let mut tape = Tape::new();
        let logits = Tensor::zeros(&[2]);
        let targets = Tensor::from_vec(vec![0.5, 1.5], &[2]).unwrap();
        assert!(matches!(
            tape.weighted_bce(&logits, &targets, 1.0),
            Err(TensorError::TargetOutOfRange(v)) if v == 1.5
        ));
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let mut tape = Tape::new();
        let a = tape.matmul(&x, &w).unwrap();
        let b = tape.matmul(&x, &w).unwrap();
        assert_eq!(a.data(), b.data());
        let s1 = tape.softmax(&a, 1).unwrap();
        let s2 = tape.softmax(&a, 1).unwrap();
        assert_eq!(s1.data(), s2.data());
    }
}
