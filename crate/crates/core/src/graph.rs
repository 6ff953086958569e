//! Eager tape-based automatic differentiation.
//!
//! Every operation computes its value immediately and records a node on the
//! tape. [`Graph::grad`] walks the tape in reverse and *builds the gradient
//! out of ordinary tape operations*, so gradients are themselves
//! differentiable — which is what the gradient penalty on real images needs
//! (a gradient of a gradient with respect to discriminator weights).
//!
//! The op set is deliberately small: exactly what a convolutional
//! generator/discriminator pair and the training losses require. Convolution
//! comes as three mutually-adjoint primitives (`conv2d`, input-gradient,
//! weight-gradient) that are closed under differentiation.

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<T> {
    /// External input (parameter, data, noise). May require gradients.
    Leaf,
    /// Internally created value that never receives gradients (masks, seeds).
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    /// max(x, slope*x); the backward mask is treated as locally constant.
    LeakyRelu(NodeId, T),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose2(NodeId),
    Reshape(NodeId),
    Conv2d { x: NodeId, w: NodeId, pad: usize },
    ConvBwdInput { gy: NodeId, w: NodeId, pad: usize },
    ConvBwdWeight { x: NodeId, gy: NodeId, pad: usize },
    Upsample2(NodeId),
    SumPool2(NodeId),
    /// x[n,c,h,w] * s[c], broadcast over n,h,w.
    MulChannel(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    /// Sum over n,h,w -> [c].
    SumChannel(NodeId),
    BroadcastChannel(NodeId),
    /// x[m,n] + b[n], broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// Sum over rows: [m,n] -> [n].
    SumRowsAxis0(NodeId),
    BroadcastRows(NodeId),
    /// Sum over columns: [m,n] -> [m].
    RowSums(NodeId),
    /// x[m,n] with row i scaled by v[i].
    MulColBroadcast(NodeId, NodeId),
    BroadcastCols(NodeId),
    SumAll(NodeId),
    BroadcastAll(NodeId),
    /// [n,n] -> [n,n-1], removing the diagonal from each row.
    DropDiag(NodeId),
    /// [n,n-1] -> [n,n], inverse scatter of `DropDiag` with zero diagonal.
    ScatterOffDiag(NodeId),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. Construct one per training step (or per evaluation), record the
/// forward pass, take gradients, read values off.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert an external value. `needs_grad` marks it as a differentiation
    /// target; frozen parameters are inserted with `false` and never receive
    /// gradient nodes at all.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Insert a value that is constant for differentiation purposes.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    // ---- elementwise -----------------------------------------------------

    fn zip2(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(data, ta.shape())
    }

    fn map1(&self, a: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        self.nodes[a.0].value.map(f)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, |x| -x);
        let g = self.ng(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, |x| T::one() / x);
        let g = self.ng(a);
        self.push(v, Op::Recip(a), g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, |x| x.sqrt());
        let g = self.ng(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, |x| x.exp());
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, |x| x.ln());
        let g = self.ng(a);
        self.push(v, Op::Ln(a), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, |x| x.tanh());
        let g = self.ng(a);
        self.push(v, Op::Tanh(a), g)
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, softplus_stable);
        let g = self.ng(a);
        self.push(v, Op::Softplus(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.map1(a, sigmoid_stable);
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let v = self.map1(a, |x| if x > T::zero() { x } else { slope * x });
        let g = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.map1(a, |x| c * x);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.map1(a, |x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a, c), g)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d");
        assert_eq!(sa[1], sb[0], "matmul inner dims {}x{}", sa[1], sb[0]);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), g)
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[n, m]);
        let src = ta.data();
        let dst = out.data_mut();
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
        let g = self.ng(a);
        self.push(out, Op::Transpose2(a), g)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0].value.reshaped(shape);
        let g = self.ng(a);
        self.push(v, Op::Reshape(a), g)
    }

    // ---- convolution ------------------------------------------------------

    /// 2-d convolution, stride 1, square odd kernel, "same" padding
    /// (`pad = (k-1)/2`). x: [n,ci,h,w], w: [co,ci,k,k] -> [n,co,h,w].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        assert_eq!(sx.len(), 4, "conv input must be 4-d");
        assert_eq!(sw.len(), 4, "conv kernel must be 4-d");
        assert_eq!(sx[1], sw[1], "conv channel mismatch");
        assert_eq!(sw[2], sw[3], "conv kernel must be square");
        assert_eq!(sw[2] % 2, 1, "conv kernel must be odd");
        let pad = (sw[2] - 1) / 2;
        let v = conv_fwd(tx, tw, pad);
        let g = self.ng(x) || self.ng(w);
        self.push(v, Op::Conv2d { x, w, pad }, g)
    }

    fn conv_bwd_input_op(&mut self, gy: NodeId, w: NodeId, pad: usize) -> NodeId {
        let v = conv_bwd_input(&self.nodes[gy.0].value, &self.nodes[w.0].value, pad);
        let g = self.ng(gy) || self.ng(w);
        self.push(v, Op::ConvBwdInput { gy, w, pad }, g)
    }

    fn conv_bwd_weight_op(&mut self, x: NodeId, gy: NodeId, pad: usize, kh: usize, kw: usize) -> NodeId {
        let v = conv_bwd_weight(&self.nodes[x.0].value, &self.nodes[gy.0].value, pad, kh, kw);
        let g = self.ng(x) || self.ng(gy);
        self.push(v, Op::ConvBwdWeight { x, gy, pad }, g)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let src = ta.data();
            let dst = out.data_mut();
            for nc in 0..n * c {
                let so = nc * h * w;
                let d_o = nc * 4 * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let v = src[so + y * w + x];
                        let base = d_o + 2 * y * 2 * w + 2 * x;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + 2 * w] = v;
                        dst[base + 2 * w + 1] = v;
                    }
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::Upsample2(a), g)
    }

    /// 2x2 sum pooling (multiply by 0.25 for average pooling).
    pub fn sum_pool2(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let src = ta.data();
            let dst = out.data_mut();
            for nc in 0..n * c {
                let so = nc * h * w;
                let d_o = nc * oh * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        let base = so + 2 * y * w + 2 * x;
                        dst[d_o + y * ow + x] =
                            src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
                    }
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::SumPool2(a), g)
    }

    // ---- broadcasts and reductions -----------------------------------------

    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let v = channel_broadcast(&self.nodes[x.0].value, &self.nodes[s.0].value, |a, b| a * b);
        let g = self.ng(x) || self.ng(s);
        self.push(v, Op::MulChannel(x, s), g)
    }

    pub fn add_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let v = channel_broadcast(&self.nodes[x.0].value, &self.nodes[b.0].value, |a, c| a + c);
        let g = self.ng(x) || self.ng(b);
        self.push(v, Op::AddChannel(x, b), g)
    }

    pub fn sum_channel(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[c]);
        {
            let src = tx.data();
            let dst = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let mut acc = T::zero();
                    for i in 0..h * w {
                        acc = acc + src[base + i];
                    }
                    dst[ci] = dst[ci] + acc;
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::SumChannel(x), g)
    }

    pub fn broadcast_channel(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let ts = &self.nodes[s.0].value;
        assert_eq!(shape.len(), 4);
        assert_eq!(ts.shape(), &[shape[1]], "broadcast_channel length");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = Tensor::zeros(shape);
        {
            let src = ts.data();
            let dst = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        dst[base + i] = src[ci];
                    }
                }
            }
        }
        let g = self.ng(s);
        self.push(out, Op::BroadcastChannel(s), g)
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let s = tx.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(tb.shape(), &[s[1]]);
        let (m, n) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[m, n]);
        {
            let (src, bias) = (tx.data(), tb.data());
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[i * n + j] = src[i * n + j] + bias[j];
                }
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRowBroadcast(x, b), g)
    }

    pub fn sum_rows_axis0(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[n]);
        {
            let src = tx.data();
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[j] = dst[j] + src[i * n + j];
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::SumRowsAxis0(x), g)
    }

    pub fn broadcast_rows(&mut self, v: NodeId, m: usize) -> NodeId {
        let tv = &self.nodes[v.0].value;
        assert_eq!(tv.shape().len(), 1);
        let n = tv.shape()[0];
        let mut out = Tensor::zeros(&[m, n]);
        {
            let src = tv.data();
            let dst = out.data_mut();
            for i in 0..m {
                dst[i * n..(i + 1) * n].copy_from_slice(src);
            }
        }
        let g = self.ng(v);
        self.push(out, Op::BroadcastRows(v), g)
    }

    pub fn row_sums(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[m]);
        {
            let src = tx.data();
            let dst = out.data_mut();
            for i in 0..m {
                let mut acc = T::zero();
                for j in 0..n {
                    acc = acc + src[i * n + j];
                }
                dst[i] = acc;
            }
        }
        let g = self.ng(x);
        self.push(out, Op::RowSums(x), g)
    }

    pub fn mul_col_broadcast(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (tx, tv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let s = tx.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(tv.shape(), &[s[0]]);
        let (m, n) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[m, n]);
        {
            let (src, sv) = (tx.data(), tv.data());
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[i * n + j] = src[i * n + j] * sv[i];
                }
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(out, Op::MulColBroadcast(x, v), g)
    }

    pub fn broadcast_cols(&mut self, v: NodeId, n: usize) -> NodeId {
        let tv = &self.nodes[v.0].value;
        assert_eq!(tv.shape().len(), 1);
        let m = tv.shape()[0];
        let mut out = Tensor::zeros(&[m, n]);
        {
            let src = tv.data();
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[i * n + j] = src[i];
                }
            }
        }
        let g = self.ng(v);
        self.push(out, Op::BroadcastCols(v), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let mut acc = T::zero();
        for &v in ta.data() {
            acc = acc + v;
        }
        let g = self.ng(a);
        self.push(Tensor::scalar(acc), Op::SumAll(a), g)
    }

    pub fn broadcast_all(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let ts = &self.nodes[s.0].value;
        let v = ts.item();
        let g = self.ng(s);
        self.push(Tensor::filled(shape, v), Op::BroadcastAll(s), g)
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn drop_diag(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], s[1], "drop_diag needs a square matrix");
        let n = s[0];
        assert!(n >= 2);
        let mut out = Tensor::zeros(&[n, n - 1]);
        {
            let src = ta.data();
            let dst = out.data_mut();
            for i in 0..n {
                for j in 0..n - 1 {
                    let col = if j < i { j } else { j + 1 };
                    dst[i * (n - 1) + j] = src[i * n + col];
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::DropDiag(a), g)
    }

    pub fn scatter_off_diag(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        assert_eq!(s.len(), 2);
        let n = s[0];
        assert_eq!(s[1], n - 1, "scatter_off_diag needs [n, n-1]");
        let mut out = Tensor::zeros(&[n, n]);
        {
            let src = ta.data();
            let dst = out.data_mut();
            for i in 0..n {
                for j in 0..n - 1 {
                    let col = if j < i { j } else { j + 1 };
                    dst[i * n + col] = src[i * (n - 1) + j];
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::ScatterOffDiag(a), g)
    }

    // ---- differentiation ---------------------------------------------------

    /// Reverse-mode gradient of scalar `y` with respect to each node in
    /// `wrt`. Returns `None` for nodes `y` does not depend on (including all
    /// frozen leaves). The gradients are new tape nodes, so they can be fed
    /// back into further computation and differentiated again.
    pub fn grad(&mut self, y: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(self.nodes[y.0].value.numel(), 1, "grad target must be scalar");
        let frontier = self.nodes.len();
        let mut adj: Vec<Option<NodeId>> = vec![None; frontier];
        if self.nodes[y.0].needs_grad {
            let seed = self.constant(Tensor::scalar(T::one()));
            adj[y.0] = Some(seed);
        }
        for id in (0..=y.0).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            self.backprop_one(NodeId(id), g, op, &mut adj);
        }
        wrt.iter()
            .map(|w| {
                assert!(w.0 < frontier, "wrt node created after grad frontier");
                adj[w.0]
            })
            .collect()
    }

    /// Gradient values (materialized tensors, zeros where independent).
    pub fn grad_values(&mut self, y: NodeId, wrt: &[NodeId]) -> Vec<Tensor<T>> {
        let ids = self.grad(y, wrt);
        ids.iter()
            .zip(wrt.iter())
            .map(|(g, w)| match g {
                Some(id) => self.nodes[id.0].value.clone(),
                None => Tensor::zeros(self.nodes[w.0].value.shape()),
            })
            .collect()
    }

    fn accum(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            Some(existing) => self.add(existing, contrib),
            None => contrib,
        });
    }

    fn backprop_one(&mut self, out: NodeId, g: NodeId, op: Op<T>, adj: &mut [Option<NodeId>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum(adj, a, g);
                self.accum(adj, b, g);
            }
            Op::Sub(a, b) => {
                self.accum(adj, a, g);
                if self.ng(b) {
                    let n = self.neg(g);
                    self.accum(adj, b, n);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let c = self.mul(g, b);
                    self.accum(adj, a, c);
                }
                if self.ng(b) {
                    let c = self.mul(g, a);
                    self.accum(adj, b, c);
                }
            }
            Op::Neg(a) => {
                if self.ng(a) {
                    let c = self.neg(g);
                    self.accum(adj, a, c);
                }
            }
            Op::Recip(a) => {
                // d(1/a) = -y^2 da
                if self.ng(a) {
                    let y2 = self.mul(out, out);
                    let gy2 = self.mul(g, y2);
                    let c = self.neg(gy2);
                    self.accum(adj, a, c);
                }
            }
            Op::Sqrt(a) => {
                // d(sqrt a) = g / (2 sqrt a)
                if self.ng(a) {
                    let r = self.recip(out);
                    let half = self.scale(r, T::of(0.5));
                    let c = self.mul(g, half);
                    self.accum(adj, a, c);
                }
            }
            Op::Exp(a) => {
                if self.ng(a) {
                    let c = self.mul(g, out);
                    self.accum(adj, a, c);
                }
            }
            Op::Ln(a) => {
                if self.ng(a) {
                    let r = self.recip(a);
                    let c = self.mul(g, r);
                    self.accum(adj, a, c);
                }
            }
            Op::Tanh(a) => {
                // 1 - tanh^2
                if self.ng(a) {
                    let y2 = self.mul(out, out);
                    let ny2 = self.neg(y2);
                    let d = self.add_scalar(ny2, T::one());
                    let c = self.mul(g, d);
                    self.accum(adj, a, c);
                }
            }
            Op::Softplus(a) => {
                if self.ng(a) {
                    let s = self.sigmoid(a);
                    let c = self.mul(g, s);
                    self.accum(adj, a, c);
                }
            }
            Op::Sigmoid(a) => {
                // y (1 - y)
                if self.ng(a) {
                    let ny = self.neg(out);
                    let om = self.add_scalar(ny, T::one());
                    let d = self.mul(out, om);
                    let c = self.mul(g, d);
                    self.accum(adj, a, c);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.ng(a) {
                    let mask = self.nodes[a.0]
                        .value
                        .map(|x| if x > T::zero() { T::one() } else { slope });
                    let m = self.constant(mask);
                    let c = self.mul(g, m);
                    self.accum(adj, a, c);
                }
            }
            Op::Scale(a, k) => {
                if self.ng(a) {
                    let c = self.scale(g, k);
                    self.accum(adj, a, c);
                }
            }
            Op::AddScalar(a, _) => {
                self.accum(adj, a, g);
            }
            Op::MatMul(a, b) => {
                if self.ng(a) {
                    let bt = self.transpose2(b);
                    let c = self.matmul(g, bt);
                    self.accum(adj, a, c);
                }
                if self.ng(b) {
                    let at = self.transpose2(a);
                    let c = self.matmul(at, g);
                    self.accum(adj, b, c);
                }
            }
            Op::Transpose2(a) => {
                if self.ng(a) {
                    let c = self.transpose2(g);
                    self.accum(adj, a, c);
                }
            }
            Op::Reshape(a) => {
                if self.ng(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let c = self.reshape(g, &shape);
                    self.accum(adj, a, c);
                }
            }
            Op::Conv2d { x, w, pad } => {
                if self.ng(x) {
                    let c = self.conv_bwd_input_op(g, w, pad);
                    self.accum(adj, x, c);
                }
                if self.ng(w) {
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let c = self.conv_bwd_weight_op(x, g, pad, ws[2], ws[3]);
                    self.accum(adj, w, c);
                }
            }
            Op::ConvBwdInput { gy, w, pad } => {
                // out = B_x(gy, w); <out, u> = <gy, conv(u, w)> = <w, B_w(u, gy)>
                if self.ng(gy) {
                    let c = self.conv2d_padded(g, w, pad);
                    self.accum(adj, gy, c);
                }
                if self.ng(w) {
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let c = self.conv_bwd_weight_op(g, gy, pad, ws[2], ws[3]);
                    self.accum(adj, w, c);
                }
            }
            Op::ConvBwdWeight { x, gy, pad } => {
                // out = B_w(x, gy); <out, v> = <gy, conv(x, v)> = <x, B_x(gy, v)>
                if self.ng(x) {
                    let c = self.conv_bwd_input_op(gy, g, pad);
                    self.accum(adj, x, c);
                }
                if self.ng(gy) {
                    let c = self.conv2d_padded(x, g, pad);
                    self.accum(adj, gy, c);
                }
            }
            Op::Upsample2(a) => {
                if self.ng(a) {
                    let c = self.sum_pool2(g);
                    self.accum(adj, a, c);
                }
            }
            Op::SumPool2(a) => {
                if self.ng(a) {
                    let c = self.upsample2(g);
                    self.accum(adj, a, c);
                }
            }
            Op::MulChannel(x, s) => {
                if self.ng(x) {
                    let c = self.mul_channel(g, s);
                    self.accum(adj, x, c);
                }
                if self.ng(s) {
                    let p = self.mul(g, x);
                    let c = self.sum_channel(p);
                    self.accum(adj, s, c);
                }
            }
            Op::AddChannel(x, b) => {
                self.accum(adj, x, g);
                if self.ng(b) {
                    let c = self.sum_channel(g);
                    self.accum(adj, b, c);
                }
            }
            Op::SumChannel(x) => {
                if self.ng(x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let c = self.broadcast_channel(g, &shape);
                    self.accum(adj, x, c);
                }
            }
            Op::BroadcastChannel(s) => {
                if self.ng(s) {
                    let c = self.sum_channel(g);
                    self.accum(adj, s, c);
                }
            }
            Op::AddRowBroadcast(x, b) => {
                self.accum(adj, x, g);
                if self.ng(b) {
                    let c = self.sum_rows_axis0(g);
                    self.accum(adj, b, c);
                }
            }
            Op::SumRowsAxis0(x) => {
                if self.ng(x) {
                    let m = self.nodes[x.0].value.shape()[0];
                    let c = self.broadcast_rows(g, m);
                    self.accum(adj, x, c);
                }
            }
            Op::BroadcastRows(v) => {
                if self.ng(v) {
                    let c = self.sum_rows_axis0(g);
                    self.accum(adj, v, c);
                }
            }
            Op::RowSums(x) => {
                if self.ng(x) {
                    let n = self.nodes[x.0].value.shape()[1];
                    let c = self.broadcast_cols(g, n);
                    self.accum(adj, x, c);
                }
            }
            Op::MulColBroadcast(x, v) => {
                if self.ng(x) {
                    let c = self.mul_col_broadcast(g, v);
                    self.accum(adj, x, c);
                }
                if self.ng(v) {
                    let p = self.mul(g, x);
                    let c = self.row_sums(p);
                    self.accum(adj, v, c);
                }
            }
            Op::BroadcastCols(v) => {
                if self.ng(v) {
                    let c = self.row_sums(g);
                    self.accum(adj, v, c);
                }
            }
            Op::SumAll(a) => {
                if self.ng(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let c = self.broadcast_all(g, &shape);
                    self.accum(adj, a, c);
                }
            }
            Op::BroadcastAll(s) => {
                if self.ng(s) {
                    let c = self.sum_all(g);
                    self.accum(adj, s, c);
                }
            }
            Op::DropDiag(a) => {
                if self.ng(a) {
                    let c = self.scatter_off_diag(g);
                    self.accum(adj, a, c);
                }
            }
            Op::ScatterOffDiag(a) => {
                if self.ng(a) {
                    let c = self.drop_diag(g);
                    self.accum(adj, a, c);
                }
            }
        }
    }

    /// conv2d with an explicit pad (used internally by backward rules where
    /// pad is inherited from the forward op rather than derived from the
    /// kernel size).
    fn conv2d_padded(&mut self, x: NodeId, w: NodeId, pad: usize) -> NodeId {
        let v = conv_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, pad);
        let g = self.ng(x) || self.ng(w);
        self.push(v, Op::Conv2d { x, w, pad }, g)
    }
}

fn channel_broadcast<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "channel broadcast needs [n,c,h,w]");
    assert_eq!(s.shape(), &[sh[1]], "channel vector length mismatch");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = Tensor::zeros(sh);
    {
        let (src, sv) = (x.data(), s.data());
        let dst = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    dst[base + i] = f(src[base + i], sv[ci]);
                }
            }
        }
    }
    out
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    let pos = if x > zero { x } else { zero };
    pos + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---- convolution kernels (im2col + gemm) -----------------------------------

fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    col: &mut [T],
) {
    // col layout: [(h*w), (c*k*k)] row-major
    let ck2 = c * k * k;
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) * ck2;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad as isize;
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad as isize;
                        let idx = row + (ci * k + ky) * k + kx;
                        col[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    x: &mut [T],
) {
    let ck2 = c * k * k;
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) * ck2;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let t = (ci * h + iy as usize) * w + ix as usize;
                        x[t] = x[t] + col[row + (ci * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

fn conv_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (sx, sw) = (x.shape(), w.shape());
    let (n, ci, h, ww) = (sx[0], sx[1], sx[2], sx[3]);
    let (co, k) = (sw[0], sw[2]);
    assert_eq!(sw[1], ci);
    assert_eq!(2 * pad + 1, k, "stride-1 same-padding convolution only");
    let hw = h * ww;
    let ck2 = ci * k * k;
    let mut out = Tensor::zeros(&[n, co, h, ww]);
    let mut col = vec![T::zero(); hw * ck2];
    for ni in 0..n {
        im2col(&x.data()[ni * ci * hw..(ni + 1) * ci * hw], ci, h, ww, k, pad, &mut col);
        // out[ni] (co, hw): c[hw + co*hw] -> rsc=1 (hw index), csc=hw (co index)
        T::gemm(
            hw,
            ck2,
            co,
            T::one(),
            &col,
            ck2 as isize,
            1,
            w.data(),
            1,
            ck2 as isize,
            T::zero(),
            &mut out.data_mut()[ni * co * hw..(ni + 1) * co * hw],
            1,
            hw as isize,
        );
    }
    out
}

/// Adjoint of `conv_fwd` with respect to the input: gy [n,co,h,w] x w
/// [co,ci,k,k] -> gx [n,ci,h,w].
fn conv_bwd_input<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (sg, sw) = (gy.shape(), w.shape());
    let (n, co, h, ww) = (sg[0], sg[1], sg[2], sg[3]);
    let (ci, k) = (sw[1], sw[2]);
    assert_eq!(sw[0], co);
    let hw = h * ww;
    let ck2 = ci * k * k;
    let mut gx = Tensor::zeros(&[n, ci, h, ww]);
    let mut colgrad = vec![T::zero(); hw * ck2];
    for ni in 0..n {
        // colgrad (hw, ck2) = gy[ni] (hw, co) * wmat (co, ck2)
        T::gemm(
            hw,
            co,
            ck2,
            T::one(),
            &gy.data()[ni * co * hw..(ni + 1) * co * hw],
            1,
            hw as isize,
            w.data(),
            ck2 as isize,
            1,
            T::zero(),
            &mut colgrad,
            ck2 as isize,
            1,
        );
        col2im_add(
            &colgrad,
            ci,
            h,
            ww,
            k,
            pad,
            &mut gx.data_mut()[ni * ci * hw..(ni + 1) * ci * hw],
        );
    }
    gx
}

/// Adjoint of `conv_fwd` with respect to the kernel: x [n,ci,h,w] x gy
/// [n,co,h,w] -> gw [co,ci,k,k].
fn conv_bwd_weight<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let (sx, sg) = (x.shape(), gy.shape());
    let (n, ci, h, ww) = (sx[0], sx[1], sx[2], sx[3]);
    let co = sg[1];
    assert_eq!(sg[0], n);
    assert_eq!((sg[2], sg[3]), (h, ww));
    assert_eq!(kh, kw);
    let k = kh;
    let hw = h * ww;
    let ck2 = ci * k * k;
    let mut gw = Tensor::zeros(&[co, ci, kh, kw]);
    let mut col = vec![T::zero(); hw * ck2];
    for ni in 0..n {
        im2col(&x.data()[ni * ci * hw..(ni + 1) * ci * hw], ci, h, ww, k, pad, &mut col);
        // gw (co, ck2) += gy[ni]^T (co, hw) * col (hw, ck2)
        T::gemm(
            co,
            hw,
            ck2,
            T::one(),
            &gy.data()[ni * co * hw..(ni + 1) * co * hw],
            hw as isize,
            1,
            &col,
            ck2 as isize,
            1,
            T::one(),
            gw.data_mut(),
            ck2 as isize,
            1,
        );
    }
    gw
}
