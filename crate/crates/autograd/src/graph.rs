//! The tape: node storage, forward ops, and reverse-mode backward.

use ndarray::prelude::*;
use ndarray::linalg::general_mat_mul;

/// Dynamic-dimensional f64 array, the only tensor type the engine knows.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: usize,
    },
    Upsample2x(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Array2<f64>,
        inv_std: Array2<f64>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Arr,
        inv_std: Arr,
    },
    Silu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    SoftmaxLast(NodeId),
    Concat(usize, Vec<NodeId>),
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
}

/// Single-use computation tape.
pub struct Graph {
    values: Vec<Arr>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Arr>>,
    grad_enabled: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Numpy-style broadcast of two shapes; panics if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduce a gradient of broadcast shape back to the original operand shape.
fn unbroadcast(g: &Arr, shape: &[usize]) -> Arr {
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if shape[i] == 1 && r.shape()[i] != 1 {
            r = r.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    r
}

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d array")
}

/// Unfold one sample (C,H,W) into the (C*KH*KW, OH*OW) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input gradient (scatter-add).
#[allow(clippy::too_many_arguments)]
fn col2im_accum(
    dcols: &Array2<f64>,
    dx: &mut ArrayViewMut3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = dx.dim();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        dx[[ci, ii as usize, jj as usize]] += dcols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.values[id.0]
    }

    /// Gradient accumulated for `id` by the last `backward` call, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Arr, op: Op, requires: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires && self.grad_enabled);
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    fn binary_broadcast(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Arr {
        let sa = self.values[a.0].shape();
        let sb = self.values[b.0].shape();
        let shape = broadcast_shape(sa, sb);
        let va = self.values[a.0]
            .broadcast(IxDyn(&shape))
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} to {shape:?}"));
        let vb = self.values[b.0]
            .broadcast(IxDyn(&shape))
            .unwrap_or_else(|| panic!("cannot broadcast {sb:?} to {shape:?}"));
        let mut out = Arr::zeros(IxDyn(&shape));
        azip_apply(&mut out, &va, &vb, f);
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_broadcast(a, b, |x, y| x + y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_broadcast(a, b, |x, y| x - y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_broadcast(a, b, |x, y| x * y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].mapv(|x| x * c);
        let r = self.req(a);
        self.push(v, Op::Scale(a, c), r)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].mapv(|x| x + c);
        let r = self.req(a);
        self.push(v, Op::AddScalar(a), r)
    }

    /// 2-d matrix product (M,K) x (K,N).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = as2(&self.values[a.0]);
        let vb = as2(&self.values[b.0]);
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul inner dims {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let mut out = Array2::<f64>::zeros((va.nrows(), vb.ncols()));
        general_mat_mul(1.0, &va, &vb, 0.0, &mut out);
        let r = self.req(a) || self.req(b);
        self.push(out.into_dyn(), Op::MatMul(a, b), r)
    }

    /// Batched matrix product (B,M,K) x (B,K,N).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let vb = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
        let (ba, m, k) = va.dim();
        let (bb, k2, n) = vb.dim();
        assert_eq!(ba, bb, "batch_matmul batch dims");
        assert_eq!(k, k2, "batch_matmul inner dims");
        let mut out = Array3::<f64>::zeros((ba, m, n));
        for i in 0..ba {
            let (ai, bi) = (va.index_axis(Axis(0), i), vb.index_axis(Axis(0), i));
            let mut oi = out.index_axis_mut(Axis(0), i);
            general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
        }
        let r = self.req(a) || self.req(b);
        self.push(out.into_dyn(), Op::BatchMatMul(a, b), r)
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        // as_standard_layout: keep every stored value C-contiguous so later
        // reshapes and serialization can assume slices.
        let v = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let r = self.req(a);
        self.push(v, Op::Permute(a, axes.to_vec()), r)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old = self.values[a.0].shape().to_vec();
        let v = self.values[a.0]
            .clone()
            .into_shape_clone(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {old:?} to {shape:?}"));
        let r = self.req(a);
        self.push(v, Op::Reshape(a, old), r)
    }

    /// 2-d convolution, NCHW input, (Cout,Cin,KH,KW) weight. Bias is added
    /// separately via broadcast `add`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, padding: usize) -> NodeId {
        let x = as4(&self.values[input.0]);
        let w = as4(&self.values[weight.0]);
        let (b, c, h, wd) = x.dim();
        let (cout, cin, kh, kw) = w.dim();
        assert_eq!(c, cin, "conv2d channel mismatch: input {c}, weight {cin}");
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let w2 = w.into_shape_with_order((cout, cin * kh * kw)).unwrap();
        let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
        for bi in 0..b {
            let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, padding, oh, ow);
            let mut y2 = Array2::<f64>::zeros((cout, oh * ow));
            general_mat_mul(1.0, &w2, &cols.view(), 0.0, &mut y2);
            out.index_axis_mut(Axis(0), bi)
                .assign(&y2.into_shape_with_order((cout, oh, ow)).unwrap());
        }
        let r = self.req(input) || self.req(weight);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            r,
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let x = as4(&self.values[a.0]);
        let (b, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let r = self.req(a);
        self.push(out.into_dyn(), Op::Upsample2x(a), r)
    }

    /// Group normalization of an NCHW tensor with per-channel affine params.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let xv = as4(&self.values[x.0]);
        let (b, c, h, w) = xv.dim();
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        let cg = c / groups;
        let m = (cg * h * w) as f64;
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut mean = Array2::<f64>::zeros((b, groups));
        let mut inv_std = Array2::<f64>::zeros((b, groups));
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for g in 0..groups {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            let v = xv[[bi, ci, i, j]];
                            s += v;
                            s2 += v * v;
                        }
                    }
                }
                let mu = s / m;
                let var = (s2 / m - mu * mu).max(0.0);
                let is = 1.0 / (var + eps).sqrt();
                mean[[bi, g]] = mu;
                inv_std[[bi, g]] = is;
                for ci in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (xv[[bi, ci, i, j]] - mu) * is;
                            out[[bi, ci, i, j]] = xh * gv[ci] + bv[ci];
                        }
                    }
                }
            }
        }
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            },
            r,
        )
    }

    /// Layer normalization over the last axis with affine params of that size.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.values[x.0];
        let d = *xv.shape().last().expect("layer_norm on 0-d input");
        let prefix: Vec<usize> = xv.shape()[..xv.ndim() - 1].to_vec();
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let x2 = xv
            .view()
            .into_shape_with_order((prefix.iter().product::<usize>(), d))
            .unwrap();
        let n = x2.nrows();
        let mut mean = Array1::<f64>::zeros(n);
        let mut inv_std = Array1::<f64>::zeros(n);
        let mut out = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let row = x2.row(i);
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[i] = mu;
            inv_std[i] = is;
            for j in 0..d {
                out[[i, j]] = (row[j] - mu) * is * gv[j] + bv[j];
            }
        }
        let mut shape = prefix;
        shape.push(d);
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: mean.into_dyn(),
                inv_std: inv_std.into_dyn(),
            },
            r,
        )
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| x * sigmoid(x));
        let r = self.req(a);
        self.push(v, Op::Silu(a), r)
    }

    pub fn sigmoid_op(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(sigmoid);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh_op(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(f64::tanh);
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn softplus_op(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(softplus);
        let r = self.req(a);
        self.push(v, Op::Softplus(a), r)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(f64::exp);
        let r = self.req(a);
        self.push(v, Op::Exp(a), r)
    }

    /// Numerically-stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let xv = &self.values[a.0];
        let d = *xv.shape().last().expect("softmax on 0-d input");
        let rows: usize = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut out = Array2::<f64>::zeros((rows, d));
        for i in 0..rows {
            let row = x2.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in 0..d {
                out[[i, j]] /= sum;
            }
        }
        let out = out.into_shape_with_order(xv.raw_dim()).unwrap();
        let r = self.req(a);
        self.push(out, Op::SoftmaxLast(a), r)
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let r = parts.iter().any(|p| self.req(*p));
        self.push(v, Op::Concat(axis, parts.to_vec()), r)
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.values[a.0]
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        let r = self.req(a);
        self.push(v, Op::Slice { a, axis, start, len }, r)
    }

    /// Gather rows of a (V,D) table; output shape is `prefix_shape ++ [D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], prefix_shape: &[usize]) -> NodeId {
        let tv = as2(&self.values[table.0]);
        let d = tv.ncols();
        assert_eq!(ids.len(), prefix_shape.iter().product::<usize>());
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < tv.nrows(), "embedding id {id} out of range {}", tv.nrows());
            out.row_mut(row).assign(&tv.row(id));
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(d);
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let r = self.req(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            r,
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].len() as f64;
        let v = Arr::from_elem(IxDyn(&[]), self.values[a.0].sum() / n);
        let r = self.req(a);
        self.push(v, Op::MeanAll(a), r)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Arr::from_elem(IxDyn(&[]), self.values[a.0].sum());
        let r = self.req(a);
        self.push(v, Op::SumAll(a), r)
    }

    /// Mean squared error between two same-shaped nodes, as a 0-d node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    fn accum(&mut self, id: NodeId, g: Arr) {
        if !self.requires[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar root; gradients are afterwards readable
    /// through [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) -> crate::Result<()> {
        if !self.grad_enabled {
            return Err(crate::AutogradError::GradDisabled);
        }
        if self.values[root.0].len() != 1 {
            return Err(crate::AutogradError::NonScalarRoot(
                self.values[root.0].shape().to_vec(),
            ));
        }
        self.grads = vec![None; self.values.len()];
        let seed = Arr::from_elem(self.values[root.0].raw_dim(), 1.0);
        self.grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.step_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, i: usize, g: &Arr) {
        // Ops are moved out so `self` can be mutably borrowed for accumulation.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, unbroadcast(g, self.values[a.0].shape()));
                self.accum(b, unbroadcast(g, self.values[b.0].shape()));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, unbroadcast(g, self.values[a.0].shape()));
                let gb = unbroadcast(g, self.values[b.0].shape()).mapv(|x| -x);
                self.accum(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let shape = g.shape().to_vec();
                if self.requires[a.0] {
                    let vb = self.values[b.0].broadcast(IxDyn(&shape)).unwrap().to_owned();
                    self.accum(a, unbroadcast(&(g * &vb), self.values[a.0].shape()));
                }
                if self.requires[b.0] {
                    let va = self.values[a.0].broadcast(IxDyn(&shape)).unwrap().to_owned();
                    self.accum(b, unbroadcast(&(g * &va), self.values[b.0].shape()));
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(a, g.mapv(|x| x * c));
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accum(a, g.clone());
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let gv = as2(g);
                if self.requires[a.0] {
                    let vb = as2(&self.values[b.0]);
                    let mut da = Array2::<f64>::zeros((gv.nrows(), vb.nrows()));
                    general_mat_mul(1.0, &gv, &vb.t(), 0.0, &mut da);
                    self.accum(a, da.into_dyn());
                }
                if self.requires[b.0] {
                    let va = as2(&self.values[a.0]);
                    let mut db = Array2::<f64>::zeros((va.ncols(), gv.ncols()));
                    general_mat_mul(1.0, &va.t(), &gv, 0.0, &mut db);
                    self.accum(b, db.into_dyn());
                }
            }
            Op::BatchMatMul(a, b) => {
                let (a, b) = (*a, *b);
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (bs, m, n) = gv.dim();
                if self.requires[a.0] {
                    let vb = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
                    let k = vb.dim().1;
                    let mut da = Array3::<f64>::zeros((bs, m, k));
                    for s in 0..bs {
                        let (gs, bsv) = (gv.index_axis(Axis(0), s), vb.index_axis(Axis(0), s));
                        let mut ds = da.index_axis_mut(Axis(0), s);
                        general_mat_mul(1.0, &gs, &bsv.t(), 0.0, &mut ds);
                    }
                    self.accum(a, da.into_dyn());
                }
                if self.requires[b.0] {
                    let va = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
                    let k = va.dim().2;
                    let mut db = Array3::<f64>::zeros((bs, k, n));
                    for s in 0..bs {
                        let (gs, asv) = (gv.index_axis(Axis(0), s), va.index_axis(Axis(0), s));
                        let mut ds = db.index_axis_mut(Axis(0), s);
                        general_mat_mul(1.0, &asv.t(), &gs, 0.0, &mut ds);
                    }
                    self.accum(b, db.into_dyn());
                }
            }
            Op::Permute(a, axes) => {
                let a = *a;
                let mut inv = vec![0usize; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                let da = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                self.accum(a, da);
            }
            Op::Reshape(a, old) => {
                let a = *a;
                let da = g.clone().into_shape_clone(IxDyn(old)).unwrap();
                self.accum(a, da);
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (input, weight, stride, padding) = (*input, *weight, *stride, *padding);
                let x = as4(&self.values[input.0]);
                let w = as4(&self.values[weight.0]);
                let gv = as4(g);
                let (b, _c, h, wd) = x.dim();
                let (cout, cin, kh, kw) = w.dim();
                let (_, _, oh, ow) = gv.dim();
                let w2 = w.into_shape_with_order((cout, cin * kh * kw)).unwrap();
                let mut dw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut dx = Array4::<f64>::zeros((b, cin, h, wd));
                let need_dx = self.requires[input.0];
                let need_dw = self.requires[weight.0];
                for bi in 0..b {
                    let gb = gv
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((cout, oh * ow))
                        .unwrap();
                    if need_dw {
                        let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, padding, oh, ow);
                        general_mat_mul(1.0, &gb, &cols.t(), 1.0, &mut dw2);
                    }
                    if need_dx {
                        let mut dcols = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
                        general_mat_mul(1.0, &w2.t(), &gb, 0.0, &mut dcols);
                        col2im_accum(
                            &dcols,
                            &mut dx.index_axis_mut(Axis(0), bi),
                            kh,
                            kw,
                            stride,
                            padding,
                            oh,
                            ow,
                        );
                    }
                }
                if need_dx {
                    self.accum(input, dx.into_dyn());
                }
                if need_dw {
                    let dw = dw2.into_shape_with_order((cout, cin, kh, kw)).unwrap();
                    self.accum(weight, dw.into_dyn());
                }
            }
            Op::Upsample2x(a) => {
                let a = *a;
                let gv = as4(g);
                let (b, c, oh, ow) = gv.dim();
                let (h, w) = (oh / 2, ow / 2);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = gv[[bi, ci, 2 * i, 2 * j]]
                                    + gv[[bi, ci, 2 * i, 2 * j + 1]]
                                    + gv[[bi, ci, 2 * i + 1, 2 * j]]
                                    + gv[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                self.accum(a, dx.into_dyn());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
                ..
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let xv = as4(&self.values[x.0]);
                let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
                let ggrad = as4(g);
                let (b, c, h, w) = xv.dim();
                let cg = c / groups;
                let m = (cg * h * w) as f64;
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for gi in 0..groups {
                        let mu = mean[[bi, gi]];
                        let is = inv_std[[bi, gi]];
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xh = 0.0;
                        for ci in gi * cg..(gi + 1) * cg {
                            for i in 0..h {
                                for j in 0..w {
                                    let xh = (xv[[bi, ci, i, j]] - mu) * is;
                                    let go = ggrad[[bi, ci, i, j]];
                                    dgamma[ci] += go * xh;
                                    dbeta[ci] += go;
                                    let gh = go * gv[ci];
                                    sum_gh += gh;
                                    sum_gh_xh += gh * xh;
                                }
                            }
                        }
                        if self.requires[x.0] {
                            let mean_gh = sum_gh / m;
                            let mean_gh_xh = sum_gh_xh / m;
                            for ci in gi * cg..(gi + 1) * cg {
                                for i in 0..h {
                                    for j in 0..w {
                                        let xh = (xv[[bi, ci, i, j]] - mu) * is;
                                        let gh = ggrad[[bi, ci, i, j]] * gv[ci];
                                        dx[[bi, ci, i, j]] = is * (gh - mean_gh - xh * mean_gh_xh);
                                    }
                                }
                            }
                        }
                    }
                }
                if self.requires[x.0] {
                    self.accum(x, dx.into_dyn());
                }
                self.accum(gamma, dgamma.into_dyn());
                self.accum(beta, dbeta.into_dyn());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = &self.values[x.0];
                let d = *xv.shape().last().unwrap();
                let rows = xv.len() / d;
                let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
                let meanv = mean.view().into_shape_with_order(rows).unwrap();
                let isv = inv_std.view().into_shape_with_order(rows).unwrap();
                let mut dgamma = Array1::<f64>::zeros(d);
                let mut dbeta = Array1::<f64>::zeros(d);
                let mut dx = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let mu = meanv[r];
                    let is = isv[r];
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for j in 0..d {
                        let xh = (x2[[r, j]] - mu) * is;
                        let go = g2[[r, j]];
                        dgamma[j] += go * xh;
                        dbeta[j] += go;
                        let gh = go * gv[j];
                        sum_gh += gh;
                        sum_gh_xh += gh * xh;
                    }
                    if self.requires[x.0] {
                        let mg = sum_gh / d as f64;
                        let mgx = sum_gh_xh / d as f64;
                        for j in 0..d {
                            let xh = (x2[[r, j]] - mu) * is;
                            let gh = g2[[r, j]] * gv[j];
                            dx[[r, j]] = is * (gh - mg - xh * mgx);
                        }
                    }
                }
                if self.requires[x.0] {
                    let dx = dx.into_shape_with_order(xv.raw_dim()).unwrap();
                    self.accum(x, dx);
                }
                self.accum(gamma, dgamma.into_dyn());
                self.accum(beta, dbeta.into_dyn());
            }
            Op::Silu(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.values[a.0])
                    .map_collect(|&go, &x| {
                        let s = sigmoid(x);
                        go * s * (1.0 + x * (1.0 - s))
                    });
                self.accum(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.values[i])
                    .map_collect(|&go, &y| go * y * (1.0 - y));
                self.accum(a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.values[i])
                    .map_collect(|&go, &y| go * (1.0 - y * y));
                self.accum(a, da);
            }
            Op::Softplus(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.values[a.0])
                    .map_collect(|&go, &x| go * sigmoid(x));
                self.accum(a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.values[i])
                    .map_collect(|&go, &y| go * y);
                self.accum(a, da);
            }
            Op::SoftmaxLast(a) => {
                let a = *a;
                let y = &self.values[i];
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += g2[[r, j]] * y2[[r, j]];
                    }
                    for j in 0..d {
                        dx[[r, j]] = y2[[r, j]] * (g2[[r, j]] - dot);
                    }
                }
                let dx = dx.into_shape_with_order(y.raw_dim()).unwrap();
                self.accum(a, dx);
            }
            Op::Concat(axis, parts) => {
                let axis = *axis;
                let parts = parts.clone();
                let mut start = 0usize;
                for p in parts {
                    let len = self.values[p.0].shape()[axis];
                    let gp = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    self.accum(p, gp);
                    start += len;
                }
            }
            Op::Slice { a, axis, start, len } => {
                let (a, axis, start, len) = (*a, *axis, *start, *len);
                let mut da = Arr::zeros(self.values[a.0].raw_dim());
                da.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                self.accum(a, da);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = self.values[table.0].shape()[1];
                let g2 = g.view().into_shape_with_order((ids.len(), d)).unwrap();
                let mut dt = Array2::<f64>::zeros((self.values[table.0].shape()[0], d));
                for (row, &id) in ids.iter().enumerate() {
                    let mut r = dt.row_mut(id);
                    r += &g2.row(row);
                }
                self.accum(table, dt.into_dyn());
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.values[a.0].len() as f64;
                let gs = g.iter().next().copied().unwrap() / n;
                let da = Arr::from_elem(self.values[a.0].raw_dim(), gs);
                self.accum(a, da);
            }
            Op::SumAll(a) => {
                let a = *a;
                let gs = g.iter().next().copied().unwrap();
                let da = Arr::from_elem(self.values[a.0].raw_dim(), gs);
                self.accum(a, da);
            }
        }
        self.ops[i] = op;
    }
}

fn azip_apply(
    out: &mut Arr,
    a: &ndarray::ArrayViewD<'_, f64>,
    b: &ndarray::ArrayViewD<'_, f64>,
    f: impl Fn(f64, f64) -> f64,
) {
    ndarray::Zip::from(out).and(a).and(b).for_each(|o, &x, &y| *o = f(x, y));
}
