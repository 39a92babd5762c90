//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] records ops in topological order as the forward pass is
//! built; [`Graph::backward`] sweeps the tape in reverse accumulating
//! gradients. Everything is f64 and single-threaded, so a loss built twice
//! from the same inputs yields bit-identical values and gradients.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    Square(NodeId),
    Matmul(NodeId, NodeId),
    /// a * b^T where b is (n, k)
    MatmulNt(NodeId, NodeId),
    /// x (r, c) + bias (c) broadcast over rows
    AddBiasRow(NodeId, NodeId),
    /// x (C, H, W) + bias (C) broadcast over H, W
    AddChannelBias(NodeId, NodeId),
    /// row-wise softmax of a 2-d tensor
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// normalized activations, saved for backward
        xhat: Tensor,
        /// 1 / sqrt(var + eps) per row
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    /// 3x3, stride 1, zero padding 1
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        /// im2col buffer (Cin*9, H*W), saved for backward
        col: Tensor,
    },
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    ConcatChannels(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    /// out[i, :] = table[ids[i], :]
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// out[j, :] = x[idx[j], :]
    SelectRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    /// (C, H, W) -> (H*W, C)
    SpatialFlatten(NodeId),
    /// (H*W, C) -> (C, H, W)
    SpatialUnflatten(NodeId, [usize; 3]),
    /// rows >= len replaced by `row` (shape (1, c))
    PadOverride {
        x: NodeId,
        row: NodeId,
        len: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.axpy_in_place(-1.0, self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = *x * sigmoid(*x);
        }
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = *x * *x;
        }
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nn(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nt(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatmulNt(a, b), rg)
    }

    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(bias).len(), c);
        let mut v = self.value(x).clone();
        {
            let b = self.value(bias).data().to_vec();
            for i in 0..r {
                let row = v.row_mut(i);
                for j in 0..c {
                    row[j] += b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddBiasRow(x, bias), rg)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(self.value(bias).len(), c);
        let mut v = self.value(x).clone();
        {
            let b = self.value(bias).data().to_vec();
            let d = v.data_mut();
            for ci in 0..c {
                let base = ci * h * w;
                for i in 0..h * w {
                    d[base + i] += b[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddChannelBias(x, bias), rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows_value(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(&[r, c]);
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[i] = rs;
            let out = xhat.row_mut(i);
            for j in 0..c {
                out[j] = (row[j] - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut v = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let xh = xhat.row(i).to_vec();
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = xh[j] * g[j] + bt[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn group_norm(&mut self, x: NodeId, groups: usize, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let mut xhat = Tensor::zeros(&shape);
        let mut rstd = vec![0.0; groups];
        for gi in 0..groups {
            let base = gi * gsize;
            let slice = &xv.data()[base..base + gsize];
            let mean = slice.iter().sum::<f64>() / gsize as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[gi] = rs;
            let out = &mut xhat.data_mut()[base..base + gsize];
            for (o, v) in out.iter_mut().zip(slice) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut v = Tensor::zeros(&shape);
        {
            let d = v.data_mut();
            for ci in 0..c {
                let base = ci * h * w;
                for i in 0..h * w {
                    d[base + i] = xhat.data()[base + i] * g[ci] + bt[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(v, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg)
    }

    pub fn conv2d_3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[2], 3);
        assert_eq!(ws[3], 3);
        let (cin, h, wid) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        assert_eq!(ws[1], cin, "conv weight expects {} input channels", ws[1]);
        let col = im2col_3x3(xv, cin, h, wid);
        let wmat = wv.clone().reshaped(&[cout, cin * 9]);
        let mut out = matmul_nn(&wmat, &col);
        {
            let bv = self.value(b).data().to_vec();
            let d = out.data_mut();
            for c in 0..cout {
                let base = c * h * wid;
                for i in 0..h * wid {
                    d[base + i] += bv[c];
                }
            }
        }
        let out = out.reshaped(&[cout, h, wid]);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv2d { x, w, b, col }, rg)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for y in 0..oh {
                for xj in 0..ow {
                    let mut s4 = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s4 += xv.data()[ci * h * w + (2 * y + dy) * w + 2 * xj + dx];
                        }
                    }
                    out.data_mut()[ci * oh * ow + y * ow + xj] = s4 * 0.25;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for y in 0..oh {
                for xj in 0..ow {
                    out.data_mut()[ci * oh * ow + y * ow + xj] =
                        xv.data()[ci * h * w + (y / 2) * w + xj / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::UpsampleNearest2(x), rg)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert_eq!(sa[1..], sb[1..]);
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&[sa[0] + sb[0], sa[1], sa[2]], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatChannels(a, b), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let r = av.rows();
        assert_eq!(r, bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[r, ca + cb]);
        for i in 0..r {
            out.row_mut(i)[..ca].copy_from_slice(av.row(i));
        }
        for i in 0..r {
            out.row_mut(i)[ca..].copy_from_slice(bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start < end && end <= c);
        let mut out = Tensor::zeros(&[r, end - start]);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..end]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start, end }, rg)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let c = tv.cols();
        let mut out = Tensor::zeros(&[ids.len(), c]);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, rg)
    }

    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (i, &id) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(id));
        }
        let rg = self.rg(x);
        self.push(out, Op::SelectRows { x, idx: idx.to_vec() }, rg)
    }

    pub fn spatial_flatten(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[h * w, c]);
        for ci in 0..c {
            for i in 0..h * w {
                out.data_mut()[i * c + ci] = xv.data()[ci * h * w + i];
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SpatialFlatten(x), rg)
    }

    pub fn spatial_unflatten(&mut self, x: NodeId, c: usize, h: usize, w: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w);
        assert_eq!(xv.cols(), c);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for i in 0..h * w {
                out.data_mut()[ci * h * w + i] = xv.data()[i * c + ci];
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SpatialUnflatten(x, [c, h, w]), rg)
    }

    pub fn pad_override(&mut self, x: NodeId, row: NodeId, len: usize) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let rv = self.value(row);
        assert_eq!(rv.len(), c);
        assert!(len <= r);
        let mut out = xv.clone();
        for i in len..r {
            out.row_mut(i).copy_from_slice(rv.data());
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::PadOverride { x, row, len }, rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), rg)
    }

    /// mean((a - b)^2) over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse sweep from a scalar root. Returns nothing; read gradients
    /// with [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_in_place(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let mut nb = g.clone();
                nb.scale_in_place(-1.0);
                self.add_grad(grads, *b, nb);
            }
            Op::Scale(a, k) => {
                let mut ga = g.clone();
                ga.scale_in_place(*k);
                self.add_grad(grads, *a, ga);
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (gd, x) in ga.data_mut().iter_mut().zip(xv.data()) {
                    let s = sigmoid(*x);
                    *gd *= s * (1.0 + x * (1.0 - s));
                }
                self.add_grad(grads, *a, ga);
            }
            Op::Square(a) => {
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (gd, x) in ga.data_mut().iter_mut().zip(xv.data()) {
                    *gd *= 2.0 * x;
                }
                self.add_grad(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatmulNt(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, matmul_nn(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::AddBiasRow(x, bias) => {
                self.add_grad(grads, *x, g.clone());
                if self.rg(*bias) {
                    let (r, c) = (g.rows(), g.cols());
                    let mut gb = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += g.at2(i, j);
                        }
                    }
                    self.add_grad(grads, *bias, gb);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.add_grad(grads, *x, g.clone());
                if self.rg(*bias) {
                    let s = self.value(*x).shape().to_vec();
                    let (c, hw) = (s[0], s[1] * s[2]);
                    let bshape = self.value(*bias).shape().to_vec();
                    let mut gb = Tensor::zeros(&bshape);
                    for ci in 0..c {
                        gb.data_mut()[ci] = g.data()[ci * hw..(ci + 1) * hw].iter().sum();
                    }
                    self.add_grad(grads, *bias, gb);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (r, c) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    let yrow = y.row(ri);
                    let grow = g.row(ri);
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let out = gx.row_mut(ri);
                    for j in 0..c {
                        out[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gamma).data().to_vec();
                if self.rg(*gamma) {
                    let mut gg = Tensor::zeros(&[c]);
                    for ri in 0..r {
                        for j in 0..c {
                            gg.data_mut()[j] += g.at2(ri, j) * xhat.at2(ri, j);
                        }
                    }
                    self.add_grad(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gb = Tensor::zeros(&[c]);
                    for ri in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += g.at2(ri, j);
                        }
                    }
                    self.add_grad(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[r, c]);
                    for ri in 0..r {
                        let xh = xhat.row(ri);
                        let grow = g.row(ri);
                        let mut m1 = 0.0; // mean of dxhat
                        let mut m2 = 0.0; // mean of dxhat * xhat
                        for j in 0..c {
                            let dxh = grow[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let out = gx.row_mut(ri);
                        for j in 0..c {
                            let dxh = grow[j] * gv[j];
                            out[j] = rstd[ri] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    self.add_grad(grads, *x, gx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let s = xhat.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let hw = h * w;
                let cpg = c / groups;
                let gsize = cpg * hw;
                let gv = self.value(*gamma).data().to_vec();
                if self.rg(*gamma) {
                    let mut gg = Tensor::zeros(&[c]);
                    for ci in 0..c {
                        let mut s0 = 0.0;
                        for k in 0..hw {
                            s0 += g.data()[ci * hw + k] * xhat.data()[ci * hw + k];
                        }
                        gg.data_mut()[ci] = s0;
                    }
                    self.add_grad(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gb = Tensor::zeros(&[c]);
                    for ci in 0..c {
                        gb.data_mut()[ci] = g.data()[ci * hw..(ci + 1) * hw].iter().sum();
                    }
                    self.add_grad(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for gi in 0..*groups {
                        let base = gi * gsize;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for off in 0..gsize {
                            let ci = base / hw + off / hw;
                            let dxh = g.data()[base + off] * gv[ci];
                            m1 += dxh;
                            m2 += dxh * xhat.data()[base + off];
                        }
                        m1 /= gsize as f64;
                        m2 /= gsize as f64;
                        for off in 0..gsize {
                            let ci = base / hw + off / hw;
                            let dxh = g.data()[base + off] * gv[ci];
                            gx.data_mut()[base + off] =
                                rstd[gi] * (dxh - m1 - xhat.data()[base + off] * m2);
                        }
                    }
                    self.add_grad(grads, *x, gx);
                }
            }
            Op::Conv2d { x, w, b, col } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (cin, h, wid) = (xs[0], xs[1], xs[2]);
                let cout = ws[0];
                let gmat = g.clone().reshaped(&[cout, h * wid]);
                if self.rg(*w) {
                    let gw = matmul_nt(&gmat, col);
                    self.add_grad(grads, *w, gw.reshaped(&[cout, cin, 3, 3]));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(&[cout]);
                    for c in 0..cout {
                        gb.data_mut()[c] = gmat.row(c).iter().sum();
                    }
                    self.add_grad(grads, *b, gb);
                }
                if self.rg(*x) {
                    let wmat = self.value(*w).clone().reshaped(&[cout, cin * 9]);
                    let gcol = matmul_tn(&wmat, &gmat);
                    let gx = col2im_3x3(&gcol, cin, h, wid);
                    self.add_grad(grads, *x, gx);
                }
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..oh {
                        for xj in 0..ow {
                            let gv = g.data()[ci * oh * ow + y * ow + xj] * 0.25;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    gx.data_mut()[ci * h * w + (2 * y + dy) * w + 2 * xj + dx] +=
                                        gv;
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::UpsampleNearest2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * 2, w * 2);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..oh {
                        for xj in 0..ow {
                            gx.data_mut()[ci * h * w + (y / 2) * w + xj / 2] +=
                                g.data()[ci * oh * ow + y * ow + xj];
                        }
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let na = sa.iter().product::<usize>();
                let sb = self.value(*b).shape().to_vec();
                if self.rg(*a) {
                    let ga = Tensor::from_vec(&sa, g.data()[..na].to_vec());
                    self.add_grad(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = Tensor::from_vec(&sb, g.data()[na..].to_vec());
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = (self.value(*a).rows(), self.value(*a).cols());
                let cb = self.value(*b).cols();
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(&[r, ca]);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(&[r, cb]);
                    for i in 0..r {
                        gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    gx.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                self.add_grad(grads, *x, gx);
            }
            Op::GatherRows { table, ids } => {
                let (r, c) = (self.value(*table).rows(), self.value(*table).cols());
                let mut gt = Tensor::zeros(&[r, c]);
                for (i, &id) in ids.iter().enumerate() {
                    let src = g.row(i);
                    let dst = gt.row_mut(id);
                    for j in 0..c {
                        dst[j] += src[j];
                    }
                }
                self.add_grad(grads, *table, gt);
            }
            Op::SelectRows { x, idx } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for (i, &id) in idx.iter().enumerate() {
                    let src = g.row(i);
                    let dst = gx.row_mut(id);
                    for j in 0..c {
                        dst[j] += src[j];
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::SpatialFlatten(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for i in 0..h * w {
                        gx.data_mut()[ci * h * w + i] = g.data()[i * c + ci];
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::SpatialUnflatten(x, [c, h, w]) => {
                let mut gx = Tensor::zeros(&[h * w, *c]);
                for ci in 0..*c {
                    for i in 0..h * w {
                        gx.data_mut()[i * c + ci] = g.data()[ci * h * w + i];
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::PadOverride { x, row, len } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..*len {
                        gx.row_mut(i).copy_from_slice(g.row(i));
                    }
                    self.add_grad(grads, *x, gx);
                }
                if self.rg(*row) {
                    let shape = self.value(*row).shape().to_vec();
                    let mut gr = Tensor::zeros(&shape);
                    for i in *len..r {
                        for j in 0..c {
                            gr.data_mut()[j] += g.at2(i, j);
                        }
                    }
                    self.add_grad(grads, *row, gr);
                }
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                let gx = Tensor::full(&shape, g.data()[0]);
                self.add_grad(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                let n: usize = shape.iter().product();
                let gx = Tensor::full(&shape, g.data()[0] / n as f64);
                self.add_grad(grads, *x, gx);
            }
        }
    }
}

/// Row-wise softmax of a 2-d tensor, shared by graph and editor paths.
pub fn softmax_rows_value(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            o[j] = e;
            sum += e;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn im2col_3x3(x: &Tensor, cin: usize, h: usize, w: usize) -> Tensor {
    let mut col = Tensor::zeros(&[cin * 9, h * w]);
    for ci in 0..cin {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r = ci * 9 + ky * 3 + kx;
                let dst_base = r * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    // valid destination x range given kx offset
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    let dst = y * w;
                    for xj in x0..x1 {
                        let sx = (xj + kx) - 1;
                        unsafe {
                            *col.data_mut().get_unchecked_mut(dst_base + dst + xj) =
                                *plane.get_unchecked(sy * w + sx);
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_3x3(gcol: &Tensor, cin: usize, h: usize, w: usize) -> Tensor {
    let mut gx = Tensor::zeros(&[cin, h, w]);
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r = ci * 9 + ky * 3 + kx;
                let src_base = r * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xj in x0..x1 {
                        let sx = (xj + kx) - 1;
                        gx.data_mut()[ci * h * w + sy * w + sx] +=
                            gcol.data()[src_base + y * w + xj];
                    }
                }
            }
        }
    }
    gx
}
