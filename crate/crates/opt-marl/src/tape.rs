//! Reverse-mode tape over `ndarray` matrices, specialized to the operations
//! this model needs: dense affine maps, block-wise entity attention with
//! sparsemax or softmax rows, masked pooling, GRU gating, the contrastive
//! disagreement term, and the monotone hypernetwork mix.
//!
//! Tensors are `Array2<f64>`. Batched entity tensors stack B blocks of M rows
//! each, so a batch of entity embeddings has shape (B*M, d). Ops that need
//! block structure carry the block row count.
//!
//! The tape also counts forward multiply-accumulates (`macs`) and maintains a
//! running hash of every piecewise-region decision (sparsemax supports, relu
//! and abs sign patterns) so finite-difference checks can detect kink
//! crossings.

use std::rc::Rc;

use ndarray::{s, Array2};

use crate::numerics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-block column masks: `mask[b][j]` is true when entity j of block b is
/// real (not padding).
pub type BlockMask = Rc<Vec<Vec<bool>>>;

enum Op {
    Leaf,
    Param { offset: usize },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Elu { x: NodeId },
    Abs { x: NodeId },
    LnClamped { x: NodeId, eps: f64 },
    OneMinus { x: NodeId },
    SoftmaxRows { x: NodeId },
    SparsemaxRows { x: NodeId },
    ZeroRows { x: NodeId, keep: Rc<Vec<bool>> },
    MeanPoolBlocks { x: NodeId, mask: BlockMask, block: usize },
    BlockMatNT { a: NodeId, b: NodeId, block: usize },
    BlockMat { p: NodeId, v: NodeId, block: usize },
    ColScaleBlocks { x: NodeId, scale: NodeId, block: usize },
    ConcatCols { a: NodeId, b: NodeId },
    SelectCols { x: NodeId, start: usize, len: usize },
    SelectPerRow { x: NodeId, idx: Rc<Vec<usize>> },
    GatherRows { x: NodeId, rows: Rc<Vec<usize>> },
    Reshape { x: NodeId },
    SumCols { x: NodeId },
    WeightedSumAll { x: NodeId, w: Rc<Array2<f64>> },
    BatchedVecMat { q: NodeId, w: NodeId, inner: usize },
    RowDot { a: NodeId, b: NodeId },
    CdLoss { pvs: Rc<Vec<NodeId>>, mask: BlockMask, block: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
    region_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv_step(h: u64, byte: u64) -> u64 {
    (h ^ byte).wrapping_mul(FNV_PRIME)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
            region_hash: FNV_OFFSET,
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Forward multiply-accumulate count so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Hash of every piecewise-region decision taken so far (sparsemax
    /// supports, relu/abs signs). Two forward passes through the same graph
    /// landed in the same differentiable region iff the hashes agree.
    pub fn region_signature(&self) -> u64 {
        self.region_hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that reads `shape` values from `data[offset..]` (row-major).
    /// Gradients accumulate at the same offset when `trainable`.
    pub fn param(
        &mut self,
        data: &[f64],
        offset: usize,
        shape: (usize, usize),
        trainable: bool,
    ) -> NodeId {
        let n = shape.0 * shape.1;
        let value = Array2::from_shape_vec(shape, data[offset..offset + n].to_vec()).unwrap();
        self.push(value, Op::Param { offset }, trainable)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.macs += (self.nodes[a.0].value.nrows()
            * self.nodes[a.0].value.ncols()
            * self.nodes[b.0].value.ncols()) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul { a, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.macs += self.nodes[a.0].value.len() as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul { a, b }, rg)
    }

    /// Adds a (1 x d) bias row to every row of x.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value * c;
        let rg = self.rg(x);
        self.push(v, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut h = self.region_hash;
        let v = xv.mapv(|t| {
            h = fnv_step(h, (t > 0.0) as u64);
            if t > 0.0 {
                t
            } else {
                0.0
            }
        });
        self.region_hash = h;
        let rg = self.rg(x);
        self.push(v, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid { x }, rg)
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| if t > 0.0 { t } else { t.exp_m1() });
        let rg = self.rg(x);
        self.push(v, Op::Elu { x }, rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut h = self.region_hash;
        let v = xv.mapv(|t| {
            h = fnv_step(h, (t >= 0.0) as u64);
            t.abs()
        });
        self.region_hash = h;
        let rg = self.rg(x);
        self.push(v, Op::Abs { x }, rg)
    }

    pub fn ln_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t.max(eps).ln());
        let rg = self.rg(x);
        self.push(v, Op::LnClamped { x, eps }, rg)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| 1.0 - t);
        let rg = self.rg(x);
        self.push(v, Op::OneMinus { x }, rg)
    }

    /// Row-wise softmax. When `mask` is given, rows are grouped in blocks of
    /// `block` rows and the column mask of the enclosing block applies;
    /// masked columns are exactly 0.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<BlockMask>, block: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros(xv.raw_dim());
        for (r, row) in xv.outer_iter().enumerate() {
            let m: Option<&[bool]> = mask.as_ref().map(|mm| mm[r / block].as_slice());
            let p = numerics::softmax(row.as_slice().unwrap(), m)
                .expect("softmax over fully masked row");
            v.row_mut(r).assign(&ndarray::ArrayView1::from(p.values()));
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows { x }, rg)
    }

    /// Row-wise sparsemax with the same masking convention as
    /// [`Tape::softmax_rows`]. Support patterns feed the region signature.
    pub fn sparsemax_rows(&mut self, x: NodeId, mask: Option<BlockMask>, block: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros(xv.raw_dim());
        let mut h = self.region_hash;
        for (r, row) in xv.outer_iter().enumerate() {
            let m: Option<&[bool]> = mask.as_ref().map(|mm| mm[r / block].as_slice());
            let p = numerics::sparsemax(row.as_slice().unwrap(), m)
                .expect("sparsemax over fully masked row");
            for &pv in p.values() {
                h = fnv_step(h, (pv > 0.0) as u64);
            }
            v.row_mut(r).assign(&ndarray::ArrayView1::from(p.values()));
        }
        self.region_hash = h;
        let rg = self.rg(x);
        self.push(v, Op::SparsemaxRows { x }, rg)
    }

    /// Zeroes rows whose `keep` entry is false (padding rows).
    pub fn zero_rows(&mut self, x: NodeId, keep: Rc<Vec<bool>>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                v.row_mut(r).fill(0.0);
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::ZeroRows { x, keep }, rg)
    }

    /// Mean over unmasked rows of each block: (B*M, d) -> (B, d).
    pub fn mean_pool_blocks(&mut self, x: NodeId, mask: BlockMask, block: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let nb = xv.nrows() / block;
        let d = xv.ncols();
        let mut v = Array2::zeros((nb, d));
        for b in 0..nb {
            let mut count = 0.0;
            for j in 0..block {
                if mask[b][j] {
                    count += 1.0;
                    let row = xv.row(b * block + j);
                    let mut acc = v.row_mut(b);
                    acc += &row;
                }
            }
            assert!(count > 0.0, "mean pool over fully masked block");
            let mut acc = v.row_mut(b);
            acc /= count;
        }
        let rg = self.rg(x);
        self.push(v, Op::MeanPoolBlocks { x, mask, block }, rg)
    }

    /// Per block: A_b . B_b^T, (B*M, d) x (B*M, d) -> (B*M, M).
    pub fn block_mat_nt(&mut self, a: NodeId, b: NodeId, block: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let nb = av.nrows() / block;
        let d = av.ncols();
        let mut v = Array2::zeros((av.nrows(), block));
        for i in 0..nb {
            let rows = s![i * block..(i + 1) * block, ..];
            let prod = av.slice(rows).dot(&bv.slice(rows).t());
            v.slice_mut(rows).assign(&prod);
        }
        self.macs += (nb * block * block * d) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::BlockMatNT { a, b, block }, rg)
    }

    /// Per block: P_b . V_b, (B*M, M) x (B*M, d) -> (B*M, d).
    pub fn block_mat(&mut self, p: NodeId, v: NodeId, block: usize) -> NodeId {
        let pv = &self.nodes[p.0].value;
        let vv = &self.nodes[v.0].value;
        let nb = pv.nrows() / block;
        let d = vv.ncols();
        let mut out = Array2::zeros((pv.nrows(), d));
        for i in 0..nb {
            let rows = s![i * block..(i + 1) * block, ..];
            let prod = pv.slice(rows).dot(&vv.slice(rows));
            out.slice_mut(rows).assign(&prod);
        }
        self.macs += (nb * block * block * d) as u64;
        let rg = self.rg(p) || self.rg(v);
        self.push(out, Op::BlockMat { p, v, block }, rg)
    }

    /// Scales every row of block b by scale[b, 0]: x (B*M, d), scale (B, 1).
    pub fn col_scale_blocks(&mut self, x: NodeId, scale: NodeId, block: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[scale.0].value;
        let mut v = xv.clone();
        for (r, mut row) in v.outer_iter_mut().enumerate() {
            row *= sv[(r / block, 0)];
        }
        self.macs += xv.len() as u64;
        let rg = self.rg(x) || self.rg(scale);
        self.push(v, Op::ColScaleBlocks { x, scale, block }, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let v = ndarray::concatenate(ndarray::Axis(1), &[av.view(), bv.view()]).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols { a, b }, rg)
    }

    pub fn select_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x.0].value.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SelectCols { x, start, len }, rg)
    }

    /// out[r, 0] = x[r, idx[r]].
    pub fn select_per_row(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((xv.nrows(), 1));
        for r in 0..xv.nrows() {
            v[(r, 0)] = xv[(r, idx[r])];
        }
        let rg = self.rg(x);
        self.push(v, Op::SelectPerRow { x, idx }, rg)
    }

    /// out row r = x row rows[r].
    pub fn gather_rows(&mut self, x: NodeId, rows: Rc<Vec<usize>>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((rows.len(), xv.ncols()));
        for (r, &src) in rows.iter().enumerate() {
            v.row_mut(r).assign(&xv.row(src));
        }
        let rg = self.rg(x);
        self.push(v, Op::GatherRows { x, rows }, rg)
    }

    /// Row-major reshape; element count must be preserved.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), rows * cols);
        let v = Array2::from_shape_vec((rows, cols), xv.iter().cloned().collect()).unwrap();
        let rg = self.rg(x);
        self.push(v, Op::Reshape { x }, rg)
    }

    /// Row sums: (R, C) -> (R, 1).
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((xv.nrows(), 1));
        for (r, row) in xv.outer_iter().enumerate() {
            v[(r, 0)] = row.sum();
        }
        let rg = self.rg(x);
        self.push(v, Op::SumCols { x }, rg)
    }

    /// Scalar node: sum of w .* x over all entries.
    pub fn weighted_sum_all(&mut self, x: NodeId, w: Rc<Array2<f64>>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.raw_dim(), w.raw_dim());
        let total: f64 = xv.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSumAll { x, w },
            rg,
        )
    }

    /// out[b, h] = sum_a q[b, a] * w[b, a*inner + h]; q (B, A), w (B, A*inner).
    pub fn batched_vec_mat(&mut self, q: NodeId, w: NodeId, inner: usize) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let wv = &self.nodes[w.0].value;
        let nb = qv.nrows();
        let na = qv.ncols();
        let mut v = Array2::zeros((nb, inner));
        for b in 0..nb {
            for a in 0..na {
                let qa = qv[(b, a)];
                for h in 0..inner {
                    v[(b, h)] += qa * wv[(b, a * inner + h)];
                }
            }
        }
        self.macs += (nb * na * inner) as u64;
        let rg = self.rg(q) || self.rg(w);
        self.push(v, Op::BatchedVecMat { q, w, inner }, rg)
    }

    /// Row-wise dot product: (B, H) x (B, H) -> (B, 1).
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut v = Array2::zeros((av.nrows(), 1));
        for r in 0..av.nrows() {
            v[(r, 0)] = av.row(r).dot(&bv.row(r));
        }
        self.macs += av.len() as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::RowDot { a, b }, rg)
    }

    /// Contrastive disagreement over N prototype outputs, per block:
    /// out[b] = mean over prototypes n and unmasked entities e of
    /// logsumexp_i(s_ni) - s_nn with s_ni = <pv_n^e, pv_i^e>.
    pub fn cd_loss_blocks(&mut self, pvs: &[NodeId], mask: BlockMask, block: usize) -> NodeId {
        let n_proto = pvs.len();
        let first = &self.nodes[pvs[0].0].value;
        let nb = first.nrows() / block;
        let mut v = Array2::zeros((nb, 1));
        for b in 0..nb {
            let n_ent = mask[b].iter().filter(|&&m| m).count();
            assert!(n_ent > 0, "cd loss over fully masked block");
            let mut acc = 0.0;
            for e in 0..block {
                if !mask[b][e] {
                    continue;
                }
                let row = b * block + e;
                for n in 0..n_proto {
                    let mut sims = Vec::with_capacity(n_proto);
                    for i in 0..n_proto {
                        let sv = self.nodes[pvs[n].0]
                            .value
                            .row(row)
                            .dot(&self.nodes[pvs[i].0].value.row(row));
                        sims.push(sv);
                    }
                    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
                    acc += lse - sims[n];
                }
            }
            v[(b, 0)] = acc / (n_proto * n_ent) as f64;
        }
        self.macs += (nb * block * n_proto * n_proto * first.ncols()) as u64;
        let rg = pvs.iter().any(|&p| self.rg(p));
        self.push(
            v,
            Op::CdLoss {
                pvs: Rc::new(pvs.to_vec()),
                mask,
                block,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar (1 x 1) node. Parameter gradients accumulate
    /// into `param_grads` at each param leaf's offset.
    pub fn backward(&self, loss: NodeId, param_grads: &mut [f64]) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads, param_grads);
        }
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(
        &self,
        id: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        param_grads: &mut [f64],
    ) {
        let val = |n: NodeId| &self.nodes[n.0].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Param { offset } => {
                for (slot, gv) in param_grads[*offset..*offset + g.len()].iter_mut().zip(g.iter()) {
                    *slot += gv;
                }
            }
            Op::MatMul { a, b } => {
                let da = g.dot(&val(*b).t());
                let db = val(*a).t().dot(g);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul { a, b } => {
                self.accum(grads, *a, g * val(*b));
                self.accum(grads, *b, g * val(*a));
            }
            Op::AddBias { x, bias } => {
                self.accum(grads, *x, g.clone());
                let gb = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                self.accum(grads, *bias, gb);
            }
            Op::Scale { x, c } => self.accum(grads, *x, g * *c),
            Op::Relu { x } => {
                let mask = val(*x).mapv(|t| (t > 0.0) as i32 as f64);
                self.accum(grads, *x, g * &mask);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[id].value;
                self.accum(grads, *x, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                self.accum(grads, *x, g * &y.mapv(|t| t * (1.0 - t)));
            }
            Op::Elu { x } => {
                let d = val(*x).mapv(|t| if t > 0.0 { 1.0 } else { t.exp() });
                self.accum(grads, *x, g * &d);
            }
            Op::Abs { x } => {
                let d = val(*x).mapv(|t| if t >= 0.0 { 1.0 } else { -1.0 });
                self.accum(grads, *x, g * &d);
            }
            Op::LnClamped { x, eps } => {
                let d = val(*x).mapv(|t| if t > *eps { 1.0 / t } else { 0.0 });
                self.accum(grads, *x, g * &d);
            }
            Op::OneMinus { x } => self.accum(grads, *x, -g),
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].value;
                let mut dx = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.dot(&gr);
                    for c in 0..y.ncols() {
                        dx[(r, c)] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::SparsemaxRows { x } => {
                let y = &self.nodes[id].value;
                let mut dx = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let back = numerics::sparsemax_backward(
                        y.row(r).as_slice().unwrap(),
                        g.row(r).as_slice().unwrap(),
                    );
                    dx.row_mut(r).assign(&ndarray::ArrayView1::from(back.as_slice()));
                }
                self.accum(grads, *x, dx);
            }
            Op::ZeroRows { x, keep } => {
                let mut dx = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        dx.row_mut(r).fill(0.0);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::MeanPoolBlocks { x, mask, block } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for b in 0..g.nrows() {
                    let count = mask[b].iter().filter(|&&m| m).count() as f64;
                    for j in 0..*block {
                        if mask[b][j] {
                            let mut row = dx.row_mut(b * block + j);
                            row += &(&g.row(b) / count);
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::BlockMatNT { a, b, block } => {
                let av = val(*a);
                let bv = val(*b);
                let nb = av.nrows() / block;
                let mut da = Array2::zeros(av.raw_dim());
                let mut db = Array2::zeros(bv.raw_dim());
                for i in 0..nb {
                    let rows = s![i * block..(i + 1) * block, ..];
                    let gb = g.slice(rows);
                    da.slice_mut(rows).assign(&gb.dot(&bv.slice(rows)));
                    db.slice_mut(rows).assign(&gb.t().dot(&av.slice(rows)));
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::BlockMat { p, v, block } => {
                let pv = val(*p);
                let vv = val(*v);
                let nb = pv.nrows() / block;
                let mut dp = Array2::zeros(pv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                for i in 0..nb {
                    let rows = s![i * block..(i + 1) * block, ..];
                    let gb = g.slice(rows);
                    dp.slice_mut(rows).assign(&gb.dot(&vv.slice(rows).t()));
                    dv.slice_mut(rows).assign(&pv.slice(rows).t().dot(&gb));
                }
                self.accum(grads, *p, dp);
                self.accum(grads, *v, dv);
            }
            Op::ColScaleBlocks { x, scale, block } => {
                let xv = val(*x);
                let sv = val(*scale);
                let mut dx = g.clone();
                let mut ds = Array2::zeros(sv.raw_dim());
                for r in 0..xv.nrows() {
                    let b = r / block;
                    let mut row = dx.row_mut(r);
                    row *= sv[(b, 0)];
                    ds[(b, 0)] += g.row(r).dot(&xv.row(r));
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *scale, ds);
            }
            Op::ConcatCols { a, b } => {
                let wa = val(*a).ncols();
                let da = g.slice(s![.., ..wa]).to_owned();
                let db = g.slice(s![.., wa..]).to_owned();
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::SelectCols { x, start, len } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                dx.slice_mut(s![.., *start..start + len]).assign(g);
                self.accum(grads, *x, dx);
            }
            Op::SelectPerRow { x, idx } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    dx[(r, idx[r])] = g[(r, 0)];
                }
                self.accum(grads, *x, dx);
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g.row(r);
                }
                self.accum(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let xv = val(*x);
                let dx =
                    Array2::from_shape_vec(xv.raw_dim(), g.iter().cloned().collect()).unwrap();
                self.accum(grads, *x, dx);
            }
            Op::SumCols { x } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    dx.row_mut(r).fill(g[(r, 0)]);
                }
                self.accum(grads, *x, dx);
            }
            Op::WeightedSumAll { x, w } => {
                let dx = w.as_ref() * g[(0, 0)];
                self.accum(grads, *x, dx);
            }
            Op::BatchedVecMat { q, w, inner } => {
                let qv = val(*q);
                let wv = val(*w);
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dw = Array2::zeros(wv.raw_dim());
                for b in 0..qv.nrows() {
                    for a in 0..qv.ncols() {
                        for h in 0..*inner {
                            let gv = g[(b, h)];
                            dq[(b, a)] += gv * wv[(b, a * inner + h)];
                            dw[(b, a * inner + h)] += gv * qv[(b, a)];
                        }
                    }
                }
                self.accum(grads, *q, dq);
                self.accum(grads, *w, dw);
            }
            Op::RowDot { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                let mut da = Array2::zeros(av.raw_dim());
                let mut db = Array2::zeros(bv.raw_dim());
                for r in 0..av.nrows() {
                    let gr = g[(r, 0)];
                    da.row_mut(r).assign(&(&bv.row(r) * gr));
                    db.row_mut(r).assign(&(&av.row(r) * gr));
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::CdLoss { pvs, mask, block } => {
                let n_proto = pvs.len();
                let d = val(pvs[0]).ncols();
                let mut deltas: Vec<Array2<f64>> =
                    pvs.iter().map(|&p| Array2::zeros(val(p).raw_dim())).collect();
                let nb = val(pvs[0]).nrows() / block;
                for b in 0..nb {
                    let gb = g[(b, 0)];
                    if gb == 0.0 {
                        continue;
                    }
                    let n_ent = mask[b].iter().filter(|&&m| m).count();
                    let norm = gb / (n_proto * n_ent) as f64;
                    for e in 0..*block {
                        if !mask[b][e] {
                            continue;
                        }
                        let row = b * block + e;
                        for n in 0..n_proto {
                            let mut sims = Vec::with_capacity(n_proto);
                            for i in 0..n_proto {
                                sims.push(
                                    val(pvs[n]).row(row).dot(&val(pvs[i]).row(row)),
                                );
                            }
                            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> =
                                sims.iter().map(|s| (s - max).exp()).collect();
                            let z: f64 = exps.iter().sum();
                            for i in 0..n_proto {
                                // d loss / d s_ni = softmax_i - delta_ni
                                let c = norm * (exps[i] / z - ((i == n) as i32 as f64));
                                if c == 0.0 {
                                    continue;
                                }
                                for k in 0..d {
                                    deltas[n][(row, k)] += c * val(pvs[i])[(row, k)];
                                    deltas[i][(row, k)] += c * val(pvs[n])[(row, k)];
                                }
                            }
                        }
                    }
                }
                for (p, delta) in pvs.iter().zip(deltas) {
                    self.accum(grads, *p, delta);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;

    /// Finite-difference checks a scalar-valued tape program against its
    /// backward pass, over a flat parameter vector.
    fn check_program(
        build: &mut dyn FnMut(&mut Tape, &[f64]) -> NodeId,
        x0: &[f64],
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, x0);
        let mut grad = vec![0.0; x0.len()];
        tape.backward(loss, &mut grad);
        let build = std::cell::RefCell::new(build);
        let mut eval = |x: &[f64]| {
            let mut t = Tape::new();
            let l = (build.borrow_mut())(&mut t, x);
            t.value(l)[(0, 0)]
        };
        let mut sig = |x: &[f64]| {
            let mut t = Tape::new();
            let _ = (build.borrow_mut())(&mut t, x);
            t.region_signature()
        };
        let report =
            finite_difference_check(&mut eval, x0, &grad, 1e-6, 1e-4, Some(&mut sig));
        assert!(
            report.passed(),
            "failures: {:?}",
            report.failures()
        );
        assert!(report.kink_count() <= x0.len() / 10, "too many kinks");
    }

    fn full_mask(nb: usize, m: usize) -> BlockMask {
        Rc::new(vec![vec![true; m]; nb])
    }

    #[test]
    fn matmul_affine_chain_gradients() {
        let x0: Vec<f64> = (0..2 * 3 + 3 * 2 + 2)
            .map(|i| 0.3 * (i as f64) - 0.7)
            .collect();
        check_program(
            &mut |t, x| {
                let a = t.param(x, 0, (2, 3), true);
                let w = t.param(x, 6, (3, 2), true);
                let b = t.param(x, 12, (1, 2), true);
                let y = t.matmul(a, w);
                let y = t.add_bias(y, b);
                let y = t.tanh(y);
                let w1 = Rc::new(Array2::from_elem((2, 2), 0.5));
                t.weighted_sum_all(y, w1)
            },
            &x0,
        );
    }

    #[test]
    fn activation_gradients() {
        let x0 = [0.4, -0.8, 1.3, -0.2, 0.9, 2.1];
        check_program(
            &mut |t, x| {
                let a = t.param(x, 0, (2, 3), true);
                let r = t.relu(a);
                let s = t.sigmoid(a);
                let e = t.elu(a);
                let ab = t.abs(a);
                let m1 = t.mul(r, s);
                let m2 = t.mul(e, ab);
                let sum = t.add(m1, m2);
                let w = Rc::new(Array2::from_elem((2, 3), 1.0));
                t.weighted_sum_all(sum, w)
            },
            &x0,
        );
    }

    #[test]
    fn softmax_and_ln_gradients() {
        let x0 = [0.2, -0.5, 0.7, 1.1, 0.0, -1.0];
        check_program(
            &mut |t, x| {
                let a = t.param(x, 0, (2, 3), true);
                let p = t.softmax_rows(a, None, 3);
                let lp = t.ln_clamped(p, 1e-12);
                let pl = t.mul(p, lp);
                let w = Rc::new(Array2::from_elem((2, 3), -1.0));
                t.weighted_sum_all(pl, w) // entropy of each row
            },
            &x0,
        );
    }

    #[test]
    fn sparsemax_rows_gradients() {
        // margins chosen away from support boundaries
        let x0 = [0.9, 0.15, -2.0, 0.1, 0.0, 3.0];
        check_program(
            &mut |t, x| {
                let a = t.param(x, 0, (2, 3), true);
                let p = t.sparsemax_rows(a, None, 3);
                let sq = t.mul(p, p);
                let w = Rc::new(Array2::from_elem((2, 3), 1.0));
                t.weighted_sum_all(sq, w)
            },
            &x0,
        );
    }

    #[test]
    fn block_attention_gradients() {
        // one block of 3 entities, d = 2: q, k, v packed in x
        let x0: Vec<f64> = (0..18).map(|i| 0.25 * (i as f64 % 7.0) - 0.8).collect();
        check_program(
            &mut |t, x| {
                let q = t.param(x, 0, (3, 2), true);
                let k = t.param(x, 6, (3, 2), true);
                let v = t.param(x, 12, (3, 2), true);
                let scores = t.block_mat_nt(q, k, 3);
                let scaled = t.scale(scores, 1.0 / (2.0f64).sqrt());
                let p = t.sparsemax_rows(scaled, Some(full_mask(1, 3)), 3);
                let pv = t.block_mat(p, v, 3);
                let w = Rc::new(Array2::from_elem((3, 2), 0.7));
                t.weighted_sum_all(pv, w)
            },
            &x0,
        );
    }

    #[test]
    fn pooling_and_scaling_gradients() {
        let x0: Vec<f64> = (0..14).map(|i| 0.1 * i as f64 - 0.5).collect();
        check_program(
            &mut |t, x| {
                let e = t.param(x, 0, (4, 3), true); // 2 blocks of 2 entities
                let s = t.param(x, 12, (2, 1), true);
                let mask = Rc::new(vec![vec![true, true], vec![true, false]]);
                let pooled = t.mean_pool_blocks(e, mask, 2);
                let scaled = t.col_scale_blocks(e, s, 2);
                let joined = t.concat_cols(pooled, pooled);
                let w1 = Rc::new(Array2::from_elem((4, 3), 0.3));
                let l1 = t.weighted_sum_all(scaled, w1);
                let w2 = Rc::new(Array2::from_elem((2, 6), -0.4));
                let l2 = t.weighted_sum_all(joined, w2);
                t.add(l1, l2)
            },
            &x0,
        );
    }

    #[test]
    fn cd_loss_identities_and_gradient() {
        // N = 1: numerator equals denominator, loss 0
        let mut t = Tape::new();
        let pv = t.constant(Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let l = t.cd_loss_blocks(&[pv], full_mask(1, 2), 2);
        assert_eq!(t.value(l)[(0, 0)], 0.0);

        // identical prototypes: ln N
        let mut t = Tape::new();
        let a = t.constant(Array2::from_shape_vec((1, 2), vec![0.3, -0.2]).unwrap());
        let b = t.constant(Array2::from_shape_vec((1, 2), vec![0.3, -0.2]).unwrap());
        let l = t.cd_loss_blocks(&[a, b], full_mask(1, 1), 1);
        assert!((t.value(l)[(0, 0)] - 2f64.ln()).abs() < 1e-9);

        // hand-computed N=2, M=1 orthogonal case
        let mut t = Tape::new();
        let a = t.constant(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
        let b = t.constant(Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
        let l = t.cd_loss_blocks(&[a, b], full_mask(1, 1), 1);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((t.value(l)[(0, 0)] - expected).abs() < 1e-9);
        assert!((t.value(l)[(0, 0)] - 0.313262).abs() < 1e-6);

        // gradient against finite differences
        let x0: Vec<f64> = (0..12).map(|i| 0.2 * (i as f64) - 1.1).collect();
        check_program(
            &mut |t, x| {
                let a = t.param(x, 0, (2, 3), true);
                let b = t.param(x, 6, (2, 3), true);
                let cd = t.cd_loss_blocks(&[a, b], full_mask(1, 2), 2);
                let w = Rc::new(Array2::from_elem((1, 1), 1.0));
                t.weighted_sum_all(cd, w)
            },
            &x0,
        );
    }

    #[test]
    fn batched_vec_mat_and_row_dot_gradients() {
        let x0: Vec<f64> = (0..2 * 2 + 2 * 6 + 2 * 3)
            .map(|i| 0.17 * (i as f64) - 1.0)
            .collect();
        check_program(
            &mut |t, x| {
                let q = t.param(x, 0, (2, 2), true);
                let w = t.param(x, 4, (2, 6), true);
                let other = t.param(x, 16, (2, 3), true);
                let h = t.batched_vec_mat(q, w, 3);
                let h = t.elu(h);
                let d = t.row_dot(h, other);
                let ones = Rc::new(Array2::from_elem((2, 1), 1.0));
                t.weighted_sum_all(d, ones)
            },
            &x0,
        );
    }

    #[test]
    fn select_and_gru_style_gradients() {
        let x0: Vec<f64> = (0..20).map(|i| 0.1 * (i as f64) - 0.9).collect();
        check_program(
            &mut |t, x| {
                let a = t.param(x, 0, (2, 5), true);
                let b = t.param(x, 10, (2, 5), true);
                let z = t.sigmoid(a);
                let zc = t.one_minus(z);
                let h1 = t.mul(z, b);
                let h2 = t.mul(zc, a);
                let h = t.add(h1, h2);
                let sel = t.select_per_row(h, Rc::new(vec![3, 1]));
                let c0 = t.select_cols(h, 0, 2);
                let s = t.sum_cols(c0);
                let both = t.add(sel, s);
                let ones = Rc::new(Array2::from_elem((2, 1), 1.0));
                t.weighted_sum_all(both, ones)
            },
            &x0,
        );
    }

    #[test]
    fn no_grad_leaves_stop_backward() {
        let mut t = Tape::new();
        let frozen = t.param(&[1.0, 2.0], 0, (1, 2), false);
        let live = t.param(&[3.0, 4.0], 0, (1, 2), true);
        let prod = t.mul(frozen, live);
        let ones = Rc::new(Array2::from_elem((1, 2), 1.0));
        let loss = t.weighted_sum_all(prod, ones);
        let mut g = vec![0.0; 2];
        t.backward(loss, &mut g);
        // only the live leaf contributed; frozen leaf shares the offset and
        // would have doubled the gradient if it leaked
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn mac_counter_counts_matmuls() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((4, 3)));
        let b = t.constant(Array2::zeros((3, 5)));
        let _ = t.matmul(a, b);
        assert_eq!(t.macs(), 4 * 3 * 5);
    }
}
