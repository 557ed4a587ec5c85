//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends a node holding its output value and the handles of
//! its operands. [`Tape::backward`] walks the nodes in reverse order and
//! applies each node's backward rule. Values are 2-D (`rows × cols`); vectors
//! are carried as single rows or single columns.
//!
//! The tape also carries a multiply–accumulate counter. Each contraction-type
//! primitive adds its scalar multiplication count to the counter bucket of the
//! current [`CostTag`], which is how the benchmark module measures cost.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{self, matmul_at_b_into, matmul_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cost bucket for MAC accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostTag {
    Other,
    Encoder,
    TokenUpdate,
    Attention,
    NodeUpdate,
    EdgeMlp,
    Decoder,
}

impl CostTag {
    pub const ALL: [CostTag; 7] = [
        CostTag::Other,
        CostTag::Encoder,
        CostTag::TokenUpdate,
        CostTag::Attention,
        CostTag::NodeUpdate,
        CostTag::EdgeMlp,
        CostTag::Decoder,
    ];
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacCounter {
    counts: BTreeMap<CostTag, u64>,
}

impl MacCounter {
    pub fn add(&mut self, tag: CostTag, macs: u64) {
        if macs == 0 {
            return;
        }
        *self.counts.entry(tag).or_insert(0) += macs;
    }

    pub fn get(&self, tag: CostTag) -> u64 {
        self.counts.get(&tag).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CostTag, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Scale(Var, T),
    Square(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Sum { src: Var, axis: usize },
    SumAll(Var),
    SoftmaxMasked(Var),
    SegmentSoftmax { src: Var, offsets: Arc<[usize]> },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T>, floored: Vec<bool> },
    GatherRows { src: Var, index: Arc<[usize]> },
    ScatterAddRows { src: Var, index: Arc<[usize]> },
    RowDot(Var, Var),
    PairDot { a: Var, b: Var, receivers: Arc<[usize]>, senders: Arc<[usize]> },
    PairAggregate { w: Var, b: Var, receivers: Arc<[usize]>, senders: Arc<[usize]> },
    RsqrtClamped { src: Var, floor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    tag: CostTag,
    macs: MacCounter,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads[var.0].as_deref()
    }
}

fn mat_shape(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tag: CostTag::Other,
            macs: MacCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Switch the MAC bucket; returns the previous one.
    pub fn set_tag(&mut self, tag: CostTag) -> CostTag {
        std::mem::replace(&mut self.tag, tag)
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    fn count(&mut self, macs: usize) {
        let tag = self.tag;
        self.macs.add(tag, macs as u64);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        let value = Tensor::new(mat_shape(rows, cols), data).expect("primitive output shape");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        let (r, c) = (t.rows(), t.cols());
        let data = t.into_data();
        self.push(r, c, data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.dims(v);
        let data = self.nodes[v.0].value.data().to_vec();
        self.push(r, c, data, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.count(m * k * n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))?;
        self.count(self.value(out).len());
        Ok(out)
    }

    /// Row-wise broadcast addition of a `1 × cols` bias.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.dims(x), self.dims(bias));
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", &[r, c], &[br, bc]));
        }
        let b = self.value(bias).data().to_vec();
        let out = self
            .value(x)
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &w)| v + w).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(r, c, out, Op::AddRow(x, bias), rg))
    }

    /// Row-wise broadcast multiplication by a `1 × cols` gain.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let ((r, c), (gr, gc)) = (self.dims(x), self.dims(gain));
        if gr != 1 || gc != c {
            return Err(Error::shape("mul_row", &[r, c], &[gr, gc]));
        }
        let g = self.value(gain).data().to_vec();
        let out = self
            .value(x)
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(&g).map(|(&v, &w)| v * w).collect::<Vec<_>>())
            .collect();
        self.count(r * c);
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(r, c, out, Op::MulRow(x, gain), rg))
    }

    /// Scale each row of `x` (`rows × cols`) by the matching entry of `w` (`rows × 1`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let ((r, c), (wr, wc)) = (self.dims(x), self.dims(w));
        if wr != r || wc != 1 {
            return Err(Error::shape("scale_rows", &[r, c], &[wr, wc]));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        if c > 0 {
            for (row, &s) in out.chunks_mut(c).zip(&wv) {
                for v in row {
                    *v = *v * s;
                }
            }
        }
        self.count(r * c);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(r, c, out, Op::ScaleRows(x, w), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(r, c, out, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(r, c, out, Op::Scale(x, s), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| v * v).collect();
        let rg = self.rg(x);
        self.push(r, c, out, Op::Square(x), rg)
    }

    /// Concatenate along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r0, c0) = self.dims(first);
        let rg = parts.iter().any(|&p| self.rg(p));
        match axis {
            0 => {
                let mut rows = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if c != c0 {
                        return Err(Error::shape("concat(axis 0)", &[r0, c0], &[r, c]));
                    }
                    rows += r;
                    out.extend_from_slice(self.value(p).data());
                }
                Ok(self.push(rows, c0, out, Op::Concat { parts: parts.to_vec(), axis }, rg))
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if r != r0 {
                        return Err(Error::shape("concat(axis 1)", &[r0, c0], &[r, c]));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row(i));
                    }
                }
                Ok(self.push(r0, cols, out, Op::Concat { parts: parts.to_vec(), axis }, rg))
            }
            _ => Err(Error::Contract(format!("concat axis {axis}"))),
        }
    }

    /// Take `len` rows (`axis = 0`) or columns (`axis = 1`) starting at `start`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::shape("slice", &[r, c], &[axis, start, len]));
        }
        let v = self.value(src);
        let (out, rr, cc) = if axis == 0 {
            (v.data()[start * c..(start + len) * c].to_vec(), len, c)
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&v.row(i)[start..start + len]);
            }
            (out, r, len)
        };
        let rg = self.rg(src);
        Ok(self.push(rr, cc, out, Op::Slice { src, axis, start }, rg))
    }

    /// Sum over rows (`axis = 0`, result `1 × cols`) or columns (`axis = 1`, result `rows × 1`).
    pub fn sum(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        let v = self.value(src).data();
        let (out, rr, cc) = match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for row in v.chunks(c.max(1)) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o = *o + x;
                    }
                }
                (out, 1, c)
            }
            1 => {
                let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().copied().sum()).collect();
                (out, r, 1)
            }
            _ => return Err(Error::Contract(format!("sum axis {axis}"))),
        };
        let rg = self.rg(src);
        Ok(self.push(rr, cc, out, Op::Sum { src, axis }, rg))
    }

    pub fn mean(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        let n = if axis == 0 { r } else { c };
        let s = self.sum(src, axis)?;
        Ok(self.scale(s, T::one() / T::from_f(n.max(1) as f64)))
    }

    pub fn sum_all(&mut self, src: Var) -> Var {
        let total = self.value(src).data().iter().copied().sum();
        let rg = self.rg(src);
        self.push(1, 1, vec![total], Op::SumAll(src), rg)
    }

    pub fn mean_all(&mut self, src: Var) -> Var {
        let n = self.value(src).len().max(1);
        let s = self.sum_all(src);
        self.scale(s, T::one() / T::from_f(n as f64))
    }

    /// Row-wise softmax over unmasked entries. `mask` has one flag per element.
    pub fn softmax_masked(&mut self, src: Var, mask: Arc<[bool]>) -> Result<Var> {
        let (r, c) = self.dims(src);
        if mask.len() != r * c {
            return Err(Error::shape("softmax_masked", &[r, c], &[mask.len()]));
        }
        let v = self.value(src).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tensor::softmax_masked_slice(&v[i * c..(i + 1) * c], &mask[i * c..(i + 1) * c])
                .ok_or(Error::DegenerateRow { row: i })?;
            out.extend(row);
        }
        let rg = self.rg(src);
        Ok(self.push(r, c, out, Op::SoftmaxMasked(src), rg))
    }

    /// Softmax within contiguous segments of a column vector.
    ///
    /// Segment `s` covers rows `offsets[s]..offsets[s + 1]`; empty segments are
    /// allowed and contribute nothing.
    pub fn segment_softmax(&mut self, src: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(src);
        if c != 1 || offsets.last().copied().unwrap_or(0) != r {
            return Err(Error::shape("segment_softmax", &[r, c], &[offsets.last().copied().unwrap_or(0), 1]));
        }
        let v = self.value(src).data();
        let mut out = vec![T::zero(); r];
        for w in offsets.windows(2) {
            let seg = &v[w[0]..w[1]];
            if seg.is_empty() {
                continue;
            }
            let max = seg.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, &x) in out[w[0]..w[1]].iter_mut().zip(seg) {
                *o = (x - max).exp();
                total = total + *o;
            }
            for o in &mut out[w[0]..w[1]] {
                *o = *o / total;
            }
        }
        let rg = self.rg(src);
        Ok(self.push(r, 1, out, Op::SegmentSoftmax { src, offsets }, rg))
    }

    /// Per-row layer normalization with `1 × cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c < 2 {
            return Err(Error::Contract(format!("layer_norm needs at least 2 features, got {c}")));
        }
        if self.dims(gain) != (1, c) || self.dims(shift) != (1, c) {
            return Err(Error::shape("layer_norm", &[r, c], &[self.dims(gain).0, self.dims(gain).1]));
        }
        let floor = T::from_f(tensor::LAYER_NORM_EPS);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut floored = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let (mean, s) = tensor::layer_norm_stats(row);
            floored.push(T::one() / (s * s) <= floor);
            inv_std.push(s);
            for ((&v, &gv), &bv) in row.iter().zip(g).zip(b) {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * gv + bv);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, shift, xhat, inv_std, floored }, rg))
    }

    pub fn gather_rows(&mut self, src: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("gather index {bad} out of range for {r} rows")));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(src);
        Ok(self.push(index.len(), c, out, Op::GatherRows { src, index }, rg))
    }

    /// Sum rows of `src` into `rows` output rows: `out[index[e]] += src[e]`.
    pub fn scatter_add_rows(&mut self, src: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if index.len() != r {
            return Err(Error::shape("scatter_add_rows", &[r, c], &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("scatter index {bad} out of range for {rows} rows")));
        }
        let v = self.value(src).data();
        let mut out = vec![T::zero(); rows * c];
        for (e, &dst) in index.iter().enumerate() {
            for (o, &x) in out[dst * c..(dst + 1) * c].iter_mut().zip(&v[e * c..(e + 1) * c]) {
                *o = *o + x;
            }
        }
        let rg = self.rg(src);
        Ok(self.push(rows, c, out, Op::ScatterAddRows { src, index }, rg))
    }

    /// Per-row dot products: `rows × cols` and `rows × cols` to `rows × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..r)
            .map(|i| {
                av[i * c..(i + 1) * c]
                    .iter()
                    .zip(&bv[i * c..(i + 1) * c])
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
            })
            .collect();
        self.count(r * c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, 1, out, Op::RowDot(a, b), rg))
    }

    fn check_pairs(&self, op: &'static str, receivers: &[usize], senders: &[usize], a_rows: usize, b_rows: usize) -> Result<()> {
        if receivers.len() != senders.len() {
            return Err(Error::shape(op, &[receivers.len()], &[senders.len()]));
        }
        if let Some(&bad) = receivers.iter().find(|&&i| i >= a_rows) {
            return Err(Error::Input(format!("{op}: receiver {bad} out of range for {a_rows} rows")));
        }
        if let Some(&bad) = senders.iter().find(|&&j| j >= b_rows) {
            return Err(Error::Input(format!("{op}: sender {bad} out of range for {b_rows} rows")));
        }
        Ok(())
    }

    /// `out[k] = a[receivers[k]] · b[senders[k]]`, one `E × 1` column, without
    /// materializing per-pair rows.
    pub fn pair_dot(&mut self, a: Var, b: Var, receivers: Arc<[usize]>, senders: Arc<[usize]>) -> Result<Var> {
        let ((ra, c), (rb, cb)) = (self.dims(a), self.dims(b));
        if c != cb {
            return Err(Error::shape("pair_dot", &[ra, c], &[rb, cb]));
        }
        self.check_pairs("pair_dot", &receivers, &senders, ra, rb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = receivers
            .iter()
            .zip(senders.iter())
            .map(|(&i, &j)| dot(&av[i * c..(i + 1) * c], &bv[j * c..(j + 1) * c]))
            .collect();
        let e = out.len();
        self.count(e * c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(e, 1, out, Op::PairDot { a, b, receivers, senders }, rg))
    }

    /// `out[receivers[k]] += w[k] · b[senders[k]]` into `rows` output rows.
    pub fn pair_aggregate(
        &mut self,
        w: Var,
        b: Var,
        receivers: Arc<[usize]>,
        senders: Arc<[usize]>,
        rows: usize,
    ) -> Result<Var> {
        let ((e, wc), (rb, c)) = (self.dims(w), self.dims(b));
        if wc != 1 || e != receivers.len() {
            return Err(Error::shape("pair_aggregate", &[e, wc], &[receivers.len(), 1]));
        }
        self.check_pairs("pair_aggregate", &receivers, &senders, rows, rb)?;
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); rows * c];
        for ((&i, &j), &wk) in receivers.iter().zip(senders.iter()).zip(wv) {
            axpy(&mut out[i * c..(i + 1) * c], wk, &bv[j * c..(j + 1) * c]);
        }
        self.count(e * c);
        let rg = self.rg(w) || self.rg(b);
        Ok(self.push(rows, c, out, Op::PairAggregate { w, b, receivers, senders }, rg))
    }

    /// `1 / sqrt(max(x, floor))`, element-wise.
    pub fn rsqrt_clamped(&mut self, src: Var, floor: T) -> Var {
        let (r, c) = self.dims(src);
        let out = self
            .value(src)
            .data()
            .iter()
            .map(|&v| T::one() / v.max(floor).sqrt())
            .collect();
        let rg = self.rg(src);
        self.push(r, c, out, Op::RsqrtClamped { src, floor }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn apply_rule(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.dims(*a), self.dims(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    let bt = tensor::transpose(bv, k, n);
                    matmul_into(g, &bt, ga, m, n, k);
                });
                self.accumulate(grads, *b, |gb| matmul_at_b_into(av, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + x * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gain).data());
                self.accumulate(grads, *x, |gx| {
                    for (grow, orow) in g.chunks(cols).zip(gx.chunks_mut(cols)) {
                        for ((o, &u), &w) in orow.iter_mut().zip(grow).zip(gv) {
                            *o = *o + u * w;
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (grow, xrow) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for ((o, &u), &v) in gg.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + u * v;
                        }
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| {
                    for i in 0..rows {
                        let s = wv[i];
                        for (o, &u) in gx[i * cols..(i + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *o = *o + u * s;
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for i in 0..rows {
                        let dot = g[i * cols..(i + 1) * cols]
                            .iter()
                            .zip(&xv[i * cols..(i + 1) * cols])
                            .fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                        gw[i] = gw[i] + dot;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &u), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o = *o + u;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, |gx| {
                    for (o, &u) in gx.iter_mut().zip(g) {
                        *o = *o + u * s;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::from_f(2.0);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &u), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + two * u * v;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    if *axis == 0 {
                        let start = offset * cols;
                        self.accumulate(grads, p, |gp| add_into(gp, &g[start..start + pr * pc]));
                        offset += pr;
                    } else {
                        let start = offset;
                        self.accumulate(grads, p, |gp| {
                            for i in 0..pr {
                                add_into(&mut gp[i * pc..(i + 1) * pc], &g[i * cols + start..i * cols + start + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (_, sc) = self.dims(*src);
                let start = *start;
                self.accumulate(grads, *src, |gs| {
                    if *axis == 0 {
                        add_into(&mut gs[start * sc..(start + rows) * sc], g);
                    } else {
                        for i in 0..rows {
                            add_into(&mut gs[i * sc + start..i * sc + start + cols], &g[i * cols..(i + 1) * cols]);
                        }
                    }
                });
            }
            Op::Sum { src, axis } => {
                let (sr, sc) = self.dims(*src);
                self.accumulate(grads, *src, |gs| {
                    for i in 0..sr {
                        for j in 0..sc {
                            let u = if *axis == 0 { g[j] } else { g[i] };
                            gs[i * sc + j] = gs[i * sc + j] + u;
                        }
                    }
                });
            }
            Op::SumAll(src) => {
                let u = g[0];
                self.accumulate(grads, *src, |gs| {
                    for o in gs.iter_mut() {
                        *o = *o + u;
                    }
                });
            }
            Op::SoftmaxMasked(src) => {
                let y = node.value.data();
                self.accumulate(grads, *src, |gs| {
                    for i in 0..rows {
                        softmax_backward(&y[i * cols..(i + 1) * cols], &g[i * cols..(i + 1) * cols], &mut gs[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::SegmentSoftmax { src, offsets } => {
                let y = node.value.data();
                self.accumulate(grads, *src, |gs| {
                    for w in offsets.windows(2) {
                        softmax_backward(&y[w[0]..w[1]], &g[w[0]..w[1]], &mut gs[w[0]..w[1]]);
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std, floored } => {
                let gv = self.value(*gain).data();
                let d = T::from_f(cols as f64);
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); cols];
                    for i in 0..rows {
                        let grow = &g[i * cols..(i + 1) * cols];
                        let hrow = &xhat[i * cols..(i + 1) * cols];
                        for ((o, &u), &w) in dxhat.iter_mut().zip(grow).zip(gv) {
                            *o = u * w;
                        }
                        let mean_dh = dxhat.iter().copied().sum::<T>() / d;
                        let mean_dh_h = if floored[i] {
                            T::zero()
                        } else {
                            dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / d
                        };
                        let s = inv_std[i];
                        for ((o, &dh), &h) in gx[i * cols..(i + 1) * cols].iter_mut().zip(&dxhat).zip(hrow) {
                            *o = *o + s * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, &u), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o = *o + u * h;
                        }
                    }
                });
                self.accumulate(grads, *shift, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::GatherRows { src, index } => {
                self.accumulate(grads, *src, |gs| {
                    for (e, &i) in index.iter().enumerate() {
                        add_into(&mut gs[i * cols..(i + 1) * cols], &g[e * cols..(e + 1) * cols]);
                    }
                });
            }
            Op::ScatterAddRows { src, index } => {
                self.accumulate(grads, *src, |gs| {
                    for (e, &i) in index.iter().enumerate() {
                        add_into(&mut gs[e * cols..(e + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (_, c) = self.dims(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..rows {
                        for (o, &y) in ga[i * c..(i + 1) * c].iter_mut().zip(&bv[i * c..(i + 1) * c]) {
                            *o = *o + g[i] * y;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..rows {
                        for (o, &x) in gb[i * c..(i + 1) * c].iter_mut().zip(&av[i * c..(i + 1) * c]) {
                            *o = *o + g[i] * x;
                        }
                    }
                });
            }
            Op::PairDot { a, b, receivers, senders } => {
                let (_, c) = self.dims(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for (k, (&i, &j)) in receivers.iter().zip(senders.iter()).enumerate() {
                        axpy(&mut ga[i * c..(i + 1) * c], g[k], &bv[j * c..(j + 1) * c]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (k, (&i, &j)) in receivers.iter().zip(senders.iter()).enumerate() {
                        axpy(&mut gb[j * c..(j + 1) * c], g[k], &av[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::PairAggregate { w, b, receivers, senders } => {
                let c = cols;
                let (wv, bv) = (self.value(*w).data(), self.value(*b).data());
                self.accumulate(grads, *w, |gw| {
                    for (k, (&i, &j)) in receivers.iter().zip(senders.iter()).enumerate() {
                        gw[k] = gw[k] + dot(&g[i * c..(i + 1) * c], &bv[j * c..(j + 1) * c]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((&i, &j), &wk) in receivers.iter().zip(senders.iter()).zip(wv) {
                        axpy(&mut gb[j * c..(j + 1) * c], wk, &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::RsqrtClamped { src, floor } => {
                let xv = self.value(*src).data();
                let y = node.value.data();
                let half = T::from_f(0.5);
                self.accumulate(grads, *src, |gs| {
                    for (((o, &u), &x), &yv) in gs.iter_mut().zip(g).zip(xv).zip(y) {
                        if x > *floor {
                            *o = *o - half * u * yv * yv * yv;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + x;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `dst += w · src`.
fn axpy<T: Scalar>(dst: &mut [T], w: T, src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + w * x;
    }
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T], out: &mut [T]) {
    let dot = y.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for ((o, &yv), &u) in out.iter_mut().zip(y).zip(g) {
        *o = *o + yv * (u - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f(shape, v).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(W x) with x fixed: dL/dW[i][j] = x[j] for every row i
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn detached_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_all(w);
        let loss = tape.detach(s);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let mask: Arc<[bool]> = vec![true, false, false, false].into();
        assert!(matches!(tape.softmax_masked(x, mask), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let g3 = tape.constant(t(&[1, 3], &[1.0; 3]));
        let b3 = tape.constant(t(&[1, 3], &[0.0; 3]));
        let c = tape.constant(t(&[1, 3], &[4.2, 4.2, 4.2]));
        let y = tape.layer_norm(c, g3, b3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g3, b3).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 3.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
        // direct statistics: mean 2, population std sqrt(2/3)
        let std = (2.0f64 / 3.0).sqrt();
        for (o, v) in out.iter().zip([1.0, 2.0, 3.0]) {
            assert!((o - (v - 2.0) / std).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let g = tape.constant(t(&[1, 1], &[1.0]));
        assert!(tape.layer_norm(x, g, g).is_err());
    }

    #[test]
    fn mac_counter_tracks_tags() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        tape.set_tag(CostTag::Encoder);
        tape.matmul(a, b).unwrap();
        tape.set_tag(CostTag::Attention);
        tape.row_dot(a, a).unwrap();
        assert_eq!(tape.macs().get(CostTag::Encoder), 60);
        assert_eq!(tape.macs().get(CostTag::Attention), 12);
        assert_eq!(tape.macs().total(), 72);
    }

    #[test]
    fn segment_softmax_allows_empty_segments() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[0.0, 0.0, 5.0]));
        let offsets: Arc<[usize]> = vec![0, 2, 2, 3].into();
        let y = tape.segment_softmax(x, offsets).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 1.0]);
    }

    #[test]
    fn pair_primitives_match_gather_compositions() {
        let a = t(&[3, 2], &[1.0, -2.0, 0.5, 3.0, -1.5, 0.25]);
        let b = t(&[4, 2], &[2.0, 1.0, -0.5, 0.75, 1.25, -3.0, 0.0, 2.5]);
        let w = t(&[5, 1], &[0.3, -1.2, 2.0, 0.7, -0.4]);
        let recv: Arc<[usize]> = vec![0, 0, 1, 2, 2].into();
        let send: Arc<[usize]> = vec![1, 3, 0, 2, 1].into();
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let (av, bv, wv) = (tape.param(a.clone()), tape.param(b.clone()), tape.param(w.clone()));
            let (d, agg) = if fused {
                let d = tape.pair_dot(av, bv, recv.clone(), send.clone()).unwrap();
                (d, tape.pair_aggregate(wv, bv, recv.clone(), send.clone(), 3).unwrap())
            } else {
                let ae = tape.gather_rows(av, recv.clone()).unwrap();
                let be = tape.gather_rows(bv, send.clone()).unwrap();
                let d = tape.row_dot(ae, be).unwrap();
                let m = tape.scale_rows(be, wv).unwrap();
                (d, tape.scatter_add_rows(m, recv.clone(), 3).unwrap())
            };
            let dd = tape.square(d);
            let l1 = tape.sum_all(dd);
            let aa = tape.mul(agg, av).unwrap();
            let l2 = tape.sum_all(aa);
            let loss = tape.add(l1, l2).unwrap();
            let g = tape.backward(loss).unwrap();
            let vals = [tape.value(d).clone(), tape.value(agg).clone()];
            (vals, [g.wrt(av), g.wrt(bv), g.wrt(wv)])
        };
        let ((fv, fg), (cv, cg)) = (run(true), run(false));
        for (x, y) in fv.iter().zip(&cv).chain(fg.iter().zip(&cg)) {
            assert!(x.max_abs_diff(y) < 1e-12, "{x:?} vs {y:?}");
        }
        let mut tape = Tape::<f64>::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        assert!(tape.pair_dot(av, bv, vec![3].into(), vec![0].into()).is_err());
    }
}
