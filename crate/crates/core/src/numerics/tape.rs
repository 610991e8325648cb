//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every primitive application in topological order:
//! each node's inputs were produced by earlier nodes or are leaves. The
//! backward sweep walks the records once in reverse and accumulates
//! gradients into per-node buffers with a fixed iteration order, so
//! replaying the same tape is bit-reproducible.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Tanh { x: ValueId },
    Sigmoid { x: ValueId },
    Log { x: ValueId },
    Concat { parts: Vec<ValueId> },
    Slice { x: ValueId, start: usize },
    Softmax { x: ValueId },
    LogSoftmax { x: ValueId },
    Row { table: ValueId, index: usize },
    StackCols { parts: Vec<ValueId> },
    AddColBroadcast { mat: ValueId, vec: ValueId },
    Sum { x: ValueId },
    Mean { x: ValueId },
    Scale { x: ValueId, c: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records primitive applications for a single forward build and one or
/// more backward sweeps. Single-owner: forward construction and the
/// backward sweep require exclusive access.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward target w.r.t. this value, if the
    /// value participated. Detached values yield `None`, read as zero.
    pub fn grad(&self, id: ValueId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.nodes[id.0].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_or_zeros(&self, id: ValueId) -> Tensor {
        self.grad(id)
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<ValueId> {
        value.check_finite(name)?;
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Records an input value. Leaves carry gradients after `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<ValueId> {
        self.push(Op::Leaf, t.clone(), "leaf")
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<ValueId> {
        self.leaf(t)
    }

    /// Matrix product. `a` must be `[m,k]`; `b` may be `[k,n]` (result
    /// `[m,n]`) or a vector `[k]` (result `[m]`).
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        };
        if av.rank() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let value = match bv.rank() {
            1 => {
                if bv.shape()[0] != k {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m];
                let ad = av.data();
                let bd = bv.data();
                for i in 0..m {
                    let row = &ad[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(bd).map(|(x, y)| x * y).sum();
                }
                Tensor::from_vec(&[m], out)
            }
            2 => {
                if bv.shape()[0] != k {
                    return Err(mismatch());
                }
                let n = bv.shape()[1];
                let mut out = vec![0.0; m * n];
                let ad = av.data();
                let bd = bv.data();
                for i in 0..m {
                    for p in 0..k {
                        let x = ad[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let brow = &bd[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += x * brow[j];
                        }
                    }
                }
                Tensor::from_vec(&[m, n], out)
            }
            _ => return Err(mismatch()),
        }?;
        self.push(Op::MatMul { a, b }, value, "matmul")
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "rank-2 tensor",
                got: xv.shape().to_vec(),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        self.push(Op::Transpose { x }, value, "transpose")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(ValueId, ValueId) -> Op,
    ) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        self.push(op(a, b), value, name)
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.map_elementwise(x, |v| v.tanh());
        self.push(Op::Tanh { x }, value, "tanh")
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.map_elementwise(x, sigmoid);
        self.push(Op::Sigmoid { x }, value, "sigmoid")
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.map_elementwise(x, |v| v.ln());
        self.push(Op::Log { x }, value, "log")
    }

    fn map_elementwise(&self, x: ValueId, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_vec_unchecked(xv.shape(), xv.data().iter().map(|v| f(*v)).collect())
    }

    /// Concatenation of vectors into one vector.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(Error::BadShape {
                    op: "concat",
                    expected: "rank-1 tensors",
                    got: pv.shape().to_vec(),
                });
            }
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::from_vec(&[data.len()], data)?;
        self.push(Op::Concat { parts: parts.to_vec() }, value, "concat")
    }

    /// Contiguous sub-vector `[start, start+len)` of a vector.
    pub fn slice(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.rank() != 1 || start + len > xv.len() {
            return Err(Error::BadShape {
                op: "slice",
                expected: "rank-1 tensor covering the requested range",
                got: xv.shape().to_vec(),
            });
        }
        let value = Tensor::from_vec(&[len], xv.data()[start..start + len].to_vec())?;
        self.push(Op::Slice { x, start }, value, "slice")
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.softmax_value(x, "softmax")?;
        self.push(Op::Softmax { x }, value, "softmax")
    }

    fn softmax_value(&self, x: ValueId, name: &str) -> Result<Tensor> {
        let xv = self.value(x);
        if xv.is_empty() || xv.rank() != 1 {
            return Err(Error::EmptyInput("softmax"));
        }
        xv.check_finite(name)?;
        let max = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.data().iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        Tensor::from_vec(xv.shape(), exps.iter().map(|e| e / denom).collect())
    }

    /// Fused numerically-stable log-softmax over a vector.
    pub fn log_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.is_empty() || xv.rank() != 1 {
            return Err(Error::EmptyInput("log_softmax"));
        }
        let max = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| v - lse).collect())?;
        self.push(Op::LogSoftmax { x }, value, "log_softmax")
    }

    /// Single-row lookup into a `[rows, cols]` table; the gradient
    /// accumulates into that row only.
    pub fn row(&mut self, table: ValueId, index: usize) -> Result<ValueId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::BadShape {
                op: "row",
                expected: "rank-2 table",
                got: tv.shape().to_vec(),
            });
        }
        let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
        if index >= rows {
            return Err(Error::VocabIdOutOfRange {
                id: index,
                vocab_size: rows,
            });
        }
        let value = Tensor::from_vec(&[cols], tv.data()[index * cols..(index + 1) * cols].to_vec())?;
        self.push(Op::Row { table, index }, value, "row")
    }

    /// Builds an `[m, n]` matrix whose columns are the given `[m]` vectors.
    pub fn stack_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack_cols"));
        }
        let m = self.value(parts[0]).len();
        let n = parts.len();
        let mut data = vec![0.0; m * n];
        for (c, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            if pv.rank() != 1 || pv.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "stack_cols",
                    lhs: vec![m],
                    rhs: pv.shape().to_vec(),
                });
            }
            for i in 0..m {
                data[i * n + c] = pv.data()[i];
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        self.push(Op::StackCols { parts: parts.to_vec() }, value, "stack_cols")
    }

    /// Adds an `[m]` vector to every column of an `[m, n]` matrix.
    pub fn add_col_broadcast(&mut self, mat: ValueId, vec: ValueId) -> Result<ValueId> {
        let (mv, vv) = (self.value(mat), self.value(vec));
        if mv.rank() != 2 || vv.rank() != 1 || mv.shape()[0] != vv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                lhs: mv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let (m, n) = (mv.shape()[0], mv.shape()[1]);
        let mut data = mv.data().to_vec();
        for i in 0..m {
            let b = vv.data()[i];
            for j in 0..n {
                data[i * n + j] += b;
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        self.push(Op::AddColBroadcast { mat, vec }, value, "add_col_broadcast")
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum { x }, value, "sum")
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push(Op::Mean { x }, value, "mean")
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let value = self.map_elementwise(x, |v| v * c);
        self.push(Op::Scale { x, c }, value, "scale")
    }

    /// Reverse sweep: for every value on the tape, accumulates
    /// d(loss)/d(value). `loss` must be a scalar produced by this tape.
    /// Repeat calls reset gradients first, so replays are bit-identical.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar loss",
                got: self.value(loss).shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &out_grad);
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, f: impl FnOnce(&mut [f64])) {
        let len = self.nodes[id.0].value.len();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) {
        // The node's op is read out by value-copying ids to avoid
        // holding a borrow across the accumulate calls.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (m, k) = (av.shape()[0], av.shape()[1]);
                match bv.rank() {
                    1 => {
                        // y[m] = A[m,k] b[k]
                        self.accumulate(a, |da| {
                            for i in 0..m {
                                for j in 0..k {
                                    da[i * k + j] += dy[i] * bv.data()[j];
                                }
                            }
                        });
                        self.accumulate(b, |db| {
                            for i in 0..m {
                                let g = dy[i];
                                if g == 0.0 {
                                    continue;
                                }
                                let row = &av.data()[i * k..(i + 1) * k];
                                for j in 0..k {
                                    db[j] += g * row[j];
                                }
                            }
                        });
                    }
                    _ => {
                        let n = bv.shape()[1];
                        // dA = dY Bᵀ ; dB = Aᵀ dY
                        self.accumulate(a, |da| {
                            for i in 0..m {
                                for p in 0..k {
                                    let brow = &bv.data()[p * n..(p + 1) * n];
                                    let drow = &dy[i * n..(i + 1) * n];
                                    da[i * k + p] +=
                                        brow.iter().zip(drow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        });
                        self.accumulate(b, |db| {
                            for p in 0..k {
                                for i in 0..m {
                                    let x = av.data()[i * k + p];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    let drow = &dy[i * n..(i + 1) * n];
                                    let brow = &mut db[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        brow[j] += x * drow[j];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            &Op::Transpose { x } => {
                let (n, m) = {
                    let s = self.nodes[idx].value.shape();
                    (s[0], s[1])
                };
                self.accumulate(x, |dx| {
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] += dy[i * m + j];
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(a, |da| {
                    for (d, g) in da.iter_mut().zip(dy) {
                        *d += g;
                    }
                });
                self.accumulate(b, |db| {
                    for (d, g) in db.iter_mut().zip(dy) {
                        *d += g;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.accumulate(a, |da| {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv.data()[i];
                    }
                });
                self.accumulate(b, |db| {
                    for i in 0..dy.len() {
                        db[i] += dy[i] * av.data()[i];
                    }
                });
            }
            &Op::Tanh { x } => {
                let yv = self.nodes[idx].value.clone();
                self.accumulate(x, |dx| {
                    for i in 0..dy.len() {
                        let y = yv.data()[i];
                        dx[i] += dy[i] * (1.0 - y * y);
                    }
                });
            }
            &Op::Sigmoid { x } => {
                let yv = self.nodes[idx].value.clone();
                self.accumulate(x, |dx| {
                    for i in 0..dy.len() {
                        let y = yv.data()[i];
                        dx[i] += dy[i] * y * (1.0 - y);
                    }
                });
            }
            &Op::Log { x } => {
                let xv = self.nodes[x.0].value.clone();
                self.accumulate(x, |dx| {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] / xv.data()[i];
                    }
                });
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accumulate(p, |dp| {
                        for i in 0..len {
                            dp[i] += dy[offset + i];
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, start } => {
                self.accumulate(x, |dx| {
                    for (i, g) in dy.iter().enumerate() {
                        dx[start + i] += g;
                    }
                });
            }
            &Op::Softmax { x } => {
                let yv = self.nodes[idx].value.clone();
                let dot: f64 = yv.data().iter().zip(dy).map(|(y, g)| y * g).sum();
                self.accumulate(x, |dx| {
                    for i in 0..dy.len() {
                        dx[i] += yv.data()[i] * (dy[i] - dot);
                    }
                });
            }
            &Op::LogSoftmax { x } => {
                let yv = self.nodes[idx].value.clone();
                let total: f64 = dy.iter().sum();
                self.accumulate(x, |dx| {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] - yv.data()[i].exp() * total;
                    }
                });
            }
            &Op::Row { table, index } => {
                let cols = self.nodes[idx].value.len();
                self.accumulate(table, |dt| {
                    for i in 0..cols {
                        dt[index * cols + i] += dy[i];
                    }
                });
            }
            Op::StackCols { parts } => {
                let parts = parts.clone();
                let n = parts.len();
                for (c, p) in parts.into_iter().enumerate() {
                    let m = self.nodes[p.0].value.len();
                    self.accumulate(p, |dp| {
                        for i in 0..m {
                            dp[i] += dy[i * n + c];
                        }
                    });
                }
            }
            &Op::AddColBroadcast { mat, vec } => {
                let (m, n) = {
                    let s = self.nodes[idx].value.shape();
                    (s[0], s[1])
                };
                self.accumulate(mat, |dm| {
                    for (d, g) in dm.iter_mut().zip(dy) {
                        *d += g;
                    }
                });
                self.accumulate(vec, |dv| {
                    for i in 0..m {
                        dv[i] += dy[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            &Op::Sum { x } => {
                let g = dy[0];
                self.accumulate(x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            &Op::Mean { x } => {
                let len = self.nodes[x.0].value.len();
                let g = dy[0] / len as f64;
                self.accumulate(x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.accumulate(x, |dx| {
                    for (d, g) in dx.iter_mut().zip(dy) {
                        *d += g * c;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
