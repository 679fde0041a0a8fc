//! Reverse-mode autodiff on an append-only tape.
//!
//! Every op pushes one node; node ids are already a topological order, so
//! backward is a single reverse sweep that visits each node exactly once.
//! Gradients accumulate additively, which makes reuse of a value (weight
//! tying, residual streams) correct without special cases.
//!
//! In debug builds each forward op scans its output and fails on NaN/Inf
//! instead of letting the poison spread.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

enum Op {
    Leaf,
    /// `[.., p, q] x [q, r]`
    Matmul { a: ValueId, b: ValueId },
    /// `[.., p, q] x [r, q]^T`
    MatmulT { a: ValueId, b: ValueId },
    /// `[B, p, q] x [B, q, r]`, batch-paired
    Bmm { a: ValueId, b: ValueId },
    /// `[B, p, q] x [B, r, q]^T`, batch-paired
    BmmT { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    Softmax { a: ValueId, axis: usize },
    /// Softmax over the last axis where row `t` only sees columns `0..=t`.
    CausalSoftmax { a: ValueId },
    Swiglu { a: ValueId },
    RmsNorm { x: ValueId, gain: ValueId, eps: f64 },
    Rope { x: ValueId, base: f64 },
    Embed { table: ValueId, ids: Vec<u32> },
    SelectRows { x: ValueId, rows: Vec<usize> },
    ScatterRows { src: ValueId, rows: Vec<usize> },
    SelectIndex { x: ValueId, idx: Vec<usize> },
    ScaleRows { x: ValueId, s: ValueId },
    SumAll { a: ValueId },
    MeanAll { a: ValueId },
    MeanAxis0 { a: ValueId },
    CrossEntropy { logits: ValueId, targets: Vec<u32>, pad: u32 },
    SplitHeads { x: ValueId, n_heads: usize },
    MergeHeads { x: ValueId, n_heads: usize },
    Reshape { x: ValueId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Moves a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        id
    }

    /// Clones a parameter onto the tape as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> ValueId {
        self.leaf(t.clone().with_grad())
    }

    /// Clones a tensor onto the tape as a frozen leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> ValueId {
        let mut c = t.clone();
        c.set_requires_grad(false);
        self.leaf(c)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: ValueId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: Op,
    ) -> Result<ValueId> {
        #[cfg(debug_assertions)]
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let _ = name;
        let mut value = Tensor::from_vec(shape, data)?;
        value.set_requires_grad(requires_grad);
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    // ---- forward ops ----

    /// `a [.., p, q] @ b [q, r] -> [.., p, r]`. The right operand is 2-D;
    /// leading axes of `a` are treated as batch.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let q = bsh[0];
        let r = bsh[1];
        let rows = self.data(a).len() / q;
        let mut out = vec![T::ZERO; rows * r];
        matmul_rows(self.data(a), self.data(b), &mut out, rows, q, r);
        let mut shape = ash;
        *shape.last_mut().unwrap() = r;
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", shape, out, rg, Op::Matmul { a, b })
    }

    /// `a [.., p, q] @ b [r, q]^T -> [.., p, r]`.
    pub fn matmul_t(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                lhs: ash,
                rhs: bsh,
            });
        }
        let q = bsh[1];
        let r = bsh[0];
        let rows = self.data(a).len() / q;
        let bd = self.data(b);
        let mut out = vec![T::ZERO; rows * r];
        for (i, arow) in self.data(a).chunks_exact(q).enumerate() {
            let orow = &mut out[i * r..(i + 1) * r];
            for (j, brow) in bd.chunks_exact(q).enumerate() {
                orow[j] = dot(arow, brow);
            }
        }
        let mut shape = ash;
        *shape.last_mut().unwrap() = r;
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul_t", shape, out, rg, Op::MatmulT { a, b })
    }

    /// Batched `a [B, p, q] @ b [B, q, r] -> [B, p, r]`.
    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (bt, p, q, r) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![T::ZERO; bt * p * r];
        for i in 0..bt {
            matmul_rows(
                &self.data(a)[i * p * q..(i + 1) * p * q],
                &self.data(b)[i * q * r..(i + 1) * q * r],
                &mut out[i * p * r..(i + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let rg = self.requires(a) || self.requires(b);
        self.push("bmm", vec![bt, p, r], out, rg, Op::Bmm { a, b })
    }

    /// Batched `a [B, p, q] @ b [B, r, q]^T -> [B, p, r]`.
    pub fn bmm_t(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
            return Err(Error::ShapeMismatch {
                op: "bmm_t",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (bt, p, q, r) = (ash[0], ash[1], ash[2], bsh[1]);
        let mut out = vec![T::ZERO; bt * p * r];
        for i in 0..bt {
            let ab = &self.data(a)[i * p * q..(i + 1) * p * q];
            let bb = &self.data(b)[i * r * q..(i + 1) * r * q];
            let ob = &mut out[i * p * r..(i + 1) * p * r];
            for (pi, arow) in ab.chunks_exact(q).enumerate() {
                let orow = &mut ob[pi * r..(pi + 1) * r];
                for (j, brow) in bb.chunks_exact(q).enumerate() {
                    orow[j] = dot(arow, brow);
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push("bmm_t", vec![bt, p, r], out, rg, Op::BmmT { a, b })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push("add", shape, out, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push("mul", shape, out, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let cc = T::from_f64(c);
        let out: Vec<T> = self.data(a).iter().map(|&x| x * cc).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push("scale", shape, out, rg, Op::Scale { a, c })
    }

    /// Numerically safe softmax: the max of each slice is subtracted before
    /// exponentiation.
    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = out[base];
                for j in 1..n {
                    let v = out[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::ZERO;
                for j in 0..n {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::ONE / sum;
                for j in 0..n {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let rg = self.requires(a);
        self.push("softmax", shape, out, rg, Op::Softmax { a, axis })
    }

    /// Masked softmax over `[.., t, u]` scores where position `t` may only
    /// attend to `u <= t`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != shape[rank - 2] {
            return Err(Error::InvalidShape {
                op: "causal_softmax",
                shape,
                reason: "expected square trailing axes".into(),
            });
        }
        let s = shape[rank - 1];
        let mut out = self.data(a).to_vec();
        for mat in out.chunks_exact_mut(s * s) {
            for t in 0..s {
                let row = &mut mat[t * s..(t + 1) * s];
                let mut max = row[0];
                for &v in &row[1..=t] {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::ZERO;
                for v in row[..=t].iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::ONE / sum;
                for v in row[..=t].iter_mut() {
                    *v *= inv;
                }
                for v in row[t + 1..].iter_mut() {
                    *v = T::ZERO;
                }
            }
        }
        let rg = self.requires(a);
        self.push("causal_softmax", shape, out, rg, Op::CausalSoftmax { a })
    }

    /// Gated-linear activation over the trailing axis: the first half is the
    /// gate (silu), the second half passes through linearly.
    pub fn swiglu(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last == 0 || last % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "swiglu",
                shape,
                reason: "trailing axis must be even".into(),
            });
        }
        let half = last / 2;
        let data = self.data(a);
        let rows = data.len() / last;
        let mut out = vec![T::ZERO; rows * half];
        for i in 0..rows {
            let row = &data[i * last..(i + 1) * last];
            let orow = &mut out[i * half..(i + 1) * half];
            for j in 0..half {
                let g = row[j];
                let sig = T::ONE / (T::ONE + (-g).exp());
                orow[j] = g * sig * row[half + j];
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = half;
        let rg = self.requires(a);
        self.push("swiglu", out_shape, out, rg, Op::Swiglu { a })
    }

    /// Scales each trailing-axis slice to unit RMS and multiplies by a learned
    /// gain. No bias, no mean subtraction.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId, eps: f64) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let epst = T::from_f64(eps);
        let g = self.data(gain);
        let data = self.data(x);
        let mut out = vec![T::ZERO; data.len()];
        let inv_d = T::ONE / T::from_f64(d as f64);
        for (row, orow) in data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut ms = T::ZERO;
            for &v in row {
                ms += v * v;
            }
            let inv_rms = T::ONE / (ms * inv_d + epst).sqrt();
            for j in 0..d {
                orow[j] = row[j] * inv_rms * g[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain);
        self.push("rms_norm", shape, out, rg, Op::RmsNorm { x, gain, eps })
    }

    /// Rotary position encoding on `[B, S, d]`: consecutive pairs of the
    /// trailing axis rotate by an angle proportional to the position index.
    pub fn rope(&mut self, x: ValueId, base: f64) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[2] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rope",
                shape,
                reason: "expected [batch, seq, even dim]".into(),
            });
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let mut out = self.data(x).to_vec();
        apply_rope::<T>(&mut out, b, s, d, base, false);
        let rg = self.requires(x);
        self.push("rope", shape, out, rg, Op::Rope { x, base })
    }

    /// Row lookup: `table [V, D]` gathered into `[batch, seq, D]`.
    pub fn embed(
        &mut self,
        table: ValueId,
        ids: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<ValueId> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embed",
                shape: tsh,
                reason: "lookup table must be 2-D".into(),
            });
        }
        if ids.len() != batch * seq {
            return Err(Error::invalid(format!(
                "embed: {} ids for batch {batch} x seq {seq}",
                ids.len()
            )));
        }
        let (v, d) = (tsh[0], tsh[1]);
        let data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::invalid(format!(
                    "embed: token id {id} outside vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        self.push(
            "embed",
            vec![batch, seq, d],
            out,
            rg,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Gathers whole rows of a 2-D tensor; backward scatter-adds them back.
    pub fn select_rows(&mut self, x: ValueId, rows: &[usize]) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "select_rows",
                shape,
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let data = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(Error::invalid(format!(
                    "select_rows: row {row} outside 0..{r}"
                )));
            }
            out.extend_from_slice(&data[row * c..(row + 1) * c]);
        }
        let rg = self.requires(x);
        self.push(
            "select_rows",
            vec![rows.len(), c],
            out,
            rg,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Scatter-adds `src [L, C]` into a zeroed `[n_rows, C]` at `rows`.
    pub fn scatter_rows(&mut self, src: ValueId, rows: &[usize], n_rows: usize) -> Result<ValueId> {
        let shape = self.shape(src).to_vec();
        if shape.len() != 2 || shape[0] != rows.len() {
            return Err(Error::InvalidShape {
                op: "scatter_rows",
                shape,
                reason: format!("expected [{}, C]", rows.len()),
            });
        }
        let c = shape[1];
        let data = self.data(src);
        let mut out = vec![T::ZERO; n_rows * c];
        for (l, &row) in rows.iter().enumerate() {
            if row >= n_rows {
                return Err(Error::invalid(format!(
                    "scatter_rows: row {row} outside 0..{n_rows}"
                )));
            }
            axpy(&mut out[row * c..(row + 1) * c], T::ONE, &data[l * c..(l + 1) * c]);
        }
        let rg = self.requires(src);
        self.push(
            "scatter_rows",
            vec![n_rows, c],
            out,
            rg,
            Op::ScatterRows {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    /// Gathers single elements by flat index into a vector.
    pub fn select_index(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let data = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= data.len() {
                return Err(Error::invalid(format!(
                    "select_index: flat index {i} outside 0..{}",
                    data.len()
                )));
            }
            out.push(data[i]);
        }
        let rg = self.requires(x);
        self.push(
            "select_index",
            vec![idx.len()],
            out,
            rg,
            Op::SelectIndex {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Multiplies each row of `x [R, C]` by the matching entry of `s [R]`.
    pub fn scale_rows(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(s) != [shape[0]] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: shape,
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = shape[1];
        let sv = self.data(s);
        let data = self.data(x);
        let mut out = vec![T::ZERO; data.len()];
        for (i, (row, orow)) in data.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            axpy(orow, sv[i], row);
        }
        let rg = self.requires(x) || self.requires(s);
        self.push("scale_rows", shape, out, rg, Op::ScaleRows { x, s })
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let mut sum = T::ZERO;
        for &v in self.data(a) {
            sum += v;
        }
        let rg = self.requires(a);
        self.push("sum_all", vec![1], vec![sum], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean_all",
                shape: self.shape(a).to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let mut sum = T::ZERO;
        for &v in self.data(a) {
            sum += v;
        }
        let mean = sum / T::from_f64(n as f64);
        let rg = self.requires(a);
        self.push("mean_all", vec![1], vec![mean], rg, Op::MeanAll { a })
    }

    /// Column means of a 2-D tensor: `[R, C] -> [C]`.
    pub fn mean_axis0(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::InvalidShape {
                op: "mean_axis0",
                shape,
                reason: "expected a non-empty 2-D tensor".into(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let data = self.data(a);
        let mut out = vec![T::ZERO; c];
        for row in data.chunks_exact(c) {
            axpy(&mut out, T::ONE, row);
        }
        let inv = T::ONE / T::from_f64(r as f64);
        for v in out.iter_mut() {
            *v *= inv;
        }
        let rg = self.requires(a);
        self.push("mean_axis0", vec![c], out, rg, Op::MeanAxis0 { a })
    }

    /// Mean negative log-likelihood of `targets` under `logits [.., V]`,
    /// skipping positions whose target equals `pad`. Errors if every
    /// position is padding.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[u32], pad: u32) -> Result<ValueId> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap_or(&0);
        if v == 0 || self.data(logits).len() / v != targets.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: format!("logit rows do not match {} targets", targets.len()),
            });
        }
        let data = self.data(logits);
        let mut n_valid = 0usize;
        let mut total = T::ZERO;
        for (row, &t) in data.chunks_exact(v).zip(targets) {
            if t == pad {
                continue;
            }
            let t = t as usize;
            if t >= v {
                return Err(Error::invalid(format!(
                    "cross_entropy: target {t} outside vocabulary of {v}"
                )));
            }
            let mut max = row[0];
            for &x in &row[1..] {
                if x > max {
                    max = x;
                }
            }
            let mut sum = T::ZERO;
            for &x in row {
                sum += (x - max).exp();
            }
            total += max + sum.ln() - row[t];
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(Error::invalid(
                "cross_entropy: every position is padding".to_string(),
            ));
        }
        let loss = total / T::from_f64(n_valid as f64);
        let rg = self.requires(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
            },
        )
    }

    /// `[B, S, D] -> [B*H, S, D/H]` with heads becoming the fast batch axis.
    pub fn split_heads(&mut self, x: ValueId, n_heads: usize) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || n_heads == 0 || shape[2] % n_heads != 0 {
            return Err(Error::InvalidShape {
                op: "split_heads",
                shape,
                reason: format!("cannot split {n_heads} heads"),
            });
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let hd = d / n_heads;
        let data = self.data(x);
        let mut out = vec![T::ZERO; data.len()];
        for bi in 0..b {
            for si in 0..s {
                let src = &data[(bi * s + si) * d..(bi * s + si + 1) * d];
                for h in 0..n_heads {
                    let dst_base = ((bi * n_heads + h) * s + si) * hd;
                    out[dst_base..dst_base + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            "split_heads",
            vec![b * n_heads, s, hd],
            out,
            rg,
            Op::SplitHeads { x, n_heads },
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: ValueId, n_heads: usize) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || n_heads == 0 || shape[0] % n_heads != 0 {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                shape,
                reason: format!("cannot merge {n_heads} heads"),
            });
        }
        let (bh, s, hd) = (shape[0], shape[1], shape[2]);
        let b = bh / n_heads;
        let d = hd * n_heads;
        let data = self.data(x);
        let mut out = vec![T::ZERO; data.len()];
        for bi in 0..b {
            for si in 0..s {
                let dst = &mut out[(bi * s + si) * d..(bi * s + si + 1) * d];
                for h in 0..n_heads {
                    let src_base = ((bi * n_heads + h) * s + si) * hd;
                    dst[h * hd..(h + 1) * hd].copy_from_slice(&data[src_base..src_base + hd]);
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            "merge_heads",
            vec![b, s, d],
            out,
            rg,
            Op::MergeHeads { x, n_heads },
        )
    }

    pub fn reshape(&mut self, x: ValueId, new_shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape,
                reason: format!("element count differs from {:?}", self.shape(x)),
            });
        }
        let out = self.data(x).to_vec();
        let rg = self.requires(x);
        self.push("reshape", new_shape, out, rg, Op::Reshape { x })
    }

    // ---- backward ----

    /// Seeds `d loss = 1` and sweeps the tape in reverse, applying each op's
    /// vector-Jacobian product once. Only differentiable nodes receive grads.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.requires(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[T::ONE]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].value.take_grad() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.apply_vjp(ValueId(id), &op, &g);
            self.nodes[id].op = op;
            // All consumers of this node have higher ids and are already
            // processed, so the buffer is final; restore it for callers.
            self.nodes[id].value.set_grad(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: ValueId, delta: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if node.value.requires_grad() {
            node.value.accumulate_grad(&delta);
        }
    }

    fn apply_vjp(&mut self, out_id: ValueId, op: &Op, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let q = self.shape(b)[0];
                let r = self.shape(b)[1];
                let rows = self.data(a).len() / q;
                if self.requires(a) {
                    // dA = dC @ B^T
                    let bd = self.data(b);
                    let mut da = vec![T::ZERO; rows * q];
                    for (i, grow) in g.chunks_exact(r).enumerate() {
                        let darow = &mut da[i * q..(i + 1) * q];
                        for (k, brow) in bd.chunks_exact(r).enumerate() {
                            darow[k] = dot(grow, brow);
                        }
                    }
                    self.acc(a, da);
                }
                if self.requires(b) {
                    // dB = A^T @ dC, accumulated row-block by row-block
                    let ad = self.data(a);
                    let mut db = vec![T::ZERO; q * r];
                    for (i, arow) in ad.chunks_exact(q).enumerate() {
                        let grow = &g[i * r..(i + 1) * r];
                        for (k, &aik) in arow.iter().enumerate() {
                            axpy(&mut db[k * r..(k + 1) * r], aik, grow);
                        }
                    }
                    self.acc(b, db);
                }
            }
            Op::MatmulT { a, b } => {
                let r = self.shape(b)[0];
                let q = self.shape(b)[1];
                let rows = self.data(a).len() / q;
                if self.requires(a) {
                    // dA = dC @ B
                    let bd = self.data(b);
                    let mut da = vec![T::ZERO; rows * q];
                    for (i, grow) in g.chunks_exact(r).enumerate() {
                        let darow = &mut da[i * q..(i + 1) * q];
                        for (j, brow) in bd.chunks_exact(q).enumerate() {
                            axpy(darow, grow[j], brow);
                        }
                    }
                    self.acc(a, da);
                }
                if self.requires(b) {
                    // dB[j] = sum_i dC[i, j] * A[i]
                    let ad = self.data(a);
                    let mut db = vec![T::ZERO; r * q];
                    for (i, arow) in ad.chunks_exact(q).enumerate() {
                        let grow = &g[i * r..(i + 1) * r];
                        for (j, &gij) in grow.iter().enumerate() {
                            axpy(&mut db[j * q..(j + 1) * q], gij, arow);
                        }
                    }
                    self.acc(b, db);
                }
            }
            Op::Bmm { a, b } => {
                let ash = self.shape(a).to_vec();
                let (bt, p, q) = (ash[0], ash[1], ash[2]);
                let r = self.shape(b)[2];
                if self.requires(a) {
                    let bd = self.data(b);
                    let mut da = vec![T::ZERO; bt * p * q];
                    for i in 0..bt {
                        let gb = &g[i * p * r..(i + 1) * p * r];
                        let bb = &bd[i * q * r..(i + 1) * q * r];
                        let dab = &mut da[i * p * q..(i + 1) * p * q];
                        for (pi, grow) in gb.chunks_exact(r).enumerate() {
                            let darow = &mut dab[pi * q..(pi + 1) * q];
                            for (k, brow) in bb.chunks_exact(r).enumerate() {
                                darow[k] = dot(grow, brow);
                            }
                        }
                    }
                    self.acc(a, da);
                }
                if self.requires(b) {
                    let ad = self.data(a);
                    let mut db = vec![T::ZERO; bt * q * r];
                    for i in 0..bt {
                        let gb = &g[i * p * r..(i + 1) * p * r];
                        let ab = &ad[i * p * q..(i + 1) * p * q];
                        let dbb = &mut db[i * q * r..(i + 1) * q * r];
                        for (pi, arow) in ab.chunks_exact(q).enumerate() {
                            let grow = &gb[pi * r..(pi + 1) * r];
                            for (k, &aik) in arow.iter().enumerate() {
                                axpy(&mut dbb[k * r..(k + 1) * r], aik, grow);
                            }
                        }
                    }
                    self.acc(b, db);
                }
            }
            Op::BmmT { a, b } => {
                let ash = self.shape(a).to_vec();
                let (bt, p, q) = (ash[0], ash[1], ash[2]);
                let r = self.shape(b)[1];
                if self.requires(a) {
                    // dA[b] = dC[b] @ B[b]
                    let bd = self.data(b);
                    let mut da = vec![T::ZERO; bt * p * q];
                    for i in 0..bt {
                        let gb = &g[i * p * r..(i + 1) * p * r];
                        let bb = &bd[i * r * q..(i + 1) * r * q];
                        let dab = &mut da[i * p * q..(i + 1) * p * q];
                        for (pi, grow) in gb.chunks_exact(r).enumerate() {
                            let darow = &mut dab[pi * q..(pi + 1) * q];
                            for (j, brow) in bb.chunks_exact(q).enumerate() {
                                axpy(darow, grow[j], brow);
                            }
                        }
                    }
                    self.acc(a, da);
                }
                if self.requires(b) {
                    // dB[b, j] = sum_p dC[b, p, j] * A[b, p]
                    let ad = self.data(a);
                    let mut db = vec![T::ZERO; bt * r * q];
                    for i in 0..bt {
                        let gb = &g[i * p * r..(i + 1) * p * r];
                        let ab = &ad[i * p * q..(i + 1) * p * q];
                        let dbb = &mut db[i * r * q..(i + 1) * r * q];
                        for (pi, arow) in ab.chunks_exact(q).enumerate() {
                            let grow = &gb[pi * r..(pi + 1) * r];
                            for (j, &gij) in grow.iter().enumerate() {
                                axpy(&mut dbb[j * q..(j + 1) * q], gij, arow);
                            }
                        }
                    }
                    self.acc(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.requires(a) {
                    self.acc(a, g.to_vec());
                }
                if self.requires(b) {
                    self.acc(b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let da: Vec<T> = g.iter().zip(self.data(b)).map(|(&gi, &bi)| gi * bi).collect();
                    self.acc(a, da);
                }
                if self.requires(b) {
                    let db: Vec<T> = g.iter().zip(self.data(a)).map(|(&gi, &ai)| gi * ai).collect();
                    self.acc(b, db);
                }
            }
            Op::Scale { a, c } => {
                if self.requires(a) {
                    let cc = T::from_f64(c);
                    self.acc(a, g.iter().map(|&gi| gi * cc).collect());
                }
            }
            Op::Softmax { a, axis } => {
                if !self.requires(a) {
                    return;
                }
                let shape = self.shape(a).to_vec();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                // the VJP is written in terms of the op's own output
                let s = self.data(out_id);
                let mut da = vec![T::ZERO; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dotv = T::ZERO;
                        for j in 0..n {
                            let k = base + j * inner;
                            dotv += g[k] * s[k];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            da[k] = s[k] * (g[k] - dotv);
                        }
                    }
                }
                self.acc(a, da);
            }
            Op::CausalSoftmax { a } => {
                if !self.requires(a) {
                    return;
                }
                let shape = self.shape(a).to_vec();
                let s_len = shape[shape.len() - 1];
                let sv = self.data(out_id);
                let mut da = vec![T::ZERO; sv.len()];
                for (mi, mat) in sv.chunks_exact(s_len * s_len).enumerate() {
                    let dmat = &mut da[mi * s_len * s_len..(mi + 1) * s_len * s_len];
                    let gmat = &g[mi * s_len * s_len..(mi + 1) * s_len * s_len];
                    for t in 0..s_len {
                        let row = &mat[t * s_len..t * s_len + t + 1];
                        let grow = &gmat[t * s_len..t * s_len + t + 1];
                        let mut dotv = T::ZERO;
                        for j in 0..=t {
                            dotv += grow[j] * row[j];
                        }
                        let drow = &mut dmat[t * s_len..t * s_len + t + 1];
                        for j in 0..=t {
                            drow[j] = row[j] * (grow[j] - dotv);
                        }
                    }
                }
                self.acc(a, da);
            }
            Op::Swiglu { a } => {
                if !self.requires(a) {
                    return;
                }
                let shape = self.shape(a).to_vec();
                let last = *shape.last().unwrap();
                let half = last / 2;
                let data = self.data(a);
                let rows = data.len() / last;
                let mut da = vec![T::ZERO; data.len()];
                for i in 0..rows {
                    let row = &data[i * last..(i + 1) * last];
                    let grow = &g[i * half..(i + 1) * half];
                    let darow = &mut da[i * last..(i + 1) * last];
                    for j in 0..half {
                        let x = row[j];
                        let lin = row[half + j];
                        let sig = T::ONE / (T::ONE + (-x).exp());
                        let silu = x * sig;
                        // d silu = sig * (1 + x * (1 - sig))
                        let dsilu = sig * (T::ONE + x * (T::ONE - sig));
                        darow[j] = grow[j] * lin * dsilu;
                        darow[half + j] = grow[j] * silu;
                    }
                }
                self.acc(a, da);
            }
            Op::RmsNorm { x, gain, eps } => {
                let shape = self.shape(x).to_vec();
                let d = *shape.last().unwrap();
                let epst = T::from_f64(eps);
                let inv_d = T::ONE / T::from_f64(d as f64);
                let need_x = self.requires(x);
                let need_g = self.requires(gain);
                let data = self.data(x);
                let gv = self.data(gain);
                let mut dx = if need_x { vec![T::ZERO; data.len()] } else { Vec::new() };
                let mut dg = if need_g { vec![T::ZERO; d] } else { Vec::new() };
                for (i, row) in data.chunks_exact(d).enumerate() {
                    let grow = &g[i * d..(i + 1) * d];
                    let mut ms = T::ZERO;
                    for &v in row {
                        ms += v * v;
                    }
                    let rms = (ms * inv_d + epst).sqrt();
                    let inv_rms = T::ONE / rms;
                    if need_g {
                        for j in 0..d {
                            dg[j] += grow[j] * row[j] * inv_rms;
                        }
                    }
                    if need_x {
                        let mut proj = T::ZERO;
                        for j in 0..d {
                            proj += grow[j] * gv[j] * row[j];
                        }
                        let scale = proj * inv_d * inv_rms * inv_rms * inv_rms;
                        let drow = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            drow[j] = grow[j] * gv[j] * inv_rms - row[j] * scale;
                        }
                    }
                }
                if need_x {
                    self.acc(x, dx);
                }
                if need_g {
                    self.acc(gain, dg);
                }
            }
            Op::Rope { x, base } => {
                if self.requires(x) {
                    let shape = self.shape(x).to_vec();
                    let (b, s, d) = (shape[0], shape[1], shape[2]);
                    let mut dx = g.to_vec();
                    // the rotation is orthogonal, so the VJP is its inverse
                    apply_rope::<T>(&mut dx, b, s, d, base, true);
                    self.acc(x, dx);
                }
            }
            Op::Embed { table, ref ids } => {
                if self.requires(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![T::ZERO; self.data(table).len()];
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        axpy(&mut dt[id * d..(id + 1) * d], T::ONE, &g[i * d..(i + 1) * d]);
                    }
                    self.acc(table, dt);
                }
            }
            Op::SelectRows { x, ref rows } => {
                if self.requires(x) {
                    let c = self.shape(x)[1];
                    let mut dx = vec![T::ZERO; self.data(x).len()];
                    for (l, &row) in rows.iter().enumerate() {
                        axpy(&mut dx[row * c..(row + 1) * c], T::ONE, &g[l * c..(l + 1) * c]);
                    }
                    self.acc(x, dx);
                }
            }
            Op::ScatterRows { src, ref rows } => {
                if self.requires(src) {
                    let c = self.shape(src)[1];
                    let mut ds = vec![T::ZERO; self.data(src).len()];
                    for (l, &row) in rows.iter().enumerate() {
                        ds[l * c..(l + 1) * c].copy_from_slice(&g[row * c..(row + 1) * c]);
                    }
                    self.acc(src, ds);
                }
            }
            Op::SelectIndex { x, ref idx } => {
                if self.requires(x) {
                    let mut dx = vec![T::ZERO; self.data(x).len()];
                    for (l, &i) in idx.iter().enumerate() {
                        dx[i] += g[l];
                    }
                    self.acc(x, dx);
                }
            }
            Op::ScaleRows { x, s } => {
                let c = self.shape(x)[1];
                if self.requires(x) {
                    let sv = self.data(s);
                    let mut dx = vec![T::ZERO; self.data(x).len()];
                    for (i, grow) in g.chunks_exact(c).enumerate() {
                        axpy(&mut dx[i * c..(i + 1) * c], sv[i], grow);
                    }
                    self.acc(x, dx);
                }
                if self.requires(s) {
                    let data = self.data(x);
                    let mut ds = vec![T::ZERO; self.shape(s)[0]];
                    for (i, (grow, xrow)) in g.chunks_exact(c).zip(data.chunks_exact(c)).enumerate()
                    {
                        ds[i] = dot(grow, xrow);
                    }
                    self.acc(s, ds);
                }
            }
            Op::SumAll { a } => {
                if self.requires(a) {
                    self.acc(a, vec![g[0]; self.data(a).len()]);
                }
            }
            Op::MeanAll { a } => {
                if self.requires(a) {
                    let n = self.data(a).len();
                    let gi = g[0] / T::from_f64(n as f64);
                    self.acc(a, vec![gi; n]);
                }
            }
            Op::MeanAxis0 { a } => {
                if self.requires(a) {
                    let shape = self.shape(a).to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let inv = T::ONE / T::from_f64(r as f64);
                    let mut da = vec![T::ZERO; r * c];
                    for row in da.chunks_exact_mut(c) {
                        for (dv, &gv) in row.iter_mut().zip(g) {
                            *dv = gv * inv;
                        }
                    }
                    self.acc(a, da);
                }
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                pad,
            } => {
                if !self.requires(logits) {
                    return;
                }
                let v = *self.shape(logits).last().unwrap();
                let data = self.data(logits);
                let n_valid = targets.iter().filter(|&&t| t != pad).count();
                let gn = g[0] / T::from_f64(n_valid as f64);
                let mut dl = vec![T::ZERO; data.len()];
                for ((row, &t), drow) in data
                    .chunks_exact(v)
                    .zip(targets)
                    .zip(dl.chunks_exact_mut(v))
                {
                    if t == pad {
                        continue;
                    }
                    let mut max = row[0];
                    for &x in &row[1..] {
                        if x > max {
                            max = x;
                        }
                    }
                    let mut sum = T::ZERO;
                    for (d, &x) in drow.iter_mut().zip(row) {
                        let e = (x - max).exp();
                        *d = e;
                        sum += e;
                    }
                    let inv = T::ONE / sum;
                    for d in drow.iter_mut() {
                        *d = *d * inv * gn;
                    }
                    drow[t as usize] -= gn;
                }
                self.acc(logits, dl);
            }
            Op::SplitHeads { x, n_heads } => {
                if self.requires(x) {
                    let shape = self.shape(x).to_vec();
                    let (b, s, d) = (shape[0], shape[1], shape[2]);
                    let hd = d / n_heads;
                    let mut dx = vec![T::ZERO; b * s * d];
                    for bi in 0..b {
                        for si in 0..s {
                            let dst = &mut dx[(bi * s + si) * d..(bi * s + si + 1) * d];
                            for h in 0..n_heads {
                                let src_base = ((bi * n_heads + h) * s + si) * hd;
                                dst[h * hd..(h + 1) * hd]
                                    .copy_from_slice(&g[src_base..src_base + hd]);
                            }
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::MergeHeads { x, n_heads } => {
                if self.requires(x) {
                    let shape = self.shape(x).to_vec();
                    let (bh, s, hd) = (shape[0], shape[1], shape[2]);
                    let b = bh / n_heads;
                    let d = hd * n_heads;
                    let mut dx = vec![T::ZERO; bh * s * hd];
                    for bi in 0..b {
                        for si in 0..s {
                            let src = &g[(bi * s + si) * d..(bi * s + si + 1) * d];
                            for h in 0..n_heads {
                                let dst_base = ((bi * n_heads + h) * s + si) * hd;
                                dx[dst_base..dst_base + hd]
                                    .copy_from_slice(&src[h * hd..(h + 1) * hd]);
                            }
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.requires(x) {
                    self.acc(x, g.to_vec());
                }
            }
        }
    }

}

/// `c[j] += s * b[j]`; lanes are independent, so the loop vectorizes without
/// reassociating any sum, keeping results bit-stable across ISAs.
#[inline]
pub(crate) fn axpy<T: Scalar>(c: &mut [T], s: T, b: &[T]) {
    debug_assert_eq!(c.len(), b.len());
    for (ci, &bi) in c.iter_mut().zip(b) {
        *ci += s * bi;
    }
}

/// Dot product with four fixed-order accumulator lanes. The lane split is
/// deterministic, so results are reproducible run to run.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::ZERO, T::ZERO, T::ZERO, T::ZERO);
    for i in 0..chunks {
        let k = i * 4;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut rest = T::ZERO;
    for k in chunks * 4..a.len() {
        rest += a[k] * b[k];
    }
    ((s0 + s1) + (s2 + s3)) + rest
}

/// Row-blocked `C[rows, r] = A[rows, q] @ B[q, r]` in axpy form.
fn matmul_rows<T: Scalar>(a: &[T], b: &[T], out: &mut [T], rows: usize, q: usize, r: usize) {
    for i in 0..rows {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            axpy(orow, aik, &b[k * r..(k + 1) * r]);
        }
    }
}

/// Rotates consecutive pairs of the trailing axis by `pos * base^(-2i/d)`;
/// `inverse` applies the opposite rotation (used by the VJP).
fn apply_rope<T: Scalar>(data: &mut [T], b: usize, s: usize, d: usize, base: f64, inverse: bool) {
    let half = d / 2;
    for bi in 0..b {
        for t in 0..s {
            let row = &mut data[(bi * s + t) * d..(bi * s + t + 1) * d];
            for i in 0..half {
                let angle = t as f64 * base.powf(-2.0 * i as f64 / d as f64);
                let angle = if inverse { -angle } else { angle };
                let (sin, cos) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
                let x0 = row[2 * i];
                let x1 = row[2 * i + 1];
                row[2 * i] = x0 * cos - x1 * sin;
                row[2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0_f64).max(a.abs()).max(b.abs())
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_reports_both_shapes_on_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_t_agrees_with_explicit_transpose() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap());
        let c = tape.matmul_t(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 2]);
        assert_eq!(tape.data(c), &[4.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![2.0_f64.ln(), 0.0]).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let out = tape.data(s);
        assert!(close(out[0], 2.0 / 3.0, 1e-12));
        assert!(close(out[1], 1.0 / 3.0, 1e-12));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_handles_large_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 3], vec![1000.0, 1000.0, 1000.0]).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for &v in tape.data(s) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let vals = vec![0.3, -1.2, 2.5, 0.0];
        let mut t1 = Tape::<f64>::new();
        let x1 = t1.leaf(Tensor::from_vec(vec![1, 4], vals.clone()).unwrap());
        let s1 = t1.softmax(x1, 1).unwrap();
        let mut t2 = Tape::<f64>::new();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 3.7).collect();
        let x2 = t2.leaf(Tensor::from_vec(vec![1, 4], shifted).unwrap());
        let s2 = t2.softmax(x2, 1).unwrap();
        for (a, b) in t1.data(s1).iter().zip(t2.data(s2)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn swiglu_gates_first_half_with_silu() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = tape.swiglu(x).unwrap();
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let out = tape.data(y);
        assert!(close(out[0], silu(1.0) * 3.0, 1e-12));
        assert!(close(out[1], silu(-2.0) * 0.5, 1e-12));
    }

    #[test]
    fn swiglu_rejects_odd_trailing_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(tape.swiglu(x).is_err());
    }

    #[test]
    fn causal_softmax_zeroes_the_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 3, 3], vec![0.5; 9]).unwrap());
        let y = tape.causal_softmax(x).unwrap();
        let out = tape.data(y);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[5], 0.0);
        assert!(close(out[0], 1.0, 1e-12));
        assert!(close(out[3], 0.5, 1e-12));
        assert!(close(out[4], 0.5, 1e-12));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let v = 259;
        let x = tape.leaf(Tensor::zeros(vec![4, v]));
        let loss = tape.cross_entropy(x, &[0, 5, 77, 258], u32::MAX).unwrap();
        let got = tape.data(loss)[0];
        assert!(close(got, (v as f64).ln(), 1e-9), "{got}");
    }

    #[test]
    fn cross_entropy_rejects_all_padding() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 5]));
        assert!(tape.cross_entropy(x, &[9, 9], 9).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn grads_accumulate_across_reuse() {
        // loss = sum(x * x): dx = 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5])
                .unwrap()
                .with_grad(),
        );
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn select_and_scatter_roundtrip_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap()
                .with_grad(),
        );
        let sel = tape.select_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.data(sel), &[5.0, 6.0, 1.0, 2.0]);
        let back = tape.scatter_rows(sel, &[2, 0], 3).unwrap();
        let loss = tape.sum_all(back).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn split_merge_heads_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3, 4], data.clone()).unwrap());
        let split = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(split), &[4, 3, 2]);
        let merged = tape.merge_heads(split, 2).unwrap();
        assert_eq!(tape.data(merged), data.as_slice());
    }

    #[test]
    fn rope_preserves_pair_norms_and_position_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.rope(x, 10000.0).unwrap();
        let out = tape.data(y);
        // position 0 is untouched
        assert_eq!(&out[..4], &[1.0, 2.0, 3.0, 4.0]);
        // rotation preserves the norm of each pair
        let n_in = (1.0_f64.powi(2) + 2.0_f64.powi(2)).sqrt();
        let n_out = (out[4] * out[4] + out[5] * out[5]).sqrt();
        assert!(close(n_in, n_out, 1e-12));
    }

    #[test]
    fn backward_visits_each_node_once() {
        // A diamond: y = (x*x) + (x*x) reusing the same intermediate node.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1], vec![3.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, sq).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        // d(2x^2)/dx = 4x = 12; double-visiting sq would give 24
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_output_is_an_error_in_debug() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1], vec![1e308]).unwrap());
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
