//! Reverse-mode differentiation over tensor-valued primitives.
//!
//! A [`Tape`] owns every value computed during one forward pass. Each
//! primitive appends a node that remembers its operands, so nodes are in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use ecga_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, RngCore};

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tensor::{matmul_into, sigmoid, softmax_slice, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Identifies a primitive, used for fault injection in gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Mask,
    Window,
    ConcatRows,
    ConcatCols,
    Sum,
    Pick,
    NegLog,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::AddBias,
        Primitive::Scale,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Relu,
        Primitive::Softmax,
        Primitive::Mask,
        Primitive::Window,
        Primitive::ConcatRows,
        Primitive::ConcatCols,
        Primitive::Sum,
        Primitive::Pick,
        Primitive::NegLog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddBias => "add_bias",
            Primitive::Scale => "scale",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::Mask => "mask",
            Primitive::Window => "window",
            Primitive::ConcatRows => "concat_rows",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Sum => "sum",
            Primitive::Pick => "pick",
            Primitive::NegLog => "neg_log",
        }
    }

    pub fn from_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == name)
    }
}

enum Op {
    Leaf { param: bool },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    Mask(usize, Box<[f64]>),
    Window { src: usize, offset: usize },
    ConcatRows(Box<[usize]>),
    ConcatCols(usize, usize),
    Sum(usize),
    Pick(usize, usize),
    NegLog(usize, f64),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf { .. } => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::AddBias(..) => Primitive::AddBias,
            Op::Scale(..) => Primitive::Scale,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Relu(_) => Primitive::Relu,
            Op::Softmax(_) => Primitive::Softmax,
            Op::Mask(..) => Primitive::Mask,
            Op::Window { .. } => Primitive::Window,
            Op::ConcatRows(_) => Primitive::ConcatRows,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::Sum(_) => Primitive::Sum,
            Op::Pick(..) => Primitive::Pick,
            Op::NegLog(..) => Primitive::NegLog,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Whether a forward pass is training (dropout active) or inference.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Append-only record of one forward computation.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    fault: Option<Primitive>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it is not a parameter leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Parameter gradients in registration order.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, g)| g).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Makes backward scale the local gradient of one primitive by 1.5.
    /// Only useful for demonstrating that gradient checks catch bad rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index()].value
    }

    /// Differentiable leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: true })
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: false })
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index() >= self.nodes.len() {
            return Err(contract_err!("variable {var:?} is not on this tape"));
        }
        Ok(var.index())
    }

    fn get(&self, var: Var) -> Result<(usize, &Tensor)> {
        let i = self.check(var)?;
        Ok((i, &self.nodes[i].value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let out = ta.matmul(tb)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let out = ta.zip_map(tb, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let out = ta.zip_map(tb, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let out = ta.zip_map(tb, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    /// Adds a `[q]` bias to every row of a `[p×q]` matrix (or to a `[q]` vector).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let (ib, tb) = self.get(bias)?;
        let width = *tx.shape().last().unwrap_or(&1);
        if tb.shape() != [width] || tx.shape().len() > 2 {
            return Err(dim_err!(
                "bias {:?} does not match rows of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(ix, ib)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let out = tx.map(|v| v * factor);
        Ok(self.push(out, Op::Scale(ix, factor)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let out = tx.map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(ix)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let out = tx.map(libm::tanh);
        Ok(self.push(out, Op::Tanh(ix)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let out = tx.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(ix)))
    }

    /// Softmax over all elements of `x`, keeping its shape.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let out = Tensor::new(tx.shape(), softmax_slice(tx.data()))?;
        Ok(self.push(out, Op::Softmax(ix)))
    }

    /// Inverted dropout. Identity (the same variable) in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate must be in [0, 1), got {rate}"));
        }
        let (ix, tx) = self.get(x)?;
        let rng = match mode {
            Mode::Train(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Box<[f64]> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(
            tx.shape(),
            tx.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect(),
        )?;
        Ok(self.push(out, Op::Mask(ix, mask)))
    }

    /// Contiguous slice of the row-major data of `x`, starting at flat
    /// `offset`, reinterpreted with `shape`. Covers row ranges of matrices,
    /// slabs of higher-rank tensors and reshapes.
    pub fn window(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let len: usize = shape.iter().product();
        if offset + len > tx.numel() {
            return Err(dim_err!(
                "window {shape:?} at offset {offset} exceeds {:?}",
                tx.shape()
            ));
        }
        let out = Tensor::new(shape, tx.data()[offset..offset + len].to_vec())?;
        Ok(self.push(out, Op::Window { src: ix, offset }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel = self.get(x)?.1.numel();
        if shape.iter().product::<usize>() != numel {
            return Err(dim_err!("cannot reshape {numel} elements to {shape:?}"));
        }
        self.window(x, 0, shape)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.get(x)?.1.dims2()?;
        if start + len > rows || len == 0 {
            return Err(dim_err!("rows {start}..{} of a {rows}-row matrix", start + len));
        }
        self.window(x, start * cols, &[len, cols])
    }

    /// Stacks equal-width matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_rows of nothing"));
        }
        let mut indices = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0;
        let mut width = None;
        for &p in parts {
            let (i, t) = self.get(p)?;
            let (r, c) = t.dims2()?;
            if *width.get_or_insert(c) != c {
                return Err(dim_err!("concat_rows widths differ: {:?} vs {c}", width));
            }
            rows += r;
            data.extend_from_slice(t.data());
            indices.push(i);
        }
        let out = Tensor::new(&[rows, width.unwrap_or(0)], data)?;
        Ok(self.push(out, Op::ConcatRows(indices.into())))
    }

    /// Joins `[T×a]` and `[T×b]` side by side into `[T×(a+b)]`.
    pub fn concat_cols(&mut self, left: Var, right: Var) -> Result<Var> {
        let (il, tl) = self.get(left)?;
        let (ir, tr) = self.get(right)?;
        let (rl, cl) = tl.dims2()?;
        let (rr, cr) = tr.dims2()?;
        if rl != rr {
            return Err(dim_err!(
                "concat_cols row counts differ: {:?} vs {:?}",
                tl.shape(),
                tr.shape()
            ));
        }
        let mut data = Vec::with_capacity(rl * (cl + cr));
        for r in 0..rl {
            data.extend_from_slice(tl.row(r));
            data.extend_from_slice(tr.row(r));
        }
        let out = Tensor::new(&[rl, cl + cr], data)?;
        Ok(self.push(out, Op::ConcatCols(il, ir)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let (ix, tx) = self.get(x).expect("sum of foreign variable");
        let out = Tensor::scalar(tx.sum());
        self.push(out, Op::Sum(ix))
    }

    /// Scalar element at flat position `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let Some(&v) = tx.data().get(index) else {
            return Err(contract_err!("index {index} outside {:?}", tx.shape()));
        };
        Ok(self.push(Tensor::scalar(v), Op::Pick(ix, index)))
    }

    /// Elementwise `-ln(max(x, floor))`; NaN stays NaN.
    pub fn neg_log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let out = tx.map(|v| if v.is_nan() { v } else { -libm::log(v.max(floor)) });
        Ok(self.push(out, Op::NegLog(ix, floor)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    /// Parameters that `loss` does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(contract_err!(
                "loss must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::ones(self.nodes[root].value.shape()));

        for i in (0..=root).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Op::Leaf { param } = node.op {
                if param {
                    grads[i] = Some(g);
                }
                continue;
            }
            if self.fault.is_some() && self.fault == node.op.primitive() {
                g = g.map(|v| 1.5 * v);
            }
            self.propagate(node, g, &mut grads)?;
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { param: true }))
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                let var = Var {
                    tape: self.id,
                    index: i as u32,
                };
                (var, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let ta = self.val(a);
                let tb = self.val(b);
                let (p, q) = ta.dims2()?;
                let r = tb.dims2()?.1;
                // dA = G·Bᵀ
                let mut da = vec![0.0; p * q];
                for i in 0..p {
                    let g_row = &g.data()[i * r..(i + 1) * r];
                    for k in 0..q {
                        let b_row = &tb.data()[k * r..(k + 1) * r];
                        da[i * q + k] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                    }
                }
                // dB = Aᵀ·G
                let at = ta.transpose()?;
                let mut db = vec![0.0; q * r];
                matmul_into(at.data(), g.data(), &mut db, q, p, r);
                accumulate(grads, a, Tensor::new(ta.shape(), da)?)?;
                accumulate(grads, b, Tensor::new(tb.shape(), db)?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, b, g.clone())?;
                accumulate(grads, a, g)?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, b, g.map(|v| -v))?;
                accumulate(grads, a, g)?;
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.val(b), |x, y| x * y)?;
                let db = g.zip_map(self.val(a), |x, y| x * y)?;
                accumulate(grads, a, da)?;
                accumulate(grads, b, db)?;
            }
            Op::AddBias(x, b) => {
                let width = self.val(b).numel();
                let mut db = vec![0.0; width];
                for row in g.data().chunks(width) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, b, Tensor::new(self.val(b).shape(), db)?)?;
                accumulate(grads, x, g)?;
            }
            Op::Scale(x, factor) => accumulate(grads, x, g.map(|v| v * factor))?,
            Op::Sigmoid(x) => accumulate(grads, x, g.zip_map(y, |g, s| g * s * (1.0 - s))?)?,
            Op::Tanh(x) => accumulate(grads, x, g.zip_map(y, |g, t| g * (1.0 - t * t))?)?,
            Op::Relu(x) => {
                let dx = g.zip_map(self.val(x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                accumulate(grads, x, dx)?;
            }
            Op::Softmax(x) => {
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, x, g.zip_map(y, |g, s| s * (g - dot))?)?;
            }
            Op::Mask(x, ref mask) => {
                let mut dx = g;
                for (d, m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                    *d *= m;
                }
                let dx = Tensor::new(self.val(x).shape(), dx.into_data())?;
                accumulate(grads, x, dx)?;
            }
            Op::Window { src, offset } => {
                let shape = self.val(src).shape();
                let slot = &mut grads[src];
                let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
                for (d, v) in acc.data_mut()[offset..offset + g.numel()]
                    .iter_mut()
                    .zip(g.data())
                {
                    *d += v;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let t = self.val(p);
                    let n = t.numel();
                    let part = Tensor::new(t.shape(), g.data()[offset..offset + n].to_vec())?;
                    accumulate(grads, p, part)?;
                    offset += n;
                }
            }
            Op::ConcatCols(l, r) => {
                let (rows, cl) = self.val(l).dims2()?;
                let cr = self.val(r).dims2()?.1;
                let mut dl = Vec::with_capacity(rows * cl);
                let mut dr = Vec::with_capacity(rows * cr);
                for row in g.data().chunks(cl + cr) {
                    dl.extend_from_slice(&row[..cl]);
                    dr.extend_from_slice(&row[cl..]);
                }
                accumulate(grads, l, Tensor::new(&[rows, cl], dl)?)?;
                accumulate(grads, r, Tensor::new(&[rows, cr], dr)?)?;
            }
            Op::Sum(x) => {
                let shape = self.val(x).shape();
                accumulate(grads, x, Tensor::full(shape, g.item()))?;
            }
            Op::Pick(x, index) => {
                let shape = self.val(x).shape();
                let slot = &mut grads[x];
                let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
                acc.data_mut()[index] += g.item();
            }
            Op::NegLog(x, floor) => {
                let dx = g.zip_map(self.val(x), |g, v| if v > floor { -g / v } else { 0.0 })?;
                accumulate(grads, x, dx)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, contribution: Tensor) -> Result<()> {
    match &mut grads[index] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}
