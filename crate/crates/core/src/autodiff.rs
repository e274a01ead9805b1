//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] and enter the tape through [`Tape::param`], which maps
//! each parameter to a single leaf no matter how often it is read; shared
//! (tied) weights therefore accumulate gradient from every use.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, ConvGeom, LayerNormCache, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Rounds every entry to the nearest `f32`; training keeps parameters in
    /// single precision so checkpoints round-trip exactly.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Coarse owner of recorded operations; used to audit which parts of the
/// model a forward pass touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Vision,
    Language,
    Alignment,
    Loss,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + s` where `s` holds a single entry.
    AddScalarVar(Var, Var),
    Scale(Var, f64),
    DivByScalarVar(Var, Var),
    Abs(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize, temp: f64 },
    LogSoftmax { x: Var, axis: usize, temp: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gelu(Var),
    Sigmoid(Var),
    Embed { table: Var, ids: Vec<usize> },
    Sum(Var),
    Reshape(Var),
    /// One entry per row: `out[r] = x[r, idx[r]]`.
    PickPerRow { x: Var, idx: Vec<usize> },
    /// One entry per position along the leading axis of a C×N map.
    PickPerColumn { x: Var, idx: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation; consumed by [`Tape::backward`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    scope: Scope,
    op_counts: HashMap<Scope, usize>,
    grad_enabled: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            scope: Scope::Vision,
            op_counts: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients, for inference.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut t = Self::new(params);
        t.grad_enabled = false;
        t
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Switches the scope charged for subsequent operations, returning the
    /// previous one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Number of non-leaf operations recorded under `scope`.
    pub fn op_count(&self, scope: Scope) -> usize {
        self.op_counts.get(&scope).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        *self.op_counts.entry(self.scope).or_insert(0) += 1;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input tensor; `requires_grad` decides whether gradients flow into it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push_leaf(self.params.get(id).clone(), true, Some(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `x` with no gradient path back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn ew(&mut self, op: tensor::EwOp, a: Var, b: Option<Var>) -> Result<Var> {
        use tensor::EwOp;
        let rhs = || b.ok_or_else(|| Error::Contract(format!("{op:?} needs a right operand")));
        match op {
            EwOp::Add => self.add(a, rhs()?),
            EwOp::Sub => self.sub(a, rhs()?),
            EwOp::Mul => self.mul(a, rhs()?),
            EwOp::Abs => self.abs(a),
            EwOp::Scale => {
                let s = rhs()?;
                if !self.value(s).is_scalar() {
                    return Err(dim_err!("scale needs a scalar operand"));
                }
                let by = self.value(s).item();
                Ok(self.scale(a, by))
            }
        }
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = tensor::ew(tensor::EwOp::Add, self.value(a), tensor::Rhs::Tensor(self.value(b)))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = tensor::ew(tensor::EwOp::Sub, self.value(a), tensor::Rhs::Tensor(self.value(b)))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v = tensor::ew(tensor::EwOp::Mul, self.value(a), tensor::Rhs::Tensor(self.value(b)))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the single entry of `s` to every entry of `a`.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(dim_err!("add_scalar_var needs a one-entry operand"));
        }
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x + sv);
        Ok(self.push(v, Op::AddScalarVar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, by: f64) -> Var {
        let v = self.value(a).map(|x| x * by);
        self.push(v, Op::Scale(a, by), &[a])
    }

    /// Divides every entry of `a` by the single entry of `s`.
    pub fn div_by_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(dim_err!("div_by_scalar_var needs a one-entry divisor"));
        }
        let sv = self.value(s).item();
        if sv == 0.0 || !sv.is_finite() {
            return Err(Error::Numeric(format!("division by {sv}")));
        }
        let v = self.value(a).map(|x| x / sv);
        Ok(self.push(v, Op::DivByScalarVar(a, s), &[a, s]))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        Ok(self.push(v, Op::Abs(a), &[a]))
    }

    /// `x[rows×d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if self.value(bias).len() != d {
            return Err(dim_err!("bias of length {} for width {d}", self.value(bias).len()));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for r in 0..rows {
            for (o, bv) in v.data_mut()[r * d..(r + 1) * d].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(v, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize, temp: f64) -> Result<Var> {
        let v = tensor::softmax(self.value(x), axis, temp)?;
        Ok(self.push(v, Op::Softmax { x, axis, temp }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize, temp: f64) -> Result<Var> {
        let v = tensor::log_softmax(self.value(x), axis, temp)?;
        Ok(self.push(v, Op::LogSoftmax { x, axis, temp }, &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, cache) =
            tensor::layernorm_cached(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let v = tensor::conv2d(
            self.value(x),
            self.value(k),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = tensor::upsample2x(self.value(x))?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat0(&vals)?;
        Ok(self.push(v, Op::Concat0(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_rows(self.value(x), start, len)?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_cols(self.value(x), start, len)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Gathers rows of `table` (s×d) by id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (s, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(dim_err!("embed of an empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {s}")));
        }
        let t = self.value(table).data();
        let data = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let v = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(v, Op::Embed { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `out[r] = x[r, idx[r]]` for a rows×cols matrix.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if idx.len() != rows {
            return Err(dim_err!("{} indices for {rows} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Index(format!("class {bad} outside {cols} columns")));
        }
        let xv = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &c)| xv[r * cols + c]).collect();
        let v = Tensor::from_parts(vec![rows], data);
        Ok(self.push(v, Op::PickPerRow { x, idx: idx.to_vec() }, &[x]))
    }

    /// For a C×N map, `out[j] = x[idx[j], j]`.
    pub fn pick_per_column(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (c, n) = self.value(x).dims2()?;
        if idx.len() != n {
            return Err(dim_err!("{} indices for {n} columns", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Index(format!("class {bad} outside {c} channels")));
        }
        let xv = self.value(x).data();
        let data = idx.iter().enumerate().map(|(j, &k)| xv[k * n + j]).collect();
        let v = Tensor::from_parts(vec![n], data);
        Ok(self.push(v, Op::PickPerColumn { x, idx: idx.to_vec() }, &[x]))
    }

    /// Scales each row to unit Euclidean norm; zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut v.data_mut()[r * d..(r + 1) * d];
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !norm.is_finite() || norm <= 0.0 {
                return Err(Error::Numeric(format!("row {r} has norm {norm}")));
            }
            for a in row.iter_mut() {
                *a /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut by_param = vec![None; self.params.len()];
        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            match node.param {
                Some(p) => by_param[p.0] = Some(t),
                None => {
                    leaves.insert(Var(i), t);
                }
            }
        }
        Ok(Gradients { by_param, leaves })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for ((o, &gi), &y) in s.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &|s| {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddScalarVar(a, sv) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                let total: f64 = g.iter().sum();
                acc(*sv, &|s| s[0] += total);
            }
            Op::Scale(a, by) => acc(*a, &|s| axpy(s, g, *by)),
            Op::DivByScalarVar(a, sv) => {
                let d = val(*sv)[0];
                acc(*a, &|s| axpy(s, g, 1.0 / d));
                // d(x/d)/dd = -x/d² = -out/d
                let total: f64 = g.iter().zip(out).map(|(gi, o)| gi * o).sum();
                acc(*sv, &|s| s[0] -= total / d);
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &|s| {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        *o += gi * tensor::sign(x);
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &|s| axpy(s, g, 1.0));
                let d = val(*b).len();
                acc(*b, &|s| {
                    for row in g.chunks(d) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let p = self.nodes[b.0].value.dims2()?.1;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s| tensor::gemm_nt_acc(m, p, k, g, bv, s));
                acc(*b, &|s| tensor::gemm_tn_acc(m, k, p, av, g, s));
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2()?;
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis, temp } => {
                let (outer, len, inner) = tensor::axis_split(node.value.shape(), *axis)?;
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                s[idx(j)] += out[idx(j)] * (g[idx(j)] - dot) / temp;
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis, temp } => {
                let (outer, len, inner) = tensor::axis_split(node.value.shape(), *axis)?;
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                s[idx(j)] += (g[idx(j)] - out[idx(j)].exp() * total) / temp;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (rows, d) = self.nodes[x.0].value.dims2()?;
                let gv = val(*gain);
                acc(*bias, &|s| {
                    for row in g.chunks(d) {
                        axpy(s, row, 1.0);
                    }
                });
                acc(*gain, &|s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * cache.normalized[r * d + j];
                        }
                    }
                });
                acc(*x, &|s| {
                    for r in 0..rows {
                        let n = &cache.normalized[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dn: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            s[r * d + j] += cache.inv_std[r] * (dn[j] - mean_dn - n[j] * mean_dn_n);
                        }
                    }
                });
            }
            Op::Conv2d { x, k, b, geom } => {
                if needs(*x) || needs(*k) {
                    let (dx, dk) = geom.backward(val(*x), val(*k), g);
                    acc(*x, &|s| axpy(s, &dx, 1.0));
                    acc(*k, &|s| axpy(s, &dk, 1.0));
                }
                if let Some(b) = b {
                    let pos = geom.h_out * geom.w_out;
                    acc(*b, &|s| {
                        for (co, o) in s.iter_mut().enumerate() {
                            *o += g[co * pos..(co + 1) * pos].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.nodes[x.0].value.dims3()?;
                let (h2, w2) = (2 * h, 2 * w);
                acc(*x, &|s| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                s[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(*p, &|s| axpy(s, &g[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.shape()[0];
                let mut col = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    acc(*p, &|s| {
                        for r in 0..rows {
                            axpy(
                                &mut s[r * c..(r + 1) * c],
                                &g[r * total + col..r * total + col + c],
                                1.0,
                            );
                        }
                    });
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.nodes[x.0].value.shape()[1];
                acc(*x, &|s| axpy(&mut s[start * cols..start * cols + g.len()], g, 1.0));
            }
            Op::SliceCols { x, start } => {
                let cols = self.nodes[x.0].value.shape()[1];
                let (rows, len) = node.value.dims2()?;
                acc(*x, &|s| {
                    for r in 0..rows {
                        axpy(
                            &mut s[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                            1.0,
                        );
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for ((o, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *o += gi * tensor::gelu_grad(xi);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &|s| {
                for ((o, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Embed { table, ids } => {
                let d = node.value.shape()[1];
                acc(*table, &|s| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &|s| s.iter_mut().for_each(|o| *o += g0));
            }
            Op::Reshape(x) => acc(*x, &|s| axpy(s, g, 1.0)),
            Op::PickPerRow { x, idx } => {
                let cols = self.nodes[x.0].value.shape()[1];
                acc(*x, &|s| {
                    for (r, &c) in idx.iter().enumerate() {
                        s[r * cols + c] += g[r];
                    }
                });
            }
            Op::PickPerColumn { x, idx } => {
                let n = self.nodes[x.0].value.shape()[1];
                acc(*x, &|s| {
                    for (j, &k) in idx.iter().enumerate() {
                        s[k * n + j] += g[j];
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = node.value.shape()[1];
                acc(*x, &|s| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            s[r * d + j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Result of a backward pass: gradients for parameters and tracked leaves.
#[derive(Debug)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter, or `None` if the parameter was never read.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a non-parameter leaf created with `requires_grad = true`.
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (ParamId(i), t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let mut tape = Tape::new(&store);
        let xv = tape.param(x);
        let loss = tape.sum(xv);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gives_two_x() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.leaf(x).unwrap().item(), 6.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let a = tape.abs(x).unwrap();
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.leaf(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().item(), 4.0);
    }

    #[test]
    fn unread_param_has_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let u = store.add("u", Tensor::scalar(1.0));
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(u).is_none());
    }

    #[test]
    fn scopes_count_operations() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::zeros(&[2]), false);
        tape.scale(x, 2.0);
        let prev = tape.set_scope(Scope::Language);
        tape.scale(x, 3.0);
        tape.set_scope(prev);
        assert_eq!(tape.op_count(Scope::Vision), 1);
        assert_eq!(tape.op_count(Scope::Language), 1);
    }
}
