//! Dense row-major tensors and the numeric kernels behind every
//! differentiable operation.
//!
//! Values are stored as `f64`. Training keeps its persistent state rounded to
//! single precision (see [`crate::autodiff::ParamStore::round_to_f32`]); the
//! gradient checker runs on unrounded double-precision values.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Elementwise operation selector for [`ew`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Abs,
    Scale,
}

/// Right-hand operand of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Rhs<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("zero-sized dimension in shape {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(dim_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    /// Channels, height and width of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(dim_err!("expected C×H×W, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(())
}

/// Elementwise arithmetic. `b` must have the same shape as `a` or be a scalar.
/// `Abs` ignores `b`; `Scale` requires a scalar operand.
pub fn ew(op: EwOp, a: &Tensor, b: Rhs<'_>) -> Result<Tensor> {
    let binary = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
        match b {
            Rhs::Scalar(s) => Ok(a.map(|v| f(v, s))),
            Rhs::Tensor(t) if t.is_scalar() && a.len() != 1 => {
                let s = t.item();
                Ok(a.map(|v| f(v, s)))
            }
            Rhs::Tensor(t) => {
                same_shape(a, t, "elementwise op")?;
                let data = a.data.iter().zip(&t.data).map(|(&x, &y)| f(x, y)).collect();
                Ok(Tensor::from_parts(a.shape.clone(), data))
            }
        }
    };
    match op {
        EwOp::Add => binary(|x, y| x + y),
        EwOp::Sub => binary(|x, y| x - y),
        EwOp::Mul => binary(|x, y| x * y),
        EwOp::Abs => Ok(a.map(f64::abs)),
        EwOp::Scale => match b {
            Rhs::Scalar(s) => Ok(a.map(|v| v * s)),
            Rhs::Tensor(t) if t.is_scalar() => Ok(a.map(|v| v * t.item())),
            Rhs::Tensor(t) => Err(dim_err!("scale needs a scalar, got shape {:?}", t.shape)),
        },
    }
}

/// `sign(x)` with `sign(0) = 0`; the subgradient used for `|x|`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`, accumulating over `k` in ascending order.
pub(crate) fn gemm_acc(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * p + j] += s;
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · b[m×p]`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions {k} and {k2} differ"));
    }
    let mut out = vec![0.0; m * p];
    gemm_acc(m, k, p, &a.data, &b.data, &mut out);
    Ok(Tensor::from_parts(vec![m, p], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn check_softmax_args(x: &Tensor, temperature: f64) -> Result<()> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Numeric(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(())
}

/// `exp(x / temperature)` normalized along `axis`, max-subtracted for stability.
pub fn softmax(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    check_softmax_args(x, temperature)?;
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = ((x.data[idx(j)] - max) / temperature).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Logarithm of [`softmax`], computed without forming the quotient.
pub fn log_softmax(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    check_softmax_args(x, temperature)?;
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| x.data[idx(j)] / temperature)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..len)
                    .map(|j| (x.data[idx(j)] / temperature - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..len {
                out[idx(j)] = x.data[idx(j)] / temperature - lse;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Row statistics produced by [`layernorm`] and reused by its backward rule.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_cached(x, gain, bias, eps).map(|(t, _)| t)
}

pub(crate) fn layernorm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (rows, d) = x.dims2()?;
    if gain.len() != d || bias.len() != d {
        return Err(dim_err!(
            "layernorm width {d} vs gain {} / bias {}",
            gain.len(),
            bias.len()
        ));
    }
    let mut out = vec![0.0; rows * d];
    let mut normalized = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let n = (row[j] - mean) * istd;
            normalized[r * d + j] = n;
            out[r * d + j] = n * gain.data[j] + bias.data[j];
        }
    }
    Ok((
        Tensor::from_parts(vec![rows, d], out),
        LayerNormCache { normalized, inv_std },
    ))
}

/// Geometry of a 2-D convolution, validated once and shared by the forward
/// and backward kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [c_in, h, w] = x[..] else {
            return Err(dim_err!("conv2d input must be C×H×W, got {x:?}"));
        };
        let [c_out, kc, kh, kw] = kernels[..] else {
            return Err(dim_err!("conv2d kernels must be Cout×Cin×k×k, got {kernels:?}"));
        };
        if kc != c_in {
            return Err(dim_err!("conv2d kernel expects {kc} input channels, input has {c_in}"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(dim_err!("conv2d kernel must be square with odd size, got {kh}×{kw}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(dim_err!(
                "conv2d output would be empty: {h}×{w} input, kernel {k}, padding {pad}"
            ));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate hit by output `(oy, ox)` at kernel offset `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Columns laid out as (Cin·k·k) × (H'·W').
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let pos = self.positions();
        let mut cols = vec![0.0; self.patch_len() * pos];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * pos..(row + 1) * pos];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                dst[oy * self.w_out + ox] = x[(c * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let pos = self.positions();
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * pos..(row + 1) * pos];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                x[(c * self.h + y) * self.w + xx] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &[f64], kernels: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let pos = self.positions();
        let cols = self.im2col(x);
        let mut out = vec![0.0; self.c_out * pos];
        gemm_acc(self.c_out, self.patch_len(), pos, kernels, &cols, &mut out);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut out[co * pos..(co + 1) * pos] {
                    *v += bv;
                }
            }
        }
        out
    }

    /// Gradients with respect to the input and the kernels.
    pub fn backward(&self, x: &[f64], kernels: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pos = self.positions();
        let patch = self.patch_len();
        let cols = self.im2col(x);
        let mut dk = vec![0.0; self.c_out * patch];
        gemm_nt_acc(self.c_out, pos, patch, grad_out, &cols, &mut dk);
        let mut dcols = vec![0.0; patch * pos];
        gemm_tn_acc(self.c_out, patch, pos, kernels, grad_out, &mut dcols);
        (self.col2im(&dcols), dk)
    }
}

/// Cross-correlation of a C×H×W input with Cout×Cin×k×k kernels.
///
/// Output size follows the usual floor rule `(H + 2·pad − k) / stride + 1`;
/// geometries that would produce an empty output are rejected.
pub fn conv2d(
    x: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(&x.shape, &kernels.shape, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(dim_err!("conv2d bias has {} entries for {} channels", b.len(), g.c_out));
        }
    }
    let out = g.forward(&x.data, &kernels.data, bias.map(|b| b.data()));
    Ok(Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Nearest-neighbour 2× upsampling of a C×H×W map.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ch * h2 + y) * w2 + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h2, w2], out))
}

/// Concatenation along the leading axis; trailing dimensions must agree.
pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let tail = &first.shape[1..];
    let mut lead = 0;
    for p in parts {
        if p.rank() != first.rank() || &p.shape[1..] != tail {
            return Err(dim_err!(
                "concat: shapes {:?} and {:?} disagree past axis 0",
                first.shape,
                p.shape
            ));
        }
        lead += p.shape[0];
    }
    let mut shape = first.shape.clone();
    shape[0] = lead;
    let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Concatenation of matrices along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let (rows, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(dim_err!("concat_cols: row counts {rows} and {r} differ"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[r * c..(r + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], out))
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if len == 0 || start + len > rows {
        return Err(Error::Index(format!("rows {start}..{} of {rows}", start + len)));
    }
    Ok(Tensor::from_parts(
        vec![len, cols],
        x.data[start * cols..(start + len) * cols].to_vec(),
    ))
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if len == 0 || start + len > cols {
        return Err(Error::Index(format!("cols {start}..{} of {cols}", start + len)));
    }
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x.data[r * cols + start..r * cols + start + len]);
    }
    Ok(Tensor::from_parts(vec![rows, len], out))
}
