//! Parameterized layers shared by the vision and language stacks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{Tensor, LAYERNORM_EPS};

pub const WEIGHT_STD: f64 = 0.02;
pub const POSITION_STD: f64 = 0.01;
/// Additive logit for masked attention positions.
pub const MASKED_LOGIT: f64 = -1e9;

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

/// Fully connected layer `x·W + b` with `W: d_in×d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[d_in, d_out], WEIGHT_STD, rng));
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        linear(t, x, self)
    }
}

pub fn linear(t: &mut Tape<'_>, x: Var, p: &Linear) -> Result<Var> {
    let cols = t.value(x).dims2()?.1;
    if cols != p.d_in {
        return Err(dim_err!("linear expects {} input columns, got {cols}", p.d_in));
    }
    let w = t.param(p.weight);
    let y = t.matmul(x, w)?;
    match p.bias {
        Some(b) => {
            let bv = t.param(b);
            t.add_row_bias(y, bv)
        }
        None => Ok(y),
    }
}

/// Row gather from an s×d embedding table.
pub fn embed(t: &mut Tape<'_>, ids: &[usize], table: ParamId) -> Result<Var> {
    let tv = t.param(table);
    t.embed(tv, ids)
}

/// Learnable absolute position embeddings.
#[derive(Clone, Debug)]
pub struct PositionTable {
    pub table: ParamId,
    pub max_len: usize,
    pub d: usize,
}

impl PositionTable {
    pub fn new(store: &mut ParamStore, name: &str, max_len: usize, d: usize, rng: &mut impl Rng) -> Self {
        let table = store.add(name, normal_tensor(&[max_len, d], POSITION_STD, rng));
        Self { table, max_len, d }
    }

    pub fn param_count(&self) -> usize {
        self.max_len * self.d
    }

    /// Adds the first `rows` positions to `x`.
    pub fn add_to(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (rows, d) = t.value(x).dims2()?;
        if rows > self.max_len || d != self.d {
            return Err(dim_err!(
                "position table {}×{} cannot cover {rows}×{d}",
                self.max_len,
                self.d
            ));
        }
        let table = t.param(self.table);
        let pos = if rows == self.max_len {
            table
        } else {
            t.slice_rows(table, 0, rows)?
        };
        t.add(x, pos)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
            d,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.d
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (t.param(self.gain), t.param(self.bias));
        t.layernorm(x, g, b, LAYERNORM_EPS)
    }
}

/// Projection weights of one multi-head attention layer (no biases).
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        let mut m = |suffix: &str| store.add(format!("{name}.{suffix}"), normal_tensor(&[d, d], WEIGHT_STD, rng));
        Self {
            wq: m("wq"),
            wk: m("wk"),
            wv: m("wv"),
            wo: m("wo"),
            heads,
            d,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.d * self.d
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from `x`; keys and values from `context` (defaults to `x`).
/// Logits are scaled by `1/√(d/r)`. With `causal`, key positions after the
/// query position are masked.
pub fn mha(t: &mut Tape<'_>, x: Var, p: &Attention, causal: bool, context: Option<Var>) -> Result<Var> {
    let (n, d) = t.value(x).dims2()?;
    if d != p.d {
        return Err(dim_err!("attention width {} vs input width {d}", p.d));
    }
    let ctx = context.unwrap_or(x);
    let (m, dc) = t.value(ctx).dims2()?;
    if dc != p.d {
        return Err(dim_err!("attention context has {dc} columns, expected {}", p.d));
    }
    let (wq, wk, wv, wo) = (t.param(p.wq), t.param(p.wk), t.param(p.wv), t.param(p.wo));
    let q = t.matmul(x, wq)?;
    let k = t.matmul(ctx, wk)?;
    let v = t.matmul(ctx, wv)?;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = causal.then(|| causal_mask(n, m));

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = t.slice_cols(q, h * dh, dh)?;
        let kh = t.slice_cols(k, h * dh, dh)?;
        let vh = t.slice_cols(v, h * dh, dh)?;
        let kt = t.transpose(kh)?;
        let logits = t.matmul(qh, kt)?;
        let mut logits = t.scale(logits, scale);
        if let Some(mask) = &mask {
            let mv = t.constant(mask.clone());
            logits = t.add(logits, mv)?;
        }
        let attn = t.softmax(logits, 1, 1.0)?;
        heads.push(t.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        t.concat_cols(&heads)?
    };
    t.matmul(cat, wo)
}

/// `n×m` additive mask: 0 where key ≤ query, [`MASKED_LOGIT`] elsewhere.
pub fn causal_mask(n: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for j in (i + 1)..m {
            data[i * m + j] = MASKED_LOGIT;
        }
    }
    Tensor::new(&[n, m], data).expect("non-empty mask")
}

/// Square-kernel convolution with bias, He-initialized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            kernel: store.add(format!("{name}.kernel"), normal_tensor(&[c_out, c_in, k, k], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            c_in,
            c_out,
            k,
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + self.c_out
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (k, b) = (t.param(self.kernel), t.param(self.bias));
        t.conv2d(x, k, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Two-layer position-wise feed-forward network `d → 4d → d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, true, rng),
            activation: Activation::Gelu,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

pub fn ff(t: &mut Tape<'_>, x: Var, p: &FeedForward) -> Result<Var> {
    let h = linear(t, x, &p.fc1)?;
    let h = match p.activation {
        Activation::Gelu => t.gelu(h),
        Activation::Identity => h,
    };
    linear(t, h, &p.fc2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, Selection, DEFAULT_STEP};
    use crate::tensor::{self, matmul};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn eval(store: &ParamStore, f: impl FnOnce(&mut Tape<'_>) -> Result<Var>) -> Tensor {
        let mut t = Tape::inference(store);
        let v = f(&mut t).unwrap();
        t.value(v).clone()
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 3, true, &mut rng(0));
        store.set(lin.weight, Tensor::identity(3)).unwrap();
        let x = random(&[2, 3], 1);
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            linear(t, xv, &lin)
        });
        assert_eq!(y, x);

        let bias = random(&[3], 2);
        store.set(lin.bias.unwrap(), bias.clone()).unwrap();
        let y = eval(&store, |t| {
            let xv = t.constant(Tensor::zeros(&[2, 3]));
            linear(t, xv, &lin)
        });
        assert_eq!(y.row(0), bias.data());
        assert_eq!(y.row(1), bias.data());
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng(0));
        let (w, b, x) = (random(&[3, 2], 3), random(&[2], 4), random(&[2, 3], 5));
        store.set(lin.weight, w.clone()).unwrap();
        store.set(lin.bias.unwrap(), b.clone()).unwrap();
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            linear(t, xv, &lin)
        });
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += x.data()[i * 3 + k] * w.data()[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - (s + b.data()[j])).abs() < 1e-14);
            }
        }
        let bad = eval_err(&store, &lin);
        assert!(bad);
    }

    fn eval_err(store: &ParamStore, lin: &Linear) -> bool {
        let mut t = Tape::inference(store);
        let xv = t.constant(Tensor::zeros(&[1, 5]));
        linear(&mut t, xv, lin).is_err()
    }

    #[test]
    fn embed_examples() {
        let mut store = ParamStore::new();
        let table = store.add("voc", random(&[5, 4], 6));
        let y = eval(&store, |t| embed(t, &[0, 0], table));
        assert_eq!(y.row(0), store.get(table).row(0));
        assert_eq!(y.row(1), store.get(table).row(0));

        let ids = [3usize, 1, 4];
        let mut onehot = Tensor::zeros(&[3, 5]);
        for (r, &i) in ids.iter().enumerate() {
            onehot.data_mut()[r * 5 + i] = 1.0;
        }
        let dense = matmul(&onehot, store.get(table)).unwrap();
        assert_eq!(eval(&store, |t| embed(t, &ids, table)), dense);

        let mut t = Tape::new(&store);
        let e = embed(&mut t, &[3], table).unwrap();
        let loss = t.sum(e);
        let g = t.backward(loss).unwrap();
        let g = g.param(table).unwrap();
        for r in 0..5 {
            let want = if r == 3 { 1.0 } else { 0.0 };
            assert!(g.row(r).iter().all(|&v| v == want));
        }

        let mut t = Tape::inference(&store);
        assert!(matches!(embed(&mut t, &[5], table), Err(crate::Error::Index(_))));
    }

    fn attention_store(d: usize, heads: usize, seed: u64) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "att", d, heads, &mut rng(seed));
        for (i, id) in [att.wq, att.wk, att.wv, att.wo].into_iter().enumerate() {
            store.set(id, random(&[d, d], seed * 10 + i as u64)).unwrap();
        }
        (store, att)
    }

    #[test]
    fn single_row_attention_is_projected_value() {
        let (store, att) = attention_store(8, 2, 1);
        let x = random(&[1, 8], 2);
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            mha(t, xv, &att, false, None)
        });
        let v = matmul(&x, store.get(att.wv)).unwrap();
        let want = matmul(&v, store.get(att.wo)).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn causal_row_zero_ignores_later_rows() {
        let (store, att) = attention_store(8, 2, 3);
        let x = random(&[4, 8], 4);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[8..] {
            *v += 0.5;
        }
        let run = |inp: &Tensor| {
            eval(&store, |t| {
                let xv = t.constant(inp.clone());
                mha(t, xv, &att, true, None)
            })
        };
        let (a, b) = (run(&x), run(&x2));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn multi_head_matches_per_head_slices() {
        let (store, att) = attention_store(8, 2, 5);
        let x = random(&[3, 8], 6);
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            mha(t, xv, &att, false, None)
        });
        // Independent oracle: explicit per-head loops.
        let q = matmul(&x, store.get(att.wq)).unwrap();
        let k = matmul(&x, store.get(att.wk)).unwrap();
        let v = matmul(&x, store.get(att.wv)).unwrap();
        let (n, d, dh) = (3, 8, 4);
        let mut cat = vec![0.0; n * d];
        for h in 0..2 {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q.data()[i * d + h * dh + c] * k.data()[j * d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i * d + h * dh + c] = (0..n).map(|j| e[j] / z * v.data()[j * d + h * dh + c]).sum();
                }
            }
        }
        let want = matmul(&Tensor::new(&[n, d], cat).unwrap(), store.get(att.wo)).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant_without_mask() {
        let (store, att) = attention_store(8, 4, 7);
        let x = random(&[5, 8], 8);
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<&[f64]> = perm.iter().map(|&p| x.row(p)).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let run = |inp: &Tensor| {
            eval(&store, |t| {
                let xv = t.constant(inp.clone());
                mha(t, xv, &att, false, None)
            })
        };
        let (y, yp) = (run(&x), run(&xp));
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.row(r)[c] - y.row(p)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_checks_context_width() {
        let (store, att) = attention_store(8, 2, 9);
        let mut t = Tape::inference(&store);
        let x = t.constant(Tensor::zeros(&[2, 8]));
        let ctx = t.constant(Tensor::zeros(&[3, 4]));
        assert!(mha(&mut t, x, &att, false, Some(ctx)).is_err());
    }

    #[test]
    fn attention_gradients() {
        let (mut store, att) = attention_store(8, 2, 11);
        let x = store.add("x", random(&[3, 8], 12));
        let ctx = store.add("ctx", random(&[4, 8], 13));
        for causal in [false, true] {
            let r = grad_check(&store, DEFAULT_STEP, Selection::All, |t| {
                let (xv, cv) = (t.param(x), t.param(ctx));
                let self_att = mha(t, xv, &att, causal, None)?;
                let cross = mha(t, self_att, &att, false, Some(cv))?;
                let sq = t.mul(cross, cross)?;
                Ok(t.sum(sq))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn feed_forward_examples() {
        let mut store = ParamStore::new();
        let mut p = FeedForward::new(&mut store, "ff", 4, &mut rng(0));
        for id in [p.fc1.weight, p.fc2.weight] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = random(&[3, 4], 1);
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            ff(t, xv, &p)
        });
        assert!(y.data().iter().all(|&v| v == 0.0));

        // Identity activation with an identity embedding into 4d and back.
        p.activation = Activation::Identity;
        let mut up = Tensor::zeros(&[4, 16]);
        let mut down = Tensor::zeros(&[16, 4]);
        for i in 0..4 {
            up.data_mut()[i * 16 + i] = 1.0;
            down.data_mut()[i * 4 + i] = 1.0;
        }
        store.set(p.fc1.weight, up).unwrap();
        store.set(p.fc2.weight, down).unwrap();
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            ff(t, xv, &p)
        });
        assert_eq!(y, x);
    }

    #[test]
    fn feed_forward_matches_layer_by_layer() {
        let mut store = ParamStore::new();
        let p = FeedForward::new(&mut store, "ff", 4, &mut rng(0));
        for (i, id) in [p.fc1.weight, p.fc1.bias.unwrap(), p.fc2.weight, p.fc2.bias.unwrap()]
            .into_iter()
            .enumerate()
        {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(&shape, 20 + i as u64)).unwrap();
        }
        let x = random(&[3, 4], 30);
        let y = eval(&store, |t| {
            let xv = t.constant(x.clone());
            ff(t, xv, &p)
        });
        let mut h = matmul(&x, store.get(p.fc1.weight)).unwrap();
        for r in 0..3 {
            for j in 0..16 {
                let v = h.data()[r * 16 + j] + store.get(p.fc1.bias.unwrap()).data()[j];
                h.data_mut()[r * 16 + j] = tensor::gelu(v);
            }
        }
        let mut o = matmul(&h, store.get(p.fc2.weight)).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                o.data_mut()[r * 4 + j] += store.get(p.fc2.bias.unwrap()).data()[j];
            }
        }
        assert!(y.max_abs_diff(&o) < 1e-13);
    }

    #[test]
    fn layer_gradients() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut rng(1));
        let ffp = FeedForward::new(&mut store, "ff", 3, &mut rng(2));
        let ln = LayerNorm::new(&mut store, "ln", 3);
        let pos = PositionTable::new(&mut store, "pos", 5, 3, &mut rng(3));
        let table = store.add("voc", random(&[6, 4], 4));
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(&shape, 100 + id.0 as u64)).unwrap();
        }
        let r = grad_check(&store, DEFAULT_STEP, Selection::All, |t| {
            let e = embed(t, &[1, 5, 2], table)?;
            let h = linear(t, e, &lin)?;
            let h = pos.add_to(t, h)?;
            let h = ln.forward(t, h)?;
            let h = ff(t, h, &ffp)?;
            let sq = t.mul(h, h)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
