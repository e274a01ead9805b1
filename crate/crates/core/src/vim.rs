//! Vision injection: word-level cross-attention in which every word token
//! queries the single fused vision class embedding, followed by a fully
//! connected projection and a residual addition.
//!
//! With one key the per-head softmax is identically 1, so the injected delta
//! `softmax(QKᵀ/√(d/r))·V·W_fc` equals `(i_v·W_val)·W_fc` for every row. The
//! implementation still runs the full attention path so that gradients reach
//! the query and key projections exactly as in ordinary attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{normal_tensor, WEIGHT_STD};

/// Where a block applies its injection relative to attention and FF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Before,
    Between,
    After,
}

#[derive(Clone, Debug)]
pub struct VimParams {
    pub w_que: ParamId,
    pub w_key: ParamId,
    pub w_val: ParamId,
    pub w_fc: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl VimParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        let mut m = |s: &str| store.add(format!("{name}.{s}"), normal_tensor(&[d, d], WEIGHT_STD, rng));
        Self {
            w_que: m("w_que"),
            w_key: m("w_key"),
            w_val: m("w_val"),
            w_fc: m("w_fc"),
            heads,
            d,
        }
    }

    /// Four d×d matrices.
    pub fn param_count(&self) -> usize {
        4 * self.d * self.d
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_que, self.w_key, self.w_val, self.w_fc]
    }
}

/// Injects the single-row vision embedding `i_v` (1×d) into `t_tok` (n×d).
pub fn vim_forward(t: &mut Tape<'_>, t_tok: Var, i_v: Var, p: &VimParams) -> Result<Var> {
    let rows = t.value(i_v).dims2()?.0;
    if rows != 1 {
        return Err(Error::Contract(format!(
            "vision embedding must have exactly one row, got {rows}"
        )));
    }
    inject(t, t_tok, i_v, p)
}

/// Same computation with an arbitrary number of key/value rows; only used to
/// contrast the class-token design against all-token keys.
pub fn vim_forward_multi_key(t: &mut Tape<'_>, t_tok: Var, kv: Var, p: &VimParams) -> Result<Var> {
    inject(t, t_tok, kv, p)
}

fn inject(t: &mut Tape<'_>, t_tok: Var, kv: Var, p: &VimParams) -> Result<Var> {
    let (_, d) = t.value(t_tok).dims2()?;
    let (_, dk) = t.value(kv).dims2()?;
    if d != p.d || dk != p.d {
        return Err(dim_err!(
            "injection width {} vs tokens {d} and vision {dk}",
            p.d
        ));
    }
    let (wq, wk, wv, wfc) = (t.param(p.w_que), t.param(p.w_key), t.param(p.w_val), t.param(p.w_fc));
    let q = t.matmul(t_tok, wq)?;
    let k = t.matmul(kv, wk)?;
    let v = t.matmul(kv, wv)?;

    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = t.slice_cols(q, h * dh, dh)?;
        let kh = t.slice_cols(k, h * dh, dh)?;
        let vh = t.slice_cols(v, h * dh, dh)?;
        let kt = t.transpose(kh)?;
        let logits = t.matmul(qh, kt)?;
        let logits = t.scale(logits, scale);
        let attn = t.softmax(logits, 1, 1.0)?;
        heads.push(t.matmul(attn, vh)?);
    }
    let glo = if heads.len() == 1 {
        heads[0]
    } else {
        t.concat_cols(&heads)?
    };
    let projected = t.matmul(glo, wfc)?;
    t.add(projected, t_tok)
}

/// Multiplications spent forming the attention map for `n` query words
/// against the single class-token key: `n·d` summed over all heads.
pub fn vim_flop_count(n: usize, d: usize, r: usize) -> Result<u64> {
    vim_flop_count_keys(n, 1, d, r)
}

/// Attention-map multiplications with `keys` key rows: `n·keys·d`.
pub fn vim_flop_count_keys(n: usize, keys: usize, d: usize, r: usize) -> Result<u64> {
    if r == 0 || !d.is_multiple_of(r) {
        return Err(dim_err!("width {d} not divisible by {r} heads"));
    }
    Ok((n as u64) * (keys as u64) * (r as u64) * (d / r) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, Selection, DEFAULT_STEP};
    use crate::tensor::{matmul, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore, VimParams) {
        let mut store = ParamStore::new();
        let p = VimParams::new(&mut store, "vim", d, heads, &mut ChaCha8Rng::seed_from_u64(seed));
        for (i, id) in p.ids().into_iter().enumerate() {
            store.set(id, random(&[d, d], seed * 7 + i as u64)).unwrap();
        }
        (store, p)
    }

    fn run(store: &ParamStore, p: &VimParams, tok: &Tensor, iv: &Tensor) -> Tensor {
        let mut t = Tape::inference(store);
        let (a, b) = (t.constant(tok.clone()), t.constant(iv.clone()));
        let y = vim_forward(&mut t, a, b, p).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn zero_projection_is_identity() {
        let (mut store, p) = setup(8, 2, 1);
        store.set(p.w_fc, Tensor::zeros(&[8, 8])).unwrap();
        let tok = random(&[3, 8], 2);
        assert_eq!(run(&store, &p, &tok, &random(&[1, 8], 3)), tok);
    }

    #[test]
    fn delta_is_query_independent_and_row_constant() {
        let (store, p) = setup(8, 2, 4);
        let iv = random(&[1, 8], 5);
        let (ta, tb) = (random(&[3, 8], 6), random(&[3, 8], 7));
        let da = run(&store, &p, &ta, &iv).data().iter().zip(ta.data()).map(|(y, x)| y - x).collect::<Vec<_>>();
        let db = run(&store, &p, &tb, &iv).data().iter().zip(tb.data()).map(|(y, x)| y - x).collect::<Vec<_>>();
        for (a, b) in da.iter().zip(&db) {
            assert!((a - b).abs() < 1e-9);
        }
        for r in 1..3 {
            for c in 0..8 {
                assert!((da[r * 8 + c] - da[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_broadcast_oracle() {
        let (store, p) = setup(8, 2, 8);
        let tok = random(&[3, 8], 9);
        let iv = random(&[1, 8], 10);
        let v = matmul(&iv, store.get(p.w_val)).unwrap();
        let delta = matmul(&v, store.get(p.w_fc)).unwrap();
        let got = run(&store, &p, &tok, &iv);
        for r in 0..3 {
            for c in 0..8 {
                let want = delta.data()[c] + tok.data()[r * 8 + c];
                assert!((got.data()[r * 8 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_multi_row_vision() {
        let (store, p) = setup(8, 2, 11);
        let mut t = Tape::inference(&store);
        let a = t.constant(Tensor::zeros(&[3, 8]));
        let b = t.constant(Tensor::zeros(&[2, 8]));
        assert!(matches!(vim_forward(&mut t, a, b, &p), Err(Error::Contract(_))));
        let c = t.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(vim_forward(&mut t, a, c, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_preserved_for_any_length() {
        let (store, p) = setup(8, 4, 12);
        for n in [1, 2, 7] {
            let y = run(&store, &p, &random(&[n, 8], n as u64), &random(&[1, 8], 13));
            assert_eq!(y.shape(), &[n, 8]);
        }
    }

    #[test]
    fn multi_key_mode_uses_all_rows() {
        let (store, p) = setup(8, 2, 14);
        let mut t = Tape::inference(&store);
        let tok = t.constant(random(&[3, 8], 15));
        let kv = t.constant(random(&[5, 8], 16));
        let y = vim_forward_multi_key(&mut t, tok, kv, &p).unwrap();
        assert_eq!(t.shape(y), &[3, 8]);
    }

    #[test]
    fn flop_counts() {
        assert_eq!(vim_flop_count(308, 512, 8).unwrap(), 157_696);
        assert_eq!(vim_flop_count_keys(308, 308, 512, 8).unwrap(), 308 * 308 * 512);
        assert_eq!(vim_flop_count(1, 32, 4).unwrap(), 32);
        assert_eq!(vim_flop_count(32, 32, 4).unwrap(), 2 * vim_flop_count(16, 32, 4).unwrap());
        assert!(vim_flop_count(4, 30, 4).is_err());
    }

    #[test]
    fn param_count_is_four_d_squared() {
        let (store, p) = setup(8, 2, 17);
        assert_eq!(p.param_count(), 4 * 64);
        assert_eq!(p.ids().iter().map(|&id| store.get(id).len()).sum::<usize>(), 4 * 64);
    }

    #[test]
    fn gradients_match_central_differences() {
        let (mut store, p) = setup(8, 2, 18);
        let tok = store.add("tok", random(&[3, 8], 19));
        let iv = store.add("iv", random(&[1, 8], 20));
        let w = random(&[3, 8], 21);
        let r = grad_check(&store, DEFAULT_STEP, Selection::All, |t| {
            let (a, b) = (t.param(tok), t.param(iv));
            let y = vim_forward(t, a, b, &p)?;
            let wv = t.constant(w.clone());
            let yw = t.mul(y, wv)?;
            let sq = t.mul(yw, y)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
