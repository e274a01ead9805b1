//! Gradient checks of every differentiable operation, every module and the
//! full training graph, grouped by module for reporting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::datagen::{generate, DatasetSpec};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, Selection, DEFAULT_STEP};
use crate::model::Model;
use crate::nn::{self, Attention, Conv2d, FeedForward, LayerNorm, Linear};
use crate::tensor::{Tensor, LAYERNORM_EPS};
use crate::{flt, losses, mve, trainer, vd, vim};

/// Acceptance bound on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: &'static str,
    pub case: &'static str,
    pub report: GradCheckReport,
}

/// Worst case per module, in suite order.
pub fn worst_per_module(results: &[CaseResult]) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(m, _)| *m == r.module) {
            Some((_, w)) => *w = w.max(r.report.max_rel_error),
            None => out.push((r.module, r.report.max_rel_error)),
        }
    }
    out
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// `Σ w ⊙ x` with fixed random weights, so that every output entry matters.
fn probe(t: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(t.shape(x), -1.0, 1.0, &mut rng);
    let w = t.constant(w);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

struct Suite {
    seed: u64,
    out: Vec<CaseResult>,
}

impl Suite {
    fn check<F>(&mut self, module: &'static str, case: &'static str, store: &ParamStore, sel: Selection, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<'_>) -> Result<Var>,
    {
        let report = grad_check(store, DEFAULT_STEP, sel, f)?;
        self.out.push(CaseResult { module, case, report });
        Ok(())
    }

    fn sampled(&self, per_tensor: usize) -> Selection {
        Selection::Sample { per_tensor, seed: self.seed }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(salt);
        r
    }

    /// One case per tape operation; inputs are parameters so that the
    /// checker perturbs them.
    fn ops(&mut self) -> Result<()> {
        let mut rng = self.rng(1);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&[3, 4], -1.0, 1.0, &mut rng));
        let b = s.add("b", random(&[3, 4], -1.0, 1.0, &mut rng));
        let m = s.add("m", random(&[4, 5], -1.0, 1.0, &mut rng));
        let sc = s.add("s", Tensor::new(&[1], vec![0.7])?);
        let bias = s.add("bias", random(&[4], -1.0, 1.0, &mut rng));
        let g = s.add("gain", random(&[4], 0.5, 1.5, &mut rng));
        let img = s.add("img", random(&[2, 6, 6], -1.0, 1.0, &mut rng));
        let ker = s.add("ker", random(&[3, 2, 3, 3], -0.5, 0.5, &mut rng));
        let kb = s.add("ker_bias", random(&[3], -0.5, 0.5, &mut rng));
        let table = s.add("table", random(&[6, 4], -1.0, 1.0, &mut rng));
        let sd = self.seed;
        let all = Selection::All;

        type Unary = fn(&mut Tape<'_>, Var) -> Result<Var>;
        let unary: [(&'static str, Unary); 11] = [
            ("scale", |t, x| Ok(t.scale(x, -1.5))),
            ("abs", |t, x| t.abs(x)),
            ("transpose", |t, x| t.transpose(x)),
            ("softmax", |t, x| t.softmax(x, 1, 0.5)),
            ("log_softmax", |t, x| t.log_softmax(x, 0, 1.0)),
            ("gelu", |t, x| Ok(t.gelu(x))),
            ("sigmoid", |t, x| Ok(t.sigmoid(x))),
            ("reshape", |t, x| t.reshape(x, &[2, 6])),
            ("slice_rows", |t, x| t.slice_rows(x, 1, 2)),
            ("slice_cols", |t, x| t.slice_cols(x, 1, 2)),
            ("l2_normalize_rows", |t, x| t.l2_normalize_rows(x)),
        ];
        for (name, op) in unary {
            self.check("tensor", name, &s, all, |t| {
                let x = t.param(a);
                let y = op(t, x)?;
                probe(t, y, sd)
            })?;
        }

        type Binary = fn(&mut Tape<'_>, Var, Var) -> Result<Var>;
        let binary: [(&'static str, Binary); 5] = [
            ("add", |t, x, y| t.add(x, y)),
            ("sub", |t, x, y| t.sub(x, y)),
            ("mul", |t, x, y| t.mul(x, y)),
            ("concat0", |t, x, y| t.concat0(&[x, y])),
            ("concat_cols", |t, x, y| t.concat_cols(&[x, y])),
        ];
        for (name, op) in binary {
            self.check("tensor", name, &s, all, |t| {
                let (x, y) = (t.param(a), t.param(b));
                let z = op(t, x, y)?;
                probe(t, z, sd)
            })?;
        }

        self.check("tensor", "matmul", &s, all, |t| {
            let (x, y) = (t.param(a), t.param(m));
            let z = t.matmul(x, y)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "add_scalar_var", &s, all, |t| {
            let (x, k) = (t.param(a), t.param(sc));
            let z = t.add_scalar_var(x, k)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "div_by_scalar_var", &s, all, |t| {
            let (x, k) = (t.param(a), t.param(sc));
            let z = t.div_by_scalar_var(x, k)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "add_row_bias", &s, all, |t| {
            let (x, k) = (t.param(a), t.param(bias));
            let z = t.add_row_bias(x, k)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "layernorm", &s, all, |t| {
            let (x, gg, bb) = (t.param(a), t.param(g), t.param(bias));
            let z = t.layernorm(x, gg, bb, LAYERNORM_EPS)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "conv2d", &s, all, |t| {
            let (x, k, kbv) = (t.param(img), t.param(ker), t.param(kb));
            let z = t.conv2d(x, k, Some(kbv), 2, 1)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "upsample2x", &s, all, |t| {
            let x = t.param(img);
            let z = t.upsample2x(x)?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "embed", &s, all, |t| {
            let x = t.param(table);
            let z = t.embed(x, &[3, 0, 3, 5])?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "sum_mean", &s, all, |t| {
            let x = t.param(a);
            let sq = t.mul(x, x)?;
            let u = t.sum(sq);
            let v = t.mean(x);
            let w = t.mul(u, v)?;
            Ok(t.scale(w, 1.0))
        })?;
        self.check("tensor", "pick_per_row", &s, all, |t| {
            let x = t.param(a);
            let z = t.pick_per_row(x, &[0, 3, 1])?;
            probe(t, z, sd)
        })?;
        self.check("tensor", "pick_per_column", &s, all, |t| {
            let x = t.param(a);
            let z = t.pick_per_column(x, &[2, 0, 1, 1])?;
            probe(t, z, sd)
        })?;
        Ok(())
    }

    fn layers(&mut self) -> Result<()> {
        let mut rng = self.rng(2);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&[5, 8], -1.0, 1.0, &mut rng));
        let ctx = s.add("ctx", random(&[3, 8], -1.0, 1.0, &mut rng));
        let img = s.add("img", random(&[3, 8, 8], 0.0, 1.0, &mut rng));
        let lin = Linear::new(&mut s, "lin", 8, 6, true, &mut rng);
        let ln = LayerNorm::new(&mut s, "ln", 8);
        // larger weights than the default init so attention is far from uniform
        let attn = Attention::new(&mut s, "attn", 8, 2, &mut rng);
        for id in [attn.wq, attn.wk, attn.wv, attn.wo] {
            let w = random(&[8, 8], -0.6, 0.6, &mut rng);
            s.set(id, w)?;
        }
        let ff = FeedForward::new(&mut s, "ff", 8, &mut rng);
        let conv = Conv2d::new(&mut s, "conv", 3, 4, 3, 2, 1, &mut rng);
        let table = s.add("table", random(&[10, 8], -1.0, 1.0, &mut rng));
        let sd = self.seed;
        let all = Selection::All;

        self.check("nn", "linear", &s, all, |t| {
            let v = t.param(x);
            let y = nn::linear(t, v, &lin)?;
            probe(t, y, sd)
        })?;
        self.check("nn", "layer_norm", &s, all, |t| {
            let v = t.param(x);
            let y = ln.forward(t, v)?;
            probe(t, y, sd)
        })?;
        for (case, causal) in [("self_attention", false), ("causal_attention", true)] {
            self.check("nn", case, &s, all, |t| {
                let v = t.param(x);
                let y = nn::mha(t, v, &attn, causal, None)?;
                probe(t, y, sd)
            })?;
        }
        self.check("nn", "cross_attention", &s, all, |t| {
            let (v, c) = (t.param(x), t.param(ctx));
            let y = nn::mha(t, v, &attn, false, Some(c))?;
            probe(t, y, sd)
        })?;
        self.check("nn", "feed_forward", &s, all, |t| {
            let v = t.param(x);
            let y = nn::ff(t, v, &ff)?;
            probe(t, y, sd)
        })?;
        self.check("nn", "conv", &s, all, |t| {
            let v = t.param(img);
            let y = conv.forward(t, v)?;
            probe(t, y, sd)
        })?;
        self.check("nn", "embedding", &s, all, |t| {
            let y = nn::embed(t, &[1, 4, 4, 9], table)?;
            probe(t, y, sd)
        })?;
        Ok(())
    }

    fn vim(&mut self) -> Result<()> {
        let mut rng = self.rng(3);
        let mut s = ParamStore::new();
        let tok = s.add("tokens", random(&[6, 8], -1.0, 1.0, &mut rng));
        let iv = s.add("i_v", random(&[1, 8], -1.0, 1.0, &mut rng));
        let p = vim::VimParams::new(&mut s, "vim", 8, 2, &mut rng);
        for id in p.ids() {
            s.set(id, random(&[8, 8], -0.5, 0.5, &mut rng))?;
        }
        let sd = self.seed;
        self.check("vim", "injection", &s, Selection::All, |t| {
            let (a, b) = (t.param(tok), t.param(iv));
            let y = vim::vim_forward(t, a, b, &p)?;
            probe(t, y, sd)
        })
    }

    fn vision(&mut self, cfg: &ModelConfig) -> Result<()> {
        let mut rng = self.rng(4);
        let mut s = ParamStore::new();
        let img = s.add("image", random(&[3, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut rng));
        let res = s.add("residual", random(&[3, cfg.image_size, cfg.image_size], 0.0, 0.2, &mut rng));
        let enc = mve::ImageEncoder::new(&mut s, cfg, &mut rng);
        let dec = vd::UNetDecoder::new(&mut s, cfg, &mut rng);
        let sel = self.sampled(3);
        let sd = self.seed;
        self.check("mve", "image_and_residual", &s, sel, |t| {
            let (i, r) = (t.param(img), t.param(res));
            let out = mve::mve_forward(t, i, r, &enc)?;
            probe(t, out.i_v, sd)
        })?;
        self.check("vd", "appearance_and_mask", &s, sel, |t| {
            let i = t.param(img);
            let f = mve::unet_encode(t, i, &enc.unet)?;
            let (a, m) = vd::decode(t, f.i_loc, &f.skips, &dec)?;
            let pa = probe(t, a, sd)?;
            let pm = probe(t, m, sd ^ 1)?;
            t.add(pa, pm)
        })?;
        Ok(())
    }

    fn language(&mut self, cfg: &ModelConfig) -> Result<()> {
        let mut rng = self.rng(5);
        let mut s = ParamStore::new();
        let iv = s.add("i_v", random(&[1, cfg.d], -1.0, 1.0, &mut rng));
        let blocks = flt::LanguageBlocks::new(&mut s, cfg, &mut rng);
        let ids: Vec<usize> = {
            let mut v: Vec<usize> = (0..cfg.n - 4).map(|_| rng.random_range(4..cfg.s)).collect();
            v.push(crate::text::EOT);
            v.resize(cfg.n, crate::text::PAD);
            v
        };
        let shifted = crate::text::shift_for_decoder(&ids);
        let sd = self.seed;
        self.check("flt", "encode_decode_project", &s, self.sampled(3), |t| {
            let v = t.param(iv);
            let enc = flt::language_encode(t, &ids, v, &blocks)?;
            let rec = flt::language_decode(t, &shifted, enc.t_hig, v, &blocks)?;
            let logits = flt::project_vocab(t, rec, &blocks)?;
            let a = probe(t, logits, sd)?;
            let b = probe(t, enc.t_l, sd ^ 2)?;
            t.add(a, b)
        })
    }

    fn losses(&mut self) -> Result<()> {
        let mut rng = self.rng(6);
        let mut s = ParamStore::new();
        let img: Vec<ParamId> = (0..2).map(|k| s.add(format!("img{k}"), random(&[3, 4, 4], 0.0, 1.0, &mut rng))).collect();
        let pre: Vec<ParamId> = (0..2).map(|k| s.add(format!("pre{k}"), random(&[3, 4, 4], 0.0, 1.0, &mut rng))).collect();
        let mlog: Vec<ParamId> = (0..2).map(|k| s.add(format!("mask{k}"), random(&[2, 4, 4], -2.0, 2.0, &mut rng))).collect();
        let tl: Vec<ParamId> = (0..3).map(|k| s.add(format!("t_l{k}"), random(&[1, 6], -1.0, 1.0, &mut rng))).collect();
        let tp: Vec<ParamId> = (0..3).map(|k| s.add(format!("t_l_pre{k}"), random(&[1, 6], -1.0, 1.0, &mut rng))).collect();
        let iv: Vec<ParamId> = (0..3).map(|k| s.add(format!("i_v{k}"), random(&[1, 6], -1.0, 1.0, &mut rng))).collect();
        let tau = s.add("tau", Tensor::new(&[1], vec![0.3])?);
        let rec: Vec<ParamId> = (0..2).map(|k| s.add(format!("rec{k}"), random(&[5, 7], -2.0, 2.0, &mut rng))).collect();
        let y: Vec<ParamId> = (0..2).map(|k| s.add(format!("y{k}"), random(&[1, 2], -2.0, 2.0, &mut rng))).collect();
        let masks: Vec<Vec<usize>> = (0..2).map(|_| (0..16).map(|_| rng.random_range(0..2)).collect()).collect();
        let targets: [&[usize]; 2] = [&[1, 5, 2, 0, 0], &[1, 6, 6, 3, 2]];
        let all = Selection::All;
        let vars = |t: &mut Tape<'_>, ids: &[ParamId]| -> Vec<Var> { ids.iter().map(|&i| t.param(i)).collect() };

        self.check("losses", "ar", &s, all, |t| {
            let (a, b) = (vars(t, &img), vars(t, &pre));
            losses::ar_loss(t, &a, &b)
        })?;
        self.check("losses", "fl", &s, all, |t| {
            let l = vars(t, &mlog);
            let m: Vec<&[usize]> = masks.iter().map(Vec::as_slice).collect();
            losses::fl_loss(t, &m, &l)
        })?;
        for (case, sym) in [("kl", false), ("kl_symmetric", true)] {
            self.check("losses", case, &s, all, |t| {
                // the detached target has no analytic gradient, so feed it as data
                let a: Vec<Var> = if sym {
                    vars(t, &tl)
                } else {
                    tl.iter().map(|&i| t.constant(t.params().get(i).clone())).collect()
                };
                let b = vars(t, &tp);
                losses::kl_loss(t, &a, &b, sym)
            })?;
        }
        self.check("losses", "cmc", &s, all, |t| {
            let (a, b) = (vars(t, &iv), vars(t, &tl));
            let k = t.param(tau);
            losses::cmc_loss(t, &a, &b, k)
        })?;
        self.check("losses", "lr", &s, all, |t| {
            let l = vars(t, &rec);
            losses::lr_loss(t, &l, &targets)
        })?;
        self.check("losses", "fd", &s, all, |t| {
            let l = vars(t, &y);
            losses::fd_loss(t, &l, &[1, 0])
        })?;
        Ok(())
    }

    /// Total loss of a two-sample batch through `forward_train`.
    fn full_model(&mut self, cfg: &ModelConfig) -> Result<()> {
        // The default KL target is detached on purpose, which finite
        // differences cannot see; check the fully differentiable variant.
        let cfg = ModelConfig {
            kl_symmetric: true,
            ..cfg.clone()
        };
        let model = Model::new(&cfg, self.seed)?;
        let mut spec = DatasetSpec::new(self.seed, 2, cfg.image_size);
        spec.mix = [1, 1, 0, 0];
        let samples = generate(&spec)?;
        let prompts = trainer::prompt_ids(&samples, &model);
        let refs: Vec<_> = samples.iter().collect();
        let ps: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
        self.check("model", "forward_train_total", &model.params, self.sampled(2), |t| {
            let lv = trainer::batch_losses(t, &model, &refs, &ps)?;
            Ok(lv.total(t)?.0)
        })
    }
}

/// Runs every case. `cfg` sizes the module and full-model checks.
pub fn run(seed: u64, cfg: &ModelConfig) -> Result<Vec<CaseResult>> {
    let mut s = Suite { seed, out: Vec::new() };
    s.ops()?;
    s.layers()?;
    s.vim()?;
    s.vision(cfg)?;
    s.language(cfg)?;
    s.losses()?;
    s.full_model(cfg)?;
    Ok(s.out)
}
