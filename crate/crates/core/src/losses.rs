//! The six training objectives and their unweighted sum.
//!
//! Every function records its computation on the tape and returns a scalar
//! variable; batch terms take one entry per sample and average over them.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use crate::text::PAD;

/// Softmax temperature of the KL alignment term.
pub const KL_TEMPERATURE: f64 = 0.5;
/// Lower bound enforced on the contrastive temperature.
pub const TAU_MIN: f64 = 0.01;

fn batch_mean(t: &mut Tape<'_>, terms: Vec<Var>) -> Result<Var> {
    let b = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for v in it {
        acc = t.add(acc, v)?;
    }
    Ok(if b == 1 { acc } else { t.scale(acc, 1.0 / b as f64) })
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(dim_err!("batch sides have {a} and {b} entries"));
    }
    Ok(())
}

/// Mean squared pixel error, averaged over the batch.
pub fn ar_loss(t: &mut Tape<'_>, images: &[Var], predicted: &[Var]) -> Result<Var> {
    check_batch(images.len(), predicted.len())?;
    let mut terms = Vec::with_capacity(images.len());
    for (&i, &p) in images.iter().zip(predicted) {
        let diff = t.sub(i, p)?;
        let sq = t.mul(diff, diff)?;
        terms.push(t.mean(sq));
    }
    batch_mean(t, terms)
}

/// Per-pixel cross-entropy of f×H×W mask logits against class maps.
pub fn fl_loss(t: &mut Tape<'_>, masks: &[&[usize]], logits: &[Var]) -> Result<Var> {
    check_batch(masks.len(), logits.len())?;
    let mut terms = Vec::with_capacity(masks.len());
    for (&m, &l) in masks.iter().zip(logits) {
        let (f, h, w) = t.value(l).dims3()?;
        if m.len() != h * w {
            return Err(dim_err!("mask of {} pixels for {h}×{w} logits", m.len()));
        }
        let flat = t.reshape(l, &[f, h * w])?;
        let logp = t.log_softmax(flat, 0, 1.0)?;
        let picked = t.pick_per_column(logp, m)?;
        let mean = t.mean(picked);
        terms.push(t.scale(mean, -1.0));
    }
    batch_mean(t, terms)
}

/// `KL(δ(T_l) ‖ δ(T_l_pre))` with `δ = softmax(x / 0.5)`. The `T_l` side is
/// detached unless `symmetric`.
pub fn kl_loss(t: &mut Tape<'_>, t_l: &[Var], t_l_pre: &[Var], symmetric: bool) -> Result<Var> {
    check_batch(t_l.len(), t_l_pre.len())?;
    let mut terms = Vec::with_capacity(t_l.len());
    for (&target, &pred) in t_l.iter().zip(t_l_pre) {
        if t.shape(target) != t.shape(pred) {
            return Err(dim_err!("kl sides {:?} and {:?}", t.shape(target), t.shape(pred)));
        }
        let target = if symmetric { target } else { t.detach(target) };
        let p = t.softmax(target, 1, KL_TEMPERATURE)?;
        let logp = t.log_softmax(target, 1, KL_TEMPERATURE)?;
        let logq = t.log_softmax(pred, 1, KL_TEMPERATURE)?;
        let gap = t.sub(logp, logq)?;
        let weighted = t.mul(p, gap)?;
        terms.push(t.sum(weighted));
    }
    batch_mean(t, terms)
}

/// Symmetric contrastive loss over b matched (vision, language) rows.
/// Rows are L2-normalized, similarities divided by `tau`, and each
/// direction is a row-softmax cross-entropy against the diagonal.
pub fn cmc_loss(t: &mut Tape<'_>, i_v: &[Var], t_l: &[Var], tau: Var) -> Result<Var> {
    check_batch(i_v.len(), t_l.len())?;
    let b = i_v.len();
    let v = if b == 1 { i_v[0] } else { t.concat0(i_v)? };
    let l = if b == 1 { t_l[0] } else { t.concat0(t_l)? };
    let v = t.l2_normalize_rows(v)?;
    let l = t.l2_normalize_rows(l)?;
    let lt = t.transpose(l)?;
    let sim = t.matmul(v, lt)?;
    let sim = t.div_by_scalar_var(sim, tau)?;
    let diag: Vec<usize> = (0..b).collect();

    let v2l = t.log_softmax(sim, 1, 1.0)?;
    let v2l = t.pick_per_row(v2l, &diag)?;
    let v2l = t.mean(v2l);
    let sim_t = t.transpose(sim)?;
    let l2v = t.log_softmax(sim_t, 1, 1.0)?;
    let l2v = t.pick_per_row(l2v, &diag)?;
    let l2v = t.mean(l2v);
    let both = t.add(v2l, l2v)?;
    Ok(t.scale(both, -0.5))
}

/// Vocabulary cross-entropy against the unshifted prompt, averaged over
/// non-PAD positions and then over the batch.
pub fn lr_loss(t: &mut Tape<'_>, logits: &[Var], targets: &[&[usize]]) -> Result<Var> {
    check_batch(logits.len(), targets.len())?;
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &ids) in logits.iter().zip(targets) {
        let (n, _) = t.value(l).dims2()?;
        if ids.len() != n {
            return Err(dim_err!("{} targets for {n} logit rows", ids.len()));
        }
        let logp = t.log_softmax(l, 1, 1.0)?;
        let picked = t.pick_per_row(logp, ids)?;
        let count = ids.iter().filter(|&&i| i != PAD).count();
        let weights: Vec<f64> = ids
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { -1.0 / count as f64 })
            .collect();
        let w = t.constant(Tensor::new(&[n], weights)?);
        let masked = t.mul(picked, w)?;
        terms.push(t.sum(masked));
    }
    batch_mean(t, terms)
}

/// Softmax cross-entropy of 1×f detection logits.
pub fn fd_loss(t: &mut Tape<'_>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    check_batch(logits.len(), labels.len())?;
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        let logp = t.log_softmax(l, 1, 1.0)?;
        let picked = t.pick_per_row(logp, &[y])?;
        let s = t.sum(picked);
        terms.push(t.scale(s, -1.0));
    }
    batch_mean(t, terms)
}

/// Loss terms of one step, as recorded values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_ar: f64,
    pub l_fl: f64,
    pub l_kl: f64,
    pub l_cmc: f64,
    pub l_lr: f64,
    pub l_fd: f64,
    pub total: f64,
}

impl LossBundle {
    /// Terms in logging order with their names.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("l_ar", self.l_ar),
            ("l_fl", self.l_fl),
            ("l_kl", self.l_kl),
            ("l_cmc", self.l_cmc),
            ("l_lr", self.l_lr),
            ("l_fd", self.l_fd),
            ("total", self.total),
        ]
    }

    /// `fd + lr + cmc + fl + ar + kl`, summed left to right.
    pub fn sum_of_parts(&self) -> f64 {
        self.l_fd + self.l_lr + self.l_cmc + self.l_fl + self.l_ar + self.l_kl
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Scalar loss variables of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ar: Var,
    pub fl: Var,
    pub kl: Var,
    pub cmc: Var,
    pub lr: Var,
    pub fd: Var,
}

impl LossVars {
    /// Records the unweighted total and returns it with the bundle of values.
    pub fn total(&self, t: &mut Tape<'_>) -> Result<(Var, LossBundle)> {
        let mut total = t.add(self.fd, self.lr)?;
        for v in [self.cmc, self.fl, self.ar, self.kl] {
            total = t.add(total, v)?;
        }
        let val = |v: Var| t.value(v).item();
        let bundle = LossBundle {
            l_ar: val(self.ar),
            l_fl: val(self.fl),
            l_kl: val(self.kl),
            l_cmc: val(self.cmc),
            l_lr: val(self.lr),
            l_fd: val(self.fd),
            total: val(total),
        };
        Ok((total, bundle))
    }
}
