//! Adam with decoupled weight decay, the step-decay schedule, the training
//! loop and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape};
use crate::datagen::ImageSample;
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, LossVars, TAU_MIN};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, Model};
use crate::tensor::Tensor;
use crate::text::encode_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Add the decay to the gradient instead of the update.
    pub coupled_wd: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            coupled_wd: false,
        }
    }
}

/// Moments indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter. `clamp_min` lists parameters kept at
    /// or above a floor after the update.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        cfg: &AdamConfig,
        clamp_min: &[(ParamId, f64)],
    ) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for &id in &ids {
            if grads.param(id).is_none() {
                return Err(Error::Contract(format!("no gradient for {}", params.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for id in ids {
            let g = grads.param(id).expect("checked above");
            let theta = params.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..theta.len() {
                let w = theta.data()[i];
                let mut gi = g.data()[i];
                if cfg.coupled_wd {
                    gi += cfg.weight_decay * w;
                }
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mut update = (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                if !cfg.coupled_wd {
                    update += cfg.weight_decay * w;
                }
                theta.data_mut()[i] = w - lr * update;
            }
        }
        for &(id, floor) in clamp_min {
            for x in params.get_mut(id).data_mut() {
                *x = x.max(floor);
            }
        }
        Ok(())
    }

    /// Rounds both moments to single precision.
    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                *x = (*x as f32) as f64;
            }
        }
    }
}

/// Learning rate divided by `factor` every `period` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            factor: 10.0,
            period: 15,
        }
    }
}

pub fn lr_at(epoch: usize, s: &Schedule) -> f64 {
    let k = (epoch / s.period.max(1)) as i32;
    s.base_lr / s.factor.powi(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 0,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

/// Resumable progress: the next epoch to run and the steps taken so far.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_ar,l_fl,l_kl,l_cmc,l_lr,l_fd,total,lr";

pub fn write_loss_row(out: &mut (impl Write + ?Sized), step: u64, b: &LossBundle, lr: f64) -> std::io::Result<()> {
    writeln!(
        out,
        "{step},{},{},{},{},{},{},{},{lr}",
        b.l_ar, b.l_fl, b.l_kl, b.l_cmc, b.l_lr, b.l_fd, b.total
    )
}

/// Shuffled batches in which real and fake samples are interleaved in
/// proportion, so that every batch mixes both classes when possible.
pub fn epoch_batches(samples: &[ImageSample], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut real: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class() == 0).collect();
    let mut fake: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class() == 1).collect();
    real.shuffle(&mut rng);
    fake.shuffle(&mut rng);
    let (nr, nf) = (real.len(), fake.len());
    let (mut ir, mut jf) = (0, 0);
    let mut order = Vec::with_capacity(samples.len());
    while ir < nr || jf < nf {
        // take from the class that is further behind its share
        let take_real = jf >= nf || (ir < nr && ir * nf <= jf * nr);
        if take_real {
            order.push(real[ir]);
            ir += 1;
        } else {
            order.push(fake[jf]);
            jf += 1;
        }
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Forward pass and losses of one batch on `t`.
pub fn batch_losses(t: &mut Tape<'_>, model: &Model, samples: &[&ImageSample], prompts: &[&[usize]]) -> Result<LossVars> {
    let mut outs = Vec::with_capacity(samples.len());
    for (s, ids) in samples.iter().zip(prompts) {
        outs.push(model::forward_train(t, &s.image, ids, model)?);
    }
    let prev = t.set_scope(crate::autodiff::Scope::Loss);
    let images: Vec<_> = samples.iter().map(|s| t.constant(s.image.clone())).collect();
    let i_pre: Vec<_> = outs.iter().map(|o| o.vision.i_pre).collect();
    let classes: Vec<Vec<usize>> = samples.iter().map(|s| s.mask.classes()).collect();
    let class_refs: Vec<&[usize]> = classes.iter().map(Vec::as_slice).collect();
    let m_pre: Vec<_> = outs.iter().map(|o| o.vision.m_pre).collect();
    let t_l: Vec<_> = outs.iter().map(|o| o.t_l).collect();
    let t_l_pre: Vec<_> = outs.iter().map(|o| o.t_l_pre).collect();
    let i_v: Vec<_> = outs.iter().map(|o| o.vision.mve.i_v).collect();
    let rec: Vec<_> = outs.iter().map(|o| o.t_rec_logits).collect();
    let y_pre: Vec<_> = outs.iter().map(|o| o.y_pre()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class()).collect();
    let tau = t.param(model.language.tau);
    let lv = LossVars {
        ar: losses::ar_loss(t, &images, &i_pre)?,
        fl: losses::fl_loss(t, &class_refs, &m_pre)?,
        kl: losses::kl_loss(t, &t_l, &t_l_pre, model.cfg.kl_symmetric)?,
        cmc: losses::cmc_loss(t, &i_v, &t_l, tau)?,
        lr: losses::lr_loss(t, &rec, prompts)?,
        fd: losses::fd_loss(t, &y_pre, &labels)?,
    };
    t.set_scope(prev);
    Ok(lv)
}

/// Token ids of every sample's prompt under the model's vocabulary.
pub fn prompt_ids(samples: &[ImageSample], model: &Model) -> Vec<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let rec = crate::text::PromptRecord {
                levels: s.prompt.clone(),
                ids: Vec::new(),
            };
            encode_text(&rec.text(model.cfg.prompt_levels), &model.vocab, model.cfg.n)
        })
        .collect()
}

/// One optimizer step on a batch; returns the logged loss values.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    samples: &[&ImageSample],
    prompts: &[&[usize]],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<LossBundle> {
    let (bundle, grads) = {
        let mut t = Tape::new(&model.params);
        let lv = batch_losses(&mut t, model, samples, prompts)?;
        let (total, bundle) = lv.total(&mut t)?;
        if let Some(term) = bundle.non_finite() {
            return Err(Error::NonFiniteLoss { step: opt.step + 1, term });
        }
        (bundle, t.backward(total)?)
    };
    let tau = model.language.tau;
    opt.step(&mut model.params, &grads, lr, cfg, &[(tau, TAU_MIN)])?;
    model.params.round_to_f32();
    opt.round_to_f32();
    Ok(bundle)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<LossBundle>,
}

/// Runs epochs `state.epoch..cfg.epochs` (or until `max_steps`), appending
/// one CSV row per step to `log`. `on_epoch` is called after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    samples: &[ImageSample],
    model: &mut Model,
    opt: &mut Adam,
    state: &mut TrainState,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&Model, &Adam, &TrainState) -> Result<()>,
) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let prompts = prompt_ids(samples, model);
    let mut summary = TrainSummary::default();
    while state.epoch < cfg.epochs {
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let lr = lr_at(state.epoch, &cfg.schedule);
        for batch in epoch_batches(samples, cfg.batch_size, cfg.seed, state.epoch) {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let bs: Vec<&ImageSample> = batch.iter().map(|&i| &samples[i]).collect();
            let ps: Vec<&[usize]> = batch.iter().map(|&i| prompts[i].as_slice()).collect();
            let bundle = train_step(model, opt, &bs, &ps, lr, &cfg.adam)?;
            state.step += 1;
            write_loss_row(log, state.step, &bundle, lr)?;
            summary.losses.push(bundle);
        }
        state.epoch += 1;
        on_epoch(model, opt, state)?;
    }
    log.flush()?;
    Ok(summary)
}

/// Per-sample predictions of an evaluated set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<model::Prediction>,
}

/// Text-free evaluation: accuracy, AUC of the fake probability, mIoU.
pub fn evaluate(samples: &[ImageSample], model: &Model) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let predictions = model::predict_batch(&model.params, &images, &model.vision)?;
    let labels: Vec<usize> = samples.iter().map(ImageSample::class).collect();
    let classes: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.fake_probability()).collect();
    let both = labels.contains(&0) && labels.contains(&1);
    let masks: Vec<_> = predictions.iter().map(|p| p.mask.clone()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = MetricsReport {
        acc: metrics::accuracy(&classes, &labels)?,
        auc: if both { Some(metrics::auc(&scores, &labels)?) } else { None },
        miou: metrics::mean_miou(&masks, &gts)?,
        n: samples.len(),
    };
    Ok(Evaluation { report, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::datagen::{generate, DatasetSpec};

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::new(&[1], vec![v]).unwrap());
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> Gradients {
        // loss = g·θ has gradient g
        let mut t = Tape::new(store);
        let th = t.param(id);
        let loss = t.scale(th, g);
        let loss = t.sum(loss);
        t.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let g = grads_for(&s, id, 0.0);
        let mut opt = Adam::new(&s);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        opt.step(&mut s, &g, 0.1, &cfg, &[]).unwrap();
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_hand_value() {
        let (mut s, id) = scalar_store(1.0);
        let g = grads_for(&s, id, 1.0);
        let mut opt = Adam::new(&s);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        opt.step(&mut s, &g, 0.1, &cfg, &[]).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let m_hat = (1.0 - 0.9) / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) / (1.0 - 0.999);
        let want = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert_eq!(s.get(id).data()[0], want);
        assert!((want - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_in_isolation() {
        let (mut s, id) = scalar_store(2.0);
        let g = grads_for(&s, id, 0.0);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &g, 0.1, &AdamConfig::default(), &[]).unwrap();
        assert_eq!(s.get(id).data()[0], 2.0 - 0.1 * (1e-3 * 2.0));
    }

    #[test]
    fn coupled_decay_goes_through_the_moments() {
        let (mut s, id) = scalar_store(2.0);
        let g = grads_for(&s, id, 0.0);
        let mut opt = Adam::new(&s);
        let cfg = AdamConfig {
            coupled_wd: true,
            ..AdamConfig::default()
        };
        opt.step(&mut s, &g, 0.1, &cfg, &[]).unwrap();
        // normalized step has magnitude ≈ lr regardless of the decay size
        assert!((s.get(id).data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_changes_nothing_and_clamp_holds() {
        let (mut s, id) = scalar_store(0.005);
        let g = grads_for(&s, id, 3.0);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &g, 0.0, &AdamConfig::default(), &[]).unwrap();
        assert_eq!(s.get(id).data(), &[0.005]);
        opt.step(&mut s, &g, 0.0, &AdamConfig::default(), &[(id, 0.01)]).unwrap();
        assert_eq!(s.get(id).data(), &[0.01]);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (mut s, _) = scalar_store(1.0);
        let other = s.add("unused", Tensor::zeros(&[2]));
        let g = grads_for(&s, ParamId(0), 1.0);
        let mut opt = Adam::new(&s);
        let err = opt.step(&mut s, &g, 0.1, &AdamConfig::default(), &[]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(s.get(other).data(), &[0.0, 0.0]);
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::default();
        assert_eq!(lr_at(0, &s), 1e-4);
        assert_eq!(lr_at(14, &s), 1e-4);
        assert_eq!(lr_at(15, &s), 1e-5);
        assert_eq!(lr_at(30, &s), 1e-6);
    }

    #[test]
    fn batches_mix_classes_and_cover_everything() {
        let mut spec = DatasetSpec::new(0, 32, 16);
        spec.mix = [1, 1, 1, 1];
        let samples = generate(&spec).unwrap();
        let batches = epoch_batches(&samples, 8, 3, 0);
        assert_eq!(batches.len(), 4);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        for b in &batches {
            let fakes = b.iter().filter(|&&i| samples[i].class() == 1).count();
            assert!(fakes > 0 && fakes < b.len());
        }
        assert_eq!(batches, epoch_batches(&samples, 8, 3, 0));
        assert_ne!(batches, epoch_batches(&samples, 8, 3, 1));
    }

    fn tiny() -> (ModelConfig, Vec<ImageSample>) {
        let cfg = ModelConfig {
            image_size: 16,
            h: 4,
            w: 4,
            c: 16,
            base_channels: 4,
            d: 16,
            n: 12,
            image_blocks: 1,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ..ModelConfig::desk()
        };
        let mut spec = DatasetSpec::new(1, 8, 16);
        spec.mix = [1, 1, 1, 1];
        (cfg, generate(&spec).unwrap())
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let (cfg, samples) = tiny();
        let mut model = Model::new(&cfg, 0).unwrap();
        let before = model.params.clone();
        let mut opt = Adam::new(&model.params);
        let mut state = TrainState::default();
        let mut log = Vec::new();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let s = train(&samples, &mut model, &mut opt, &mut state, &tc, &mut log, &mut |_, _, _| Ok(())).unwrap();
        assert!(s.losses.is_empty() && log.is_empty());
        assert_eq!(model.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>(),
                   before.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn replay_gives_identical_logs_and_rows_sum() {
        let (cfg, samples) = tiny();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            schedule: Schedule {
                base_lr: 1e-3,
                ..Schedule::default()
            },
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::new(&cfg, 0).unwrap();
            let mut opt = Adam::new(&model.params);
            let mut state = TrainState::default();
            let mut log = Vec::new();
            let s = train(&samples, &mut model, &mut opt, &mut state, &tc, &mut log, &mut |_, _, _| Ok(())).unwrap();
            (String::from_utf8(log).unwrap(), s, state)
        };
        let (a, sa, state) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert_eq!(state.step, 4);
        assert_eq!(a.lines().count(), 4);
        for l in &sa.losses {
            assert_eq!(l.total, l.sum_of_parts());
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (cfg, samples) = tiny();
        let model = Model::new(&cfg, 2).unwrap();
        let a = evaluate(&samples, &model).unwrap();
        assert_eq!(a, evaluate(&samples, &model).unwrap());
        assert_eq!(a.report.n, 8);
        assert!(a.report.auc.is_some());
    }
}
