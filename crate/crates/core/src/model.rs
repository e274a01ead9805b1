//! Full model: vision path (tied image/residual encoder, shared decoder
//! trunk, detection head) plus the training-only language side (language
//! transformer, adapter, contrastive temperature).
//!
//! The two sides live in separate structs so that inference takes only the
//! vision half and cannot reach any language weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Scope, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::flt::{self, LanguageBlocks};
use crate::mve::{self, ImageEncoder, MveOutput};
use crate::nn::{self, Linear};
use crate::tensor::{self, Tensor};
use crate::text::{shift_for_decoder, Vocabulary};
use crate::vd::{self, BinaryMask, UNetDecoder};

/// Weights used at inference time.
#[derive(Clone, Debug)]
pub struct VisionPart {
    pub encoder: ImageEncoder,
    pub decoder: UNetDecoder,
    pub head: Linear,
    pub detach_residual: bool,
    pub image_size: usize,
}

/// Weights used only while training.
#[derive(Clone, Debug)]
pub struct LanguagePart {
    pub blocks: LanguageBlocks,
    pub adapter: Linear,
    pub tau: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub vision: VisionPart,
    pub language: LanguagePart,
    pub vocab: Vocabulary,
}

impl Model {
    /// Fresh model with weights drawn from `seed`. All weights are rounded to
    /// single precision so that checkpoints reproduce them exactly.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = ImageEncoder::new(&mut params, cfg, &mut rng);
        let decoder = UNetDecoder::new(&mut params, cfg, &mut rng);
        let head = Linear::new(&mut params, "head", cfg.d, cfg.f, true, &mut rng);
        let blocks = LanguageBlocks::new(&mut params, cfg, &mut rng);
        let adapter = Linear::new(&mut params, "adapter", cfg.d, cfg.d, true, &mut rng);
        let tau = params.add("tau", Tensor::new(&[1], vec![cfg.tau_init])?);
        params.round_to_f32();
        Ok(Self {
            cfg: cfg.clone(),
            params,
            vision: VisionPart {
                encoder,
                decoder,
                head,
                detach_residual: cfg.detach_residual,
                image_size: cfg.image_size,
            },
            language: LanguagePart { blocks, adapter, tau },
            vocab: Vocabulary::build(cfg.s)?,
        })
    }

    /// Parameter count by walking the module structure.
    pub fn structural_param_count(&self) -> usize {
        self.vision.encoder.param_count()
            + self.vision.decoder.param_count()
            + self.vision.head.param_count()
            + self.language.blocks.param_count()
            + self.language.adapter.param_count()
            + 1
    }
}

/// Closed-form parameter count of a configuration: one UNet encoder, one
/// transformer encoder (both shared by the image and residual passes), one
/// decoder trunk with two heads, the language transformer with one
/// injection module per block, the adapter, the head and the temperature.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let (d, c, f, n, s) = (cfg.d, cfg.c, cfg.f, cfg.n, cfg.s);
    let conv3 = |ci: usize, co: usize| 9 * ci * co + co;
    let stages = cfg.stages();
    let ch = |k: usize| cfg.stage_channels(k);

    let mut unet_enc = 0;
    for k in 0..stages {
        let c_in = if k == 0 { 3 } else { ch(k) };
        let out = if k + 1 == stages { c } else { ch(k + 1) };
        unet_enc += conv3(c_in, ch(k)) + conv3(ch(k), ch(k)) + conv3(ch(k), out);
    }
    let ff = 8 * d * d + 5 * d;
    let attn = 4 * d * d;
    let vim = 4 * d * d;
    let ln = 2 * d;
    let te = (c * d + d) + d + (cfg.h * cfg.w + 1) * d + cfg.image_blocks * (ln + attn + ff);

    let mut trunk = 0;
    for k in (0..stages).rev() {
        let c_in = if k + 1 == stages { c } else { ch(k + 1) };
        let merge_in = if cfg.use_skips { 2 * ch(k) } else { ch(k) };
        trunk += conv3(c_in, ch(k)) + conv3(merge_in, ch(k)) + conv3(ch(k), ch(k));
    }
    let heads = conv3(ch(0), 3) + conv3(ch(0), f);

    let flt = s * d
        + 2 * n * d
        + cfg.encoder_blocks * (ln + attn + vim + ff)
        + cfg.decoder_blocks * (2 * attn + ff + vim);
    let adapter = d * d + d;
    let head = d * f + f;
    unet_enc + te + trunk + heads + flt + adapter + head + 1
}

/// Parameters held by injection modules.
pub fn vim_param_count(cfg: &ModelConfig) -> usize {
    (cfg.encoder_blocks + cfg.decoder_blocks) * 4 * cfg.d * cfg.d
}

/// Output shapes implied by a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeAudit {
    pub y_pre: Vec<usize>,
    pub m_pre: Vec<usize>,
    pub i_pre: Vec<usize>,
    pub i_loc: Vec<usize>,
    pub image_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
    pub t_rec_logits: Vec<usize>,
}

pub fn shape_audit(cfg: &ModelConfig) -> Result<ShapeAudit> {
    cfg.validate()?;
    let hw = cfg.image_size;
    Ok(ShapeAudit {
        y_pre: vec![1, cfg.f],
        m_pre: vec![cfg.f, hw, hw],
        i_pre: vec![3, hw, hw],
        i_loc: vec![cfg.c, cfg.h, cfg.w],
        image_tokens: vec![cfg.image_tokens(), cfg.d],
        prompt_tokens: vec![cfg.n, cfg.d],
        t_rec_logits: vec![cfg.n, cfg.s],
    })
}

/// Vision-path outputs shared by training and inference.
#[derive(Clone, Copy, Debug)]
pub struct VisionOutputs {
    pub i_pre: Var,
    pub m_pre: Var,
    pub i_r: Var,
    pub mve: MveOutput,
    pub y_pre: Var,
    /// UNet output of the appearance image (c×h×w).
    pub i_loc: Var,
    /// Image tokens entering the transformer encoder.
    pub tokens: Var,
}

/// Appearance pass, reconstruction, residual pass, fusion and detection.
pub fn vision_forward(t: &mut Tape<'_>, image: Var, v: &VisionPart) -> Result<VisionOutputs> {
    let prev = t.set_scope(Scope::Vision);
    let enc = v.encoder.encode(t, image)?;
    let (i_pre, m_pre) = vd::decode(t, enc.features.i_loc, &enc.features.skips, &v.decoder)?;
    let recon = if v.detach_residual { t.detach(i_pre) } else { i_pre };
    let i_r = mve::residual_image(t, image, recon)?;
    let out = mve::mve_forward_encoded(t, &enc, i_r, &v.encoder)?;
    let y_pre = nn::linear(t, out.i_v, &v.head)?;
    t.set_scope(prev);
    Ok(VisionOutputs {
        i_pre,
        m_pre,
        i_r,
        mve: out,
        y_pre,
        i_loc: enc.features.i_loc,
        tokens: enc.tokens,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOutputs {
    pub vision: VisionOutputs,
    pub t_l: Var,
    pub t_l_pre: Var,
    pub t_rec_logits: Var,
}

impl TrainOutputs {
    pub fn y_pre(&self) -> Var {
        self.vision.y_pre
    }
}

/// Training forward pass for one sample.
pub fn forward_train(t: &mut Tape<'_>, image: &Tensor, prompt_ids: &[usize], model: &Model) -> Result<TrainOutputs> {
    check_image(image, model.cfg.image_size)?;
    let img = t.constant(image.clone());
    let vision = vision_forward(t, img, &model.vision)?;
    let lang = &model.language;

    let prev = t.set_scope(Scope::Language);
    let enc = flt::language_encode(t, prompt_ids, vision.mve.i_v, &lang.blocks)?;
    let shifted = shift_for_decoder(prompt_ids);
    let rec = flt::language_decode(t, &shifted, enc.t_hig, vision.mve.i_v, &lang.blocks)?;
    let t_rec_logits = flt::project_vocab(t, rec, &lang.blocks)?;
    t.set_scope(Scope::Alignment);
    let t_l_pre = nn::linear(t, vision.mve.i_v, &lang.adapter)?;
    t.set_scope(prev);
    Ok(TrainOutputs {
        vision,
        t_l: enc.t_l,
        t_l_pre,
        t_rec_logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Raw detection logits (length f).
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// 0 real, 1 fake; ties go to class 0.
    pub class: usize,
    pub mask: BinaryMask,
}

impl Prediction {
    pub fn fake_probability(&self) -> f64 {
        self.probabilities[1]
    }
}

/// Inference for one image. Only vision weights are reachable.
pub fn forward_infer(t: &mut Tape<'_>, image: &Tensor, v: &VisionPart) -> Result<(Var, Var)> {
    check_image(image, v.image_size)?;
    let img = t.constant(image.clone());
    let out = vision_forward(t, img, v)?;
    Ok((out.y_pre, out.m_pre))
}

/// Runs [`forward_infer`] on a fresh tape and decodes the prediction.
pub fn predict(params: &ParamStore, image: &Tensor, v: &VisionPart) -> Result<Prediction> {
    let mut t = Tape::inference(params);
    let (y, m) = forward_infer(&mut t, image, v)?;
    let logits = t.value(y).clone();
    let probs = tensor::softmax(&logits, 1, 1.0)?;
    let p = probs.data();
    let class = (1..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best });
    Ok(Prediction {
        logits: logits.into_data(),
        probabilities: probs.into_data(),
        class,
        mask: BinaryMask::from_logits(t.value(m))?,
    })
}

/// Independent per-image predictions.
pub fn predict_batch(params: &ParamStore, images: &[Tensor], v: &VisionPart) -> Result<Vec<Prediction>> {
    images.iter().map(|img| predict(params, img, v)).collect()
}

fn check_image(image: &Tensor, size: usize) -> Result<()> {
    if image.shape() != [3, size, size] {
        return Err(dim_err!("expected a 3×{size}×{size} image, got {:?}", image.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{make_prompts, Labels};
    use rand::Rng;

    fn image(seed: u64, size: usize) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, size, size], (0..3 * size * size).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn prompt(model: &Model) -> Vec<usize> {
        make_prompts(&Labels::real(), &model.vocab, model.cfg.n, 4).unwrap().ids
    }

    #[test]
    fn desk_shape_audit_matches_forward() {
        let cfg = ModelConfig::desk();
        let model = Model::new(&cfg, 0).unwrap();
        let mut t = Tape::inference(&model.params);
        let out = forward_train(&mut t, &image(1, 32), &prompt(&model), &model).unwrap();
        let audit = shape_audit(&cfg).unwrap();
        assert_eq!(t.shape(out.y_pre()), audit.y_pre);
        assert_eq!(t.shape(out.vision.m_pre), audit.m_pre);
        assert_eq!(t.shape(out.vision.i_pre), audit.i_pre);
        assert_eq!(t.shape(out.vision.i_loc), audit.i_loc);
        assert_eq!(t.shape(out.vision.tokens), audit.image_tokens);
        assert_eq!(t.shape(out.t_rec_logits), audit.t_rec_logits);
        assert_eq!(audit.y_pre, [1, 2]);
        assert_eq!(audit.m_pre, [2, 32, 32]);
        assert_eq!(audit.t_rec_logits, [16, 256]);
        assert_eq!(t.shape(out.t_l), [1, 32]);
        assert_eq!(t.shape(out.t_l_pre), [1, 32]);
    }

    #[test]
    fn full_size_shape_audit() {
        let a = shape_audit(&ModelConfig::paper_scale()).unwrap();
        assert_eq!(a.y_pre, [1, 2]);
        assert_eq!(a.m_pre, [2, 224, 224]);
        assert_eq!(a.image_tokens, [197, 512]);
        assert_eq!(a.prompt_tokens, [308, 512]);
        assert_eq!(a.i_loc, [1024, 14, 14]);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig {
                use_skips: false,
                decoder_blocks: 1,
                ..ModelConfig::desk()
            },
        ] {
            let model = Model::new(&cfg, 3).unwrap();
            assert_eq!(model.params.entry_count(), analytic_param_count(&cfg));
            assert_eq!(model.structural_param_count(), analytic_param_count(&cfg));
            let vims: usize = model.language.blocks.vims().map(|v| v.param_count()).sum();
            assert_eq!(vims, vim_param_count(&cfg));
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let cfg = ModelConfig::desk();
        let run = || {
            let model = Model::new(&cfg, 7).unwrap();
            let mut t = Tape::inference(&model.params);
            let out = forward_train(&mut t, &image(2, 32), &prompt(&model), &model).unwrap();
            (t.value(out.y_pre()).clone(), t.value(out.t_rec_logits).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_matches_training_and_skips_language() {
        let cfg = ModelConfig::desk();
        let model = Model::new(&cfg, 4).unwrap();
        let img = image(5, 32);
        let mut t = Tape::new(&model.params);
        let out = forward_train(&mut t, &img, &prompt(&model), &model).unwrap();
        assert!(t.op_count(Scope::Language) > 0);
        let train_y = t.value(out.y_pre()).clone();

        let mut ti = Tape::inference(&model.params);
        let (y, _) = forward_infer(&mut ti, &img, &model.vision).unwrap();
        assert_eq!(ti.value(y), &train_y);
        assert_eq!(ti.op_count(Scope::Language), 0);
        assert_eq!(ti.op_count(Scope::Alignment), 0);
        assert!(ti.op_count(Scope::Vision) > 0);
    }

    #[test]
    fn zero_head_ties_to_real() {
        let cfg = ModelConfig::desk();
        let mut model = Model::new(&cfg, 5).unwrap();
        model.params.set(model.vision.head.weight, Tensor::zeros(&[32, 2])).unwrap();
        let p = predict(&model.params, &image(6, 32), &model.vision).unwrap();
        assert_eq!(p.logits, [0.0, 0.0]);
        assert_eq!(p.class, 0);
    }

    #[test]
    fn batch_predictions_equal_single_runs() {
        let cfg = ModelConfig::desk();
        let model = Model::new(&cfg, 6).unwrap();
        let imgs: Vec<Tensor> = (0..3).map(|i| image(10 + i, 32)).collect();
        let batch = predict_batch(&model.params, &imgs, &model.vision).unwrap();
        for (img, p) in imgs.iter().zip(&batch) {
            assert_eq!(&predict(&model.params, img, &model.vision).unwrap(), p);
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let model = Model::new(&ModelConfig::desk(), 0).unwrap();
        assert!(predict(&model.params, &image(0, 16), &model.vision).is_err());
    }
}
