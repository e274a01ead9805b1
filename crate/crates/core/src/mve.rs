//! Multi-domain vision encoder: a UNet encoder for local features, a
//! transformer encoder for the global class embedding, and a second pass of
//! the very same weights over the residual image.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::{self, normal_tensor, Attention, Conv2d, FeedForward, LayerNorm, Linear, PositionTable, WEIGHT_STD};

/// One downsampling stage: two 3×3 convolutions then a stride-2 convolution.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub down: Conv2d,
}

#[derive(Clone, Debug)]
pub struct UNetEncoder {
    pub stages: Vec<EncoderStage>,
    pub in_channels: usize,
}

impl UNetEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let s = cfg.stages();
        let mut stages = Vec::with_capacity(s);
        let mut c_in = 3;
        for k in 0..s {
            let ch = cfg.stage_channels(k);
            let next = if k + 1 == s { cfg.c } else { cfg.stage_channels(k + 1) };
            let name = format!("unet_enc.{k}");
            stages.push(EncoderStage {
                conv_a: Conv2d::same3(store, &format!("{name}.conv_a"), c_in, ch, rng),
                conv_b: Conv2d::same3(store, &format!("{name}.conv_b"), ch, ch, rng),
                down: Conv2d::new(store, &format!("{name}.down"), ch, next, 3, 2, 1, rng),
            });
            c_in = next;
        }
        Self { stages, in_channels: 3 }
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.conv_a.param_count() + s.conv_b.param_count() + s.down.param_count())
            .sum()
    }
}

/// Local features plus the pre-downsample activations of every stage.
#[derive(Clone, Debug)]
pub struct UNetFeatures {
    pub i_loc: Var,
    pub skips: Vec<Var>,
}

pub fn unet_encode(t: &mut Tape<'_>, image: Var, p: &UNetEncoder) -> Result<UNetFeatures> {
    let (c, h, w) = t.value(image).dims3()?;
    if c != p.in_channels {
        return Err(dim_err!("UNet encoder expects {} channels, got {c}", p.in_channels));
    }
    let factor = 1usize << p.stages.len();
    if h % factor != 0 || w % factor != 0 {
        return Err(dim_err!("{h}×{w} image not divisible by 2^{}", p.stages.len()));
    }
    let mut x = image;
    let mut skips = Vec::with_capacity(p.stages.len());
    let last = p.stages.len().saturating_sub(1);
    for (k, stage) in p.stages.iter().enumerate() {
        let a = stage.conv_a.forward(t, x)?;
        let a = t.gelu(a);
        let b = stage.conv_b.forward(t, a)?;
        let b = t.gelu(b);
        skips.push(b);
        let down = stage.down.forward(t, b)?;
        x = if k == last { down } else { t.gelu(down) };
    }
    Ok(UNetFeatures { i_loc: x, skips })
}

/// Pre-norm block used by the image transformer: LN → MHA → residual, then
/// FF → residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln: LayerNorm,
    pub attn: Attention,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ln.param_count() + self.attn.param_count() + self.ff.param_count()
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let normed = self.ln.forward(t, x)?;
        let att = nn::mha(t, normed, &self.attn, false, None)?;
        let x = t.add(att, x)?;
        let f = nn::ff(t, x, &self.ff)?;
        t.add(f, x)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub patch_proj: Linear,
    pub class_token: ParamId,
    pub positions: PositionTable,
    pub blocks: Vec<TransformerBlock>,
    pub c: usize,
    pub tokens: usize,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let patch_proj = Linear::new(store, "te.patch_proj", cfg.c, cfg.d, true, rng);
        let class_token = store.add("te.class_token", normal_tensor(&[1, cfg.d], WEIGHT_STD, rng));
        let positions = PositionTable::new(store, "te.positions", cfg.image_tokens(), cfg.d, rng);
        let blocks = (0..cfg.image_blocks)
            .map(|j| TransformerBlock::new(store, &format!("te.block{j}"), cfg.d, cfg.heads, rng))
            .collect();
        Self {
            patch_proj,
            class_token,
            positions,
            blocks,
            c: cfg.c,
            tokens: cfg.image_tokens(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.patch_proj.param_count()
            + self.patch_proj.d_out
            + self.positions.param_count()
            + self.blocks.iter().map(TransformerBlock::param_count).sum::<usize>()
    }
}

/// Flattens c×h×w features into hw tokens, projects them to width d,
/// prepends the class token at index 0 and adds the position table.
pub fn tokenize_features(t: &mut Tape<'_>, i_loc: Var, p: &TransformerEncoder) -> Result<Var> {
    let (c, h, w) = t.value(i_loc).dims3()?;
    if c != p.c || h * w + 1 != p.tokens {
        return Err(dim_err!(
            "features {c}×{h}×{w} do not match encoder ({} channels, {} tokens)",
            p.c,
            p.tokens
        ));
    }
    let flat = t.reshape(i_loc, &[c, h * w])?;
    let rows = t.transpose(flat)?;
    let projected = nn::linear(t, rows, &p.patch_proj)?;
    let cls = t.param(p.class_token);
    let tokens = t.concat0(&[cls, projected])?;
    p.positions.add_to(t, tokens)
}

/// Runs the blocks in order and returns the class-position row (1×d).
pub fn transformer_encode(t: &mut Tape<'_>, tokens: Var, blocks: &[TransformerBlock]) -> Result<Var> {
    let mut x = tokens;
    for b in blocks {
        x = b.forward(t, x)?;
    }
    t.slice_rows(x, 0, 1)
}

/// `|I_pre − I|`, differentiable in both arguments with `sign(0) = 0`.
pub fn residual_image(t: &mut Tape<'_>, image: Var, predicted: Var) -> Result<Var> {
    let diff = t.sub(predicted, image)?;
    t.abs(diff)
}

/// Elementwise sum of the image and residual class embeddings.
pub fn fuse(t: &mut Tape<'_>, i_g: Var, i_g_r: Var) -> Result<Var> {
    t.add(i_g_r, i_g)
}

/// Image encoder weights; the residual encoder is the same object.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub unet: UNetEncoder,
    pub te: TransformerEncoder,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            unet: UNetEncoder::new(store, cfg, rng),
            te: TransformerEncoder::new(store, cfg, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.unet.param_count() + self.te.param_count()
    }

    pub fn encode(&self, t: &mut Tape<'_>, image: Var) -> Result<EncodedImage> {
        let features = unet_encode(t, image, &self.unet)?;
        let tokens = tokenize_features(t, features.i_loc, &self.te)?;
        let class_embedding = transformer_encode(t, tokens, &self.te.blocks)?;
        Ok(EncodedImage {
            features,
            tokens,
            class_embedding,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncodedImage {
    pub features: UNetFeatures,
    pub tokens: Var,
    pub class_embedding: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MveOutput {
    pub i_g: Var,
    pub i_g_r: Var,
    pub i_v: Var,
}

/// Encodes `image` and `residual` with the same weights and fuses the two
/// class embeddings.
pub fn mve_forward(t: &mut Tape<'_>, image: Var, residual: Var, p: &ImageEncoder) -> Result<MveOutput> {
    let img = p.encode(t, image)?;
    mve_forward_encoded(t, &img, residual, p)
}

/// Variant of [`mve_forward`] that reuses an already encoded image pass.
pub fn mve_forward_encoded(
    t: &mut Tape<'_>,
    image: &EncodedImage,
    residual: Var,
    p: &ImageEncoder,
) -> Result<MveOutput> {
    if t.shape(image.features.skips[0]).get(1..) != t.shape(residual).get(1..) {
        // skips[0] carries the input resolution
        return Err(dim_err!(
            "residual image {:?} does not match the encoded image",
            t.shape(residual)
        ));
    }
    let res = p.encode(t, residual)?;
    let i_v = fuse(t, image.class_embedding, res.class_embedding)?;
    Ok(MveOutput {
        i_g: image.class_embedding,
        i_g_r: res.class_embedding,
        i_v,
    })
}
