//! Vision decoder: a single UNet decoder trunk feeding an appearance head and
//! a localization-mask head, plus ground-truth mask construction.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::Conv2d;
use crate::tensor::Tensor;

/// One upsampling level: nearest 2× upsample and 3×3 conv, optional skip
/// concatenation, then two 3×3 convs.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: Conv2d,
    pub merge: Conv2d,
    pub refine: Conv2d,
}

#[derive(Clone, Debug)]
pub struct UNetDecoder {
    /// Ordered from the coarsest level to full resolution.
    pub stages: Vec<DecoderStage>,
    pub appearance_head: Conv2d,
    pub mask_head: Conv2d,
    pub use_skips: bool,
}

impl UNetDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let s = cfg.stages();
        let mut stages = Vec::with_capacity(s);
        let mut c_in = cfg.c;
        for k in (0..s).rev() {
            let ch = cfg.stage_channels(k);
            let name = format!("unet_dec.{k}");
            let merge_in = if cfg.use_skips { 2 * ch } else { ch };
            stages.push(DecoderStage {
                up: Conv2d::same3(store, &format!("{name}.up"), c_in, ch, rng),
                merge: Conv2d::same3(store, &format!("{name}.merge"), merge_in, ch, rng),
                refine: Conv2d::same3(store, &format!("{name}.refine"), ch, ch, rng),
            });
            c_in = ch;
        }
        Self {
            stages,
            appearance_head: Conv2d::same3(store, "appearance_head", c_in, 3, rng),
            mask_head: Conv2d::same3(store, "mask_head", c_in, cfg.f, rng),
            use_skips: cfg.use_skips,
        }
    }

    pub fn trunk_param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.up.param_count() + s.merge.param_count() + s.refine.param_count())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.appearance_head.param_count() + self.mask_head.param_count()
    }
}

/// Shared trunk: from `i_loc` (c×h×w) back to full resolution.
pub fn decode_trunk(t: &mut Tape<'_>, i_loc: Var, skips: &[Var], p: &UNetDecoder) -> Result<Var> {
    if p.use_skips && skips.len() != p.stages.len() {
        return Err(dim_err!("{} skips for {} decoder stages", skips.len(), p.stages.len()));
    }
    let mut x = i_loc;
    for (level, stage) in p.stages.iter().enumerate() {
        let up = t.upsample2x(x)?;
        let up = stage.up.forward(t, up)?;
        let up = t.gelu(up);
        let merged_in = if p.use_skips {
            let skip = skips[skips.len() - 1 - level];
            if t.shape(skip) != t.shape(up) {
                return Err(dim_err!(
                    "skip {:?} does not match decoder level {:?}",
                    t.shape(skip),
                    t.shape(up)
                ));
            }
            t.concat0(&[up, skip])?
        } else {
            up
        };
        let m = stage.merge.forward(t, merged_in)?;
        let m = t.gelu(m);
        let r = stage.refine.forward(t, m)?;
        x = t.gelu(r);
    }
    Ok(x)
}

/// Appearance image in (0, 1) through a sigmoid.
pub fn appearance_head(t: &mut Tape<'_>, trunk: Var, p: &UNetDecoder) -> Result<Var> {
    let a = p.appearance_head.forward(t, trunk)?;
    Ok(t.sigmoid(a))
}

/// Raw per-class mask logits (f×H×W).
pub fn mask_head(t: &mut Tape<'_>, trunk: Var, p: &UNetDecoder) -> Result<Var> {
    p.mask_head.forward(t, trunk)
}

/// Predicted appearance image and mask logits from one trunk pass.
pub fn decode(t: &mut Tape<'_>, i_loc: Var, skips: &[Var], p: &UNetDecoder) -> Result<(Var, Var)> {
    let trunk = decode_trunk(t, i_loc, skips, p)?;
    let i_pre = appearance_head(t, trunk, p)?;
    let m_pre = mask_head(t, trunk, p)?;
    Ok((i_pre, m_pre))
}

/// Binary H×W mask with entries in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Class id per pixel as `usize`, for loss targets.
    pub fn classes(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    /// Channel argmax of f×H×W logits; ties resolve to the lower class.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (f, h, w) = logits.dims3()?;
        let plane = h * w;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..f {
                    if logits.data()[c * plane + p] > logits.data()[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Binary PGM (P5), class 1 as 255.
    pub fn write_pgm(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
        out.write_all(&bytes)
    }
}

/// Thresholds the channel-mean absolute difference between a manipulated
/// image and its pristine source. Both images are 3×H×W in [0, 1].
pub fn gt_mask(fake: &Tensor, source: &Tensor, threshold: f64) -> Result<BinaryMask> {
    let (c, h, w) = fake.dims3()?;
    if fake.shape() != source.shape() {
        return Err(dim_err!(
            "mask pair shapes {:?} and {:?} differ",
            fake.shape(),
            source.shape()
        ));
    }
    let plane = h * w;
    let data = (0..plane)
        .map(|p| {
            let gray = (0..c)
                .map(|ch| (fake.data()[ch * plane + p] - source.data()[ch * plane + p]).abs())
                .sum::<f64>()
                / c as f64;
            u8::from(gray > threshold)
        })
        .collect();
    Ok(BinaryMask {
        height: h,
        width: w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mve::{unet_encode, UNetEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = UNetEncoder::new(&mut store, &cfg, &mut rng);
        let dec = UNetDecoder::new(&mut store, &cfg, &mut rng);
        let mut t = Tape::inference(&store);
        let img = t.constant(random(&[3, 32, 32], 1));
        let f = unet_encode(&mut t, img, &enc).unwrap();
        let (i_pre, m_pre) = decode(&mut t, f.i_loc, &f.skips, &dec).unwrap();
        assert_eq!(t.shape(i_pre), &[3, 32, 32]);
        assert_eq!(t.shape(m_pre), &[2, 32, 32]);
        assert!(t.value(i_pre).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_weights_give_half_and_zero_logits() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = UNetEncoder::new(&mut store, &cfg, &mut rng);
        let dec = UNetDecoder::new(&mut store, &cfg, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut t = Tape::inference(&store);
        let img = t.constant(random(&[3, 32, 32], 3));
        let f = unet_encode(&mut t, img, &enc).unwrap();
        let (i_pre, m_pre) = decode(&mut t, f.i_loc, &f.skips, &dec).unwrap();
        assert!(t.value(i_pre).data().iter().all(|&v| v == 0.5));
        assert!(t.value(m_pre).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_mismatch_is_a_dimension_error() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let dec = UNetDecoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut t = Tape::inference(&store);
        let loc = t.constant(Tensor::zeros(&[64, 4, 4]));
        let bad: Vec<Var> = (0..3).map(|_| t.constant(Tensor::zeros(&[5, 8, 8]))).collect();
        assert!(matches!(decode(&mut t, loc, &bad, &dec), Err(crate::Error::Dimension(_))));
        assert!(decode(&mut t, loc, &bad[..1], &dec).is_err());
    }

    #[test]
    fn without_skips_decoder_ignores_them() {
        let cfg = ModelConfig {
            use_skips: false,
            ..ModelConfig::desk()
        };
        let mut store = ParamStore::new();
        let dec = UNetDecoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mut t = Tape::inference(&store);
        let loc = t.constant(random(&[64, 4, 4], 6));
        let (i_pre, _) = decode(&mut t, loc, &[], &dec).unwrap();
        assert_eq!(t.shape(i_pre), &[3, 32, 32]);
    }

    #[test]
    fn gt_mask_examples() {
        let src = random(&[3, 4, 4], 7);
        assert_eq!(gt_mask(&src, &src, 0.1).unwrap().count_ones(), 0);

        let mut fake = src.clone();
        // pixel (1, 2) of channel 0 moves by 0.6: grayscale 0.2 > 0.1
        let v = &mut fake.data_mut()[4 + 2];
        *v = if *v > 0.5 { *v - 0.6 } else { *v + 0.6 };
        let m = gt_mask(&fake, &src, 0.1).unwrap();
        assert_eq!(m.count_ones(), 1);
        assert_eq!(m.data[4 + 2], 1);
        assert!(gt_mask(&fake, &random(&[3, 4, 5], 8), 0.1).is_err());
    }

    #[test]
    fn gt_mask_is_monotone_in_threshold() {
        let (a, b) = (random(&[3, 16, 16], 9), random(&[3, 16, 16], 10));
        let masks: Vec<_> = [0.05, 0.10, 0.15, 0.3]
            .iter()
            .map(|&th| gt_mask(&a, &b, th).unwrap())
            .collect();
        for pair in masks.windows(2) {
            for (lo, hi) in pair[0].data.iter().zip(&pair[1].data) {
                assert!(hi <= lo);
            }
        }
    }

    #[test]
    fn pgm_export() {
        let logits = Tensor::new(&[2, 1, 3], vec![0.0, 1.0, 0.5, 0.0, 0.0, 2.0]).unwrap();
        let m = BinaryMask::from_logits(&logits).unwrap();
        assert_eq!(m.data, vec![0, 0, 1]);
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        assert_eq!(buf, b"P5\n3 1\n255\n\x00\x00\xff");
    }
}
