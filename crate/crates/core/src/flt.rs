//! Fine-grained language transformer: an encoder producing the prompt
//! embedding and a teacher-forced decoder reconstructing the prompt, both
//! with vision injection in every block.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::{self, normal_tensor, Attention, FeedForward, LayerNorm, PositionTable, WEIGHT_STD};
use crate::text::PAD;
use crate::vim::{vim_forward, Placement, VimParams};

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln: LayerNorm,
    pub attn: Attention,
    pub vim: VimParams,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub masked_attn: Attention,
    pub cross_attn: Attention,
    pub ff: FeedForward,
    pub vim: VimParams,
}

#[derive(Clone, Debug)]
pub struct LanguageBlocks {
    /// Word embedding table `W_voc` (s×d), shared with the output projection.
    pub w_voc: ParamId,
    pub p_e: PositionTable,
    pub p_d: PositionTable,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub enc_placement: Placement,
    pub dec_placement: Placement,
    pub n: usize,
    pub s: usize,
    pub d: usize,
}

impl LanguageBlocks {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, r) = (cfg.d, cfg.heads);
        let w_voc = store.add("flt.w_voc", normal_tensor(&[cfg.s, d], WEIGHT_STD, rng));
        let p_e = PositionTable::new(store, "flt.p_e", cfg.n, d, rng);
        let p_d = PositionTable::new(store, "flt.p_d", cfg.n, d, rng);
        let encoder = (0..cfg.encoder_blocks)
            .map(|j| {
                let name = format!("flt.enc{j}");
                EncoderBlock {
                    ln: LayerNorm::new(store, &format!("{name}.ln"), d),
                    attn: Attention::new(store, &format!("{name}.attn"), d, r, rng),
                    vim: VimParams::new(store, &format!("{name}.vim"), d, r, rng),
                    ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
                }
            })
            .collect();
        let decoder = (0..cfg.decoder_blocks)
            .map(|j| {
                let name = format!("flt.dec{j}");
                DecoderBlock {
                    masked_attn: Attention::new(store, &format!("{name}.mmha"), d, r, rng),
                    cross_attn: Attention::new(store, &format!("{name}.cross"), d, r, rng),
                    ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
                    vim: VimParams::new(store, &format!("{name}.vim"), d, r, rng),
                }
            })
            .collect();
        Self {
            w_voc,
            p_e,
            p_d,
            encoder,
            decoder,
            enc_placement: cfg.vim_encoder,
            dec_placement: cfg.vim_decoder,
            n: cfg.n,
            s: cfg.s,
            d,
        }
    }

    pub fn vims(&self) -> impl Iterator<Item = &VimParams> {
        self.encoder.iter().map(|b| &b.vim).chain(self.decoder.iter().map(|b| &b.vim))
    }

    pub fn param_count(&self) -> usize {
        let enc: usize = self
            .encoder
            .iter()
            .map(|b| b.ln.param_count() + b.attn.param_count() + b.vim.param_count() + b.ff.param_count())
            .sum();
        let dec: usize = self
            .decoder
            .iter()
            .map(|b| {
                b.masked_attn.param_count() + b.cross_attn.param_count() + b.ff.param_count() + b.vim.param_count()
            })
            .sum();
        self.s * self.d + self.p_e.param_count() + self.p_d.param_count() + enc + dec
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() != self.n {
            return Err(dim_err!("prompt has {} tokens, expected {}", ids.len(), self.n));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedText {
    pub t_low: Var,
    pub t_hig: Var,
    /// Final state at the last non-PAD position (1×d).
    pub t_l: Var,
}

/// Index of the last non-PAD token, or 0 for an all-PAD sequence.
pub fn last_token_index(ids: &[usize]) -> usize {
    ids.iter().rposition(|&i| i != PAD).unwrap_or(0)
}

pub fn encoder_block(t: &mut Tape<'_>, x: Var, i_v: Var, b: &EncoderBlock, place: Placement) -> Result<Var> {
    let mut x = x;
    if place == Placement::Before {
        x = vim_forward(t, x, i_v, &b.vim)?;
    }
    let normed = b.ln.forward(t, x)?;
    let att = nn::mha(t, normed, &b.attn, false, None)?;
    x = t.add(att, x)?;
    if place == Placement::Between {
        x = vim_forward(t, x, i_v, &b.vim)?;
    }
    let f = nn::ff(t, x, &b.ff)?;
    x = t.add(f, x)?;
    if place == Placement::After {
        x = vim_forward(t, x, i_v, &b.vim)?;
    }
    Ok(x)
}

pub fn decoder_block(
    t: &mut Tape<'_>,
    x: Var,
    t_hig: Var,
    i_v: Var,
    b: &DecoderBlock,
    place: Placement,
) -> Result<Var> {
    let mut x = x;
    if place == Placement::Before {
        x = vim_forward(t, x, i_v, &b.vim)?;
    }
    let masked = nn::mha(t, x, &b.masked_attn, true, None)?;
    x = t.add(masked, x)?;
    let cross = nn::mha(t, x, &b.cross_attn, false, Some(t_hig))?;
    x = t.add(cross, x)?;
    if place == Placement::Between {
        x = vim_forward(t, x, i_v, &b.vim)?;
    }
    let f = nn::ff(t, x, &b.ff)?;
    x = t.add(f, x)?;
    if place == Placement::After {
        x = vim_forward(t, x, i_v, &b.vim)?;
    }
    Ok(x)
}

/// Embeds the prompt, runs the encoder blocks with `i_v` injected, and
/// pools the last non-PAD row.
pub fn language_encode(t: &mut Tape<'_>, ids: &[usize], i_v: Var, p: &LanguageBlocks) -> Result<EncodedText> {
    p.check_ids(ids)?;
    let emb = nn::embed(t, ids, p.w_voc)?;
    let t_low = p.p_e.add_to(t, emb)?;
    let mut x = t_low;
    for b in &p.encoder {
        x = encoder_block(t, x, i_v, b, p.enc_placement)?;
    }
    let t_l = t.slice_rows(x, last_token_index(ids), 1)?;
    Ok(EncodedText { t_low, t_hig: x, t_l })
}

/// Teacher-forced decoder pass over the BOS-shifted prompt.
pub fn language_decode(
    t: &mut Tape<'_>,
    shifted: &[usize],
    t_hig: Var,
    i_v: Var,
    p: &LanguageBlocks,
) -> Result<Var> {
    p.check_ids(shifted)?;
    let emb = nn::embed(t, shifted, p.w_voc)?;
    let mut x = p.p_d.add_to(t, emb)?;
    for b in &p.decoder {
        x = decoder_block(t, x, t_hig, i_v, b, p.dec_placement)?;
    }
    Ok(x)
}

/// Vocabulary logits `T_rec · W_vocᵀ` (n×s).
pub fn project_vocab(t: &mut Tape<'_>, t_rec: Var, p: &LanguageBlocks) -> Result<Var> {
    let w = t.param(p.w_voc);
    let wt = t.transpose(w)?;
    t.matmul(t_rec, wt)
}
