//! Forgery taxonomy, word-level vocabulary, tokenizer and hierarchical
//! prompt construction.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOT: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eot>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeryType {
    Efs,
    Am,
    Fs,
}

impl ForgeryType {
    pub const ALL: [ForgeryType; 3] = [ForgeryType::Efs, ForgeryType::Am, ForgeryType::Fs];

    pub fn code(self) -> &'static str {
        match self {
            ForgeryType::Efs => "efs",
            ForgeryType::Am => "am",
            ForgeryType::Fs => "fs",
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            ForgeryType::Efs => "entire face synthesis",
            ForgeryType::Am => "attribute manipulation",
            ForgeryType::Fs => "face swapping",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.code() == s)
            .ok_or_else(|| Error::Taxonomy(format!("unknown forgery type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Diffusion,
    Gan,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Diffusion, Family::Gan];

    pub fn code(self) -> &'static str {
        match self {
            Family::Diffusion => "diffusion",
            Family::Gan => "gan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.code() == s)
            .ok_or_else(|| Error::Taxonomy(format!("unknown generator family {s:?}")))
    }

    /// Simulated generator names of this family.
    pub fn generators(self) -> &'static [&'static str] {
        match self {
            Family::Diffusion => &["ddpm-sim", "latdiff-sim", "colldiff-sim", "diffae-sim"],
            Family::Gan => &["stylegan-sim", "lattrans-sim"],
        }
    }
}

/// Four-level label of one sample, in the string form used on disk.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub l1: String,
    pub l2: String,
    pub l3: String,
    pub l4: String,
}

impl Labels {
    pub fn real() -> Self {
        let none = || "none".to_string();
        Self {
            l1: "real".into(),
            l2: none(),
            l3: none(),
            l4: none(),
        }
    }

    pub fn fake(forgery: ForgeryType, family: Family, generator: &str) -> Self {
        Self {
            l1: "fake".into(),
            l2: forgery.code().into(),
            l3: family.code().into(),
            l4: generator.into(),
        }
    }

    pub fn is_fake(&self) -> bool {
        self.l1 == "fake"
    }

    /// Class index: 0 real, 1 fake.
    pub fn class(&self) -> usize {
        usize::from(self.is_fake())
    }

    /// Checks the record against the taxonomy.
    pub fn validate(&self) -> Result<Option<(ForgeryType, Family)>> {
        match self.l1.as_str() {
            "real" => {
                if [&self.l2, &self.l3, &self.l4].iter().any(|s| s.as_str() != "none") {
                    return Err(Error::Taxonomy(format!("real sample with fake fields: {self:?}")));
                }
                Ok(None)
            }
            "fake" => {
                let forgery = ForgeryType::parse(&self.l2)?;
                let family = Family::parse(&self.l3)?;
                if !family.generators().contains(&self.l4.as_str()) {
                    return Err(Error::Taxonomy(format!(
                        "generator {:?} is not a {} generator",
                        self.l4, self.l3
                    )));
                }
                Ok(Some((forgery, family)))
            }
            other => Err(Error::Taxonomy(format!("unknown authenticity {other:?}"))),
        }
    }
}

/// Four templated level sentences plus the padded token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub levels: [String; 4],
    pub ids: Vec<usize>,
}

impl PromptRecord {
    /// Concatenation of the first `k` levels, skipping a level that repeats
    /// the previous one (real samples).
    pub fn text(&self, k: usize) -> String {
        let mut parts: Vec<&str> = Vec::new();
        for level in self.levels.iter().take(k) {
            if parts.last() != Some(&level.as_str()) {
                parts.push(level);
            }
        }
        parts.join(" ")
    }
}

/// Level sentences for a label record.
pub fn level_sentences(labels: &Labels) -> Result<[String; 4]> {
    Ok(match labels.validate()? {
        None => std::array::from_fn(|_| "a photo of a real face.".to_string()),
        Some((forgery, family)) => [
            "a photo of a fake face.".to_string(),
            format!("forgery type {}.", forgery.phrase()),
            format!("generator family {}.", family.code()),
            format!("generator {}.", labels.l4),
        ],
    })
}

/// Builds the prompt for `labels` from its first `levels` sentences,
/// tokenized and fitted to `n` ids.
pub fn make_prompts(labels: &Labels, vocab: &Vocabulary, n: usize, levels: usize) -> Result<PromptRecord> {
    let mut rec = PromptRecord {
        levels: level_sentences(labels)?,
        ids: Vec::new(),
    };
    rec.ids = encode_text(&rec.text(levels), vocab, n);
    Ok(rec)
}

/// Tokenizes, keeps at most `n - 1` words, appends EOT and pads with PAD to
/// length `n`.
pub fn encode_text(text: &str, vocab: &Vocabulary, n: usize) -> Vec<usize> {
    let mut ids = tokenize(text, vocab);
    ids.truncate(n.saturating_sub(1));
    if n > 0 {
        ids.push(EOT);
    }
    ids.resize(n, PAD);
    ids
}

/// `[BOS] + tokens[..n-1]`.
pub fn shift_for_decoder(tokens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len());
    if tokens.is_empty() {
        return out;
    }
    out.push(BOS);
    out.extend_from_slice(&tokens[..tokens.len() - 1]);
    out
}

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9]+(?:-[a-z0-9]+)*").expect("valid regex"))
}

/// Lowercase words split on whitespace and punctuation (hyphenated words
/// stay whole); unknown words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let lower = text.to_lowercase();
    word_regex()
        .find_iter(&lower)
        .map(|m| vocab.id(m.as_str()))
        .collect()
}

/// Space-joined words with special tokens dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id >= SPECIALS.len())
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials, then every word any prompt can produce, then filler tokens
    /// up to `size`.
    pub fn build(size: usize) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        let mut corpus = vec![level_sentences(&Labels::real())?];
        for forgery in ForgeryType::ALL {
            for family in Family::ALL {
                for g in family.generators() {
                    corpus.push(level_sentences(&Labels::fake(forgery, family, g))?);
                }
            }
        }
        for sentence in corpus.iter().flatten() {
            for m in word_regex().find_iter(sentence) {
                push(m.as_str());
            }
        }
        let needed = SPECIALS.len() + words.len();
        if size < needed {
            return Err(Error::Contract(format!("vocabulary size {size} below the {needed} required tokens")));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let filler = size - tokens.len();
        tokens.extend((0..filler).map(|i| format!("<unused{i}>")));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary must start with <pad> <bos> <eot> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let tokens = input.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}
