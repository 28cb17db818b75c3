//! Tokenisation, sinusoidal positions and the text Transformer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{TransformerConfig, TransformerEncoder};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Dense token ids with PAD = 0, EOS = 1, UNK = 2 followed by corpus tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from lower-cased whitespace tokens, sorted for stability.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(split_words).collect();
        words.sort();
        words.dedup();
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str()))))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Reads one token per line; line number is the id. The first three lines must be
    /// the special tokens.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(Error::Data("vocabulary must start with <pad>, <eos>, <unk>".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token ids padded to a fixed length; `len` counts the non-PAD prefix, which ends in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl TokenSequence {
    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

/// Lower-cases, splits on whitespace, maps through `vocab`, truncates to `max_len - 1`,
/// appends EOS and pads to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if vocab.len() <= UNK {
        return Err(Error::invalid("vocabulary has no entries"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut ids: Vec<usize> = split_words(text).map(|w| vocab.id(&w)).take(max_len - 1).collect();
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, len })
}

/// `PE[2i] = sin(pos / 10000^(2i/d))`, `PE[2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!("d_model must be even and positive, got {d_model}")));
    }
    let mut pe = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    Ok(pe)
}

#[derive(Debug, Clone)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub transformer: TransformerConfig,
}

/// Token states for a batch, each sequence padded to the same `seq_len`.
#[derive(Debug, Clone)]
pub struct EncodedText {
    /// `[batch * seq_len, d_model]`, sequence-major.
    pub states: Var,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    /// Row validity (non-PAD positions).
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub transformer: TransformerEncoder,
    pub config: TextEncoderConfig,
    positions: Vec<f64>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: TextEncoderConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.transformer.d_model;
        let mut positions = Vec::with_capacity(config.max_len * d);
        for pos in 0..config.max_len {
            positions.extend(positional_encoding(pos, d)?);
        }
        let bound = 1.0 / (d as f64).sqrt();
        let embedding = store.add_uniform(format!("{name}.embedding"), &[config.vocab_size, d], bound, rng)?;
        let transformer = TransformerEncoder::new(store, &format!("{name}.transformer"), config.transformer, rng)?;
        Ok(Self { embedding, transformer, config, positions })
    }

    pub fn d_model(&self) -> usize {
        self.config.transformer.d_model
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len == 0 || seq.len > seq.ids.len() {
            return Err(Error::invalid("token sequence has no valid positions"));
        }
        if seq.ids.len() > self.config.max_len {
            return Err(Error::invalid(format!("sequence length {} exceeds max_len {}", seq.ids.len(), self.config.max_len)));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// `X_i = E(t_i) + PE(i)` for the first `width` positions of every sequence.
    pub fn embed(&self, tape: &mut Tape<'_>, seqs: &[&TokenSequence], width: usize) -> Result<Var> {
        let d = self.d_model();
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut pe = Vec::with_capacity(seqs.len() * width * d);
        for seq in seqs {
            self.check(seq)?;
            for pos in 0..width {
                ids.push(Some(seq.ids.get(pos).copied().unwrap_or(crate::text::PAD)));
                pe.extend_from_slice(&self.positions[pos * d..(pos + 1) * d]);
            }
        }
        let table = tape.param(self.embedding);
        let e = tape.gather_rows(table, &ids)?;
        let p = tape.constant(Tensor::matrix(ids.len(), d, pe)?);
        Ok(tape.add(e, p)?)
    }

    /// Encodes a batch padded to its longest valid length. Attention never reads PAD keys,
    /// so states at valid positions do not depend on how much padding was trimmed.
    pub fn encode_batch(&self, tape: &mut Tape<'_>, seqs: &[&TokenSequence]) -> Result<EncodedText> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let seq_len = seqs.iter().map(|s| s.len).max().unwrap_or(1);
        let x = self.embed(tape, seqs, seq_len)?;
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len).collect();
        let valid: Vec<bool> = lengths.iter().flat_map(|&n| (0..seq_len).map(move |p| p < n)).collect();
        let segments: Vec<(usize, usize)> = (0..seqs.len()).map(|b| (b * seq_len, seq_len)).collect();
        let states = self.transformer.forward(tape, x, &segments, Some(&valid))?;
        Ok(EncodedText { states, seq_len, lengths, valid })
    }

    /// Per-token states `H: [n, d_model]` of one sequence, over its full padded length
    /// with PAD keys masked, restricted to the valid positions.
    pub fn encode_text(&self, tape: &mut Tape<'_>, seq: &TokenSequence) -> Result<Var> {
        self.check(seq)?;
        let width = seq.ids.len();
        let x = self.embed(tape, &[seq], width)?;
        let valid: Vec<bool> = (0..width).map(|p| p < seq.len).collect();
        let h = self.transformer.forward(tape, x, &[(0, width)], Some(&valid))?;
        let rows: Vec<Option<usize>> = (0..seq.len).map(Some).collect();
        Ok(tape.gather_rows(h, &rows)?)
    }
}
