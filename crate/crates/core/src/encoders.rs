//! Frozen image and text encoders.
//!
//! The text encoder is a position-weighted mean pool over token embeddings
//! followed by one tanh hidden layer:
//!
//! ```text
//! pool = Σ_p ω_p x_p / Σ_p ω_p
//! s    = W₂ · tanh(W₁ · pool + b₁) + b₂
//! ```
//!
//! Its vector-Jacobian product with respect to the pseudo-token slot is
//! `(ω_slot / Σω) · W₁ᵀ [(1 − tanh²(a)) ⊙ W₂ᵀ u]`.
//!
//! The image encoder projects a sum of concept (and style) vectors through a
//! fixed matrix and adds seeded noise. Crops see only the concepts whose
//! region overlaps the crop box.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::linalg::{axpy, rand_distr_lite::standard_normal, random_orthonormal_columns, Matrix};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::store::Embedding;

pub type TokenId = u32;

pub const WORD_A: &str = "a";
pub const WORD_PHOTO: &str = "photo";
pub const WORD_OF: &str = "of";
pub const WORD_COMMA: &str = ",";
pub const WORD_AND: &str = "and";
pub const WORD_THAT: &str = "that";
pub const WORD_REPLACE: &str = "replace";
pub const WORD_WITH: &str = "with";
pub const SLOT_MARKER: &str = "[*]";
/// Domain tags reserved in every vocabulary.
pub const DOMAIN_TAGS: [&str; 4] = ["cartoon", "origami", "toy", "sculpture"];

const RESERVED: [&str; 9] = [
    WORD_A,
    WORD_PHOTO,
    WORD_OF,
    WORD_COMMA,
    WORD_AND,
    WORD_THAT,
    WORD_REPLACE,
    WORD_WITH,
    SLOT_MARKER,
];

/// Frozen token-embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    table: Matrix,
}

/// Serialized form of a [`Vocabulary`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub token_dim: usize,
    pub words: Vec<String>,
    pub table: Vec<Vec<f64>>,
}

pub struct VocabularyBuilder {
    token_dim: usize,
    seed: u64,
    random_norm: f64,
    words: Vec<String>,
    rows: Vec<Option<Vec<f64>>>,
}

impl VocabularyBuilder {
    /// Starts with the reserved words and domain tags. Rows not explicitly
    /// grounded are drawn from the seed with expected norm `random_norm`.
    pub fn new(token_dim: usize, seed: u64) -> Self {
        let mut b = Self {
            token_dim,
            seed,
            random_norm: 1.0,
            words: Vec::new(),
            rows: Vec::new(),
        };
        for w in RESERVED.iter().chain(DOMAIN_TAGS.iter()) {
            b.push(w, None);
        }
        b
    }

    pub fn random_norm(mut self, norm: f64) -> Self {
        self.random_norm = norm;
        self
    }

    fn push(&mut self, word: &str, row: Option<Vec<f64>>) {
        match self.words.iter().position(|w| w == word) {
            Some(i) => {
                if row.is_some() {
                    self.rows[i] = row;
                }
            }
            None => {
                self.words.push(word.to_string());
                self.rows.push(row);
            }
        }
    }

    pub fn word(mut self, word: &str) -> Self {
        self.push(word, None);
        self
    }

    /// Adds `word` (or overrides an existing word) with a fixed embedding row.
    pub fn grounded(mut self, word: &str, row: Vec<f64>) -> Self {
        self.push(word, Some(row));
        self
    }

    pub fn build(self) -> Result<Vocabulary> {
        if self.token_dim == 0 {
            return Err(Error::InvalidConfig("token_dim must be >= 1".into()));
        }
        let scale = self.random_norm / (self.token_dim as f64).sqrt();
        let mut table = Matrix::zeros(self.words.len(), self.token_dim);
        for (i, row) in self.rows.iter().enumerate() {
            let dst = table.row_mut(i);
            match row {
                Some(r) => {
                    if r.len() != self.token_dim {
                        return Err(Error::DimensionMismatch {
                            expected: self.token_dim,
                            got: r.len(),
                            context: "grounded token row",
                        });
                    }
                    dst.copy_from_slice(r);
                }
                None => {
                    let mut rng = stream_rng(self.seed, Stream::Encoder, 0x5643_0000 + i as u64);
                    for v in dst.iter_mut() {
                        *v = scale * standard_normal(&mut rng);
                    }
                }
            }
        }
        Vocabulary::from_parts(self.words, table)
    }
}

impl Vocabulary {
    /// Reserved words, domain tags and `extra` words, all with seeded rows.
    pub fn seeded(extra: &[&str], token_dim: usize, seed: u64) -> Result<Self> {
        extra
            .iter()
            .fold(VocabularyBuilder::new(token_dim, seed), |b, w| b.word(w))
            .build()
    }

    fn from_parts(words: Vec<String>, table: Matrix) -> Result<Self> {
        if !table.is_finite() {
            return Err(Error::NonFinite("vocabulary table".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::DuplicateId(w.clone()));
            }
        }
        for r in RESERVED {
            if !index.contains_key(r) {
                return Err(Error::UnknownWord(r.to_string()));
            }
        }
        Ok(Self { words, index, table })
    }

    pub fn from_file(file: VocabularyFile) -> Result<Self> {
        let table = Matrix::from_rows(&file.table)?;
        if table.rows() != file.words.len() || (table.rows() > 0 && table.cols() != file.token_dim) {
            return Err(Error::DimensionMismatch {
                expected: file.words.len(),
                got: table.rows(),
                context: "vocabulary table",
            });
        }
        let table = if table.rows() == 0 {
            Matrix::zeros(0, file.token_dim)
        } else {
            table
        };
        Self::from_parts(file.words, table)
    }

    pub fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            token_dim: self.token_dim(),
            words: self.words.clone(),
            table: self.table.iter_rows().map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownToken(id))
    }

    pub fn row(&self, id: TokenId) -> Result<&[f64]> {
        if (id as usize) < self.words.len() {
            Ok(self.table.row(id as usize))
        } else {
            Err(Error::UnknownToken(id))
        }
    }

    pub fn slot_id(&self) -> TokenId {
        self.index[SLOT_MARKER]
    }

    /// Space-joined words for `tokens`.
    pub fn render(&self, tokens: &[TokenId]) -> Result<String> {
        let words = tokens.iter().map(|&t| self.word(t)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn encode_words(&self, words: &[&str]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    fn hash_into(&self, h: &mut Sha256) {
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        for v in self.table.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
}

/// Word placed between the pseudo token and the caption in training prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connective {
    #[default]
    Comma,
    That,
}

impl Connective {
    fn word(self) -> &'static str {
        match self {
            Connective::Comma => WORD_COMMA,
            Connective::That => WORD_THAT,
        }
    }
}

/// Prompt layouts. Every variant carries a `[*]` slot for the pseudo token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Template {
    /// `a photo of [*]` (the pseudo token is appended to `a photo of`).
    Global,
    /// `a photo of [*] , <caption>` (or `that` as connective).
    Compose { caption: Vec<TokenId> },
    /// `a <tag> of [*]`
    Domain { tag: TokenId },
    /// `a photo of [*] , t1 and t2 , and t3 ...`
    ObjectComposition { tags: Vec<TokenId> },
    /// `a photo of [*] , <sentence>`
    Sentence { tokens: Vec<TokenId> },
}

impl Template {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Template::Global => "global",
            Template::Compose { .. } => "compose",
            Template::Domain { .. } => "domain_conversion",
            Template::ObjectComposition { .. } => "object_composition",
            Template::Sentence { .. } => "sentence_manipulation",
        }
    }

    /// Token ids with the slot marker at the pseudo-token position.
    pub fn tokens(&self, vocab: &Vocabulary, connective: Connective) -> Result<(Vec<TokenId>, usize)> {
        let slot = vocab.slot_id();
        let check = |ids: &[TokenId], what: &str| -> Result<()> {
            if ids.is_empty() {
                return Err(Error::InvalidTemplate(format!("{what} must not be empty")));
            }
            for &id in ids {
                vocab.word(id)?;
                if id == slot {
                    return Err(Error::InvalidTemplate(format!(
                        "{what} may not contain the slot marker"
                    )));
                }
            }
            Ok(())
        };
        let mut seq = match self {
            Template::Domain { tag } => {
                check(std::slice::from_ref(tag), "domain tag")?;
                vec![vocab.id(WORD_A)?, *tag, vocab.id(WORD_OF)?]
            }
            _ => vocab.encode_words(&[WORD_A, WORD_PHOTO, WORD_OF])?,
        };
        let slot_index = seq.len();
        seq.push(slot);
        match self {
            Template::Global | Template::Domain { .. } => {}
            Template::Compose { caption } => {
                check(caption, "compose caption")?;
                seq.push(vocab.id(connective.word())?);
                seq.extend_from_slice(caption);
            }
            Template::ObjectComposition { tags } => {
                check(tags, "object tags")?;
                let and = vocab.id(WORD_AND)?;
                let comma = vocab.id(WORD_COMMA)?;
                seq.push(comma);
                for (i, &t) in tags.iter().enumerate() {
                    match i {
                        0 => {}
                        1 => seq.push(and),
                        _ => seq.extend_from_slice(&[comma, and]),
                    }
                    seq.push(t);
                }
            }
            Template::Sentence { tokens } => {
                check(tokens, "sentence")?;
                seq.push(vocab.id(WORD_COMMA)?);
                seq.extend_from_slice(tokens);
            }
        }
        Ok((seq, slot_index))
    }
}

/// Token-embedding sequence with an optional pseudo-token slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    tokens: Vec<TokenId>,
    embeddings: Matrix,
    slot: Option<usize>,
}

impl PromptSequence {
    pub fn from_tokens(tokens: Vec<TokenId>, slot: Option<usize>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if let Some(s) = slot {
            if s >= tokens.len() {
                return Err(Error::InvalidTemplate(format!(
                    "slot {s} outside prompt of length {}",
                    tokens.len()
                )));
            }
        }
        let mut embeddings = Matrix::zeros(tokens.len(), vocab.token_dim());
        for (i, &t) in tokens.iter().enumerate() {
            embeddings.row_mut(i).copy_from_slice(vocab.row(t)?);
        }
        Ok(Self {
            tokens,
            embeddings,
            slot,
        })
    }

    /// Raw embeddings, for tests and external callers that bypass the vocabulary.
    pub fn from_embeddings(embeddings: Matrix, slot: Option<usize>) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::Empty("prompt"));
        }
        if slot.is_some_and(|s| s >= embeddings.rows()) {
            return Err(Error::InvalidTemplate("slot outside prompt".into()));
        }
        Ok(Self {
            tokens: Vec::new(),
            embeddings,
            slot,
        })
    }

    /// Plain caption sequence without a slot.
    pub fn caption(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Self> {
        Self::from_tokens(tokens.to_vec(), None, vocab)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot_index(&self) -> Option<usize> {
        self.slot
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn token_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn fill_slot(&mut self, pseudo_token: &[f64]) -> Result<()> {
        let s = self.slot.ok_or(Error::MissingSlot)?;
        if pseudo_token.len() != self.token_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.token_dim(),
                got: pseudo_token.len(),
                context: "pseudo token",
            });
        }
        self.embeddings.row_mut(s).copy_from_slice(pseudo_token);
        Ok(())
    }

    pub fn set_token_embedding(&mut self, pos: usize, v: &[f64]) {
        self.embeddings.row_mut(pos).copy_from_slice(v);
    }

    pub fn render(&self, vocab: &Vocabulary) -> Result<String> {
        vocab.render(&self.tokens)
    }
}

/// Builds the prompt for `template`, filling the slot when `pseudo_token` is
/// given (otherwise the slot holds the `[*]` placeholder row).
pub fn build_prompt(
    template: &Template,
    pseudo_token: Option<&[f64]>,
    vocab: &Vocabulary,
    connective: Connective,
) -> Result<PromptSequence> {
    let (tokens, slot) = template.tokens(vocab, connective)?;
    let mut seq = PromptSequence::from_tokens(tokens, Some(slot), vocab)?;
    if let Some(p) = pseudo_token {
        seq.fill_slot(p)?;
    }
    Ok(seq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub token_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Longest accepted prompt.
    pub max_len: usize,
    /// Scales W₁ (and W₂ inversely); larger values push tanh further from linear.
    pub gain: f64,
    /// Relative perturbation of W₂ away from the pseudo-inverse of W₁.
    pub distortion: f64,
    pub seed: u64,
}

impl TextEncoderConfig {
    pub fn new(token_dim: usize, out_dim: usize, seed: u64) -> Self {
        Self {
            token_dim,
            hidden: token_dim.max(out_dim),
            out_dim,
            max_len: 77,
            gain: 3.0,
            distortion: 0.1,
            seed,
        }
    }
}

/// Frozen toy stand-in for a CLIP text tower.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTextEncoder {
    config: TextEncoderConfig,
    position_weights: Vec<f64>,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

/// Intermediates of one text forward pass, kept for the slot VJP.
#[derive(Clone, Debug)]
pub struct TextForward {
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
    weight_sum: f64,
}

impl ToyTextEncoder {
    pub fn seeded(config: TextEncoderConfig) -> Result<Self> {
        let TextEncoderConfig {
            token_dim,
            hidden,
            out_dim,
            max_len,
            gain,
            distortion,
            seed,
        } = config;
        if token_dim == 0 || hidden == 0 || out_dim == 0 || max_len == 0 {
            return Err(Error::InvalidConfig("text encoder dims must be >= 1".into()));
        }
        if !(gain > 0.0) {
            return Err(Error::InvalidConfig("text encoder gain must be > 0".into()));
        }
        let mut rng = stream_rng(seed, Stream::Encoder, 0x5445_5854);
        let position_weights = (0..max_len).map(|_| rng.gen_range(0.5..1.5)).collect();
        // When the shapes allow it, W₂ approximately inverts W₁ so that text and
        // token spaces stay aligned; otherwise both are plain Gaussian maps.
        let (w1, w2) = if hidden >= token_dim && out_dim == token_dim {
            let q = random_orthonormal_columns(hidden, token_dim, &mut rng);
            let mut w1 = q.clone();
            w1.scale(gain);
            let mut w2 = q.transpose();
            let noise = Matrix::gaussian(out_dim, hidden, distortion / (hidden as f64).sqrt(), &mut rng);
            for (a, b) in w2.as_mut_slice().iter_mut().zip(noise.as_slice()) {
                *a = (*a + b) / gain;
            }
            (w1, w2)
        } else {
            let w1 = Matrix::gaussian(hidden, token_dim, gain / (token_dim as f64).sqrt(), &mut rng);
            let w2 = Matrix::gaussian(out_dim, hidden, 1.0 / (gain * (hidden as f64).sqrt()), &mut rng);
            (w1, w2)
        };
        let b1 = (0..hidden).map(|_| 0.05 * standard_normal(&mut rng)).collect();
        let b2 = (0..out_dim).map(|_| 0.01 * standard_normal(&mut rng)).collect();
        Ok(Self {
            config,
            position_weights,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Explicit parameters; used by tests that need closed forms.
    pub fn from_parts(position_weights: Vec<f64>, w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        if w1.rows() != b1.len() || w2.cols() != w1.rows() || w2.rows() != b2.len() {
            return Err(Error::DimensionMismatch {
                expected: w1.rows(),
                got: w2.cols(),
                context: "text encoder layers",
            });
        }
        if position_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidConfig("position weights must be positive".into()));
        }
        let config = TextEncoderConfig {
            token_dim: w1.cols(),
            hidden: w1.rows(),
            out_dim: w2.rows(),
            max_len: position_weights.len(),
            gain: 1.0,
            distortion: 0.0,
            seed: 0,
        };
        Ok(Self {
            config,
            position_weights,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn position_weights(&self) -> &[f64] {
        &self.position_weights
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    fn check(&self, seq: &PromptSequence) -> Result<()> {
        if seq.token_dim() != self.token_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.token_dim(),
                got: seq.token_dim(),
                context: "prompt token_dim",
            });
        }
        if seq.len() > self.position_weights.len() {
            return Err(Error::InvalidTemplate(format!(
                "prompt length {} exceeds max_len {}",
                seq.len(),
                self.position_weights.len()
            )));
        }
        Ok(())
    }

    pub fn forward_detailed(&self, seq: &PromptSequence) -> Result<TextForward> {
        self.check(seq)?;
        let weights = &self.position_weights[..seq.len()];
        let weight_sum: f64 = weights.iter().sum();
        let mut pooled = vec![0.0; self.token_dim()];
        for (row, &w) in seq.embeddings().iter_rows().zip(weights) {
            axpy(w / weight_sum, row, &mut pooled);
        }
        let mut hidden = self.w1.matvec(&pooled);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + b).tanh();
        }
        let mut output = self.w2.matvec(&hidden);
        for (o, b) in output.iter_mut().zip(&self.b2) {
            *o += b;
        }
        Ok(TextForward {
            pooled,
            hidden,
            output,
            weight_sum,
        })
    }

    pub fn forward(&self, seq: &PromptSequence) -> Result<Embedding> {
        Embedding::new(self.forward_detailed(seq)?.output)
    }

    /// ∂(upstream · s)/∂(slot token) given a cached forward pass over `seq`.
    pub fn slot_vjp(&self, fwd: &TextForward, seq: &PromptSequence, upstream: &[f64]) -> Result<Vec<f64>> {
        let slot = seq.slot_index().ok_or(Error::MissingSlot)?;
        if upstream.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim(),
                got: upstream.len(),
                context: "text upstream gradient",
            });
        }
        let mut g_hidden = self.w2.matvec_t(upstream);
        for (g, h) in g_hidden.iter_mut().zip(&fwd.hidden) {
            *g *= 1.0 - h * h;
        }
        let mut g = self.w1.matvec_t(&g_hidden);
        let s = self.position_weights[slot] / fwd.weight_sum;
        g.iter_mut().for_each(|v| *v *= s);
        Ok(g)
    }

    pub fn input_grad(&self, seq: &PromptSequence, upstream: &[f64]) -> Result<Vec<f64>> {
        if seq.slot_index().is_none() {
            return Err(Error::MissingSlot);
        }
        let fwd = self.forward_detailed(seq)?;
        self.slot_vjp(&fwd, seq, upstream)
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in self
            .position_weights
            .iter()
            .chain(self.w1.as_slice())
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
        {
            h.update(v.to_le_bytes());
        }
    }
}

pub fn text_forward(seq: &PromptSequence, encoder: &ToyTextEncoder) -> Result<Embedding> {
    encoder.forward(seq)
}

pub fn text_input_grad(seq: &PromptSequence, upstream: &[f64], encoder: &ToyTextEncoder) -> Result<Vec<f64>> {
    encoder.input_grad(seq, upstream)
}

/// Frozen text side shared by training and retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoders {
    pub vocab: Vocabulary,
    pub text: ToyTextEncoder,
    pub connective: Connective,
}

/// On-disk description of [`Encoders`]: full vocabulary table plus the text
/// encoder's seed and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodersFile {
    pub vocabulary: VocabularyFile,
    pub text_encoder: TextEncoderConfig,
    #[serde(default)]
    pub connective: Connective,
}

impl Encoders {
    pub fn new(vocab: Vocabulary, text: ToyTextEncoder, connective: Connective) -> Result<Self> {
        if vocab.token_dim() != text.token_dim() {
            return Err(Error::DimensionMismatch {
                expected: text.token_dim(),
                got: vocab.token_dim(),
                context: "vocabulary vs text encoder token_dim",
            });
        }
        Ok(Self {
            vocab,
            text,
            connective,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.text.out_dim()
    }

    pub fn token_dim(&self) -> usize {
        self.vocab.token_dim()
    }

    pub fn prompt(&self, template: &Template, pseudo_token: Option<&[f64]>) -> Result<PromptSequence> {
        build_prompt(template, pseudo_token, &self.vocab, self.connective)
    }

    /// SHA-256 over every frozen parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.vocab.hash_into(&mut h);
        self.text.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub fn to_file(&self) -> EncodersFile {
        EncodersFile {
            vocabulary: self.vocab.to_file(),
            text_encoder: self.text.config().clone(),
            connective: self.connective,
        }
    }

    pub fn from_file(file: EncodersFile) -> Result<Self> {
        let vocab = Vocabulary::from_file(file.vocabulary)?;
        let text = ToyTextEncoder::seeded(file.text_encoder)?;
        Self::new(vocab, text, file.connective)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(&self.to_file()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: EncodersFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        Self::from_file(file)
    }
}

/// A concept occupying a rectangular region of a synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedConcept {
    pub vector: Vec<f64>,
    pub region: Rect,
}

/// What the toy image encoder sees: concept vectors with their layout plus an
/// optional global style vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDescriptor {
    pub width: u32,
    pub height: u32,
    pub concepts: Vec<PlacedConcept>,
    pub style: Option<Vec<f64>>,
    /// Keys the per-image noise draw.
    pub noise_key: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImageEncoder {
    projection: Matrix,
    noise: f64,
    seed: u64,
}

impl ToyImageEncoder {
    /// `projection` is `d × concept_dim` with entries N(0, 1/concept_dim), so a
    /// unit-scale concept vector maps to roughly unit norm.
    pub fn seeded(d: usize, concept_dim: usize, noise: f64, seed: u64) -> Result<Self> {
        if d == 0 || concept_dim == 0 {
            return Err(Error::InvalidConfig("image encoder dims must be >= 1".into()));
        }
        if !(noise >= 0.0) {
            return Err(Error::InvalidConfig("noise must be >= 0".into()));
        }
        let mut rng = stream_rng(seed, Stream::Encoder, 0x494d_4147);
        let projection = Matrix::gaussian(d, concept_dim, 1.0 / (concept_dim as f64).sqrt(), &mut rng);
        Ok(Self {
            projection,
            noise,
            seed,
        })
    }

    pub fn from_projection(projection: Matrix, noise: f64, seed: u64) -> Self {
        Self {
            projection,
            noise,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn concept_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// `P · v` without noise.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.concept_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.concept_dim(),
                got: v.len(),
                context: "concept vector",
            });
        }
        Ok(self.projection.matvec(v))
    }

    fn embed_selected<'a>(
        &self,
        desc: &ImageDescriptor,
        concepts: impl Iterator<Item = &'a PlacedConcept>,
        noise_index: u64,
    ) -> Result<Embedding> {
        let mut acc = vec![0.0; self.concept_dim()];
        for c in concepts {
            if c.vector.len() != acc.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    got: c.vector.len(),
                    context: "concept vector",
                });
            }
            axpy(1.0, &c.vector, &mut acc);
        }
        if let Some(style) = &desc.style {
            if style.len() != acc.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    got: style.len(),
                    context: "style vector",
                });
            }
            axpy(1.0, style, &mut acc);
        }
        let mut v = self.projection.matvec(&acc);
        if self.noise > 0.0 {
            let mut rng = stream_rng(
                derive_seed(self.seed, Stream::Noise, desc.noise_key),
                Stream::Noise,
                noise_index,
            );
            let s = self.noise / (self.dim() as f64).sqrt();
            for x in v.iter_mut() {
                *x += s * standard_normal(&mut rng);
            }
        }
        Embedding::new(v)
    }

    pub fn embed_image(&self, desc: &ImageDescriptor) -> Result<Embedding> {
        self.embed_selected(desc, desc.concepts.iter(), 0)
    }

    /// Embeds only the concepts whose region overlaps `bbox`. The style vector
    /// is global to the image and always included.
    pub fn embed_crop(&self, desc: &ImageDescriptor, bbox: &Rect) -> Result<Embedding> {
        if !bbox.fits_within(desc.width, desc.height) || bbox.w == 0 || bbox.h == 0 {
            return Err(Error::OutOfBounds(bbox.to_string()));
        }
        let key = (u64::from(bbox.x) << 48) ^ (u64::from(bbox.y) << 32) ^ (u64::from(bbox.w) << 16) ^ u64::from(bbox.h);
        self.embed_selected(
            desc,
            desc.concepts.iter().filter(|c| c.region.intersects(bbox)),
            key.wrapping_add(1),
        )
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.projection.as_slice() {
            h.update(v.to_le_bytes());
        }
        h.update(self.noise.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}
