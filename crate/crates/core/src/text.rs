//! Raw text to fixed-length id sequences.
//!
//! Cleaning rules applied by [`clean_tweet`], token by token after splitting
//! on whitespace:
//!
//! | token                                       | becomes     |
//! |---------------------------------------------|-------------|
//! | starts with `http://`, `https://`, `www.`   | `<url>`     |
//! | `@` followed by letters, digits or `_`      | `<user>` (anything after the handle is kept) |
//! | one of [`SMILEYS`] (case-insensitive)       | `<smiley>`  |
//! | optional sign, digits, `.`/`,`/`:` groups, optional `%` | `<number>` |
//! | anything else                               | lowercased  |

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, contract_err, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Emoticons recognised by [`clean_tweet`], in lowercase.
pub const SMILEYS: &[&str] = &[
    ":)", ":-)", ":(", ":-(", ":d", ":-d", ";)", ";-)", ":p", ":-p", ":o", ":-o", ":/", ":-/",
    ":'(", ":')", ":|", ":*", "<3", "</3", "xd", "=)", "=(", "^^", "^_^", "-_-", "(:", "):",
];

const PLACEHOLDERS: &[&str] = &["<url>", "<user>", "<smiley>", "<number>"];

/// Normalises a tweet: URLs, mentions, emoticons and numbers become
/// placeholders, everything else is lowercased, whitespace collapses to
/// single spaces. Idempotent.
pub fn clean_tweet(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for raw in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        clean_token(raw, &mut out);
    }
    out
}

fn clean_token(raw: &str, out: &mut String) {
    let lower = raw.to_lowercase();
    if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
    {
        out.push_str("<url>");
        return;
    }
    if let Some(rest) = raw.strip_prefix('@') {
        let handle_len = rest
            .char_indices()
            .find(|(_, c)| !(c.is_alphanumeric() || *c == '_'))
            .map_or(rest.len(), |(i, _)| i);
        if handle_len > 0 {
            out.push_str("<user>");
            out.push_str(&rest[handle_len..].to_lowercase());
            return;
        }
    }
    if SMILEYS.contains(&lower.as_str()) {
        out.push_str("<smiley>");
        return;
    }
    if is_number(&lower) {
        out.push_str("<number>");
        return;
    }
    out.push_str(&lower);
}

fn is_number(token: &str) -> bool {
    let body = token.strip_prefix(['+', '-']).unwrap_or(token);
    let body = body.strip_suffix('%').unwrap_or(body);
    !body.is_empty()
        && body.split(['.', ',', ':']).all(|group| {
            !group.is_empty() && group.chars().all(|c| c.is_ascii_digit())
        })
}

/// Whitespace tokenizer that also splits every punctuation character into
/// its own token. The cleaning placeholders (`<url>` and friends) survive
/// as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        let mut rest = chunk;
        while let Some(c) = rest.chars().next() {
            if c == '<' {
                if let Some(p) = PLACEHOLDERS.iter().find(|p| rest.starts_with(**p)) {
                    flush(&mut word, &mut tokens);
                    tokens.push(p.to_string());
                    rest = &rest[p.len()..];
                    continue;
                }
            }
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                flush(&mut word, &mut tokens);
                tokens.push(c.to_string());
            }
            rest = &rest[c.len_utf8()..];
        }
        flush(&mut word, &mut tokens);
    }
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(core::mem::take(word));
    }
}

/// Token to id mapping with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over `tokens` in the given order, after the reserved ids.
    /// Duplicates and reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        vocab.insert(PAD_TOKEN.to_string());
        vocab.insert(UNK_TOKEN.to_string());
        for t in tokens {
            vocab.insert(t.into());
        }
        vocab
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens in id order, reserved ones included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Same ordering restricted to the non-reserved tokens `keep` accepts.
    pub fn retain(&self, mut keep: impl FnMut(&str) -> bool) -> Vocabulary {
        Vocabulary::from_tokens(self.tokens[2..].iter().filter(|t| keep(t)).cloned())
    }
}

/// Frequency-ranked vocabulary; equal counts are broken lexicographically.
/// `max_size` caps the number of non-reserved tokens.
pub fn build_vocab<'a, I, D>(corpus: I, max_size: Option<usize>) -> Result<Vocabulary>
where
    I: IntoIterator<Item = D>,
    D: IntoIterator<Item = &'a String>,
{
    if max_size == Some(0) {
        return Err(config_err!("vocabulary cap must be at least 1"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut docs = 0usize;
    for doc in corpus {
        docs += 1;
        for token in doc {
            if token != PAD_TOKEN && token != UNK_TOKEN {
                *counts.entry(token.as_str()).or_default() += 1;
            }
        }
    }
    if docs == 0 {
        return Err(config_err!("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap order is lexicographic and the sort is stable.
    ranked.sort_by_key(|&(_, count)| core::cmp::Reverse(count));
    if let Some(cap) = max_size {
        ranked.truncate(cap);
    }
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

/// Maps tokens to ids, right-padding with `PAD` or keeping the first `n`.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens
        .iter()
        .take(n)
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK))
        .collect();
    ids.resize(n, PAD);
    ids
}

/// Fixed-length id rows plus one label per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pad_length: usize,
    ids: Vec<usize>,
    labels: Vec<usize>,
}

impl EncodedBatch {
    pub fn new(pad_length: usize, rows: Vec<Vec<usize>>, labels: Vec<usize>) -> Result<Self> {
        if pad_length == 0 {
            return Err(config_err!("pad length must be at least 1"));
        }
        if rows.len() != labels.len() {
            return Err(contract_err!(
                "{} id rows but {} labels",
                rows.len(),
                labels.len()
            ));
        }
        let mut ids = Vec::with_capacity(rows.len() * pad_length);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != pad_length {
                return Err(contract_err!(
                    "row {i} has length {}, expected {pad_length}",
                    row.len()
                ));
            }
            ids.extend(row);
        }
        Ok(Self {
            pad_length,
            ids,
            labels,
        })
    }

    pub fn pad_length(&self) -> usize {
        self.pad_length
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.pad_length..(i + 1) * self.pad_length]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> EncodedBatch {
        let mut ids = Vec::with_capacity(indices.len() * self.pad_length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            ids.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        EncodedBatch {
            pad_length: self.pad_length,
            ids,
            labels,
        }
    }
}

/// Frozen `[V×m]` embedding matrix aligned with a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    /// Rows come from `lookup`; tokens it does not know, `UNK` and `PAD`
    /// get zero rows. Returns the table and the fraction of non-reserved
    /// tokens that were found.
    pub fn from_lookup<'a>(
        vocab: &Vocabulary,
        dim: usize,
        mut lookup: impl FnMut(&str) -> Option<&'a [f64]>,
    ) -> Result<(Self, f64)> {
        if dim == 0 {
            return Err(config_err!("embedding dimension must be positive"));
        }
        let mut data = alloc::vec![0.0; vocab.len() * dim];
        let mut found = 0usize;
        for (id, token) in vocab.tokens().iter().enumerate().skip(2) {
            if let Some(row) = lookup(token) {
                if row.len() != dim {
                    return Err(contract_err!(
                        "vector for {token:?} has {} entries, expected {dim}",
                        row.len()
                    ));
                }
                data[id * dim..(id + 1) * dim].copy_from_slice(row);
                found += 1;
            }
        }
        let candidates = vocab.len() - 2;
        let coverage = if candidates == 0 {
            1.0
        } else {
            found as f64 / candidates as f64
        };
        Ok((Self::from_matrix(Tensor::new(&[vocab.len(), dim], data)?)?, coverage))
    }

    /// Uniform(-0.5, 0.5) rows for every non-reserved id. Stand-in when no
    /// pretrained vectors are available.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || vocab_size < 2 {
            return Err(config_err!("random embeddings need dim >= 1 and room for PAD/UNK"));
        }
        let mut data = alloc::vec![0.0; vocab_size * dim];
        for x in &mut data[2 * dim..] {
            *x = rng.random_range(-0.5..0.5);
        }
        Self::from_matrix(Tensor::new(&[vocab_size, dim], data)?)
    }

    /// Wraps an existing matrix; the `PAD` row is forced to zeros.
    pub fn from_matrix(mut matrix: Tensor) -> Result<Self> {
        let (rows, dim) = matrix.dims2()?;
        if rows < 2 {
            return Err(config_err!("embedding table needs at least PAD and UNK rows"));
        }
        matrix.data_mut()[..dim].fill(0.0);
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}
