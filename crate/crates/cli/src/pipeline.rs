//! Raw text to encoded batches, plus the embedding table for a vocabulary.

use std::path::Path;

use ecga_core::text::{build_vocab, clean_tweet, encode, tokenize, EmbeddingTable, EncodedBatch, Vocabulary};
use ecga_core::{seeded_rng, SeededRng};

use crate::config::RunConfig;
use crate::embeddings::{read_vectors, table_for};
use crate::error::CliError;

/// Independent random stream `tag` derived from the run seed.
pub fn rng_stream(seed: u64, tag: u64) -> SeededRng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(tag);
    rng
}

pub const EMBEDDING_STREAM: u64 = 1;

pub fn document_tokens(config: &RunConfig, text: &str) -> Vec<String> {
    if config.clean_text {
        tokenize(&clean_tweet(text))
    } else {
        tokenize(text)
    }
}

#[derive(Debug, Clone)]
pub struct Inputs {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    /// Share of the vocabulary found in the vector file, when one was read.
    pub coverage: Option<f64>,
}

/// Vocabulary from the training documents and a frozen table for it.
pub fn build_inputs(config: &RunConfig, docs: &[Vec<String>]) -> Result<Inputs, CliError> {
    let vocab = build_vocab(docs.iter(), config.vocab_cap())?;
    if config.embeddings_path.is_empty() {
        let mut rng = rng_stream(config.seed, EMBEDDING_STREAM);
        let table = EmbeddingTable::random(vocab.len(), config.embedding_dim, &mut rng)?;
        return Ok(Inputs {
            vocab,
            table,
            coverage: None,
        });
    }
    let vectors = read_vectors(Path::new(&config.embeddings_path), |t| vocab.id(t).is_some())?;
    let (table, coverage) = table_for(&vocab, &vectors)?;
    if !config.vocab_from_embeddings {
        return Ok(Inputs {
            vocab,
            table,
            coverage: Some(coverage),
        });
    }
    let vocab = vocab.retain(|t| vectors.vectors.contains_key(t));
    let (table, _) = table_for(&vocab, &vectors)?;
    Ok(Inputs {
        vocab,
        table,
        coverage: Some(coverage),
    })
}

pub fn encode_docs(
    config: &RunConfig,
    docs: &[Vec<String>],
    vocab: &Vocabulary,
    labels: Vec<usize>,
) -> Result<EncodedBatch, CliError> {
    let rows = docs.iter().map(|d| encode(d, vocab, config.pad_length)).collect();
    Ok(EncodedBatch::new(config.pad_length, rows, labels)?)
}
