//! Word-vector text files: one `token v1 ... vm` line per word, with an
//! optional leading `count dim` header line.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use ecga_core::text::{EmbeddingTable, Vocabulary};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Reads every vector whose token satisfies `keep`. Dimensions are checked
/// on all lines, kept or not.
pub fn parse_vectors(
    mut input: impl BufRead,
    mut keep: impl FnMut(&str) -> bool,
) -> Result<WordVectors, CliError> {
    let mut dim: Option<usize> = None;
    let mut vectors = HashMap::new();
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let read = input
            .read_until(b'\n', &mut buf)
            .map_err(|e| CliError::Usage(format!("line {}: {e}", line_no + 1)))?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf)
            .map_err(|_| CliError::Usage(format!("line {line_no}: not valid UTF-8")))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if line_no == 1 && values.len() == 1 {
            if let (Ok(_), Ok(d)) = (token.parse::<usize>(), values[0].parse::<usize>()) {
                if d == 0 {
                    return Err(CliError::Usage("line 1: header declares dimension 0".into()));
                }
                dim = Some(d);
                continue;
            }
        }
        if values.is_empty() {
            return Err(CliError::Usage(format!("line {line_no}: token {token:?} has no values")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(CliError::Usage(format!(
                    "line {line_no}: {} values, expected {d}",
                    values.len()
                )))
            }
            Some(_) => {}
        }
        if !keep(token) {
            continue;
        }
        let row = values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CliError::Usage(format!("line {line_no}: bad value {v:?}")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        vectors.entry(token.to_owned()).or_insert(row);
    }
    let dim = dim.ok_or_else(|| CliError::Usage("no vectors found".into()))?;
    Ok(WordVectors { dim, vectors })
}

pub fn read_vectors(path: &Path, keep: impl FnMut(&str) -> bool) -> Result<WordVectors, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_vectors(std::io::BufReader::new(file), keep).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Embedding table aligned with `vocab` and the share of vocabulary
/// tokens that had a vector.
pub fn table_for(vocab: &Vocabulary, vectors: &WordVectors) -> Result<(EmbeddingTable, f64), CliError> {
    Ok(EmbeddingTable::from_lookup(vocab, vectors.dim, |t| {
        vectors.vectors.get(t).map(Vec::as_slice)
    })?)
}
