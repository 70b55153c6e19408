//! Line-oriented text checkpoint. Floats are written with the shortest
//! representation that parses back to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use ecga_core::ensemble::{EnsembleModel, Learner, LearnerSpec};
use ecga_core::layers::{ConvActivation, LearnerParams};
use ecga_core::text::{EmbeddingTable, Vocabulary};
use ecga_core::{seeded_rng, Tensor};

use crate::config::RunConfig;
use crate::error::CliError;

const MAGIC: &str = "ecga-checkpoint 1";

/// Everything needed to rerun preprocessing and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: EnsembleModel,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let config = self.config.to_toml();
        let config_lines: Vec<&str> = config.lines().collect();
        writeln!(out, "config {}", config_lines.len()).unwrap();
        for line in config_lines {
            writeln!(out, "{line}").unwrap();
        }
        writeln!(out, "labels {}", self.model.labels().len()).unwrap();
        for label in self.model.labels() {
            writeln!(out, "{}", escape(label)).unwrap();
        }
        writeln!(out, "vocab {}", self.vocab.len()).unwrap();
        for token in self.vocab.tokens() {
            writeln!(out, "{}", escape(token)).unwrap();
        }
        let table = self.model.embeddings();
        writeln!(out, "embeddings {} {}", table.vocab_size(), table.dim()).unwrap();
        for id in 0..table.vocab_size() {
            write_floats(&mut out, table.row(id));
        }
        writeln!(
            out,
            "model {} {}",
            self.model.conv_activation().name(),
            self.model.learners().len()
        )
        .unwrap();
        for learner in self.model.learners() {
            let s = learner.spec;
            writeln!(
                out,
                "learner {} {} {} {}",
                s.kernel_size, s.filters, s.units, s.attention_dim
            )
            .unwrap();
            for (name, t) in learner.params.named() {
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
                write_floats(&mut out, t.data());
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut r = Lines::new(text);
        if r.next()? != MAGIC {
            return r.fail("not an ecga checkpoint");
        }
        let n = r.header("config", 1)?[0];
        let mut config = String::new();
        for _ in 0..n {
            config.push_str(r.next()?);
            config.push('\n');
        }
        let config = RunConfig::from_toml(&config)?;

        let c = r.header("labels", 1)?[0];
        let labels = (0..c)
            .map(|_| r.next().map(unescape))
            .collect::<Result<Vec<_>, _>>()?;

        let v = r.header("vocab", 1)?[0];
        let tokens = (0..v)
            .map(|_| r.next().map(unescape))
            .collect::<Result<Vec<_>, _>>()?;
        if tokens.len() < 2 {
            return r.fail("vocabulary lacks the reserved tokens");
        }
        let vocab = Vocabulary::from_tokens(tokens[2..].iter().cloned());
        if vocab.tokens() != tokens.as_slice() {
            return r.fail("vocabulary is not in canonical form");
        }

        let dims = r.header("embeddings", 2)?;
        if dims[0] != vocab.len() {
            return r.fail(&format!(
                "embedding table has {} rows for a vocabulary of {}",
                dims[0],
                vocab.len()
            ));
        }
        let mut matrix = Vec::with_capacity(dims[0] * dims[1]);
        for _ in 0..dims[0] {
            matrix.extend(r.floats(dims[1])?);
        }
        let table = EmbeddingTable::from_matrix(Tensor::new(&[dims[0], dims[1]], matrix)?)?;

        let line = r.next()?;
        let parts: Vec<&str> = line.split(' ').collect();
        let (activation, learners) = match parts.as_slice() {
            ["model", act, n] => match (ConvActivation::from_name(act), n.parse::<usize>()) {
                (Ok(a), Ok(n)) => (a, n),
                _ => return r.fail("malformed model line"),
            },
            _ => return r.fail("expected model line"),
        };

        let mut out = Vec::with_capacity(learners);
        for _ in 0..learners {
            let d = r.header("learner", 4)?;
            let spec = LearnerSpec {
                kernel_size: d[0],
                filters: d[1],
                units: d[2],
                attention_dim: d[3],
            };
            let mut params =
                LearnerParams::glorot(&spec, table.dim(), labels.len(), &mut seeded_rng(0))?;
            let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
            for (name, slot) in names.iter().zip(params.tensors_mut()) {
                let line = r.next()?;
                let mut fields = line.split(' ');
                if fields.next() != Some("tensor") || fields.next() != Some(name.as_str()) {
                    return r.fail(&format!("expected tensor {name}"));
                }
                let shape = fields
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .or_else(|_| r.fail("malformed tensor shape"))?;
                if shape != slot.shape() {
                    return r.fail(&format!(
                        "tensor {name} has shape {shape:?}, expected {:?}",
                        slot.shape()
                    ));
                }
                let data = r.floats(slot.numel())?;
                slot.data_mut().copy_from_slice(&data);
            }
            out.push(Learner { spec, params });
        }
        if r.next()? != "end" {
            return r.fail("expected end marker");
        }
        let model = EnsembleModel::from_parts(out, table, labels, activation)?;
        Ok(Self { config, vocab, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:?}").unwrap();
    }
    out.push('\n');
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some(c) => out.push(c),
            None => out.push('\\'),
        }
    }
    out
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines(),
            line: 0,
        }
    }

    fn fail<T>(&self, msg: &str) -> Result<T, CliError> {
        Err(CliError::Usage(format!("checkpoint line {}: {msg}", self.line)))
    }

    fn next(&mut self) -> Result<&'a str, CliError> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l),
            None => self.fail("unexpected end of file"),
        }
    }

    fn header(&mut self, keyword: &str, count: usize) -> Result<Vec<usize>, CliError> {
        let line = self.next()?;
        let mut fields = line.split(' ');
        if fields.next() != Some(keyword) {
            return self.fail(&format!("expected {keyword} section"));
        }
        let values = fields
            .map(|f| f.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .or_else(|_| self.fail(&format!("malformed {keyword} header")))?;
        if values.len() != count {
            return self.fail(&format!("malformed {keyword} header"));
        }
        Ok(values)
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>, CliError> {
        let line = self.next()?;
        let values = line
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .or_else(|_| self.fail("malformed number"))?;
        if values.len() != count {
            return self.fail(&format!("{} values, expected {count}", values.len()));
        }
        Ok(values)
    }
}
