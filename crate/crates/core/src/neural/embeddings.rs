//! Pretrained word vectors in the plain-text format used by word2vec and GloVe:
//! an optional `count dim` header, then `word v1 v2 ... vdim` per line.

use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{CoherenceError, Result};

#[derive(Clone, Debug, Default)]
pub struct PretrainedEmbeddings {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl PretrainedEmbeddings {
    pub fn from_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = PretrainedEmbeddings::default();
        let mut dim: Option<usize> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() {
                continue;
            }
            // "count dim" header
            if i == 0 && cols.len() == 2 && cols.iter().all(|c| c.parse::<usize>().is_ok()) {
                dim = Some(cols[1].parse().expect("checked above"));
                continue;
            }
            let values = &cols[1..];
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected {
                return Err(CoherenceError::Parse {
                    line: i + 1,
                    message: format!("expected {expected} values, found {}", values.len()),
                });
            }
            let word = cols[0].to_lowercase();
            if out.index.contains_key(&word) {
                log::warn!("line {}: duplicate vector for {word:?} ignored", i + 1);
                continue;
            }
            let start = out.vectors.len();
            for v in values {
                out.vectors.push(v.parse::<f64>().map_err(|e| CoherenceError::Parse {
                    line: i + 1,
                    message: format!("bad value {v:?}: {e}"),
                })?);
            }
            out.index.insert(word, start / expected.max(1));
        }
        out.dim = dim.unwrap_or(0);
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        let &row = self.index.get(word)?;
        Some(&self.vectors[row * self.dim..(row + 1) * self.dim])
    }
}
