//! JSON-lines corpora.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conversation::Thread;
use crate::error::{CoherenceError, Result};
use crate::grid::AnnotatedDocument;

/// Reads one record per non-blank line; errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoherenceError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_documents<R: BufRead>(reader: R) -> Result<Vec<AnnotatedDocument>> {
    let docs: Vec<AnnotatedDocument> = read_jsonl(reader)?;
    for (i, d) in docs.iter().enumerate() {
        d.validate().map_err(|e| CoherenceError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(docs)
}

pub fn read_threads<R: BufRead>(reader: R) -> Result<Vec<Thread>> {
    let threads: Vec<Thread> = read_jsonl(reader)?;
    for (i, t) in threads.iter().enumerate() {
        t.validate().map_err(|e| CoherenceError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(threads)
}
