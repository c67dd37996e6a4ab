//! JSON-lines dataset records.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use focal_core::segment::{Answer, DocMeta, Document, Span};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub document: String,
    pub question: String,
    pub answer: Answer,
    /// UTF-8 byte ranges into `document`.
    #[serde(default)]
    pub evidence: Vec<Span>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.id.contains(['/', '\\']) || self.id == "." || self.id == ".." {
            return Err(format!("id {:?} is not usable as a file name", self.id));
        }
        for s in &self.evidence {
            if s.start >= s.end || s.end > self.document.len() {
                return Err(format!(
                    "evidence span {}..{} is outside the document ({} bytes)",
                    s.start,
                    s.end,
                    self.document.len()
                ));
            }
            if !self.document.is_char_boundary(s.start) || !self.document.is_char_boundary(s.end) {
                return Err(format!("evidence span {}..{} splits a character", s.start, s.end));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> Document {
        Document::new(
            self.id.clone(),
            self.document.clone(),
            DocMeta {
                question: self.question.clone(),
                answer: self.answer,
                evidence: self.evidence.clone(),
            },
        )
    }
}

pub fn load(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let shown = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Record {
            path: shown.clone(),
            line: i + 1,
            message,
        };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        rec.validate().map_err(bad)?;
        if !seen.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write(path: &Path, records: &[DatasetRecord]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    crate::output::write_atomic(path, &buf)
}
