//! Append-only JSONL response cache.
//!
//! Each line is `{"key": <sha256 hex>, "p": <probability>, "ts": <unix seconds>}`.
//! The whole file is loaded at startup; on duplicate keys the last line wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::segment::Answer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub p: f64,
    pub ts: u64,
}

#[derive(Debug, Default)]
pub struct QueryCache {
    entries: RwLock<HashMap<String, CacheRecord>>,
    writer: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl QueryCache {
    pub fn in_memory() -> Self {
        QueryCache::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| cache_err(path, e))?;
            for (lineno, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| cache_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                    ModelError::Cache(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                entries.insert(rec.key.clone(), rec);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| cache_err(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(path, e))?;
        Ok(QueryCache {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.read().unwrap().get(key).map(|r| r.p)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: &str, p: f64) -> Result<(), ModelError> {
        let rec = CacheRecord {
            key: key.to_string(),
            p,
            ts: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        if let Some(w) = &self.writer {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            let mut f = w.lock().unwrap();
            f.write_all(line.as_bytes())
                .map_err(|e| ModelError::Cache(e.to_string()))?;
        }
        self.entries.write().unwrap().insert(rec.key.clone(), rec);
        Ok(())
    }
}

fn cache_err(path: &Path, e: std::io::Error) -> ModelError {
    ModelError::Cache(format!("{}: {e}", path.display()))
}

/// Collapse runs of spaces/tabs and trim each line; drop trailing blank lines.
pub fn canonicalize(prompt: &str) -> String {
    let lines: Vec<String> = prompt
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    lines.join("\n").trim_end().to_string()
}

/// SHA-256 over model id, target label and the canonical prompt.
pub fn cache_key(model_id: &str, label: Answer, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(label.as_str().as_bytes());
    h.update([0u8]);
    h.update(canonicalize(prompt).as_bytes());
    hex::encode(h.finalize())
}
