//! Per-record output bundles and crash-safe file writes.

use std::io::Write;
use std::path::Path;

use focal_core::focus::{BudgetReport, Explanation, FitDiagnostics, Method, ScoutTrace};
use focal_core::segment::{Answer, Document, Span};
use focal_core::surrogate::{Attribution, Provenance};
use serde::{Deserialize, Serialize};

/// Write via a temp file in the same directory, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitOut {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub method: Method,
    pub seed: u64,
    pub question: String,
    pub answer: Answer,
    pub provenance: Vec<Provenance>,
    /// Unit indices followed by a paragraph break.
    pub paragraph_breaks: Vec<usize>,
    pub evidence: Vec<Span>,
    pub fit: FitDiagnostics,
    pub scout: Option<ScoutTrace>,
    pub budget: BudgetReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub id: String,
    pub scores: Vec<f64>,
    pub units: Vec<UnitOut>,
    pub focus_mask: Vec<u8>,
    pub diagnostics: Diagnostics,
}

impl ExplanationRecord {
    pub fn new(doc: &Document, e: &Explanation, seed: u64) -> Self {
        ExplanationRecord {
            id: doc.id.clone(),
            scores: e.attribution.scores.clone(),
            units: doc
                .units
                .iter()
                .map(|u| UnitOut {
                    start: u.start,
                    end: u.end,
                    surface: u.surface.clone(),
                })
                .collect(),
            focus_mask: e.focus_mask.to_u8(),
            diagnostics: Diagnostics {
                method: e.method,
                seed,
                question: doc.meta.question.clone(),
                answer: doc.meta.answer,
                provenance: e.attribution.provenance.clone(),
                paragraph_breaks: (0..doc.len()).filter(|&i| doc.paragraph_break_after(i)).collect(),
                evidence: doc.meta.evidence.clone(),
                fit: e.fit.clone(),
                scout: e.scout.clone(),
                budget: e.budget.clone(),
            },
        }
    }

    pub fn attribution(&self) -> Attribution {
        Attribution {
            scores: self.scores.clone(),
            provenance: self.diagnostics.provenance.clone(),
        }
    }

    /// Checks that the record describes `doc` (same word units).
    pub fn matches(&self, doc: &Document) -> bool {
        self.units.len() == doc.len()
            && self.scores.len() == doc.len()
            && self
                .units
                .iter()
                .zip(&doc.units)
                .all(|(a, b)| a.start == b.start && a.end == b.end && a.surface == b.surface)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
