//! Synthetic benchmark: filler documents with the model's trigger words
//! planted as one contiguous run inside a single sentence.
//!
//! The evidence span of each document covers exactly that run. Filler words
//! are pronounceable nonsense drawn from a vocabulary that never contains a
//! trigger.

use std::collections::BTreeSet;

use focal_core::models::{normalize_word, ModelSpec, Role, SyntheticModel};
use focal_core::rng::SeedRng;
use focal_core::segment::{Answer, Span};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::DatasetRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// A sentence chosen uniformly at random per document.
    RandomSentence,
    /// A fixed sentence index (0-based over the whole document).
    Sentence { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub docs: usize,
    pub words_per_doc: usize,
    pub model: SyntheticModel,
    #[serde(default = "d_sentence_words")]
    pub sentence_words: usize,
    #[serde(default = "d_sentences_per_paragraph")]
    pub sentences_per_paragraph: usize,
    #[serde(default = "d_placement")]
    pub placement: Placement,
    /// Extra documents without any trigger word.
    #[serde(default)]
    pub control_docs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_question")]
    pub question: String,
    #[serde(default = "d_answer")]
    pub answer: Answer,
    #[serde(default = "d_vocabulary")]
    pub vocabulary: usize,
    /// Target budget written into the generated config, in full-document queries.
    #[serde(default = "d_target_queries")]
    pub target_queries: u64,
}

fn d_sentence_words() -> usize {
    12
}
fn d_sentences_per_paragraph() -> usize {
    5
}
fn d_placement() -> Placement {
    Placement::RandomSentence
}
fn d_question() -> String {
    "Does the contract name the law that governs it?".into()
}
fn d_answer() -> Answer {
    Answer::Yes
}
fn d_vocabulary() -> usize {
    400
}
fn d_target_queries() -> u64 {
    200
}

pub struct Suite {
    pub records: Vec<DatasetRecord>,
    pub model: SyntheticModel,
    pub config: RunConfig,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        let triggers = self.model.triggers();
        if triggers.iter().any(|t| t.is_empty()) {
            return Err("trigger words must contain letters or digits".into());
        }
        if self.sentence_words < triggers.len() {
            return Err(format!(
                "sentence_words ({}) cannot hold {} trigger words",
                self.sentence_words,
                triggers.len()
            ));
        }
        if self.words_per_doc < self.sentence_words {
            return Err("words_per_doc must be at least sentence_words".into());
        }
        if self.sentences_per_paragraph == 0 || !(2..=100_000).contains(&self.vocabulary) {
            return Err("sentences_per_paragraph >= 1 and vocabulary in 2..=100000 required".into());
        }
        if let Placement::Sentence { index } = self.placement {
            let full = self.words_per_doc / self.sentence_words;
            if index >= full {
                return Err(format!("placement sentence {index} does not exist (only {full} full sentences)"));
            }
        }
        Ok(())
    }
}

fn vocabulary(rng: &mut SeedRng, size: usize, banned: &BTreeSet<String>) -> Vec<String> {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
    ];
    const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let syllables = 2 + rng.below(2);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.below(ONSETS.len() as u64) as usize],
                    NUCLEI[rng.below(NUCLEI.len() as u64) as usize]
                )
            })
            .collect();
        if !banned.contains(&normalize_word(&w)) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Builds one document; returns the text and the evidence span (if triggers were placed).
fn document(
    spec: &SynthSpec,
    rng: &mut SeedRng,
    vocab: &[String],
    triggers: &[String],
) -> (String, Option<Span>) {
    let n = spec.words_per_doc;
    let sw = spec.sentence_words;
    let mut words: Vec<String> = (0..n)
        .map(|_| vocab[rng.below(vocab.len() as u64) as usize].clone())
        .collect();
    let full_sentences = n / sw;
    let planted = if triggers.is_empty() {
        None
    } else {
        let s = match spec.placement {
            Placement::RandomSentence => rng.below(full_sentences as u64) as usize,
            Placement::Sentence { index } => index,
        };
        let offset = rng.below((sw - triggers.len() + 1) as u64) as usize;
        let first = s * sw + offset;
        for (j, t) in triggers.iter().enumerate() {
            words[first + j] = t.clone();
        }
        Some((first, first + triggers.len()))
    };

    let mut text = String::new();
    let mut evidence = None;
    let mut ev_start = 0;
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            let paragraph_start = i % (sw * spec.sentences_per_paragraph) == 0;
            text.push_str(if paragraph_start { "\n\n" } else { " " });
        }
        if planted.map(|(a, _)| a) == Some(i) {
            ev_start = text.len();
        }
        text.push_str(w);
        if (i + 1) % sw == 0 || i + 1 == n {
            text.push('.');
        }
        if planted.map(|(_, b)| b) == Some(i + 1) {
            evidence = Some(Span {
                start: ev_start,
                end: text.len(),
            });
        }
    }
    (text, evidence)
}

pub fn generate(spec: &SynthSpec) -> Result<Suite, String> {
    spec.validate()?;
    let triggers = spec.model.triggers();
    let banned: BTreeSet<String> = triggers.iter().cloned().collect();
    let mut rng = SeedRng::new(spec.seed);
    let vocab = vocabulary(&mut rng, spec.vocabulary, &banned);

    let mut records = Vec::with_capacity(spec.docs + spec.control_docs);
    for i in 0..spec.docs + spec.control_docs {
        let control = i >= spec.docs;
        let planted: &[String] = if control { &[] } else { &triggers };
        let (document, evidence) = self::document(spec, &mut rng, &vocab, planted);
        records.push(DatasetRecord {
            id: if control {
                format!("ctrl-{:04}", i - spec.docs)
            } else {
                format!("doc-{i:04}")
            },
            document,
            question: spec.question.clone(),
            answer: spec.answer,
            evidence: evidence.into_iter().collect(),
        });
    }

    let mut config = RunConfig::new(
        ModelSpec::synthetic(Role::Target, "synthetic-target", spec.model.clone()),
        ModelSpec::synthetic(Role::Proxy, "synthetic-proxy", spec.model.clone()),
    );
    config.budget.target_queries = Some(spec.target_queries);
    config.seed = spec.seed;
    Ok(Suite {
        records,
        model: spec.model.clone(),
        config,
    })
}
