//! Deterministic stand-in models whose output depends only on which trigger
//! words are present in the document.
//!
//! Words are compared after lowercasing and trimming non-alphanumeric
//! characters from both ends, so `"Illinois."` matches the trigger `illinois`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticModel {
    /// `p_on` when every keyword is present, `p_off` otherwise.
    KeywordAnd {
        keywords: Vec<String>,
        p_on: f64,
        p_off: f64,
    },
    /// `sigmoid(bias + sum of weights of present words)`.
    WeightedLinear {
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        bias: f64,
    },
    /// `p_on` when at least `threshold` (a fraction) of the clause words are present.
    Clause {
        words: Vec<String>,
        threshold: f64,
        p_on: f64,
        p_off: f64,
    },
}

pub fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

impl SyntheticModel {
    /// Normalized trigger vocabulary.
    pub fn triggers(&self) -> Vec<String> {
        match self {
            SyntheticModel::KeywordAnd { keywords, .. } => {
                keywords.iter().map(|k| normalize_word(k)).collect()
            }
            SyntheticModel::WeightedLinear { weights, .. } => {
                weights.keys().map(|k| normalize_word(k)).collect()
            }
            SyntheticModel::Clause { words, .. } => words.iter().map(|k| normalize_word(k)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} = {v} is not a probability"))
            }
        };
        match self {
            SyntheticModel::KeywordAnd {
                keywords,
                p_on,
                p_off,
            } => {
                if keywords.is_empty() {
                    return Err("keyword_and needs at least one keyword".into());
                }
                prob("p_on", *p_on)?;
                prob("p_off", *p_off)
            }
            SyntheticModel::WeightedLinear { weights, bias } => {
                if weights.values().chain(std::iter::once(bias)).any(|v| !v.is_finite()) {
                    return Err("weighted_linear weights must be finite".into());
                }
                Ok(())
            }
            SyntheticModel::Clause {
                words,
                threshold,
                p_on,
                p_off,
            } => {
                if words.is_empty() {
                    return Err("clause needs at least one word".into());
                }
                if !(0.0..=1.0).contains(threshold) {
                    return Err(format!("threshold = {threshold} is not in [0, 1]"));
                }
                prob("p_on", *p_on)?;
                prob("p_off", *p_off)
            }
        }
    }

    /// Probability of "yes" given the document text.
    pub fn p_yes(&self, document: &str) -> f64 {
        let triggers: HashSet<String> = self.triggers().into_iter().collect();
        let present: HashSet<String> = document
            .split_whitespace()
            .map(normalize_word)
            .filter(|w| triggers.contains(w))
            .collect();
        match self {
            SyntheticModel::KeywordAnd {
                keywords,
                p_on,
                p_off,
            } => {
                if keywords.iter().all(|k| present.contains(&normalize_word(k))) {
                    *p_on
                } else {
                    *p_off
                }
            }
            SyntheticModel::WeightedLinear { weights, bias } => {
                let normalized: HashMap<String, f64> = weights
                    .iter()
                    .map(|(k, v)| (normalize_word(k), *v))
                    .collect();
                let z = bias + present.iter().map(|w| normalized[w]).sum::<f64>();
                1.0 / (1.0 + (-z).exp())
            }
            SyntheticModel::Clause {
                words,
                threshold,
                p_on,
                p_off,
            } => {
                let hit = words
                    .iter()
                    .filter(|w| present.contains(&normalize_word(w)))
                    .count();
                if hit as f64 >= threshold * words.len() as f64 {
                    *p_on
                } else {
                    *p_off
                }
            }
        }
    }
}
