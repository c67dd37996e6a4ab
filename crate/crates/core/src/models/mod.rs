//! Black-box text → probability oracles with caching and token budgets.
//!
//! A [`ModelClient`] renders a [`Query`] through its prompt template, looks it
//! up in the shared [`QueryCache`], charges the [`Budget`] on a miss and asks
//! the backend. Cache hits are free. Batches return results in input order
//! and charge the budget in input order too, so the ledger does not depend on
//! how many worker threads ran the batch.

mod budget;
mod cache;
mod http;
mod synthetic;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use budget::{k_max, Budget, BudgetSnapshot};
pub use cache::{cache_key, canonicalize, CacheRecord, QueryCache};
pub use http::{ChatAnswer, HttpChatBackend};
pub use synthetic::{normalize_word, SyntheticModel};

use crate::segment::Answer;

pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "Read the document and answer the question with yes or no.\n\nDocument:\n{document}\n\nQuestion: {question}\nAnswer:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token budget exhausted: {consumed} of {limit} used, next query needs {requested}")]
    BudgetExhausted {
        limit: u64,
        consumed: u64,
        requested: u64,
    },
    #[error("network error: {0}")]
    Network(String),
    #[error("unparseable model response: {0}")]
    Unparseable(String),
    #[error("rendered prompt is empty")]
    EmptyPrompt,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl ModelError {
    pub fn is_budget(&self) -> bool {
        matches!(self, ModelError::BudgetExhausted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u8,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_max_parallel() -> usize {
    4
}
fn default_top_logprobs() -> u8 {
    20
}
fn default_backoff() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerLabels {
    #[serde(default = "default_yes")]
    pub yes: String,
    #[serde(default = "default_no")]
    pub no: String,
}

fn default_yes() -> String {
    "yes".into()
}
fn default_no() -> String {
    "no".into()
}

impl Default for AnswerLabels {
    fn default() -> Self {
        AnswerLabels {
            yes: default_yes(),
            no: default_no(),
        }
    }
}

impl AnswerLabels {
    /// Lowercased label string for `answer`.
    pub fn for_answer(&self, answer: Answer) -> String {
        match answer {
            Answer::Yes => self.yes.trim().to_lowercase(),
            Answer::No => self.no.trim().to_lowercase(),
        }
    }
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub role: Role,
    pub backend: BackendKind,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub answer: AnswerLabels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticModel>,
    /// Must contain `{document}`; `{question}` is optional.
    #[serde(default = "default_template")]
    pub prompt_template: String,
}

impl ModelSpec {
    pub fn synthetic(role: Role, model_id: impl Into<String>, model: SyntheticModel) -> Self {
        ModelSpec {
            role,
            backend: BackendKind::Synthetic,
            model_id: model_id.into(),
            endpoint: None,
            answer: AnswerLabels::default(),
            synthetic: Some(model),
            prompt_template: default_template(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(format!("{}: {m}", self.model_id)));
        if self.model_id.trim().is_empty() {
            return Err(ModelError::InvalidSpec("model_id is empty".into()));
        }
        if !self.prompt_template.contains("{document}") {
            return bad("prompt_template has no {document} placeholder".into());
        }
        match self.backend {
            BackendKind::HttpChat => {
                if self.synthetic.is_some() {
                    return bad("http_chat backend must not carry a synthetic definition".into());
                }
                match &self.endpoint {
                    None => return bad("http_chat backend requires an endpoint".into()),
                    Some(e) if e.base_url.is_empty() => return bad("endpoint.base_url is empty".into()),
                    Some(e) if e.max_parallel == 0 => return bad("endpoint.max_parallel must be >= 1".into()),
                    Some(e) if !(e.timeout_secs > 0.0) => return bad("endpoint.timeout_secs must be > 0".into()),
                    Some(_) => {}
                }
            }
            BackendKind::Synthetic => {
                if self.endpoint.is_some() {
                    return bad("synthetic backend must not carry an endpoint".into());
                }
                match &self.synthetic {
                    None => return bad("synthetic backend requires a synthetic definition".into()),
                    Some(s) => s.validate().map_err(|m| ModelError::InvalidSpec(format!("{}: {m}", self.model_id)))?,
                }
            }
        }
        Ok(())
    }

    pub fn render(&self, document: &str, question: &str) -> String {
        self.prompt_template
            .replace("{question}", question)
            .replace("{document}", document)
    }
}

/// One oracle call: the (possibly perturbed) document, the question and the
/// label whose probability is wanted.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub document: &'a str,
    pub question: &'a str,
    pub label: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Probability of the query's target label.
    pub probability: f64,
    /// SHA-256 of the raw response payload, when the backend produced one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_hash: Option<String>,
    /// Answer text was mapped to 0/1 because no log-probabilities came back.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub cached: bool,
}

/// Whitespace-token count of a fully rendered prompt.
pub fn cost(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchError {
    /// Results for `0..index`.
    pub completed: Vec<Prediction>,
    pub index: usize,
    pub error: ModelError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub hits: u64,
    pub misses: u64,
}

enum Backend {
    Synthetic(SyntheticModel),
    Http(HttpChatBackend),
}

pub struct ModelClient {
    spec: ModelSpec,
    backend: Backend,
    cache: Arc<QueryCache>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelClient")
            .field("model_id", &self.spec.model_id)
            .field("backend", &self.spec.backend)
            .finish()
    }
}

enum Slot {
    Hit(f64),
    Dispatch,
    Same(usize),
}

impl ModelClient {
    pub fn new(spec: ModelSpec, cache: Arc<QueryCache>) -> Result<Self, ModelError> {
        spec.validate()?;
        let backend = match spec.backend {
            BackendKind::Synthetic => Backend::Synthetic(spec.synthetic.clone().expect("validated")),
            BackendKind::HttpChat => Backend::Http(HttpChatBackend::new(
                &spec.model_id,
                spec.endpoint.as_ref().expect("validated"),
                &spec.answer,
            )?),
        };
        Ok(ModelClient {
            spec,
            backend,
            cache,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn model_id(&self) -> &str {
        &self.spec.model_id
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn render(&self, q: &Query<'_>) -> String {
        self.spec.render(q.document, q.question)
    }

    pub fn cost(&self, q: &Query<'_>) -> u64 {
        cost(&self.render(q))
    }

    pub fn query(&self, q: &Query<'_>, budget: &Budget) -> Result<Prediction, ModelError> {
        self.batch_query(std::slice::from_ref(q), budget, 1)
            .map(|mut v| v.remove(0))
            .map_err(|e| e.error)
    }

    /// Query every item, at most `parallelism` at a time. On failure the
    /// error carries the in-order prefix that completed before it.
    pub fn batch_query(
        &self,
        queries: &[Query<'_>],
        budget: &Budget,
        parallelism: usize,
    ) -> Result<Vec<Prediction>, BatchError> {
        let prompts: Vec<String> = queries.iter().map(|q| self.render(q)).collect();
        let keys: Vec<String> = queries
            .iter()
            .zip(&prompts)
            .map(|(q, p)| cache_key(&self.spec.model_id, q.label, p))
            .collect();

        // Resolve hits and charge misses strictly in input order.
        let mut slots: Vec<Slot> = Vec::with_capacity(queries.len());
        let mut first_seen: HashMap<&str, usize> = HashMap::new();
        let mut stop: Option<(usize, ModelError)> = None;
        for (i, (prompt, key)) in prompts.iter().zip(&keys).enumerate() {
            if prompt.trim().is_empty() {
                stop = Some((i, ModelError::EmptyPrompt));
                break;
            }
            if let Some(p) = self.cache.get(key) {
                slots.push(Slot::Hit(p));
                continue;
            }
            if let Some(&j) = first_seen.get(key.as_str()) {
                slots.push(Slot::Same(j));
                continue;
            }
            if let Err(e) = budget.try_charge(&self.spec.model_id, cost(prompt)) {
                stop = Some((i, e));
                break;
            }
            first_seen.insert(key, i);
            slots.push(Slot::Dispatch);
        }

        let jobs: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Dispatch))
            .map(|(i, _)| i)
            .collect();
        let results: Vec<Mutex<Option<Result<Prediction, ModelError>>>> =
            (0..slots.len()).map(|_| Mutex::new(None)).collect();
        let workers = parallelism.max(1).min(self.max_parallel()).min(jobs.len().max(1));
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = jobs.get(j) else { break };
                    let r = self.call(&prompts[i], queries[i]);
                    if let Ok(p) = &r {
                        if let Err(e) = self.cache.put(&keys[i], p.probability) {
                            log::warn!("could not persist cache entry: {e}");
                        }
                    }
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });

        let mut out = Vec::with_capacity(slots.len());
        for (i, slot) in slots.iter().enumerate() {
            let pred = match slot {
                Slot::Hit(p) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    Ok(Prediction {
                        probability: *p,
                        payload_hash: None,
                        fallback: false,
                        cached: true,
                    })
                }
                Slot::Dispatch => {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    results[i].lock().unwrap().take().expect("every job ran")
                }
                Slot::Same(j) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    out.get(*j).cloned().map(|p: Prediction| Prediction { cached: true, ..p }).ok_or_else(
                        || ModelError::Network("duplicate of a failed query".into()),
                    )
                }
            };
            match pred {
                Ok(p) => out.push(p),
                Err(error) => {
                    return Err(BatchError {
                        completed: out,
                        index: i,
                        error,
                    })
                }
            }
        }
        if let Some((index, error)) = stop {
            return Err(BatchError {
                completed: out,
                index,
                error,
            });
        }
        Ok(out)
    }

    fn max_parallel(&self) -> usize {
        match &self.spec.endpoint {
            Some(e) => e.max_parallel.max(1),
            None => usize::MAX,
        }
    }

    fn call(&self, prompt: &str, q: Query<'_>) -> Result<Prediction, ModelError> {
        match &self.backend {
            Backend::Synthetic(m) => {
                let yes = m.p_yes(q.document);
                let p = match q.label {
                    Answer::Yes => yes,
                    Answer::No => 1.0 - yes,
                };
                Ok(Prediction {
                    probability: p,
                    payload_hash: None,
                    fallback: false,
                    cached: false,
                })
            }
            Backend::Http(h) => {
                let a = h.ask(prompt, q.label)?;
                Ok(Prediction {
                    probability: a.probability,
                    payload_hash: Some(a.payload_hash),
                    fallback: a.fallback,
                    cached: false,
                })
            }
        }
    }
}
