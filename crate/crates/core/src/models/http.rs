//! OpenAI-compatible chat-completions backend.
//!
//! Requests ask for a single answer token at temperature 0 with
//! log-probabilities. The target-label probability is the summed mass of all
//! top candidates that equal the label after trimming and lowercasing. When
//! the endpoint returns no log-probabilities, the answer text is mapped to 1.0
//! or 0.0 and the prediction is flagged as a fallback.

use std::time::Duration;

use log::debug;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{AnswerLabels, EndpointConfig, ModelError};
use crate::segment::Answer;

const MAX_RETRIES: u32 = 3;

#[derive(Debug)]
pub struct HttpChatBackend {
    client: Client,
    url: String,
    model_id: String,
    token: Option<String>,
    labels: AnswerLabels,
    top_logprobs: u8,
    backoff: Duration,
}

/// Raw outcome of one chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatAnswer {
    pub probability: f64,
    pub payload_hash: String,
    pub fallback: bool,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<Message>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize, Serialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

impl HttpChatBackend {
    pub fn new(
        model_id: &str,
        endpoint: &EndpointConfig,
        labels: &AnswerLabels,
    ) -> Result<Self, ModelError> {
        let token = match &endpoint.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ModelError::InvalidSpec(format!("auth environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        Ok(HttpChatBackend {
            client,
            url: format!(
                "{}/v1/chat/completions",
                endpoint.base_url.trim_end_matches('/')
            ),
            model_id: model_id.to_string(),
            token,
            labels: labels.clone(),
            top_logprobs: endpoint.top_logprobs,
            backoff: Duration::from_millis(endpoint.retry_backoff_ms),
        })
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "logprobs": true,
            "top_logprobs": self.top_logprobs,
            "max_tokens": 1,
            "temperature": 0,
        })
    }

    pub fn ask(&self, prompt: &str, label: Answer) -> Result<ChatAnswer, ModelError> {
        let body = self.request_body(prompt);
        let mut attempt = 0;
        loop {
            match self.send(&body) {
                Ok(text) => return self.parse(&text, label),
                Err(Retry::Fatal(e)) => return Err(e),
                Err(Retry::Transient(msg)) if attempt < MAX_RETRIES => {
                    let wait = self.backoff * 2u32.pow(attempt);
                    debug!("chat request failed ({msg}); retry {} in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(Retry::Transient(msg)) => {
                    return Err(ModelError::Network(format!(
                        "{msg} (gave up after {MAX_RETRIES} retries)"
                    )))
                }
            }
        }
    }

    fn send(&self, body: &serde_json::Value) -> Result<String, Retry> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| Retry::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Retry::Transient(e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if status.as_u16() == 429 || status.is_server_error() {
            Err(Retry::Transient(format!("HTTP {status}")))
        } else {
            Err(Retry::Fatal(ModelError::Network(format!("HTTP {status}: {text}"))))
        }
    }

    fn parse(&self, text: &str, label: Answer) -> Result<ChatAnswer, ModelError> {
        let payload_hash = hex::encode(Sha256::digest(text.as_bytes()));
        let resp: ChatResponse = serde_json::from_str(text)
            .map_err(|e| ModelError::Unparseable(format!("bad response body: {e}")))?;
        let choice = resp
            .choices
            .first()
            .ok_or_else(|| ModelError::Unparseable("response has no choices".into()))?;
        let wanted = self.labels.for_answer(label);
        let other = self.labels.for_answer(match label {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        });

        let first = choice
            .logprobs
            .as_ref()
            .and_then(|l| l.content.as_ref())
            .and_then(|c| c.first());
        if let Some(tok) = first {
            let mut candidates: Vec<(&str, f64)> = tok
                .top_logprobs
                .iter()
                .map(|t| (t.token.as_str(), t.logprob))
                .collect();
            if !candidates.iter().any(|(t, _)| *t == tok.token) {
                candidates.push((tok.token.as_str(), tok.logprob));
            }
            let mut mass = 0.0;
            let mut recognized = false;
            for (t, lp) in candidates {
                let norm = t.trim().to_lowercase();
                if norm == wanted {
                    mass += lp.exp();
                    recognized = true;
                } else if norm == other {
                    recognized = true;
                }
            }
            if !recognized {
                return Err(ModelError::Unparseable(format!(
                    "no '{}' or '{}' among the first-token candidates",
                    self.labels.yes, self.labels.no
                )));
            }
            return Ok(ChatAnswer {
                probability: mass.clamp(0.0, 1.0),
                payload_hash,
                fallback: false,
            });
        }

        let content = choice
            .message
            .as_ref()
            .and_then(|m| m.content.as_deref())
            .unwrap_or("");
        let answer = content
            .trim()
            .trim_end_matches(|c: char| c.is_ascii_punctuation())
            .to_lowercase();
        let probability = if answer.starts_with(&wanted) {
            1.0
        } else if answer.starts_with(&other) {
            0.0
        } else {
            return Err(ModelError::Unparseable(format!(
                "answer text {content:?} is neither label"
            )));
        };
        Ok(ChatAnswer {
            probability,
            payload_hash,
            fallback: true,
        })
    }
}

enum Retry {
    Transient(String),
    Fatal(ModelError),
}
