//! Remote HTTP backend speaking a completions-style JSON protocol.
//!
//! Request: `POST {base_url}/completions` with `model`, `prompt`,
//! `max_tokens`, `temperature`, `top_p`, `logprobs`, `echo`, `stop`, and
//! `seed`. Response: a `choices` array whose first entry carries `text`
//! and a `logprobs` object with parallel `tokens`, `token_logprobs`,
//! `top_logprobs`, and `text_offset` arrays.

use super::{Backend, Completion, DecodingMode, DecodingParams, GatewayError, TokenScore};
use serde::Deserialize;
use serde_json::json;
use std::time::Duration;

/// How many top alternatives to request when scoring choice labels.
const LABEL_TOP_LOGPROBS: u32 = 50;

pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<serde_json::Map<String, serde_json::Value>>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    fn post(&self, body: serde_json::Value) -> Result<CompletionsResponse, GatewayError> {
        let url = format!("{}/completions", self.base_url);
        let mut req = self.agent.post(&url).set("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Status(code, r) => GatewayError::ProtocolViolation(format!(
                "HTTP {code} from {url}: {}",
                r.into_string().unwrap_or_default()
            )),
            ureq::Error::Transport(t) => GatewayError::BackendUnreachable(t.to_string()),
        })?;
        let parsed: CompletionsResponse = resp
            .into_json()
            .map_err(|e| GatewayError::ProtocolViolation(format!("bad response body: {e}")))?;
        if parsed.choices.is_empty() {
            return Err(GatewayError::ProtocolViolation("empty choices array".into()));
        }
        Ok(parsed)
    }

    fn request_body(&self, prompt: &str, params: &DecodingParams) -> serde_json::Value {
        let temperature = match params.mode {
            DecodingMode::Greedy => 0.0,
            _ => params.temperature,
        };
        if params.mode == DecodingMode::BeamSearch {
            // Completions-style servers rarely expose beam search; degrade
            // to best-of-n sampling.
            log::warn!(
                "backend does not expose beam search; degrading to best_of={} sampling",
                params.beam_width.unwrap_or(4)
            );
        }
        let mut body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": temperature,
            "top_p": params.top_p,
            "logprobs": 0,
            "echo": false,
            "stop": params.stop_sequences,
            "seed": params.seed,
        });
        if params.mode == DecodingMode::BeamSearch {
            body["best_of"] = json!(params.beam_width.unwrap_or(4));
        }
        if let Some(k) = params.top_k {
            body["top_k"] = json!(k);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<Completion, GatewayError> {
        let resp = self.post(self.request_body(prompt, params))?;
        let choice = &resp.choices[0];
        let lp = choice.logprobs.as_ref().ok_or_else(|| {
            GatewayError::ProtocolViolation("response is missing token logprobs".into())
        })?;
        if lp.tokens.len() != lp.token_logprobs.len() {
            return Err(GatewayError::ProtocolViolation(
                "tokens and token_logprobs length mismatch".into(),
            ));
        }
        let tokens = lp
            .tokens
            .iter()
            .zip(&lp.token_logprobs)
            .map(|(t, l)| TokenScore {
                token: t.clone(),
                logprob: l.unwrap_or(f64::NEG_INFINITY),
            })
            .collect();
        Ok(Completion {
            text: choice.text.clone(),
            tokens,
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }

    fn candidate_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, GatewayError> {
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "top_p": 1.0,
            "logprobs": LABEL_TOP_LOGPROBS,
            "echo": false,
            "seed": 0,
        });
        let resp = self.post(body)?;
        let choice = &resp.choices[0];
        let lp = choice.logprobs.as_ref().ok_or_else(|| {
            GatewayError::ProtocolViolation("response is missing token logprobs".into())
        })?;
        let top = lp
            .top_logprobs
            .first()
            .and_then(|m| m.as_ref())
            .ok_or_else(|| {
                GatewayError::ProtocolViolation("response is missing top_logprobs".into())
            })?;
        Ok(candidates
            .iter()
            .map(|c| {
                top.get(c.as_str())
                    .and_then(|v| v.as_f64())
                    .unwrap_or(f64::NEG_INFINITY)
            })
            .collect())
    }

    fn score_target(&self, prefix: &str, target: &str) -> Result<f64, GatewayError> {
        let body = json!({
            "model": self.model,
            "prompt": format!("{prefix}{target}"),
            "max_tokens": 0,
            "temperature": 0.0,
            "top_p": 1.0,
            "logprobs": 0,
            "echo": true,
            "seed": 0,
        });
        let resp = self.post(body)?;
        let choice = &resp.choices[0];
        let lp = choice
            .logprobs
            .as_ref()
            .ok_or(GatewayError::CannotEchoLogprobs)?;
        if lp.text_offset.len() != lp.tokens.len() {
            return Err(GatewayError::CannotEchoLogprobs);
        }
        let start = lp
            .text_offset
            .iter()
            .position(|&o| o == prefix.len())
            .ok_or(GatewayError::TokenBoundaryMismatch {
                prefix_end: prefix.len(),
            })?;
        Ok(lp.token_logprobs[start..]
            .iter()
            .map(|l| l.unwrap_or(0.0))
            .sum())
    }
}
