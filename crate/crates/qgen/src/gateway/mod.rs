//! Uniform access to the text-generation and probability-scoring
//! capabilities of a language model.
//!
//! Two backends implement [`Backend`]: a remote HTTP backend speaking a
//! completions-style JSON protocol ([`HttpBackend`]) and a deterministic
//! in-process mock ([`MockBackend`]) that lets the whole pipeline run with
//! no model weights. Callers go through [`Gateway`], which validates
//! inputs and handles choice-label token variants.

pub mod http;
pub mod mock;
pub mod tokenize;

pub use http::HttpBackend;
pub use mock::{MockBackend, MockScenario, PromptRecord, RecordingBackend, RequestKind};

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Decoding strategy for a completion request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodingMode {
    NucleusSampling,
    BeamSearch,
    /// Equivalent to top_k = 1 selection at every step.
    Greedy,
}

/// Parameters controlling one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub mode: DecodingMode,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub beam_width: Option<u32>,
    pub max_new_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub seed: u64,
}

impl DecodingParams {
    /// Greedy decoding with a token cap. Seed is irrelevant to greedy
    /// selection and fixed at 0.
    pub fn greedy(max_new_tokens: u32) -> Self {
        DecodingParams {
            mode: DecodingMode::Greedy,
            temperature: 0.0,
            top_p: 1.0,
            top_k: Some(1),
            beam_width: None,
            max_new_tokens,
            stop_sequences: Vec::new(),
            seed: 0,
        }
    }

    /// Nucleus sampling with the pipeline defaults: temperature 1.0,
    /// top_p 0.95.
    pub fn nucleus(max_new_tokens: u32, seed: u64) -> Self {
        DecodingParams {
            mode: DecodingMode::NucleusSampling,
            temperature: 1.0,
            top_p: 0.95,
            top_k: None,
            beam_width: None,
            max_new_tokens,
            stop_sequences: Vec::new(),
            seed,
        }
    }

    /// Beam search with the given width.
    pub fn beam(max_new_tokens: u32, beam_width: u32, seed: u64) -> Self {
        DecodingParams {
            mode: DecodingMode::BeamSearch,
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
            beam_width: Some(beam_width),
            max_new_tokens,
            stop_sequences: Vec::new(),
            seed,
        }
    }

    pub fn with_stop(mut self, stop: &[&str]) -> Self {
        self.stop_sequences = stop.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidParams(
                "max_new_tokens must be positive".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidParams(
                "temperature must be non-negative".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidParams(
                "top_p must lie in (0, 1]".into(),
            ));
        }
        if self.top_k == Some(0) {
            return Err(GatewayError::InvalidParams("top_k must be positive".into()));
        }
        if self.beam_width == Some(0) {
            return Err(GatewayError::InvalidParams(
                "beam_width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One generated token and its log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
}

/// A generated continuation. The concatenation of `tokens` equals `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<TokenScore>,
    /// True when max_new_tokens was reached before any stop sequence.
    /// Truncation is not an error; callers decide what to do with it.
    pub truncated: bool,
}

/// One label and its renormalized probability within a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("invalid decoding params: {0}")]
    InvalidParams(String),
    #[error("labels must be non-empty")]
    EmptyLabels,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("target must be non-empty")]
    EmptyTarget,
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("label {0:?} is not scorable as a single decoding step")]
    LabelNotTokenizable(String),
    #[error("backend cannot echo prompt log-probabilities")]
    CannotEchoLogprobs,
    #[error("target does not start on a token boundary after the prefix (prefix ends at byte {prefix_end})")]
    TokenBoundaryMismatch { prefix_end: usize },
}

/// Raw model access implemented by each backend. All methods are pure with
/// respect to backend state; implementations must be safe for concurrent
/// use.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<Completion, GatewayError>;

    /// Log-probability of each candidate string as the single next token
    /// after `prompt`. Candidates the model cannot produce in one step
    /// score `f64::NEG_INFINITY`.
    fn candidate_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, GatewayError>;

    /// Total log-probability of `target` given `prefix`: the sum over
    /// target tokens of log p(token | prefix + preceding target tokens).
    /// Prefix tokens are never scored.
    fn score_target(&self, prefix: &str, target: &str) -> Result<f64, GatewayError>;
}

/// Validated front door to a backend.
///
/// A choice label like "a" may tokenize differently with and without
/// leading whitespace; `label_distribution` aggregates the probability
/// mass of a configured variant set (default: the label itself and the
/// space-prefixed label) before the restricted softmax. The softmax is
/// computed in log space.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    /// Patterns applied to each label to build its token variants;
    /// `{label}` is replaced by the label text.
    variant_patterns: Vec<String>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            variant_patterns: vec!["{label}".into(), " {label}".into()],
        }
    }

    pub fn with_variant_patterns(mut self, patterns: Vec<String>) -> Self {
        self.variant_patterns = patterns;
        self
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn complete(
        &self,
        prompt: &str,
        params: &DecodingParams,
    ) -> Result<Completion, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        params.validate()?;
        self.backend.complete(prompt, params)
    }

    /// Next-token scores restricted to `labels`, renormalized by softmax
    /// over that restricted set. Output order matches input order and the
    /// probabilities sum to 1 within 1e-9.
    pub fn label_distribution(
        &self,
        prompt: &str,
        labels: &[String],
    ) -> Result<Vec<LabelScore>, GatewayError> {
        if labels.is_empty() {
            return Err(GatewayError::EmptyLabels);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(GatewayError::DuplicateLabel(l.clone()));
            }
        }
        let mut variants: Vec<String> = Vec::with_capacity(labels.len() * self.variant_patterns.len());
        for label in labels {
            for pat in &self.variant_patterns {
                variants.push(pat.replace("{label}", label));
            }
        }
        let raw = self.backend.candidate_logprobs(prompt, &variants)?;
        let per_variant = self.variant_patterns.len();
        let mut logits = Vec::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            let chunk = &raw[i * per_variant..(i + 1) * per_variant];
            let logit = log_sum_exp(chunk);
            if logit == f64::NEG_INFINITY {
                return Err(GatewayError::LabelNotTokenizable(label.clone()));
            }
            logits.push(logit);
        }
        let denom = log_sum_exp(&logits);
        Ok(labels
            .iter()
            .zip(&logits)
            .map(|(label, &logit)| LabelScore {
                label: label.clone(),
                probability: (logit - denom).exp(),
            })
            .collect())
    }

    pub fn score_target(&self, prefix: &str, target: &str) -> Result<f64, GatewayError> {
        if target.is_empty() {
            return Err(GatewayError::EmptyTarget);
        }
        self.backend.score_target(prefix, target)
    }
}

/// log(sum(exp(x))) without overflow; NEG_INFINITY for an all-(-inf) input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_gateway() -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(MockScenario::default())))
    }

    #[test]
    fn zero_max_tokens_rejected() {
        let gw = mock_gateway();
        let mut p = DecodingParams::greedy(1);
        p.max_new_tokens = 0;
        assert!(matches!(
            gw.complete("2+2=", &p),
            Err(GatewayError::InvalidParams(_))
        ));
    }

    #[test]
    fn empty_prompt_rejected() {
        let gw = mock_gateway();
        assert!(matches!(
            gw.complete("", &DecodingParams::greedy(4)),
            Err(GatewayError::EmptyPrompt)
        ));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let gw = mock_gateway();
        let labels = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            gw.label_distribution("p", &labels),
            Err(GatewayError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn distribution_sums_to_one() {
        let gw = mock_gateway();
        let labels: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let dist = gw.label_distribution("any prompt", &labels).unwrap();
        let total: f64 = dist.iter().map(|s| s.probability).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_sum_exp_handles_neg_inf() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[0.0, f64::NEG_INFINITY]);
        assert!((v - 0.0).abs() < 1e-12);
    }
}
