//! Deterministic in-process mock backend.
//!
//! Two layers: a fixture layer mapping prompt patterns to scripted
//! continuations and label score tables, loaded from a scenario file or
//! built in code, and a fallback hash-based scorer that assigns every
//! (context, token) pair a stable pseudo-random log-probability. The mock
//! holds no mutable state, so identical inputs give identical outputs
//! across threads and runs.

use super::tokenize::{fnv1a64, fnv_mix, hash_logprob, token_boundaries, tokenize};
use super::{Backend, Completion, DecodingMode, DecodingParams, GatewayError, TokenScore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

/// Scripted continuation for prompts matching a pattern. When several
/// texts are given, the request seed selects one (`seed % texts.len()`),
/// keeping the backend stateless.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRule {
    pub prompt_contains: String,
    pub texts: Vec<String>,
}

/// Scripted next-token logits for choice labels, applied when the prompt
/// matches the pattern. Keys are label strings, values raw logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelScoreRule {
    pub prompt_contains: String,
    pub scores: BTreeMap<String, f64>,
}

/// Additive per-token bonus applied by `score_target` when the scoring
/// prefix contains the pattern. Lets fixtures make a question "more
/// probable" under its matching learning objective. With
/// `token_contains` set, only tokens containing that substring gain the
/// bonus; the condition is per token, so split scoring calls stay
/// additive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetBoostRule {
    pub prefix_contains: String,
    #[serde(default)]
    pub token_contains: Option<String>,
    pub bonus_per_token: f64,
}

/// Fixture description for the mock backend. Loadable from a JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScenario {
    /// When set, every token scores ln(1/V) instead of the hash score.
    #[serde(default)]
    pub uniform_vocab_size: Option<usize>,
    #[serde(default)]
    pub completions: Vec<CompletionRule>,
    #[serde(default)]
    pub label_scores: Vec<LabelScoreRule>,
    #[serde(default)]
    pub target_boosts: Vec<TargetBoostRule>,
}

impl MockScenario {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::BackendUnreachable(format!("scenario {path:?}: {e}")))?;
        serde_json::from_str(&data)
            .map_err(|e| GatewayError::ProtocolViolation(format!("scenario {path:?}: {e}")))
    }

    pub fn script_completion(mut self, prompt_contains: &str, texts: &[&str]) -> Self {
        self.completions.push(CompletionRule {
            prompt_contains: prompt_contains.into(),
            texts: texts.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn script_labels(mut self, prompt_contains: &str, scores: &[(&str, f64)]) -> Self {
        self.label_scores.push(LabelScoreRule {
            prompt_contains: prompt_contains.into(),
            scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
        self
    }

    pub fn boost_target(mut self, prefix_contains: &str, bonus_per_token: f64) -> Self {
        self.target_boosts.push(TargetBoostRule {
            prefix_contains: prefix_contains.into(),
            token_contains: None,
            bonus_per_token,
        });
        self
    }

    pub fn boost_tokens(
        mut self,
        prefix_contains: &str,
        token_contains: &str,
        bonus_per_token: f64,
    ) -> Self {
        self.target_boosts.push(TargetBoostRule {
            prefix_contains: prefix_contains.into(),
            token_contains: Some(token_contains.into()),
            bonus_per_token,
        });
        self
    }

    pub fn uniform_vocab(mut self, size: usize) -> Self {
        self.uniform_vocab_size = Some(size);
        self
    }
}

/// Logit assigned to a label the fixture table does not mention; small
/// enough to be negligible after softmax but finite so the label still
/// participates.
const UNLISTED_LABEL_LOGIT: f64 = -30.0;

const LEXICON: [&str; 48] = [
    "carbon", "nitrogen", "oxygen", "reservoir", "sediment", "runoff", "wetland", "mangrove",
    "aquifer", "biomass", "canopy", "climate", "compost", "current", "delta", "drought",
    "ecology", "erosion", "estuary", "fallow", "fishery", "forest", "glacier", "habitat",
    "harvest", "humidity", "lagoon", "larvae", "methane", "mineral", "monsoon", "nutrient",
    "organism", "oxide", "pasture", "plankton", "pollen", "rainfall", "salinity", "savanna",
    "species", "spring", "terrace", "thermal", "tundra", "turbine", "watershed", "zooplankton",
];

/// Deterministic mock language model.
pub struct MockBackend {
    scenario: MockScenario,
}

impl MockBackend {
    pub fn new(scenario: MockScenario) -> Self {
        MockBackend { scenario }
    }

    fn token_logprob(&self, context: &str, token: &str) -> f64 {
        match self.scenario.uniform_vocab_size {
            Some(v) => -(v as f64).ln(),
            None => hash_logprob(context, token),
        }
    }

    fn token_bonus(&self, prefix: &str, token: &str) -> f64 {
        self.scenario
            .target_boosts
            .iter()
            .filter(|r| prefix.contains(&r.prefix_contains))
            .filter(|r| match &r.token_contains {
                Some(pat) => token.contains(pat.as_str()),
                None => true,
            })
            .map(|r| r.bonus_per_token)
            .sum()
    }

    fn fallback_text(&self, prompt: &str, params: &DecodingParams) -> String {
        // Greedy decoding ignores the seed; sampling modes fold it in.
        let effective_seed = match params.mode {
            DecodingMode::Greedy => 0,
            _ => params.seed,
        };
        let mode_tag = match params.mode {
            DecodingMode::Greedy => "greedy",
            DecodingMode::NucleusSampling => "nucleus",
            DecodingMode::BeamSearch => "beam",
        };
        let h = fnv_mix(
            fnv1a64(prompt.as_bytes()),
            &format!("{mode_tag}|{effective_seed}"),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut words = Vec::with_capacity(params.max_new_tokens as usize);
        for _ in 0..params.max_new_tokens {
            words.push(LEXICON[rng.gen_range(0..LEXICON.len())]);
        }
        words.join(" ")
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<Completion, GatewayError> {
        let raw = match self
            .scenario
            .completions
            .iter()
            .find(|r| prompt.contains(&r.prompt_contains))
        {
            Some(rule) if !rule.texts.is_empty() => {
                rule.texts[(params.seed % rule.texts.len() as u64) as usize].clone()
            }
            _ => self.fallback_text(prompt, params),
        };

        // Cut at the earliest stop sequence, then cap at max_new_tokens.
        let mut text = raw;
        if let Some(pos) = params
            .stop_sequences
            .iter()
            .filter_map(|s| text.find(s.as_str()))
            .min()
        {
            text.truncate(pos);
        }
        let toks: Vec<String> = tokenize(&text).iter().map(|t| t.to_string()).collect();
        let mut truncated = false;
        let kept = if toks.len() > params.max_new_tokens as usize {
            truncated = true;
            toks[..params.max_new_tokens as usize].to_vec()
        } else {
            toks
        };
        let text: String = kept.concat();

        let mut context = prompt.to_string();
        let mut scored = Vec::with_capacity(kept.len());
        for tok in kept {
            let lp = self.token_logprob(&context, &tok);
            context.push_str(&tok);
            scored.push(TokenScore { token: tok, logprob: lp });
        }
        Ok(Completion {
            text,
            tokens: scored,
            truncated,
        })
    }

    fn candidate_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, GatewayError> {
        // Among matching rules, prefer one that actually lists at least
        // one of the requested labels; a two-turn conversation matches
        // both the turn-1 and turn-2 patterns, but only one rule scores
        // the labels being asked about.
        let matching: Vec<_> = self
            .scenario
            .label_scores
            .iter()
            .filter(|r| prompt.contains(&r.prompt_contains))
            .collect();
        let rule = matching
            .iter()
            .find(|r| {
                candidates
                    .iter()
                    .any(|c| r.scores.contains_key(c.as_str()) || r.scores.contains_key(c.trim_start()))
            })
            .or(matching.first())
            .copied();
        Ok(candidates
            .iter()
            .map(|c| match rule {
                Some(r) => r
                    .scores
                    .get(c.as_str())
                    .or_else(|| r.scores.get(c.trim_start()))
                    .copied()
                    .unwrap_or(UNLISTED_LABEL_LOGIT),
                None => self.token_logprob(prompt, c),
            })
            .collect())
    }

    fn score_target(&self, prefix: &str, target: &str) -> Result<f64, GatewayError> {
        let full = format!("{prefix}{target}");
        let boundaries = token_boundaries(&full);
        if !boundaries.contains(&prefix.len()) {
            return Err(GatewayError::TokenBoundaryMismatch {
                prefix_end: prefix.len(),
            });
        }
        let mut total = 0.0;
        let mut context = String::with_capacity(full.len());
        for tok in tokenize(&full) {
            let end = context.len() + tok.len();
            if end > prefix.len() {
                total += self.token_logprob(&context, tok) + self.token_bonus(prefix, tok);
            }
            context.push_str(tok);
        }
        Ok(total)
    }
}

/// What a recorded request was for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestKind {
    Complete,
    CandidateLogprobs,
    ScoreTarget,
}

/// One captured backend request.
#[derive(Debug, Clone)]
pub struct PromptRecord {
    pub kind: RequestKind,
    pub prompt: String,
}

/// Wraps any backend and captures every prompt it receives. Used to assert
/// conversation isolation and template contracts in tests.
pub struct RecordingBackend<B: Backend> {
    inner: B,
    records: Mutex<Vec<PromptRecord>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<PromptRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.records.lock().unwrap().clear();
    }

    fn push(&self, kind: RequestKind, prompt: &str) {
        self.records.lock().unwrap().push(PromptRecord {
            kind,
            prompt: prompt.to_string(),
        });
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<Completion, GatewayError> {
        self.push(RequestKind::Complete, prompt);
        self.inner.complete(prompt, params)
    }

    fn candidate_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, GatewayError> {
        self.push(RequestKind::CandidateLogprobs, prompt);
        self.inner.candidate_logprobs(prompt, candidates)
    }

    fn score_target(&self, prefix: &str, target: &str) -> Result<f64, GatewayError> {
        self.push(RequestKind::ScoreTarget, prefix);
        self.inner.score_target(prefix, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;
    use std::sync::Arc;

    fn gw(scenario: MockScenario) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(scenario)))
    }

    #[test]
    fn scripted_completion_wins() {
        let gw = gw(MockScenario::default().script_completion("2+2=", &["4"]));
        let c = gw.complete("2+2=", &DecodingParams::greedy(8)).unwrap();
        assert_eq!(c.text, "4");
        assert!(!c.truncated);
    }

    #[test]
    fn completion_tokens_concat_to_text() {
        let gw = gw(MockScenario::default());
        let c = gw
            .complete("any prompt here", &DecodingParams::nucleus(16, 7))
            .unwrap();
        let joined: String = c.tokens.iter().map(|t| t.token.as_str()).collect();
        assert_eq!(joined, c.text);
    }

    #[test]
    fn same_seed_same_output() {
        let gw = gw(MockScenario::default());
        let p = DecodingParams::nucleus(16, 1234);
        let a = gw.complete("prompt", &p).unwrap();
        let b = gw.complete("prompt", &p).unwrap();
        assert_eq!(a, b);
        let c = gw.complete("prompt", &p.clone().with_seed(1235)).unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn stop_sequence_cuts_generation() {
        let gw = gw(MockScenario::default()
            .script_completion("question", &["first line\nsecond line"]));
        let c = gw
            .complete(
                "question",
                &DecodingParams::greedy(64).with_stop(&["\n"]),
            )
            .unwrap();
        assert_eq!(c.text, "first line");
        assert!(!c.truncated);
    }

    #[test]
    fn long_scripted_text_truncates_at_cap() {
        let long = vec!["word"; 250].join(" ");
        let gw = gw(MockScenario::default().script_completion("explain", &[&long]));
        let c = gw.complete("explain", &DecodingParams::greedy(200)).unwrap();
        assert_eq!(c.tokens.len(), 200);
        assert!(c.truncated);
    }

    #[test]
    fn uniform_vocab_scores() {
        let gw = gw(MockScenario::default().uniform_vocab(4));
        // 3 tokens, each ln(1/4)
        let s = gw.score_target("prefix ", "one two three").unwrap();
        assert!((s - 3.0 * 0.25f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn scripted_label_softmax() {
        let gw = gw(MockScenario::default().script_labels("pick", &[("a", 0.0), ("b", 3.0f64.ln())]));
        let labels = vec!["a".to_string(), "b".to_string()];
        let d = gw.label_distribution("pick one", &labels).unwrap();
        assert!((d[0].probability - 0.25).abs() < 1e-9);
        assert!((d[1].probability - 0.75).abs() < 1e-9);
    }

    #[test]
    fn boundary_mismatch_detected() {
        let gw = gw(MockScenario::default());
        // "foo" + "bar" merges into one token.
        assert!(matches!(
            gw.score_target("foo", "bar"),
            Err(GatewayError::TokenBoundaryMismatch { .. })
        ));
        assert!(gw.score_target("foo ", "bar").is_ok());
    }

    #[test]
    fn score_target_additive_over_splits() {
        let gw = gw(MockScenario::default());
        let p = "context goes here ";
        let whole = gw.score_target(p, "alpha beta gamma delta").unwrap();
        let first = gw.score_target(p, "alpha beta ").unwrap();
        let second = gw
            .score_target(&format!("{p}alpha beta "), "gamma delta")
            .unwrap();
        assert!((whole - (first + second)).abs() < 1e-6);
    }

    #[test]
    fn target_boost_applies_per_token() {
        let plain = MockScenario::default();
        let boosted = MockScenario::default().boost_target("KEYWORD", 1.5);
        let a = MockBackend::new(plain);
        let b = MockBackend::new(boosted);
        let prefix = "context with KEYWORD inside ";
        let target = "one two three";
        let base = a.score_target(prefix, target).unwrap();
        let lifted = b.score_target(prefix, target).unwrap();
        assert!((lifted - base - 3.0 * 1.5).abs() < 1e-9);
        // No keyword in prefix: no boost.
        let base2 = b.score_target("plain context ", target).unwrap();
        let base2_ref = a.score_target("plain context ", target).unwrap();
        assert!((base2 - base2_ref).abs() < 1e-12);
    }

    #[test]
    fn recording_backend_captures_prompts() {
        let rec = Arc::new(RecordingBackend::new(MockBackend::new(MockScenario::default())));
        let gw = Gateway::new(rec.clone());
        gw.complete("hello there", &DecodingParams::greedy(4)).unwrap();
        let records = rec.records();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].prompt, "hello there");
    }
}
