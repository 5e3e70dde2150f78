//! Probabilistic answer-confidence validation.
//!
//! For each question that passed syntactic filtering: shuffle the
//! original choices with a seeded permutation, append "none of the
//! above" as a fresh final option, extract the model's probability
//! distribution over the presented labels, and retain the question only
//! if the most probable label is not NOTA and its probability exceeds
//! the threshold. The surviving question keeps its original choice order
//! and answer index; presentation order is transient.

use crate::bank::{Question, Stage};
use crate::gateway::{Gateway, GatewayError, LabelScore};
use crate::generator::argmax_lowest;
use crate::seed::derive_seed;
use crate::templates::{labeled_choice_block, position_label, TemplateSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const NOTA_TEXT: &str = "None of the above";

/// Normalized probability per presented choice label, NOTA included.
pub type ChoiceDistribution = Vec<LabelScore>;

/// A question as shown to the model for validation: shuffled original
/// choices re-lettered from "a", with NOTA occupying the final label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresentedQuestion {
    pub question_id: String,
    /// (label, choice text) in presentation order, NOTA last.
    pub presented_choices: Vec<(String, String)>,
    /// Presented position -> original choice index. NOTA has no entry.
    pub index_map: Vec<usize>,
    pub nota_position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceReason {
    Accepted,
    LowConfidence,
    NotaArgmax,
}

/// Audit record for one evaluated question, accepted or not. The
/// permutation and seed are persisted so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDecision {
    pub question_id: String,
    pub distribution: ChoiceDistribution,
    pub top_label: String,
    pub top_probability: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub reason: ConfidenceReason,
    pub permutation: Vec<usize>,
    pub seed: u64,
}

/// Deterministic seeded shuffle of the original choices, with NOTA
/// appended as the final labeled option and labels re-lettered
/// positionally.
pub fn present(q: &Question, seed: u64) -> PresentedQuestion {
    let mut order: Vec<usize> = (0..q.choices.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &q.id));
    order.shuffle(&mut rng);

    let mut presented: Vec<(String, String)> = order
        .iter()
        .enumerate()
        .map(|(pos, &orig)| (position_label(pos), q.choices[orig].clone()))
        .collect();
    let nota_position = presented.len();
    presented.push((position_label(nota_position), NOTA_TEXT.to_string()));

    PresentedQuestion {
        question_id: q.id.clone(),
        presented_choices: presented,
        index_map: order,
        nota_position,
    }
}

pub struct ConfidenceValidator<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
}

impl<'a> ConfidenceValidator<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        ConfidenceValidator { gateway, templates }
    }

    /// Probability distribution over all presented labels, NOTA included.
    pub fn confidence(
        &self,
        q: &Question,
        pq: &PresentedQuestion,
    ) -> Result<ChoiceDistribution, GatewayError> {
        let block = labeled_choice_block(
            &pq.presented_choices
                .iter()
                .map(|(_, text)| text.as_str())
                .collect::<Vec<_>>(),
        );
        let prompt = self.templates.render_answer_prompt(&q.stem, &block);
        let labels: Vec<String> = pq.presented_choices.iter().map(|(l, _)| l.clone()).collect();
        self.gateway.label_distribution(&prompt, &labels)
    }

    /// Present, score, and apply the retention rule. Accepted holds
    /// exactly when the top label is not NOTA and its probability is
    /// strictly greater than the threshold.
    pub fn decide(
        &self,
        q: &Question,
        threshold: f64,
        seed: u64,
    ) -> Result<ConfidenceDecision, GatewayError> {
        assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0,1)");
        let pq = present(q, seed);
        let distribution = self.confidence(q, &pq)?;
        let probs: Vec<f64> = distribution.iter().map(|s| s.probability).collect();
        let top = argmax_lowest(&probs);
        let top_label = distribution[top].label.clone();
        let top_probability = distribution[top].probability;
        let (accepted, reason) = if top == pq.nota_position {
            (false, ConfidenceReason::NotaArgmax)
        } else if top_probability > threshold {
            (true, ConfidenceReason::Accepted)
        } else {
            (false, ConfidenceReason::LowConfidence)
        };
        Ok(ConfidenceDecision {
            question_id: q.id.clone(),
            distribution,
            top_label,
            top_probability,
            threshold,
            accepted,
            reason,
            permutation: pq.index_map,
            seed,
        })
    }

    /// Evaluate every question in parallel and split by the decision.
    /// Accepted questions advance to `confidence-pass`; rejected ones are
    /// marked with the decision reason. Decisions come back for all
    /// evaluated questions in stable input order.
    pub fn validate_bank(
        &self,
        questions: Vec<Question>,
        threshold: f64,
        seed: u64,
    ) -> Result<ConfidenceOutcome, GatewayError> {
        let decisions: Vec<ConfidenceDecision> = questions
            .par_iter()
            .map(|q| self.decide(q, threshold, seed))
            .collect::<Result<_, _>>()?;
        let mut outcome = ConfidenceOutcome {
            decisions,
            ..Default::default()
        };
        for (mut q, d) in questions.into_iter().zip(outcome.decisions.iter()) {
            if d.accepted {
                if q.stage.rank() < Stage::ConfidencePass.rank() {
                    q.advance_to(Stage::ConfidencePass).expect("syntactic -> confidence");
                }
                outcome.retained.push(q);
            } else {
                let code = match d.reason {
                    ConfidenceReason::LowConfidence => "low-confidence",
                    ConfidenceReason::NotaArgmax => "nota-argmax",
                    ConfidenceReason::Accepted => unreachable!(),
                };
                q.reject(vec![code.to_string()]);
                outcome.rejected.push(q);
            }
        }
        Ok(outcome)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConfidenceOutcome {
    pub retained: Vec<Question>,
    pub rejected: Vec<Question>,
    pub decisions: Vec<ConfidenceDecision>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::test_question;
    use crate::gateway::{MockBackend, MockScenario};
    use std::collections::HashSet;
    use std::sync::Arc;

    fn question() -> Question {
        let mut q = test_question(
            "q1",
            "LO",
            "Which of the following factors contributes most to the degradation of mangroves?",
            &["Climate change", "Overfishing", "Pollution", "Urbanization"],
            2,
        );
        q.stage = Stage::SyntacticPass;
        q
    }

    fn validator_parts(scenario: MockScenario) -> (Gateway, TemplateSet) {
        (
            Gateway::new(Arc::new(MockBackend::new(scenario))),
            TemplateSet::default(),
        )
    }

    #[test]
    fn presentation_appends_nota_last() {
        let pq = present(&question(), 42);
        assert_eq!(pq.presented_choices.len(), 5);
        assert_eq!(pq.nota_position, 4);
        assert_eq!(pq.presented_choices[4], ("e".to_string(), NOTA_TEXT.to_string()));
        assert_eq!(pq.index_map.len(), 4);
        // Same (question, seed) twice: identical permutation.
        assert_eq!(pq, present(&question(), 42));
    }

    #[test]
    fn all_permutations_reachable() {
        let q = question();
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        for seed in 0..2000 {
            seen.insert(present(&q, seed).index_map);
            if seen.len() == 24 {
                break;
            }
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn uniform_backend_gives_uniform_distribution() {
        let (gw, tpl) = validator_parts(MockScenario::default().uniform_vocab(64));
        let v = ConfidenceValidator::new(&gw, &tpl);
        let q = question();
        let dist = v.confidence(&q, &present(&q, 0)).unwrap();
        for s in &dist {
            assert!((s.probability - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_softmax_thirteen_seventeenths() {
        let (gw, tpl) = validator_parts(MockScenario::default().script_labels(
            "mangroves",
            &[("a", 0.0), ("b", 0.0), ("c", 13.0f64.ln()), ("d", 0.0), ("e", 0.0)],
        ));
        let v = ConfidenceValidator::new(&gw, &tpl);
        let q = question();
        let dist = v.confidence(&q, &present(&q, 0)).unwrap();
        assert!((dist[2].probability - 13.0 / 17.0).abs() < 1e-9);
    }

    #[test]
    fn prompt_contains_stem_and_presented_choices() {
        let scenario = MockScenario::default();
        let backend = Arc::new(crate::gateway::RecordingBackend::new(MockBackend::new(scenario)));
        let gw = Gateway::new(backend.clone());
        let tpl = TemplateSet::default();
        let v = ConfidenceValidator::new(&gw, &tpl);
        let q = question();
        let pq = present(&q, 3);
        v.confidence(&q, &pq).unwrap();
        let prompt = &backend.records()[0].prompt;
        assert!(prompt.contains(&q.stem));
        for (label, text) in &pq.presented_choices {
            assert!(prompt.contains(&format!("{label}) {text}")));
        }
    }

    fn listing_style_scenario() -> MockScenario {
        // Logits are the logs of the target distribution, so the softmax
        // reproduces {0.01, 0.08, 0.52, 0.24, 0.15} exactly.
        MockScenario::default().script_labels(
            "mangroves",
            &[
                ("a", 0.01f64.ln()),
                ("b", 0.08f64.ln()),
                ("c", 0.52f64.ln()),
                ("d", 0.24f64.ln()),
                ("e", 0.15f64.ln()),
            ],
        )
    }

    #[test]
    fn listing_distribution_rejects_at_090_accepts_at_050() {
        let (gw, tpl) = validator_parts(listing_style_scenario());
        let v = ConfidenceValidator::new(&gw, &tpl);
        let q = question();
        let d = v.decide(&q, 0.9, 7).unwrap();
        assert!(!d.accepted);
        assert_eq!(d.reason, ConfidenceReason::LowConfidence);
        assert!((d.top_probability - 0.52).abs() < 1e-9);
        let d = v.decide(&q, 0.5, 7).unwrap();
        assert!(d.accepted);
    }

    #[test]
    fn nota_argmax_always_rejects() {
        let (gw, tpl) = validator_parts(MockScenario::default().script_labels(
            "mangroves",
            &[("a", 0.0), ("b", 0.0), ("c", 0.0), ("d", 0.0), ("e", 5.0)],
        ));
        let v = ConfidenceValidator::new(&gw, &tpl);
        let d = v.decide(&question(), 0.2, 1).unwrap();
        assert!(!d.accepted);
        assert_eq!(d.reason, ConfidenceReason::NotaArgmax);
    }

    #[test]
    fn decide_never_mutates_the_question() {
        let (gw, tpl) = validator_parts(listing_style_scenario());
        let v = ConfidenceValidator::new(&gw, &tpl);
        let q = question();
        let before = q.clone();
        v.decide(&q, 0.9, 9).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn flat_distribution_rejected_at_half() {
        let (gw, tpl) = validator_parts(MockScenario::default().uniform_vocab(32));
        let v = ConfidenceValidator::new(&gw, &tpl);
        let d = v.decide(&question(), 0.5, 11).unwrap();
        assert!(!d.accepted);
    }

    #[test]
    fn accepted_sets_nest_across_thresholds() {
        let (gw, tpl) = validator_parts(MockScenario::default());
        let v = ConfidenceValidator::new(&gw, &tpl);
        let questions: Vec<Question> = (0..40)
            .map(|i| {
                let mut q = test_question(
                    &format!("q{i}"),
                    "LO",
                    &format!("Question number {i} about reservoirs and cycles?"),
                    &["Alpha answer", "Bravo answer", "Charlie answer", "Delta answer"],
                    0,
                );
                q.stage = Stage::SyntacticPass;
                q
            })
            .collect();
        let mut previous: Option<HashSet<String>> = None;
        for t in [0.2, 0.4, 0.6, 0.8, 0.9] {
            let outcome = v.validate_bank(questions.clone(), t, 5).unwrap();
            let ids: HashSet<String> = outcome.retained.iter().map(|q| q.id.clone()).collect();
            if let Some(prev) = &previous {
                assert!(ids.is_subset(prev), "accepted set at {t} not nested");
            }
            previous = Some(ids);
        }
    }
}
