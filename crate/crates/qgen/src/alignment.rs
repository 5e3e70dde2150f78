//! Learning-objective alignment check.
//!
//! The relevance of an objective L to a question Q is the log-probability
//! lift the objective gives the question text:
//! `relevance(L, Q) = log Pr(Q | L) - log Pr(Q)`. Both terms score the
//! identical question block (stem, labeled choices, answer line); the
//! conditional term prefixes it with the objective, the baseline term
//! uses a zero-length prefix. A question is retained only when the
//! most relevant objective is its origin.

use crate::bank::{LearningObjective, Question, Stage};
use crate::gateway::{Gateway, GatewayError};
use crate::templates::{labeled_choice_block, position_label, TemplateSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// LO x question grid of relevance scores. Rows follow `lo_ids`, columns
/// follow `question_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    pub lo_ids: Vec<String>,
    pub question_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl RelevanceMatrix {
    /// CSV with LO ids as row labels and question ids as column headers.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "lo_id,{}", self.question_ids.join(","))?;
        for (lo, row) in self.lo_ids.iter().zip(&self.scores) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{lo},{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("alignment check needs at least 2 learning objectives, got {0}")]
    NeedTwoObjectives(usize),
}

/// The question text scored by both relevance terms: stem, lettered
/// choices, and the answer line, exactly as generated.
pub fn question_block(q: &Question) -> String {
    format!(
        "{}\n{}\nAnswer: {}",
        q.stem,
        labeled_choice_block(&q.choices),
        position_label(q.answer_index)
    )
}

pub struct AlignmentChecker<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
}

#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub retained: Vec<Question>,
    pub rejected: Vec<Question>,
    pub matrix: RelevanceMatrix,
}

impl<'a> AlignmentChecker<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        AlignmentChecker { gateway, templates }
    }

    /// log Pr(Q | L): the question block scored behind the LO context.
    pub fn conditional_score(
        &self,
        lo: &LearningObjective,
        q: &Question,
    ) -> Result<f64, GatewayError> {
        let prefix = self.templates.render_lo_context(&lo.text);
        self.gateway.score_target(&prefix, &question_block(q))
    }

    /// log Pr(Q): the same block scored from the document start.
    pub fn baseline_score(&self, q: &Question) -> Result<f64, GatewayError> {
        self.gateway.score_target("", &question_block(q))
    }

    pub fn relevance(&self, lo: &LearningObjective, q: &Question) -> Result<f64, GatewayError> {
        Ok(self.conditional_score(lo, q)? - self.baseline_score(q)?)
    }

    /// Full LO x question relevance grid. Cells are independent and
    /// computed in parallel; assembly is deterministic.
    pub fn compute_matrix(
        &self,
        los: &[LearningObjective],
        questions: &[Question],
    ) -> Result<RelevanceMatrix, GatewayError> {
        let scores: Vec<Vec<f64>> = los
            .par_iter()
            .map(|lo| {
                questions
                    .iter()
                    .map(|q| self.relevance(lo, q))
                    .collect::<Result<Vec<f64>, _>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(RelevanceMatrix {
            lo_ids: los.iter().map(|l| l.id.clone()).collect(),
            question_ids: questions.iter().map(|q| q.id.clone()).collect(),
            scores,
        })
    }

    /// Retain each question iff the argmax objective over the relevance
    /// column equals its origin. Argmax ties reject the question: a tie
    /// means alignment is not clearly with the origin.
    pub fn align_filter(
        &self,
        questions: Vec<Question>,
        los: &[LearningObjective],
    ) -> Result<AlignmentOutcome, AlignmentError> {
        if los.len() < 2 {
            return Err(AlignmentError::NeedTwoObjectives(los.len()));
        }
        let matrix = self.compute_matrix(los, &questions)?;
        let mut retained = Vec::new();
        let mut rejected = Vec::new();
        for (col, mut q) in questions.into_iter().enumerate() {
            let column: Vec<f64> = matrix.scores.iter().map(|row| row[col]).collect();
            let best = column
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = column
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == best)
                .map(|(i, _)| i)
                .collect();
            if winners.len() > 1 {
                log::debug!("relevance tie for question {} across {} objectives", q.id, winners.len());
                q.reject(vec!["lo-alignment-tie".to_string()]);
                rejected.push(q);
            } else if matrix.lo_ids[winners[0]] == q.origin_lo {
                if q.stage.rank() < Stage::AlignmentPass.rank() {
                    q.advance_to(Stage::AlignmentPass).expect("confidence -> alignment");
                }
                retained.push(q);
            } else {
                q.reject(vec!["lo-misaligned".to_string()]);
                rejected.push(q);
            }
        }
        Ok(AlignmentOutcome {
            retained,
            rejected,
            matrix,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{test_question, LoForm};
    use crate::gateway::{MockBackend, MockScenario};
    use std::sync::Arc;

    fn lo(id: &str, text: &str) -> LearningObjective {
        LearningObjective {
            id: id.to_string(),
            text: text.to_string(),
            form: LoForm::ActionBased,
            unit: None,
            topic: None,
        }
    }

    fn q(id: &str, origin: &str, stem: &str) -> Question {
        let mut q = test_question(id, origin, stem, &["Alpha one", "Bravo two", "Charlie three", "Delta four"], 0);
        q.stage = Stage::ConfidencePass;
        q
    }

    fn checker_parts(scenario: MockScenario) -> (Gateway, TemplateSet) {
        (
            Gateway::new(Arc::new(MockBackend::new(scenario))),
            TemplateSet::default(),
        )
    }

    #[test]
    fn context_ignoring_backend_gives_zero_relevance() {
        // Uniform vocabulary scores every token the same regardless of
        // context, so both relevance terms cancel.
        let (gw, tpl) = checker_parts(MockScenario::default().uniform_vocab(16));
        let checker = AlignmentChecker::new(&gw, &tpl);
        let r = checker
            .relevance(&lo("L1", "describe irrigation"), &q("q1", "L1", "Which method delivers water to roots?"))
            .unwrap();
        assert!(r.abs() < 1e-9);
    }

    #[test]
    fn boosting_fixture_gives_positive_relevance_only_for_match() {
        let scenario = MockScenario::default()
            .uniform_vocab(16)
            .boost_target("irrigation", 2.0);
        let (gw, tpl) = checker_parts(scenario);
        let checker = AlignmentChecker::new(&gw, &tpl);
        let question = q("q1", "L1", "Which method delivers water to roots?");
        let block_tokens = crate::gateway::tokenize::tokenize(&question_block(&question)).len();
        let r_match = checker
            .relevance(&lo("L1", "describe methods of irrigation"), &question)
            .unwrap();
        let r_other = checker
            .relevance(&lo("L2", "define the demographic transition"), &question)
            .unwrap();
        assert!((r_match - 2.0 * block_tokens as f64).abs() < 1e-6);
        assert!(r_other.abs() < 1e-9);
    }

    #[test]
    fn both_terms_score_the_identical_block() {
        let question = q("q1", "L1", "Which method delivers water to roots?");
        let block = question_block(&question);
        assert!(block.contains(&question.stem));
        assert!(block.contains("a) Alpha one"));
        assert!(block.ends_with("Answer: a"));
    }

    #[test]
    fn origin_boosted_questions_fully_retained() {
        // Each question carries a marker token boosted only under its
        // origin LO prefix, so the origin always wins the argmax.
        let los = vec![
            lo("L-IRR", "describe methods of irrigation"),
            lo("L-CAR", "explain the carbon cycle"),
        ];
        let questions = vec![
            q("q-irr", "L-IRR", "Which IRRTOKEN method delivers water to roots?"),
            q("q-car", "L-CAR", "Which CARTOKEN reservoir holds the most carbon?"),
        ];
        let scenario = MockScenario::default()
            .uniform_vocab(16)
            .boost_tokens("irrigation", "IRRTOKEN", 2.0)
            .boost_tokens("carbon cycle", "CARTOKEN", 2.0);
        let (gw, tpl) = checker_parts(scenario);
        let checker = AlignmentChecker::new(&gw, &tpl);
        let outcome = checker.align_filter(questions, &los).unwrap();
        assert_eq!(outcome.retained.len(), 2);
        assert!(outcome.rejected.is_empty());
    }

    #[test]
    fn context_ignoring_backend_ties_are_rejected() {
        let los = vec![lo("L-A", "first objective"), lo("L-B", "second objective")];
        let (gw, tpl) = checker_parts(MockScenario::default().uniform_vocab(16));
        let checker = AlignmentChecker::new(&gw, &tpl);
        let outcome = checker
            .align_filter(vec![q("q1", "L-A", "A question with no signal either way?")], &los)
            .unwrap();
        assert!(outcome.retained.is_empty());
        assert_eq!(outcome.rejected[0].rejection_reasons, vec!["lo-alignment-tie"]);
    }

    #[test]
    fn misaligned_question_rejected() {
        let los = vec![
            lo("L-A", "first objective KEYA"),
            lo("L-B", "second objective KEYB"),
        ];
        // q claims origin L-A but scores higher under L-B.
        let question = q("q-x", "L-A", "A question that secretly belongs elsewhere?");
        let scenario = MockScenario::default()
            .uniform_vocab(16)
            .boost_target("KEYB", 3.0);
        let (gw, tpl) = checker_parts(scenario);
        let checker = AlignmentChecker::new(&gw, &tpl);
        let outcome = checker.align_filter(vec![question], &los).unwrap();
        assert!(outcome.retained.is_empty());
        assert_eq!(outcome.rejected[0].rejection_reasons, vec!["lo-misaligned"]);
    }

    #[test]
    fn single_objective_is_an_error() {
        let (gw, tpl) = checker_parts(MockScenario::default());
        let checker = AlignmentChecker::new(&gw, &tpl);
        let out = checker.align_filter(vec![], &[lo("L1", "only one")]);
        assert!(matches!(out, Err(AlignmentError::NeedTwoObjectives(1))));
    }

    #[test]
    fn baseline_term_does_not_change_retention() {
        // log Pr(Q) is constant across LOs for a fixed question, so the
        // argmax over relevance equals the argmax over the conditional
        // score alone.
        let los = vec![
            lo("L-A", "objective about erosion and runoff"),
            lo("L-B", "objective about plankton and salinity"),
            lo("L-C", "objective about glaciers and tundra"),
        ];
        let questions: Vec<Question> = (0..10)
            .map(|i| q(&format!("q{i}"), "L-A", &format!("Question number {i} about mixed topics?")))
            .collect();
        let (gw, tpl) = checker_parts(MockScenario::default());
        let checker = AlignmentChecker::new(&gw, &tpl);
        let with_baseline = checker.align_filter(questions.clone(), &los).unwrap();
        // Recompute retention from conditional scores only.
        let mut conditional_retained = Vec::new();
        for question in &questions {
            let scores: Vec<f64> = los
                .iter()
                .map(|l| checker.conditional_score(l, question).unwrap())
                .collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
            if winners.len() == 1 && los[winners[0]].id == question.origin_lo {
                conditional_retained.push(question.id.clone());
            }
        }
        let retained_ids: Vec<String> = with_baseline.retained.iter().map(|q| q.id.clone()).collect();
        assert_eq!(retained_ids, conditional_retained);
    }

    #[test]
    fn matrix_csv_roundtrips_dimensions() {
        let m = RelevanceMatrix {
            lo_ids: vec!["L1".into(), "L2".into()],
            question_ids: vec!["q1".into(), "q2".into(), "q3".into()],
            scores: vec![vec![0.1, 0.2, 0.3], vec![-0.1, 0.0, 0.4]],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        m.write_csv(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "lo_id,q1,q2,q3");
        assert!(lines[1].starts_with("L1,"));
    }
}
