//! Evaluation-study harness: balanced control/treatment evaluation sets
//! and a two-turn scaffolded judging protocol for any gateway-backed
//! model.
//!
//! Turn 1 sets a question-answering context, shows the MCQ with "none of
//! the above" re-added, and prefixes the response so the next token is a
//! choice label. Turn 2 appends the alignment survey question with a
//! yes/no response prefix. Each item is judged in its own two-turn
//! conversation; nothing carries over between items.

use crate::bank::{Question, QuestionBank, Stage};
use crate::confidence::NOTA_TEXT;
use crate::gateway::{Gateway, GatewayError, LabelScore};
use crate::generator::argmax_lowest;
use crate::seed::derive_seed;
use crate::templates::{labeled_choice_block, position_label, TemplateSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// The shown LO is the one the question was generated from.
    Control,
    /// The shown LO is a different, randomly selected objective.
    Treatment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question_id: String,
    pub origin_lo: String,
    pub shown_lo: String,
    pub condition: Condition,
    pub presentation_order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Yes,
    No,
}

/// One judge's full judgment of one question: the answer label chosen in
/// turn 1 and the yes/no alignment verdict from turn 2. Human survey
/// exports import into the same schema; `judge_id` distinguishes humans
/// ("P1".."P7") from machine judges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub judge_id: String,
    pub question_id: String,
    pub answer_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_distribution: Option<Vec<LabelScore>>,
    pub alignment_verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_yes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shown_lo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("insufficient questions at alignment-pass: need {per_lo} per objective, deficient: {deficient:?}")]
    InsufficientQuestions { per_lo: usize, deficient: Vec<String> },
    #[error("per_lo must be even to split into control and treatment halves, got {0}")]
    OddPerLo(usize),
    #[error("need at least 2 selected objectives to draw treatment LOs, got {0}")]
    TooFewObjectives(usize),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Build a balanced within-subject evaluation set: `n_los` randomly
/// selected objectives, `per_lo` questions each, split half/half into
/// control and treatment. Treatment LOs are drawn uniformly from the
/// other selected objectives. Presentation order is a seeded shuffle.
pub fn build_eval_set(
    bank: &QuestionBank,
    n_los: usize,
    per_lo: usize,
    seed: u64,
) -> Result<Vec<EvalItem>, JudgeError> {
    if !per_lo.is_multiple_of(2) {
        return Err(JudgeError::OddPerLo(per_lo));
    }
    if n_los < 2 {
        return Err(JudgeError::TooFewObjectives(n_los));
    }
    let mut per_objective: Vec<(String, Vec<&Question>)> = bank
        .objectives
        .iter()
        .map(|lo| {
            let qs: Vec<&Question> = bank
                .questions
                .iter()
                .filter(|q| q.stage == Stage::AlignmentPass && q.origin_lo == lo.id)
                .collect();
            (lo.id.clone(), qs)
        })
        .collect();

    let eligible: Vec<usize> = (0..per_objective.len())
        .filter(|&i| per_objective[i].1.len() >= per_lo)
        .collect();
    if eligible.len() < n_los {
        let deficient: Vec<String> = per_objective
            .iter()
            .filter(|(_, qs)| !qs.is_empty() && qs.len() < per_lo)
            .map(|(id, _)| id.clone())
            .collect();
        return Err(JudgeError::InsufficientQuestions { per_lo, deficient });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval-set"));
    let mut selected = eligible;
    selected.shuffle(&mut rng);
    selected.truncate(n_los);
    let selected_ids: Vec<String> = selected
        .iter()
        .map(|&i| per_objective[i].0.clone())
        .collect();

    let mut items = Vec::with_capacity(n_los * per_lo);
    for &idx in &selected {
        let (lo_id, questions) = &mut per_objective[idx];
        questions.shuffle(&mut rng);
        for (k, q) in questions.iter().take(per_lo).enumerate() {
            let (condition, shown_lo) = if k < per_lo / 2 {
                (Condition::Control, lo_id.clone())
            } else {
                let others: Vec<&String> =
                    selected_ids.iter().filter(|id| *id != lo_id).collect();
                let pick = others[rand::Rng::gen_range(&mut rng, 0..others.len())];
                (Condition::Treatment, pick.clone())
            };
            items.push(EvalItem {
                question_id: q.id.clone(),
                origin_lo: lo_id.clone(),
                shown_lo,
                condition,
                presentation_order: 0,
            });
        }
    }
    items.shuffle(&mut rng);
    for (i, item) in items.iter_mut().enumerate() {
        item.presentation_order = i;
    }
    Ok(items)
}

/// Independent per-judge presentation order for the same items.
pub fn shuffle_for_judge(items: &[EvalItem], judge_seed: u64) -> Vec<EvalItem> {
    let mut shuffled: Vec<EvalItem> = items.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(judge_seed, "judge-order"));
    shuffled.shuffle(&mut rng);
    for (i, item) in shuffled.iter_mut().enumerate() {
        item.presentation_order = i;
    }
    shuffled
}

/// Turn-1 result before the alignment question is asked.
#[derive(Debug, Clone)]
pub struct AnswerJudgment {
    pub answer_label: String,
    pub distribution: Vec<LabelScore>,
    /// Full conversation text through the completed turn-1 response.
    pub conversation: String,
}

pub struct SurrogateJudge<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    pub judge_id: String,
}

impl<'a> SurrogateJudge<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, judge_id: impl Into<String>) -> Self {
        SurrogateJudge {
            gateway,
            templates,
            judge_id: judge_id.into(),
        }
    }

    /// Labels shown to the judge: the original choices plus NOTA last.
    fn presented_labels(q: &Question) -> (Vec<String>, String) {
        let mut texts: Vec<String> = q.choices.clone();
        texts.push(NOTA_TEXT.to_string());
        let labels: Vec<String> = (0..texts.len()).map(position_label).collect();
        (labels, labeled_choice_block(&texts))
    }

    /// Turn 1: answer the MCQ. The response prefix forces the next token
    /// to be a choice label; the argmax label completes the response.
    pub fn judge_answer(&self, q: &Question) -> Result<AnswerJudgment, GatewayError> {
        let (labels, block) = Self::presented_labels(q);
        let prompt = self.templates.render_judge_turn1(&q.stem, &block);
        let distribution = self.gateway.label_distribution(&prompt, &labels)?;
        let probs: Vec<f64> = distribution.iter().map(|s| s.probability).collect();
        let top = argmax_lowest(&probs);
        let answer_label = distribution[top].label.clone();
        let conversation = format!("{prompt}{answer_label}**");
        Ok(AnswerJudgment {
            answer_label,
            distribution,
            conversation,
        })
    }

    /// Turn 2: the alignment survey question, in the same conversation.
    /// Yes/No probabilities are renormalized over the two tokens; a
    /// perfect tie resolves to No.
    pub fn judge_alignment(
        &self,
        turn1: &AnswerJudgment,
        shown_lo_text: &str,
    ) -> Result<(Verdict, f64), GatewayError> {
        let prompt = format!(
            "{}\n\n{}",
            turn1.conversation,
            self.templates.render_judge_turn2(shown_lo_text)
        );
        let labels = vec!["Yes".to_string(), "No".to_string()];
        let dist = self.gateway.label_distribution(&prompt, &labels)?;
        let p_yes = dist[0].probability;
        let verdict = if p_yes > dist[1].probability {
            Verdict::Yes
        } else {
            if p_yes == dist[1].probability {
                log::debug!("yes/no tie on alignment judgment; resolving to no");
            }
            Verdict::No
        };
        Ok((verdict, p_yes))
    }

    /// Judge one item in a fresh two-turn conversation.
    pub fn judge_item(
        &self,
        q: &Question,
        item: &EvalItem,
        shown_lo_text: &str,
    ) -> Result<JudgmentRecord, GatewayError> {
        let turn1 = self.judge_answer(q)?;
        let (verdict, p_yes) = self.judge_alignment(&turn1, shown_lo_text)?;
        Ok(JudgmentRecord {
            judge_id: self.judge_id.clone(),
            question_id: q.id.clone(),
            answer_label: turn1.answer_label,
            answer_distribution: Some(turn1.distribution),
            alignment_verdict: verdict,
            p_yes: Some(p_yes),
            shown_lo: Some(item.shown_lo.clone()),
            condition: Some(item.condition),
        })
    }

    /// Judge a whole evaluation set concurrently; each conversation is
    /// self-contained state. Records come back in item order.
    pub fn judge_set(
        &self,
        bank: &QuestionBank,
        items: &[EvalItem],
    ) -> Result<Vec<JudgmentRecord>, JudgeError> {
        items
            .par_iter()
            .map(|item| {
                let q = bank
                    .questions
                    .iter()
                    .find(|q| q.id == item.question_id)
                    .ok_or_else(|| JudgeError::Io {
                        path: String::new(),
                        message: format!("eval item references unknown question {}", item.question_id),
                    })?;
                let lo = bank.objective(&item.shown_lo).ok_or_else(|| JudgeError::Io {
                    path: String::new(),
                    message: format!("eval item references unknown objective {}", item.shown_lo),
                })?;
                Ok(self.judge_item(q, item, &lo.text)?)
            })
            .collect()
    }
}

pub fn write_records(records: &[JudgmentRecord], path: &Path) -> Result<(), JudgeError> {
    let file = std::fs::File::create(path).map_err(|e| JudgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize infallibly");
        writeln!(w, "{line}").map_err(|e| JudgeError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| JudgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_records(path: &Path) -> Result<Vec<JudgmentRecord>, JudgeError> {
    let file = std::fs::File::open(path).map_err(|e| JudgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JudgeError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| JudgeError::Io {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{test_question, LearningObjective, LoForm};
    use crate::gateway::{MockBackend, MockScenario, RecordingBackend};
    use std::sync::Arc;

    fn bank_with(n_los: usize, per_lo: usize) -> QuestionBank {
        let mut bank = QuestionBank::default();
        for i in 0..n_los {
            let id = format!("LO-{i}");
            bank.objectives.push(LearningObjective {
                id: id.clone(),
                text: format!("objective number {i}"),
                form: LoForm::ActionBased,
                unit: None,
                topic: None,
            });
            for j in 0..per_lo {
                let mut q = test_question(
                    &format!("{id}-q{j}"),
                    &id,
                    &format!("Question {j} for objective {i}?"),
                    &["Aaaaa one", "Bbbbb two", "Ccccc three", "Ddddd four"],
                    0,
                );
                q.stage = Stage::AlignmentPass;
                bank.questions.push(q);
            }
        }
        bank
    }

    #[test]
    fn balanced_sixty_four_item_set() {
        let bank = bank_with(8, 10);
        let items = build_eval_set(&bank, 8, 8, 99).unwrap();
        assert_eq!(items.len(), 64);
        let control = items.iter().filter(|i| i.condition == Condition::Control).count();
        assert_eq!(control, 32);
        for lo in bank.objectives.iter().map(|o| &o.id) {
            for cond in [Condition::Control, Condition::Treatment] {
                let n = items
                    .iter()
                    .filter(|i| i.origin_lo == *lo && i.condition == cond)
                    .count();
                assert_eq!(n, 4, "objective {lo} has {n} items in {cond:?}");
            }
        }
        for item in &items {
            match item.condition {
                Condition::Control => assert_eq!(item.shown_lo, item.origin_lo),
                Condition::Treatment => assert_ne!(item.shown_lo, item.origin_lo),
            }
        }
    }

    #[test]
    fn same_seed_same_assignment() {
        let bank = bank_with(4, 6);
        assert_eq!(
            build_eval_set(&bank, 4, 4, 7).unwrap(),
            build_eval_set(&bank, 4, 4, 7).unwrap()
        );
    }

    #[test]
    fn deficient_objectives_are_named() {
        let mut bank = bank_with(3, 8);
        // Starve one objective below the requirement.
        bank.questions.retain(|q| !(q.origin_lo == "LO-1" && q.id.ends_with("q7")));
        let err = build_eval_set(&bank, 3, 8, 1).unwrap_err();
        match err {
            JudgeError::InsufficientQuestions { deficient, .. } => {
                assert_eq!(deficient, vec!["LO-1".to_string()]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn judge_answer_uses_fixture_argmax() {
        let scenario = MockScenario::default().script_labels(
            "The answer to Q1 is",
            &[("a", -4.0), ("b", -4.0), ("c", 2.0), ("d", -4.0), ("e", -4.0)],
        );
        let gw = Gateway::new(Arc::new(MockBackend::new(scenario)));
        let tpl = TemplateSet::default();
        let judge = SurrogateJudge::new(&gw, &tpl, "surrogate");
        let q = test_question("q", "LO", "Pick the third option?", &["Aaaaa", "Bbbbb", "Ccccc", "Ddddd"], 2);
        let a = judge.judge_answer(&q).unwrap();
        assert_eq!(a.answer_label, "c");
        // All five labels rendered, NOTA last.
        assert!(a.conversation.contains("e) None of the above"));
    }

    #[test]
    fn alignment_verdict_renormalizes_yes_no() {
        let scenario = MockScenario::default()
            .script_labels("The answer to Q1 is", &[("a", 1.0), ("b", 0.0), ("c", 0.0), ("d", 0.0), ("e", 0.0)])
            .script_labels("My answer is", &[("Yes", 0.8f64.ln()), ("No", 0.2f64.ln())]);
        let gw = Gateway::new(Arc::new(MockBackend::new(scenario)));
        let tpl = TemplateSet::default();
        let judge = SurrogateJudge::new(&gw, &tpl, "surrogate");
        let q = test_question("q", "LO", "Any question at all here?", &["Aaaaa", "Bbbbb", "Ccccc", "Ddddd"], 0);
        let turn1 = judge.judge_answer(&q).unwrap();
        let (verdict, p_yes) = judge.judge_alignment(&turn1, "some objective").unwrap();
        assert_eq!(verdict, Verdict::Yes);
        assert!((p_yes - 0.8).abs() < 1e-9);
    }

    #[test]
    fn yes_no_tie_resolves_to_no() {
        let scenario = MockScenario::default()
            .script_labels("The answer to Q1 is", &[("a", 1.0), ("b", 0.0), ("c", 0.0), ("d", 0.0), ("e", 0.0)])
            .script_labels("My answer is", &[("Yes", 0.5f64.ln()), ("No", 0.5f64.ln())]);
        let gw = Gateway::new(Arc::new(MockBackend::new(scenario)));
        let tpl = TemplateSet::default();
        let judge = SurrogateJudge::new(&gw, &tpl, "surrogate");
        let q = test_question("q", "LO", "Any question at all here?", &["Aaaaa", "Bbbbb", "Ccccc", "Ddddd"], 0);
        let turn1 = judge.judge_answer(&q).unwrap();
        let (verdict, _) = judge.judge_alignment(&turn1, "some objective").unwrap();
        assert_eq!(verdict, Verdict::No);
    }

    #[test]
    fn conversations_are_isolated_across_items() {
        let bank = bank_with(2, 4);
        let items = build_eval_set(&bank, 2, 2, 3).unwrap();
        let backend = Arc::new(RecordingBackend::new(MockBackend::new(MockScenario::default())));
        let gw = Gateway::new(backend.clone());
        let tpl = TemplateSet::default();
        let judge = SurrogateJudge::new(&gw, &tpl, "surrogate");
        judge.judge_set(&bank, &items).unwrap();
        // No prompt for one item may contain another item's stem.
        let stems: Vec<(String, String)> = items
            .iter()
            .map(|i| {
                let q = bank.questions.iter().find(|q| q.id == i.question_id).unwrap();
                (q.id.clone(), q.stem.clone())
            })
            .collect();
        for record in backend.records() {
            let containing: Vec<&String> = stems
                .iter()
                .filter(|(_, stem)| record.prompt.contains(stem.as_str()))
                .map(|(id, _)| id)
                .collect();
            assert!(containing.len() <= 1, "prompt mixes items: {containing:?}");
        }
    }

    #[test]
    fn records_roundtrip() {
        let records = vec![JudgmentRecord {
            judge_id: "P1".into(),
            question_id: "q1".into(),
            answer_label: "b".into(),
            answer_distribution: None,
            alignment_verdict: Verdict::Yes,
            p_yes: None,
            shown_lo: Some("LO-1".into()),
            condition: Some(Condition::Control),
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_records(&records, f.path()).unwrap();
        assert_eq!(read_records(f.path()).unwrap(), records);
    }
}
