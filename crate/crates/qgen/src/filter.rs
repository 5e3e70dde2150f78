//! Rule-based exclusion of malformed questions.
//!
//! The rules mirror classic item-writing-flaw screening: trivial stems,
//! empty or duplicate choices, trivially short choices, "all/none of the
//! above" options, dichotomous yes/no/true/false choices, K-type choices
//! starting with "both" or "neither", and inadequate explanations.
//! Character counts are measured on canonicalized text in Unicode scalar
//! values.

use crate::bank::{canonical_key, canonicalize, Question, Stage};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

pub const MIN_STEM_CHARS: usize = 10;
pub const MIN_CHOICE_CHARS: usize = 5;
pub const MIN_EXPLANATION_CHARS: usize = 10;

/// Stable reason codes emitted into bank files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    DupQuestion,
    StemTooShort,
    ChoiceEmpty,
    ChoiceDuplicate,
    ChoiceTooShort,
    ChoiceFlawedAotaNota,
    ChoiceDichotomous,
    ChoiceBothNeither,
    ExplanationTooShort,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::DupQuestion => "dup-question",
            RejectReason::StemTooShort => "stem-too-short",
            RejectReason::ChoiceEmpty => "choice-empty",
            RejectReason::ChoiceDuplicate => "choice-duplicate",
            RejectReason::ChoiceTooShort => "choice-too-short",
            RejectReason::ChoiceFlawedAotaNota => "choice-flawed-aota-nota",
            RejectReason::ChoiceDichotomous => "choice-dichotomous",
            RejectReason::ChoiceBothNeither => "choice-both-neither",
            RejectReason::ExplanationTooShort => "explanation-too-short",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Outcome of screening one question. `passed` holds exactly when
/// `reasons` is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreenVerdict {
    pub reasons: Vec<RejectReason>,
}

impl ScreenVerdict {
    pub fn passed(&self) -> bool {
        self.reasons.is_empty()
    }
}

const FLAWED_CHOICES: [&str; 2] = ["all of the above", "none of the above"];
const DICHOTOMOUS_CHOICES: [&str; 4] = ["yes", "no", "true", "false"];

/// Apply all exclusion rules to one question. Every violated rule is
/// reported (once per reason code), not only the first. Matching is
/// case-insensitive on canonicalized text.
pub fn screen(q: &Question) -> ScreenVerdict {
    let mut reasons = HashSet::new();

    if canonicalize(&q.stem).chars().count() < MIN_STEM_CHARS {
        reasons.insert(RejectReason::StemTooShort);
    }

    let mut seen_choices = HashSet::new();
    for choice in &q.choices {
        let c = canonicalize(choice);
        if c.is_empty() {
            reasons.insert(RejectReason::ChoiceEmpty);
            continue;
        }
        if !seen_choices.insert(c.clone()) {
            reasons.insert(RejectReason::ChoiceDuplicate);
        }
        if c.chars().count() < MIN_CHOICE_CHARS {
            reasons.insert(RejectReason::ChoiceTooShort);
        }
        if FLAWED_CHOICES.contains(&c.as_str()) {
            reasons.insert(RejectReason::ChoiceFlawedAotaNota);
        }
        // Whole-choice equality, not substring: "Nitrous oxide" must not
        // trip on "no".
        if DICHOTOMOUS_CHOICES.contains(&c.as_str()) {
            reasons.insert(RejectReason::ChoiceDichotomous);
        }
        if matches!(c.split_whitespace().next(), Some("both") | Some("neither")) {
            reasons.insert(RejectReason::ChoiceBothNeither);
        }
    }

    if canonicalize(&q.explanation).chars().count() < MIN_EXPLANATION_CHARS {
        reasons.insert(RejectReason::ExplanationTooShort);
    }

    let mut reasons: Vec<RejectReason> = reasons.into_iter().collect();
    reasons.sort();
    ScreenVerdict { reasons }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub retained: Vec<Question>,
    pub rejected: Vec<Question>,
}

/// Deduplicate by canonical key (first occurrence in stable order wins),
/// then screen each survivor. Retained questions advance to
/// `syntactic-pass`; rejected ones carry their reason codes.
pub fn filter_bank(questions: Vec<Question>) -> FilterOutcome {
    let mut outcome = FilterOutcome::default();
    let mut seen_keys = HashSet::new();
    for mut q in questions {
        if !seen_keys.insert(canonical_key(&q)) {
            q.reject(vec![RejectReason::DupQuestion.code().to_string()]);
            outcome.rejected.push(q);
            continue;
        }
        let verdict = screen(&q);
        if verdict.passed() {
            if q.stage.rank() < Stage::SyntacticPass.rank() {
                q.advance_to(Stage::SyntacticPass).expect("generated -> syntactic-pass");
            }
            outcome.retained.push(q);
        } else {
            q.reject(verdict.reasons.iter().map(|r| r.code().to_string()).collect());
            outcome.rejected.push(q);
        }
    }
    outcome
}
