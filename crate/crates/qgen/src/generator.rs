//! Expansive MCQ generation via five-step incremental prompt completion.
//!
//! The prompt is built up in strict steps: a seeding statement for the
//! learning objective, a batch of sampled question stems, answer choices
//! generated one at a time with lettered anchors, greedy selection of the
//! answer label, and a greedy explanation capped at 200 tokens. Each
//! step's prompt extends the previous one as a strict prefix.

use crate::bank::{LearningObjective, Question, Stage};
use crate::gateway::{DecodingParams, Gateway, GatewayError};
use crate::seed::{derive_indexed, derive_seed};
use crate::templates::{labeled_choice_block, position_label, TemplateSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PromptStep {
    Seeded,
    StemDone,
    ChoicesDone,
    AnswerDone,
    ExplanationDone,
}

/// Accumulated prompt text across the incremental steps. Text only ever
/// grows, and steps advance strictly in order.
#[derive(Debug, Clone)]
pub struct PromptState {
    text: String,
    step: PromptStep,
}

impl PromptState {
    pub fn seeded(text: String) -> Self {
        PromptState {
            text,
            step: PromptStep::Seeded,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn step(&self) -> PromptStep {
        self.step
    }

    /// Append `suffix` and advance to `step`. Panics if the step order is
    /// violated; that is a generator bug, not an input condition.
    pub fn advance(&mut self, step: PromptStep, suffix: &str) {
        assert!(step > self.step, "prompt steps must advance in order");
        self.text.push_str(suffix);
        self.step = step;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of answer choices per question.
    pub choices_k: usize,
    /// Stems sampled per batch call.
    pub batch_size: usize,
    pub beam_width: u32,
    pub stem_max_tokens: u32,
    pub choice_max_tokens: u32,
    pub explanation_max_tokens: u32,
    /// Give up after `n * retry_factor` stem attempts.
    pub retry_factor: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            choices_k: 4,
            batch_size: 20,
            beam_width: 4,
            stem_max_tokens: 48,
            choice_max_tokens: 12,
            explanation_max_tokens: 200,
            retry_factor: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no usable stems for objective {lo} after {attempts} attempts")]
    ZeroUsableOutput { lo: String, attempts: usize },
    #[error("backend failed to continue the {label:?} choice anchor")]
    AnchorNotProduced { label: String },
}

pub struct Generator<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    config: GeneratorConfig,
}

impl<'a> Generator<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, config: GeneratorConfig) -> Self {
        Generator {
            gateway,
            templates,
            config,
        }
    }

    /// Step 0: the seeding statement embedding the LO text verbatim.
    pub fn seed_prompt(&self, lo: &LearningObjective) -> PromptState {
        PromptState::seeded(self.templates.render_seed(lo))
    }

    /// Step 1: sample raw stems until at least `n` are collected. Stems
    /// are returned with the per-stem seed used to sample them.
    pub fn generate_stems(
        &self,
        lo: &LearningObjective,
        n: usize,
        base_seed: u64,
    ) -> Result<Vec<(String, u64)>, GeneratorError> {
        let seed_text = self.seed_prompt(lo);
        let prompt = self
            .templates
            .render_stem_prompt(seed_text.text(), self.config.choices_k);
        let max_attempts = n.max(1) * self.config.retry_factor;
        let mut stems = Vec::with_capacity(n);
        let mut attempt = 0;
        while stems.len() < n && attempt < max_attempts {
            let batch_end = (attempt + self.config.batch_size).min(max_attempts);
            let batch: Vec<(String, u64)> = (attempt..batch_end)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_indexed(base_seed, "stem", i as u64);
                    let params = DecodingParams::nucleus(self.config.stem_max_tokens, seed)
                        .with_stop(&["a)"]);
                    let completion = self.gateway.complete(&prompt, &params)?;
                    Ok::<_, GeneratorError>((extract_stem(&completion.text), seed))
                })
                .collect::<Result<_, _>>()?;
            for (stem, seed) in batch {
                if !stem.is_empty() && stems.len() < n {
                    stems.push((stem, seed));
                }
            }
            attempt = batch_end;
        }
        if stems.is_empty() && n > 0 {
            return Err(GeneratorError::ZeroUsableOutput {
                lo: lo.id.clone(),
                attempts: max_attempts,
            });
        }
        Ok(stems)
    }

    /// Step 2: generate `k` choices one at a time, each conditioned on the
    /// stem and all previously generated choices. The lettered anchors are
    /// part of the prompt only; stored choice text has them stripped.
    pub fn generate_choices(
        &self,
        stem_context: &str,
        k: usize,
        seed: u64,
    ) -> Result<Vec<String>, GeneratorError> {
        assert!(k >= 2, "an MCQ needs at least two choices");
        let mut prompt = stem_context.to_string();
        let mut choices = Vec::with_capacity(k);
        for j in 0..k {
            let label = position_label(j);
            prompt.push_str(&format!("\n{label}) "));
            let params = DecodingParams::beam(
                self.config.choice_max_tokens,
                self.config.beam_width,
                derive_indexed(seed, "choice", j as u64),
            )
            .with_stop(&["\n"]);
            let completion = self.gateway.complete(&prompt, &params)?;
            let text = completion.text.trim().to_string();
            if text.is_empty() {
                return Err(GeneratorError::AnchorNotProduced { label });
            }
            prompt.push_str(&text);
            choices.push(text);
        }
        Ok(choices)
    }

    /// Step 3: greedy selection of the answer label over the k choice
    /// labels (no "none of the above" at generation time). Argmax ties
    /// break to the lowest label index.
    pub fn select_answer(&self, question_context: &str, k: usize) -> Result<usize, GeneratorError> {
        let prompt = format!("{question_context}\nAnswer:");
        let labels: Vec<String> = (0..k).map(position_label).collect();
        let dist = self.gateway.label_distribution(&prompt, &labels)?;
        Ok(argmax_lowest(&dist.iter().map(|s| s.probability).collect::<Vec<_>>()))
    }

    /// Step 4: greedy explanation, at most `explanation_max_tokens` new
    /// tokens, stopping at a blank line if one comes sooner.
    pub fn generate_explanation(
        &self,
        question_context: &str,
        with_answer_line: &str,
    ) -> Result<(String, bool), GeneratorError> {
        let prompt = format!("{question_context}{with_answer_line}\nExplanation:");
        let params =
            DecodingParams::greedy(self.config.explanation_max_tokens).with_stop(&["\n\n"]);
        let completion = self.gateway.complete(&prompt, &params)?;
        if completion.truncated {
            log::debug!("explanation truncated at {} tokens", self.config.explanation_max_tokens);
        }
        Ok((completion.text.trim().to_string(), completion.truncated))
    }

    /// Run all five steps for one learning objective, producing `n`
    /// questions at stage `generated`. Stems within a batch acquire their
    /// choices, answers, and explanations in parallel; results merge in
    /// stable stem order.
    pub fn generate_for_lo(
        &self,
        lo: &LearningObjective,
        n: usize,
        base_seed: u64,
    ) -> Result<Vec<Question>, GeneratorError> {
        let stems = self.generate_stems(lo, n, base_seed)?;
        stems
            .into_par_iter()
            .enumerate()
            .map(|(i, (stem, stem_seed))| self.build_question(lo, i, &stem, stem_seed))
            .collect()
    }

    fn build_question(
        &self,
        lo: &LearningObjective,
        index: usize,
        stem: &str,
        stem_seed: u64,
    ) -> Result<Question, GeneratorError> {
        let mut state = self.seed_prompt(lo);
        let directive_prompt = self
            .templates
            .render_stem_prompt(state.text(), self.config.choices_k);
        let directive_suffix = directive_prompt[state.text().len()..].to_string();
        state.advance(PromptStep::StemDone, &format!("{directive_suffix} {stem}"));

        let choices =
            self.generate_choices(state.text(), self.config.choices_k, derive_seed(stem_seed, "choices"))?;
        state.advance(
            PromptStep::ChoicesDone,
            &format!("\n{}", labeled_choice_block(&choices)),
        );

        let answer_index = self.select_answer(state.text(), choices.len())?;
        // The stored answer text is the addressed choice copied verbatim.
        let answer_line = format!(
            "\nAnswer: {}) {}",
            position_label(answer_index),
            choices[answer_index]
        );
        state.advance(PromptStep::AnswerDone, &answer_line);

        let (explanation, _truncated) = self.generate_explanation(state.text(), "")?;
        state.advance(PromptStep::ExplanationDone, &format!("\nExplanation: {explanation}"));

        Ok(Question {
            id: format!("{}-{index:05}", lo.id),
            origin_lo: lo.id.clone(),
            stem: stem.to_string(),
            choices,
            answer_index,
            explanation,
            stage: Stage::Generated,
            rejection_reasons: Vec::new(),
            generation_seed: stem_seed,
        })
    }
}

/// A stem ends at the first newline following the question mark, or at
/// the stop sequence. Malformed continuations are kept; syntactic
/// filtering removes them later.
fn extract_stem(text: &str) -> String {
    let cut = match text.find('?') {
        Some(qpos) => match text[qpos..].find('\n') {
            Some(nl) => &text[..qpos + nl],
            None => text,
        },
        None => text,
    };
    cut.trim().to_string()
}

/// Index of the maximum value; ties break to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let tied = values
        .iter()
        .filter(|&&v| v == values[best])
        .count();
    if tied > 1 {
        log::debug!("argmax tie over {tied} values; choosing lowest index {best}");
    }
    best
}
