//! Prompt templates with named placeholders.
//!
//! Defaults are compiled in from `templates/v1/`; any template can be
//! overridden by dropping a file with the same name into a directory
//! named in the pipeline config. Placeholders use the form
//! `{learning objective}`, `{number of choices}`, `{stem}`, `{choices}`.

use crate::bank::{LearningObjective, LoForm};
use std::path::Path;

pub const TEMPLATE_VERSION: &str = "v1";

/// Names of the overridable template files, without the `.txt` suffix.
pub const TEMPLATE_NAMES: [&str; 7] = [
    "seed-action",
    "seed-content",
    "stem-directive",
    "answer-prompt",
    "lo-context",
    "judge-turn1",
    "judge-turn2",
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub seed_action: String,
    pub seed_content: String,
    pub stem_directive: String,
    pub answer_prompt: String,
    pub lo_context: String,
    pub judge_turn1: String,
    pub judge_turn2: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            seed_action: include_str!("../templates/v1/seed-action.txt").to_string(),
            seed_content: include_str!("../templates/v1/seed-content.txt").to_string(),
            stem_directive: include_str!("../templates/v1/stem-directive.txt").to_string(),
            answer_prompt: include_str!("../templates/v1/answer-prompt.txt").to_string(),
            lo_context: include_str!("../templates/v1/lo-context.txt").to_string(),
            judge_turn1: include_str!("../templates/v1/judge-turn1.txt").to_string(),
            judge_turn2: include_str!("../templates/v1/judge-turn2.txt").to_string(),
        }
    }
}

impl TemplateSet {
    /// Defaults with per-file overrides from `dir`. A file named
    /// `{name}.txt` replaces the template of the same name; one trailing
    /// newline is stripped so editors that add it do not change prompts.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = TemplateSet::default();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let mut text = std::fs::read_to_string(&path)?;
                if text.ends_with('\n') {
                    text.pop();
                }
                *set.slot_mut(name) = text;
            }
        }
        Ok(set)
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "seed-action" => &mut self.seed_action,
            "seed-content" => &mut self.seed_content,
            "stem-directive" => &mut self.stem_directive,
            "answer-prompt" => &mut self.answer_prompt,
            "lo-context" => &mut self.lo_context,
            "judge-turn1" => &mut self.judge_turn1,
            "judge-turn2" => &mut self.judge_turn2,
            other => unreachable!("unknown template {other}"),
        }
    }

    /// Seeding statement embedding the LO text verbatim; wording branches
    /// on the LO form.
    pub fn render_seed(&self, lo: &LearningObjective) -> String {
        let template = match lo.form {
            LoForm::ActionBased => &self.seed_action,
            LoForm::ContentBased => &self.seed_content,
        };
        template.replace("{learning objective}", &lo.text)
    }

    /// Full prompt for stem generation: seed statement plus the
    /// create-an-MCQ directive. Ends with the open "Question:" anchor.
    pub fn render_stem_prompt(&self, seed_text: &str, choices_k: usize) -> String {
        let directive = self
            .stem_directive
            .replace("{number of choices}", &choices_k.to_string());
        format!("{seed_text}\n\n{directive}")
    }

    /// The answer-confidence prompt: stem, labeled choices, open answer
    /// anchor. The next token is expected to be a choice label.
    pub fn render_answer_prompt(&self, stem: &str, labeled_choices: &str) -> String {
        self.answer_prompt
            .replace("{stem}", stem)
            .replace("{choices}", labeled_choices)
    }

    /// Context prefix introducing a learning objective for relevance
    /// scoring. Ends with a blank line so the scored block starts on a
    /// token boundary.
    pub fn render_lo_context(&self, lo_text: &str) -> String {
        let body = self.lo_context.replace("{learning objective}", lo_text);
        format!("{body}\n\n")
    }

    pub fn render_judge_turn1(&self, stem: &str, labeled_choices: &str) -> String {
        self.judge_turn1
            .replace("{stem}", stem)
            .replace("{choices}", labeled_choices)
    }

    pub fn render_judge_turn2(&self, lo_text: &str) -> String {
        self.judge_turn2.replace("{learning objective}", lo_text)
    }
}

/// Letter label for a choice position: 0 -> "a", 1 -> "b", ...
pub fn position_label(index: usize) -> String {
    assert!(index < 26, "more than 26 choice positions are not supported");
    ((b'a' + index as u8) as char).to_string()
}

/// Render choices as lettered lines: `a) text`, one per line.
pub fn labeled_choice_block<S: AsRef<str>>(choices: &[S]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}) {}", position_label(i), c.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lo(form: LoForm) -> LearningObjective {
        LearningObjective {
            id: "LO".into(),
            text: "describe different methods of irrigation".into(),
            form,
            unit: None,
            topic: None,
        }
    }

    #[test]
    fn seed_embeds_lo_verbatim_and_branches_on_form() {
        let set = TemplateSet::default();
        let action = set.render_seed(&lo(LoForm::ActionBased));
        let content = set.render_seed(&lo(LoForm::ContentBased));
        assert!(action.contains("describe different methods of irrigation"));
        assert!(content.contains("understands the following facts:"));
        assert_ne!(action, content);
    }

    #[test]
    fn labeled_block_letters_in_order() {
        let block = labeled_choice_block(&["one", "two", "three"]);
        assert_eq!(block, "a) one\nb) two\nc) three");
    }

    #[test]
    fn overrides_replace_only_named_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("seed-action.txt"), "custom {learning objective}\n").unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(
            set.render_seed(&lo(LoForm::ActionBased)),
            "custom describe different methods of irrigation"
        );
        assert_eq!(set.seed_content, TemplateSet::default().seed_content);
    }
}
