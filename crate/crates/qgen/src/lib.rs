//! Generate-then-validate pipeline for multiple-choice questions.
//!
//! A small language model first over-generates candidate MCQs from
//! learning objectives through an incremental prompting scheme, then the
//! same model validates them: a syntactic filter removes malformed
//! items, an answer-confidence check keeps only questions whose keyed
//! answer the model selects with high probability, and an alignment
//! check keeps only questions most relevant to the objective they came
//! from.
//!
//! The crate is organized along those stages:
//!
//! - [`gateway`]: decoding-parameter types, the [`gateway::Backend`]
//!   trait, an HTTP completions client, and a deterministic mock backend
//!   for offline testing.
//! - [`bank`]: learning objectives, questions, and JSONL persistence.
//! - [`templates`]: the prompt templates, overridable from disk.
//! - [`generator`]: the five-step expansive generation scheme.
//! - [`filter`]: rule-based syntactic screening.
//! - [`confidence`]: probabilistic answer-confidence validation.
//! - [`alignment`]: learning-objective relevance scoring and filtering.
//! - [`judge`]: evaluation sets and a two-turn model judging protocol.
//! - [`agreement`]: Cohen's and Fleiss' kappa, majority vote, reports.
//! - [`pipeline`]: configuration, end-to-end runs, and the ablation
//!   sweep.

pub mod agreement;
pub mod alignment;
pub mod bank;
pub mod confidence;
pub mod filter;
pub mod gateway;
pub mod generator;
pub mod judge;
pub mod pipeline;
pub mod seed;
pub mod templates;

// The guide chapters double as doctests so their code samples can never
// drift from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Generation, "../../../book/src/generation.md");
    chapter!(Validation, "../../../book/src/validation.md");
    chapter!(Judging, "../../../book/src/judging.md");
    chapter!(Agreement, "../../../book/src/agreement.md");
    chapter!(Pipeline, "../../../book/src/pipeline.md");
}
