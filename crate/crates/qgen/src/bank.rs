//! Domain records for learning objectives and questions, plus durable
//! storage of the candidate pool across pipeline stages.
//!
//! Bank files are JSONL: one metadata header object on the first line,
//! then one record per line. The header carries an explicit schema
//! version. Learning objectives are ingested from delimited text (.tsv or
//! .csv) with columns `id`, `form`, `text`, `unit`, `topic`.

use crate::confidence::ConfidenceDecision;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const BANK_SCHEMA: &str = "qgen-bank/1";
pub const LO_SCHEMA_COLUMNS: [&str; 5] = ["id", "form", "text", "unit", "topic"];

/// Whether an LO is phrased as a verb phrase ("describe different methods
/// of irrigation") or as a statement of fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoForm {
    ActionBased,
    ContentBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningObjective {
    pub id: String,
    pub text: String,
    pub form: LoForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

/// Lifecycle stage of a question along the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generated,
    SyntacticPass,
    ConfidencePass,
    AlignmentPass,
    Rejected,
}

impl Stage {
    /// Position along the pipeline order; `Rejected` is terminal.
    pub fn rank(self) -> u8 {
        match self {
            Stage::Generated => 0,
            Stage::SyntacticPass => 1,
            Stage::ConfidencePass => 2,
            Stage::AlignmentPass => 3,
            Stage::Rejected => 4,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Generated => "generated",
            Stage::SyntacticPass => "syntactic-pass",
            Stage::ConfidencePass => "confidence-pass",
            Stage::AlignmentPass => "alignment-pass",
            Stage::Rejected => "rejected",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub origin_lo: String,
    pub stem: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub explanation: String,
    pub stage: Stage,
    #[serde(default)]
    pub rejection_reasons: Vec<String>,
    pub generation_seed: u64,
}

impl Question {
    /// Move the question forward along the pipeline. Transitions must be
    /// monotone; moving backwards is a bug in the caller.
    pub fn advance_to(&mut self, stage: Stage) -> Result<(), BankError> {
        if stage.rank() <= self.stage.rank() {
            return Err(BankError::NonMonotoneStage {
                from: self.stage,
                to: stage,
            });
        }
        self.stage = stage;
        Ok(())
    }

    pub fn reject(&mut self, reasons: Vec<String>) {
        debug_assert!(!reasons.is_empty());
        self.stage = Stage::Rejected;
        self.rejection_reasons = reasons;
    }

    pub fn answer_text(&self) -> &str {
        &self.choices[self.answer_index]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuestionBank {
    pub objectives: Vec<LearningObjective>,
    pub questions: Vec<Question>,
    /// Confidence-validation decision records, one per evaluated question,
    /// accepted or not.
    #[serde(default)]
    pub decisions: Vec<ConfidenceDecision>,
    #[serde(default)]
    pub pipeline_config_digest: String,
}

impl QuestionBank {
    pub fn objective(&self, id: &str) -> Option<&LearningObjective> {
        self.objectives.iter().find(|o| o.id == id)
    }

    pub fn questions_at(&self, stage: Stage) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.stage == stage)
    }

    fn validate(&self) -> Result<(), BankError> {
        let ids: HashSet<&str> = self.objectives.iter().map(|o| o.id.as_str()).collect();
        for q in &self.questions {
            if !ids.contains(q.origin_lo.as_str()) {
                return Err(BankError::UnknownOrigin {
                    question: q.id.clone(),
                    origin_lo: q.origin_lo.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("schema version mismatch: found {found:?}, expected {expected:?}")]
    SchemaVersionMismatch { found: String, expected: String },
    #[error("question {question} references unknown learning objective {origin_lo}")]
    UnknownOrigin { question: String, origin_lo: String },
    #[error("stage transition {from} -> {to} is not monotone")]
    NonMonotoneStage { from: Stage, to: Stage },
}

fn io_err(path: &Path, source: std::io::Error) -> BankError {
    BankError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Load learning objectives from a delimited file. The delimiter is a tab
/// for `.tsv`, a comma otherwise. The first row must be the header
/// `id, form, text, unit, topic`.
pub fn load_objectives(path: &Path) -> Result<Vec<LearningObjective>, BankError> {
    let delimiter = match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => b'\t',
        _ => b',',
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => io_err(path, std::io::Error::other(e.to_string())),
            _ => BankError::Parse {
                line: 0,
                message: e.to_string(),
            },
        })?;

    let mut objectives = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let row = row.map_err(|e| BankError::Parse {
            line,
            message: e.to_string(),
        })?;
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let field = |idx: usize| row.get(idx).unwrap_or("").trim().to_string();
        let id = field(0);
        if id.is_empty() {
            return Err(BankError::Parse {
                line,
                message: "empty id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(BankError::DuplicateId { id, line });
        }
        let form = match field(1).as_str() {
            "action-based" | "action" => LoForm::ActionBased,
            "content-based" | "content" => LoForm::ContentBased,
            other => {
                return Err(BankError::Parse {
                    line,
                    message: format!("unknown form {other:?} (expected action-based or content-based)"),
                })
            }
        };
        let text = field(2);
        if text.is_empty() {
            return Err(BankError::Parse {
                line,
                message: "empty text".into(),
            });
        }
        let opt = |s: String| if s.is_empty() { None } else { Some(s) };
        objectives.push(LearningObjective {
            id,
            text,
            form,
            unit: opt(field(3)),
            topic: opt(field(4)),
        });
    }
    Ok(objectives)
}

/// Canonicalize text for duplicate detection and rule matching: trim,
/// collapse internal whitespace runs to a single space, lowercase.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Duplicate-detection key over stem and ordered choices. Equal keys mean
/// duplicates; choice order is preserved (shuffling happens only at
/// validation presentation time).
pub fn canonical_key(q: &Question) -> String {
    let mut key = canonicalize(&q.stem);
    for c in &q.choices {
        key.push('\u{1f}');
        key.push_str(&canonicalize(c));
    }
    key
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    schema: String,
    pipeline_config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum BankLine {
    Objective(LearningObjective),
    Question(Question),
    Confidence(ConfidenceDecision),
}

/// Write a bank as JSONL with a header line. Write-then-read round-trips
/// the bank field for field.
pub fn write_bank(bank: &QuestionBank, path: &Path) -> Result<(), BankError> {
    bank.validate()?;
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    fn emit<T: Serialize>(w: &mut impl Write, path: &Path, v: &T) -> Result<(), BankError> {
        let json = serde_json::to_string(v).expect("bank records serialize infallibly");
        writeln!(w, "{json}").map_err(|e| io_err(path, e))
    }
    let header = BankHeader {
        schema: BANK_SCHEMA.to_string(),
        pipeline_config_digest: bank.pipeline_config_digest.clone(),
    };
    emit(&mut w, path, &header)?;
    for o in &bank.objectives {
        emit(&mut w, path, &BankLine::Objective(o.clone()))?;
    }
    for q in &bank.questions {
        emit(&mut w, path, &BankLine::Question(q.clone()))?;
    }
    for d in &bank.decisions {
        emit(&mut w, path, &BankLine::Confidence(d.clone()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_bank(path: &Path) -> Result<QuestionBank, BankError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => {
            return Err(BankError::Parse {
                line: 1,
                message: "empty bank file (missing header)".into(),
            })
        }
    };
    let header: BankHeader = serde_json::from_str(&header_line).map_err(|e| BankError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != BANK_SCHEMA {
        return Err(BankError::SchemaVersionMismatch {
            found: header.schema,
            expected: BANK_SCHEMA.to_string(),
        });
    }

    let mut bank = QuestionBank {
        pipeline_config_digest: header.pipeline_config_digest,
        ..Default::default()
    };
    for (i, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BankLine = serde_json::from_str(&line).map_err(|e| BankError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match record {
            BankLine::Objective(o) => bank.objectives.push(o),
            BankLine::Question(q) => bank.questions.push(q),
            BankLine::Confidence(d) => bank.decisions.push(d),
        }
    }
    bank.validate()?;
    Ok(bank)
}

#[cfg(test)]
pub(crate) fn test_question(id: &str, lo: &str, stem: &str, choices: &[&str], answer: usize) -> Question {
    Question {
        id: id.to_string(),
        origin_lo: lo.to_string(),
        stem: stem.to_string(),
        choices: choices.iter().map(|c| c.to_string()).collect(),
        answer_index: answer,
        explanation: "Because the first option matches the definition.".to_string(),
        stage: Stage::Generated,
        rejection_reasons: Vec::new(),
        generation_seed: 0,
    }
}
