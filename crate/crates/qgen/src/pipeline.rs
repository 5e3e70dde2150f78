//! Pipeline orchestration: full generate-then-validate runs, stage
//! summaries, and the threshold-sweep ablation harness.
//!
//! Stages run sequentially (generate, syntactic filter, confidence
//! validation, alignment check); parallelism lives inside each stage.
//! The bank file is rewritten after every completed stage, so an aborted
//! run leaves a bank valid up to the last stage that finished.

use crate::alignment::{AlignmentChecker, AlignmentError};
use crate::bank::{
    write_bank, BankError, LearningObjective, Question, QuestionBank, Stage,
};
use crate::confidence::ConfidenceValidator;
use crate::filter::filter_bank;
use crate::gateway::tokenize::fnv1a64;
use crate::gateway::{Gateway, GatewayError, HttpBackend, MockBackend, MockScenario};
use crate::generator::{Generator, GeneratorConfig, GeneratorError};
use crate::judge::SurrogateJudge;
use crate::seed::{derive_indexed, derive_seed};
use crate::templates::TemplateSet;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    /// Deterministic offline backend, optionally driven by a scenario
    /// file of scripted completions and label scores.
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        uniform_vocab: Option<usize>,
    },
    /// Completions-style HTTP endpoint with token logprobs and echo.
    Http {
        endpoint: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock {
            scenario_file: None,
            uniform_vocab: None,
        }
    }
}

fn default_per_lo_target() -> usize {
    200
}
fn default_choices_k() -> usize {
    4
}
fn default_batch_size() -> usize {
    20
}
fn default_confidence_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub backend: BackendConfig,
    /// Candidate questions generated per learning objective.
    #[serde(default = "default_per_lo_target")]
    pub per_lo_target: usize,
    #[serde(default = "default_choices_k")]
    pub choices_k: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_confidence_threshold")]
    pub confidence_threshold: f64,
    /// Master seed; every stage derives its own sub-seed from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concurrency: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendConfig::default(),
            per_lo_target: default_per_lo_target(),
            choices_k: default_choices_k(),
            batch_size: default_batch_size(),
            confidence_threshold: default_confidence_threshold(),
            seed: 0,
            template_dir: None,
            concurrency: None,
        }
    }
}

impl PipelineConfig {
    /// Stable hex digest of the full configuration, stored in bank
    /// headers so a bank can be traced back to the config that built it.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes infallibly");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            choices_k: self.choices_k,
            batch_size: self.batch_size,
            ..GeneratorConfig::default()
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, PipelineError> {
        match &self.backend {
            BackendConfig::Mock {
                scenario_file,
                uniform_vocab,
            } => {
                let mut scenario = match scenario_file {
                    Some(path) => MockScenario::from_file(path)?,
                    None => MockScenario::default(),
                };
                if let Some(v) = uniform_vocab {
                    scenario = scenario.uniform_vocab(*v);
                }
                Ok(Gateway::new(Arc::new(MockBackend::new(scenario))))
            }
            BackendConfig::Http {
                endpoint,
                model,
                api_key,
            } => {
                let mut backend = HttpBackend::new(endpoint, model);
                if let Some(key) = api_key {
                    backend = backend.with_api_key(key);
                }
                Ok(Gateway::new(Arc::new(backend)))
            }
        }
    }

    pub fn load_templates(&self) -> Result<TemplateSet, PipelineError> {
        match &self.template_dir {
            Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| PipelineError::Config(format!(
                "template overrides in {}: {e}",
                dir.display()
            ))),
            None => Ok(TemplateSet::default()),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub count: usize,
    /// Percentage relative to the generated pool.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stages: Vec<StageCount>,
    /// Mean surviving questions per learning objective after the final
    /// stage.
    pub per_lo_mean: f64,
    /// Sample standard deviation of survivors per LO.
    pub per_lo_sd: f64,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            writeln!(f, "{:<16} {:>8}  ({:.1}%)", s.stage, s.count, s.percent)?;
        }
        write!(
            f,
            "survivors per objective: mean {:.2} (SD = {:.2})",
            self.per_lo_mean, self.per_lo_sd
        )
    }
}

/// Stable bank ordering: questions sorted by id so repeated runs write
/// byte-identical files regardless of parallel completion order.
fn sort_questions(questions: &mut [Question]) {
    questions.sort_by(|a, b| a.id.cmp(&b.id));
}

fn per_lo_stats(objectives: &[LearningObjective], questions: &[Question]) -> (f64, f64) {
    let survivors: Vec<f64> = objectives
        .iter()
        .map(|lo| {
            questions
                .iter()
                .filter(|q| q.stage == Stage::AlignmentPass && q.origin_lo == lo.id)
                .count() as f64
        })
        .collect();
    if survivors.is_empty() {
        return (0.0, 0.0);
    }
    let n = survivors.len() as f64;
    let mean = survivors.iter().sum::<f64>() / n;
    let sd = if survivors.len() < 2 {
        0.0
    } else {
        (survivors.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

/// Run all four pipeline stages over the given objectives, rewriting
/// `out_bank` after each completed stage. Returns per-stage retention
/// counts and the per-LO survivor statistics.
pub fn run_pipeline(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &PipelineConfig,
    objectives: Vec<LearningObjective>,
    out_bank: &Path,
) -> Result<RunSummary, PipelineError> {
    if objectives.is_empty() {
        return Err(PipelineError::Config("no learning objectives loaded".into()));
    }
    let digest = config.digest();
    let mut bank = QuestionBank {
        objectives,
        pipeline_config_digest: digest,
        ..Default::default()
    };

    // Stage 1: expansive generation.
    let generator = Generator::new(gateway, templates, config.generator_config());
    for lo in &bank.objectives {
        let seed = derive_seed(config.seed, &format!("generate:{}", lo.id));
        let mut generated = generator.generate_for_lo(lo, config.per_lo_target, seed)?;
        bank.questions.append(&mut generated);
    }
    sort_questions(&mut bank.questions);
    let generated_count = bank.questions.len();
    write_bank(&bank, out_bank)?;
    log::info!("generated {generated_count} candidate questions");

    // Stage 2: syntactic filter.
    let outcome = filter_bank(std::mem::take(&mut bank.questions));
    let syntactic_count = outcome.retained.len();
    bank.questions = outcome.retained;
    let survivors: Vec<Question> = bank.questions.clone();
    bank.questions.extend(outcome.rejected);
    sort_questions(&mut bank.questions);
    write_bank(&bank, out_bank)?;

    // Stage 3: answer-confidence validation.
    let validator = ConfidenceValidator::new(gateway, templates);
    let conf_seed = derive_seed(config.seed, "confidence");
    let conf = validator.validate_bank(survivors, config.confidence_threshold, conf_seed)?;
    let confidence_count = conf.retained.len();
    merge_questions(&mut bank.questions, conf.retained.iter().chain(&conf.rejected));
    bank.decisions = conf.decisions;
    bank.decisions.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    write_bank(&bank, out_bank)?;

    // Stage 4: learning-objective alignment check.
    let checker = AlignmentChecker::new(gateway, templates);
    let aligned = checker.align_filter(conf.retained, &bank.objectives)?;
    let alignment_count = aligned.retained.len();
    merge_questions(
        &mut bank.questions,
        aligned.retained.iter().chain(&aligned.rejected),
    );
    write_bank(&bank, out_bank)?;

    let percent = |c: usize| {
        if generated_count == 0 {
            0.0
        } else {
            100.0 * c as f64 / generated_count as f64
        }
    };
    let (per_lo_mean, per_lo_sd) = per_lo_stats(&bank.objectives, &bank.questions);
    Ok(RunSummary {
        stages: vec![
            StageCount {
                stage: "generated".into(),
                count: generated_count,
                percent: 100.0,
            },
            StageCount {
                stage: "syntactic-pass".into(),
                count: syntactic_count,
                percent: percent(syntactic_count),
            },
            StageCount {
                stage: "confidence-pass".into(),
                count: confidence_count,
                percent: percent(confidence_count),
            },
            StageCount {
                stage: "alignment-pass".into(),
                count: alignment_count,
                percent: percent(alignment_count),
            },
        ],
        per_lo_mean,
        per_lo_sd,
    })
}

/// Replace questions in `all` by id with their updated copies.
pub fn merge_questions<'a>(all: &mut [Question], updated: impl Iterator<Item = &'a Question>) {
    let index: HashMap<&str, usize> = all
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();
    let updates: Vec<(usize, Question)> = updated
        .map(|q| (index[q.id.as_str()], q.clone()))
        .collect();
    for (i, q) in updates {
        all[i] = q;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVersion {
    /// Syntactic filtering only.
    A,
    /// Syntactic filtering plus answer-confidence validation.
    B,
    /// All three validation steps.
    C,
}

impl fmt::Display for AblationVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationVersion::A => "A",
            AblationVersion::B => "B",
            AblationVersion::C => "C",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub version: AblationVersion,
    /// Confidence threshold; absent for Version A, which does not apply
    /// one.
    pub threshold: Option<f64>,
    pub run_index: usize,
    pub retained: usize,
    /// Fraction of retained questions the configured judge marks as
    /// aligned with their origin objective; absent without a judge.
    pub judge_agreement: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub thresholds: Vec<f64>,
    pub repeats: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, version: AblationVersion, threshold: Option<f64>, run: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| {
            c.version == version
                && c.run_index == run
                && match (c.threshold, threshold) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    (None, None) => true,
                    _ => false,
                }
        })
    }

    /// Mean retained count over runs for one (version, threshold) column.
    pub fn mean_retained(&self, version: AblationVersion, threshold: Option<f64>) -> f64 {
        let counts: Vec<usize> = (0..self.repeats)
            .filter_map(|r| self.cell(version, threshold, r).map(|c| c.retained))
            .collect();
        if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        }
    }

    /// Checks the structural invariants: C(t) <= B(t) <= A within every
    /// run, and B and C non-increasing in threshold.
    pub fn check_invariants(&self) -> Result<(), String> {
        for r in 0..self.repeats {
            let a = self
                .cell(AblationVersion::A, None, r)
                .ok_or_else(|| format!("missing A cell for run {r}"))?
                .retained;
            let mut prev_b = usize::MAX;
            let mut prev_c = usize::MAX;
            for &t in &self.thresholds {
                let b = self
                    .cell(AblationVersion::B, Some(t), r)
                    .ok_or_else(|| format!("missing B cell at {t} run {r}"))?
                    .retained;
                let c = self
                    .cell(AblationVersion::C, Some(t), r)
                    .ok_or_else(|| format!("missing C cell at {t} run {r}"))?
                    .retained;
                if !(c <= b && b <= a) {
                    return Err(format!("run {r} threshold {t}: C={c} B={b} A={a} violates C <= B <= A"));
                }
                if b > prev_b || c > prev_c {
                    return Err(format!("run {r} threshold {t}: retention increased with threshold"));
                }
                prev_b = b;
                prev_c = c;
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "version,threshold,run_index,retained,judge_agreement")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.version,
                c.threshold.map(|t| format!("{t:.2}")).unwrap_or_default(),
                c.run_index,
                c.retained,
                c.judge_agreement.map(|j| format!("{j:.6}")).unwrap_or_default()
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, PipelineError> {
        let err = |message: String| PipelineError::Io {
            path: path.display().to_string(),
            message,
        };
        let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut cells = Vec::new();
        let mut thresholds: Vec<f64> = Vec::new();
        let mut runs: HashSet<usize> = HashSet::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(err(format!("line {}: expected 5 fields", i + 1)));
            }
            let version = match fields[0] {
                "A" => AblationVersion::A,
                "B" => AblationVersion::B,
                "C" => AblationVersion::C,
                other => return Err(err(format!("line {}: unknown version {other:?}", i + 1))),
            };
            let threshold = if fields[1].is_empty() {
                None
            } else {
                Some(fields[1].parse::<f64>().map_err(|e| err(e.to_string()))?)
            };
            let run_index = fields[2].parse::<usize>().map_err(|e| err(e.to_string()))?;
            let retained = fields[3].parse::<usize>().map_err(|e| err(e.to_string()))?;
            let judge_agreement = if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].parse::<f64>().map_err(|e| err(e.to_string()))?)
            };
            if let Some(t) = threshold {
                if !thresholds.iter().any(|&x| (x - t).abs() < 1e-12) {
                    thresholds.push(t);
                }
            }
            runs.insert(run_index);
            cells.push(AblationCell {
                version,
                threshold,
                run_index,
                retained,
                judge_agreement,
            });
        }
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(AblationReport {
            thresholds,
            repeats: runs.len(),
            cells,
        })
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes infallibly");
        std::fs::write(path, json)
    }
}

/// The 16 thresholds of the standard sweep: 0.20 to 0.95 in steps of
/// 0.05.
pub fn default_thresholds() -> Vec<f64> {
    (4..=19).map(|i| i as f64 / 20.0).collect()
}

/// Threshold-sweep ablation over an existing bank of generated
/// questions. For every repeat and threshold, the confidence and
/// alignment stages re-run from the syntactically filtered pool with a
/// per-repeat derived seed; Version A is the filtered pool itself.
pub fn ablate(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &PipelineConfig,
    bank: &QuestionBank,
    thresholds: &[f64],
    repeats: usize,
    judge: Option<&SurrogateJudge>,
) -> Result<AblationReport, PipelineError> {
    if repeats == 0 {
        return Err(PipelineError::Config("repeats must be at least 1".into()));
    }
    if thresholds.is_empty() {
        return Err(PipelineError::Config("empty threshold list".into()));
    }

    // Rebuild the candidate pool: every question restarts at `generated`
    // with its provenance cleared.
    let pool: Vec<Question> = bank
        .questions
        .iter()
        .map(|q| {
            let mut q = q.clone();
            q.stage = Stage::Generated;
            q.rejection_reasons.clear();
            q
        })
        .collect();
    let filtered = filter_bank(pool);
    let version_a: Vec<Question> = filtered.retained;

    // A judge's alignment verdict depends only on the question and its
    // origin objective, so judge each question once and reuse the verdict
    // across all cells.
    let judged_aligned: Option<HashSet<String>> = match judge {
        Some(j) => {
            let mut aligned = HashSet::new();
            for q in &version_a {
                let lo = bank
                    .objective(&q.origin_lo)
                    .ok_or_else(|| PipelineError::Config(format!("unknown objective {}", q.origin_lo)))?;
                let turn1 = j.judge_answer(q)?;
                let (verdict, _) = j.judge_alignment(&turn1, &lo.text)?;
                if verdict == crate::judge::Verdict::Yes {
                    aligned.insert(q.id.clone());
                }
            }
            Some(aligned)
        }
        None => None,
    };
    let agreement = |questions: &[Question]| -> Option<f64> {
        judged_aligned.as_ref().map(|set| {
            if questions.is_empty() {
                0.0
            } else {
                questions.iter().filter(|q| set.contains(&q.id)).count() as f64
                    / questions.len() as f64
            }
        })
    };

    let validator = ConfidenceValidator::new(gateway, templates);
    let checker = AlignmentChecker::new(gateway, templates);
    let mut cells = Vec::new();
    for run in 0..repeats {
        let run_seed = derive_indexed(config.seed, "ablate", run as u64);
        cells.push(AblationCell {
            version: AblationVersion::A,
            threshold: None,
            run_index: run,
            retained: version_a.len(),
            judge_agreement: agreement(&version_a),
        });
        for &t in thresholds {
            let b = validator.validate_bank(version_a.clone(), t, run_seed)?;
            cells.push(AblationCell {
                version: AblationVersion::B,
                threshold: Some(t),
                run_index: run,
                retained: b.retained.len(),
                judge_agreement: agreement(&b.retained),
            });
            let c = if b.retained.is_empty() {
                Vec::new()
            } else {
                checker.align_filter(b.retained, &bank.objectives)?.retained
            };
            cells.push(AblationCell {
                version: AblationVersion::C,
                threshold: Some(t),
                run_index: run,
                retained: c.len(),
                judge_agreement: agreement(&c),
            });
        }
    }
    Ok(AblationReport {
        thresholds: thresholds.to_vec(),
        repeats,
        cells,
    })
}
