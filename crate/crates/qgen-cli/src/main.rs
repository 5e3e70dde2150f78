//! `qgen` command-line front end: full pipeline runs, individual
//! stages, evaluation sets, judging, agreement metrics, and the
//! threshold-sweep ablation.
//!
//! Exit codes: 0 success, 1 usage error, 2 backend failure, 3 data
//! error.

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use qgen::agreement::{report, RatingTable, RatingTask};
use qgen::alignment::{AlignmentChecker, AlignmentError};
use qgen::bank::{load_objectives, read_bank, write_bank, BankError, Stage};
use qgen::confidence::ConfidenceValidator;
use qgen::filter::filter_bank;
use qgen::gateway::GatewayError;
use qgen::generator::GeneratorError;
use qgen::judge::{
    build_eval_set, read_records, write_records, EvalItem, JudgeError, SurrogateJudge,
};
use qgen::pipeline::{
    ablate, default_thresholds, merge_questions, run_pipeline, BackendConfig, PipelineConfig,
    PipelineError,
};
use qgen::seed::derive_seed;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "qgen", version, about = "Generate and validate multiple-choice questions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))
                    .map_err(usage)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        // Environment overrides for endpoint and credentials.
        if let BackendConfig::Http {
            endpoint,
            model,
            api_key,
        } = &mut config.backend
        {
            if let Ok(v) = std::env::var("QGEN_ENDPOINT") {
                *endpoint = v;
            }
            if let Ok(v) = std::env::var("QGEN_MODEL") {
                *model = v;
            }
            if let Ok(v) = std::env::var("QGEN_API_KEY") {
                *api_key = Some(v);
            }
        }
        if let Some(n) = config.concurrency {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .ok();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate candidate questions for every learning objective.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Learning objectives file (.tsv or .csv).
        #[arg(long)]
        objectives: PathBuf,
        /// Output bank file (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the syntactic filter to a bank of generated questions.
    Filter {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run answer-confidence validation on syntactically passed questions.
    Confide {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the confidence threshold from the config.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the learning-objective alignment check.
    Align {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the LO x question relevance matrix as CSV.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Run all four stages: generate, filter, confide, align.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        objectives: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a balanced control/treatment evaluation set from a bank.
    EvalSet {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_los: usize,
        #[arg(long, default_value_t = 8)]
        per_lo: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output items file (JSON array).
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge an evaluation set with a gateway-backed model.
    Judge {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        /// Evaluation items file produced by eval-set.
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value = "M1")]
        judge_id: String,
        /// Output judgment records (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Agreement metrics over one or more judgment record files.
    Metrics {
        /// Judgment record files (JSONL), one per judge or combined.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Which judgment to tabulate: answer or alignment.
        #[arg(long, default_value = "alignment")]
        task: String,
        /// Judge ids to treat as machines.
        #[arg(long, num_args = 0..)]
        machine: Vec<String>,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the pairwise kappa grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Threshold-sweep ablation over an existing bank.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Output report (CSV).
        #[arg(long)]
        out: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Marker for errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(UsageError(e))
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<GatewayError>().is_some() {
            return 2;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Config(_) => 1,
                PipelineError::Gateway(_) => 2,
                PipelineError::Generator(GeneratorError::Gateway(_)) => 2,
                PipelineError::Alignment(AlignmentError::Gateway(_)) => 2,
                _ => 3,
            };
        }
        if let Some(g) = cause.downcast_ref::<GeneratorError>() {
            return match g {
                GeneratorError::Gateway(_) => 2,
                _ => 3,
            };
        }
        if let Some(a) = cause.downcast_ref::<AlignmentError>() {
            return match a {
                AlignmentError::Gateway(_) => 2,
                AlignmentError::NeedTwoObjectives(_) => 3,
            };
        }
        if let Some(j) = cause.downcast_ref::<JudgeError>() {
            return match j {
                JudgeError::Gateway(_) => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<BankError>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    3
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn read_items(path: &Path) -> Result<Vec<EvalItem>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading items {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing items {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            objectives,
            out,
        } => {
            let config = config.load()?;
            let gateway = config.build_gateway()?;
            let templates = config.load_templates()?;
            let los = load_objectives(&objectives)?;
            if los.is_empty() {
                bail!(usage(anyhow::anyhow!("no learning objectives in {}", objectives.display())));
            }
            let generator = qgen::generator::Generator::new(
                &gateway,
                &templates,
                config.generator_config(),
            );
            let mut bank = qgen::bank::QuestionBank {
                objectives: los,
                pipeline_config_digest: config.digest(),
                ..Default::default()
            };
            for lo in &bank.objectives {
                let seed = derive_seed(config.seed, &format!("generate:{}", lo.id));
                let mut qs = generator.generate_for_lo(lo, config.per_lo_target, seed)?;
                bank.questions.append(&mut qs);
            }
            bank.questions.sort_by(|a, b| a.id.cmp(&b.id));
            write_bank(&bank, &out)?;
            println!("generated {} questions into {}", bank.questions.len(), out.display());
        }
        Command::Filter { bank, out } => {
            let mut b = read_bank(&bank)?;
            let total = b.questions.len();
            let outcome = filter_bank(std::mem::take(&mut b.questions));
            let kept = outcome.retained.len();
            b.questions = outcome.retained;
            b.questions.extend(outcome.rejected);
            b.questions.sort_by(|a, b| a.id.cmp(&b.id));
            write_bank(&b, &out)?;
            println!("syntactic filter kept {kept} of {total}");
        }
        Command::Confide {
            config,
            bank,
            out,
            threshold,
        } => {
            let config = config.load()?;
            let gateway = config.build_gateway()?;
            let templates = config.load_templates()?;
            let threshold = threshold.unwrap_or(config.confidence_threshold);
            if !(threshold > 0.0 && threshold < 1.0) {
                bail!(usage(anyhow::anyhow!("threshold must lie strictly between 0 and 1")));
            }
            let mut b = read_bank(&bank)?;
            let pending: Vec<_> = b.questions_at(Stage::SyntacticPass).cloned().collect();
            let total = pending.len();
            let validator = ConfidenceValidator::new(&gateway, &templates);
            let outcome =
                validator.validate_bank(pending, threshold, derive_seed(config.seed, "confidence"))?;
            let kept = outcome.retained.len();
            merge_questions(
                &mut b.questions,
                outcome.retained.iter().chain(&outcome.rejected),
            );
            b.decisions = outcome.decisions;
            b.decisions.sort_by(|a, b| a.question_id.cmp(&b.question_id));
            write_bank(&b, &out)?;
            println!("confidence validation kept {kept} of {total} at threshold {threshold}");
        }
        Command::Align {
            config,
            bank,
            out,
            matrix,
        } => {
            let config = config.load()?;
            let gateway = config.build_gateway()?;
            let templates = config.load_templates()?;
            let mut b = read_bank(&bank)?;
            let pending: Vec<_> = b.questions_at(Stage::ConfidencePass).cloned().collect();
            let total = pending.len();
            let checker = AlignmentChecker::new(&gateway, &templates);
            let outcome = checker.align_filter(pending, &b.objectives)?;
            let kept = outcome.retained.len();
            merge_questions(
                &mut b.questions,
                outcome.retained.iter().chain(&outcome.rejected),
            );
            write_bank(&b, &out)?;
            if let Some(path) = matrix {
                outcome
                    .matrix
                    .write_csv(&path)
                    .with_context(|| format!("writing matrix {}", path.display()))?;
            }
            println!("alignment check kept {kept} of {total}");
        }
        Command::Run {
            config,
            objectives,
            out,
        } => {
            let config = config.load()?;
            let gateway = config.build_gateway()?;
            let templates = config.load_templates()?;
            let los = load_objectives(&objectives)?;
            let summary = run_pipeline(&gateway, &templates, &config, los, &out)?;
            println!("{summary}");
        }
        Command::EvalSet {
            bank,
            n_los,
            per_lo,
            seed,
            out,
        } => {
            let b = read_bank(&bank)?;
            let items = build_eval_set(&b, n_los, per_lo, seed)?;
            let json = serde_json::to_string_pretty(&items)?;
            std::fs::write(&out, json)
                .with_context(|| format!("writing items {}", out.display()))?;
            println!("wrote {} evaluation items to {}", items.len(), out.display());
        }
        Command::Judge {
            config,
            bank,
            items,
            judge_id,
            out,
        } => {
            let config = config.load()?;
            let gateway = config.build_gateway()?;
            let templates = config.load_templates()?;
            let b = read_bank(&bank)?;
            let items = read_items(&items)?;
            let judge = SurrogateJudge::new(&gateway, &templates, judge_id);
            let records = judge.judge_set(&b, &items)?;
            write_records(&records, &out)?;
            println!("wrote {} judgment records to {}", records.len(), out.display());
        }
        Command::Metrics {
            records,
            task,
            machine,
            json,
            csv,
        } => {
            let task = match task.as_str() {
                "answer" => RatingTask::Answer,
                "alignment" => RatingTask::Alignment,
                other => bail!(usage(anyhow::anyhow!("unknown task {other:?} (expected answer or alignment)"))),
            };
            let mut all = Vec::new();
            for path in &records {
                all.extend(read_records(path)?);
            }
            let table = RatingTable::from_records(&all, task)?;
            let r = report(&table, &machine)?;
            println!(
                "{} judges x {} items; mean pairwise kappa {:.3} (SE {:.3}), Fleiss {:.3}",
                table.judges.len(),
                table.items.len(),
                r.mean_pairwise,
                r.standard_error,
                r.fleiss
            );
            for m in &r.machine_accuracy {
                println!(
                    "machine {}: {}/{} with human majority ({:.1}%)",
                    m.judge_id,
                    m.agreements,
                    m.decided_items,
                    100.0 * m.accuracy
                );
            }
            if let Some(path) = json {
                r.write_json(&path)
                    .with_context(|| format!("writing report {}", path.display()))?;
            }
            if let Some(path) = csv {
                r.write_pairwise_csv(&path)
                    .with_context(|| format!("writing grid {}", path.display()))?;
            }
        }
        Command::Ablate {
            config,
            bank,
            repeats,
            out,
            json,
        } => {
            let config = config.load()?;
            let gateway = config.build_gateway()?;
            let templates = config.load_templates()?;
            let b = read_bank(&bank)?;
            let thresholds = default_thresholds();
            let report = ablate(&gateway, &templates, &config, &b, &thresholds, repeats, None)?;
            report
                .write_csv(&out)
                .with_context(|| format!("writing report {}", out.display()))?;
            if let Some(path) = json {
                report
                    .write_json(&path)
                    .with_context(|| format!("writing report {}", path.display()))?;
            }
            println!(
                "ablation complete: {} cells over {} thresholds x {} runs",
                report.cells.len(),
                report.thresholds.len(),
                report.repeats
            );
        }
    }
    Ok(())
}
