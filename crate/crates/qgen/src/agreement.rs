//! Inter-rater reliability analysis: Cohen's kappa, Fleiss' kappa,
//! pairwise kappa grids with group means and standard errors, majority
//! vote, confusion matrices, and accuracy against the majority judge.

use crate::judge::{JudgmentRecord, Verdict};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("rating vectors have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("rating {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("empty rating vectors")]
    Empty,
    #[error("item {item} has {got} ratings, expected {expected} per item")]
    RaggedCounts { item: usize, got: usize, expected: usize },
    #[error("incomplete grid: judge {judge} rated {got} of {expected} items")]
    IncompleteGrid { judge: String, got: usize, expected: usize },
    #[error("fewer than 2 raters per item")]
    TooFewRaters,
}

/// Chance-corrected agreement between two raters: (p_o - p_e)/(1 - p_e),
/// with p_e from the two raters' marginal label frequencies. Perfect
/// agreement returns exactly 1, including the degenerate p_e = 1 case.
pub fn cohen_kappa<S: AsRef<str>>(a: &[S], b: &[S], labels: &[S]) -> Result<f64, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(AgreementError::Empty);
    }
    let index = |s: &S| -> Result<usize, AgreementError> {
        labels
            .iter()
            .position(|l| l.as_ref() == s.as_ref())
            .ok_or_else(|| AgreementError::UnknownLabel(s.as_ref().to_string()))
    };
    let n = a.len() as f64;
    let k = labels.len();
    let mut marg_a = vec![0.0; k];
    let mut marg_b = vec![0.0; k];
    let mut agree = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let ia = index(ra)?;
        let ib = index(rb)?;
        marg_a[ia] += 1.0;
        marg_b[ib] += 1.0;
        if ia == ib {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = (0..k).map(|i| (marg_a[i] / n) * (marg_b[i] / n)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        // Constant raters: no chance correction is possible.
        log::warn!("degenerate Cohen's kappa (p_e = 1); returning {}", if p_o >= 1.0 { 1.0 } else { 0.0 });
        return Ok(if p_o >= 1.0 { 1.0 } else { 0.0 });
    }
    if p_o >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa from an item x label count grid with `raters_per_item`
/// ratings per item.
pub fn fleiss_kappa(counts: &[Vec<usize>], raters_per_item: usize) -> Result<f64, AgreementError> {
    if counts.is_empty() {
        return Err(AgreementError::Empty);
    }
    if raters_per_item < 2 {
        return Err(AgreementError::TooFewRaters);
    }
    let k = counts[0].len();
    let n_items = counts.len() as f64;
    let n = raters_per_item as f64;
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if row.len() != k || total != raters_per_item {
            return Err(AgreementError::RaggedCounts {
                item: i,
                got: total,
                expected: raters_per_item,
            });
        }
    }
    // Per-item agreement and category proportions.
    let p_bar: f64 = counts
        .iter()
        .map(|row| {
            let s: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (s - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / n_items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let col: f64 = counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n_items * n);
            col * col
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        log::warn!("degenerate Fleiss' kappa (p_e = 1)");
        return Ok(if p_bar >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Complete judge x item rating grid over a fixed label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    pub items: Vec<String>,
    pub judges: Vec<String>,
    pub labels: Vec<String>,
    /// ratings[judge][item] -> label.
    pub ratings: Vec<Vec<String>>,
}

/// Which judgment field to tabulate from imported records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingTask {
    Answer,
    Alignment,
}

impl RatingTable {
    /// Build a complete grid from judgment records. Every judge must have
    /// rated every item; incomplete grids are rejected.
    pub fn from_records(records: &[JudgmentRecord], task: RatingTask) -> Result<Self, AgreementError> {
        let mut items: Vec<String> = Vec::new();
        let mut judges: Vec<String> = Vec::new();
        for r in records {
            if !items.contains(&r.question_id) {
                items.push(r.question_id.clone());
            }
            if !judges.contains(&r.judge_id) {
                judges.push(r.judge_id.clone());
            }
        }
        let mut labels: BTreeSet<String> = BTreeSet::new();
        let mut ratings = vec![vec![String::new(); items.len()]; judges.len()];
        for r in records {
            let j = judges.iter().position(|id| *id == r.judge_id).unwrap();
            let i = items.iter().position(|id| *id == r.question_id).unwrap();
            let label = match task {
                RatingTask::Answer => r.answer_label.clone(),
                RatingTask::Alignment => match r.alignment_verdict {
                    Verdict::Yes => "yes".to_string(),
                    Verdict::No => "no".to_string(),
                },
            };
            labels.insert(label.clone());
            ratings[j][i] = label;
        }
        for (j, row) in ratings.iter().enumerate() {
            let got = row.iter().filter(|l| !l.is_empty()).count();
            if got != items.len() {
                return Err(AgreementError::IncompleteGrid {
                    judge: judges[j].clone(),
                    got,
                    expected: items.len(),
                });
            }
        }
        Ok(RatingTable {
            items,
            judges,
            labels: labels.into_iter().collect(),
            ratings,
        })
    }

    pub fn judge_row(&self, judge_id: &str) -> Option<&[String]> {
        let idx = self.judges.iter().position(|j| j == judge_id)?;
        Some(&self.ratings[idx])
    }

    /// Item x label count grid for a subset of judges (all when empty).
    pub fn counts_for(&self, judge_subset: &[String]) -> Vec<Vec<usize>> {
        let rows: Vec<&Vec<String>> = self
            .ratings
            .iter()
            .zip(&self.judges)
            .filter(|(_, j)| judge_subset.is_empty() || judge_subset.contains(j))
            .map(|(r, _)| r)
            .collect();
        (0..self.items.len())
            .map(|i| {
                self.labels
                    .iter()
                    .map(|l| rows.iter().filter(|r| r[i] == *l).count())
                    .collect()
            })
            .collect()
    }
}

/// Strict-plurality label per item; `None` marks a tie, never a silent
/// choice.
pub fn majority(table: &RatingTable) -> Vec<Option<String>> {
    majority_of(table, &table.judges)
}

/// Majority restricted to a judge subset.
pub fn majority_of(table: &RatingTable, judges: &[String]) -> Vec<Option<String>> {
    let rows: Vec<&Vec<String>> = table
        .ratings
        .iter()
        .zip(&table.judges)
        .filter(|(_, j)| judges.contains(j))
        .map(|(r, _)| r)
        .collect();
    (0..table.items.len())
        .map(|i| {
            let counts: Vec<usize> = table
                .labels
                .iter()
                .map(|l| rows.iter().filter(|r| r[i] == *l).count())
                .collect();
            let best = *counts.iter().max().unwrap_or(&0);
            let winners: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == best).collect();
            if best == 0 || winners.len() > 1 {
                None
            } else {
                Some(table.labels[winners[0]].clone())
            }
        })
        .collect()
}

/// Label x label count grid; cell (i, j) counts items where `a` gave
/// labels[i] and `b` gave labels[j].
pub fn confusion<S: AsRef<str>>(
    a: &[S],
    b: &[S],
    labels: &[S],
) -> Result<Vec<Vec<usize>>, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let index = |s: &S| -> Result<usize, AgreementError> {
        labels
            .iter()
            .position(|l| l.as_ref() == s.as_ref())
            .ok_or_else(|| AgreementError::UnknownLabel(s.as_ref().to_string()))
    };
    let mut grid = vec![vec![0usize; labels.len()]; labels.len()];
    for (ra, rb) in a.iter().zip(b) {
        grid[index(ra)?][index(rb)?] += 1;
    }
    Ok(grid)
}

/// Mean and standard error of a group of pairwise kappas. The standard
/// error is the sample standard deviation of the pairwise values divided
/// by the square root of the number of pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub standard_error: f64,
    pub pairs: usize,
}

fn group_stats(values: &[f64]) -> Option<GroupStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let standard_error = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt() / n.sqrt()
    };
    Some(GroupStats {
        mean,
        standard_error,
        pairs: values.len(),
    })
}

/// Per-machine accuracy against the human-majority ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineAccuracy {
    pub judge_id: String,
    pub agreements: usize,
    /// Items with a clear human majority.
    pub decided_items: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub judges: Vec<String>,
    /// Symmetric pairwise Cohen's kappa grid; the diagonal is undefined
    /// and excluded from all means.
    pub pairwise_kappa: Vec<Vec<Option<f64>>>,
    pub human_human: Option<GroupStats>,
    pub machine_human: Option<GroupStats>,
    pub machine_machine: Option<GroupStats>,
    pub mean_pairwise: f64,
    pub standard_error: f64,
    pub fleiss: f64,
    pub majority_labels: Vec<Option<String>>,
    pub machine_accuracy: Vec<MachineAccuracy>,
}

/// Compute all pairwise kappas, group statistics, Fleiss' kappa over the
/// full table, the human-majority vote, and per-machine accuracy against
/// it. Judges in `machine_judges` count as machines; everyone else is
/// human.
pub fn report(table: &RatingTable, machine_judges: &[String]) -> Result<AgreementReport, AgreementError> {
    let m = table.judges.len();
    let mut grid = vec![vec![None; m]; m];
    let mut all = Vec::new();
    let mut hh = Vec::new();
    let mut mh = Vec::new();
    let mut mm = Vec::new();
    #[allow(clippy::needless_range_loop)] // symmetric fill needs both indices
    for i in 0..m {
        for j in (i + 1)..m {
            let kappa = cohen_kappa(&table.ratings[i], &table.ratings[j], &table.labels)?;
            grid[i][j] = Some(kappa);
            grid[j][i] = Some(kappa);
            all.push(kappa);
            let mi = machine_judges.contains(&table.judges[i]);
            let mj = machine_judges.contains(&table.judges[j]);
            match (mi, mj) {
                (false, false) => hh.push(kappa),
                (true, true) => mm.push(kappa),
                _ => mh.push(kappa),
            }
        }
    }
    let overall = group_stats(&all).ok_or(AgreementError::Empty)?;

    let humans: Vec<String> = table
        .judges
        .iter()
        .filter(|j| !machine_judges.contains(j))
        .cloned()
        .collect();
    let majority_labels = if humans.is_empty() {
        majority(table)
    } else {
        majority_of(table, &humans)
    };

    let machine_accuracy = machine_judges
        .iter()
        .filter_map(|id| {
            let row = table.judge_row(id)?;
            let mut agreements = 0;
            let mut decided = 0;
            for (rating, maj) in row.iter().zip(&majority_labels) {
                if let Some(label) = maj {
                    decided += 1;
                    if rating == label {
                        agreements += 1;
                    }
                }
            }
            Some(MachineAccuracy {
                judge_id: id.clone(),
                agreements,
                decided_items: decided,
                accuracy: if decided == 0 { 0.0 } else { agreements as f64 / decided as f64 },
            })
        })
        .collect();

    let counts = table.counts_for(&[]);
    let fleiss = fleiss_kappa(&counts, table.judges.len())?;

    Ok(AgreementReport {
        judges: table.judges.clone(),
        pairwise_kappa: grid,
        human_human: group_stats(&hh),
        machine_human: group_stats(&mh),
        machine_machine: group_stats(&mm),
        mean_pairwise: overall.mean,
        standard_error: overall.standard_error,
        fleiss,
        majority_labels,
        machine_accuracy,
    })
}

impl AgreementReport {
    /// Heatmap-ready pairwise grid: one row per judge, empty diagonal.
    pub fn write_pairwise_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "judge,{}", self.judges.join(","))?;
        for (j, row) in self.judges.iter().zip(&self.pairwise_kappa) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default())
                .collect();
            writeln!(w, "{j},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes infallibly");
        std::fs::write(path, json)
    }
}
