//! Experimental protocol: clean baselines, white-box/transfer matrices with
//! leave-one-out ensemble rows, multi-seed aggregation and report rendering.
//!
//! A matrix row is an attack source (one detector, a leave-one-out ensemble,
//! or the full ensemble); columns are evaluated detectors. Each cell holds
//! (F1, AUROC) of the column detector on the attacked evaluation set.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{leave_one_out_ensembles, pgd_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::manifest::{Label, LoadedDataset, LoadedSample};
use crate::metrics::{self, EvalReport, ScoredSample};
use crate::model::Model;
use crate::rng::{derive_rng, tags};
use crate::tensor::Tensor;

/// What enters each cell's metric.
///
/// `MixedCleanRealAdvFake` (default) scores clean reals against adversarial
/// fakes, matching white-box table diagonals of the form F1 0.0 / AUROC 0.5:
/// evading fakes blend into the clean real score distribution. When both
/// classes are adversarial, a successful white-box attack inverts the ranking
/// outright and AUROC collapses toward 0 instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalComposition {
    MixedCleanRealAdvFake,
    AdversarialBoth,
}

impl Default for EvalComposition {
    fn default() -> Self {
        EvalComposition::MixedCleanRealAdvFake
    }
}

impl FromStr for EvalComposition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(EvalComposition::MixedCleanRealAdvFake),
            "adv-both" => Ok(EvalComposition::AdversarialBoth),
            other => Err(Error::InvalidArgument(format!(
                "unknown composition `{other}` (expected `mixed` or `adv-both`)"
            ))),
        }
    }
}

/// Attack source of one matrix row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SourceId {
    Single(String),
    LeaveOneOut(String),
    FullEnsemble,
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceId::Single(name) => write!(f, "{name}"),
            SourceId::LeaveOneOut(name) => write!(f, "N-{name}"),
            SourceId::FullEnsemble => write!(f, "N-all"),
        }
    }
}

impl From<SourceId> for String {
    fn from(s: SourceId) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SourceId {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "N-all" {
            Ok(SourceId::FullEnsemble)
        } else if let Some(name) = s.strip_prefix("N-") {
            Ok(SourceId::LeaveOneOut(name.to_string()))
        } else if s.is_empty() {
            Err("empty source id".into())
        } else {
            Ok(SourceId::Single(s))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub f1: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<SourceId>,
    pub targets: Vec<String>,
    /// cells[row][col] for sources[row] x targets[col].
    pub cells: Vec<Vec<MatrixCell>>,
    pub attack: AttackConfig,
    pub composition: EvalComposition,
    pub seed: u64,
    pub subsample: Option<usize>,
}

impl TransferMatrix {
    pub fn cell(&self, source: &SourceId, target: &str) -> Option<MatrixCell> {
        let row = self.sources.iter().position(|s| s == source)?;
        let col = self.targets.iter().position(|t| t == target)?;
        Some(self.cells[row][col])
    }
}

/// Evaluate every detector on the clean data.
pub fn run_clean_baseline(
    detectors: &[&dyn Model],
    data: &LoadedDataset,
) -> Result<Vec<(String, EvalReport)>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("run_clean_baseline"));
    }
    detectors
        .iter()
        .map(|detector| {
            let samples: Vec<ScoredSample> = data
                .samples
                .par_iter()
                .map(|s| {
                    let p = detector.probability(&s.image)?;
                    ScoredSample::new(s.id.clone(), s.label, p)
                })
                .collect::<Result<_>>()?;
            Ok((detector.id(), metrics::report(&samples)?))
        })
        .collect()
}

/// Seed-deterministic balanced subsample (n/2 reals + n/2 fakes), order-stable.
fn eval_indices(data: &LoadedDataset, seed: u64, subsample: Option<usize>) -> Result<Vec<usize>> {
    let Some(n) = subsample else {
        return Ok((0..data.len()).collect());
    };
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "subsample must be an even count >= 2, got {n}"
        )));
    }
    let mut reals: Vec<usize> = Vec::new();
    let mut fakes: Vec<usize> = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        match s.label {
            Label::Real => reals.push(i),
            Label::Generated => fakes.push(i),
        }
    }
    let half = n / 2;
    if reals.len() < half || fakes.len() < half {
        return Err(Error::InvalidArgument(format!(
            "subsample {n} exceeds class counts ({} real, {} generated)",
            reals.len(),
            fakes.len()
        )));
    }
    let mut rng = derive_rng(seed, tags::SUBSAMPLE, 0);
    partial_shuffle(&mut reals, half, &mut rng);
    partial_shuffle(&mut fakes, half, &mut rng);
    let mut keep: Vec<usize> = reals[..half].iter().chain(&fakes[..half]).copied().collect();
    keep.sort_unstable();
    Ok(keep)
}

fn partial_shuffle(indices: &mut [usize], take: usize, rng: &mut impl rand::Rng) {
    for i in 0..take.min(indices.len().saturating_sub(1)) {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
}

fn row_sources(detectors: &[&dyn Model]) -> (Vec<SourceId>, Vec<Vec<usize>>) {
    let names: Vec<String> = detectors.iter().map(|d| d.id()).collect();
    let mut sources = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, name) in names.iter().enumerate() {
        sources.push(SourceId::Single(name.clone()));
        members.push(vec![i]);
    }
    for group in leave_one_out_ensembles(detectors.len()).expect("checked M >= 2") {
        sources.push(SourceId::LeaveOneOut(names[group.held_out].clone()));
        members.push(group.members);
    }
    sources.push(SourceId::FullEnsemble);
    members.push((0..detectors.len()).collect());
    (sources, members)
}

/// Attack the evaluation set from every source and score every target.
///
/// `seed` controls the evaluation subsample when `subsample` is set; the
/// attack itself is deterministic given the config. Rows are M single sources,
/// M leave-one-out ensembles (keyed by the held-out detector), and the full
/// ensemble.
pub fn run_matrix(
    detectors: &[&dyn Model],
    cfg: &AttackConfig,
    data: &LoadedDataset,
    seed: u64,
    subsample: Option<usize>,
    composition: EvalComposition,
    parallelism: usize,
) -> Result<TransferMatrix> {
    cfg.validate()?;
    if detectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "matrix needs at least 2 detectors, got {}",
            detectors.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("run_matrix"));
    }
    if !data.has_both_classes() {
        return Err(Error::AurocUndefined);
    }

    let keep = eval_indices(data, seed, subsample)?;
    let eval_set: Vec<&LoadedSample> = keep.iter().map(|&i| &data.samples[i]).collect();
    let (sources, member_indices) = row_sources(detectors);
    let targets: Vec<String> = detectors.iter().map(|d| d.id()).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let mut cells = Vec::with_capacity(sources.len());
    for members in &member_indices {
        let ensemble: Vec<&dyn Model> = members.iter().map(|&i| detectors[i]).collect();
        let row = pool.install(|| attack_and_score_row(&ensemble, detectors, cfg, &eval_set, composition))?;
        cells.push(row);
    }

    Ok(TransferMatrix {
        sources,
        targets,
        cells,
        attack: *cfg,
        composition,
        seed,
        subsample,
    })
}

fn attack_and_score_row(
    ensemble: &[&dyn Model],
    targets: &[&dyn Model],
    cfg: &AttackConfig,
    eval_set: &[&LoadedSample],
    composition: EvalComposition,
) -> Result<Vec<MatrixCell>> {
    // Craft adversarial versions of the samples the composition scores
    // adversarially; the rest are evaluated clean.
    let images: Vec<Tensor> = eval_set
        .par_iter()
        .map(|sample| {
            let attacked = match composition {
                EvalComposition::AdversarialBoth => true,
                EvalComposition::MixedCleanRealAdvFake => sample.label == Label::Generated,
            };
            if attacked {
                Ok(pgd_attack(&sample.image, sample.label, ensemble, cfg)?.adversarial)
            } else {
                Ok(sample.image.clone())
            }
        })
        .collect::<Result<_>>()?;

    targets
        .iter()
        .map(|target| {
            let samples: Vec<ScoredSample> = eval_set
                .par_iter()
                .zip(&images)
                .map(|(sample, image)| {
                    let p = target.probability(image)?;
                    ScoredSample::new(sample.id.clone(), sample.label, p)
                })
                .collect::<Result<_>>()?;
            Ok(MatrixCell {
                f1: metrics::f1_score(&samples)?,
                auroc: metrics::auroc(&samples)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub f1_mean: f64,
    pub f1_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub sources: Vec<SourceId>,
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Vec<AggregateCell>>,
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    // Shifted mean: exact for identical inputs (mean == value, std == 0).
    let base = values[0];
    let n = values.len() as f64;
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v - mean;
            d * d
        })
        .sum::<f64>()
        / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-cell sample mean and sample standard deviation (n-1 denominator) over
/// matrices from different seeds. Structures must match exactly.
pub fn aggregate_seeds(matrices: &[TransferMatrix]) -> Result<SeedAggregate> {
    if matrices.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 matrices, got {}",
            matrices.len()
        )));
    }
    let first = &matrices[0];
    for m in &matrices[1..] {
        if m.sources != first.sources || m.targets != first.targets {
            return Err(Error::InvalidArgument(
                "matrices have mismatched sources/targets".into(),
            ));
        }
        if m.composition != first.composition || m.attack != first.attack {
            return Err(Error::InvalidArgument(
                "matrices have mismatched attack settings".into(),
            ));
        }
    }
    let cells = (0..first.sources.len())
        .map(|r| {
            (0..first.targets.len())
                .map(|c| {
                    let f1s: Vec<f64> = matrices.iter().map(|m| m.cells[r][c].f1).collect();
                    let aurocs: Vec<f64> = matrices.iter().map(|m| m.cells[r][c].auroc).collect();
                    let (f1_mean, f1_std) = mean_and_sample_std(&f1s);
                    let (auroc_mean, auroc_std) = mean_and_sample_std(&aurocs);
                    AggregateCell {
                        f1_mean,
                        f1_std,
                        auroc_mean,
                        auroc_std,
                    }
                })
                .collect()
        })
        .collect();
    Ok(SeedAggregate {
        sources: first.sources.clone(),
        targets: first.targets.clone(),
        seeds: matrices.iter().map(|m| m.seed).collect(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format `{other}` (expected `csv` or `markdown`)"
            ))),
        }
    }
}

/// Values are rounded to 2 decimals here and only here; storage keeps full
/// precision.
pub fn render_matrix(matrix: &TransferMatrix, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("source,target,f1,auroc\n");
            for (row, source) in matrix.sources.iter().enumerate() {
                for (col, target) in matrix.targets.iter().enumerate() {
                    let cell = matrix.cells[row][col];
                    out.push_str(&format!(
                        "{source},{target},{:.2},{:.2}\n",
                        cell.f1, cell.auroc
                    ));
                }
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| source \\ target |");
            for target in &matrix.targets {
                out.push_str(&format!(" {target} |"));
            }
            out.push('\n');
            out.push_str("|---|");
            out.push_str(&"---|".repeat(matrix.targets.len()));
            out.push('\n');
            for (row, source) in matrix.sources.iter().enumerate() {
                out.push_str(&format!("| {source} |"));
                for cell in &matrix.cells[row] {
                    out.push_str(&format!(" {:.2}/{:.2} |", cell.f1, cell.auroc));
                }
                out.push('\n');
            }
            out
        }
    }
}

pub fn render_aggregate(aggregate: &SeedAggregate, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("source,target,f1_mean,f1_std,auroc_mean,auroc_std\n");
            for (row, source) in aggregate.sources.iter().enumerate() {
                for (col, target) in aggregate.targets.iter().enumerate() {
                    let c = aggregate.cells[row][col];
                    out.push_str(&format!(
                        "{source},{target},{:.2},{:.2},{:.2},{:.2}\n",
                        c.f1_mean, c.f1_std, c.auroc_mean, c.auroc_std
                    ));
                }
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = format!(
                "| source \\ target ({} seeds) |",
                aggregate.seeds.len()
            );
            for target in &aggregate.targets {
                out.push_str(&format!(" {target} |"));
            }
            out.push('\n');
            out.push_str("|---|");
            out.push_str(&"---|".repeat(aggregate.targets.len()));
            out.push('\n');
            for (row, source) in aggregate.sources.iter().enumerate() {
                out.push_str(&format!("| {source} |"));
                for c in &aggregate.cells[row] {
                    out.push_str(&format!(
                        " {:.2}±{:.2}/{:.2}±{:.2} |",
                        c.f1_mean, c.f1_std, c.auroc_mean, c.auroc_std
                    ));
                }
                out.push('\n');
            }
            out
        }
    }
}

pub fn render_baseline(rows: &[(String, EvalReport)], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("detector,f1,accuracy,auroc\n");
            for (name, report) in rows {
                out.push_str(&format!(
                    "{name},{:.2},{:.2},{:.2}\n",
                    report.f1, report.accuracy, report.auroc
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| detector | F1 | Accuracy | AUROC |\n|---|---|---|---|\n");
            for (name, report) in rows {
                out.push_str(&format!(
                    "| {name} | {:.2} | {:.2} | {:.2} |\n",
                    report.f1, report.accuracy, report.auroc
                ));
            }
            out
        }
    }
}
