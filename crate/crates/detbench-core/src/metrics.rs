//! Classification metrics: F1 and accuracy at a fixed 0.5 threshold, and
//! rank-based AUROC with midrank tie handling, plus an O(n^2) pairwise AUROC
//! oracle kept independent of the rank path.
//!
//! The positive class is "generated"; a probability >= threshold predicts it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, ManifestRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub probability: f64,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, label: Label, probability: f64) -> Result<Self> {
        if !probability.is_finite() || !(0.0..=1.0).contains(&probability) {
            return Err(Error::InvalidArgument(format!(
                "probability must lie in [0,1], got {probability}"
            )));
        }
        Ok(Self {
            id: id.into(),
            label,
            probability,
        })
    }
}

/// Serialized with this exact key order; values are stored at full precision
/// and rounded only when rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub accuracy: f64,
    pub auroc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub const THRESHOLD: f64 = 0.5;

fn predicted_generated(probability: f64, threshold: f64) -> bool {
    probability >= threshold
}

struct Counts {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

fn counts(samples: &[ScoredSample], threshold: f64) -> Counts {
    let mut c = Counts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for s in samples {
        match (s.label, predicted_generated(s.probability, threshold)) {
            (Label::Generated, true) => c.tp += 1,
            (Label::Generated, false) => c.fn_ += 1,
            (Label::Real, true) => c.fp += 1,
            (Label::Real, false) => c.tn += 1,
        }
    }
    c
}

/// F1 = 2 * precision * TPR / (precision + TPR), with the zero-division
/// convention F1 = 0.
pub fn f1_score(samples: &[ScoredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("f1_score"));
    }
    let c = counts(samples, THRESHOLD);
    let precision = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let tpr = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    if precision + tpr == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * tpr / (precision + tpr))
}

pub fn accuracy_at_threshold(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("accuracy_at_threshold"));
    }
    let c = counts(samples, threshold);
    Ok((c.tp + c.tn) as f64 / samples.len() as f64)
}

/// Mann-Whitney AUROC via a sort and rank sums, with midranks for ties.
/// Equals the trapezoidal area under the ROC curve.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let n_pos = samples.iter().filter(|s| s.label == Label::Generated).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[a]
            .probability
            .partial_cmp(&samples[b].probability)
            .expect("finite probabilities")
    });

    // Rank sum of positives with midranks over tie groups; ranks are 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len()
            && samples[order[j]].probability == samples[order[i]].probability
        {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if samples[idx].label == Label::Generated {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// O(n_pos * n_neg) pairwise count of the same statistic; test oracle for
/// [`auroc`].
pub fn auroc_bruteforce(samples: &[ScoredSample]) -> Result<f64> {
    let pos: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == Label::Generated)
        .map(|s| s.probability)
        .collect();
    let neg: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == Label::Real)
        .map(|s| s.probability)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::AurocUndefined);
    }
    let mut score = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                score += 1.0;
            } else if p == n {
                score += 0.5;
            }
        }
    }
    Ok(score / (pos.len() * neg.len()) as f64)
}

/// Assemble the full report; requires both classes (AUROC is part of it).
pub fn report(samples: &[ScoredSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("report"));
    }
    let c = counts(samples, THRESHOLD);
    Ok(EvalReport {
        f1: f1_score(samples)?,
        accuracy: accuracy_at_threshold(samples, THRESHOLD)?,
        auroc: auroc(samples)?,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
        n_pos: c.tp + c.fn_,
        n_neg: c.fp + c.tn,
    })
}

/// Score every manifest record with `scorer` and assemble an [`EvalReport`].
///
/// Per-record scorer failures are tolerated up to 1% of the manifest; beyond
/// that the run fails. Scoring may run in parallel; assembly is order-stable.
pub fn evaluate(
    manifest: &DatasetManifest,
    scorer: impl Fn(&ManifestRecord) -> Result<f64> + Sync,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if manifest.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    if !manifest.has_both_classes() {
        return Err(Error::AurocUndefined);
    }
    let outcomes: Vec<(usize, std::result::Result<f64, String>)> = manifest
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, rec)| (i, scorer(rec).map_err(|e| e.to_string())))
        .collect();

    let total = outcomes.len();
    let mut samples = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (i, outcome) in outcomes {
        let rec = &manifest.records()[i];
        match outcome {
            Ok(p) => samples.push(ScoredSample::new(rec.id.clone(), rec.label, p)?),
            Err(e) => failures.push(format!("{}: {e}", rec.id)),
        }
    }
    if failures.len() * 100 > total {
        return Err(Error::TooManyRecordFailures {
            failed: failures.len(),
            total,
            limit_pct: 1,
            first: failures.into_iter().next().unwrap_or_default(),
        });
    }
    report(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: Label, p: f64) -> ScoredSample {
        ScoredSample::new(format!("s{}", rand_id()), label, p).unwrap()
    }

    fn rand_id() -> u64 {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(0);
        NEXT.fetch_add(1, Ordering::Relaxed)
    }

    #[test]
    fn f1_perfect_and_degenerate() {
        let all_correct = vec![
            sample(Label::Generated, 0.9),
            sample(Label::Generated, 0.8),
            sample(Label::Real, 0.1),
        ];
        assert_eq!(f1_score(&all_correct).unwrap(), 1.0);

        let no_tp = vec![sample(Label::Generated, 0.1), sample(Label::Real, 0.2)];
        assert_eq!(f1_score(&no_tp).unwrap(), 0.0);

        assert!(f1_score(&[]).is_err());
    }

    #[test]
    fn f1_matches_harmonic_mean_formula() {
        // Precision 0.5, TPR 1.0 -> 2 * 0.5 / 1.5 = 2/3.
        let samples = vec![
            sample(Label::Generated, 0.9),
            sample(Label::Generated, 0.8),
            sample(Label::Real, 0.9),
            sample(Label::Real, 0.8),
        ];
        assert!((f1_score(&samples).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_tie_goes_to_generated() {
        let samples = vec![sample(Label::Generated, 0.5), sample(Label::Generated, 0.5)];
        assert_eq!(accuracy_at_threshold(&samples, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_counts_correct_fraction() {
        let samples = vec![
            sample(Label::Generated, 0.9),
            sample(Label::Generated, 0.2),
            sample(Label::Real, 0.1),
            sample(Label::Real, 0.3),
        ];
        assert_eq!(accuracy_at_threshold(&samples, 0.5).unwrap(), 0.75);
    }

    #[test]
    fn auroc_known_values() {
        let separated = vec![
            sample(Label::Generated, 0.9),
            sample(Label::Generated, 0.7),
            sample(Label::Real, 0.3),
            sample(Label::Real, 0.1),
        ];
        assert_eq!(auroc(&separated).unwrap(), 1.0);

        let all_ties = vec![
            sample(Label::Generated, 0.4),
            sample(Label::Real, 0.4),
            sample(Label::Generated, 0.4),
            sample(Label::Real, 0.4),
        ];
        assert_eq!(auroc(&all_ties).unwrap(), 0.5);

        // pos {0.9, 0.4}, neg {0.5, 0.1}: 3 wins of 4 pairs.
        let mixed = vec![
            sample(Label::Generated, 0.9),
            sample(Label::Generated, 0.4),
            sample(Label::Real, 0.5),
            sample(Label::Real, 0.1),
        ];
        assert_eq!(auroc(&mixed).unwrap(), 0.75);
        assert_eq!(auroc_bruteforce(&mixed).unwrap(), 0.75);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        let only_pos = vec![sample(Label::Generated, 0.9)];
        assert!(matches!(auroc(&only_pos), Err(Error::AurocUndefined)));
        assert!(matches!(
            auroc_bruteforce(&only_pos),
            Err(Error::AurocUndefined)
        ));
    }

    #[test]
    fn auroc_bruteforce_endpoints() {
        let hi_lo = vec![sample(Label::Generated, 1.0), sample(Label::Real, 0.0)];
        assert_eq!(auroc_bruteforce(&hi_lo).unwrap(), 1.0);
        let tie = vec![sample(Label::Generated, 0.5), sample(Label::Real, 0.5)];
        assert_eq!(auroc_bruteforce(&tie).unwrap(), 0.5);
    }

    #[test]
    fn report_counts_are_consistent() {
        let samples = vec![
            sample(Label::Generated, 0.9),
            sample(Label::Generated, 0.2),
            sample(Label::Real, 0.1),
            sample(Label::Real, 0.7),
        ];
        let r = report(&samples).unwrap();
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, r.n_pos + r.n_neg);
        assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / 4.0);
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (1, 1, 1, 1));
    }

    #[test]
    fn report_serializes_with_fixed_key_order() {
        let samples = vec![sample(Label::Generated, 0.9), sample(Label::Real, 0.1)];
        let r = report(&samples).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let order = ["f1", "accuracy", "auroc", "tp", "fp", "tn", "fn", "n_pos", "n_neg"];
        let positions: Vec<usize> = order
            .iter()
            .map(|k| json.find(&format!("\"{k}\":")).expect(k))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn scored_set() -> impl Strategy<Value = Vec<ScoredSample>> {
            // Quantized probabilities force ties; always at least one of each class.
            let entry = (any::<bool>(), 0u8..=20).prop_map(|(gen, q)| {
                let label = if gen { Label::Generated } else { Label::Real };
                ScoredSample::new(format!("p{q}_{gen}_{}", rand_id()), label, f64::from(q) / 20.0)
                    .unwrap()
            });
            proptest::collection::vec(entry, 2..120).prop_map(|mut v| {
                v[0].label = Label::Generated;
                v[1].label = Label::Real;
                v
            })
        }

        proptest! {
            #[test]
            fn rank_auroc_equals_bruteforce(samples in scored_set()) {
                let fast = auroc(&samples).unwrap();
                let slow = auroc_bruteforce(&samples).unwrap();
                prop_assert!((fast - slow).abs() < 1e-12);
            }

            #[test]
            fn auroc_invariant_under_monotone_transform(samples in scored_set()) {
                let cubed: Vec<ScoredSample> = samples
                    .iter()
                    .map(|s| ScoredSample::new(s.id.clone(), s.label, s.probability.powi(3)).unwrap())
                    .collect();
                prop_assert_eq!(auroc(&samples).unwrap(), auroc(&cubed).unwrap());
            }

            #[test]
            fn metrics_stay_in_unit_interval(samples in scored_set()) {
                let r = report(&samples).unwrap();
                for v in [r.f1, r.accuracy, r.auroc] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }

            #[test]
            fn relabel_swap_symmetry(samples in scored_set()) {
                // Flip labels and reflect probabilities. Exact-0.5 scores are
                // nudged first: the >= tie rule breaks the symmetry there by
                // construction.
                let samples: Vec<ScoredSample> = samples
                    .into_iter()
                    .map(|s| {
                        let p = if s.probability == 0.5 { 0.55 } else { s.probability };
                        ScoredSample::new(s.id, s.label, p).unwrap()
                    })
                    .collect();
                let swapped: Vec<ScoredSample> = samples
                    .iter()
                    .map(|s| {
                        ScoredSample::new(s.id.clone(), s.label.flip(), 1.0 - s.probability).unwrap()
                    })
                    .collect();
                prop_assert_eq!(
                    accuracy_at_threshold(&samples, 0.5).unwrap(),
                    accuracy_at_threshold(&swapped, 0.5).unwrap()
                );
                prop_assert!((auroc(&samples).unwrap() - auroc(&swapped).unwrap()).abs() < 1e-12);
            }
        }
    }
}
