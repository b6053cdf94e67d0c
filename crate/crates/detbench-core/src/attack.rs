//! Targeted L-infinity PGD against single detectors and detector ensembles.
//!
//! The attack minimizes the mean BCE of the ensemble's logits against the
//! attacker's target label, taking signed-gradient steps and projecting onto
//! the intersection of the epsilon ball and the [0,1] pixel box after every
//! iteration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::manifest::{Label, ManifestRecord};
use crate::model::Model;
use crate::rng::{derive_rng, mix64, tags};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    Zero,
    UniformRandom { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    FlipTrueLabel,
    Fixed(Label),
}

impl TargetPolicy {
    /// Pure function from the true label to the attack target.
    pub fn target_for(self, true_label: Label) -> Label {
        match self {
            TargetPolicy::FlipTrueLabel => true_label.flip(),
            TargetPolicy::Fixed(label) => label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Perturbation bound as the integer numerator of k/255.
    pub epsilon_k: u8,
    pub steps: usize,
    pub step_size: f64,
    pub init: AttackInit,
    pub target_policy: TargetPolicy,
}

impl AttackConfig {
    pub fn new(epsilon_k: u8) -> Self {
        Self {
            epsilon_k,
            steps: 10,
            step_size: 0.05,
            init: AttackInit::Zero,
            target_policy: TargetPolicy::FlipTrueLabel,
        }
    }

    pub fn epsilon(&self) -> f64 {
        f64::from(self.epsilon_k) / 255.0
    }

    /// Rejects epsilon = 0 and non-positive step sizes. `steps == 0` is the
    /// documented degenerate case (the projected init is returned unchanged).
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_k == 0 {
            return Err(Error::InvalidConfig(
                "epsilon_k must lie in 1..=255".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("step_size must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub delta: Tensor,
    /// Ensemble loss before the first step and after each step: steps+1 values.
    pub loss_trace: Vec<f64>,
    /// Per ensemble member: does the member predict the target label at 0.5?
    pub success_per_detector: Vec<(String, bool)>,
    pub target: Label,
}

/// Mean BCE of the ensemble's logits against the target label, evaluated at
/// the given (already perturbed) image.
pub fn ensemble_loss(image: &Tensor, detectors: &[&dyn Model], target: Label) -> Result<f64> {
    let mut graph = Graph::new();
    let x = graph.leaf(image.clone());
    let loss = ensemble_loss_node(&mut graph, x, detectors, target)?;
    graph.value(loss).scalar_value()
}

fn ensemble_loss_node(
    graph: &mut Graph,
    image: crate::graph::NodeId,
    detectors: &[&dyn Model],
    target: Label,
) -> Result<crate::graph::NodeId> {
    if detectors.is_empty() {
        return Err(Error::EmptyInput("ensemble_loss: zero detectors"));
    }
    let mut total = None;
    for detector in detectors {
        let logit = detector.logit_node(graph, image)?;
        let loss = graph.bce_with_logit(logit, target.as_u8())?;
        total = Some(match total {
            None => loss,
            Some(acc) => graph.add(acc, loss)?,
        });
    }
    graph.mul_scalar(total.expect("nonempty"), 1.0 / detectors.len() as f64)
}

fn loss_and_gradient(
    image: &Tensor,
    detectors: &[&dyn Model],
    target: Label,
) -> Result<(f64, Tensor)> {
    let mut graph = Graph::new();
    let x = graph.leaf(image.clone());
    let loss = ensemble_loss_node(&mut graph, x, detectors, target)?;
    let value = graph.value(loss).scalar_value()?;
    let mut grads = graph.backward(loss, &[x])?;
    Ok((value, grads.remove(&x).expect("image gradient")))
}

/// Clamp delta onto the epsilon ball, then intersect with the pixel box.
///
/// Each coordinate is settled to a floating-point fixed point so that all
/// three invariants hold simultaneously on the stored values:
/// |delta|_inf <= eps, adversarial == clamp(clean + delta, 0, 1), and
/// adversarial - clean == delta entrywise. When rounding makes the raw
/// difference drift past eps, the delta is nudged one ulp toward zero; zero is
/// always a valid fixed point, so this terminates.
fn project(clean: &Tensor, delta: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let n = clean.numel();
    let mut deltas = Vec::with_capacity(n);
    let mut advs = Vec::with_capacity(n);
    for (&c, &d0) in clean.data().iter().zip(delta.data()) {
        let (d, a) = project_coord(c, d0, eps);
        deltas.push(d);
        advs.push(a);
    }
    Ok((
        Tensor::new(clean.shape().to_vec(), deltas)?,
        Tensor::new(clean.shape().to_vec(), advs)?,
    ))
}

fn project_coord(c: f64, d0: f64, eps: f64) -> (f64, f64) {
    let mut d = d0.clamp(-eps, eps);
    loop {
        let a = (c + d).clamp(0.0, 1.0);
        let diff = a - c;
        if diff == d {
            return (d, a);
        }
        d = if diff.abs() <= eps && diff.abs() < d.abs() {
            diff
        } else {
            toward_zero(d)
        };
    }
}

fn toward_zero(v: f64) -> f64 {
    if v > 0.0 {
        v.next_down()
    } else if v < 0.0 {
        v.next_up()
    } else {
        0.0
    }
}

fn init_delta(clean: &Tensor, cfg: &AttackConfig) -> Tensor {
    match cfg.init {
        AttackInit::Zero => Tensor::zeros(clean.shape().to_vec()),
        AttackInit::UniformRandom { seed } => {
            let eps = cfg.epsilon();
            let mut rng = derive_rng(seed, tags::ATTACK_INIT, 0);
            let data = (0..clean.numel())
                .map(|_| rng.gen_range(-eps..=eps))
                .collect();
            Tensor::new(clean.shape().to_vec(), data).expect("finite init")
        }
    }
}

/// Targeted L-infinity PGD:
/// delta <- clamp(delta - alpha * sign(grad), -eps, eps), box-intersected every
/// iteration; the loss trace records the value before the first step and after
/// each step; the last iterate is returned.
pub fn pgd_attack(
    clean: &Tensor,
    true_label: Label,
    detectors: &[&dyn Model],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    if detectors.is_empty() {
        return Err(Error::EmptyInput("pgd_attack: zero detectors"));
    }
    if clean.min() < 0.0 || clean.max() > 1.0 {
        return Err(Error::InvalidArgument(
            "clean image pixels must lie in [0,1]".into(),
        ));
    }
    let eps = cfg.epsilon();
    let target = cfg.target_policy.target_for(true_label);

    let (mut delta, mut adversarial) = project(clean, &init_delta(clean, cfg), eps)?;
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        if step == cfg.steps {
            // Final iterate: record the loss, no further gradient needed.
            loss_trace.push(ensemble_loss(&adversarial, detectors, target)?);
            break;
        }
        let (loss, grad) = loss_and_gradient(&adversarial, detectors, target)?;
        loss_trace.push(loss);
        let step_tensor = grad.sign().scale(cfg.step_size)?;
        let candidate = delta.sub(&step_tensor)?;
        let projected = project(clean, &candidate, eps)?;
        delta = projected.0;
        adversarial = projected.1;
    }

    let mut success_per_detector = Vec::with_capacity(detectors.len());
    for detector in detectors {
        let predicted = if detector.probability(&adversarial)? >= 0.5 {
            Label::Generated
        } else {
            Label::Real
        };
        success_per_detector.push((detector.id(), predicted == target));
    }

    debug_assert!(delta.linf_norm() <= eps);
    debug_assert!(adversarial.min() >= 0.0 && adversarial.max() <= 1.0);

    Ok(AttackResult {
        adversarial,
        delta,
        loss_trace,
        success_per_detector,
        target,
    })
}

/// For each detector, the ensemble of all the others, order-preserving.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOneOut {
    pub held_out: usize,
    pub members: Vec<usize>,
}

pub fn leave_one_out_ensembles(detector_count: usize) -> Result<Vec<LeaveOneOut>> {
    if detector_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs at least 2 detectors, got {detector_count}"
        )));
    }
    Ok((0..detector_count)
        .map(|held_out| LeaveOneOut {
            held_out,
            members: (0..detector_count).filter(|&i| i != held_out).collect(),
        })
        .collect())
}

/// Outcome of attacking one manifest record.
#[derive(Debug, Clone)]
pub struct RecordAttack {
    pub record: ManifestRecord,
    pub result: std::result::Result<AttackResult, String>,
}

#[derive(Debug)]
pub struct DatasetAttack {
    /// Same order as the input manifest records.
    pub outcomes: Vec<RecordAttack>,
}

impl DatasetAttack {
    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.outcomes
            .iter()
            .filter_map(|o| {
                o.result
                    .as_ref()
                    .err()
                    .map(|e| (o.record.id.as_str(), e.as_str()))
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let failures = self.failures();
        if failures.is_empty() {
            format!("{} records attacked, no failures", self.outcomes.len())
        } else {
            format!(
                "{} records attacked, {} failed: {}",
                self.outcomes.len(),
                failures.len(),
                failures
                    .iter()
                    .map(|(id, e)| format!("{id} ({e})"))
                    .collect::<Vec<_>>()
                    .join("; ")
            )
        }
    }
}

/// Attack every record of a manifest. Unreadable or invalid records become
/// per-record error entries; output order equals input order regardless of
/// `parallelism`, and results are deterministic for a fixed config.
pub fn attack_dataset(
    records: &[ManifestRecord],
    load: impl Fn(&ManifestRecord) -> Result<Tensor> + Sync,
    detectors: &[&dyn Model],
    cfg: &AttackConfig,
    parallelism: usize,
) -> Result<DatasetAttack> {
    use rayon::prelude::*;
    cfg.validate()?;
    if detectors.is_empty() {
        return Err(Error::EmptyInput("attack_dataset: zero detectors"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes = pool.install(|| {
        records
            .par_iter()
            .map(|record| {
                let result = load(record)
                    .and_then(|image| {
                        // Per-record init stream for random starts.
                        let record_cfg = match cfg.init {
                            AttackInit::Zero => *cfg,
                            AttackInit::UniformRandom { seed } => AttackConfig {
                                init: AttackInit::UniformRandom {
                                    seed: mix64(seed, tags::RECORD_SEED, record.seed),
                                },
                                ..*cfg
                            },
                        };
                        pgd_attack(&image, record.label, detectors, &record_cfg)
                    })
                    .map_err(|e| e.to_string());
                RecordAttack {
                    record: record.clone(),
                    result,
                }
            })
            .collect()
    });
    Ok(DatasetAttack { outcomes })
}
